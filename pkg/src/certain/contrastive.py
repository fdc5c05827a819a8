"""Bidirectional infoNCE pretraining of the two encoders.

The encoders are those of :class:`certain.net.FusionNet`; each modality gets an
affine projection followed by L2 normalization. Checkpoints are selected by
cross-modal top-1 retrieval accuracy on the validation split.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen
from .errors import DomainError, NumericError, ParseError
from .net import FusionNet, read_checkpoint, write_checkpoint
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class ContrastiveConfig:
    lr: float = 0.01
    epochs: int = 15
    batch_size: int = 64
    temperature: float = 0.1
    d_proj: int = 16
    d_embed: int = 32
    seed: int = 0


@dataclass
class ProjectionHeads:
    w_ehr: np.ndarray
    b_ehr: np.ndarray
    w_cxr: np.ndarray
    b_cxr: np.ndarray

    def flat(self):
        return np.concatenate([self.w_ehr.ravel(), self.b_ehr, self.w_cxr.ravel(), self.b_cxr])

    @classmethod
    def from_flat(cls, vec, d_embed, d_proj):
        k = d_embed * d_proj
        parts = np.split(np.asarray(vec, dtype=np.float64), [k, k + d_proj, 2 * k + d_proj])
        return cls(parts[0].reshape(d_embed, d_proj), parts[1],
                   parts[2].reshape(d_embed, d_proj), parts[3])

    @classmethod
    def init(cls, d_embed, d_proj, rng):
        bound = 1.0 / np.sqrt(d_embed)
        return cls(rng.uniform(-bound, bound, (d_embed, d_proj)),
                   rng.uniform(-bound, bound, d_proj),
                   rng.uniform(-bound, bound, (d_embed, d_proj)),
                   rng.uniform(-bound, bound, d_proj))


def l2_normalize(u):
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    return u / norm, norm


def _normalize_backward(z, norm, dz):
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def info_nce(z_a, z_b, temperature):
    """Mean over rows of ``-log softmax_j(<z_a^i, z_b^j>/t)[i]``."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError("z_a and z_b must be matrices of equal shape")
    logp = _log_softmax(z_a @ z_b.T / temperature)
    return float(-np.mean(np.diag(logp)))


def info_nce_grad(z_a, z_b, temperature):
    """Loss and gradients ``(loss, dz_a, dz_b)`` of :func:`info_nce`."""
    loss = info_nce(z_a, z_b, temperature)
    n = z_a.shape[0]
    probs = np.exp(_log_softmax(z_a @ z_b.T / temperature))
    g = (probs - np.eye(n)) / (n * temperature)
    return loss, g @ z_b, g.T @ z_a


def bidirectional_loss_grad(z_ehr, z_cxr, temperature):
    l1, da1, db1 = info_nce_grad(z_ehr, z_cxr, temperature)
    l2, db2, da2 = info_nce_grad(z_cxr, z_ehr, temperature)
    return l1 + l2, da1 + da2, db1 + db2


class ContrastiveModel:
    """Encoder parameters plus projection heads."""

    def __init__(self, net, heads, d_proj):
        self.net = net
        self.heads = heads
        self.d_proj = d_proj

    @property
    def theta_h(self):
        return self.net.params[self.net.partition[0]].copy()

    def project(self, seq, img, keep_cache=False):
        out, cache = self.net.forward_batch(seq, img, keep_cache=True)
        h = self.heads
        z_e, n_e = l2_normalize(out.embedding_ehr @ h.w_ehr + h.b_ehr)
        z_c, n_c = l2_normalize(out.embedding_cxr @ h.w_cxr + h.b_cxr)
        if keep_cache:
            return z_e, z_c, (out, cache, n_e, n_c)
        return z_e, z_c

    def loss_and_grads(self, seq, img, temperature):
        z_e, z_c, (out, cache, n_e, n_c) = self.project(seq, img, keep_cache=True)
        loss, dz_e, dz_c = bidirectional_loss_grad(z_e, z_c, temperature)
        du_e = _normalize_backward(z_e, n_e, dz_e)
        du_c = _normalize_backward(z_c, n_c, dz_c)
        h = self.heads
        g_heads = ProjectionHeads(out.embedding_ehr.T @ du_e, du_e.sum(axis=0),
                                  out.embedding_cxr.T @ du_c, du_c.sum(axis=0))
        g_net = self.net.backward(cache, np.zeros(len(seq)), du_e @ h.w_ehr.T, du_c @ h.w_cxr.T)
        # the logit head plays no part in pretraining
        g_net[self.net.partition[1]] = 0.0
        return loss, g_net, g_heads.flat()


def retrieval_accuracy(z_ehr, z_cxr):
    """Fraction of rows whose most similar cross-modal row is their own pair."""
    sims = z_ehr @ z_cxr.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(z_ehr))))


def pretrain(dataset, config=None):
    """Train encoders + projection heads on ``dataset.train`` with Adam.

    Returns ``(model, history)``; ``model`` is the checkpoint with the best
    validation retrieval accuracy over epochs.
    """
    config = config or ContrastiveConfig()
    rng = np.random.default_rng([config.seed, 101])
    net = FusionNet(dataset.manifest.dims, d_embed=config.d_embed, seed=config.seed)
    heads = ProjectionHeads.init(config.d_embed, config.d_proj, rng)
    model = ContrastiveModel(net, heads, config.d_proj)
    seq, img, _ = datagen.stack(dataset.train)
    val_seq, val_img, _ = datagen.stack(dataset.val) if dataset.val else (seq, img, None)
    n = len(seq)
    if n < 2:
        raise ValueError("contrastive pretraining needs at least 2 training pairs")
    bs = min(config.batch_size, n)
    n_net = net.n_params
    params = np.concatenate([net.params, heads.flat()])
    opt = AdamState.zeros(params.size)

    def set_params(vec):
        model.net.params = vec[:n_net].copy()
        model.heads = ProjectionHeads.from_flat(vec[n_net:], config.d_embed, config.d_proj)

    def evaluate():
        z_e, z_c = model.project(val_seq, val_img)
        return retrieval_accuracy(z_e, z_c), bidirectional_loss_grad(z_e, z_c, config.temperature)[0]

    acc0, loss0 = evaluate()
    history = [{"epoch": 0, "train_loss": None, "val_loss": loss0, "val_retrieval": acc0}]
    best = (acc0, params.copy())
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        # drop the ragged final batch: infoNCE needs >= 2 rows
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            loss, g_net, g_heads = model.loss_and_grads(seq[idx], img[idx], config.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"contrastive loss diverged at epoch {epoch} (lr={config.lr})")
            params, opt = adam_step(params, np.concatenate([g_net, g_heads]), opt, config.lr)
            set_params(params)
            losses.append(loss)
        acc, vloss = evaluate()
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": vloss, "val_retrieval": acc})
        log.debug("contrastive epoch %d loss %.4f val_acc %.3f", epoch, np.mean(losses), acc)
        if acc > best[0]:
            best = (acc, params.copy())
    set_params(best[1])
    return model, history


def pretrain_search(dataset, config=None, n_trials=10, lr_range=(1e-2, 1e-1), seed=0):
    """Random search over log-uniform learning rates; keeps the best checkpoint."""
    config = config or ContrastiveConfig()
    rng = np.random.default_rng([seed, 103])
    lrs = np.exp(rng.uniform(np.log(lr_range[0]), np.log(lr_range[1]), size=n_trials))
    best = None
    trials = []
    for i, lr in enumerate(lrs):
        cfg = ContrastiveConfig(**{**config.__dict__, "lr": float(lr), "seed": config.seed + i})
        try:
            model, hist = pretrain(dataset, cfg)
        except NumericError as exc:
            trials.append({"lr": float(lr), "failed": str(exc)})
            continue
        score = max(h["val_retrieval"] for h in hist)
        trials.append({"lr": float(lr), "val_retrieval": score})
        if best is None or score > best[0]:
            best = (score, model, cfg)
    if best is None:
        raise NumericError("every contrastive pretraining trial diverged")
    return best[1], best[2], trials


def embed(model, samples):
    """Unit-norm projected embeddings ``(phi_ehr, phi_cxr)`` for each sample."""
    seq, img, _ = datagen.stack(samples)
    return model.project(seq, img)


def write_embeddings(path, ids, phi_ehr, phi_cxr):
    with Path(path).open("w") as fh:
        for i, a, b in zip(ids, phi_ehr, phi_cxr):
            fh.write(json.dumps({"id": i, "phi_ehr": a.tolist(), "phi_cxr": b.tolist()},
                                separators=(",", ":")) + "\n")


def read_embeddings(path):
    ids, ehr, cxr = [], [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(rec["id"])
                ehr.append(rec["phi_ehr"])
                cxr.append(rec["phi_cxr"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"bad embedding record ({exc})", line=lineno) from None
    return ids, np.asarray(ehr, dtype=np.float64), np.asarray(cxr, dtype=np.float64)


def save_model(model, path, extra=None):
    header = model.net.header()
    header.update({"kind": "contrastive", "d_proj": model.d_proj, **(extra or {})})
    write_checkpoint(path, header, {"params": model.net.params, "heads": model.heads.flat()})


def load_model(path):
    header, blocks = read_checkpoint(path)
    if header.get("kind") != "contrastive":
        raise ParseError(f"{path} is not a contrastive checkpoint (run `certain pretrain`)")
    net = FusionNet.from_header(header)
    net.params = blocks["params"].copy()
    heads = ProjectionHeads.from_flat(blocks["heads"], net.d_embed, header["d_proj"])
    return ContrastiveModel(net, heads, header["d_proj"])
