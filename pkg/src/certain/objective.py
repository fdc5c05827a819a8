"""Variational training objective and the training loop.

The quantity minimized per step is

    loss = nll + (kl_scale * (kl_h + kl_L) + unc_cost) / n_data

where ``nll`` is the MC-averaged mean binary cross-entropy of the training
batch, ``kl_h``/``kl_L`` are the analytic KL terms against the base prior and
``unc_cost`` is the MC-averaged Mahalanobis cost of the context batches. Both
prior terms are divided by the training set size so that the per-batch loss
is an unbiased estimate of the negative ELBO divided by ``n_data``.
``StepReport.objective`` is ``-loss`` (higher is better).
"""
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import datagen, evaluate, varparams
from .errors import ConfigError, NumericError
from .net import FusionNet, read_checkpoint, write_checkpoint
from .optim import AdamState, adam_step, cosine_lr

log = logging.getLogger(__name__)

MAX_COND = 1e12
HISTORY_COLUMNS = ("epoch", "nll", "kl_h", "kl_L", "unc_cost", "val_auroc", "val_auprc")


@dataclass
class ObjectiveConfig:
    tau: float = 1.0
    s1: float = 0.01
    s2: float = 1.0
    J: int = 1
    J_prime: int = 1
    context_batch_size: int = 16
    kl_scale: float = 1.0

    def validate(self):
        if self.tau < 0 or self.s1 < 0 or not self.s2 > 0:
            raise ConfigError("need tau >= 0, s1 >= 0 and s2 > 0")
        if self.J < 1 or self.J_prime < 1:
            raise ConfigError("J and J_prime must be >= 1")
        if self.context_batch_size < 1:
            raise ConfigError("context batches must hold at least one point")
        if self.kl_scale < 0:
            raise ConfigError("kl_scale must be >= 0")


@dataclass
class StepReport:
    nll: float
    kl_h: float
    kl_L: float
    unc_cost: float
    objective: float
    grad_norm: float


def bce_nll(probs, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def context_covariance(features, s1, s2):
    """``C = s1 * H H^T + s2 * I`` for context features ``H`` of shape (M, D)."""
    features = np.asarray(features, dtype=np.float64)
    return s1 * features @ features.T + s2 * np.eye(len(features))


def _factor(cov):
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise NumericError(f"context covariance is ill-conditioned (cond={cond:.3g})")
    return cho_factor(cov)


def mahalanobis_cost(logits, features, tau=1.0, s1=0.0, s2=1.0, return_grad=False):
    """``tau * v^T C^{-1} v`` with ``v`` the context logits (zero targets).

    Solves against a Cholesky factor of ``C`` instead of forming its inverse.
    With ``return_grad`` also returns ``d cost / d logits``.
    """
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or len(v) < 1:
        raise ConfigError("context batch must contain at least one point")
    if len(features) != len(v):
        raise ConfigError("features and logits disagree on the context batch size")
    factor = _factor(context_covariance(features, s1, s2))
    cinv_v = cho_solve(factor, v)
    cost = float(tau * v @ cinv_v)
    if return_grad:
        return cost, 2.0 * tau * cinv_v
    return cost


@dataclass
class ContextBatch:
    seq: np.ndarray
    img: np.ndarray
    features: np.ndarray


def draw_context_batches(context, features, cfg, rng):
    """``J_prime`` batches of size ``M`` drawn uniformly without replacement."""
    n = len(context)
    if n == 0:
        raise ConfigError("context set is empty")
    m = min(cfg.context_batch_size, n)
    out = []
    for _ in range(cfg.J_prime):
        idx = np.sort(rng.choice(n, size=m, replace=False))
        out.append(ContextBatch(context.seq[idx], context.img[idx], features[idx]))
    return out


def objective_step(net, state, prior, batch, context_batches, cfg, rng, n_data, eps=None):
    """Loss terms and exact gradients w.r.t. ``(mu, log_var)`` for one step.

    Args:
        batch: ``(seq, img, labels)`` training arrays.
        context_batches: list of :class:`ContextBatch` (may be empty when
            ``cfg.tau == 0``).
        eps: optional list of ``J`` frozen standard-normal draws; when given
            they replace sampling from ``rng``.

    Returns ``(StepReport, grad_mu, grad_log_var)`` where gradients are of the
    loss ``-objective``.
    """
    cfg.validate()
    seq, img, labels = batch
    if len(labels) == 0:
        raise ConfigError("empty training batch")
    use_context = cfg.tau > 0 and len(context_batches) > 0
    if cfg.tau > 0 and not context_batches:
        raise ConfigError("tau > 0 needs at least one context batch")
    n_train = len(labels)
    if use_context:
        all_seq = np.concatenate([seq] + [c.seq for c in context_batches])
        all_img = np.concatenate([img] + [c.img for c in context_batches])
        factors = [_factor(context_covariance(c.features, cfg.s1, cfg.s2))
                   for c in context_batches]
    else:
        all_seq, all_img = seq, img
    g_mu = np.zeros_like(state.mu)
    g_lv = np.zeros_like(state.log_var)
    nll_total = 0.0
    cost_total = 0.0
    for j in range(cfg.J):
        if eps is None:
            theta, e = varparams.sample(state, rng)
        else:
            e = eps[j]
            theta = state.mu + np.exp(0.5 * state.log_var) * e
        out, cache = net.forward_batch(all_seq, all_img, theta, keep_cache=True)
        probs = out.prob[:n_train]
        nll = bce_nll(probs, labels)
        d_logit = np.zeros(len(all_seq))
        d_logit[:n_train] = (probs - labels) / (n_train * cfg.J)
        cost = 0.0
        if use_context:
            start = n_train
            for c, factor in zip(context_batches, factors):
                v = out.logit[start:start + len(c.seq)]
                cinv_v = cho_solve(factor, v)
                cost += cfg.tau * float(v @ cinv_v) / cfg.J_prime
                d_logit[start:start + len(c.seq)] = (
                    2.0 * cfg.tau * cinv_v / (cfg.J_prime * cfg.J * n_data))
                start += len(c.seq)
        grad_theta = net.backward(cache, d_logit)
        gm, gl = varparams.pathwise_grad(state, e, grad_theta)
        g_mu += gm
        g_lv += gl
        nll_total += nll
        cost_total += cost
    nll = nll_total / cfg.J
    unc_cost = cost_total / cfg.J
    kl_h, kl_l = varparams.kl_to_prior(state, prior)
    kg_mu, kg_lv = varparams.kl_grad(state, prior)
    w = cfg.kl_scale / n_data
    g_mu += w * kg_mu
    g_lv += w * kg_lv
    mask = state.trainable
    g_mu[~mask] = 0.0
    g_lv[~mask] = 0.0
    loss = nll + (cfg.kl_scale * (kl_h + kl_l) + unc_cost) / n_data
    for name, value in (("nll", nll), ("kl_h", kl_h), ("kl_L", kl_l), ("unc_cost", unc_cost)):
        if not np.isfinite(value):
            raise NumericError(f"non-finite {name} term ({value})")
    report = StepReport(nll, kl_h, kl_l, unc_cost, -loss,
                        float(np.sqrt(np.sum(g_mu ** 2) + np.sum(g_lv ** 2))))
    return report, g_mu, g_lv


def deterministic_step(net, theta, batch, kl_scale, prior_variance, n_data):
    """Mean BCE plus a Gaussian weight penalty ``kl_scale * |theta|^2 / (2 var n)``."""
    seq, img, labels = batch
    out, cache = net.forward_batch(seq, img, theta, keep_cache=True)
    nll = bce_nll(out.prob, labels)
    grad = net.backward(cache, (out.prob - labels) / len(labels))
    w = kl_scale / (prior_variance * n_data)
    penalty = 0.5 * w * float(theta @ theta)
    grad = grad + w * theta
    if not np.isfinite(nll):
        raise NumericError("non-finite nll term")
    return nll, penalty, grad


# --- training loop -------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "deterministic"
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    context_batch_size: int = 16
    kl_scale: float = 1.0
    tau: float = 1.0
    s1: float = 0.01
    s2: float = 1.0
    prior_variance: float = 1.0
    stochastic_scope: str = "all"
    seed: int = 0
    J: int = 1
    J_prime: int = 1
    init_log_var: float = -10.0
    d_embed: int = 32
    prior_f_scale: float = 0.0  # accepted for config compatibility, unused

    def validate(self):
        if self.mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"mode must be deterministic or stochastic, got {self.mode!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr > 0, epochs >= 1, batch_size >= 1")
        if self.prior_variance <= 0:
            raise ConfigError("prior_variance must be positive")
        if self.stochastic_scope not in varparams.SCOPES:
            raise ConfigError(f"stochastic_scope must be one of {varparams.SCOPES}")
        self.objective_config().validate()

    def objective_config(self):
        return ObjectiveConfig(tau=self.tau, s1=self.s1, s2=self.s2, J=self.J,
                               J_prime=self.J_prime,
                               context_batch_size=self.context_batch_size,
                               kl_scale=self.kl_scale)


@dataclass
class TrainResult:
    net: FusionNet
    config: TrainConfig
    state: varparams.GaussianVariationalState = None
    prior: varparams.BasePrior = None
    history: list = field(default_factory=list)

    @property
    def stochastic(self):
        return self.state is not None

    def predict(self, samples, j_eval=32, seed=0):
        if self.state is None:
            return evaluate.predict(self.net, samples)
        return evaluate.predict(self.net, samples, state=self.state, j_eval=j_eval, seed=seed)


def _val_metrics(net, theta, val):
    if not val:
        return None, None
    seq, img, labels = datagen.stack(val)
    probs = net.forward_batch(seq, img, theta).prob
    return evaluate.auroc(probs, labels), evaluate.auprc(probs, labels)


def train(cfg, train_samples, val_samples=None, context=None, init=None):
    """Train a deterministic net or fine-tune a variational posterior.

    Args:
        cfg: :class:`TrainConfig`.
        context: :class:`certain.contextset.ContextSet` for stochastic runs; with
            ``None`` (or ``tau == 0``) the run uses the base prior only.
        init: deterministic :class:`TrainResult` or :class:`FusionNet` whose
            parameters initialize ``mu`` and define ``theta_h_star``; required
            for stochastic mode.

    The learning rate follows a cosine decay to zero over all steps. Per-epoch
    validation metrics use the posterior mean. The final-epoch parameters are
    returned.
    """
    cfg.validate()
    if not train_samples:
        raise ConfigError("no training samples")
    dims = (*train_samples[0].seq.shape, *train_samples[0].img.shape)
    seq, img, labels = datagen.stack(train_samples)
    n = len(labels)
    rng = np.random.default_rng([cfg.seed, 307])
    steps_per_epoch = -(-n // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history = []

    if cfg.mode == "deterministic":
        if init is not None:
            base = init.net if isinstance(init, TrainResult) else init
            net = FusionNet(base.dims, base.d_embed, base.channels)
            net.params = base.params.copy()
        else:
            net = FusionNet(dims, d_embed=cfg.d_embed, seed=cfg.seed)
        theta = net.params.copy()
        opt = AdamState.zeros(theta.size)
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            nlls = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                nll, _, grad = deterministic_step(net, theta, (seq[idx], img[idx], labels[idx]),
                                                  cfg.kl_scale, cfg.prior_variance, n)
                theta, opt = adam_step(theta, grad, opt, cosine_lr(cfg.lr, step, total))
                step += 1
                nlls.append(nll)
            va, vp = _val_metrics(net, theta, val_samples)
            history.append({"epoch": epoch, "nll": float(np.mean(nlls)), "kl_h": 0.0,
                            "kl_L": 0.0, "unc_cost": 0.0, "val_auroc": va, "val_auprc": vp})
        net.params = theta
        return TrainResult(net, cfg, history=history)

    if init is None:
        raise ConfigError("stochastic training needs a deterministic checkpoint to start from "
                          "(run `certain train` with mode=deterministic first)")
    base = init.net if isinstance(init, TrainResult) else init
    net = FusionNet(base.dims, base.d_embed, base.channels)
    theta_star = base.params.copy()
    net.params = theta_star.copy()
    sh, _ = net.partition
    prior = varparams.BasePrior.from_variance(theta_star[sh], cfg.prior_variance)
    state = varparams.GaussianVariationalState.from_params(
        theta_star, net.n_encoder, cfg.init_log_var, cfg.stochastic_scope)
    ocfg = cfg.objective_config()
    if context is not None and len(context) and cfg.tau > 0:
        features = _context_features(net, theta_star, context)
    else:
        context, features = None, None
        ocfg.tau = 0.0
    params = np.concatenate([state.mu, state.log_var])
    opt = AdamState.zeros(params.size)
    step = 0
    p = state.mu.size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        rows = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ctx = draw_context_batches(context, features, ocfg, rng) if context is not None else []
            report, g_mu, g_lv = objective_step(net, state, prior,
                                                (seq[idx], img[idx], labels[idx]),
                                                ctx, ocfg, rng, n)
            params, opt = adam_step(params, np.concatenate([g_mu, g_lv]), opt,
                                    cosine_lr(cfg.lr, step, total))
            state.mu, state.log_var = params[:p].copy(), params[p:].copy()
            step += 1
            rows.append(report)
        va, vp = _val_metrics(net, state.mu, val_samples)
        history.append({"epoch": epoch,
                        "nll": float(np.mean([r.nll for r in rows])),
                        "kl_h": rows[-1].kl_h, "kl_L": rows[-1].kl_L,
                        "unc_cost": float(np.mean([r.unc_cost for r in rows])),
                        "val_auroc": va, "val_auprc": vp})
        log.debug("epoch %d %s", epoch, history[-1])
    net.params = state.mu.copy()
    return TrainResult(net, cfg, state=state, prior=prior, history=history)


def _context_features(net, theta_star, context, batch_size=1024):
    """Penultimate activations of context inputs under the frozen starting parameters."""
    out = []
    for start in range(0, len(context), batch_size):
        sl = slice(start, start + batch_size)
        out.append(net.features(context.seq[sl], context.img[sl], theta_star))
    return np.concatenate(out)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float)
                        else row[c] for c in HISTORY_COLUMNS])


def config_dict(cfg):
    return asdict(cfg)


def save_result(result, path):
    """Checkpoint a :class:`TrainResult`; stochastic runs also store ``log_var`` and the prior mean."""
    header = result.net.header()
    header["mode"] = result.config.mode
    header["train_config"] = config_dict(result.config)
    blocks = {"params": result.net.params}
    if result.state is not None:
        header["stochastic_scope"] = result.state.scope
        header["prior"] = {"tau_h": float(result.prior.tau_h), "tau_L": float(result.prior.tau_L)}
        blocks["mu"] = result.state.mu
        blocks["log_var"] = result.state.log_var
        blocks["theta_h_star"] = result.prior.theta_h_star
    write_checkpoint(path, header, blocks)


def load_result(path):
    """Inverse of :func:`save_result`."""
    header, blocks = read_checkpoint(path)
    net = FusionNet.from_header(header)
    net.params = blocks["params"].copy()
    cfg = TrainConfig(**header.get("train_config", {}))
    if "log_var" not in blocks:
        return TrainResult(net, cfg)
    state = varparams.GaussianVariationalState(blocks["mu"].copy(), blocks["log_var"].copy(),
                                               net.n_encoder, header["stochastic_scope"])
    prior = varparams.BasePrior(blocks["theta_h_star"].copy(), header["prior"]["tau_h"],
                                header["prior"]["tau_L"])
    return TrainResult(net, cfg, state=state, prior=prior)
