"""Context sets of a-priori high-uncertainty inputs.

A context set holds unlabeled ``(seq, img)`` pairs together with a provenance
tag. Sources are modality corruptions of training inputs, samples whose two
modality embeddings disagree in the contrastive latent space, and (optionally)
the highest-loss training samples of a trained model.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corruptions, datagen
from .corruptions import DEFAULT_PARAMS, IMG_KINDS, SEQ_KINDS, corrupt_img, corrupt_seq
from .errors import ConfigError

log = logging.getLogger(__name__)

STRATEGIES = ("corruptions", "inter", "inter_intra", "medcertain_I", "medcertain_II", "hem")
CONTEXT_FORMAT = "certain-context/1"


@dataclass
class ContextSet:
    ids: list
    seq: np.ndarray
    img: np.ndarray
    provenance: list

    def __len__(self):
        return len(self.ids)

    @classmethod
    def empty(cls, dims):
        T, F, H, W = dims
        return cls([], np.zeros((0, T, F)), np.zeros((0, H, W)), [])

    @classmethod
    def from_samples(cls, samples, provenance):
        if not samples:
            raise ValueError("use ContextSet.empty for an empty set")
        seq, img, _ = datagen.stack(samples)
        tags = [provenance] * len(samples) if isinstance(provenance, str) else list(provenance)
        return cls([s.id for s in samples], seq, img, tags)

    def union(self, other):
        return ContextSet(self.ids + other.ids, np.concatenate([self.seq, other.seq]),
                          np.concatenate([self.img, other.img]),
                          self.provenance + other.provenance)

    def counts(self):
        out = {}
        for tag in self.provenance:
            out[tag] = out.get(tag, 0) + 1
        return out


@dataclass
class SimilarityStats:
    d: np.ndarray
    gamma1: float
    sigma: float
    v: float
    t: float
    gamma2: float = float("nan")
    gamma3: float = float("nan")
    gamma4: float = float("nan")
    sigma4: float = float("nan")
    c_thresh: float = float("nan")
    t4: float = float("nan")
    scores: np.ndarray = field(default=None, repr=False)
    excluded: int = 0


# --- corruptions -------------------------------------------------------------

def build_corruptions(samples, seq_kinds=SEQ_KINDS, img_kinds=IMG_KINDS,
                      params=DEFAULT_PARAMS, seed=0, per_sample="one"):
    """Corrupted copies of ``samples``; each entry corrupts one modality only.

    ``per_sample="all"`` applies every listed kind once to every sample
    (``len(kinds) * N`` entries); ``"one"`` draws a single kind per sample
    (``N`` entries).
    """
    if per_sample not in ("one", "all"):
        raise ConfigError(f"per_sample must be 'one' or 'all', got {per_sample!r}")
    params.validate()
    kinds = [("seq", k) for k in seq_kinds] + [("img", k) for k in img_kinds]
    if not kinds or not samples:
        raise ConfigError("need at least one sample and one corruption kind")
    ids, seqs, imgs, tags = [], [], [], []
    for idx, s in enumerate(samples):
        if per_sample == "all":
            chosen = range(len(kinds))
        else:
            chosen = [int(np.random.default_rng([seed, 29, idx]).integers(len(kinds)))]
        for k in chosen:
            modality, kind = kinds[k]
            rng = np.random.default_rng([seed, 31, idx, k])
            ids.append(s.id)
            if modality == "seq":
                seqs.append(corrupt_seq(s.seq, kind, params, rng))
                imgs.append(s.img.copy())
            else:
                seqs.append(s.seq.copy())
                imgs.append(corrupt_img(s.img, kind, params, rng))
            tags.append(f"corruption:{kind}")
    return ContextSet(ids, np.stack(seqs), np.stack(imgs), tags)


# --- latent similarity -------------------------------------------------------

def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    valid = (na > 0) & (nb > 0)
    cos = np.full(len(a), np.nan)
    cos[valid] = np.sum(a[valid] * b[valid], axis=1) / (na[valid] * nb[valid])
    return np.clip(cos, -1.0, 1.0), valid


def _mean_std(x):
    # two-pass, fixed order
    if min(x) == max(x):
        return x[0], 0.0
    mean = math.fsum(x) / len(x)
    return mean, math.sqrt(math.fsum((xi - mean) ** 2 for xi in x) / len(x))


def inter_stats(phi_ehr, phi_cxr, v=1.5):
    phi_ehr = np.asarray(phi_ehr, dtype=np.float64)
    phi_cxr = np.asarray(phi_cxr, dtype=np.float64)
    if len(phi_ehr) == 0:
        raise ValueError("no embeddings")
    d, valid = _cosine_rows(phi_ehr, phi_cxr)
    excluded = int((~valid).sum())
    if excluded:
        log.warning("%d samples with zero-norm embeddings excluded from similarity selection", excluded)
    if not valid.any():
        raise ValueError("every embedding has zero norm")
    gamma1, sigma = _mean_std(d[valid].tolist())
    return SimilarityStats(d=d, gamma1=gamma1, sigma=sigma, v=v, t=gamma1 - v * sigma,
                           excluded=excluded), valid


def select_inter(phi_ehr, phi_cxr, v=1.5):
    """Indices with cross-modal cosine below ``mean - v * std``.

    Returns ``(indices, stats)``; zero-norm embeddings are never selected.
    """
    stats, valid = inter_stats(phi_ehr, phi_cxr, v)
    with np.errstate(invalid="ignore"):
        sel = valid & (stats.d < stats.t)
    return np.flatnonzero(sel), stats


def select_inter_intra(phi_ehr, phi_cxr, c_thresh=1.5):
    """Indices whose averaged inter/intra-modal cosine falls below ``gamma4 - c * sigma4``.

    Per sample ``s_i = (cos(e_i, c_i) + cos(e_i, mean_e) + cos(c_i, mean_c)) / 3``.
    """
    phi_ehr = np.asarray(phi_ehr, dtype=np.float64)
    phi_cxr = np.asarray(phi_cxr, dtype=np.float64)
    stats, valid = inter_stats(phi_ehr, phi_cxr)
    mean_e = phi_ehr[valid].mean(axis=0)
    mean_c = phi_cxr[valid].mean(axis=0)
    intra_e, ve = _cosine_rows(phi_ehr, np.broadcast_to(mean_e, phi_ehr.shape))
    intra_c, vc = _cosine_rows(phi_cxr, np.broadcast_to(mean_c, phi_cxr.shape))
    valid = valid & ve & vc
    scores = (stats.d + intra_e + intra_c) / 3.0
    gamma1, _ = _mean_std(stats.d[valid].tolist())
    gamma2, _ = _mean_std(intra_e[valid].tolist())
    gamma3, _ = _mean_std(intra_c[valid].tolist())
    gamma4, sigma4 = _mean_std(scores[valid].tolist())
    stats.gamma1, stats.gamma2, stats.gamma3 = gamma1, gamma2, gamma3
    stats.gamma4, stats.sigma4 = gamma4, sigma4
    stats.c_thresh = c_thresh
    stats.t4 = gamma4 - c_thresh * sigma4
    stats.scores = scores
    with np.errstate(invalid="ignore"):
        sel = valid & (scores < stats.t4)
    return np.flatnonzero(sel), stats


# --- hard example mining -----------------------------------------------------

def per_sample_bce(probs, labels):
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return -(labels * np.log(p) + (1 - labels) * np.log(1.0 - p))


def hem_indices(losses, fraction):
    """Indices of the ``ceil(fraction * N)`` largest losses (stable on ties)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"hem fraction must lie in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(losses))
    order = np.argsort(-np.asarray(losses), kind="stable")
    return np.sort(order[:k])


def select_hem(net, samples, fraction=0.2, theta=None):
    """Top-``fraction`` highest-BCE training inputs under a trained model."""
    seq, img, labels = datagen.stack(samples)
    probs = net.forward_batch(seq, img, theta).prob
    idx = hem_indices(per_sample_bce(probs, labels), fraction)
    return ContextSet.from_samples([samples[i] for i in idx], "hem")


# --- combination -------------------------------------------------------------

def build(strategy, samples, embeddings=None, v=1.5, c_thresh=1.5, params=DEFAULT_PARAMS,
          seed=0, hem_model=None, hem_fraction=0.2, corruptions_per_sample="one"):
    """Assemble the context set for one named strategy.

    ``embeddings`` is ``(phi_ehr, phi_cxr)`` aligned with ``samples``; required
    for the similarity-based strategies. ``hem_model`` is ``(net, theta)``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown context strategy {strategy!r}; choose from {STRATEGIES}")
    needs_emb = strategy in ("inter", "inter_intra", "medcertain_I", "medcertain_II")
    if needs_emb and embeddings is None:
        raise ConfigError(f"strategy {strategy!r} needs contrastive embeddings "
                          "(run `certain pretrain` first)")
    if needs_emb and len(embeddings[0]) != len(samples):
        raise ConfigError("embeddings are not aligned with the samples")
    T, F = samples[0].seq.shape
    H, W = samples[0].img.shape
    empty = ContextSet.empty((T, F, H, W))
    if strategy == "hem":
        if hem_model is None:
            raise ConfigError("strategy 'hem' needs a trained deterministic model")
        net, theta = hem_model
        return select_hem(net, samples, hem_fraction, theta)
    out = empty
    if strategy in ("corruptions", "medcertain_I", "medcertain_II"):
        out = out.union(build_corruptions(samples, params=params, seed=seed,
                                           per_sample=corruptions_per_sample))
    if strategy in ("inter", "medcertain_I"):
        idx, _ = select_inter(*embeddings, v=v)
        if len(idx):
            out = out.union(ContextSet.from_samples([samples[i] for i in idx], "similarity:inter"))
    if strategy in ("inter_intra", "medcertain_II"):
        idx, _ = select_inter_intra(*embeddings, c_thresh=c_thresh)
        if len(idx):
            out = out.union(ContextSet.from_samples([samples[i] for i in idx],
                                                    "similarity:inter_intra"))
    return out


# --- persistence ---------------------------------------------------------------

def save(context, path, strategy=None):
    """Write ``<path>`` as JSON Lines (label null + provenance) and a sibling manifest."""
    path = Path(path)
    with path.open("w") as fh:
        for i, tag in enumerate(context.provenance):
            rec = {"id": context.ids[i], "seq": context.seq[i].tolist(),
                   "img": context.img[i].tolist(), "label": None,
                   "group": {"age_band": "A1", "sex": "M"}, "mismatched": False,
                   "provenance": tag}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    manifest = {"format": CONTEXT_FORMAT, "strategy": strategy, "count": len(context),
                "provenance_counts": context.counts()}
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load(path):
    samples, records = datagen.read_jsonl(path, allow_null_label=True)
    if not samples:
        raise ConfigError(f"context file {path} is empty")
    tags = [rec.get("provenance", "unknown") for rec in records]
    return ContextSet.from_samples(samples, tags)


__all__ = [
    "ContextSet", "SimilarityStats", "build", "build_corruptions", "select_inter",
    "select_inter_intra", "select_hem", "hem_indices", "save", "load", "corruptions",
]
