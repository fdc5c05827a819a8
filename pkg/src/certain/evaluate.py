"""Predictive distributions, entropy scores and selective-prediction metrics."""
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import datagen, varparams

THRESHOLDS = tuple(range(100))
PROB_CLAMP = 1e-12


def binary_entropy(p):
    """Shannon entropy (nats) of a Bernoulli(p) prediction, clamped away from 0/1."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    return -(p * np.log(p) + q * np.log(q))


@dataclass
class PredictiveDistribution:
    """Monte Carlo predictive distribution for a batch of samples.

    ``mc_probs`` has shape ``(N, J)``; entropy is taken on the MC mean.
    """

    mc_probs: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def mean_prob(self):
        return self.mc_probs.mean(axis=1)

    @property
    def entropy(self):
        return binary_entropy(self.mean_prob)


def predict(net, samples, state=None, theta=None, j_eval=32, seed=0, batch_size=512):
    """MC predictive distribution of a deterministic net or a variational state.

    Deterministic prediction (``state is None``) always uses a single pass.
    """
    if j_eval < 1:
        raise ValueError("j_eval must be >= 1")
    seq, img, _ = datagen.stack(samples)
    if state is None:
        theta = net.params if theta is None else theta
        thetas = [theta]
    else:
        rng = np.random.default_rng([seed, 211])
        thetas = [varparams.sample(state, rng)[0] for _ in range(j_eval)]
    probs = np.empty((len(samples), len(thetas)))
    for j, th in enumerate(thetas):
        for start in range(0, len(samples), batch_size):
            sl = slice(start, start + batch_size)
            probs[sl, j] = net.forward_batch(seq[sl], img[sl], th).prob
    return PredictiveDistribution(probs, [s.id for s in samples])


def auroc(scores, labels):
    """Mann-Whitney AUROC with ties counted as one half; ``None`` if one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision over positives in descending-score order (stable ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def expected_calibration_error(probs, labels, n_bins=10):
    """Equal-width 10-bin ECE on confidence ``max(p, 1-p)`` (informational only)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(probs) == 0:
        return None
    conf = np.maximum(probs, 1.0 - probs)
    correct = (probs >= 0.5).astype(int) == labels
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        m = bins == b
        if m.any():
            ece += m.mean() * abs(correct[m].mean() - conf[m].mean())
    return float(ece)


@dataclass
class SelectiveReport:
    thresholds: list
    retained: list
    auroc: list
    auprc: list
    defined: list
    selective_auroc: float
    selective_auprc: float
    full_auroc: float
    full_auprc: float
    n_undefined: int
    ece_10bin: float = None
    n: int = 0
    flagged: bool = False
    subgroups: dict = field(default_factory=dict)

    def summary(self):
        return {"auroc": self.full_auroc, "auprc": self.full_auprc,
                "selective_auroc": self.selective_auroc,
                "selective_auprc": self.selective_auprc,
                "ece_10bin": self.ece_10bin, "n": self.n,
                "n_undefined_thresholds": self.n_undefined}

    def to_json(self):
        out = {"summary": self.summary(),
               "rows": [{"threshold": t, "retained": r, "auroc": a, "auprc": p, "defined": d}
                        for t, r, a, p, d in zip(self.thresholds, self.retained, self.auroc,
                                                 self.auprc, self.defined)]}
        if self.flagged:
            out["flagged"] = True
        if self.subgroups:
            out["subgroups"] = {k: v.to_json() for k, v in self.subgroups.items()}
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "retained", "auroc", "auprc", "defined"])
        for t, r, a, p, d in zip(self.thresholds, self.retained, self.auroc, self.auprc,
                                 self.defined):
            w.writerow([t, r, "" if a is None else repr(a), "" if p is None else repr(p),
                        int(d)])
        return buf.getvalue()


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def rejection_order(uncertainty):
    """Sample indices from most to least uncertain; ties keep input order."""
    return np.argsort(-np.asarray(uncertainty, dtype=np.float64), kind="stable")


def selective_sweep(probs, uncertainty, labels, groups=None, thresholds=THRESHOLDS):
    """AUROC/AUPRC on the retained set after rejecting the most uncertain samples.

    At threshold ``t`` percent the ``floor(t/100 * N)`` highest-uncertainty
    samples are dropped. Selective metrics average over thresholds at which the
    metric is defined.
    """
    probs = np.asarray(probs, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(probs)
    if n == 0:
        raise ValueError("selective_sweep needs at least one prediction")
    if not (len(uncertainty) == len(labels) == n):
        raise ValueError("probs, uncertainty and labels must have equal length")
    order = rejection_order(uncertainty)
    retained, aurocs, auprcs, defined = [], [], [], []
    for t in thresholds:
        k = (t * n) // 100
        keep = np.sort(order[k:])
        a = auroc(probs[keep], labels[keep])
        p = auprc(probs[keep], labels[keep])
        retained.append(int(len(keep)))
        aurocs.append(a)
        auprcs.append(p)
        defined.append(a is not None and p is not None)
    report = SelectiveReport(
        thresholds=list(thresholds), retained=retained, auroc=aurocs, auprc=auprcs,
        defined=defined, selective_auroc=_mean_defined(aurocs),
        selective_auprc=_mean_defined(auprcs), full_auroc=auroc(probs, labels),
        full_auprc=auprc(probs, labels), n_undefined=int(sum(not d for d in defined)),
        ece_10bin=expected_calibration_error(probs, labels), n=n)
    if groups is not None:
        report.subgroups = subgroup_report(probs, uncertainty, labels, groups, thresholds)
    return report


def subgroup_report(probs, uncertainty, labels, groups, thresholds=THRESHOLDS):
    """Independent sweeps within each age band and each sex."""
    probs = np.asarray(probs, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for attr, values in (("age_band", datagen.AGE_BANDS), ("sex", datagen.SEXES)):
        for value in values:
            mask = np.array([g[attr] == value for g in groups], dtype=bool)
            key = f"{attr}={value}"
            if mask.sum() == 0:
                continue
            if mask.sum() < 2 or len(set(labels[mask].tolist())) < 2:
                rep = _undefined_report(int(mask.sum()), thresholds)
            else:
                rep = selective_sweep(probs[mask], uncertainty[mask], labels[mask],
                                      thresholds=thresholds)
            out[key] = rep
    return out


def _undefined_report(n, thresholds):
    m = len(thresholds)
    return SelectiveReport(list(thresholds), [n - (t * n) // 100 for t in thresholds],
                           [None] * m, [None] * m, [False] * m, None, None, None, None,
                           m, None, n, flagged=True)


def evaluate_predictions(pred, samples):
    """Entropy-ranked selective report (with subgroups) for ``pred`` on ``samples``."""
    labels = np.array([s.label for s in samples])
    groups = [s.group for s in samples]
    return selective_sweep(pred.mean_prob, pred.entropy, labels, groups)


def write_report(report, json_path, csv_path, extra=None):
    payload = report.to_json()
    if extra:
        payload.update(extra)
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
