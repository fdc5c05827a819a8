"""Shared numeric helpers for the test suite."""
import numpy as np

from certain import datagen


def central_diff(f, x, eps=1e-5, coords=None):
    """Central finite differences of scalar ``f`` at ``x`` (optionally on a subset)."""
    coords = range(x.size) if coords is None else coords
    out = np.zeros(x.size)
    for i in coords:
        e = np.zeros_like(x)
        e[i] = eps
        out[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


def max_rel_err(analytic, numeric, floor=1e-7):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def tiny_manifest(seed=0, **kw):
    base = dict(seed=seed, n_train=40, n_val=12, n_test=20, dims=(6, 3, 8, 8))
    base.update(kw)
    return datagen.DatasetManifest(**base)
