"""Random-search hyperparameter harness.

Configurations are sampled from a fixed search space, each evaluated over
several seeds; the winner has the highest mean validation AUROC. The winning
configuration is then retrained on train+val and evaluated on test over fresh
seeds, reported as mean and standard error.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    det_lr: tuple = (1e-5, 1e-2)
    det_kl_scale: tuple = (0.0, 0.1, 1.0, 10.0, 100.0)
    det_epochs: tuple = (5, 10, 15, 20, 30)
    stoch_epochs: tuple = (5, 10, 15, 20, 25, 30)
    context_batch_size: tuple = (16, 32)
    prior_variance: tuple = (0.1, 1.0, 10.0, 1000.0)
    tau: tuple = (0.1, 1.0, 10.0)
    s1: tuple = (0.1, 0.01, 0.001)
    s2: tuple = (0.5, 1.0, 5.0)
    batch_size: int = 16


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _pick(rng, values):
    return values[int(rng.integers(len(values)))]


def sample_config(space, mode, rng, base_lr=None):
    """Draw one configuration dict for ``mode`` ('deterministic' or 'stochastic')."""
    if mode == "deterministic":
        return {"mode": mode, "lr": _log_uniform(rng, *space.det_lr),
                "kl_scale": _pick(rng, space.det_kl_scale),
                "epochs": _pick(rng, space.det_epochs), "batch_size": space.batch_size}
    if mode == "stochastic":
        if base_lr is None:
            raise ConfigError("stochastic search needs the best deterministic learning rate")
        return {"mode": mode, "lr": _log_uniform(rng, base_lr / 10.0, base_lr * 10.0),
                "epochs": _pick(rng, space.stoch_epochs),
                "context_batch_size": _pick(rng, space.context_batch_size),
                "prior_variance": _pick(rng, space.prior_variance),
                "tau": _pick(rng, space.tau), "s1": _pick(rng, space.s1),
                "s2": _pick(rng, space.s2), "batch_size": space.batch_size}
    raise ConfigError(f"mode must be deterministic or stochastic, got {mode!r}")


def in_space(config, space, base_lr=None):
    """True if ``config`` lies inside ``space`` (used by property tests)."""
    if config["batch_size"] != space.batch_size:
        return False
    if config["mode"] == "deterministic":
        lo, hi = space.det_lr
        return (lo <= config["lr"] <= hi and config["kl_scale"] in space.det_kl_scale
                and config["epochs"] in space.det_epochs)
    lo, hi = base_lr / 10.0, base_lr * 10.0
    return (lo * (1 - 1e-12) <= config["lr"] <= hi * (1 + 1e-12)
            and config["epochs"] in space.stoch_epochs
            and config["context_batch_size"] in space.context_batch_size
            and config["prior_variance"] in space.prior_variance
            and config["tau"] in space.tau and config["s1"] in space.s1
            and config["s2"] in space.s2)


@dataclass
class TrialRecord:
    config_index: int
    config: dict
    seed: int
    fold: int = None
    val_auroc: float = None
    val_auprc: float = None
    checkpoint: str = None
    error: str = None

    @property
    def failed(self):
        return self.error is not None


@dataclass
class SearchResult:
    best_index: int
    best_config: dict
    records: list
    mean_val_auroc: dict = field(default_factory=dict)

    @property
    def n_failed(self):
        return sum(r.failed for r in self.records)


def select_best(records):
    """Config index with the highest mean validation AUROC over successful seeds."""
    by_config = {}
    for r in records:
        if r.failed or r.val_auroc is None:
            continue
        by_config.setdefault(r.config_index, []).append(r.val_auroc)
    if not by_config:
        raise ConfigError("every trial failed; nothing to select")
    means = {k: float(np.mean(v)) for k, v in sorted(by_config.items())}
    best = max(means, key=lambda k: (means[k], -k))
    return best, means


def search(space, mode, n_configs, n_seeds, train_fn, master_seed=0, base_lr=None,
           record_path=None):
    """Evaluate ``n_configs`` sampled configurations over ``n_seeds`` seeds each.

    ``train_fn(config, seed)`` returns a dict with ``val_auroc`` (and optionally
    ``val_auprc``, ``fold``, ``checkpoint``). Exceptions mark the trial failed;
    failed trials are excluded from the averages. Records are appended to
    ``record_path`` (JSON Lines) when given.
    """
    if n_configs < 1 or n_seeds < 1:
        raise ConfigError("n_configs and n_seeds must be >= 1")
    rng = np.random.default_rng([master_seed, 401])
    configs = [sample_config(space, mode, rng, base_lr) for _ in range(n_configs)]
    records = []
    for ci, config in enumerate(configs):
        for si in range(n_seeds):
            seed = master_seed * 1000 + si
            rec = TrialRecord(ci, dict(config), seed)
            try:
                out = train_fn(dict(config), seed)
                rec.val_auroc = out.get("val_auroc")
                rec.val_auprc = out.get("val_auprc")
                rec.fold = out.get("fold")
                rec.checkpoint = out.get("checkpoint")
            except Exception as exc:  # noqa: BLE001 - any crash is a failed trial
                rec.error = f"{type(exc).__name__}: {exc}"
                log.warning("trial %d/%d failed: %s", ci, si, rec.error)
            records.append(rec)
            if record_path is not None:
                append_record(record_path, rec)
    best, means = select_best(records)
    return SearchResult(best, configs[best], records, means)


def append_record(path, record):
    with Path(path).open("a") as fh:
        fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def read_records(path):
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                out.append(TrialRecord(**json.loads(line)))
    return out


@dataclass
class FinalReport:
    mean: dict
    se: dict
    n_seeds: int
    per_seed: list
    se_flag: str = None


def finalize(best_config, n_seeds, run_fn, seeds=None):
    """Retrain ``best_config`` over ``n_seeds`` seeds; mean and SE of each metric.

    ``run_fn(config, seed)`` returns a dict of test metrics. SE is the sample
    standard deviation over seeds divided by ``sqrt(n_seeds)``; with a single
    seed it is reported as 0 and flagged.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    per_seed = [run_fn(dict(best_config), s) for s in seeds]
    keys = sorted(per_seed[0])
    mean, se = {}, {}
    for k in keys:
        vals = np.array([r[k] for r in per_seed if r.get(k) is not None], dtype=np.float64)
        mean[k] = float(vals.mean()) if len(vals) else None
        se[k] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    flag = "single seed: standard error undefined, reported as 0" if len(seeds) == 1 else None
    return FinalReport(mean, se, len(seeds), per_seed, flag)
