"""End-to-end experiment runs shared by the CLI and the acceptance tests.

One seed of the benchmark generates a dataset, pretrains the contrastive
encoders, trains the deterministic baseline, and fine-tunes one stochastic
model per context strategy, all evaluated on the same test mixture of clean
and shifted inputs.
"""
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import contextset, contrastive, datagen, evaluate
from .errors import ConfigError
from .objective import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = ("deterministic", "uninformative", "corruptions", "inter", "inter_intra",
            "medcertain_I", "medcertain_II", "hem", "hem_finetune")
ABLATION_VARIANTS = ("uninformative", "corruptions", "inter", "inter_intra",
                     "medcertain_I", "medcertain_II", "hem")
METRICS = ("auroc", "auprc", "selective_auroc", "selective_auprc")


@dataclass
class BenchmarkConfig:
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 400
    mismatch_rate: float = 0.2
    shift_fraction: float = 0.5
    dims: tuple = (48, 8, 16, 16)
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.01
    det: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="deterministic", lr=3e-3, epochs=10, kl_scale=1.0))
    stoch: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="stochastic", lr=1e-3, epochs=5, kl_scale=1.0, tau=10.0, s1=0.01, s2=1.0,
        prior_variance=1.0, context_batch_size=16))
    hem_fraction: float = 0.2
    v: float = 1.5
    c_thresh: float = 1.5
    j_eval: int = 32

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("det", "stoch"):
            if key in d and isinstance(d[key], dict):
                d[key] = TrainConfig(**d[key])
        if "dims" in d:
            d["dims"] = tuple(d["dims"])
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out


@dataclass
class SeedRun:
    seed: int
    dataset: datagen.Dataset
    contrastive: contrastive.ContrastiveModel
    embeddings: tuple
    eval_samples: list
    shifted_flags: np.ndarray
    deterministic: object = None


def prepare(cfg, seed):
    """Data, contrastive space and deterministic baseline for one seed."""
    manifest = datagen.DatasetManifest(seed=seed, n_train=cfg.n_train, n_val=cfg.n_val,
                                       n_test=cfg.n_test, dims=tuple(cfg.dims),
                                       mismatch_rate=cfg.mismatch_rate)
    ds = datagen.generate(manifest)
    cmodel, _ = contrastive.pretrain(ds, contrastive.ContrastiveConfig(
        lr=cfg.pretrain_lr, epochs=cfg.pretrain_epochs, seed=seed))
    emb = contrastive.embed(cmodel, ds.train)
    mixed, flags = datagen.mix_shifted(ds.test, ds.test_shifted, cfg.shift_fraction, seed)
    run = SeedRun(seed, ds, cmodel, emb, mixed, flags)
    run.deterministic = train(replace(cfg.det, seed=seed), ds.train, ds.val)
    return run


def context_for(cfg, run, strategy):
    if strategy == "hem":
        return contextset.build("hem", run.dataset.train, hem_model=(run.deterministic.net, None),
                                hem_fraction=cfg.hem_fraction)
    return contextset.build(strategy, run.dataset.train, run.embeddings, v=cfg.v,
                            c_thresh=cfg.c_thresh, seed=run.seed)


def train_variant(cfg, run, variant):
    ds = run.dataset
    if variant == "deterministic":
        return run.deterministic
    if variant == "uninformative":
        stoch = replace(cfg.stoch, seed=run.seed, tau=0.0)
        return train(stoch, ds.train, ds.val, None, init=run.deterministic)
    if variant == "hem_finetune":
        # hard examples become the labelled fine-tuning data, deterministic schedule
        idx = contextset.hem_indices(_train_losses(run), cfg.hem_fraction)
        hard = [ds.train[i] for i in idx]
        return train(replace(cfg.det, seed=run.seed), hard, ds.val, init=run.deterministic)
    if variant not in contextset.STRATEGIES:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    ctx = context_for(cfg, run, variant)
    if len(ctx) == 0:
        log.warning("variant %s: empty context set, falling back to the base prior", variant)
    return train(replace(cfg.stoch, seed=run.seed), ds.train, ds.val, ctx,
                 init=run.deterministic)


def _train_losses(run):
    seq, img, labels = datagen.stack(run.dataset.train)
    probs = run.deterministic.net.forward_batch(seq, img).prob
    return contextset.per_sample_bce(probs, labels)


def evaluate_variant(cfg, run, result):
    pred = result.predict(run.eval_samples, j_eval=cfg.j_eval, seed=run.seed)
    report = evaluate.evaluate_predictions(pred, run.eval_samples)
    return report, pred


def run_benchmark(cfg, seeds, variants=VARIANTS):
    """Train and evaluate every variant for every seed.

    Returns ``{variant: [summary dict per seed]}`` with the metric summary plus
    mean entropy on clean and shifted test inputs.
    """
    results = {v: [] for v in variants}
    for seed in seeds:
        run = prepare(cfg, seed)
        for variant in variants:
            res = train_variant(cfg, run, variant)
            report, pred = evaluate_variant(cfg, run, res)
            summary = report.summary()
            ent = pred.entropy
            summary["entropy_clean"] = float(ent[~run.shifted_flags].mean())
            summary["entropy_shifted"] = float(ent[run.shifted_flags].mean())
            summary["seed"] = seed
            results[variant].append(summary)
            log.info("seed %d %s sel_auroc=%.4f", seed, variant, summary["selective_auroc"])
    return results


def mean_se(values):
    """Mean and standard error (sample std / sqrt(n)); SE is 0 for a single value."""
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if len(values) == 0:
        return None, None
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))


def ablation_table(results):
    """Rows ``{variant, <metric>_mean, <metric>_se}``, one per variant in input order."""
    rows = []
    for variant, runs in results.items():
        row = {"variant": variant, "n_seeds": len(runs)}
        for m in METRICS:
            row[f"{m}_mean"], row[f"{m}_se"] = mean_se([r[m] for r in runs])
        rows.append(row)
    return rows
