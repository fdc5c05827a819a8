"""``certain`` command-line entry point.

Every subcommand reads a JSON config, applies ``--set key=value`` overrides
(dotted keys reach nested sections, values are parsed as JSON when possible),
writes ``resolved_config.json`` into its output directory and logs progress as
JSON lines on stderr. Exit codes: 0 success, 2 configuration error, 3 numeric
failure.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import contextset, contrastive, datagen, evaluate, pipeline, tune
from .errors import ConfigError, DomainError, NumericError, ParameterError, ParseError
from .objective import TrainConfig, load_result, save_result, train, write_history

OUTPUT_ROOT_ENV = "CERTAIN_OUTPUT_ROOT"
COMMANDS = ("generate", "pretrain", "context", "train", "eval", "ablate", "tune")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("certain")


class _JsonLines(logging.Formatter):
    def format(self, record):
        event = {"level": record.levelname.lower(), "logger": record.name,
                 "event": record.getMessage()}
        event.update(getattr(record, "fields", {}))
        return json.dumps(event, sort_keys=True, default=str)


def _event(message, **fields_):
    log.info(message, extra={"fields": fields_})


# --- config handling -------------------------------------------------------------

def _dataclass_defaults(cls):
    return asdict(cls())


DEFAULTS = {
    "generate": {**{k: v for k, v in _dataclass_defaults(datagen.DatasetManifest).items()},
                 "dims": [48, 8, 16, 16]},
    "pretrain": {"data": None, "lr": 0.01, "epochs": 15, "batch_size": 64, "temperature": 0.1,
                 "d_proj": 16, "d_embed": 32, "search_trials": 0, "seed": 0},
    "context": {"data": None, "embeddings": None, "checkpoint": None,
                "strategy": "medcertain_I", "v": 1.5, "c_thresh": 1.5, "hem_fraction": 0.2,
                "corruptions_per_sample": "one", "seed": 0},
    "train": {**_dataclass_defaults(TrainConfig), "data": None, "context": None,
              "init": None},
    "eval": {"data": None, "checkpoint": None, "split": "mixed", "shift_fraction": 0.5,
             "j_eval": 32, "seed": 0},
    "ablate": {**pipeline.BenchmarkConfig().to_dict(), "seed": 0, "n_seeds": 5,
               "variants": list(pipeline.ABLATION_VARIANTS)},
    "tune": {"data": None, "mode": "deterministic", "configs": 10, "seeds": 3, "folds": 5,
             "base_lr": None, "init": None, "context": None, "final_seeds": 0,
             "j_eval": 32, "shift_fraction": 0.5, "seed": 0},
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base, override, where=""):
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}; known keys: {sorted(base)}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _apply_set(config, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.split(".")
    nested = value = _parse_value(text)
    for part in reversed(parts[1:]):
        nested = {part: nested}
    return _merge(config, {parts[0]: nested if len(parts) > 1 else value})


def resolve_config(command, config_path=None, sets=(), seed=None):
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    config = json.loads(json.dumps(DEFAULTS[command]))
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        config = _merge(config, loaded)
    for assignment in sets:
        config = _apply_set(config, assignment)
    if seed is not None:
        config["seed"] = seed
    return config


def _require(path, producer, what):
    if path is None:
        raise ConfigError(f"config key for the {what} is not set (produce it with `certain {producer}`)")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} not found (produce it with `certain {producer}`)")
    return Path(path)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# --- commands --------------------------------------------------------------------

def cmd_generate(cfg, out):
    manifest = datagen.DatasetManifest(
        seed=cfg["seed"], n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        dims=tuple(cfg["dims"]), mismatch_rate=cfg["mismatch_rate"],
        shift_spec=list(cfg["shift_spec"]))
    ds = datagen.generate(manifest)
    datagen.save(ds, out)
    _event("generated", counts={s: len(ds.split(s)) for s in datagen.SPLITS})


def cmd_pretrain(cfg, out):
    ds = datagen.load(_require(cfg["data"], "generate", "dataset directory"))
    ccfg = contrastive.ContrastiveConfig(lr=cfg["lr"], epochs=cfg["epochs"],
                                         batch_size=cfg["batch_size"],
                                         temperature=cfg["temperature"], d_proj=cfg["d_proj"],
                                         d_embed=cfg["d_embed"], seed=cfg["seed"])
    if cfg["search_trials"] > 0:
        model, ccfg, trials = contrastive.pretrain_search(ds, ccfg, cfg["search_trials"],
                                                          seed=cfg["seed"])
        _write_json(out / "lr_search.json", trials)
    else:
        model, history = contrastive.pretrain(ds, ccfg)
        _write_json(out / "history.json", history)
    contrastive.save_model(model, out / "contrastive.ckpt", {"lr": ccfg.lr})
    phi_e, phi_c = contrastive.embed(model, ds.train)
    contrastive.write_embeddings(out / "embeddings.jsonl", [s.id for s in ds.train], phi_e, phi_c)
    _event("pretrained", lr=ccfg.lr, n_embedded=len(ds.train))


def cmd_context(cfg, out):
    ds = datagen.load(_require(cfg["data"], "generate", "dataset directory"))
    strategy = cfg["strategy"]
    embeddings, hem_model = None, None
    if strategy in ("inter", "inter_intra", "medcertain_I", "medcertain_II"):
        ids, phi_e, phi_c = contrastive.read_embeddings(
            _require(cfg["embeddings"], "pretrain", "embeddings file"))
        if ids != [s.id for s in ds.train]:
            raise ConfigError("embedding ids do not match the training split "
                              "(rerun `certain pretrain` on this dataset)")
        embeddings = (phi_e, phi_c)
    if strategy == "hem":
        result = load_result(_require(cfg["checkpoint"], "train", "deterministic checkpoint"))
        hem_model = (result.net, None)
    ctx = contextset.build(strategy, ds.train, embeddings, v=cfg["v"], c_thresh=cfg["c_thresh"],
                           seed=cfg["seed"], hem_model=hem_model,
                           hem_fraction=cfg["hem_fraction"],
                           corruptions_per_sample=cfg["corruptions_per_sample"])
    if len(ctx) == 0:
        _event("empty context set; training will fall back to the base prior", strategy=strategy)
    contextset.save(ctx, out / "context.jsonl", strategy)
    _event("context built", strategy=strategy, counts=ctx.counts())


def _train_config(cfg):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def cmd_train(cfg, out):
    ds = datagen.load(_require(cfg["data"], "generate", "dataset directory"))
    tcfg = _train_config(cfg)
    tcfg.validate()
    init = context = None
    if cfg["init"] is not None or tcfg.mode == "stochastic":
        init = load_result(_require(cfg["init"], "train", "deterministic checkpoint"))
    if cfg["context"] is not None:
        context = contextset.load(_require(cfg["context"], "context", "context file"))
    result = train(tcfg, ds.train, ds.val, context, init=init)
    save_result(result, out / "model.ckpt")
    write_history(result.history, out / "history.csv")
    _event("trained", mode=tcfg.mode, epochs=tcfg.epochs,
           val_auroc=result.history[-1]["val_auroc"])


def _eval_samples(ds, split, fraction, seed):
    if split == "mixed":
        mixed, flags = datagen.mix_shifted(ds.test, ds.test_shifted, fraction, seed)
        return mixed, flags
    if split not in datagen.SPLITS:
        raise ConfigError(f"split must be 'mixed' or one of {datagen.SPLITS}")
    samples = ds.split(split)
    return samples, np.full(len(samples), split == "test_shifted")


def cmd_eval(cfg, out):
    ds = datagen.load(_require(cfg["data"], "generate", "dataset directory"))
    result = load_result(_require(cfg["checkpoint"], "train", "checkpoint"))
    samples, flags = _eval_samples(ds, cfg["split"], cfg["shift_fraction"], cfg["seed"])
    pred = result.predict(samples, j_eval=cfg["j_eval"], seed=cfg["seed"])
    report = evaluate.evaluate_predictions(pred, samples)
    ent = pred.entropy
    extra = {"j_eval": int(pred.mc_probs.shape[1]), "mode": result.config.mode,
             "split": cfg["split"],
             "mean_entropy_clean": float(ent[~flags].mean()) if (~flags).any() else None,
             "mean_entropy_shifted": float(ent[flags].mean()) if flags.any() else None}
    evaluate.write_report(report, out / "report.json", out / "report.csv", extra)
    _event("evaluated", **report.summary())


ABLATION_COLUMNS = ("variant", "n_seeds", "auroc_mean", "auroc_se", "auprc_mean", "auprc_se",
                    "selective_auroc_mean", "selective_auroc_se", "selective_auprc_mean",
                    "selective_auprc_se")


def _fmt(x):
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def cmd_ablate(cfg, out):
    variants = list(cfg["variants"])
    for v in variants:
        if v not in pipeline.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {pipeline.VARIANTS}")
    if cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds must be >= 1")
    bench = pipeline.BenchmarkConfig.from_dict(
        {k: v for k, v in cfg.items() if k not in ("seed", "n_seeds", "variants")})
    bench.det.validate()
    bench.stoch.validate()
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["n_seeds"]))
    results = pipeline.run_benchmark(bench, seeds, variants)
    rows = pipeline.ablation_table(results)
    with (out / "per_seed.jsonl").open("w") as fh:
        for variant in variants:
            for summary in results[variant]:
                fh.write(json.dumps({"variant": variant, **summary}, sort_keys=True) + "\n")
    _write_json(out / "ablation.json", {"seeds": seeds, "rows": rows})
    lines = [",".join(ABLATION_COLUMNS)]
    lines += [",".join(_fmt(row[c]) for c in ABLATION_COLUMNS) for row in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    for row in rows:
        _event("ablation row", **row)


def cmd_tune(cfg, out):
    ds = datagen.load(_require(cfg["data"], "generate", "dataset directory"))
    mode = cfg["mode"]
    init = context = None
    if mode == "stochastic":
        init = load_result(_require(cfg["init"], "train", "deterministic checkpoint"))
        if cfg["base_lr"] is None:
            raise ConfigError("stochastic tuning needs base_lr (the best deterministic lr "
                              "from `certain tune --mode det`)")
        if cfg["context"] is not None:
            context = contextset.load(_require(cfg["context"], "context", "context file"))
    pool = ds.train + ds.val
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def train_fn(config, seed):
        fold = seed % cfg["folds"]
        tr, va = datagen.split_cv(pool, cfg["folds"], seed)[fold]
        result = train(TrainConfig(**config, seed=seed), tr, va, context, init=init)
        last = result.history[-1]
        path = ckpt_dir / f"{len(list(ckpt_dir.iterdir())):04d}.ckpt"
        save_result(result, path)
        return {"val_auroc": last["val_auroc"], "val_auprc": last["val_auprc"], "fold": fold,
                "checkpoint": str(path)}

    records_path = out / "trials.jsonl"
    records_path.write_text("")
    res = tune.search(tune.SearchSpace(), mode, cfg["configs"], cfg["seeds"], train_fn,
                      master_seed=cfg["seed"], base_lr=cfg["base_lr"], record_path=records_path)
    best = {"config_index": res.best_index, "config": res.best_config,
            "mean_val_auroc": res.mean_val_auroc[res.best_index],
            "n_failed_trials": res.n_failed}
    if cfg["final_seeds"] > 0:
        def run_fn(config, seed):
            result = train(TrainConfig(**config, seed=seed), pool, None, context, init=init)
            samples, _ = _eval_samples(ds, "mixed", cfg["shift_fraction"], seed)
            pred = result.predict(samples, j_eval=cfg["j_eval"], seed=seed)
            return evaluate.evaluate_predictions(pred, samples).summary()
        final = tune.finalize(res.best_config, cfg["final_seeds"], run_fn)
        best["final"] = {"mean": final.mean, "se": final.se, "n_seeds": final.n_seeds,
                         "se_flag": final.se_flag}
    _write_json(out / "best.json", best)
    _event("tuned", **{k: v for k, v in best.items() if k != "final"})


HANDLERS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "context": cmd_context,
            "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "tune": cmd_tune}


# --- entry point -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="certain", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; dotted keys for nested)")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    parser.add_argument("--width", type=int, default=64, choices=(64,),
                        help="floating point width; only 64-bit is supported")
    parser.add_argument("--context-strategy", choices=contextset.STRATEGIES,
                        help="context: strategy")
    parser.add_argument("--v", type=float, help="context: inter-modal threshold multiplier")
    parser.add_argument("--c-thresh", type=float,
                        help="context: inter+intra threshold multiplier")
    parser.add_argument("--hem-fraction", type=float, help="context: hard-example fraction")
    parser.add_argument("--mode", choices=("det", "stoch"), help="tune: search mode")
    parser.add_argument("--configs", type=int, help="tune: number of sampled configurations")
    parser.add_argument("--seeds", type=int, help="tune: seeds per configuration")
    return parser


def _output_dir(args):
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


def run(argv=None):
    args = build_parser().parse_args(argv)
    sets = list(args.set)
    if args.command == "tune":
        if args.mode is not None:
            mode = {"det": "deterministic", "stoch": "stochastic"}[args.mode]
            sets.append(f"mode={json.dumps(mode)}")
        if args.configs is not None:
            sets.append(f"configs={args.configs}")
        if args.seeds is not None:
            sets.append(f"seeds={args.seeds}")
    elif args.mode or args.configs or args.seeds:
        raise ConfigError("--mode/--configs/--seeds only apply to `certain tune`")
    shortcuts = {"strategy": args.context_strategy, "v": args.v, "c_thresh": args.c_thresh,
                 "hem_fraction": args.hem_fraction}
    given = {k: v for k, v in shortcuts.items() if v is not None}
    if given and args.command != "context":
        raise ConfigError("context flags only apply to `certain context`")
    sets += [f"{k}={json.dumps(v)}" for k, v in given.items()]
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = resolve_config(args.command, args.config, sets, args.seed)
    out = _output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json",
                {"command": args.command, "width": args.width, "config": cfg})
    _event("start", command=args.command, out=str(out), threads=args.threads)
    with threadpool_limits(limits=args.threads):
        HANDLERS[args.command](cfg, out)
    _event("done", command=args.command)
    return out


def main(argv=None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        run(argv)
    except (ConfigError, ParseError, DomainError, ParameterError, FileNotFoundError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
