import json
import subprocess
import sys
import time

import pytest

from certain import cli
from certain.errors import NumericError


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    start = time.perf_counter()
    steps = [
        ["generate", "--set", "n_train=120", "--set", "n_val=40", "--set", "n_test=60",
         "--out", str(root / "data")],
        ["pretrain", "--set", f"data={root / 'data'}", "--set", "epochs=2", "--out", str(root / "pre")],
        ["context", "--set", f"data={root / 'data'}", "--set",
         f"embeddings={root / 'pre' / 'embeddings.jsonl'}", "--out", str(root / "ctx")],
        ["train", "--set", f"data={root / 'data'}", "--set", "epochs=2", "--out", str(root / "det")],
        ["train", "--set", f"data={root / 'data'}", "--set", "mode=stochastic", "--set",
         f"init={root / 'det' / 'model.ckpt'}", "--set", f"context={root / 'ctx' / 'context.jsonl'}",
         "--set", "epochs=1", "--out", str(root / "sto")],
        ["eval", "--set", f"data={root / 'data'}", "--set",
         f"checkpoint={root / 'sto' / 'model.ckpt'}", "--out", str(root / "ev")],
        ["eval", "--set", f"data={root / 'data'}", "--set",
         f"checkpoint={root / 'det' / 'model.ckpt'}", "--out", str(root / "evd")],
        ["tune", "--set", f"data={root / 'data'}", "--mode", "det", "--configs", "2",
         "--seeds", "2", "--set", "folds=2", "--out", str(root / "tune")],
    ]
    for step in steps:
        assert cli.main(step) == 0, step
    return root, time.perf_counter() - start


def test_smoke_pipeline_fast_and_complete(pipeline_dir):
    root, elapsed = pipeline_dir
    assert elapsed < 60
    expected = {
        "data": ["train.jsonl", "val.jsonl", "test.jsonl", "test_shifted.jsonl",
                 "dataset.manifest.json"],
        "pre": ["contrastive.ckpt", "embeddings.jsonl"],
        "ctx": ["context.jsonl", "context.manifest.json"],
        "det": ["model.ckpt", "history.csv"], "sto": ["model.ckpt", "history.csv"],
        "ev": ["report.json", "report.csv"], "tune": ["trials.jsonl", "best.json"],
    }
    for sub, files in expected.items():
        for f in files + ["resolved_config.json"]:
            assert (root / sub / f).exists(), (sub, f)


def test_eval_of_deterministic_checkpoint_uses_single_pass(pipeline_dir):
    root, _ = pipeline_dir
    report = json.loads((root / "evd" / "report.json").read_text())
    assert report["j_eval"] == 1 and report["mode"] == "deterministic"
    assert json.loads((root / "ev" / "report.json").read_text())["j_eval"] == 32


def test_rerun_is_byte_identical(pipeline_dir, tmp_path):
    root, _ = pipeline_dir
    cfg = json.loads((root / "sto" / "resolved_config.json").read_text())["config"]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "again")]) == 0
    for f in ("model.ckpt", "history.csv"):
        assert (tmp_path / "again" / f).read_bytes() == (root / "sto" / f).read_bytes()


def test_resolved_config_regenerates(pipeline_dir):
    root, _ = pipeline_dir
    resolved = json.loads((root / "data" / "resolved_config.json").read_text())
    assert resolved["command"] == "generate" and resolved["config"]["n_train"] == 120


def test_missing_artifact_names_producer(tmp_path, capsys):
    code = cli.main(["train", "--set", f"data={tmp_path / 'nothing'}", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "certain generate" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path):
    assert cli.main(["generate", "--set", "colour=blue", "--out", str(tmp_path)]) == 2


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


def test_invalid_value_is_config_error(tmp_path):
    assert cli.main(["generate", "--set", "n_train=0", "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def explode(cfg, out):
        raise NumericError("nan in nll")
    monkeypatch.setitem(cli.HANDLERS, "generate", explode)
    assert cli.main(["generate", "--out", str(tmp_path)]) == 3


def test_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_train": 7, "seed": 1}))
    cfg = cli.resolve_config("generate", tmp_path / "c.json", ["n_val=3"], seed=9)
    assert (cfg["n_train"], cfg["n_val"], cfg["seed"]) == (7, 3, 9)
    nested = cli.resolve_config("ablate", None, ["det.lr=0.5"])
    assert nested["det"]["lr"] == 0.5 and nested["det"]["epochs"] == 10


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["generate", "--set", "n_train=2", "--set", "n_val=1", "--set", "n_test=1"]) == 0
    assert (tmp_path / "generate" / "resolved_config.json").exists()


def test_logs_are_json_lines(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "certain.cli", "generate", "--set", "n_train=2",
                           "--set", "n_val=1", "--set", "n_test=1", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=True)
    events = [json.loads(line) for line in proc.stderr.splitlines()]
    assert [e["event"] for e in events][0] == "start" and events[-1]["event"] == "done"


def test_context_flags(pipeline_dir, tmp_path):
    root, _ = pipeline_dir
    code = cli.main(["context", "--set", f"data={root / 'data'}", "--set",
                     f"embeddings={root / 'pre' / 'embeddings.jsonl'}", "--context-strategy",
                     "inter", "--v", "1.0", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "context.manifest.json").read_text())
    assert manifest["strategy"] == "inter"
    assert cli.main(["train", "--v", "1.0", "--out", str(tmp_path)]) == 2


SMALL_ABLATE = ["--set", "n_train=60", "--set", "n_val=20", "--set", "n_test=40",
                "--set", "dims=[8,3,8,8]", "--set", "pretrain_epochs=1", "--set", "det.epochs=1",
                "--set", "stoch.epochs=1", "--set", "j_eval=4", "--set", "n_seeds=2"]


def test_ablate_table_schema(tmp_path):
    assert cli.main(["ablate", *SMALL_ABLATE, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0].split(",") == list(cli.ABLATION_COLUMNS)
    variants = [line.split(",")[0] for line in lines[1:]]
    assert variants == ["uninformative", "corruptions", "inter", "inter_intra", "medcertain_I",
                        "medcertain_II", "hem"]
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert all(r["n_seeds"] == 2 and r["selective_auroc_se"] is not None for r in rows)
