import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from certain import tune
from certain.errors import ConfigError

SPACE = tune.SearchSpace()


def _score(config):
    return -abs(math.log10(config["lr"]) + 3.3) + 0.01 * config["epochs"]


def test_grids_exact():
    assert SPACE.det_kl_scale == (0.0, 0.1, 1.0, 10.0, 100.0)
    assert SPACE.det_epochs == (5, 10, 15, 20, 30)
    assert SPACE.stoch_epochs == (5, 10, 15, 20, 25, 30)
    assert SPACE.context_batch_size == (16, 32)
    assert SPACE.prior_variance == (0.1, 1.0, 10.0, 1000.0)
    assert SPACE.batch_size == 16


def test_sampled_configs_stay_in_space():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert tune.in_space(tune.sample_config(SPACE, "deterministic", rng), SPACE)
        assert tune.in_space(tune.sample_config(SPACE, "stochastic", rng, 3e-4), SPACE, 3e-4)


def test_stochastic_needs_base_lr():
    with pytest.raises(ConfigError):
        tune.sample_config(SPACE, "stochastic", np.random.default_rng(0))


def test_single_config_wins():
    res = tune.search(SPACE, "deterministic", 1, 2, lambda c, s: {"val_auroc": 0.6})
    assert res.best_index == 0 and len(res.records) == 2


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_argmax_matches_brute_force(master, n_configs):
    res = tune.search(SPACE, "deterministic", n_configs, 2,
                      lambda c, s: {"val_auroc": _score(c)}, master_seed=master)
    configs = [r.config for r in res.records[::2]]
    assert res.best_config == max(configs, key=_score)


def test_fixed_master_seed_same_configs():
    def f(c, s):
        return {"val_auroc": 0.5}
    a = tune.search(SPACE, "deterministic", 5, 1, f, master_seed=7)
    b = tune.search(SPACE, "deterministic", 5, 1, f, master_seed=7)
    assert [r.config for r in a.records] == [r.config for r in b.records]


def test_failed_trials_excluded_and_counted(tmp_path):
    def f(config, seed):
        if config["epochs"] >= 20:
            raise RuntimeError("boom")
        return {"val_auroc": config["lr"]}
    res = tune.search(SPACE, "deterministic", 8, 2, f, master_seed=1,
                      record_path=tmp_path / "trials.jsonl")
    assert res.n_failed == 2 * sum(r.config["epochs"] >= 20 for r in res.records[::2])
    assert res.best_config["epochs"] < 20
    saved = tune.read_records(tmp_path / "trials.jsonl")
    assert len(saved) == 16 and tune.select_best(saved)[0] == res.best_index
    keys = [(json.dumps(r.config, sort_keys=True), r.seed) for r in saved]
    assert len(set(keys)) == len(keys)


def test_all_failed_is_config_error():
    def f(c, s):
        raise RuntimeError("nope")
    with pytest.raises(ConfigError):
        tune.search(SPACE, "deterministic", 2, 1, f)


def test_finalize_arithmetic():
    vals = {0: 0.7, 1: 0.8, 2: 0.9}
    rep = tune.finalize({}, 3, lambda c, s: {"auroc": vals[s]})
    assert rep.mean["auroc"] == pytest.approx(0.8)
    assert rep.se["auroc"] == pytest.approx(np.std([0.7, 0.8, 0.9], ddof=1) / math.sqrt(3))
    assert rep.se_flag is None


def test_finalize_single_seed_flagged():
    rep = tune.finalize({}, 1, lambda c, s: {"auroc": 0.7})
    assert rep.se["auroc"] == 0.0 and rep.se_flag


def test_finalize_identical_seeds_zero_std():
    rep = tune.finalize({}, 3, lambda c, s: {"auroc": 0.7 + s}, seeds=[4, 4, 4])
    assert rep.se["auroc"] == 0.0
