import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from certain import contextset as cs, datagen, evaluate, varparams as vp
from certain.errors import ConfigError, NumericError
from certain.net import FusionNet
from certain.objective import (ContextBatch, ObjectiveConfig, TrainConfig, bce_nll,
                               draw_context_batches, load_result, mahalanobis_cost,
                               objective_step, save_result, train, write_history)
from helpers import central_diff, max_rel_err, tiny_manifest

DIMS = (5, 2, 6, 6)


def test_bce_examples():
    assert bce_nll(np.array([1.0, 0.0]), np.array([1, 0])) < 1e-11
    assert bce_nll(np.array([0.5]), np.array([1])) == pytest.approx(math.log(2), abs=1e-15)
    assert bce_nll(np.array([0.9, 0.2]), np.array([1, 0])) == pytest.approx(0.16425, abs=1e-5)


def test_mahalanobis_identity_covariance():
    assert mahalanobis_cost(np.array([1.0, 2.0]), np.zeros((2, 3)), tau=1, s1=0, s2=1) == 5.0


def test_mahalanobis_two_by_two():
    h = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert mahalanobis_cost(np.ones(2), h, tau=1, s1=1, s2=1) == pytest.approx(2 / 3, abs=1e-15)


def test_mahalanobis_zero_logits():
    h = np.random.default_rng(0).normal(size=(4, 3))
    assert mahalanobis_cost(np.zeros(4), h, tau=3, s1=2, s2=0.5) == 0.0


# exact zeros or magnitudes safely above underflow
_coord = st.one_of(st.just(0.0), st.floats(1e-3, 5), st.floats(-5, -1e-3))


@given(arrays(np.float64, 5, elements=_coord), st.integers(0, 1000),
       st.floats(0.01, 10), st.floats(0, 1), st.floats(0.1, 5))
def test_mahalanobis_nonnegative_zero_iff_v_zero(v, seed, tau, s1, s2):
    h = np.random.default_rng(seed).normal(size=(5, 4))
    cost = mahalanobis_cost(v, h, tau, s1, s2)
    assert cost >= 0
    assert (cost == 0) == (not np.any(v))


@given(arrays(np.float64, 4, elements=st.floats(-3, 3)), st.floats(0.01, 10), st.floats(0.1, 5))
def test_mahalanobis_s1_zero_is_scaled_norm(v, tau, s2):
    h = np.ones((4, 2))
    assert mahalanobis_cost(v, h, tau, 0.0, s2) == pytest.approx(tau / s2 * v @ v, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("seed", range(5))
def test_mahalanobis_gradient(seed):
    rng = np.random.default_rng(seed)
    h, v = rng.normal(size=(6, 4)), rng.normal(size=6)
    _, g = mahalanobis_cost(v, h, 1.3, 0.2, 0.7, return_grad=True)
    fd = central_diff(lambda x: mahalanobis_cost(x, h, 1.3, 0.2, 0.7), v)
    assert max_rel_err(g, fd) < 1e-4


def test_ill_conditioned_covariance_aborts():
    h = np.tile(np.array([[10.0, 0.0]]), (3, 1))
    with pytest.raises(NumericError, match="ill-conditioned"):
        mahalanobis_cost(np.ones(3), h, 1.0, 1e6, 1e-9)


def test_empty_context_forbidden():
    with pytest.raises(ConfigError):
        mahalanobis_cost(np.zeros(0), np.zeros((0, 2)))
    with pytest.raises(ConfigError):
        draw_context_batches(cs.ContextSet.empty((5, 2, 6, 6)), np.zeros((0, 8)),
                             ObjectiveConfig(), np.random.default_rng(0))


def _setup(seed, scope="all", n_train=5, m=4, j_prime=2):
    rng = np.random.default_rng(seed)
    net = FusionNet(DIMS, d_embed=4, channels=(2, 3), seed=seed)
    theta_star = net.params.copy()
    state = vp.GaussianVariationalState(theta_star + 0.05 * rng.normal(size=net.n_params),
                                        rng.uniform(-6, -3, net.n_params), net.n_encoder, scope)
    prior = vp.BasePrior(theta_star[net.partition[0]], 2.0, 0.5)
    batch = (rng.normal(size=(n_train, 5, 2)), rng.random((n_train, 6, 6)),
             rng.integers(0, 2, n_train).astype(float))
    ctx = []
    for _ in range(j_prime):
        cseq, cimg = rng.normal(size=(m, 5, 2)), rng.random((m, 6, 6))
        ctx.append(ContextBatch(cseq, cimg, net.features(cseq, cimg, theta_star)))
    return net, state, prior, batch, ctx, rng


def _loss(net, state, prior, batch, ctx, cfg, eps, n_data):
    report, _, _ = objective_step(net, state, prior, batch, ctx, cfg, None, n_data, eps=eps)
    return -report.objective


def test_full_objective_gradient_frozen_noise():
    net, state, prior, batch, ctx, rng = _setup(0)
    assert 150 <= net.n_params <= 300
    cfg = ObjectiveConfig(tau=2.0, s1=0.1, s2=1.0, J=2, J_prime=2, context_batch_size=4,
                          kl_scale=3.0)
    eps = [rng.normal(size=net.n_params) for _ in range(cfg.J)]
    _, g_mu, g_lv = objective_step(net, state, prior, batch, ctx, cfg, None, 50, eps=eps)
    p = net.n_params
    x = np.concatenate([state.mu, state.log_var])

    def f(v):
        s = vp.GaussianVariationalState(v[:p], v[p:], state.n_h, state.scope)
        return _loss(net, s, prior, batch, ctx, cfg, eps, 50)

    assert max_rel_err(np.concatenate([g_mu, g_lv]), central_diff(f, x)) < 1e-4


def test_term_decomposition():
    net, state, prior, batch, ctx, rng = _setup(1)
    cfg = ObjectiveConfig(tau=1.5, s1=0.05, s2=2.0, J=1, J_prime=2, context_batch_size=4,
                          kl_scale=0.7)
    eps = [rng.normal(size=net.n_params)]
    report, _, _ = objective_step(net, state, prior, batch, ctx, cfg, None, 40, eps=eps)
    theta = state.mu + np.exp(0.5 * state.log_var) * eps[0]
    nll = bce_nll(net.forward_batch(batch[0], batch[1], theta).prob, batch[2])
    unc = np.mean([mahalanobis_cost(net.forward_batch(c.seq, c.img, theta).logit, c.features,
                                    1.5, 0.05, 2.0) for c in ctx])
    kl_h, kl_l = vp.kl_to_prior(state, prior)
    assert report.nll == pytest.approx(nll, abs=1e-10)
    assert report.unc_cost == pytest.approx(unc, abs=1e-10)
    assert (report.kl_h, report.kl_L) == (kl_h, kl_l)
    assert report.objective == pytest.approx(-(nll + (0.7 * (kl_h + kl_l) + unc) / 40), abs=1e-10)


def test_no_regularizers_reduces_to_bce():
    net, state, prior, batch, _, rng = _setup(2)
    eps = [rng.normal(size=net.n_params)]
    cfg = ObjectiveConfig(tau=0.0, kl_scale=0.0)
    report, g_mu, _ = objective_step(net, state, prior, batch, [], cfg, None, 10, eps=eps)
    theta = state.mu + np.exp(0.5 * state.log_var) * eps[0]
    out, cache = net.forward_batch(batch[0], batch[1], theta, keep_cache=True)
    assert -report.objective == pytest.approx(bce_nll(out.prob, batch[2]), abs=1e-12)
    expected = net.backward(cache, (out.prob - batch[2]) / len(batch[2]))
    assert np.allclose(g_mu, expected, atol=1e-14)


def test_final_layer_scope_has_no_encoder_gradient():
    net, state, prior, batch, ctx, rng = _setup(3, scope="final_layer")
    cfg = ObjectiveConfig(tau=1.0, J_prime=2, context_batch_size=4)
    _, g_mu, g_lv = objective_step(net, state, prior, batch, ctx, cfg, rng, 10)
    sh = net.partition[0]
    assert not g_mu[sh].any() and not g_lv[sh].any() and g_mu[net.partition[1]].any()


# --- training loop -------------------------------------------------------------

def _separable(n=60, dims=DIMS, seed=0):
    rng = np.random.default_rng(seed)
    T, F, H, W = dims
    out = []
    for i in range(n):
        y = i % 2
        seq = rng.normal(0, 0.3, (T, F)) + (1.0 if y else -1.0)
        img = np.clip(rng.random((H, W)) * 0.2 + 0.7 * y, 0, 1)
        out.append(datagen.MultimodalSample(f"s{i}", seq, img, y, {"age_band": "A1", "sex": "M"}))
    return out


def test_deterministic_separable_reaches_perfect_auroc():
    data = _separable()
    res = train(TrainConfig(lr=1e-2, epochs=20, d_embed=4), data)
    seq, img, y = datagen.stack(data)
    assert evaluate.auroc(res.net.forward_batch(seq, img).prob, y) == 1.0


def test_training_lowers_loss():
    ds = datagen.generate(tiny_manifest(n_train=80))
    res = train(TrainConfig(lr=3e-3, epochs=6, d_embed=4), ds.train, ds.val)
    assert res.history[-1]["nll"] < res.history[0]["nll"]


@pytest.fixture(scope="module")
def det_run():
    ds = datagen.generate(tiny_manifest(n_train=48))
    return ds, train(TrainConfig(lr=3e-3, epochs=3, d_embed=4), ds.train, ds.val)


def test_large_kl_scale_keeps_mean_near_prior(det_run):
    ds, det = det_run
    dist = []
    for kl in (0.0, 1e4):
        cfg = TrainConfig(mode="stochastic", lr=1e-2, epochs=2, kl_scale=kl, tau=0.0,
                          init_log_var=-4.0, d_embed=4)
        res = train(cfg, ds.train, ds.val, init=det)
        dist.append(np.linalg.norm(res.state.mu[:res.net.n_encoder] - det.net.params[:res.net.n_encoder]))
    assert dist[1] < dist[0]


def test_stochastic_needs_init(det_run):
    ds, _ = det_run
    with pytest.raises(ConfigError, match="deterministic checkpoint"):
        train(TrainConfig(mode="stochastic"), ds.train)


def test_training_is_reproducible(det_run):
    ds, det = det_run
    ctx = cs.build_corruptions(ds.train, seed=0)
    cfg = TrainConfig(mode="stochastic", lr=1e-3, epochs=1, tau=1.0, d_embed=4)
    a = train(cfg, ds.train, None, ctx, init=det)
    b = train(cfg, ds.train, None, ctx, init=det)
    assert np.array_equal(a.state.mu, b.state.mu) and np.array_equal(a.state.log_var, b.state.log_var)


@pytest.mark.parametrize("kw", [dict(mode="bayes"), dict(lr=0.0), dict(s2=0.0),
                                dict(stochastic_scope="encoder"), dict(prior_variance=0.0),
                                dict(kl_scale=-1.0)])
def test_invalid_train_config(kw, det_run):
    ds, _ = det_run
    with pytest.raises(ConfigError):
        train(TrainConfig(**kw), ds.train)


def test_checkpoint_and_history_files(tmp_path, det_run):
    ds, det = det_run
    cfg = TrainConfig(mode="stochastic", lr=1e-3, epochs=1, tau=0.0, d_embed=4)
    sto = train(cfg, ds.train, ds.val, init=det)
    for res, name in ((det, "d.ckpt"), (sto, "s.ckpt")):
        save_result(res, tmp_path / name)
        back = load_result(tmp_path / name)
        assert np.array_equal(back.net.params, res.net.params)
        assert back.config == res.config
    back = load_result(tmp_path / "s.ckpt")
    assert np.array_equal(back.state.log_var, sto.state.log_var)
    assert np.array_equal(back.prior.theta_h_star, sto.prior.theta_h_star)
    p1 = back.predict(ds.test, j_eval=4, seed=1).mc_probs
    assert np.array_equal(p1, sto.predict(ds.test, j_eval=4, seed=1).mc_probs)
    write_history(sto.history, tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["epoch", "nll", "kl_h", "kl_L", "unc_cost", "val_auroc", "val_auprc"]
    assert len(rows) == 2
