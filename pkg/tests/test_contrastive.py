import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from certain import contrastive as ct, datagen
from certain.errors import DomainError, ParseError
from certain.net import FusionNet
from helpers import central_diff, max_rel_err


def _unit_rows(rng, n, d):
    return ct.l2_normalize(rng.normal(size=(n, d)))[0]


def test_two_by_two_orthogonal_negatives():
    z = np.eye(2)
    expected = -math.log(math.exp(10) / (math.exp(10) + 1))
    assert ct.info_nce(z, z, 0.1) == pytest.approx(expected, rel=1e-12)
    assert ct.info_nce(z, z, 0.1) == pytest.approx(4.54e-5, rel=1e-3)


@given(st.integers(2, 16), st.integers(0, 1000))
def test_identical_rows_give_log_batch(b, seed):
    row = _unit_rows(np.random.default_rng(seed), 1, 5)
    z = np.repeat(row, b, axis=0)
    assert ct.info_nce(z, z, 0.1) == pytest.approx(math.log(b), rel=1e-12)


def test_nonpositive_temperature():
    with pytest.raises(DomainError):
        ct.info_nce(np.eye(2), np.eye(2), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_aligned_pairs_beat_every_permutation(seed):
    rng = np.random.default_rng(seed)
    z = _unit_rows(rng, 4, 6)
    aligned = ct.info_nce(z, z, 0.1)
    for perm in itertools.permutations(range(4)):
        assert ct.info_nce(z, z[list(perm)], 0.1) >= aligned - 1e-12


@given(st.integers(0, 1000))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    za, zb = _unit_rows(rng, 5, 4), _unit_rows(rng, 5, 4)
    q = ortho_group.rvs(4, random_state=seed)
    assert ct.info_nce(za @ q, zb @ q, 0.2) == pytest.approx(ct.info_nce(za, zb, 0.2), rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_info_nce_gradient(seed):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, ga, gb = ct.info_nce_grad(za, zb, 0.5)
    x = np.concatenate([za.ravel(), zb.ravel()])
    fd = central_diff(lambda v: ct.info_nce(v[:12].reshape(4, 3), v[12:].reshape(4, 3), 0.5), x)
    assert max_rel_err(np.concatenate([ga.ravel(), gb.ravel()]), fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_full_contrastive_gradient(seed):
    rng = np.random.default_rng(seed)
    net = FusionNet((5, 2, 6, 6), d_embed=3, channels=(2, 2), seed=seed)
    heads = ct.ProjectionHeads.init(3, 4, rng)
    model = ct.ContrastiveModel(net, heads, 4)
    seq, img = rng.normal(size=(4, 5, 2)), rng.random((4, 6, 6))
    _, g_net, g_heads = model.loss_and_grads(seq, img, 0.3)
    n_net = net.n_params
    x = np.concatenate([net.params, heads.flat()])

    def f(v):
        m = ct.ContrastiveModel(net, ct.ProjectionHeads.from_flat(v[n_net:], 3, 4), 4)
        saved = net.params
        net.params = v[:n_net]
        z_e, z_c = m.project(seq, img)
        net.params = saved
        return ct.bidirectional_loss_grad(z_e, z_c, 0.3)[0]

    fd = central_diff(f, x)
    fd[net.partition[1]] = 0.0
    assert max_rel_err(np.concatenate([g_net, g_heads]), fd) < 1e-4


@pytest.fixture(scope="module")
def trained():
    ds = datagen.generate(datagen.DatasetManifest(n_train=1000, n_val=200, n_test=64,
                                                  mismatch_rate=0.0, seed=1))
    model, hist = ct.pretrain(ds, ct.ContrastiveConfig(epochs=10, seed=1))
    return ds, model, hist


def test_retrieval_beats_chance_threefold(trained):
    ds, model, _ = trained
    z_e, z_c = ct.embed(model, ds.test[:64])
    assert ct.retrieval_accuracy(z_e, z_c) >= 3 / 64


def test_training_reduces_loss(trained):
    _, _, hist = trained
    assert hist[-1]["val_loss"] < hist[0]["val_loss"]


def test_aligned_loss_below_shuffled(trained):
    ds, model, _ = trained
    rng = np.random.default_rng(0)
    gaps = []
    for k in range(5):
        z_e, z_c = ct.embed(model, ds.test[k * 12:(k + 1) * 12])
        gaps.append(ct.info_nce(z_e, z_c[rng.permutation(12)], 0.1) - ct.info_nce(z_e, z_c, 0.1))
    assert np.mean(gaps) > 0


def test_pretrain_deterministic():
    ds = datagen.generate(datagen.DatasetManifest(n_train=64, n_val=16, n_test=4, dims=(6, 3, 8, 8)))
    cfg = ct.ContrastiveConfig(epochs=2, batch_size=16, seed=3)
    a, _ = ct.pretrain(ds, cfg)
    b, _ = ct.pretrain(ds, cfg)
    assert np.array_equal(a.net.params, b.net.params)
    assert np.array_equal(a.heads.flat(), b.heads.flat())


def test_embeddings_unit_norm_and_repeatable(trained):
    ds, model, _ = trained
    a = ct.embed(model, ds.val)
    b = ct.embed(model, ds.val)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    for z in a:
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_zero_input_embedding_is_deterministic(trained):
    _, model, _ = trained
    T, F, H, W = 48, 8, 16, 16
    z1 = model.project(np.zeros((2, T, F)), np.zeros((2, H, W)))
    z2 = model.project(np.zeros((2, T, F)), np.zeros((2, H, W)))
    assert np.array_equal(z1[0], z2[0]) and np.allclose(z1[0][0], z1[0][1])


def test_embedding_and_checkpoint_round_trip(tmp_path, trained):
    ds, model, _ = trained
    z_e, z_c = ct.embed(model, ds.val)
    ct.write_embeddings(tmp_path / "e.jsonl", [s.id for s in ds.val], z_e, z_c)
    ids, e2, c2 = ct.read_embeddings(tmp_path / "e.jsonl")
    assert ids == [s.id for s in ds.val] and np.array_equal(e2, z_e) and np.array_equal(c2, z_c)
    ct.save_model(model, tmp_path / "m.ckpt")
    loaded = ct.load_model(tmp_path / "m.ckpt")
    assert np.array_equal(ct.embed(loaded, ds.val)[0], z_e)


def test_bad_embedding_record(tmp_path):
    (tmp_path / "e.jsonl").write_text('{"id": "a", "phi_ehr": [1]}\n')
    with pytest.raises(ParseError, match="line 1"):
        ct.read_embeddings(tmp_path / "e.jsonl")
