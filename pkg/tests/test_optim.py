import numpy as np
from hypothesis import given, strategies as st

from certain.optim import AdamState, adam_step, cosine_lr


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    q, _ = adam_step(p, np.zeros(2), AdamState.zeros(2), lr=0.1)
    assert np.array_equal(p, q)


@given(st.floats(1e-3, 1e3), st.floats(1e-4, 1e-1))
def test_constant_gradient_step_tends_to_lr(g, lr):
    p, state = np.zeros(1), AdamState.zeros(1)
    for _ in range(2000):
        q, state = adam_step(p, np.array([g]), state, lr)
        step, p = p - q, q
    assert abs(step[0] - lr) < 1e-3 * lr


def test_identical_runs_identical_trajectories():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(50, 4))

    def run():
        p, s = np.ones(4), AdamState.zeros(4)
        for g in grads:
            p, s = adam_step(p, g, s, 0.01)
        return p

    assert np.array_equal(run(), run())


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 100) == 0.1
    assert abs(cosine_lr(0.1, 50, 100) - 0.05) < 1e-15
    assert cosine_lr(0.1, 100, 100) == 0.0
