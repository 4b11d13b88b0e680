import numpy as np
import pytest

from dal.errors import DimensionMismatch, NonFiniteGradient
from dal.model import (
    EmbeddingHead,
    LRSchedule,
    OptimizerState,
    backward,
    finite_diff_check,
    forward,
    make_head,
    sgd_step,
)

import oracles


def test_identity_forward_and_backward():
    head = make_head("identity", 2)
    np.testing.assert_array_equal(forward(head, [0.2, -1.3]), [0.2, -1.3])
    pg, xg = backward(head, [0.2, -1.3], [1.0, 2.0])
    assert pg.size == 0
    np.testing.assert_array_equal(xg, [1.0, 2.0])


def test_linear_identity_parameters():
    head = EmbeddingHead("linear", 3, 3, params=np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    x = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(forward(head, x), x)


def test_linear_forward_matches_loop_matmul(rng):
    head = make_head("linear", 3, 2, rng=rng)
    head.params[-2:] = rng.uniform(-0.1, 0.1, 2)
    W, b = head.unpack()
    for _ in range(50):
        x = rng.standard_normal(3)
        ref = [wx + bb for wx, bb in zip(oracles.matmul_vec(W.tolist(), x.tolist()), b.tolist())]
        np.testing.assert_allclose(forward(head, x), ref, atol=1e-12, rtol=0)


def test_onehidden_applies_rectifier():
    p = np.concatenate([np.array([[1.0], [-1.0]]).ravel(), np.zeros(2), np.array([[1.0, 1.0]]).ravel(), np.zeros(1)])
    head = EmbeddingHead("onehidden", 1, 1, 2, p)
    assert forward(head, [3.0])[0] == 3.0
    assert forward(head, [-3.0])[0] == 3.0


def test_linear_bias_gradient_is_upstream(rng):
    head = make_head("linear", 4, 3, rng=rng)
    g = rng.standard_normal(3)
    pg, _ = backward(head, rng.standard_normal(4), g)
    np.testing.assert_array_equal(pg[-3:], g)


def test_dimension_errors():
    head = make_head("linear", 4, 3)
    with pytest.raises(DimensionMismatch):
        forward(head, np.zeros(5))
    with pytest.raises(DimensionMismatch):
        backward(head, np.zeros(4), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        EmbeddingHead("linear", 4, 3, params=np.zeros(3))
    with pytest.raises(DimensionMismatch):
        make_head("identity", 4, 3)


def test_initialisation_is_seeded_and_bounded():
    a = make_head("onehidden", 10, 6, 20, rng=3)
    b = make_head("onehidden", 10, 6, 20, rng=3)
    np.testing.assert_array_equal(a.params, b.params)
    W1, b1, W2, b2 = a.unpack()
    assert np.abs(W1).max() <= np.sqrt(6 / 30) and np.abs(W2).max() <= np.sqrt(6 / 26)
    assert not b1.any() and not b2.any()


@pytest.mark.parametrize("kind", ["linear", "onehidden"])
def test_backward_matches_finite_differences(kind, rng):
    for _ in range(50):
        head = make_head(kind, 5, 4, 7, rng=rng)
        head.params += 0.05 * rng.standard_normal(head.n_params)
        X = rng.standard_normal((6, 5))
        w = rng.standard_normal((6, 4))
        pre = X @ head.unpack()[0].T + head.unpack()[1] if kind == "onehidden" else None
        if pre is not None and np.abs(pre).min() < 1e-4:
            continue

        def by_params(p):
            return float(np.sum(w * forward(head, X, p))), backward(head, X, w, p)[0]

        def by_input(x):
            x = x.reshape(X.shape)
            return float(np.sum(w * forward(head, x))), backward(head, x, w)[1].ravel()

        assert finite_diff_check(head.params, by_params).max_rel_error < 1e-4
        assert finite_diff_check(X.ravel(), by_input).max_rel_error < 1e-4


def test_sgd_examples():
    st = OptimizerState(LRSchedule(0.1), momentum=0.0)
    p = sgd_step(st, np.array([1.0]), np.array([0.5]))
    assert p[0] == pytest.approx(0.95)
    assert st.t == 1

    st = OptimizerState(LRSchedule(0.1), momentum=0.9, velocity=np.array([2.0]))
    p = sgd_step(st, np.array([1.0]), np.array([0.0]))
    assert st.velocity[0] == pytest.approx(1.8)
    assert p[0] == pytest.approx(1.0 - 0.18)


def test_sgd_zero_gradient_without_velocity_is_noop():
    st = OptimizerState(LRSchedule(0.1), momentum=0.9)
    p0 = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sgd_step(st, p0, np.zeros(2)), p0)


def test_sgd_rejects_non_finite():
    st = OptimizerState(LRSchedule(0.1))
    with pytest.raises(NonFiniteGradient, match="iteration 0"):
        sgd_step(st, np.zeros(3), np.array([0.0, np.inf, 1.0]))


def test_schedule_halfway_decay():
    T = 1000
    s = LRSchedule(0.01, 0.1, milestones=(T // 2,))
    assert s.rate(0) == 0.01
    assert s.rate(T // 2 - 1) == 0.01
    assert s.rate(T // 2) == pytest.approx(0.001)
    assert s.rate(T) == pytest.approx(0.001)


def test_schedule_staircase():
    s = LRSchedule(0.045, 0.94, decay_interval=10)
    assert s.rate(9) == 0.045
    assert s.rate(10) == pytest.approx(0.045 * 0.94)
    assert s.rate(25) == pytest.approx(0.045 * 0.94**2)


def test_finite_diff_check_quadratic(rng):
    x = rng.standard_normal(12)
    rep = finite_diff_check(x, lambda p: (float(p @ p), 2 * p))
    assert rep.max_rel_error < 1e-8


def test_finite_diff_check_detects_corruption(rng):
    x = rng.uniform(0.5, 2.0, 12)

    def corrupted(p):
        g = 2 * p
        g[5] *= 2
        return float(p @ p), g

    rep = finite_diff_check(x, corrupted)
    assert rep.worst_index == 5
    assert rep.max_rel_error > 0.4
