"""Autodiff core: forward values against naive oracles, analytic gradients
against central finite differences, clipping, and determinism."""

import math

import numpy as np
import pytest

from knmt import tensor as T
from knmt.errors import ContractError, DimensionError, NumericError


def randt(rng, shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, dtype=np.float64)


def test_tanh_zero_is_zero():
    out = T.tanh(T.Tensor([0.0]))
    assert out.data[0] == 0.0


def test_softmax_uniform_on_equal_inputs():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 4))
    out = T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64))
    assert out.shape == (2, 4)
    oracle = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.allclose(out.data, oracle, atol=1e-12)


def test_matmul_shape_error_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_backward_of_sum_is_ones(rng):
    x = T.Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_sum_tanh_analytic():
    x = T.Tensor([0.5], dtype=np.float64, requires_grad=True)
    T.sum_(T.tanh(x)).backward()
    expected = 1.0 - math.tanh(0.5) ** 2  # = 0.786448...
    assert abs(x.grad[0] - expected) < 1e-12
    assert abs(expected - 0.786448) < 1e-6


def test_backward_requires_scalar(rng):
    x = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.tanh(x).backward()


def test_composed_graph_matches_finite_differences(rng):
    # randomized composed graphs over the full op set, 20 seeds
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = randt(r, (3, 4))
        w = randt(r, (4, 5))
        v = randt(r, (5,))
        tab = randt(r, (6, 3))
        ids = r.integers(0, 6, size=3)

        def loss():
            e = T.embedding_lookup(tab, ids)           # (3,3)
            h = T.tanh(T.add(T.matmul(x, w), 0.1))     # (3,5)
            s = T.sigmoid(T.matmul(e, T.transpose(tab)))  # (3,6)
            p = T.softmax(T.concat([h, s], axis=1))    # (3,11)
            q = T.log_softmax(T.mul(p, p))
            picked = T.take_rows(q, np.array([1, 5, 9]))
            m = T.mean_(T.div(T.exp(picked), 2.0))
            z = T.sum_(T.sqrt(T.add(T.mul(v, v), 1.0)))
            return T.add(m, T.mul(z, 0.01))

        rep = T.grad_check(loss, [("x", x), ("w", w), ("v", v), ("tab", tab)],
                           step=1e-3, tol=1e-4)
        assert rep.passed, (seed, rep.errors)


def test_grad_check_quadratic_is_exact(rng):
    x = randt(rng, (7,))

    def loss():
        return T.mul(T.sum_(T.mul(x, x)), 0.5)

    rep = T.grad_check(loss, [("x", x)])
    assert rep.passed
    assert rep.max_rel_err < 1e-8
    x.grad = None
    loss().backward()
    assert np.allclose(x.grad, x.data, atol=1e-12)  # d(0.5*||x||^2)/dx = x


def test_standardize_matches_finite_differences(rng):
    x = randt(rng, (4, 6))

    def loss():
        return T.mean_(T.mul(T.standardize(x, 1e-5), T.Tensor(np.arange(6, dtype=np.float64))))

    rep = T.grad_check(loss, [("x", x)])
    assert rep.passed, rep.errors


def test_softmax_rows_normalized(rng):
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = T.Tensor(r.normal(size=(5, 9)) * 10)
        out = T.softmax(x).data
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6


def test_forward_deterministic_bitwise(rng):
    x = T.Tensor(rng.normal(size=(8, 8)).astype(np.float32))
    w = T.Tensor(rng.normal(size=(8, 8)).astype(np.float32))
    a = T.softmax(T.matmul(T.tanh(x), w)).data
    b = T.softmax(T.matmul(T.tanh(x), w)).data
    assert np.array_equal(a, b)


def test_checked_mode_flags_nonfinite():
    with np.errstate(divide="ignore"):
        with T.checked(True):
            with pytest.raises(NumericError, match="log"):
                T.log(T.Tensor([0.0]))
        T.log(T.Tensor([0.0]))  # unchecked: no error


def test_slice_and_concat_roundtrip_gradients(rng):
    x = randt(rng, (5, 4))

    def loss():
        top = x[:2, :]
        bottom = x[2:, :]
        back = T.concat([top, bottom], axis=0)
        return T.sum_(T.mul(back, back))

    rep = T.grad_check(loss, [("x", x)])
    assert rep.passed


# ---------------------------------------------------------------------------
# clip_global_norm

def test_clip_at_boundary_unchanged():
    g = [np.array([3.0]), np.array([4.0])]
    pre = T.clip_global_norm(g, 5.0)
    assert pre == 5.0
    assert g[0][0] == 3.0 and g[1][0] == 4.0


def test_clip_scales_to_max_norm():
    g = [np.array([6.0]), np.array([8.0])]
    pre = T.clip_global_norm(g, 5.0)
    assert pre == 10.0
    assert np.allclose([g[0][0], g[1][0]], [3.0, 4.0])


def test_clip_zero_grads_noop():
    g = [np.zeros(4)]
    pre = T.clip_global_norm(g, 5.0)
    assert pre == 0.0
    assert np.array_equal(g[0], np.zeros(4))


def test_clip_invariant_randomized(rng):
    for seed in range(20):
        r = np.random.default_rng(seed)
        g = [r.normal(size=s).astype(np.float32) * 10 for s in [(3, 3), (7,), (2, 5)]]
        T.clip_global_norm(g, 5.0)
        post = math.sqrt(sum(float(np.square(x, dtype=np.float64).sum()) for x in g))
        assert post <= 5.0 + 1e-9


def test_clip_requires_positive_max_norm():
    with pytest.raises(ContractError):
        T.clip_global_norm([np.ones(2)], 0.0)
