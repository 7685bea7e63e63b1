import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mspst import numcore as nc
from mspst.numcore import Adam, AdamState, Tensor, adam_step, grad_check, logsumexp


def leaf(a):
    return nc.parameter(np.array(a, dtype=np.float64))


class TestBackward:
    def test_square_at_three(self):
        w = leaf(3.0)
        (w * w).backward()
        assert w.grad == pytest.approx(6.0, abs=1e-12)

    def test_constant_gives_zero_gradient(self):
        w = leaf([1.0, -2.0])
        (w * 0.0 + 5.0).sum().backward()
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])

    def test_softmax_sum_is_flat(self, rng):
        w = leaf(rng.normal(size=5))
        nc.softmax(w).sum().backward()
        np.testing.assert_allclose(w.grad, 0.0, atol=1e-12)

    def test_accumulation_is_additive(self):
        w = leaf(2.0)
        (w * w).backward()
        (w * 3.0).backward()
        assert w.grad == pytest.approx(7.0)
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_root_rejected(self):
        w = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            (w * 2.0).backward()

    def test_shared_subexpression(self):
        w = leaf(1.5)
        y = w * w
        (y + y * w).backward()
        assert w.grad == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2)

    def test_no_grad_records_nothing(self):
        w = leaf(2.0)
        with nc.no_grad():
            y = w * w
        assert not y.requires_grad
        assert nc.grad_enabled()

    def test_broadcast_gradient_is_reduced(self):
        a = leaf(np.ones((3, 4)))
        b = leaf(np.ones(4))
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3.0] * 4)


class TestGradCheck:
    def test_quadratic_form(self, rng):
        A = rng.normal(size=(4, 4))
        A = A @ A.T
        x = leaf(rng.normal(size=4))
        err = grad_check(lambda: x @ (Tensor(A) @ x), [x], eps=1e-5)
        assert err < 1e-6

    @pytest.mark.parametrize("eps", [0.0, -1e-6, 0.1])
    def test_eps_range(self, eps):
        x = leaf(1.0)
        with pytest.raises(ValueError):
            grad_check(lambda: x * x, [x], eps=eps)

    def test_non_finite_names_parameter(self):
        a, b = leaf(1.0), leaf(1e-7)
        with pytest.raises(FloatingPointError, match="parameter 1"):
            grad_check(lambda: a * nc.log(b), [a, b], eps=1e-6)

    def test_detects_wrong_gradient(self):
        x = leaf([0.3, 0.7])

        def bad():
            out = nc._make(x.data ** 2, (x,), lambda g: (g * 3 * x.data,))
            return out.sum()
        assert grad_check(bad, [x]) > 0.1


def _unary(op, lo=-2.0, hi=2.0):
    return op, lo, hi


UNARY = {
    "exp": _unary(nc.exp),
    "log": _unary(nc.log, 0.2, 3.0),
    "sqrt": _unary(nc.sqrt, 0.2, 3.0),
    "tanh": _unary(nc.tanh),
    "sigmoid": _unary(nc.sigmoid),
    "swish": _unary(nc.swish),
    "relu": _unary(nc.relu, 0.1, 2.0),
    "power": _unary(lambda a: nc.power(a, 3.0)),
    "softmax": _unary(lambda a: nc.softmax(a, axis=-1)),
    "log_softmax": _unary(lambda a: nc.log_softmax(a, axis=0)),
    "logsumexp_t": _unary(lambda a: nc.logsumexp_t(a, axis=1, keepdims=True)),
    "mean": _unary(lambda a: nc.mean(a, axis=0)),
    "transpose": _unary(lambda a: nc.transpose(a) * np.arange(12.0).reshape(4, 3)),
    "reshape": _unary(lambda a: nc.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6)),
    "getitem": _unary(lambda a: a[np.array([0, 2, 2]), 1:]),
    "pad_axis": _unary(lambda a: nc.pad_axis(a, 1, 2, 1) * np.arange(21.0).reshape(3, 7)),
    "masked_fill": _unary(lambda a: nc.masked_fill(a, np.eye(3, 4, dtype=bool), -3.0)),
    "maximum": _unary(lambda a: nc.maximum(a, -5.0)),
    "concat": _unary(lambda a: nc.concat([a, a * 2.0], axis=0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2 ** 16))
def test_unary_gradients_property(name, seed):
    op, lo, hi = UNARY[name]
    r = np.random.default_rng(seed)
    a = leaf(r.uniform(lo, hi, size=(3, 4)))
    w = r.normal(size=np.shape(op(Tensor(a.data)).data))
    assert grad_check(lambda: (op(a) * w).sum(), [a]) < 1e-4


@given(seed=st.integers(0, 2 ** 16))
def test_binary_gradients_property(seed):
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(2, 3, 4)))
    b = leaf(r.normal(size=(4, 5)))
    c = leaf(r.uniform(0.5, 2.0, size=(5,)))
    d = leaf(r.normal(size=(2, 3, 1)))

    def f():
        h = (a @ b) / c - d * (a @ b) + d
        return (h * h).sum()
    assert grad_check(f, [a, b, c, d]) < 1e-4


@given(seed=st.integers(0, 2 ** 16))
def test_layer_norm_and_take_rows_property(seed):
    r = np.random.default_rng(seed)
    emb = leaf(r.normal(size=(6, 5)))
    gamma, beta = leaf(r.normal(size=5)), leaf(r.normal(size=5))
    ids = r.integers(0, 6, size=(2, 4))
    w = r.normal(size=(2, 4, 5))
    f = lambda: (nc.layer_norm(nc.take_rows(emb, ids), gamma, beta) * w).sum()
    assert grad_check(f, [emb, gamma, beta]) < 1e-4


class TestLogsumexp:
    def test_two_zeros(self):
        assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)

    def test_identity_element(self):
        assert logsumexp([-math.inf, 1.7]) == 1.7

    def test_no_overflow(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_all_negative_infinity(self):
        assert logsumexp([-math.inf, -math.inf]) == -math.inf

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, v, c):
        assert logsumexp(np.array(v) + c) == pytest.approx(logsumexp(v) + c, abs=1e-9)


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        (p,), state = adam_step([np.array([1.5, -2.0])], [np.zeros(2)], AdamState(), lr=0.1)
        np.testing.assert_array_equal(p, [1.5, -2.0])
        assert state.step == 1

    def test_defaults(self):
        import inspect
        sig = inspect.signature(adam_step)
        assert sig.parameters["beta1"].default == 0.9
        assert sig.parameters["beta2"].default == 0.98
        assert Adam({}).betas == (0.9, 0.98)

    def test_first_step_moves_by_lr(self):
        (p,), _ = adam_step([np.array(1.0)], [np.array(1.0)], AdamState(), lr=0.1)
        assert float(p) == pytest.approx(0.9, abs=1e-8)

    def test_inputs_untouched_and_deterministic(self, rng):
        p, g = rng.normal(size=3), rng.normal(size=3)
        p0 = p.copy()
        a = adam_step([p], [g], AdamState(), lr=0.01)
        b = adam_step([p], [g], AdamState(), lr=0.01)
        np.testing.assert_array_equal(p, p0)
        np.testing.assert_array_equal(a[0][0], b[0][0])
        np.testing.assert_array_equal(a[1].v[0], b[1].v[0])

    def test_nan_rejected_before_mutation(self):
        t1, t2 = leaf([1.0]), leaf([2.0])
        opt = Adam({"a": t1, "b": t2}, lr=0.1)
        t1.grad, t2.grad = np.array([1.0]), np.array([np.nan])
        with pytest.raises(FloatingPointError):
            opt.step()
        assert t1.data[0] == 1.0 and not opt.m

    def test_functional_nan_rejected(self):
        with pytest.raises(FloatingPointError):
            adam_step([np.zeros(2)], [np.array([0.0, np.nan])], AdamState(), lr=0.1)

    def test_names_subset_leaves_others_alone(self):
        t1, t2 = leaf([1.0]), leaf([2.0])
        opt = Adam({"a": t1, "b": t2}, lr=0.1)
        t1.grad = t2.grad = np.array([1.0])
        opt.step(names=["a"])
        assert t2.data[0] == 2.0 and "b" not in opt.m
        assert set(opt.state_arrays()) == {"adam.m.a", "adam.v.a", "adam.t.a"}

    def test_minimises_quadratic(self):
        x = leaf([3.0, -4.0])
        opt = Adam({"x": x}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            (x * x).sum().backward()
            opt.step()
        assert np.abs(x.data).max() < 1e-2
