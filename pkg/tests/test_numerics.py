import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from purs import numerics as nx
from purs.errors import ContractError, DimensionError, NumericError
from purs.numerics import Mlp, SgdConfig, Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            Tensor([np.inf])

    def test_non_finite_result_is_numeric_error(self):
        with pytest.raises(NumericError):
            nx.exp(Tensor([1000.0]))

    def test_shape_and_grad_shape(self):
        t = leaf(np.ones((2, 3)))
        nx.backward(nx.sum_(nx.mul(t, t)))
        assert t.grad.shape == t.shape
        assert t.data.size == math.prod(t.shape)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(np.eye(2), a).data, a)

    def test_scalar_case(self):
        assert nx.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]

    def test_hand_product(self):
        out = nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
        assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_flows_to_both(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert nx.grad_check(lambda: nx.sum_(nx.square(nx.matmul(a, b))), [a, b]) < 1e-6


class TestElementwise:
    def test_sigmoid_zero(self):
        assert nx.sigmoid(Tensor(0.0)).item() == 0.5

    def test_tanh_zero(self):
        assert nx.tanh(Tensor(0.0)).item() == 0.0

    def test_sigmoid_one(self):
        assert nx.sigmoid(Tensor(1.0)).item() == pytest.approx(0.7310585786, abs=1e-10)

    def test_dispatch_by_name(self):
        assert nx.elementwise("scale", Tensor([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]
        with pytest.raises(ContractError):
            nx.elementwise("cosh", Tensor(1.0))

    def test_derivative_rules(self):
        x = leaf(0.3)
        nx.backward(nx.sigmoid(x))
        s = 1 / (1 + math.exp(-0.3))
        assert x.grad == pytest.approx(s * (1 - s), abs=1e-15)
        y = leaf(0.3)
        nx.backward(nx.tanh(y))
        assert y.grad == pytest.approx(1 - math.tanh(0.3) ** 2, abs=1e-15)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            nx.add(np.ones(3), np.ones(4))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    @given(st.floats(-1e6, 1e6))
    def test_single_element(self, x):
        assert nx.softmax(Tensor([x])).data.tolist() == [1.0]

    def test_log_three(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_empty_is_dimension_error(self):
        with pytest.raises(DimensionError):
            nx.softmax(Tensor(np.zeros(0)))

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, v, c):
        s = nx.softmax(Tensor(v)).data
        assert abs(s.sum() - 1.0) < 1e-12
        assert (s > 0).all()
        np.testing.assert_allclose(nx.softmax(Tensor(v + c)).data, s, atol=1e-12)

    def test_masked_entries_get_zero(self):
        s = nx.softmax(Tensor([1.0, 2.0, 3.0]), mask=[True, False, True]).data
        assert s[1] == 0.0 and abs(s.sum() - 1) < 1e-12
        assert nx.softmax(Tensor([1.0, 2.0]), mask=[False, False]).data.tolist() == [0.0, 0.0]


class TestBackward:
    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            nx.backward(nx.mul(leaf([1.0, 2.0]), 2.0))

    def test_repeated_calls_accumulate(self):
        x = leaf(2.0)
        nx.backward(nx.square(x))
        nx.backward(nx.square(x))
        assert x.grad == pytest.approx(8.0)

    def test_linearity(self, rng):
        a, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=(4, 4)))

        def f():
            return nx.sum_(nx.tanh(nx.matmul(nx.reshape(a, (1, 4)), b)))

        def g():
            return nx.sum_(nx.mul(nx.sigmoid(a), a))

        nx.backward(f())
        ga1, gb1 = a.grad.copy(), b.grad.copy()
        a.zero_grad(), b.zero_grad()
        nx.backward(g())
        ga2 = a.grad.copy()
        a.zero_grad(), b.zero_grad()
        nx.backward(nx.add(f(), g()))
        np.testing.assert_allclose(a.grad, ga1 + ga2, atol=1e-14)
        np.testing.assert_allclose(b.grad, gb1, atol=1e-14)

    def test_shared_subexpression(self):
        x = leaf(3.0)
        y = nx.mul(x, x)
        nx.backward(nx.add(y, y))
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_builds_no_graph(self):
        x = leaf(1.0)
        with nx.no_grad():
            y = nx.mul(x, 2.0)
        assert not y.requires_grad


class TestGradCheck:
    def test_square(self):
        x = leaf(3.0)
        assert nx.grad_check(lambda: nx.square(x), [x]) < 1e-8

    def test_sigmoid(self):
        x = leaf(0.0)
        assert nx.grad_check(lambda: nx.sigmoid(x), [x]) < 1e-6

    def test_two_layer_mlp(self, rng):
        mlp = Mlp([2, 2, 1], rng, "m", activation="tanh", scale=1.0)
        x = rng.normal(size=(3, 2))
        assert sum(t.size for t in mlp.tensors()) == 9
        c = leaf(0.4)  # tenth parameter
        assert nx.grad_check(lambda: nx.mul(nx.sum_(mlp(x)), c), mlp.tensors() + [c], eps=1e-5) < 1e-4

    def test_eps_range(self):
        x = leaf(1.0)
        with pytest.raises(ContractError):
            nx.grad_check(lambda: nx.square(x), [x], eps=1e-2)
        with pytest.raises(ContractError):
            nx.grad_check(lambda: nx.square(x), [x], eps=0.0)

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "exp", "square", "softmax", "norm", "relu"])
    def test_unary_ops_over_many_inputs(self, op, rng):
        x = leaf(rng.normal(size=(4, 30)) + (0.3 if op == "relu" else 0.0))
        w = rng.normal(size=(4, 30))
        fn = getattr(nx, op)

        def f():
            out = fn(x)
            return nx.sum_(nx.mul(out, w[..., 0] if op == "norm" else w))

        assert nx.grad_check(f, [x]) < 1e-4

    def test_structural_ops(self, rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(3, 2)))
        w = rng.normal(size=(4, 6))

        def f():
            cat = nx.concat([a, b], axis=1)
            t = nx.transpose(nx.take(cat, [2, 0, 0, 1], axis=0))
            sl = nx.getitem(nx.reshape(t, (2, 12)), (slice(None), slice(1, 7)))
            bc = nx.broadcast_to(nx.mean(a, axis=0), (3, 4))
            return nx.add(nx.sum_(nx.mul(sl, w[:2])), nx.sum_(nx.mul(bc, bc)))

        assert nx.grad_check(f, [a, b]) < 1e-4

    def test_bce_with_logits(self, rng):
        z = leaf(rng.normal(size=20) * 3)
        y = rng.integers(0, 2, 20)
        assert nx.grad_check(lambda: nx.bce_with_logits(z, y), [z]) < 1e-4
        ref = -np.mean(y * np.log(1 / (1 + np.exp(-z.data))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z.data))))
        assert nx.bce_with_logits(z, y).item() == pytest.approx(ref, abs=1e-12)


class TestSgd:
    def test_one_step(self):
        p = leaf(1.0)
        p.grad = np.array(0.5)
        nx.sgd_step([p], SgdConfig(1.0), 0)
        assert p.data == 0.5
        assert p.grad is None

    def test_decayed_step(self):
        p = leaf(1.0)
        p.grad = np.array(0.5)
        nx.sgd_step([p], SgdConfig(1.0, 0.1), 1)
        assert p.data == pytest.approx(0.95, abs=1e-15)

    def test_zero_gradient(self):
        p = leaf(1.0)
        p.grad = np.array(0.0)
        nx.sgd_step([p], SgdConfig(), 0)
        assert p.data == 1.0

    def test_missing_gradient(self):
        with pytest.raises(ContractError):
            nx.sgd_step([leaf(1.0)], SgdConfig(), 0)

    @given(st.floats(1e-3, 10), st.floats(1e-3, 1.0), st.integers(0, 20))
    def test_effective_rate(self, lr, decay, e):
        cfg = SgdConfig(lr, decay)
        assert cfg.lr_at(e) == pytest.approx(lr * decay ** e)
        assert cfg.lr_at(e) > 0

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(decay_factor=0), dict(decay_factor=1.5),
                                    dict(decay_unit="per-step")])
    def test_invalid_config(self, kw):
        with pytest.raises(ContractError):
            SgdConfig(**kw)


def test_deterministic_given_seed():
    def run():
        rng = np.random.default_rng(7)
        mlp = Mlp([3, 4, 1], rng, "m")
        x = rng.normal(size=(5, 3))
        loss = nx.mean(nx.square(mlp(x)))
        nx.backward(loss)
        return loss.data.copy(), [t.grad.copy() for t in mlp.tensors()]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


def test_glorot_init_limits(rng):
    mlp = Mlp([30, 10, 1], rng, "m", scale=None)
    assert np.abs(mlp.weights[0].data).max() <= math.sqrt(6 / 40)
    assert np.abs(mlp.weights[0].data).max() > 0.05
