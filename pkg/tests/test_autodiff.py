import numpy as np
import pytest
from numpy.testing import assert_allclose

import graphrd.autodiff as ad
from graphrd import build_graph, normalized_laplacian
from graphrd.autodiff import (NonFiniteError, ShapeError, Tape, TapeError,
                              backward, finite_difference_check)


def scalarize(t):
    return ad.sum_all(ad.hadamard(t, t))  # ||t||^2 as a 1x1 tensor


def op_gradient_check(build, shapes, seed=0, step=1e-6):
    """FD-check an op: build(tape, *tensors) -> output tensor."""
    rng = np.random.default_rng(seed)
    arrays = {f"x{i}": rng.uniform(0.3, 1.2, s) * rng.choice([-1.0, 1.0], s)
              for i, s in enumerate(shapes)}

    def f(params):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        out = build(tape, *[leaves[f"x{i}"] for i in range(len(shapes))])
        loss = scalarize(out)
        backward(tape, loss)
        return float(loss.values[0, 0]), {k: t.grad for k, t in leaves.items()}

    return finite_difference_check(f, arrays, step=step)


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        b = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        eye = tape.leaf(np.eye(2))
        assert_allclose(ad.matmul(eye, b).values, b.values)

    def test_hand_product(self):
        tape = Tape()
        a = tape.leaf(np.array([[1.0, 2.0]]))
        b = tape.leaf(np.array([[3.0], [4.0]]))
        assert_allclose(ad.matmul(a, b).values, [[11.0]])

    def test_gradient(self):
        err = op_gradient_check(lambda tape, a, b: ad.matmul(a, b), [(4, 4), (4, 4)])
        assert err < 1e-6

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ad.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))


class TestElementwise:
    def test_relu_values(self):
        tape = Tape()
        x = tape.leaf(np.array([[-1.0, 0.0, 2.0]]))
        assert_allclose(ad.relu(x).values, [[0.0, 0.0, 2.0]])

    def test_sine_at_zero(self):
        tape = Tape()
        x = tape.leaf(np.array([[0.0]]))
        out = ad.sine(x)
        assert out.values[0, 0] == 0.0
        backward(tape, ad.sum_all(out))
        assert x.grad[0, 0] == pytest.approx(1.0)

    def test_exp_neg_relu_values(self):
        tape = Tape()
        x = tape.leaf(np.array([[-5.0, 0.0, np.log(2.0)]]))
        assert_allclose(ad.exp_neg_relu(x).values, [[1.0, 1.0, 0.5]])

    @pytest.mark.parametrize("kind,arity", [
        ("add", 2), ("sub", 2), ("hadamard", 2), ("relu", 1), ("sine", 1),
        ("exp-neg-relu", 1),
    ])
    def test_dispatch_gradients(self, kind, arity):
        err = op_gradient_check(
            lambda tape, *ops: ad.elementwise(kind, *ops), [(3, 5)] * arity, seed=3)
        assert err < 1e-6

    def test_scale_dispatch(self):
        err = op_gradient_check(
            lambda tape, x: ad.elementwise("scale", x, alpha=-2.5), [(2, 3)])
        assert err < 1e-6

    def test_unknown_kind(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.elementwise("cosh", tape.leaf(np.ones((1, 1))))

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ad.add(tape.leaf(np.ones((2, 2))), tape.leaf(np.ones((2, 3))))


class TestBroadcastRow:
    def test_three_rows(self):
        tape = Tape()
        v = tape.leaf(np.array([[1.0, 2.0]]))
        out = ad.broadcast_row(v, 3)
        assert_allclose(out.values, [[1.0, 2.0]] * 3)

    def test_backward_column_sums(self):
        tape = Tape()
        v = tape.leaf(np.array([[1.0, 2.0]]))
        out = ad.broadcast_row(v, 3)
        backward(tape, ad.sum_all(out))
        assert_allclose(v.grad, [[3.0, 3.0]])

    def test_degenerate(self):
        tape = Tape()
        v = tape.leaf(np.array([[1.0, 2.0]]))
        assert_allclose(ad.broadcast_row(v, 1).values, v.values)

    def test_zero_rejected(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            ad.broadcast_row(tape.leaf(np.ones((1, 2))), 0)


class TestSparseApply:
    def setup_method(self):
        self.lap = normalized_laplacian(build_graph(2, [(0, 1)]))

    def test_path_example(self):
        tape = Tape()
        u = tape.leaf(np.array([[1.0], [0.0]]))
        assert_allclose(ad.sparse_apply(self.lap, u).values, [[0.5], [-0.5]])

    def test_backward_is_forward(self):
        # symmetric operator: gradient equals the operator applied to the
        # output gradient
        rng = np.random.default_rng(0)
        tape = Tape()
        u = tape.leaf(rng.standard_normal((2, 3)))
        out = ad.sparse_apply(self.lap, u)
        g = rng.standard_normal((2, 3))
        tape.backward(tape.record(np.array([[np.sum(out.values * g)]]), (out,),
                                  lambda gg: tape.add_grad(out, gg[0, 0] * g)))
        assert_allclose(u.grad, self.lap.csr @ g, atol=1e-14)

    def test_gradient(self):
        lap = self.lap
        err = op_gradient_check(lambda tape, u: ad.sparse_apply(lap, u), [(2, 3)])
        assert err < 1e-6


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        w = tape.leaf(np.arange(4.0).reshape(2, 2))
        backward(tape, ad.sum_all(w))
        assert_allclose(w.grad, np.ones((2, 2)))

    def test_squared_norm_gradient(self):
        tape = Tape()
        w = tape.leaf(np.array([[1.0, -2.0], [0.5, 3.0]]))
        backward(tape, ad.sum_all(ad.hadamard(w, w)))
        assert_allclose(w.grad, 2.0 * w.values)

    def test_fanout_accumulates(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.5]]))
        backward(tape, ad.add(x, x))
        assert_allclose(x.grad, [[2.0]])

    def test_untouched_leaf_is_zero(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        y = tape.leaf(np.array([[3.0]]))
        backward(tape, ad.sum_all(y))
        assert_allclose(x.grad, np.zeros((2, 2)))

    def test_double_backward_rejected(self):
        tape = Tape()
        loss = ad.sum_all(tape.leaf(np.ones((1, 1))))
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        with pytest.raises(TapeError):
            backward(tape, tape.leaf(np.ones((2, 1))))

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(TapeError):
            ad.add(t1.leaf(np.ones((1, 1))), t2.leaf(np.ones((1, 1))))

    def test_composite_graph_gradient(self):
        lap = normalized_laplacian(build_graph(3, [(0, 1), (1, 2)]))

        def build(tape, w, v):
            spread = ad.sparse_apply(lap, ad.relu(ad.matmul(w, v)))
            return ad.add(spread, ad.sine(ad.matmul(w, v)))

        err = op_gradient_check(build, [(3, 2), (2, 2)], seed=5)
        assert err < 1e-5


class TestDropout:
    def test_eval_identity(self):
        tape = Tape()
        x = tape.leaf(np.ones((4, 4)))
        assert ad.dropout(x, 0.9, None, training=False) is x

    def test_train_mask_scaling(self):
        tape = Tape()
        x = tape.leaf(np.ones((50, 50)))
        out = ad.dropout(x, 0.5, np.random.default_rng(0), training=True)
        vals = np.unique(out.values)
        assert set(vals.tolist()) <= {0.0, 2.0}

    def test_gradient_uses_mask(self):
        tape = Tape()
        x = tape.leaf(np.ones((6, 6)))
        out = ad.dropout(x, 0.5, np.random.default_rng(1), training=True)
        backward(tape, ad.sum_all(out))
        assert_allclose(x.grad, out.values)  # mask/(1-p) both places

    def test_invalid_probability(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.dropout(tape.leaf(np.ones((1, 1))), 1.0, np.random.default_rng(0), True)


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        def f(params):
            w = params["w"][0, 0]
            return w * w, {"w": np.array([[2.0 * w]])}

        assert finite_difference_check(f, {"w": np.array([[3.0]])}) < 1e-7

    def test_constant(self):
        def f(params):
            return 1.0, {"w": np.zeros((2, 2))}

        assert finite_difference_check(f, {"w": np.ones((2, 2))}) == 0.0

    def test_non_finite_rejected(self):
        def f(params):
            return float("nan"), {"w": np.zeros((1, 1))}

        with pytest.raises(NonFiniteError):
            finite_difference_check(f, {"w": np.ones((1, 1))})


class TestDeterminismAndChecking:
    def test_bit_identical_gradients(self):
        def grads(seed):
            rng = np.random.default_rng(seed)
            tape = Tape()
            w = tape.leaf(rng.standard_normal((4, 4)))
            v = tape.leaf(rng.standard_normal((4, 4)))
            backward(tape, ad.sum_all(ad.relu(ad.matmul(w, v))))
            return w.grad, v.grad

        a1, b1 = grads(11)
        a2, b2 = grads(11)
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)

    def test_check_finite_raises(self):
        tape = Tape(check_finite=True)
        x = tape.leaf(np.array([[710.0]]))  # exp overflows to inf

        def bad(_):
            pass

        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            tape.record(np.exp(x.values), (x,), bad, "exp")
