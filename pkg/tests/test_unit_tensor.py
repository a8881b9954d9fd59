import numpy as np

from prunetape.exceptions import NonScalarLossError, ShapeMismatchError
from prunetape.functional import softmax_cross_entropy
from prunetape.schemas import LayerKind, NormKind
from prunetape.tensor import (
    OpKind,
    Parameter,
    Tensor,
    backward,
    gradient_relative_error,
    linear_op,
    stack,
)
from tests.base import PruneTapeTestCase


class TestPrimitiveOps(PruneTapeTestCase):
    def test_matmul_identity(self):
        out = linear_op(OpKind.MATMUL, np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_relu(self):
        out = linear_op("relu", np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_l2_norm(self):
        self.assertAlmostEqual(linear_op(OpKind.L2_NORM, np.array([3.0, 4.0])).item(), 5.0)

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeMismatchError) as ctx:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        self.assertIn("(2, 3)", str(ctx.exception))

        with self.assertRaises(ShapeMismatchError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_operand_count_is_checked(self):
        with self.assertRaises(ValueError):
            linear_op(OpKind.ADD, np.ones(2))

    def test_constant_subgraph_is_not_recorded(self):
        out = Tensor(np.ones(2)) * 3.0
        self.assertTrue(out.is_leaf)
        self.assertFalse(out.requires_grad)


class TestBackward(PruneTapeTestCase):
    def test_sum_gradient_is_all_ones(self):
        x = Parameter(self.rng.standard_normal(5), name="x")
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_l2_norm_gradient(self):
        x = Parameter([3.0, 4.0], name="x")
        backward(x.l2_norm())
        np.testing.assert_allclose(x.grad, [0.6, 0.8])

    def test_l2_norm_gradient_at_zero_is_zero(self):
        x = Parameter(np.zeros(3), name="x")
        backward(x.l2_norm())
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3), name="x")
        with self.assertRaises(NonScalarLossError):
            backward(x * x)

    def test_gradient_shape_matches_value_shape(self):
        w = Parameter(self.rng.standard_normal((4, 3)), name="w")
        b = Parameter(np.zeros(4), name="b")
        x = Tensor(self.rng.standard_normal((5, 3)))
        backward((x @ w.T + b).relu().sum())
        self.assertEqual(w.grad.shape, w.shape)
        self.assertEqual(b.grad.shape, b.shape)

    def test_shared_node_accumulates(self):
        x = Parameter([2.0], name="x")
        y = x * x
        backward((y + y).sum())
        np.testing.assert_allclose(x.grad, [8.0])

    def test_composite_matches_finite_differences(self):
        w = Parameter(self.rng.standard_normal((3, 4)), name="w")
        a = Parameter(self.rng.uniform(0.5, 1.5, 4), name="a")
        x = Tensor(self.rng.standard_normal((6, 4)))

        def loss():
            h = x @ (w * a).T
            return (h * h).sum() / a.l2_norm() + a.sum()

        self.assertGradientMatches(loss, [w, a])
        self.assertLess(gradient_relative_error(loss, [w, a]), 1e-4)

    def test_stack_and_index_gradients(self):
        a = Parameter([1.0, 2.0, 3.0], name="a")

        def loss():
            picked = stack([a[0] * 2.0, a[2] * a[1]])
            return picked.sum()

        self.assertGradientMatches(loss, [a])

    def test_evaluation_is_deterministic(self):
        w = self.rng.standard_normal((3, 3))
        x = self.rng.standard_normal((2, 3))
        first = (Tensor(x) @ Tensor(w)).relu().data
        second = (Tensor(x) @ Tensor(w)).relu().data
        self.assertEqual(first.tobytes(), second.tobytes())


class TestRandomizedGradients(PruneTapeTestCase):
    SEEDS = range(100)

    def away_from_zero(self, rng, shape):
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, shape)

    def check_op(self, build):
        """`build(rng)` returns (loss_fn, params) for one random instance."""
        for seed in self.SEEDS:
            with self.subTest(seed=seed):
                fn, params = build(np.random.default_rng(seed))
                self.assertGradientMatches(fn, params, rtol=1e-4, atol=1e-6)

    def test_matmul(self):
        def build(rng):
            n, k, m = rng.integers(1, 5, size=3)
            a = Parameter(rng.standard_normal((n, k)), name="a")
            b = Parameter(rng.standard_normal((k, m)), name="b")
            r = Tensor(rng.standard_normal((n, m)))
            return (lambda: (linear_op(OpKind.MATMUL, a, b) * r).sum()), [a, b]

        self.check_op(build)

    def test_add_and_mul_with_broadcasting(self):
        def build(rng):
            n, k = rng.integers(1, 5, size=2)
            a = Parameter(rng.standard_normal((n, k)), name="a")
            b = Parameter(rng.standard_normal(k), name="b")
            r = Tensor(rng.standard_normal((n, k)))

            def loss():
                return (linear_op(OpKind.MUL, linear_op(OpKind.ADD, a, b), b) * r).sum()

            return loss, [a, b]

        self.check_op(build)

    def test_scale_and_sum(self):
        def build(rng):
            a = Parameter(rng.standard_normal((3, 4)), name="a")
            factor = float(rng.uniform(-3, 3))
            r = Tensor(rng.standard_normal(4))

            def loss():
                return (linear_op(OpKind.SUM, linear_op(OpKind.SCALE, a, factor=factor), axis=0) * r).sum()

            return loss, [a]

        self.check_op(build)

    def test_relu_and_max_zero(self):
        def build(rng):
            a = Parameter(self.away_from_zero(rng, (2, 5)), name="a")
            r = Tensor(rng.standard_normal((2, 5)))

            def loss():
                return ((linear_op(OpKind.RELU, a) + linear_op(OpKind.MAX_ZERO, a * 2.0)) * r).sum()

            return loss, [a]

        self.check_op(build)

    def test_l2_norm_and_division(self):
        def build(rng):
            a = Parameter(rng.uniform(0.1, 2.0, int(rng.integers(1, 8))), name="a")
            return (lambda: a.sum() / linear_op(OpKind.L2_NORM, a)), [a]

        self.check_op(build)

    def test_transpose_reshape_index(self):
        def build(rng):
            a = Parameter(rng.standard_normal((3, 4)), name="a")
            r = Tensor(rng.standard_normal(12))

            def loss():
                flat = a.T.reshape(-1)
                return (flat * r).sum() + a[1].sum() * a[2, 3]

            return loss, [a]

        self.check_op(build)

    def test_two_layer_network(self):
        def build(rng):
            widths = tuple(int(w) for w in rng.integers(2, 6, size=3))
            network = self.tiny_network(
                seed=int(rng.integers(1 << 30)),
                widths=widths,
                kinds=(LayerKind.PRUNED, LayerKind.PRUNED),
                norm=NormKind.NONE,
            )
            for m in network.masks():
                m.data[:] = rng.uniform(0.2, 1.0, m.shape)
            x = rng.standard_normal((4, widths[0]))
            labels = rng.integers(0, widths[-1], size=4)
            return (lambda: softmax_cross_entropy(network.forward(x), labels)), network.parameters()

        self.check_op(build)
