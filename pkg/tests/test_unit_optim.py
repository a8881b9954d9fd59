import numpy as np

from prunetape.exceptions import NonFiniteGradientError
from prunetape.optim import OptimizerState, learning_rate, project, step_projected
from prunetape.schemas import LrSchedule, OptimizerKind, Projection
from prunetape.tensor import Parameter
from tests.base import PruneTapeTestCase


def with_grad(values, grad, name, projection=Projection.NONE):
    p = Parameter(np.asarray(values, dtype=np.float64), name=name, projection=projection)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestProjectedStep(PruneTapeTestCase):
    def test_sgd_then_clamp(self):
        alpha = with_grad([0.05, 0.5], [1.0, 1.0], "alpha", Projection.NONNEGATIVE)
        step_projected([alpha], OptimizerState(kind=OptimizerKind.SGD), lr=0.1)
        np.testing.assert_allclose(alpha.data, [0.0, 0.4])
        self.assertEqual(alpha.data[0], 0.0)

    def test_zero_gradient_is_a_fixed_point(self):
        w = with_grad([1.0, -2.0], [0.0, 0.0], "w")
        alpha = with_grad([0.3], [0.0], "alpha", Projection.NONNEGATIVE)
        step_projected([w, alpha], OptimizerState(), lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        np.testing.assert_array_equal(alpha.data, [0.3])

    def test_only_masks_are_projected(self):
        w = with_grad([0.05], [1.0], "w")
        alpha = with_grad([0.05], [1.0], "alpha", Projection.NONNEGATIVE)
        step_projected([w, alpha], OptimizerState(kind=OptimizerKind.SGD), lr=0.1)
        np.testing.assert_allclose(w.data, [-0.05])
        np.testing.assert_array_equal(alpha.data, [0.0])

    def test_masks_never_go_negative(self):
        alpha = with_grad(self.rng.uniform(0, 1, 20), self.rng.standard_normal(20) * 10, "a", Projection.NONNEGATIVE)
        bits = with_grad(self.rng.uniform(0, 1, 5), self.rng.standard_normal(5) * 10, "b", Projection.UNIT_INTERVAL)
        state = OptimizerState()
        for _ in range(5):
            step_projected([alpha, bits], state, lr=0.5)
        self.assertTrue(np.all(alpha.data >= 0))
        self.assertTrue(np.all((bits.data >= 0) & (bits.data <= 1)))

    def test_non_finite_gradient_aborts_before_any_update(self):
        w = with_grad([1.0], [0.5], "w")
        bad = with_grad([1.0], [np.nan], "layer1.weight")
        state = OptimizerState()
        with self.assertRaises(NonFiniteGradientError) as ctx:
            step_projected([w, bad], state, lr=0.1)
        self.assertIn("layer1.weight", str(ctx.exception))
        np.testing.assert_array_equal(w.data, [1.0])
        self.assertEqual(state.step, 0)

    def test_frozen_parameters_are_skipped(self):
        alpha = with_grad([0.5], [1.0], "alpha", Projection.NONNEGATIVE)
        step_projected([alpha], OptimizerState(kind=OptimizerKind.SGD), lr=0.1, frozen=["alpha"])
        np.testing.assert_array_equal(alpha.data, [0.5])

    def test_weight_decay_spares_masks(self):
        w = with_grad([1.0], [0.0], "w")
        alpha = with_grad([1.0], [0.0], "alpha", Projection.NONNEGATIVE)
        step_projected([w, alpha], OptimizerState(kind=OptimizerKind.SGD), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(w.data, [0.95])
        np.testing.assert_array_equal(alpha.data, [1.0])

    def test_adam_first_step_moves_by_lr(self):
        w = with_grad([1.0, 1.0], [3.0, -0.2], "w")
        step_projected([w], OptimizerState(), lr=0.01)
        np.testing.assert_allclose(w.data, [0.99, 1.01], atol=1e-6)


class TestProjectionAndSchedule(PruneTapeTestCase):
    def test_project(self):
        np.testing.assert_array_equal(project(np.array([-1.0, 2.0]), Projection.NONNEGATIVE), [0.0, 2.0])
        np.testing.assert_array_equal(project(np.array([-1.0, 2.0]), Projection.UNIT_INTERVAL), [0.0, 1.0])
        np.testing.assert_array_equal(project(np.array([-1.0, 2.0]), Projection.NONE), [-1.0, 2.0])

    def test_cosine_schedule(self):
        config = self.tiny_config(lr_schedule=LrSchedule.COSINE, steps=10, finetune_steps=10)
        self.assertAlmostEqual(learning_rate(0, config), config.lr)
        self.assertAlmostEqual(learning_rate(10, config), config.lr / 2)
        self.assertAlmostEqual(learning_rate(20, config), 0.0)

    def test_constant_schedule(self):
        config = self.tiny_config()
        self.assertEqual(learning_rate(7, config), config.lr)
