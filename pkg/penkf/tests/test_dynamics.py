import unittest

import numpy as np
from pydantic import ValidationError

from penkf.core import DiagonalCovariance, DimensionMismatchError
from penkf.dynamics import (
    IntegrationError,
    LinearGaussianConfig,
    LinearModel,
    Lorenz96Config,
    exact_kalman_filter,
    identity_model,
    lorenz96_derivative,
    lorenz96_model,
    rk4_step,
    simulate_truth,
)
from penkf.filters import ObservationOperator


class Lorenz96TestCase(unittest.TestCase):
    def test_constant_forcing_state_is_a_fixed_point(self) -> None:
        np.testing.assert_allclose(lorenz96_derivative(np.full(40, 8.0), 8.0), np.zeros(40))

    def test_derivative_is_cyclic(self) -> None:
        x = np.zeros(5)
        x[0] = 1.0
        # dx_i = (x_{i+1} − x_{i−2}) x_{i−1} − x_i + F, only the linear term survives for one spike
        np.testing.assert_allclose(lorenz96_derivative(x, 0.0), [-1.0, 0.0, 0.0, 0.0, 0.0])

    def test_needs_four_variables(self) -> None:
        with self.assertRaises(ValidationError):
            Lorenz96Config(p=3)
        with self.assertRaises(DimensionMismatchError):
            lorenz96_derivative(np.zeros(3))

    def test_ensemble_columns_match_single_states(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=8, steps_per_cycle=5))
        members = np.random.default_rng(0).standard_normal((8, 3)) + 8.0
        evolved = model.evolve(members)

        for j in range(3):
            np.testing.assert_array_equal(evolved[:, j], model.evolve(members[:, j]))

    def test_derivative_commutes_with_cyclic_shift(self) -> None:
        x = np.random.default_rng(2).standard_normal(12)
        for shift in (1, 5):
            np.testing.assert_allclose(lorenz96_derivative(np.roll(x, shift)), np.roll(lorenz96_derivative(x), shift))

    def test_nearby_states_separate(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=40))
        x = simulate_truth(model, np.random.default_rng(3).standard_normal(40), 20)[-1].values
        y = x.copy()
        y[0] += 1e-8
        for _ in range(50):
            x, y = model.evolve(x), model.evolve(y)

        self.assertGreater(np.linalg.norm(x - y), 1.0)

    def test_trajectory_stays_on_attractor(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=40))
        x0 = np.random.default_rng(1).standard_normal(40)
        truth = simulate_truth(model, x0, 100)

        self.assertEqual(len(truth), 100)
        self.assertLess(np.max(np.abs(np.asarray(truth[-1]))), 20.0)


class RungeKuttaTestCase(unittest.TestCase):
    def test_fourth_order_accuracy(self) -> None:
        dt = 0.1
        stepped = rk4_step(np.array([1.0]), dt, lambda x: -x)
        self.assertAlmostEqual(stepped[0], np.exp(-dt), delta=1e-6)

    def test_local_error_shrinks_with_fifth_power_of_step(self) -> None:
        errors = [abs(rk4_step(np.array([1.0]), dt, lambda x: x)[0] - np.exp(dt)) for dt in (0.1, 0.05)]
        self.assertGreater(errors[0] / errors[1], 28.0)
        self.assertLess(errors[0] / errors[1], 36.0)

    def test_single_small_step_of_growth(self) -> None:
        self.assertAlmostEqual(rk4_step(np.array([1.0]), 0.01, lambda x: x)[0], np.exp(0.01), delta=1e-10)

    def test_decay_over_unit_time(self) -> None:
        x = np.array([1.0])
        for _ in range(100):
            x = rk4_step(x, 0.01, lambda x: -x)
        self.assertAlmostEqual(x[0], np.exp(-1.0), delta=1e-9)

    def test_non_finite_step_raises(self) -> None:
        with self.assertRaises(IntegrationError):
            rk4_step(np.array([1.0]), 0.1, lambda x: x * np.inf)

    def test_step_size_must_be_positive(self) -> None:
        with self.assertRaises(ValueError):
            rk4_step(np.array([1.0]), 0.0, lambda x: x)


class LinearModelTestCase(unittest.TestCase):
    def test_identity_model_keeps_state(self) -> None:
        truth = simulate_truth(identity_model(3), [1.0, 2.0, 3.0], 4)
        for x in truth:
            np.testing.assert_array_equal(np.asarray(x), [1.0, 2.0, 3.0])

    def test_transition_must_be_square(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            LinearModel(np.ones((2, 3)))

    def test_process_noise_dimension_is_checked(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            LinearModel(np.eye(3), DiagonalCovariance.isotropic(2, 1.0))

    def test_noise_draws_are_scaled(self) -> None:
        model = LinearModel(np.eye(2), DiagonalCovariance([4.0, 9.0]))
        truth = simulate_truth(model, [0.0, 0.0], 1, noise_draws=np.ones((2, 1)))
        np.testing.assert_allclose(np.asarray(truth[0]), [2.0, 3.0])


class ExactKalmanFilterTestCase(unittest.TestCase):
    def test_scalar_update(self) -> None:
        obs = ObservationOperator.from_indices(1, [0], 1.0)
        cfg = LinearGaussianConfig(np.eye(1), None, obs, [0.0], [[1.0]])
        (mean, cov), = exact_kalman_filter(cfg, [[2.0]])

        np.testing.assert_allclose(mean, [1.0])
        np.testing.assert_allclose(cov, [[0.5]])

    def test_covariance_stays_symmetric(self) -> None:
        p = 4
        obs = ObservationOperator.every_other(p, 0.5)
        transition = np.random.default_rng(2).standard_normal((p, p)) * 0.3
        cfg = LinearGaussianConfig(transition, DiagonalCovariance.isotropic(p, 0.1), obs, np.zeros(p), np.eye(p))
        posteriors = exact_kalman_filter(cfg, [np.ones(obs.r)] * 10)

        for _, cov in posteriors:
            np.testing.assert_array_equal(cov, cov.T)
            self.assertGreater(np.linalg.eigvalsh(cov)[0], 0.0)

    def test_observation_dimension_is_checked(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            LinearGaussianConfig(np.eye(3), None, ObservationOperator.every_other(4, 1.0), np.zeros(3), np.eye(3))


if __name__ == "__main__":
    unittest.main()
