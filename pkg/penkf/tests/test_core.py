import unittest

import numpy as np

from penkf.core import (
    DiagonalCovariance,
    DimensionMismatchError,
    Ensemble,
    InsufficientMembersError,
    InvalidParameterError,
    NonFiniteStateError,
    RngStream,
    StateVector,
    SymmetricMatrix,
    draw_gaussian,
    rmse,
    sample_covariance,
    sample_mean,
)


class StateVectorTestCase(unittest.TestCase):
    def test_should_reject_non_finite_entries(self) -> None:
        with self.assertRaises(NonFiniteStateError):
            StateVector([1.0, np.nan])

    def test_values_are_read_only(self) -> None:
        x = StateVector([1.0, 2.0])
        with self.assertRaises(ValueError):
            x.values[0] = 3.0


class EnsembleTestCase(unittest.TestCase):
    def test_should_reject_wrong_shape(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            Ensemble([1.0, 2.0])

    def test_replace_checks_shape_and_finiteness(self) -> None:
        ens = Ensemble(np.zeros((3, 4)))
        with self.assertRaises(DimensionMismatchError):
            ens.replace(np.zeros((3, 5)))
        with self.assertRaises(NonFiniteStateError):
            ens.replace(np.full((3, 4), np.inf))

    def test_should_reject_single_member(self) -> None:
        with self.assertRaises(InsufficientMembersError):
            Ensemble(np.ones((3, 1)))

    def test_spread_of_identical_members_is_zero(self) -> None:
        self.assertEqual(Ensemble(np.ones((3, 4))).spread(), 0.0)


class SampleStatisticsTestCase(unittest.TestCase):
    def test_sample_mean(self) -> None:
        ens = Ensemble([[1.0, 3.0], [2.0, 4.0]])
        np.testing.assert_allclose(np.asarray(sample_mean(ens)), [2.0, 3.0])

    def test_sample_covariance_matches_numpy(self) -> None:
        members = np.random.default_rng(3).standard_normal((5, 12))
        S = sample_covariance(Ensemble(members))
        np.testing.assert_allclose(np.asarray(S), np.cov(members), atol=1e-12)

    def test_sample_covariance_is_positive_semidefinite(self) -> None:
        members = np.random.default_rng(4).standard_normal((20, 6))
        S = np.asarray(sample_covariance(Ensemble(members)))

        self.assertGreaterEqual(np.linalg.eigvalsh(S)[0], -1e-10 * np.linalg.norm(S))

    def test_rmse(self) -> None:
        self.assertAlmostEqual(rmse([0.0, 0.0], [3.0, 4.0]), np.sqrt(12.5))
        self.assertEqual(rmse([1.0, 2.0], [1.0, 2.0]), 0.0)

    def test_rmse_is_invariant_under_permutation(self) -> None:
        rng = np.random.default_rng(6)
        estimate, truth = rng.standard_normal(9), rng.standard_normal(9)
        order = rng.permutation(9)

        self.assertAlmostEqual(rmse(estimate[order], truth[order]), rmse(estimate, truth), places=12)

    def test_rmse_of_empty_vectors(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            rmse([], [])

    def test_rmse_length_mismatch(self) -> None:
        with self.assertRaises(DimensionMismatchError):
            rmse([1.0], [1.0, 2.0])


class CovarianceTypesTestCase(unittest.TestCase):
    def test_symmetric_matrix_is_symmetrized(self) -> None:
        M = SymmetricMatrix([[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_array_equal(np.asarray(M), [[1.0, 1.0], [1.0, 1.0]])

    def test_diagonal_covariance_rejects_zero_variance(self) -> None:
        with self.assertRaises(InvalidParameterError) as ctx:
            DiagonalCovariance([1.0, 0.0])
        self.assertIsInstance(ctx.exception, ValueError)

    def test_isotropic(self) -> None:
        cov = DiagonalCovariance.isotropic(3, 4.0)
        np.testing.assert_array_equal(cov.std, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(cov.dense(), 4.0 * np.eye(3))


class RngStreamTestCase(unittest.TestCase):
    def test_same_seed_and_keys_give_same_draws(self) -> None:
        a = RngStream(7, (1, 2)).standard_normal(10)
        b = RngStream(7, (1, 2)).standard_normal(10)
        np.testing.assert_array_equal(a, b)

    def test_derived_streams_differ(self) -> None:
        parent = RngStream(7)
        self.assertFalse(np.array_equal(parent.derive(0).standard_normal(5), parent.derive(1).standard_normal(5)))

    def test_derive_is_keyed_not_sequential(self) -> None:
        np.testing.assert_array_equal(RngStream(7, (3,)).standard_normal(4), RngStream(7).derive(3).standard_normal(4))

    def test_choice_without_replacement(self) -> None:
        chosen = RngStream(1).choice(10, 10)
        self.assertEqual(sorted(chosen.tolist()), list(range(10)))


class DrawGaussianTestCase(unittest.TestCase):
    def test_zero_noise_path_consumes_no_draws(self) -> None:
        rng = RngStream(5)
        ens = draw_gaussian([1.0, 2.0], None, 3, rng)

        np.testing.assert_array_equal(ens.members, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        np.testing.assert_array_equal(rng.standard_normal(3), RngStream(5).standard_normal(3))

    def test_draws_have_requested_moments(self) -> None:
        cov = DiagonalCovariance([1.0, 4.0])
        ens = draw_gaussian([0.0, 10.0], cov, 20000, RngStream(11))

        np.testing.assert_allclose(ens.members.mean(axis=1), [0.0, 10.0], atol=0.05)
        np.testing.assert_allclose(ens.members.var(axis=1), [1.0, 4.0], rtol=0.05)

    def test_count_must_allow_a_covariance(self) -> None:
        for count in (0, 1):
            with self.assertRaises(InsufficientMembersError):
                draw_gaussian([0.0], None, count, RngStream(0))


if __name__ == "__main__":
    unittest.main()
