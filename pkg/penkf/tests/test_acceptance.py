"""
Full-scale Lorenz-96 runs. These take minutes to hours; enable with PENKF_RUN_SLOW=1.
"""
import os
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from penkf.core import RngStream
from penkf.dynamics import Lorenz96Config, lorenz96_model, simulate_truth
from penkf.experiment import (
    dimension_sweep,
    gain_error_experiment,
    precision_profile,
    run_trial,
    summarize,
    trial_snapshots,
)
from penkf.glasso import PenaltyMatrix, glasso_solve, kkt_residual
from penkf.models import ExperimentConfig, FilterKind, FilterSpec, ModelSpec
from penkf.selection import PathConfig, free_forecast_ensemble, select_penalty
from penkf.worker import execute

RUN_SLOW = os.environ.get("PENKF_RUN_SLOW") == "1"
THREADS = max(os.cpu_count() or 1, 1)


def lorenz96(ensemble_size: int, **kwargs) -> ExperimentConfig:
    return ExperimentConfig(name=f"lorenz96_n{ensemble_size}", ensemble_size=ensemble_size, **kwargs)


@unittest.skipUnless(RUN_SLOW, "set PENKF_RUN_SLOW=1 to run full-scale experiments")
class GlassoAcceptanceTestCase(unittest.TestCase):
    @settings(max_examples=100, deadline=None)
    @given(p=st.integers(min_value=4, max_value=20), seed=st.integers(min_value=0, max_value=2 ** 31))
    def test_kkt_on_random_spd_matrices(self, p, seed) -> None:
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((p, 2 * p))
        S = A @ A.T / (2 * p) + 0.1 * np.eye(p)
        est = glasso_solve(S, PenaltyMatrix.scalar(p, 0.1), tol=1e-8, max_sweeps=5000)

        self.assertLessEqual(kkt_residual(S, est), 1e-6)


@unittest.skipUnless(RUN_SLOW, "set PENKF_RUN_SLOW=1 to run full-scale experiments")
class DynamicsAcceptanceTestCase(unittest.TestCase):
    def test_long_free_run_stays_bounded(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=40))
        truth = simulate_truth(model, np.random.default_rng(0).standard_normal(40), 10000)

        self.assertLess(max(np.max(np.abs(np.asarray(x))) for x in truth), 20.0)


@unittest.skipUnless(RUN_SLOW, "set PENKF_RUN_SLOW=1 to run full-scale experiments")
class SelectionAcceptanceTestCase(unittest.TestCase):
    def test_free_run_coordinates_share_climatology(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=40))
        ens = free_forecast_ensemble(model, 40, spacing=100, count=200, rng=RngStream(0))
        variances = ens.members.var(axis=1)

        self.assertLess(variances.max() / variances.min(), 1.2 ** 2)

    def test_selected_constant_lies_inside_the_grid(self) -> None:
        model = lorenz96_model(Lorenz96Config(p=40))
        ens = free_forecast_ensemble(model, 40, spacing=100, count=25, rng=RngStream(1))
        c_lambda, _ = select_penalty(ens, PathConfig.default(p=40, n=25, variance=0.5))

        self.assertGreater(c_lambda, 0.1)
        self.assertLess(c_lambda, 10.0)


@unittest.skipUnless(RUN_SLOW, "set PENKF_RUN_SLOW=1 to run full-scale experiments")
class LorenzAcceptanceTestCase(unittest.TestCase):
    def test_ensemble_of_25(self) -> None:
        results, _ = execute(lorenz96(25), threads=THREADS)
        table = summarize(results)
        penkf, taper = table.row("penkf"), table.row("taper")

        self.assertTrue(1.29 <= penkf.mean <= 1.59, penkf.mean)
        self.assertTrue(1.60 <= taper.mean <= 2.16, taper.mean)
        self.assertLess(penkf.mean, taper.mean)

        profile = precision_profile(trial_snapshots([r for r in results if r.method == "penkf"]), 20)
        far = [abs(v) for k, v in zip(profile.offsets, profile.values) if abs(k) > 5]
        self.assertLess(max(far), 0.05)

    def test_ensemble_of_10(self) -> None:
        results, _ = execute(lorenz96(10), threads=THREADS)
        table = summarize(results)
        penkf, taper = table.row("penkf"), table.row("taper")

        self.assertTrue(1.55 <= penkf.mean <= 1.95, penkf.mean)
        self.assertGreater(taper.mean, 3.0)
        self.assertEqual(penkf.divergent, 0)

    def test_penalized_gain_beats_sample_gain(self) -> None:
        result = gain_error_experiment(lorenz96(25), reference_n=2000)
        self.assertGreaterEqual(result.fraction_penalized_better, 0.9)

    def test_penalized_filter_is_stable_over_a_long_run(self) -> None:
        result = run_trial(lorenz96(25, methods=[FilterSpec(kind=FilterKind.PENKF)], trials=1), 0, "penkf")

        self.assertFalse(result.diverged)
        self.assertEqual(len(result.rmse_series), 2000)
        self.assertTrue(all(np.isfinite(result.rmse_series)))
        self.assertTrue(all(s > 0 for s in result.spread_series))

    def test_gain_errors_grow_slower_with_dimension_when_penalized(self) -> None:
        ratios, sample = [], []
        for p in (40, 80, 160):
            cfg = lorenz96(25, model=ModelSpec(p=p), trials=10, cycles=500, checkpoints=[250, 500])
            errors = gain_error_experiment(cfg, reference_n=2000).mean_sse()
            sample.append(errors["sample"])
            ratios.append(errors["penalized"] / errors["sample"])

        self.assertEqual(sample, sorted(sample))
        self.assertEqual(ratios, sorted(ratios, reverse=True))

    def test_dimension_sweep(self) -> None:
        runner = lambda cfg: execute(cfg, threads=THREADS)  # noqa: E731
        sweep = dimension_sweep(lorenz96(25), [40, 80, 120], runner=runner)

        for point in sweep.points:
            penkf, taper = point.summary.row("penkf"), point.summary.row("taper")
            self.assertLess(penkf.ci_high, taper.ci_low, point.p)
            self.assertLess(penkf.ci_high - penkf.ci_low, taper.ci_high - taper.ci_low, point.p)
            self.assertEqual(penkf.divergent, 0)

    def test_large_ensemble_ordering(self) -> None:
        results, _ = execute(lorenz96(100, methods=[FilterSpec(kind=FilterKind.TAPER), FilterSpec(kind=FilterKind.PENKF)]), threads=THREADS)
        table = summarize(results)

        self.assertLess(table.row("taper").mean, table.row("penkf").mean)


if __name__ == "__main__":
    unittest.main()
