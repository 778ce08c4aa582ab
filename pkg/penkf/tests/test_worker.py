import unittest
from unittest import mock

from penkf.experiment import ExperimentError
from penkf.models import ExperimentConfig, FilterKind, FilterSpec, ModelSpec
from penkf.worker import execute, process_trial


def small_config() -> ExperimentConfig:
    return ExperimentConfig(
        name="worker",
        model=ModelSpec(p=8),
        methods=[FilterSpec(kind=FilterKind.ENKF), FilterSpec(kind=FilterKind.PENKF, c_lambda=1.0)],
        ensemble_size=6,
        cycles=5,
        trials=3,
        checkpoints=[5],
    )


class ExecutorTestCase(unittest.TestCase):
    def test_results_do_not_depend_on_thread_count(self) -> None:
        inline, _ = execute(small_config(), threads=1)
        pooled, _ = execute(small_config(), threads=3)

        self.assertEqual([(r.trial, r.method) for r in pooled], [(r.trial, r.method) for r in inline])
        self.assertEqual([r.rmse_series for r in pooled], [r.rmse_series for r in inline])
        self.assertEqual([r.precision_snapshots for r in pooled], [r.precision_snapshots for r in inline])

    def test_failed_trial_raises(self) -> None:
        with mock.patch("penkf.worker.actor.run_trial", side_effect=ExperimentError("boom")):
            with self.assertRaises(ExperimentError):
                execute(small_config(), threads=2)


class ActorTestCase(unittest.TestCase):
    def test_actor_returns_serialized_result(self) -> None:
        data = process_trial.fn(small_config().json(), 0, "enkf")
        self.assertIn("result", data)

    def test_actor_returns_domain_errors(self) -> None:
        with mock.patch("penkf.worker.actor.run_trial", side_effect=ExperimentError("boom")):
            self.assertEqual(process_trial.fn(small_config().json(), 0, "enkf"), {"error": "boom"})


if __name__ == "__main__":
    unittest.main()
