from functools import partial
from typing import Dict, List, Optional, Tuple

from dramatiq import Worker
from dramatiq.results import ResultError

from penkf.config import settings
from penkf.experiment import ExperimentError, Job, run_experiment
from penkf.logger import get_logger
from penkf.models import ExperimentConfig, PathResult, TrialResult
from penkf.worker.actor import broker, process_trial, result_backend

logger = get_logger(__name__)


def dispatch(cfg: ExperimentConfig, jobs: List[Job], threads: int) -> List[TrialResult]:
    """
    Send every job to the trial actor and collect the results in job order.
    """
    worker = Worker(broker, worker_threads=threads)
    logger.debug(f"Starting worker with {threads} threads for {len(jobs)} jobs")
    worker.start()
    try:
        config_json = cfg.json()
        messages = [process_trial.send(config_json, trial, method) for trial, method in jobs]

        results = []
        for (trial, method), message in zip(jobs, messages):
            try:
                data = message.get_result(
                    backend=result_backend, block=True, timeout=settings.TRIAL_ACTOR_OPTS.time_limit
                )
            except ResultError as e:
                raise ExperimentError(f"trial {trial} ({method}) produced no result: {e!r}")
            if "error" in data:
                raise ExperimentError(f"trial {trial} ({method}) failed: {data['error']}")
            results.append(TrialResult.parse_raw(data["result"]))
    finally:
        logger.debug("Stopping worker")
        worker.stop()

    return results


def execute(cfg: ExperimentConfig, threads: Optional[int] = None) -> Tuple[List[TrialResult], Dict[str, PathResult]]:
    """
    Run an experiment, through the worker pool when more than one thread is requested.

    Results are identical for every thread count.
    """
    threads = settings.WORKER_THREADS if threads is None else threads
    if threads <= 1:
        return run_experiment(cfg)
    return run_experiment(cfg, dispatch=partial(dispatch, threads=threads))
