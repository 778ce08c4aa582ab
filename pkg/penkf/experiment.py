"""
Twin experiments: seeded trials, RMSE summaries, precision profiles, dimension sweeps and
Kalman gain error comparisons.

Every trial owns independent random streams derived from (seed, trial index, purpose), so every
method in a trial sees the same truth and observations, and results do not depend on the order
or concurrency in which trials run.
"""
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from penkf.config import settings
from penkf.core import (
    DiagonalCovariance,
    Ensemble,
    NonFiniteStateError,
    PenkfError,
    RngStream,
    StateVector,
    draw_gaussian,
    rmse,
    sample_covariance,
)
from penkf.dynamics import DynamicsModel, simulate_truth
from penkf.filters import (
    AnalysisError,
    AssimilationMethod,
    FilterDivergenceError,
    FilterState,
    ObservationOperator,
    PenalizedEnKF,
    StochasticEnKF,
    TaperedEnKF,
    forecast_step,
    penalized_gain,
    perturb_observations,
    run_cycle,
    sample_gain,
    tapered_gain,
)
from penkf.glasso import GlassoConvergenceError, PrecisionEstimate, penalized_forecast_cov
from penkf.logger import TrialLogger, get_logger
from penkf.models import (
    DimensionSweep,
    ExperimentConfig,
    FilterKind,
    FilterSpec,
    GainErrorResult,
    GainErrorRow,
    InitialEnsemble,
    ModelKind,
    PathResult,
    PrecisionProfile,
    SummaryRow,
    SummaryTable,
    SweepPoint,
    TrialResult,
)
from penkf.selection import PathConfig, free_forecast_ensemble, select_penalty

logger = get_logger(__name__)

# stream keys below the trial key
TRUTH_STREAM, OBSERVATION_STREAM, INITIAL_STREAM, FILTER_STREAM, SUBSAMPLE_STREAM = 0, 1, 2, 3, 4
# top-level key of the offline selection run, out of reach of trial indices
SELECTION_STREAM = 2 ** 32 - 1

Job = Tuple[int, str]
Runner = Callable[[ExperimentConfig], Tuple[List[TrialResult], Dict[str, PathResult]]]


class ExperimentError(PenkfError):
    """
    Raised when an experiment cannot produce a report (e.g. every trial diverged).
    """

    pass


def trial_stream(cfg: ExperimentConfig, trial_index: int) -> RngStream:
    return RngStream(cfg.seed, (trial_index,))


def simulate_twin(
    model: DynamicsModel, obs: ObservationOperator, cycles: int, rng: RngStream
) -> Tuple[List[StateVector], np.ndarray]:
    """
    Truth x_1..x_T from x_0 ~ N(0, I) and observations y_t = H x_t + ε_t, one row per cycle.
    """
    truth_rng, obs_rng = rng.derive(TRUTH_STREAM), rng.derive(OBSERVATION_STREAM)
    x0 = truth_rng.standard_normal(model.dimension)
    draws = truth_rng.standard_normal((model.dimension, cycles)) if model.process_noise is not None else None
    truth = simulate_truth(model, x0, cycles, draws)

    states = np.column_stack([np.asarray(x) for x in truth])
    noise = obs.noise.std[:, None] * obs_rng.standard_normal((obs.r, cycles))
    return truth, (obs.apply(states) + noise).T


def initial_ensemble(cfg: ExperimentConfig, model: DynamicsModel, rng: RngStream) -> Ensemble:
    p, n = cfg.model.p, cfg.ensemble_size
    if cfg.initial_ensemble == InitialEnsemble.FREE_RUN:
        selection = cfg.selection
        return free_forecast_ensemble(model, p, selection.spacing, n, rng, burn_in=selection.burn_in)
    return draw_gaussian(np.zeros(p), DiagonalCovariance.isotropic(p, 1.0), n, rng)


def selection_ensemble(cfg: ExperimentConfig, model: DynamicsModel) -> Ensemble:
    """
    Offline free-run ensemble used to choose c_λ, shared by all trials of the experiment.
    """
    selection = cfg.selection
    count = selection.count or cfg.ensemble_size
    rng = RngStream(cfg.seed, (SELECTION_STREAM,))
    return free_forecast_ensemble(model, cfg.model.p, selection.spacing, count, rng, burn_in=selection.burn_in)


def path_config(cfg: ExperimentConfig, spec: FilterSpec) -> PathConfig:
    selection = cfg.selection
    return PathConfig.default(
        p=cfg.model.p,
        n=cfg.ensemble_size,
        variance=cfg.observation.variance,
        c_min=selection.c_min,
        c_max=selection.c_max,
        size=selection.grid_size,
        criterion=selection.criterion,
        gamma=selection.gamma,
        refit=selection.refit,
        normalize=selection.normalize,
        penalize_diagonal=spec.penalize_diagonal,
        tol=spec.tol,
        max_sweeps=spec.max_sweeps,
    )


def resolve_penalties(cfg: ExperimentConfig) -> Tuple[ExperimentConfig, Dict[str, PathResult]]:
    """
    Fill in c_lambda for every penkf method that leaves it open, by penalty selection on the
    offline ensemble. Returns the completed config and the regularization paths by method name.
    """
    open_specs = [spec for spec in cfg.methods if spec.kind == FilterKind.PENKF and spec.c_lambda is None]
    if not open_specs:
        return cfg, {}

    representative = selection_ensemble(cfg, cfg.model.build())
    paths: Dict[str, PathResult] = {}
    methods = []
    for spec in cfg.methods:
        if spec in open_specs:
            c_lambda, paths[spec.name] = select_penalty(representative, path_config(cfg, spec))
            spec = spec.copy(update={"c_lambda": c_lambda})
        methods.append(spec)
    return cfg.copy(update={"methods": methods}), paths


def build_filter(spec: FilterSpec, cfg: ExperimentConfig) -> AssimilationMethod:
    if spec.kind == FilterKind.ENKF:
        return StochasticEnKF()
    if spec.kind == FilterKind.TAPER:
        return TaperedEnKF(half_length=spec.taper_half_length, cyclic=spec.cyclic)
    if spec.c_lambda is None:
        raise ExperimentError(f"method {spec.name} has no c_lambda, resolve penalties first")
    return PenalizedEnKF(
        path_config(cfg, spec).penalty(spec.c_lambda),
        tol=spec.tol,
        max_sweeps=spec.max_sweeps,
        warm_start=spec.warm_start,
    )


def run_trial(cfg: ExperimentConfig, trial_index: int, method: Optional[str] = None) -> TrialResult:
    """
    Simulate truth and observations for `trial_index` and run one filter method over them.

    Divergence (a non-finite member, a failed analysis or glasso solve, or an RMSE above
    `DIVERGENCE_RMSE`) stops the trial and is reported through the `diverged` flag.
    """
    spec = cfg.method(method)
    if spec.kind == FilterKind.PENKF and spec.c_lambda is None:
        cfg, _ = resolve_penalties(cfg)
        spec = cfg.method(spec.name)

    log = TrialLogger(logger, trial_index, spec.name)
    started = time.perf_counter()
    model = cfg.model.build()
    obs = cfg.observation.build(cfg.model.p)
    rng = trial_stream(cfg, trial_index)
    truth, observations = simulate_twin(model, obs, cfg.cycles, rng)
    state = FilterState(initial_ensemble(cfg, model, rng.derive(INITIAL_STREAM)))
    filter_rng = rng.derive(FILTER_STREAM)
    method_impl = build_filter(spec, cfg)
    checkpoints = set(cfg.checkpoints)

    result = TrialResult(trial=trial_index, method=spec.name)
    if spec.kind == FilterKind.PENKF:
        result.lam = path_config(cfg, spec).base_scale * spec.c_lambda

    for t in range(1, cfg.cycles + 1):
        try:
            state, mean = run_cycle(state, model, obs, observations[t - 1], method_impl, filter_rng)
        except (FilterDivergenceError, AnalysisError, GlassoConvergenceError, NonFiniteStateError) as e:
            log.warning(f"diverged at cycle {t}: {e}")
            result.diverged, result.diverged_at = True, t
            break
        error = rmse(mean, truth[t - 1])
        if not np.isfinite(error) or error > settings.DIVERGENCE_RMSE:
            log.warning(f"diverged at cycle {t}: rmse {error:.3g}")
            result.diverged, result.diverged_at = True, t
            break
        result.rmse_series.append(error)
        result.spread_series.append(state.ensemble.spread())
        if state.last_precision is not None:
            result.edge_counts.append(state.last_precision.edge_count)
            if t in checkpoints:
                result.precision_snapshots[t] = state.last_precision.theta_dense().tolist()

    result.wall_time = time.perf_counter() - started
    if not result.diverged:
        log.info(f"finished in {result.wall_time:.1f}s, mean rmse {np.mean(result.rmse_series):.4f}")
    return result


def trial_jobs(cfg: ExperimentConfig) -> List[Job]:
    return [(trial, spec.name) for trial in range(cfg.trials) for spec in cfg.methods]


def run_experiment(
    cfg: ExperimentConfig, dispatch: Optional[Callable[[ExperimentConfig, List[Job]], List[TrialResult]]] = None
) -> Tuple[List[TrialResult], Dict[str, PathResult]]:
    """
    Resolve open penalties once, then run every (trial, method) pair.

    `dispatch` executes the jobs of a resolved config elsewhere (e.g. a worker pool); results are
    returned in job order either way.
    """
    resolved, paths = resolve_penalties(cfg)
    jobs = trial_jobs(resolved)
    if dispatch is None:
        results = [run_trial(resolved, trial, method) for trial, method in jobs]
    else:
        results = dispatch(resolved, jobs)
    return results, paths


def summarize(results: Sequence[TrialResult]) -> SummaryTable:
    """
    Per method: the 10%, 50% and 90% quantiles (linear interpolation) and the mean of each trial's
    RMSE series, averaged over non-divergent trials, with their standard deviations across trials
    and a 95% confidence interval for the mean.

    :raises ExperimentError: no results, or every trial diverged.
    """
    if not results:
        raise ExperimentError("no trial results to summarize")
    if all(result.diverged for result in results):
        raise ExperimentError(f"all {len(results)} trials diverged")

    grouped: Dict[str, List[TrialResult]] = {}
    for result in results:
        grouped.setdefault(result.method, []).append(result)

    rows = []
    for method, trials in grouped.items():
        kept = [result for result in trials if not result.diverged]
        divergent = len(trials) - len(kept)
        if not kept:
            logger.warning(f"every trial of {method} diverged")
            rows.append(SummaryRow(method=method, trials=0, divergent=divergent))
            continue
        # one row per trial: q10, q50, q90, mean
        stats = np.array(
            [
                [*np.quantile(result.rmse_series, [0.1, 0.5, 0.9]), np.mean(result.rmse_series)]
                for result in kept
            ]
        )
        means = stats.mean(axis=0)
        sds = stats.std(axis=0, ddof=1) if len(kept) > 1 else np.zeros(4)
        half_width = 1.96 * sds[3] / np.sqrt(len(kept))
        rows.append(
            SummaryRow(
                method=method,
                q10=means[0],
                q50=means[1],
                q90=means[2],
                mean=means[3],
                sd_q10=sds[0],
                sd_q50=sds[1],
                sd_q90=sds[2],
                sd_mean=sds[3],
                ci_low=means[3] - half_width,
                ci_high=means[3] + half_width,
                trials=len(kept),
                divergent=divergent,
            )
        )
    return SummaryTable(rows=rows)


Snapshot = Union[PrecisionEstimate, np.ndarray, sparse.spmatrix, List[List[float]]]


def _dense(snapshot: Snapshot) -> np.ndarray:
    if isinstance(snapshot, PrecisionEstimate):
        return snapshot.theta_dense()
    if sparse.issparse(snapshot):
        return snapshot.toarray()
    return np.asarray(snapshot, dtype=float)


def precision_profile(snapshots: Sequence[Snapshot], half_width: int) -> PrecisionProfile:
    """
    Average row profile of precision matrices: for every row i the entries Θ_{i,i+k},
    k = −half_width..half_width (cyclic), divided by Θ_ii, averaged over rows and snapshots.
    """
    if not snapshots:
        raise ExperimentError("no precision snapshots to profile")
    matrices = [_dense(snapshot) for snapshot in snapshots]
    p = matrices[0].shape[0]
    if any(matrix.shape != (p, p) for matrix in matrices):
        raise ExperimentError("precision snapshots do not share a dimension")
    if not 0 <= half_width < p / 2:
        raise ValueError(f"half_width must be below p/2 = {p / 2}, got {half_width}")

    offsets = np.arange(-half_width, half_width + 1)
    rows = np.arange(p)[:, None]
    columns = (rows + offsets[None, :]) % p
    profiles = [matrix[rows, columns] / np.diag(matrix)[:, None] for matrix in matrices]
    values = np.mean([profile.mean(axis=0) for profile in profiles], axis=0)
    return PrecisionProfile(offsets=offsets.tolist(), values=values.tolist(), snapshots=len(matrices))


def trial_snapshots(results: Sequence[TrialResult]) -> List[np.ndarray]:
    snapshots = []
    for result in results:
        for cycle in sorted(result.precision_snapshots):
            snapshots.append(np.array(result.precision_snapshots[cycle]))
    return snapshots


def dimension_sweep(base_cfg: ExperimentConfig, p_list: Sequence[int], runner: Optional[Runner] = None) -> DimensionSweep:
    """
    Re-run the experiment for each state dimension in `p_list` at fixed ensemble size, starting
    from free-run ensembles, with c_λ selected per dimension unless fixed in the config.
    """
    if base_cfg.model.kind == ModelKind.LINEAR:
        raise ExperimentError("dimension sweeps need a model defined for every p")
    odd = [p for p in p_list if p % 2]
    if odd:
        raise ExperimentError(f"dimensions must be even so the observation pattern tiles, got {odd}")
    runner = runner or run_experiment

    points = []
    for p in p_list:
        cfg = ExperimentConfig.parse_obj(
            {
                **base_cfg.dict(),
                "model": {**base_cfg.model.dict(), "p": p},
                "initial_ensemble": InitialEnsemble.FREE_RUN.value,
            }
        )
        logger.info(f"dimension sweep: p={p}")
        results, paths = runner(cfg)
        c_lambda = next((path.chosen.c for path in paths.values()), None)
        if c_lambda is None:
            c_lambda = next((spec.c_lambda for spec in cfg.methods if spec.kind == FilterKind.PENKF), None)
        points.append(SweepPoint(p=p, c_lambda=c_lambda, summary=summarize(results)))
    return DimensionSweep(points=points)


def _sse(gain: np.ndarray, reference: np.ndarray) -> float:
    return float(np.sum((gain - reference) ** 2))


def gain_error_experiment(cfg: ExperimentConfig, reference_n: int) -> GainErrorResult:
    """
    Squared Frobenius errors of the sample, tapered and penalized Kalman gains built from n-member
    subsamples, measured against the gain of a `reference_n`-member EnKF run.

    Each trial moves the reference ensemble through the experiment's cycles; at every checkpoint
    n members are drawn without replacement from the forecast, and the three errors are summed over
    checkpoints into one row per trial.
    """
    n = cfg.ensemble_size
    if reference_n < n:
        raise ValueError(f"reference_n must be >= the ensemble size {n}, got {reference_n}")
    checkpoints = sorted(t for t in set(cfg.checkpoints) if 1 <= t <= cfg.cycles)
    if not checkpoints:
        raise ExperimentError(f"no checkpoint falls within {cfg.cycles} cycles")

    if not any(spec.kind == FilterKind.PENKF for spec in cfg.methods):
        cfg = cfg.copy(update={"methods": [*cfg.methods, FilterSpec(kind=FilterKind.PENKF)]})
    cfg, _ = resolve_penalties(cfg)
    penkf_spec = next(spec for spec in cfg.methods if spec.kind == FilterKind.PENKF)
    taper_spec = next((spec for spec in cfg.methods if spec.kind == FilterKind.TAPER), FilterSpec(kind=FilterKind.TAPER))
    penalty = path_config(cfg, penkf_spec).penalty(penkf_spec.c_lambda)
    taper = TaperedEnKF(taper_spec.taper_half_length, taper_spec.cyclic).taper(cfg.model.p)

    model = cfg.model.build()
    obs = cfg.observation.build(cfg.model.p)
    reference_method = StochasticEnKF()
    rows = []
    for trial in range(cfg.trials):
        rng = trial_stream(cfg, trial)
        _, observations = simulate_twin(model, obs, checkpoints[-1], rng)
        p = cfg.model.p
        ensemble = draw_gaussian(np.zeros(p), DiagonalCovariance.isotropic(p, 1.0), reference_n, rng.derive(INITIAL_STREAM))
        state = FilterState(ensemble)
        filter_rng, subsample_rng = rng.derive(FILTER_STREAM), rng.derive(SUBSAMPLE_STREAM)

        sse = np.zeros(3)
        for t in range(1, checkpoints[-1] + 1):
            forecast = forecast_step(state, model, model.process_noise, filter_rng)
            if t in checkpoints:
                reference = sample_gain(sample_covariance(forecast.ensemble), obs).matrix
                chosen = subsample_rng.choice(reference_n, n)
                subsample = Ensemble(forecast.ensemble.members[:, chosen])
                S = sample_covariance(subsample)
                sse += [
                    _sse(sample_gain(S, obs).matrix, reference),
                    _sse(tapered_gain(S, taper, obs).matrix, reference),
                    _sse(penalized_gain(penalized_forecast_cov(subsample, penalty), obs).matrix, reference),
                ]
            D = perturb_observations(observations[t - 1], obs, reference_n, filter_rng)
            state = reference_method.analyse(forecast.ensemble, D, obs, forecast)
            state.cycle_index = t
        logger.debug(f"gain errors for trial {trial}: {sse.tolist()}")
        rows.append(GainErrorRow(trial=trial, sse_sample=sse[0], sse_tapered=sse[1], sse_penalized=sse[2]))

    result = GainErrorResult(rows=rows, p=cfg.model.p, n=n, reference_n=reference_n, checkpoints=checkpoints)
    logger.info(f"penalized gain beats the sample gain in {result.fraction_penalized_better:.0%} of trials")
    return result
