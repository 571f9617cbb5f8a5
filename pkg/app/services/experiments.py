from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from itertools import repeat
import logging
import math
import time

import numpy as np
from sqlalchemy.orm import Session

from app.cruds.sweep_runs import list_sweep_rows, upsert_sweep_run
from app.schemas.experiment import (
    AdditivityReport,
    ArcReport,
    BaselineComparison,
    BestPoint,
    DimensionSlope,
    FeatureLoss,
    GeometryReport,
    LatentArc,
    MonotonicityViolation,
    SimilarPair,
    SweepResult,
    SweepRow,
)
from app.schemas.manifold import CircleSpec, CompositeSpec, HypersphereSpec, ORTHOGONALITY_TOLERANCE
from app.schemas.sae import EvaluationResult, SaeModel, TrainConfig, TrainResult
from app.services import sae
from app.services.manifolds import ManifoldSpecType
from app.services.theory import FitError, fit_power_law
from app.utils.hashing import config_hash
from app.utils.seeds import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = 3
NOISE_BAND_STDERRS = 2.0
ARC_GRID_SIZE = 4096
SIMILARITY_THRESHOLD = 0.97
HISTOGRAM_BINS = 40
NEIGHBOR_CHUNK = 1024
HIGH_PAIR_LIMIT = 1000


class ExperimentError(Exception):
    pass


class SweepError(ExperimentError):
    pass


class AdditivityError(ExperimentError):
    pass


class GeometryError(ExperimentError):
    pass


def run_seed(base_seed: int, n_latents: int, seed_index: int) -> int:
    """Training seed of the `seed_index`-th run at `n_latents`."""
    return derive_seed(derive_seed(base_seed, n_latents), seed_index)


def sweep_hash(spec: ManifoldSpecType, config: TrainConfig) -> str:
    return config_hash({"spec": spec.model_dump(mode="json"), "train": config.model_dump(mode="json")})


def _run_point(
    spec: ManifoldSpecType,
    n_latents: int,
    config: TrainConfig,
    seed_index: int,
    timing: bool,
) -> SweepRow:
    seed = run_seed(config.seed, n_latents, seed_index)
    point_config = config.model_copy(update={"seed": seed})
    started = time.perf_counter()
    try:
        result = sae.train(spec, n_latents, point_config)
    except sae.TrainingDivergedError as exc:
        return SweepRow(
            n=n_latents,
            seed=seed,
            seed_index=seed_index,
            status="diverged",
            diverged_step=exc.step,
            wall_ms=(time.perf_counter() - started) * 1000.0 if timing else 0.0,
            config_hash=sae.train_config_hash(spec, n_latents, point_config),
        )
    return SweepRow(
        n=n_latents,
        seed=seed,
        seed_index=seed_index,
        status="ok",
        final_loss=result.evaluation.loss,
        loss_stderr=result.evaluation.stderr,
        dead_latents=result.dead_latents,
        wall_ms=(time.perf_counter() - started) * 1000.0 if timing else 0.0,
        config_hash=result.config_hash,
    )


def _best_points(rows: Sequence[SweepRow], latent_counts: Sequence[int]) -> list[BestPoint]:
    best = []
    for n in latent_counts:
        finished = [row for row in rows if row.n == n and row.status == "ok"]
        if not finished:
            raise SweepError(f"every seed diverged at n={n}")
        winner = min(finished, key=lambda row: (row.final_loss, row.seed_index))
        best.append(
            BestPoint(
                n=n,
                seed=winner.seed,
                final_loss=winner.final_loss,
                loss_stderr=winner.loss_stderr,
                dead_latents=winner.dead_latents,
            )
        )
    return best


def monotonicity_violations(best: Sequence[BestPoint]) -> list[MonotonicityViolation]:
    """Consecutive best points whose loss rises by more than two standard errors of the difference."""
    violations = []
    for prev, point in zip(best, best[1:]):
        band = NOISE_BAND_STDERRS * math.hypot(prev.loss_stderr, point.loss_stderr)
        if point.final_loss > prev.final_loss + band:
            violations.append(
                MonotonicityViolation(
                    n_prev=prev.n,
                    n=point.n,
                    loss_prev=prev.final_loss,
                    loss=point.final_loss,
                    band=band,
                )
            )
    return violations


def sweep_ln(
    spec: ManifoldSpecType,
    latent_counts: Sequence[int],
    config: TrainConfig,
    seeds: int = DEFAULT_SEEDS,
    *,
    threads: int = 1,
    fit_window: tuple[float, float] | None = None,
    timing: bool = True,
    db: Session | None = None,
) -> SweepResult:
    """Train one SAE per (n, seed), keep the best loss per n and fit the L(n) slope.

    With a registry session, points already stored under the same sweep hash are
    reused and new points are stored as they finish.
    """
    counts = [int(n) for n in latent_counts]
    if not counts:
        raise SweepError("need at least one latent count")
    if any(n < 0 for n in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
        raise SweepError(f"latent counts must be non-negative and strictly ascending, got {counts}")
    if seeds < 1:
        raise SweepError(f"need at least one seed per point, got {seeds}")

    digest = sweep_hash(spec, config)
    done: dict[tuple[int, int], SweepRow] = {}
    if db is not None:
        done = {(row.n, row.seed_index): row for row in list_sweep_rows(db, digest)}
    pending = [(n, k) for n in counts for k in range(seeds) if (n, k) not in done]

    started = time.perf_counter()
    outcome = "unknown"
    try:
        rows = dict(done)

        def _keep(row: SweepRow) -> None:
            rows[(row.n, row.seed_index)] = row
            if db is not None:
                upsert_sweep_run(db, digest, row)
            logger.info(
                "sweep_point_done n=%s seed_index=%s status=%s loss=%s",
                row.n,
                row.seed_index,
                row.status,
                row.final_loss,
            )

        if threads <= 1 or len(pending) <= 1:
            for n, k in pending:
                _keep(_run_point(spec, n, config, k, timing))
        else:
            with ProcessPoolExecutor(max_workers=min(threads, len(pending))) as pool:
                futures = [pool.submit(_run_point, spec, n, config, k, timing) for n, k in pending]
                for future in as_completed(futures):
                    _keep(future.result())

        ordered = [rows[(n, k)] for n in counts for k in range(seeds)]
        best = _best_points(ordered, counts)
        fit = None
        fit_note = None
        try:
            fit = fit_power_law(((point.n, point.final_loss) for point in best if point.n > 0), fit_window)
        except FitError as exc:
            fit_note = str(exc)
        violations = monotonicity_violations(best)
        outcome = "ok"
        return SweepResult(
            spec=spec,
            train=config,
            latent_counts=counts,
            seeds=seeds,
            sweep_hash=digest,
            rows=ordered,
            best=best,
            fit=fit,
            fit_note=fit_note,
            violations=violations,
        )
    except SweepError:
        outcome = "all_diverged"
        raise
    finally:
        logger.info(
            "sweep_ln kind=%s points=%s reused=%s threads=%s outcome=%s elapsed_s=%.2f",
            spec.kind,
            len(counts) * seeds,
            len(done),
            threads,
            outcome,
            time.perf_counter() - started,
        )


def sweep_csv_rows(result: SweepResult) -> list[tuple]:
    return [row.csv_values() for row in result.rows]


def hypersphere_slopes(
    dims: Sequence[int],
    latent_counts: Sequence[int],
    config: TrainConfig,
    seeds: int = DEFAULT_SEEDS,
    *,
    threads: int = 1,
    fit_window: tuple[float, float] | None = None,
    timing: bool = True,
    db: Session | None = None,
) -> list[DimensionSlope]:
    """L(n) sweep on the unit hypersphere of every dimension in `dims`, with the fitted slope of each."""
    dims = [int(d) for d in dims]
    if not dims or any(d < 1 for d in dims):
        raise SweepError(f"need at least one positive dimension, got {dims}")

    slopes = []
    for dim in dims:
        result = sweep_ln(
            HypersphereSpec(dim=dim, seed=config.seed),
            latent_counts,
            config,
            seeds,
            threads=threads,
            fit_window=fit_window,
            timing=timing,
            db=db,
        )
        slopes.append(
            DimensionSlope(
                dim=dim,
                sweep_hash=result.sweep_hash,
                rows=result.rows,
                best=result.best,
                fit=result.fit,
                fit_note=result.fit_note,
            )
        )
        logger.info(
            "hypersphere_slope dim=%s slope=%s note=%s",
            dim,
            None if result.fit is None else result.fit.slope,
            result.fit_note,
        )
    return slopes


def _train_seed(spec: ManifoldSpecType, n_latents: int, config: TrainConfig, seed: int) -> TrainResult | None:
    try:
        return sae.train(spec, n_latents, config.model_copy(update={"seed": seed}))
    except sae.TrainingDivergedError as exc:
        logger.warning("best_of_seeds_diverged n=%s seed=%s step=%s", n_latents, seed, exc.step)
        return None


def best_of_seeds(
    spec: ManifoldSpecType,
    n_latents: int,
    config: TrainConfig,
    seeds: int = 1,
    threads: int = 1,
) -> tuple[int, TrainResult]:
    """(seed, result) with the lowest evaluated loss among `seeds` runs; diverged runs are skipped."""
    run_seeds = [run_seed(config.seed, n_latents, seed_index) for seed_index in range(seeds)]
    if threads <= 1 or seeds <= 1:
        results = [_train_seed(spec, n_latents, config, seed) for seed in run_seeds]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, seeds)) as pool:
            results = list(pool.map(_train_seed, repeat(spec), repeat(n_latents), repeat(config), run_seeds))

    best: tuple[int, TrainResult] | None = None
    for seed, result in zip(run_seeds, results):
        if result is None:
            continue
        if best is None or result.final_loss < best[1].final_loss:
            best = (seed, result)
    if best is None:
        raise ExperimentError(f"every seed diverged at n={n_latents}")
    return best


def circle_grid(size: int = ARC_GRID_SIZE) -> tuple[np.ndarray, np.ndarray]:
    angles = 2.0 * np.pi * np.arange(size) / size
    return angles, np.column_stack([np.cos(angles), np.sin(angles)])


def latent_arc(latent: int, active: np.ndarray, angles: np.ndarray) -> LatentArc:
    """Summarize the grid cells where one latent fires, treating the grid as cyclic."""
    size = active.size
    step = 2.0 * np.pi / size
    hits = int(np.count_nonzero(active))
    if hits == 0:
        return LatentArc(latent=latent, kind="empty")
    if hits == size:
        return LatentArc(latent=latent, kind="full", width=2.0 * np.pi, runs=1)

    rises = np.flatnonzero(active & ~np.roll(active, 1))
    start = int(rises[0])
    stop = start
    while active[(stop + 1) % size]:
        stop = (stop + 1) % size
    return LatentArc(
        latent=latent,
        kind="arc",
        start=float(angles[start]),
        end=float(angles[stop]),
        width=hits * step,
        runs=int(rises.size),
        contiguous=rises.size == 1,
    )


def arc_report(
    model: SaeModel,
    evaluation: EvaluationResult,
    seed: int,
    activation_threshold: float,
    grid_size: int = ARC_GRID_SIZE,
) -> ArcReport:
    angles, points = circle_grid(grid_size)
    acts = sae.encode(model, points)
    active = acts > activation_threshold
    arcs = [latent_arc(j, active[:, j], angles) for j in range(model.n_latents)]
    trace = sae.decode(model, acts)
    return ArcReport(
        n_latents=model.n_latents,
        seed=seed,
        final_loss=evaluation.loss,
        loss_stderr=evaluation.stderr,
        grid_size=grid_size,
        arcs=arcs,
        decoder_directions=[tuple(column) for column in model.w_dec.T.tolist()],
        reconstruction=[tuple(point) for point in trace.tolist()],
    )


def circle_tiling(
    n_latents: int,
    config: TrainConfig,
    seeds: int = 1,
    threads: int = 1,
) -> tuple[ArcReport, TrainResult]:
    if n_latents < 1:
        raise ExperimentError(f"circle tiling needs at least one latent, got {n_latents}")
    spec = CircleSpec()
    winner_seed, result = best_of_seeds(spec, n_latents, config, seeds, threads)
    report = arc_report(result.model, result.evaluation, winner_seed, config.activation_threshold)
    logger.info(
        "circle_tiling n=%s live=%s contiguous=%.3f mean_width=%.4f loss=%.6g",
        n_latents,
        report.live_latents,
        report.contiguous_fraction,
        report.mean_arc_width,
        report.final_loss,
    )
    return report, result


def zero_model(input_dim: int) -> SaeModel:
    return SaeModel(
        w_enc=np.zeros((0, input_dim)),
        b_enc=np.zeros(0),
        w_dec=np.zeros((input_dim, 0)),
        b_dec=np.zeros(input_dim),
    )


def _feature_loss(
    spec: ManifoldSpecType,
    n_latents: int,
    config: TrainConfig,
    seeds: int,
    threads: int,
) -> EvaluationResult:
    if n_latents == 0:
        return sae.evaluate(zero_model(spec.ambient_dim), spec, config)
    return best_of_seeds(spec, n_latents, config, seeds, threads)[1].evaluation


def _check_orthogonal(spec: CompositeSpec) -> None:
    blocks = [component.basis_matrix() for component in spec.components]
    for i in range(len(blocks)):
        for k in range(i + 1, len(blocks)):
            if np.max(np.abs(blocks[i].T @ blocks[k])) > ORTHOGONALITY_TOLERANCE:
                raise AdditivityError(f"components {i} and {k} do not live in orthogonal subspaces")


def additivity_check(
    spec: CompositeSpec,
    latents: Sequence[int],
    config: TrainConfig,
    seeds: int = 1,
    threads: int = 1,
) -> AdditivityReport:
    """Compare the joint SAE loss on a composite with sum_i p_i L_i(n_i) from per-feature SAEs."""
    if not isinstance(spec, CompositeSpec):
        raise AdditivityError(f"additivity needs a composite manifold, got {spec.kind}")
    if len(latents) != len(spec.components):
        raise AdditivityError(f"need one latent count per component, got {len(latents)} for {len(spec.components)}")
    if any(n < 0 for n in latents):
        raise AdditivityError(f"latent counts must be non-negative, got {list(latents)}")
    _check_orthogonal(spec)

    joint = _feature_loss(spec, sum(latents), config, seeds, threads)
    features = []
    for position, (component, n) in enumerate(zip(spec.components, latents)):
        feature_config = config.model_copy(update={"seed": derive_seed(config.seed, position + 1)})
        evaluation = _feature_loss(component.spec, n, feature_config, seeds, threads)
        features.append(
            FeatureLoss(
                frequency=component.frequency,
                n_latents=n,
                loss=evaluation.loss,
                loss_stderr=evaluation.stderr,
            )
        )
    predicted = sum(feature.frequency * feature.loss for feature in features)
    gap = abs(joint.loss - predicted) / predicted if predicted > 0 else abs(joint.loss)
    report = AdditivityReport(
        spec=spec,
        latents=list(latents),
        joint_loss=joint.loss,
        joint_stderr=joint.stderr,
        features=features,
        predicted_loss=predicted,
        relative_gap=gap,
    )
    logger.info(
        "additivity_check latents=%s joint=%.6g predicted=%.6g gap=%.4f",
        list(latents),
        joint.loss,
        predicted,
        gap,
    )
    return report


def decoder_geometry(
    w_dec: np.ndarray,
    activation_counts: np.ndarray | None = None,
    *,
    absolute: bool = False,
    threshold: float = SIMILARITY_THRESHOLD,
    bins: int = HISTOGRAM_BINS,
) -> GeometryReport:
    """Nearest-neighbor cosine similarity of every live decoder column.

    Zero columns, and latents that never fired when `activation_counts` is given,
    are dead: they are reported but excluded from every neighbor search.
    """
    w_dec = np.asarray(w_dec, dtype=np.float64)
    if w_dec.ndim != 2:
        raise GeometryError(f"decoder must be a (d, N) matrix, got shape {w_dec.shape}")
    input_dim, n_latents = w_dec.shape
    norms = np.linalg.norm(w_dec, axis=0)
    dead = norms <= 0.0
    if activation_counts is not None:
        activation_counts = np.asarray(activation_counts)
        if activation_counts.shape != (n_latents,):
            raise GeometryError(f"activation counts have shape {activation_counts.shape}, expected ({n_latents},)")
        dead |= activation_counts == 0
    live = np.flatnonzero(~dead)
    if live.size < 2:
        raise GeometryError(f"need at least 2 live latents, got {live.size}")

    unit = w_dec[:, live] / norms[live]
    best = np.empty(live.size)
    best_index = np.empty(live.size, dtype=np.int64)
    pairs_above = 0
    high_pairs: list[SimilarPair] = []
    for begin in range(0, live.size, NEIGHBOR_CHUNK):
        end = min(begin + NEIGHBOR_CHUNK, live.size)
        sims = np.clip(unit[:, begin:end].T @ unit, -1.0, 1.0)
        if absolute:
            sims = np.abs(sims)
        rows = np.arange(end - begin)
        sims[rows, rows + begin] = -np.inf
        best_index[begin:end] = np.argmax(sims, axis=1)
        best[begin:end] = sims[rows, best_index[begin:end]]

        upper = np.triu(sims > threshold, k=begin + 1)
        hit_rows, hit_cols = np.nonzero(upper)
        pairs_above += int(hit_rows.size)
        for r, c in zip(hit_rows.tolist(), hit_cols.tolist()):
            if len(high_pairs) >= HIGH_PAIR_LIMIT:
                break
            high_pairs.append(
                SimilarPair(first=int(live[r + begin]), second=int(live[c]), similarity=float(sims[r, c]))
            )

    nn_similarity: list[float | None] = [None] * n_latents
    nn_index: list[int | None] = [None] * n_latents
    for position, latent in enumerate(live.tolist()):
        nn_similarity[latent] = float(best[position])
        nn_index[latent] = int(live[best_index[position]])
    counts, edges = np.histogram(best, bins=bins, range=(-1.0, 1.0))
    report = GeometryReport(
        n_latents=n_latents,
        input_dim=input_dim,
        absolute=absolute,
        nn_similarity=nn_similarity,
        nn_index=nn_index,
        dead=dead.tolist(),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
        threshold=threshold,
        pairs_above=pairs_above,
        latents_above=int(np.count_nonzero(best > threshold)),
        high_pairs=high_pairs,
    )
    logger.info(
        "decoder_geometry n=%s live=%s dead=%s pairs_above=%s median=%.4f",
        n_latents,
        live.size,
        int(np.count_nonzero(dead)),
        pairs_above,
        report.median_similarity,
    )
    return report


def random_baseline_median(n_latents: int, input_dim: int, resamples: int = 100, seed: int = 0) -> float:
    """Median over resamples of the median NN similarity of random unit vectors."""
    if n_latents < 2:
        raise GeometryError(f"need at least 2 latents, got {n_latents}")
    rng = np.random.default_rng(derive_seed(seed, n_latents * 1009 + input_dim))
    medians = []
    for _ in range(resamples):
        vectors = rng.standard_normal((input_dim, n_latents))
        vectors /= np.linalg.norm(vectors, axis=0)
        sims = vectors.T @ vectors
        np.fill_diagonal(sims, -np.inf)
        medians.append(float(np.median(np.max(sims, axis=1))))
    return float(np.median(medians))


def compare_to_random_baseline(report: GeometryReport, resamples: int = 100, seed: int = 0) -> BaselineComparison:
    baseline = random_baseline_median(report.live_latents, report.input_dim, resamples, seed)
    return BaselineComparison(
        median_similarity=report.median_similarity,
        baseline_median=baseline,
        resamples=resamples,
        above_baseline=report.median_similarity > baseline,
    )


__all__ = [
    "AdditivityError",
    "ExperimentError",
    "GeometryError",
    "SweepError",
    "additivity_check",
    "arc_report",
    "best_of_seeds",
    "circle_grid",
    "circle_tiling",
    "compare_to_random_baseline",
    "decoder_geometry",
    "hypersphere_slopes",
    "latent_arc",
    "monotonicity_violations",
    "random_baseline_median",
    "run_seed",
    "sweep_csv_rows",
    "sweep_hash",
    "sweep_ln",
    "zero_model",
]
