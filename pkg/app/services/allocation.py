from collections.abc import Sequence
import heapq
import io
import logging
import math

import numpy as np

from app.schemas.allocation import (
    Allocation,
    CurveSegment,
    FeatureEnsemble,
    PowerLawCurve,
    ScalingRow,
    ScalingTrends,
    StepCurve,
    TabulatedCurve,
)

logger = logging.getLogger(__name__)

SCALING_CSV_HEADER = "N,expected_loss,discovered,frac_latents_feature_1"


class AllocationError(Exception):
    pass


class MixedCurvesError(AllocationError):
    pass


class BudgetOrderError(AllocationError):
    pass


def zipf_frequencies(alpha: float, n_features: int) -> np.ndarray:
    if alpha <= 0:
        raise AllocationError(f"alpha must be positive, got {alpha}")
    if n_features < 1:
        raise AllocationError("ensemble must contain at least one feature")
    ranks = np.arange(1, n_features + 1, dtype=np.float64)
    return np.power(ranks, -(1.0 + alpha))


def zipf_ensemble(
    alpha: float,
    n_features: int,
    curve: StepCurve | PowerLawCurve | TabulatedCurve,
) -> FeatureEnsemble:
    ensemble = FeatureEnsemble(
        frequencies=zipf_frequencies(alpha, n_features),
        segments=(CurveSegment(start=0, stop=n_features, curve=curve),),
    )
    logger.info("zipf_ensemble alpha=%s n_features=%s curve=%s", alpha, n_features, curve.kind)
    return ensemble


def manifold_plus_discrete_ensemble(
    alpha: float,
    n_features: int,
    beta: float,
    satisfied_loss: float = 0.0,
) -> FeatureEnsemble:
    """Most frequent feature is a manifold with a power-law curve; the rest are discrete."""
    if n_features < 2:
        raise AllocationError("need one manifold feature and at least one discrete feature")
    ensemble = FeatureEnsemble(
        frequencies=zipf_frequencies(alpha, n_features),
        segments=(
            CurveSegment(start=0, stop=1, curve=PowerLawCurve(beta=beta)),
            CurveSegment(start=1, stop=n_features, curve=StepCurve(satisfied_loss=satisfied_loss)),
        ),
    )
    logger.info(
        "manifold_plus_discrete_ensemble alpha=%s n_features=%s beta=%s",
        alpha,
        n_features,
        beta,
    )
    return ensemble


def marginal_gain(curve: StepCurve | PowerLawCurve | TabulatedCurve, n: int) -> float:
    """L(n) - L(n + 1), computed without cancellation for power-law curves."""
    if isinstance(curve, PowerLawCurve):
        base = (1.0 - curve.floor) * (1.0 + n) ** (-curve.beta)
        return base * -math.expm1(-curve.beta * math.log1p(1.0 / (1.0 + n)))
    return curve.value(n) - curve.value(n + 1)


class GreedyAllocator:
    """Largest-marginal-gain-first allocation that can be advanced budget by budget.

    Within a segment every untouched feature shares one curve and frequencies
    are non-increasing, so only the lowest-index untouched feature of each
    segment can win the next latent. The heap therefore holds the allocated
    features plus one frontier feature per segment, never the whole ensemble.
    Heap entries are ``(-gain, index, segment)``; equal gains pop the lower index.
    """

    def __init__(self, ensemble: FeatureEnsemble) -> None:
        if ensemble.size == 0:
            raise AllocationError("cannot allocate over an empty ensemble")
        self.ensemble = ensemble
        self.counts = np.zeros(ensemble.size, dtype=np.int64)
        self.total = 0
        self._frequencies = ensemble.frequencies
        self._curves = [segment.curve for segment in ensemble.segments]
        self._stops = [segment.stop for segment in ensemble.segments]
        self._heap: list[tuple[float, int, int]] = []
        for seg_id, segment in enumerate(ensemble.segments):
            self._push(segment.start, seg_id)

    def _push(self, index: int, seg_id: int) -> None:
        gain = self._frequencies[index] * marginal_gain(self._curves[seg_id], int(self.counts[index]))
        heapq.heappush(self._heap, (-gain, index, seg_id))

    def advance(self, budget: int) -> None:
        if budget < self.total:
            raise BudgetOrderError(f"budget {budget} is below the {self.total} latents already allocated")
        heap = self._heap
        counts = self.counts
        while self.total < budget:
            _, index, seg_id = heapq.heappop(heap)
            counts[index] += 1
            self.total += 1
            self._push(index, seg_id)
            if counts[index] == 1 and index + 1 < self._stops[seg_id]:
                self._push(index + 1, seg_id)

    def allocation(self) -> Allocation:
        counts = self.counts.copy()
        return Allocation(
            solver="greedy",
            counts=counts,
            total_latents=self.total,
            expected_loss=self.ensemble.expected_loss(counts),
            discovered=int(np.count_nonzero(counts)),
        )


def greedy_allocate(ensemble: FeatureEnsemble, total_latents: int) -> Allocation:
    if total_latents < 0:
        raise AllocationError(f"latent budget must be non-negative, got {total_latents}")
    outcome = "unknown"
    allocation: Allocation | None = None
    try:
        allocator = GreedyAllocator(ensemble)
        allocator.advance(int(total_latents))
        allocation = allocator.allocation()
        outcome = "ok"
        return allocation
    except AllocationError as exc:
        outcome = f"error:{type(exc).__name__}"
        raise
    finally:
        logger.info(
            "greedy_allocate n_features=%s budget=%s outcome=%s discovered=%s",
            ensemble.size,
            total_latents,
            outcome,
            allocation.discovered if allocation is not None else None,
        )


def _shared_power_law(ensemble: FeatureEnsemble) -> PowerLawCurve:
    curves = [segment.curve for segment in ensemble.segments]
    first = curves[0]
    if not isinstance(first, PowerLawCurve) or any(
        not isinstance(curve, PowerLawCurve) or curve.beta != first.beta for curve in curves
    ):
        raise MixedCurvesError(
            "continuous allocation needs one shared power-law exponent; use greedy_allocate for mixed curves"
        )
    return first


def continuous_allocate(ensemble: FeatureEnsemble, total_latents: float) -> Allocation:
    """Lagrange relaxation: n_i = kappa * p_i^(1/(1+beta)) over the discovered prefix.

    The discovered prefix is the fixed point of "solve kappa, drop n_i < 1":
    the largest K with ``N * w_K >= sum(w_1..w_K)``. That condition is
    monotone in K because the weights are non-increasing.
    """
    curve = _shared_power_law(ensemble)
    if total_latents <= 0:
        raise AllocationError(f"continuous allocation needs a positive budget, got {total_latents}")

    weights = np.power(ensemble.frequencies, 1.0 / (1.0 + curve.beta))
    prefix = np.cumsum(weights)
    admitted = total_latents * weights >= prefix
    cutoff = int(np.count_nonzero(admitted)) if admitted[0] else 1
    kappa = total_latents / prefix[cutoff - 1]

    counts = np.zeros(ensemble.size, dtype=np.float64)
    counts[:cutoff] = kappa * weights[:cutoff]
    allocation = Allocation(
        solver="continuous",
        counts=counts,
        total_latents=float(total_latents),
        expected_loss=ensemble.expected_loss(counts),
        discovered=cutoff,
    )
    logger.info(
        "continuous_allocate n_features=%s budget=%s beta=%s kappa=%.6g discovered=%s",
        ensemble.size,
        total_latents,
        curve.beta,
        kappa,
        cutoff,
    )
    return allocation


def simulate_scaling(
    ensemble: FeatureEnsemble,
    budgets: Sequence[int],
    flagged: Sequence[int] = (1,),
) -> list[ScalingRow]:
    """Greedy allocation at every budget, reusing one allocator across budgets.

    `flagged` lists 1-based feature ranks whose counts are reported per row.
    """
    budgets = [int(b) for b in budgets]
    if any(b < 0 for b in budgets):
        raise AllocationError("budgets must be non-negative")
    if any(later <= earlier for earlier, later in zip(budgets, budgets[1:])):
        raise BudgetOrderError(f"budgets must be strictly ascending, got {budgets}")
    for rank in flagged:
        if not 1 <= rank <= ensemble.size:
            raise AllocationError(f"flagged feature {rank} is outside 1..{ensemble.size}")

    rows: list[ScalingRow] = []
    allocator = GreedyAllocator(ensemble)
    for budget in budgets:
        allocator.advance(budget)
        counts = allocator.counts
        rows.append(
            ScalingRow(
                total_latents=budget,
                expected_loss=ensemble.expected_loss(counts),
                discovered=int(np.count_nonzero(counts)),
                frac_latents_feature_1=float(counts[0]) / budget if budget else 0.0,
                flagged_counts={rank: int(counts[rank - 1]) for rank in flagged},
            )
        )
        logger.info(
            "simulate_scaling_row budget=%s discovered=%s expected_loss=%.6g",
            budget,
            rows[-1].discovered,
            rows[-1].expected_loss,
        )
    return rows


def scaling_table_csv(rows: Sequence[ScalingRow]) -> str:
    buffer = io.StringIO()
    buffer.write(SCALING_CSV_HEADER + "\n")
    for row in rows:
        buffer.write(
            f"{row.total_latents},{row.expected_loss!r},{row.discovered},{row.frac_latents_feature_1!r}\n"
        )
    return buffer.getvalue()


def scaling_trends(rows: Sequence[ScalingRow]) -> ScalingTrends:
    """Strict monotonicity of D(N)/N (down) and feature-1 share (up) over the last decade."""
    usable = [row for row in rows if row.total_latents > 0]
    if len(usable) < 2:
        raise AllocationError("need at least two positive budgets to read a trend")
    top = usable[-1].total_latents
    tail = [row for row in usable if row.total_latents * 10 >= top]
    if len(tail) < 2:
        tail = usable[-2:]
    ratios = [row.discovered / row.total_latents for row in tail]
    shares = [row.frac_latents_feature_1 for row in tail]
    trends = ScalingTrends(
        window=(tail[0].total_latents, top),
        points=len(tail),
        discovery_ratio_decreasing=all(b < a for a, b in zip(ratios, ratios[1:])),
        feature_1_share_increasing=all(b > a for a, b in zip(shares, shares[1:])),
    )
    logger.info(
        "scaling_trends window=%s:%s ratio_decreasing=%s share_increasing=%s",
        trends.window[0],
        top,
        trends.discovery_ratio_decreasing,
        trends.feature_1_share_increasing,
    )
    return trends


def exchange_violation(ensemble: FeatureEnsemble, allocation: Allocation) -> float:
    """Largest loss decrease obtainable by moving one latent between two features.

    Non-positive (up to rounding) for any optimal integer allocation.
    """
    counts = np.asarray(allocation.counts, dtype=np.int64)
    freqs = ensemble.frequencies
    current = ensemble.loss_values(counts)
    add_gain = freqs * (current - ensemble.loss_values(counts + 1))
    remove_cost = np.full(ensemble.size, np.inf)
    allocated = counts > 0
    if not np.any(allocated):
        return -math.inf
    below = ensemble.loss_values(np.maximum(counts - 1, 0))
    remove_cost[allocated] = (freqs * (below - current))[allocated]

    best_add = int(np.argmax(add_gain))
    cheapest_remove = int(np.argmin(remove_cost))
    if best_add != cheapest_remove:
        return float(add_gain[best_add] - remove_cost[cheapest_remove])
    others_add = np.delete(add_gain, best_add)
    others_remove = np.delete(remove_cost, cheapest_remove)
    candidates = []
    if others_remove.size and np.isfinite(others_remove.min()):
        candidates.append(add_gain[best_add] - others_remove.min())
    if others_add.size:
        candidates.append(others_add.max() - remove_cost[cheapest_remove])
    return float(max(candidates)) if candidates else -math.inf


__all__ = [
    "SCALING_CSV_HEADER",
    "AllocationError",
    "BudgetOrderError",
    "GreedyAllocator",
    "MixedCurvesError",
    "continuous_allocate",
    "exchange_violation",
    "greedy_allocate",
    "manifold_plus_discrete_ensemble",
    "marginal_gain",
    "scaling_table_csv",
    "scaling_trends",
    "simulate_scaling",
    "zipf_ensemble",
    "zipf_frequencies",
]
