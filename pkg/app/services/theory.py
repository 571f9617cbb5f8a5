from collections.abc import Iterable, Sequence
import logging
import math

import numpy as np

from app.schemas.allocation import Allocation, ScalingRow
from app.schemas.theory import (
    ExponentCheck,
    PowerLawFit,
    RegimePrediction,
    RegimeReport,
    RegimeTolerances,
)

logger = logging.getLogger(__name__)

CRITICAL_TOLERANCE = 1e-12
WINDOW_TOLERANCE = 1e-9


class TheoryError(Exception):
    pass


class FitError(TheoryError):
    pass


class InsufficientSpanError(TheoryError):
    pass


def predict(alpha: float, beta: float) -> RegimePrediction:
    """Regime, allocation exponent and scaling exponents for (alpha, beta).

    ``beta = inf`` is the discrete-feature limit (step curves).
    """
    if not (math.isfinite(alpha) and alpha > 0):
        raise TheoryError(f"alpha must be positive and finite, got {alpha}")
    if math.isnan(beta) or beta <= 0:
        raise TheoryError(f"beta must be positive, got {beta}")

    gamma = 0.0 if math.isinf(beta) else (1.0 + alpha) / (1.0 + beta)
    if abs(alpha - beta) < CRITICAL_TOLERANCE:
        # Shared exponent, no logarithmic corrections.
        prediction = RegimePrediction(
            alpha=alpha,
            beta=beta,
            gamma=gamma,
            regime="critical",
            loss_exponent=alpha,
            discovery_exponent=1.0,
            degenerate=True,
        )
    elif beta < alpha:
        prediction = RegimePrediction(
            alpha=alpha,
            beta=beta,
            gamma=gamma,
            regime="pathological",
            loss_exponent=beta,
            discovery_exponent=(1.0 + beta) / (1.0 + alpha),
        )
    else:
        prediction = RegimePrediction(
            alpha=alpha,
            beta=beta,
            gamma=gamma,
            regime="benign",
            loss_exponent=alpha,
            discovery_exponent=1.0,
        )
    logger.info(
        "theory_predict alpha=%s beta=%s regime=%s gamma=%.6g",
        alpha,
        beta,
        prediction.regime,
        gamma,
    )
    return prediction


def default_window(xs: Sequence[float]) -> tuple[float, float]:
    """Last decade of the available x values."""
    top = max(xs)
    return (top / 10.0, top)


def fit_power_law(
    points: Iterable[tuple[float, float]],
    window: tuple[float, float] | None = None,
) -> PowerLawFit:
    pairs = [(float(x), float(y)) for x, y in points]
    if window is None:
        usable = [x for x, _ in pairs if x > 0 and math.isfinite(x)]
        if not usable:
            raise FitError(f"power-law fit needs at least 3 points with positive x, got {len(usable)}")
        window = default_window(usable)

    lo, hi = window
    # Points outside the window are never validated.
    selected = [(x, y) for x, y in pairs if lo * (1 - WINDOW_TOLERANCE) <= x <= hi * (1 + WINDOW_TOLERANCE)]
    for x, y in selected:
        if not (y > 0 and math.isfinite(x) and math.isfinite(y)):
            raise FitError(f"power-law fit needs positive finite coordinates, got point ({x!r}, {y!r})")
    if len(selected) < 3:
        raise FitError(f"power-law fit needs at least 3 points in window [{lo:g}, {hi:g}], got {len(selected)}")

    log_x = np.log(np.array([x for x, _ in selected]))
    log_y = np.log(np.array([y for _, y in selected]))
    design = np.column_stack([np.ones_like(log_x), log_x])
    (intercept, slope), *_ = np.linalg.lstsq(design, log_y, rcond=None)
    residuals = log_y - (intercept + slope * log_x)
    fit = PowerLawFit(
        slope=float(slope),
        intercept=float(intercept),
        window=(lo, hi),
        residual_rms=float(np.sqrt(np.mean(residuals**2))),
        points=len(selected),
    )
    logger.info(
        "theory_fit_power_law points=%s window=%g:%g slope=%.6g rms=%.3g",
        fit.points,
        lo,
        hi,
        fit.slope,
        fit.residual_rms,
    )
    return fit


def verify_regime(
    rows: Sequence[ScalingRow],
    prediction: RegimePrediction,
    tolerances: RegimeTolerances | None = None,
    window: tuple[float, float] | None = None,
) -> RegimeReport:
    """Fit loss and discovery exponents of a simulation table and compare with `prediction`."""
    tolerances = tolerances or RegimeTolerances()
    budgets = [row.total_latents for row in rows if row.total_latents > 0]
    if len(budgets) < 3 or max(budgets) < 100 * min(budgets):
        raise InsufficientSpanError("simulation table must span at least two decades of N")
    usable = [row for row in rows if row.total_latents > 0]
    window = window or default_window(budgets)

    loss_fit = fit_power_law(((row.total_latents, row.expected_loss) for row in usable), window)
    discovery_fit = fit_power_law(((row.total_latents, row.discovered) for row in usable), window)

    measured_loss = -loss_fit.slope
    measured_discovery = discovery_fit.slope
    checks = [
        ExponentCheck(
            quantity="loss_exponent",
            predicted=prediction.loss_exponent,
            measured=measured_loss,
            tolerance=tolerances.loss_exponent,
            passed=abs(measured_loss - prediction.loss_exponent) <= tolerances.loss_exponent,
        ),
        ExponentCheck(
            quantity="discovery_exponent",
            predicted=prediction.discovery_exponent,
            measured=measured_discovery,
            tolerance=tolerances.discovery_exponent,
            passed=abs(measured_discovery - prediction.discovery_exponent) <= tolerances.discovery_exponent,
        ),
    ]
    report = RegimeReport(
        prediction=prediction,
        window=window,
        checks=checks,
        loss_fit=loss_fit,
        discovery_fit=discovery_fit,
    )
    logger.info(
        "theory_verify_regime regime=%s loss=%.4f discovery=%.4f passed=%s",
        prediction.regime,
        measured_loss,
        measured_discovery,
        report.passed,
    )
    return report


def format_regime_table(report: RegimeReport) -> str:
    header = f"{'quantity':<20} {'predicted':>10} {'measured':>10} {'tolerance':>10} {'pass':>5}"
    lines = [header, "-" * len(header)]
    for check in report.checks:
        lines.append(
            f"{check.quantity:<20} {check.predicted:>10.4f} {check.measured:>10.4f} "
            f"{check.tolerance:>10.4f} {('yes' if check.passed else 'no'):>5}"
        )
    return "\n".join(lines)


def allocation_exponent_fit(allocation: Allocation) -> PowerLawFit:
    """Slope of log n_i against log i over the discovered features (expected: -gamma)."""
    counts = np.asarray(allocation.counts, dtype=np.float64)
    ranks = np.flatnonzero(counts > 0) + 1
    if ranks.size < 3:
        raise FitError(f"need at least 3 discovered features, got {ranks.size}")
    points = zip(ranks.tolist(), counts[ranks - 1].tolist())
    return fit_power_law(points, window=(1.0, float(ranks.max())))


__all__ = [
    "FitError",
    "InsufficientSpanError",
    "TheoryError",
    "allocation_exponent_fit",
    "default_window",
    "fit_power_law",
    "format_regime_table",
    "predict",
    "verify_regime",
]
