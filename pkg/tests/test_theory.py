import math

import numpy as np
import pytest

from app.schemas.allocation import ScalingRow
from app.schemas.theory import RegimeTolerances
from app.services.theory import (
    FitError,
    InsufficientSpanError,
    TheoryError,
    default_window,
    fit_power_law,
    format_regime_table,
    predict,
    verify_regime,
)


def _rows(budgets: list[int], loss_exponent: float, discovery_exponent: float) -> list[ScalingRow]:
    return [
        ScalingRow(
            total_latents=n,
            expected_loss=3.0 * n**-loss_exponent,
            discovered=max(1, round(0.5 * n**discovery_exponent)),
            frac_latents_feature_1=0.0,
        )
        for n in budgets
    ]


def test_predict_pathological_regime() -> None:
    prediction = predict(0.5, 0.25)

    assert prediction.regime == "pathological"
    assert prediction.loss_exponent == pytest.approx(0.25)
    assert prediction.discovery_exponent == pytest.approx(1.25 / 1.5)
    assert prediction.gamma == pytest.approx(1.2)
    assert not prediction.degenerate


def test_predict_benign_regime() -> None:
    prediction = predict(0.3, 0.9)

    assert prediction.regime == "benign"
    assert prediction.loss_exponent == pytest.approx(0.3)
    assert prediction.discovery_exponent == 1.0


def test_predict_critical_regime_is_degenerate() -> None:
    prediction = predict(0.5, 0.5)

    assert prediction.regime == "critical"
    assert prediction.degenerate
    assert prediction.gamma == pytest.approx(1.0)
    assert prediction.loss_exponent == pytest.approx(0.5)


def test_predict_discrete_limit() -> None:
    prediction = predict(0.5, math.inf)

    assert prediction.regime == "benign"
    assert prediction.gamma == 0.0
    assert prediction.loss_exponent == pytest.approx(0.5)


@pytest.mark.parametrize(("alpha", "beta"), [(0.0, 0.5), (-1.0, 0.5), (0.5, 0.0), (0.5, math.nan)])
def test_predict_rejects_invalid_exponents(alpha: float, beta: float) -> None:
    with pytest.raises(TheoryError):
        predict(alpha, beta)


def test_fit_recovers_exact_power_law() -> None:
    xs = [10.0**k for k in np.linspace(1, 4, 13)]

    fit = fit_power_law(((x, 7.0 * x**-0.5) for x in xs), window=(10, 1e4))

    assert abs(fit.slope + 0.5) < 1e-12
    assert fit.intercept == pytest.approx(math.log(7.0))
    assert fit.residual_rms < 1e-12
    assert fit.points == 13


def test_fit_of_constant_is_flat() -> None:
    fit = fit_power_law([(1, 2.0), (10, 2.0), (100, 2.0)], window=(1, 100))

    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_fit_is_scale_equivariant() -> None:
    rng = np.random.default_rng(5)
    points = [(x, x**-0.3 * math.exp(rng.normal(0, 0.05))) for x in np.logspace(0, 3, 20)]

    base = fit_power_law(points, window=(1, 1000))
    scaled = fit_power_law([(x, 4.0 * y) for x, y in points], window=(1, 1000))

    assert scaled.slope == pytest.approx(base.slope, abs=1e-12)
    assert scaled.intercept == pytest.approx(base.intercept + math.log(4.0), abs=1e-12)


def test_fit_default_window_is_last_decade() -> None:
    assert default_window([1, 50, 2000]) == (200.0, 2000)

    fit = fit_power_law([(x, 1.0 / x) for x in (1, 2, 100, 300, 600, 1000)])

    assert fit.window == (100.0, 1000)
    assert fit.points == 4


def test_fit_needs_three_points_in_window() -> None:
    with pytest.raises(FitError):
        fit_power_law([(1, 1.0), (10, 0.5)], window=(1, 10))
    with pytest.raises(FitError):
        fit_power_law([(1, 1.0), (10, 0.5), (100, 0.2)], window=(5, 50))


def test_fit_rejects_non_positive_points() -> None:
    with pytest.raises(FitError, match="0.0"):
        fit_power_law([(1, 1.0), (10, 0.0), (100, 0.2)], window=(1, 100))


def test_fit_ignores_bad_points_outside_the_window() -> None:
    points = [(0.0, 5.0), (1, 0.0), (10, 10**-0.5), (100, 100**-0.5), (1000, 1000**-0.5)]

    fit = fit_power_law(points, window=(10, 1000))

    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.points == 3


def test_default_window_skips_non_positive_x() -> None:
    fit = fit_power_law([(-5.0, 1.0), (200, 0.5), (500, 0.2), (2000, 0.1)])

    assert fit.window == (200.0, 2000)
    assert fit.points == 3


def test_verify_regime_passes_on_matching_exponents() -> None:
    rows = _rows([10**k for k in range(1, 6)], loss_exponent=0.25, discovery_exponent=1.25 / 1.5)
    rows += _rows([20_000, 50_000], loss_exponent=0.25, discovery_exponent=1.25 / 1.5)
    rows.sort(key=lambda row: row.total_latents)

    report = verify_regime(rows, predict(0.5, 0.25))

    assert report.window == (10_000.0, 100_000)
    assert report.passed
    assert report.loss_fit.slope == pytest.approx(-0.25, abs=1e-9)


def test_verify_regime_reports_failures() -> None:
    rows = _rows([100, 300, 1000, 3000, 10_000], loss_exponent=0.5, discovery_exponent=1.0)

    report = verify_regime(rows, predict(0.5, 0.25), tolerances=RegimeTolerances(loss_exponent=0.01))

    loss_check = report.checks[0]
    assert loss_check.quantity == "loss_exponent"
    assert not loss_check.passed
    assert not report.passed


def test_verify_regime_requires_two_decades() -> None:
    rows = _rows([10, 30, 99], loss_exponent=0.5, discovery_exponent=1.0)

    with pytest.raises(InsufficientSpanError):
        verify_regime(rows, predict(0.5, 0.25))


def test_regime_table_has_one_line_per_exponent() -> None:
    rows = _rows([100, 300, 1000, 3000, 10_000], loss_exponent=0.5, discovery_exponent=1.0)
    report = verify_regime(rows, predict(0.3, 0.9), window=(100, 10_000))

    lines = format_regime_table(report).splitlines()

    assert lines[0].split() == ["quantity", "predicted", "measured", "tolerance", "pass"]
    assert lines[2].split()[0] == "loss_exponent"
    assert lines[3].split()[0] == "discovery_exponent"
    assert lines[3].split()[-1] == "yes"
