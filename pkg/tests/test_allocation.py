from itertools import combinations
import math

import numpy as np
import pytest

from app.schemas.allocation import (
    CurveSegment,
    FeatureEnsemble,
    PowerLawCurve,
    StepCurve,
    TabulatedCurve,
)
from app.services.allocation import (
    SCALING_CSV_HEADER,
    AllocationError,
    BudgetOrderError,
    GreedyAllocator,
    MixedCurvesError,
    continuous_allocate,
    exchange_violation,
    greedy_allocate,
    manifold_plus_discrete_ensemble,
    marginal_gain,
    scaling_table_csv,
    scaling_trends,
    simulate_scaling,
    zipf_ensemble,
)
from app.services.theory import allocation_exponent_fit, fit_power_law, predict, verify_regime
from app.utils.grids import parse_grid


def _compositions(total: int, parts: int) -> np.ndarray:
    """Every non-negative integer vector of length `parts` summing to `total`."""
    rows = []
    for bars in combinations(range(total + parts - 1), parts - 1):
        edges = (-1, *bars, total + parts - 1)
        rows.append([edges[k + 1] - edges[k] - 1 for k in range(parts)])
    return np.array(rows, dtype=np.int64)


def _exhaustive_minimum(ensemble: FeatureEnsemble, total: int) -> float:
    candidates = _compositions(total, ensemble.size)
    losses = np.zeros(len(candidates))
    for i in range(ensemble.size):
        curve = ensemble.curve_at(i)
        losses += ensemble.frequencies[i] * curve.values(candidates[:, i])
    return float(losses.min())


def _random_convex_table(rng: np.random.Generator, length: int) -> TabulatedCurve:
    gains = np.sort(rng.uniform(0.0, 1.0, size=length))[::-1]
    gains *= rng.uniform(0.1, 1.0) / gains.sum()
    return TabulatedCurve(loss=tuple([1.0, *(1.0 - np.cumsum(gains)).tolist()]))


def _random_instance(rng: np.random.Generator, shared: bool) -> FeatureEnsemble:
    n_features = int(rng.integers(1, 7))
    frequencies = np.sort(rng.uniform(0.01, 1.0, size=n_features))[::-1]
    if shared:
        curve = _random_convex_table(rng, int(rng.integers(1, 10)))
        segments = (CurveSegment(start=0, stop=n_features, curve=curve),)
    else:
        segments = tuple(
            CurveSegment(start=i, stop=i + 1, curve=_random_convex_table(rng, int(rng.integers(1, 10))))
            for i in range(n_features)
        )
    return FeatureEnsemble(frequencies=frequencies, segments=segments)


def test_greedy_matches_exhaustive_search_on_small_instances() -> None:
    rng = np.random.default_rng(2024)
    sizes, budgets = set(), set()
    for trial in range(1000):
        ensemble = _random_instance(rng, shared=trial % 2 == 0)
        budget = int(rng.integers(0, 13))
        sizes.add(ensemble.size)
        budgets.add(budget)
        allocation = greedy_allocate(ensemble, budget)

        assert int(allocation.counts.sum()) == budget
        best = _exhaustive_minimum(ensemble, budget)
        assert allocation.expected_loss <= best + 1e-12
        assert allocation.expected_loss == pytest.approx(best, rel=1e-12, abs=1e-12)

    assert max(sizes) == 6
    assert max(budgets) == 12


def test_greedy_step_features_take_one_latent_each_in_rank_order() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=5, curve=StepCurve())

    allocation = greedy_allocate(ensemble, 3)

    assert allocation.counts.tolist() == [1, 1, 1, 0, 0]
    assert allocation.discovered == 3


def test_greedy_zero_budget_allocates_nothing() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=5, curve=PowerLawCurve(beta=0.5))

    allocation = greedy_allocate(ensemble, 0)

    assert allocation.counts.tolist() == [0, 0, 0, 0, 0]
    assert allocation.discovered == 0
    assert allocation.expected_loss == pytest.approx(float(ensemble.frequencies.sum()))


def test_greedy_shared_power_law_matches_enumeration() -> None:
    ensemble = FeatureEnsemble(
        frequencies=[0.5, 0.3, 0.2],
        segments=(CurveSegment(start=0, stop=3, curve=PowerLawCurve(beta=0.5)),),
    )

    allocation = greedy_allocate(ensemble, 6)

    assert allocation.expected_loss == pytest.approx(_exhaustive_minimum(ensemble, 6), rel=1e-12)
    assert allocation.counts[0] >= allocation.counts[1] >= allocation.counts[2]


def test_greedy_rejects_negative_budget() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=3, curve=StepCurve())

    with pytest.raises(AllocationError):
        greedy_allocate(ensemble, -1)


def test_greedy_single_feature_single_latent() -> None:
    ensemble = zipf_ensemble(alpha=1.0, n_features=1, curve=PowerLawCurve(beta=1.0))

    rows = simulate_scaling(ensemble, [1])

    assert rows[0].discovered == 1
    assert rows[0].frac_latents_feature_1 == 1.0
    assert rows[0].expected_loss == pytest.approx(0.5)


def test_greedy_allocations_pass_exchange_check() -> None:
    ensemble = manifold_plus_discrete_ensemble(alpha=0.5, n_features=2000, beta=0.1)
    for budget in (1, 17, 250, 1900):
        allocation = greedy_allocate(ensemble, budget)
        assert exchange_violation(ensemble, allocation) <= 1e-12


def test_exchange_check_flags_suboptimal_allocation() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=4, curve=StepCurve())
    optimal = greedy_allocate(ensemble, 2)
    worse = optimal.model_copy(update={"counts": np.array([0, 0, 1, 1])})

    assert exchange_violation(ensemble, worse) > 0.0


def test_all_step_discovery_equals_budget_until_exhausted() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=100, curve=StepCurve())

    rows = simulate_scaling(ensemble, [1, 10, 50, 100, 150])

    assert [row.discovered for row in rows] == [1, 10, 50, 100, 100]
    assert rows[3].expected_loss == pytest.approx(0.0)


def test_scaling_is_monotone_in_budget() -> None:
    ensemble = manifold_plus_discrete_ensemble(alpha=0.5, n_features=5000, beta=0.05)

    rows = simulate_scaling(ensemble, parse_grid("1:5000:log8"))

    losses = [row.expected_loss for row in rows]
    discovered = [row.discovered for row in rows]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert all(b >= a for a, b in zip(discovered, discovered[1:]))


def test_simulate_scaling_matches_fresh_allocations() -> None:
    ensemble = zipf_ensemble(alpha=0.4, n_features=300, curve=PowerLawCurve(beta=0.3))
    budgets = [0, 5, 40, 41, 600]

    rows = simulate_scaling(ensemble, budgets, flagged=[1, 2])

    for budget, row in zip(budgets, rows):
        fresh = greedy_allocate(ensemble, budget)
        assert row.expected_loss == fresh.expected_loss
        assert row.discovered == fresh.discovered
        assert row.flagged_counts == {1: int(fresh.counts[0]), 2: int(fresh.counts[1])}


def test_simulate_scaling_rejects_unsorted_budgets() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=10, curve=StepCurve())

    with pytest.raises(BudgetOrderError):
        simulate_scaling(ensemble, [10, 5])
    with pytest.raises(BudgetOrderError):
        simulate_scaling(ensemble, [5, 5])


def test_allocator_cannot_move_backwards() -> None:
    allocator = GreedyAllocator(zipf_ensemble(alpha=0.5, n_features=10, curve=StepCurve()))
    allocator.advance(4)

    with pytest.raises(BudgetOrderError):
        allocator.advance(3)


def test_simulate_scaling_rejects_unknown_flagged_rank() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=10, curve=StepCurve())

    with pytest.raises(AllocationError):
        simulate_scaling(ensemble, [1, 2], flagged=[11])


def test_marginal_gain_matches_direct_difference() -> None:
    curve = PowerLawCurve(beta=0.7, floor=0.2)
    for n in (0, 1, 5, 1000):
        assert marginal_gain(curve, n) == pytest.approx(curve.value(n) - curve.value(n + 1), rel=1e-9)


def test_continuous_equal_frequencies_split_budget_evenly() -> None:
    ensemble = FeatureEnsemble(
        frequencies=[0.5, 0.5],
        segments=(CurveSegment(start=0, stop=2, curve=PowerLawCurve(beta=1.0)),),
    )

    allocation = continuous_allocate(ensemble, 10)

    assert allocation.counts.tolist() == pytest.approx([5.0, 5.0])
    assert allocation.discovered == 2


def test_continuous_allocation_exponent_and_loss_track_greedy() -> None:
    alpha, beta = 0.5, 0.25
    ensemble = zipf_ensemble(alpha=alpha, n_features=10_000, curve=PowerLawCurve(beta=beta))

    continuous = continuous_allocate(ensemble, 1000)
    greedy = greedy_allocate(ensemble, 1000)

    fit = allocation_exponent_fit(continuous)
    assert fit.slope == pytest.approx(-predict(alpha, beta).gamma, abs=0.01)
    assert continuous.total_latents == pytest.approx(1000.0)
    assert np.all(continuous.counts[: continuous.discovered] >= 1.0 - 1e-9)
    assert continuous.expected_loss == pytest.approx(greedy.expected_loss, rel=0.05)


def test_continuous_rejects_mixed_curves() -> None:
    ensemble = manifold_plus_discrete_ensemble(alpha=0.5, n_features=10, beta=0.1)

    with pytest.raises(MixedCurvesError):
        continuous_allocate(ensemble, 10)


def test_tabulated_curve_rejects_non_convex_table() -> None:
    with pytest.raises(ValueError):
        TabulatedCurve(loss=(1.0, 0.9, 0.5))
    with pytest.raises(ValueError):
        TabulatedCurve(loss=(1.0, 1.1))


def test_ensemble_rejects_unsorted_frequencies() -> None:
    with pytest.raises(ValueError):
        FeatureEnsemble(
            frequencies=[0.2, 0.5],
            segments=(CurveSegment(start=0, stop=2, curve=StepCurve()),),
        )


def test_normalized_copy_sums_to_one() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=50, curve=StepCurve())

    normalized = ensemble.normalized_copy()

    assert normalized.normalized
    assert float(normalized.frequencies.sum()) == pytest.approx(1.0)


def test_scaling_table_csv_layout() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=20, curve=StepCurve())
    rows = simulate_scaling(ensemble, [1, 2])

    lines = scaling_table_csv(rows).splitlines()

    assert lines[0] == SCALING_CSV_HEADER
    assert len(lines) == 3
    n, loss, discovered, share = lines[1].split(",")
    assert (n, discovered, share) == ("1", "1", "1.0")
    assert float(loss) == rows[0].expected_loss


def test_scaling_trends_in_pathological_mix() -> None:
    ensemble = manifold_plus_discrete_ensemble(alpha=0.5, n_features=100_000, beta=0.05)
    rows = simulate_scaling(ensemble, parse_grid("10:10000:log4"))

    trends = scaling_trends(rows)

    assert trends.window == (1000, 10000)
    assert trends.points == 5
    assert trends.discovery_ratio_decreasing
    assert trends.feature_1_share_increasing


def test_scaling_trends_needs_two_budgets() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=20, curve=StepCurve())

    with pytest.raises(AllocationError):
        scaling_trends(simulate_scaling(ensemble, [0, 5]))


@pytest.mark.slow
def test_all_step_loss_decays_with_alpha() -> None:
    ensemble = zipf_ensemble(alpha=0.5, n_features=100_000, curve=StepCurve())
    rows = simulate_scaling(ensemble, parse_grid("10:10000:log4"))

    fit = fit_power_law(((row.total_latents, row.expected_loss) for row in rows), window=(10, 1000))

    assert fit.slope == pytest.approx(-0.5, abs=0.05)


@pytest.mark.slow
def test_pathological_regime_exponents() -> None:
    alpha, beta = 0.5, 0.1
    ensemble = zipf_ensemble(alpha=alpha, n_features=10_000, curve=PowerLawCurve(beta=beta))
    rows = simulate_scaling(ensemble, parse_grid("100:100000:log4"))

    report = verify_regime(rows, predict(alpha, beta))

    assert report.prediction.regime == "pathological"
    assert report.discovery_fit.slope == pytest.approx(1.1 / 1.5, abs=0.05)
    assert -report.loss_fit.slope == pytest.approx(0.1, abs=0.03)
    assert report.passed


@pytest.mark.slow
def test_benign_regime_exponents() -> None:
    alpha, beta = 0.3, 1.0
    ensemble = zipf_ensemble(alpha=alpha, n_features=10_000_000, curve=PowerLawCurve(beta=beta))
    rows = simulate_scaling(ensemble, parse_grid("100:100000:log4"))

    report = verify_regime(rows, predict(alpha, beta))

    assert report.prediction.regime == "benign"
    assert report.discovery_fit.slope == pytest.approx(1.0, abs=0.05)
    assert -report.loss_fit.slope == pytest.approx(0.3, abs=0.05)


@pytest.mark.slow
def test_simulated_manifold_absorbs_latents() -> None:
    ensemble = manifold_plus_discrete_ensemble(alpha=0.5, n_features=10_000_000, beta=0.05)
    rows = simulate_scaling(ensemble, parse_grid("10:1000000:log4"))

    trends = scaling_trends(rows)

    assert trends.discovery_ratio_decreasing
    assert trends.feature_1_share_increasing
    assert rows[-1].frac_latents_feature_1 > rows[0].frac_latents_feature_1
    assert not math.isnan(rows[-1].expected_loss)
