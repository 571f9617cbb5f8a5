import math
from pathlib import Path

import numpy as np
import pytest

from app.core.db import registry_session
from app.schemas.experiment import BestPoint, SweepRow
from app.schemas.manifold import CircleSpec, HypersphereSpec, ShellSpec
from app.schemas.sae import EvaluationResult, L1Sparsity, SaeModel, TrainConfig
from app.services import sae
from app.services.experiments import (
    AdditivityError,
    ExperimentError,
    GeometryError,
    SweepError,
    additivity_check,
    arc_report,
    best_of_seeds,
    circle_tiling,
    compare_to_random_baseline,
    decoder_geometry,
    hypersphere_slopes,
    latent_arc,
    monotonicity_violations,
    random_baseline_median,
    run_seed,
    sweep_csv_rows,
    sweep_ln,
)
from app.services.manifolds import composite_spec
from app.utils.grids import parse_grid


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        steps=30,
        batch_size=64,
        learning_rate=1e-2,
        sparsity=L1Sparsity(coefficient=0.1),
        seed=11,
        log_every=10,
        eval_samples=256,
        dead_latent_samples=256,
    )


def _point(n: int, loss: float, stderr: float = 0.01) -> BestPoint:
    return BestPoint(n=n, seed=0, final_loss=loss, loss_stderr=stderr, dead_latents=0)


def test_geometry_of_orthonormal_decoder_is_zero() -> None:
    report = decoder_geometry(np.eye(3))

    assert report.nn_similarity == [0.0, 0.0, 0.0]
    assert report.median_similarity == 0.0
    assert report.pairs_above == 0


def test_geometry_finds_duplicated_column() -> None:
    w_dec = np.array([[1.0, 2.0, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])

    report = decoder_geometry(w_dec)

    assert report.nn_similarity[0] == pytest.approx(1.0, abs=1e-12)
    assert report.nn_similarity[1] == pytest.approx(1.0, abs=1e-12)
    assert report.nn_index[0] == 1
    assert report.pairs_above == 1
    assert report.high_pairs[0].first == 0
    assert report.high_pairs[0].second == 1
    assert report.latents_above == 2


def test_geometry_is_permutation_invariant(rng: np.random.Generator) -> None:
    w_dec = rng.normal(size=(5, 30))
    order = rng.permutation(30)

    base = decoder_geometry(w_dec)
    shuffled = decoder_geometry(w_dec[:, order])

    assert shuffled.nn_similarity == pytest.approx([base.nn_similarity[j] for j in order], abs=1e-12)
    assert shuffled.median_similarity == pytest.approx(base.median_similarity, abs=1e-12)
    assert shuffled.histogram_counts == base.histogram_counts


def test_absolute_geometry_ignores_sign_flips(rng: np.random.Generator) -> None:
    w_dec = rng.normal(size=(4, 12))
    signs = np.where(rng.random(12) < 0.5, -1.0, 1.0)

    base = decoder_geometry(w_dec, absolute=True)
    flipped = decoder_geometry(w_dec * signs, absolute=True)

    assert flipped.nn_similarity == pytest.approx(base.nn_similarity, abs=1e-12)
    assert flipped.nn_index == base.nn_index


def test_geometry_reports_dead_latents_without_searching_them() -> None:
    w_dec = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0]])

    report = decoder_geometry(w_dec, activation_counts=np.array([5, 5, 5, 0]))

    assert report.dead == [False, False, True, True]
    assert report.nn_similarity[2] is None
    assert report.nn_similarity[0] == pytest.approx(0.0)
    assert report.live_latents == 2


def test_geometry_needs_two_live_latents() -> None:
    with pytest.raises(GeometryError):
        decoder_geometry(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_random_columns_stay_nearly_orthogonal() -> None:
    rng = np.random.default_rng(3)
    w_dec = rng.standard_normal((512, 7680))

    report = decoder_geometry(w_dec)

    assert max(report.nn_similarity) < 0.3
    assert sum(report.histogram_counts) == 7680


def test_duplicated_decoder_beats_random_baseline() -> None:
    w_dec = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
    report = decoder_geometry(w_dec)

    comparison = compare_to_random_baseline(report, resamples=50, seed=1)

    assert comparison.above_baseline
    assert comparison.baseline_median == random_baseline_median(4, 3, resamples=50, seed=1)


def test_latent_arc_wraps_around_the_grid() -> None:
    angles = 2.0 * np.pi * np.arange(8) / 8
    active = np.array([True, True, False, False, False, False, False, True])

    arc = latent_arc(0, active, angles)

    assert arc.kind == "arc"
    assert arc.contiguous
    assert arc.runs == 1
    assert arc.start == pytest.approx(angles[7])
    assert arc.end == pytest.approx(angles[1])
    assert arc.width == pytest.approx(3 * 2.0 * np.pi / 8)


def test_latent_arc_counts_separate_runs() -> None:
    angles = 2.0 * np.pi * np.arange(8) / 8

    split = latent_arc(1, np.array([True, False, True, False, False, False, False, False]), angles)
    empty = latent_arc(2, np.zeros(8, dtype=bool), angles)
    full = latent_arc(3, np.ones(8, dtype=bool), angles)

    assert split.runs == 2
    assert not split.contiguous
    assert empty.kind == "empty"
    assert full.kind == "full"
    assert full.width == pytest.approx(2.0 * np.pi)


def test_arc_report_for_axis_aligned_latents() -> None:
    directions = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    model = SaeModel(w_enc=directions, b_enc=np.zeros(4), w_dec=directions.T.copy(), b_dec=np.zeros(2))
    evaluation = EvaluationResult(loss=0.0, stderr=0.0, reconstruction=0.0, sparsity=0.0, samples=1)

    report = arc_report(model, evaluation, seed=0, activation_threshold=1e-6)

    assert report.live_latents == 4
    assert report.contiguous_fraction == 1.0
    assert report.mean_arc_width == pytest.approx(np.pi, abs=0.01)
    assert report.arcs[0].start == pytest.approx(1.5 * np.pi, abs=0.01)
    assert len(report.reconstruction) == report.grid_size
    assert report.decoder_directions[1] == (0.0, 1.0)


def test_monotonicity_violation_outside_noise_band() -> None:
    violations = monotonicity_violations([_point(2, 1.0), _point(4, 0.5), _point(8, 0.6)])

    assert len(violations) == 1
    assert violations[0].n_prev == 4
    assert violations[0].band == pytest.approx(2.0 * math.hypot(0.01, 0.01))


def test_small_rise_inside_noise_band_is_not_a_violation() -> None:
    assert monotonicity_violations([_point(2, 1.0), _point(4, 0.5), _point(8, 0.51)]) == []


def test_single_point_sweep_equals_direct_training(tiny_config: TrainConfig) -> None:
    spec = CircleSpec()

    result = sweep_ln(spec, [4], tiny_config, seeds=1, timing=False)
    direct = sae.train(spec, 4, tiny_config.model_copy(update={"seed": run_seed(tiny_config.seed, 4, 0)}))

    assert len(result.rows) == 1
    assert result.rows[0].final_loss == direct.final_loss
    assert result.rows[0].dead_latents == direct.dead_latents
    assert result.best_loss(4) == direct.final_loss
    assert result.fit is None
    assert result.fit_note


def test_sweep_keeps_best_seed_per_point(tiny_config: TrainConfig) -> None:
    result = sweep_ln(CircleSpec(), [1, 2, 4], tiny_config, seeds=2, timing=False)

    assert [row.n for row in result.rows] == [1, 1, 2, 2, 4, 4]
    for point in result.best:
        losses = [row.final_loss for row in result.rows if row.n == point.n]
        assert point.final_loss == min(losses)
    assert result.fit is not None
    assert sweep_csv_rows(result)[0][:2] == (1, result.rows[0].seed)
    assert sweep_csv_rows(result)[0][4] == 0.0


def test_sweep_rejects_unsorted_counts(tiny_config: TrainConfig) -> None:
    with pytest.raises(SweepError):
        sweep_ln(CircleSpec(), [4, 2], tiny_config)


def test_sweep_fails_when_every_seed_diverges(tiny_config: TrainConfig) -> None:
    config = tiny_config.model_copy(update={"learning_rate": 1e200})

    with pytest.raises(SweepError):
        sweep_ln(CircleSpec(), [2], config, seeds=2)


def test_diverged_row_has_no_loss_in_csv() -> None:
    row = SweepRow(n=8, seed=1, seed_index=0, status="diverged", diverged_step=3, config_hash="abc")

    n, seed, loss, dead, wall_ms = row.csv_values()

    assert (n, seed, dead, wall_ms) == (8, 1, "", 0.0)
    assert math.isnan(loss)


def test_sweep_resumes_from_registry(
    tmp_path: Path, tiny_config: TrainConfig, monkeypatch: pytest.MonkeyPatch
) -> None:
    spec = CircleSpec()
    with registry_session(tmp_path) as db:
        first = sweep_ln(spec, [1, 2], tiny_config, seeds=1, timing=False, db=db)

    def _no_training(*args: object, **kwargs: object) -> None:
        raise AssertionError("finished points must not be retrained")

    monkeypatch.setattr(sae, "train", _no_training)
    with registry_session(tmp_path) as db:
        second = sweep_ln(spec, [1, 2], tiny_config, seeds=1, timing=False, db=db)

    assert [row.final_loss for row in second.rows] == [row.final_loss for row in first.rows]
    assert second.sweep_hash == first.sweep_hash


def test_circle_tiling_arcs_are_contiguous(quick_config: TrainConfig) -> None:
    report, result = circle_tiling(4, quick_config)

    assert report.n_latents == 4
    assert report.contiguous_fraction == 1.0
    assert report.final_loss == result.final_loss


def test_circle_tiling_needs_a_latent(quick_config: TrainConfig) -> None:
    with pytest.raises(ExperimentError):
        circle_tiling(0, quick_config)


def test_best_of_seeds_is_the_same_with_worker_processes(tiny_config: TrainConfig) -> None:
    serial_seed, serial = best_of_seeds(CircleSpec(), 3, tiny_config, seeds=2)
    pooled_seed, pooled = best_of_seeds(CircleSpec(), 3, tiny_config, seeds=2, threads=2)

    assert pooled_seed == serial_seed
    assert pooled.final_loss == serial.final_loss
    assert np.array_equal(pooled.model.w_dec, serial.model.w_dec)


def test_hypersphere_slopes_fit_each_dimension(tiny_config: TrainConfig) -> None:
    slopes = hypersphere_slopes([2, 3], [1, 2, 4], tiny_config, seeds=1, fit_window=(1, 4), timing=False)
    direct = sweep_ln(HypersphereSpec(dim=2, seed=tiny_config.seed), [1, 2, 4], tiny_config, seeds=1, timing=False)

    assert [entry.dim for entry in slopes] == [2, 3]
    assert all(entry.fit is not None and entry.fit.points == 3 for entry in slopes)
    assert slopes[0].best == direct.best
    assert slopes[0].fit.slope == direct.fit.slope
    assert slopes[0].csv_values() == (2, direct.fit.slope, direct.fit.intercept, direct.fit.residual_rms, 3)


def test_hypersphere_slope_without_fit_has_nan_row(tiny_config: TrainConfig) -> None:
    (entry,) = hypersphere_slopes([2], [1, 2], tiny_config, seeds=1, timing=False)

    dim, slope, _, _, points = entry.csv_values()
    assert entry.fit is None
    assert entry.fit_note
    assert (dim, points) == (2, 0)
    assert math.isnan(slope)


def test_hypersphere_slopes_need_a_dimension(tiny_config: TrainConfig) -> None:
    with pytest.raises(SweepError):
        hypersphere_slopes([], [1, 2], tiny_config)


def test_zero_latent_additivity_is_pythagorean() -> None:
    spec = composite_spec([CircleSpec(), ShellSpec(dim=2)], [0.2, 0.3])
    config = TrainConfig(eval_samples=2**15, seed=2)

    report = additivity_check(spec, [0, 0], config)

    expected = 0.2 * 1.0 + 0.3 * (0.25 + 1.0 + 4.0) / 3.0
    assert report.predicted_loss == pytest.approx(expected, rel=0.02)
    assert report.joint_loss == pytest.approx(expected, rel=0.05)
    assert report.relative_gap < 0.05


def test_additivity_rejects_plain_manifold(tiny_config: TrainConfig) -> None:
    with pytest.raises(AdditivityError):
        additivity_check(CircleSpec(), [2], tiny_config)


def test_additivity_needs_one_count_per_component(tiny_config: TrainConfig) -> None:
    spec = composite_spec([CircleSpec(), CircleSpec()], [0.2, 0.2])

    with pytest.raises(AdditivityError):
        additivity_check(spec, [2], tiny_config)


@pytest.mark.slow
def test_circle_tiling_sparsifies_with_more_latents() -> None:
    config = TrainConfig(seed=0)

    reports = [circle_tiling(n, config, seeds=3, threads=3)[0] for n in (4, 8, 24)]

    best = [
        BestPoint(n=r.n_latents, seed=r.seed, final_loss=r.final_loss, loss_stderr=r.loss_stderr, dead_latents=0)
        for r in reports
    ]
    assert monotonicity_violations(best) == []
    assert all(report.contiguous_fraction == 1.0 for report in reports)
    assert reports[-1].mean_arc_width < reports[0].mean_arc_width


@pytest.mark.slow
def test_orthogonal_circles_are_additive() -> None:
    spec = composite_spec([CircleSpec(), CircleSpec()], [0.2, 0.2], seed=1)

    report = additivity_check(spec, [8, 8], TrainConfig(seed=0))

    assert report.relative_gap < 0.10


@pytest.mark.slow
def test_overcomplete_circle_decoder_tiles_evenly() -> None:
    config = TrainConfig(seed=0)
    _, result = circle_tiling(64, config)
    counts = sae.latent_activation_counts(result.model, CircleSpec(), config)

    report = decoder_geometry(result.model.w_dec, counts)
    comparison = compare_to_random_baseline(report)

    # Evenly tiled neighbors sit 2*pi/live apart on the circle.
    assert report.median_similarity >= math.cos(4.0 * math.pi / report.live_latents)
    assert comparison.resamples == 100
    assert comparison.baseline_median > 0.99


@pytest.mark.slow
@pytest.mark.parametrize("dim", [6, 8])
def test_hypersphere_loss_decays_slowly(dim: int) -> None:
    result = sweep_ln(
        HypersphereSpec(dim=dim),
        parse_grid("2:1024:log"),
        TrainConfig(seed=0),
        seeds=3,
        threads=8,
        fit_window=(100, 1000),
    )

    assert result.fit is not None
    assert -0.15 <= result.fit.slope <= -0.01


@pytest.mark.slow
def test_shell_loss_plateaus_past_four_latents_per_dimension() -> None:
    result = sweep_ln(ShellSpec(dim=8), [32, 128], TrainConfig(seed=0), seeds=3, threads=8)

    assert result.best_loss(32) == pytest.approx(result.best_loss(128), rel=0.05)
