from collections.abc import Sequence
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from app.schemas.allocation import ScalingRow  # noqa: E402
from app.schemas.experiment import ArcReport, DimensionSlope, GeometryReport, SweepResult  # noqa: E402

logger = logging.getLogger(__name__)

# Stable element ids so the same data renders to the same bytes.
plt.rcParams["svg.hashsalt"] = "sae-lab"
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["figure.figsize"] = (6.0, 4.0)
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def sweep_figure(result: SweepResult) -> Figure:
    figure, axes = plt.subplots()
    ok_rows = [row for row in result.rows if row.status == "ok" and row.n > 0]
    axes.scatter(
        [row.n for row in ok_rows],
        [row.final_loss for row in ok_rows],
        s=10,
        color="0.6",
        label="all seeds",
    )
    best = [point for point in result.best if point.n > 0]
    axes.plot([p.n for p in best], [p.final_loss for p in best], "o-", color="C0", label="best of seeds")
    if result.fit is not None:
        lo, hi = result.fit.window
        xs = np.geomspace(lo, hi, 50)
        axes.plot(
            xs,
            np.exp(result.fit.intercept) * xs**result.fit.slope,
            "--",
            color="C3",
            label=f"fit slope {result.fit.slope:.3f}",
        )
    axes.set_xscale("log")
    axes.set_yscale("log")
    axes.set_xlabel("latents n")
    axes.set_ylabel("final loss L(n)")
    axes.set_title(f"{result.spec.kind} L(n)")
    axes.legend()
    figure.tight_layout()
    return figure


def slopes_figure(slopes: Sequence[DimensionSlope]) -> Figure:
    figure, (curve_axes, slope_axes) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    for position, entry in enumerate(slopes):
        best = [point for point in entry.best if point.n > 0]
        curve_axes.plot(
            [p.n for p in best],
            [p.final_loss for p in best],
            "o-",
            markersize=3,
            color=f"C{position % 10}",
            label=f"d={entry.dim}",
        )
    curve_axes.set_xscale("log")
    curve_axes.set_yscale("log")
    curve_axes.set_xlabel("latents n")
    curve_axes.set_ylabel("best final loss")
    curve_axes.legend()

    fitted = [entry for entry in slopes if entry.fit is not None]
    slope_axes.plot([e.dim for e in fitted], [-e.fit.slope for e in fitted], "o-", color="C0")
    slope_axes.set_xlabel("hypersphere dimension d")
    slope_axes.set_ylabel("measured beta (negated slope)")
    figure.tight_layout()
    return figure


def scaling_figure(rows: Sequence[ScalingRow]) -> Figure:
    rows = [row for row in rows if row.total_latents > 0]
    budgets = np.array([row.total_latents for row in rows], dtype=np.float64)
    figure, (loss_axes, discovery_axes, share_axes) = plt.subplots(1, 3, figsize=(12.0, 3.6))

    loss_axes.loglog(budgets, [row.expected_loss for row in rows], "o-", markersize=3)
    loss_axes.set_xlabel("total latents N")
    loss_axes.set_ylabel("expected loss")

    discovery_axes.semilogx(budgets, np.array([row.discovered for row in rows]) / budgets, "o-", markersize=3)
    discovery_axes.set_xlabel("total latents N")
    discovery_axes.set_ylabel("D(N) / N")

    share_axes.semilogx(budgets, [row.frac_latents_feature_1 for row in rows], "o-", markersize=3)
    share_axes.set_xlabel("total latents N")
    share_axes.set_ylabel("share of latents on feature 1")
    figure.tight_layout()
    return figure


def tiling_figure(report: ArcReport) -> Figure:
    figure, axes = plt.subplots(figsize=(5.0, 5.0))
    angles = np.linspace(0.0, 2.0 * np.pi, 361)
    axes.plot(np.cos(angles), np.sin(angles), color="0.8", linewidth=1.0)

    trace = np.array(report.reconstruction)
    axes.plot(trace[:, 0], trace[:, 1], color="k", linewidth=1.0, label="reconstruction")

    colors = plt.get_cmap("tab20")
    step = 2.0 * np.pi / report.grid_size
    for arc in report.arcs:
        if arc.kind == "empty":
            continue
        color = colors(arc.latent % 20)
        radius = 1.08 + 0.02 * (arc.latent % 5)
        if arc.kind == "full":
            span = angles
        else:
            stop = arc.end if arc.end >= arc.start else arc.end + 2.0 * np.pi
            span = np.arange(arc.start, stop + step / 2, step)
        axes.plot(radius * np.cos(span), radius * np.sin(span), color=color, linewidth=3.0)
        dx, dy = report.decoder_directions[arc.latent]
        axes.annotate("", xy=(dx, dy), xytext=(0.0, 0.0), arrowprops={"arrowstyle": "->", "color": color})

    axes.set_aspect("equal")
    axes.set_xlim(-1.35, 1.35)
    axes.set_ylim(-1.35, 1.35)
    axes.set_title(f"{report.n_latents} latents, loss {report.final_loss:.4f}")
    figure.tight_layout()
    return figure


def geometry_figure(report: GeometryReport) -> Figure:
    figure, axes = plt.subplots()
    edges = np.array(report.histogram_edges)
    axes.bar(edges[:-1], report.histogram_counts, width=np.diff(edges), align="edge", color="C0")
    axes.axvline(report.threshold, color="C3", linestyle="--", label=f"{report.threshold:g}")
    axes.set_xlabel("nearest-neighbor cosine similarity")
    axes.set_ylabel("latents")
    axes.set_title(f"{report.live_latents} live latents, {report.pairs_above} pairs above threshold")
    axes.legend()
    figure.tight_layout()
    return figure


def close(figure: Figure) -> None:
    plt.close(figure)
