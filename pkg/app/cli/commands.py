import argparse
from collections.abc import Callable
from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path

import numpy as np

from app.clients.artifacts import ArtifactFormatError, ArtifactNotFoundError, read_array, read_arrays
from app.core.db import registry_session
from app.schemas.allocation import PowerLawCurve, ScalingRow, StepCurve
from app.schemas.cli import (
    AdditivityRequest,
    AllocateRequest,
    CommonOptions,
    FitRequest,
    GeometryRequest,
    PredictRequest,
    SimulateRequest,
    SlopesRequest,
    SweepRequest,
    TileRequest,
)
from app.schemas.experiment import SLOPES_CSV_HEADER, SWEEP_CSV_HEADER, BestPoint
from app.schemas.manifold import CircleSpec, HypersphereSpec, ShellSpec
from app.schemas.theory import RegimeTolerances
from app.services import experiments, figures
from app.services.allocation import (
    AllocationError,
    continuous_allocate,
    exchange_violation,
    greedy_allocate,
    manifold_plus_discrete_ensemble,
    scaling_table_csv,
    scaling_trends,
    simulate_scaling,
    zipf_ensemble,
)
from app.services.manifolds import composite_spec
from app.services.runs import RunContext
from app.services.sae import save_checkpoint
from app.services.theory import fit_power_law, format_regime_table, predict, verify_regime

logger = logging.getLogger(__name__)

EXCHANGE_TOLERANCE = 1e-12
ALLOCATION_CSV_HEADER = ("feature", "frequency", "count")


@dataclass(frozen=True)
class Command:
    name: str
    request: type[CommonOptions]
    handler: Callable[[CommonOptions, RunContext], str]
    help: str


def _write_figure(context: RunContext, name: str, figure) -> None:
    try:
        context.store.write_svg(name, figure)
    finally:
        figures.close(figure)


def _scaling_outputs(context: RunContext, request: CommonOptions, rows: list[ScalingRow]) -> None:
    if request.format == "json":
        context.store.write_json("scaling.json", [row.model_dump(mode="json") for row in rows])
    else:
        context.store.write_text("scaling.csv", scaling_table_csv(rows))
    if request.svg and len(rows) > 1:
        _write_figure(context, "scaling.svg", figures.scaling_figure(rows))


def run_allocate(request: AllocateRequest, context: RunContext) -> str:
    curve = StepCurve() if request.curve == "step" else PowerLawCurve(beta=request.beta, floor=request.floor)
    ensemble = zipf_ensemble(request.alpha, request.features, curve)
    budgets = request.budget_grid()

    if request.solver == "greedy":
        rows = simulate_scaling(ensemble, budgets, request.flagged)
        allocation = greedy_allocate(ensemble, budgets[-1])
    else:
        rows = []
        for budget in budgets:
            allocation = continuous_allocate(ensemble, budget)
            rows.append(
                ScalingRow(
                    total_latents=budget,
                    expected_loss=allocation.expected_loss,
                    discovered=allocation.discovered,
                    frac_latents_feature_1=float(allocation.counts[0]) / budget if budget else 0.0,
                    flagged_counts={rank: int(allocation.counts[rank - 1]) for rank in request.flagged},
                )
            )
    _scaling_outputs(context, request, rows)

    nonzero = np.flatnonzero(allocation.counts)
    counts = allocation.counts[nonzero].tolist()
    freqs = ensemble.frequencies[nonzero].tolist()
    if request.format == "json":
        context.store.write_json(
            "allocation.json",
            {
                "solver": allocation.solver,
                "total_latents": allocation.total_latents,
                "expected_loss": allocation.expected_loss,
                "discovered": allocation.discovered,
                "features": [
                    {"feature": int(i) + 1, "frequency": f, "count": c} for i, f, c in zip(nonzero, freqs, counts)
                ],
            },
        )
    else:
        context.store.write_csv(
            "allocation.csv",
            ALLOCATION_CSV_HEADER,
            [(int(i) + 1, f, c) for i, f, c in zip(nonzero, freqs, counts)],
        )

    lines = [
        f"budget={budgets[-1]}",
        f"discovered={allocation.discovered}",
        f"expected_loss={allocation.expected_loss!r}",
    ]
    if request.verify and request.solver == "greedy":
        violation = exchange_violation(ensemble, allocation)
        lines.append(f"exchange_violation={violation!r}")
        if violation > EXCHANGE_TOLERANCE * max(allocation.expected_loss, 1.0):
            raise AllocationError(f"allocation is not exchange-stable: moving one latent gains {violation!r}")
    return "\n".join(lines)


def run_simulate(request: SimulateRequest, context: RunContext) -> str:
    ensemble = manifold_plus_discrete_ensemble(request.alpha, request.features, request.beta)
    rows = simulate_scaling(ensemble, request.budgets, request.flagged)
    _scaling_outputs(context, request, rows)
    trends = scaling_trends(rows)
    context.store.write_json("trends.json", trends.model_dump(mode="json"))
    last = rows[-1]
    return "\n".join(
        [
            f"budget={last.total_latents}",
            f"discovered={last.discovered}",
            f"frac_latents_feature_1={last.frac_latents_feature_1:.6f}",
            f"discovery_ratio_decreasing={trends.discovery_ratio_decreasing}",
            f"feature_1_share_increasing={trends.feature_1_share_increasing}",
        ]
    )


def run_predict(request: PredictRequest, context: RunContext) -> str:
    prediction = predict(request.alpha, request.beta)
    context.store.write_json("prediction.json", prediction.model_dump(mode="json"))
    return "\n".join(
        [
            f"regime={prediction.regime}",
            f"gamma={prediction.gamma:.4f}",
            f"loss_exponent={prediction.loss_exponent:.4f}",
            f"discovery_exponent={prediction.discovery_exponent:.4f}",
        ]
    )


def _read_columns(path: Path) -> np.ndarray:
    if not path.exists():
        raise ArtifactNotFoundError(f"input file {path} does not exist")
    table = np.genfromtxt(path, delimiter=",", names=True, dtype=np.float64)
    if table.dtype.names is None:
        raise ArtifactFormatError(f"{path} has no header row")
    return np.atleast_1d(table)


def _column(table: np.ndarray, path: Path, name: str) -> np.ndarray:
    if name not in table.dtype.names:
        raise ArtifactFormatError(f"{path} has no column {name!r}; columns are {', '.join(table.dtype.names)}")
    return table[name]


def run_fit(request: FitRequest, context: RunContext) -> str:
    table = _read_columns(request.input)
    if request.alpha is not None:
        rows = [
            ScalingRow(
                total_latents=int(n),
                expected_loss=float(loss),
                discovered=int(found),
                frac_latents_feature_1=0.0,
            )
            for n, loss, found in zip(
                _column(table, request.input, "N"),
                _column(table, request.input, "expected_loss"),
                _column(table, request.input, "discovered"),
            )
        ]
        report = verify_regime(
            rows,
            predict(request.alpha, request.beta),
            RegimeTolerances(
                loss_exponent=request.loss_tolerance,
                discovery_exponent=request.discovery_tolerance,
            ),
            request.window,
        )
        context.store.write_json("regime.json", report.model_dump(mode="json") | {"passed": report.passed})
        return format_regime_table(report) + f"\npassed={report.passed}"

    xs = _column(table, request.input, request.x)
    ys = _column(table, request.input, request.y)
    fit = fit_power_law(zip(xs.tolist(), ys.tolist()), request.window)
    context.store.write_json("fit.json", fit.model_dump(mode="json"))
    return f"slope={fit.slope!r}\nintercept={fit.intercept!r}\npoints={fit.points}"


def _single_spec(request: SweepRequest) -> CircleSpec | HypersphereSpec | ShellSpec:
    if request.manifold == "circle":
        return CircleSpec(seed=request.seed)
    if request.manifold == "shell":
        return ShellSpec(dim=request.dim, r_min=request.r_min, r_max=request.r_max, seed=request.seed)
    return HypersphereSpec(dim=request.dim, seed=request.seed)


def run_sweep(request: SweepRequest, context: RunContext) -> str:
    spec = _single_spec(request)
    with registry_session(context.run_dir) as db:
        result = experiments.sweep_ln(
            spec,
            request.latents,
            request.train_config(),
            request.seeds,
            threads=request.threads,
            fit_window=request.window,
            timing=request.timing,
            db=db,
        )
    if request.format == "json":
        context.store.write_json("sweep.json", result.model_dump(mode="json"))
    else:
        context.store.write_csv("sweep.csv", SWEEP_CSV_HEADER, experiments.sweep_csv_rows(result))
        context.store.write_json(
            "summary.json",
            result.model_dump(mode="json", include={"sweep_hash", "best", "fit", "fit_note", "violations"}),
        )
    if request.svg:
        _write_figure(context, "sweep.svg", figures.sweep_figure(result))

    lines = [f"points={len(result.rows)}", f"violations={len(result.violations)}"]
    if result.fit is not None:
        lines.append(f"slope={result.fit.slope!r}")
    else:
        lines.append(f"slope=none ({result.fit_note})")
    return "\n".join(lines)


def run_slopes(request: SlopesRequest, context: RunContext) -> str:
    with registry_session(context.run_dir) as db:
        slopes = experiments.hypersphere_slopes(
            request.dims,
            request.latents,
            request.train_config(),
            request.seeds,
            threads=request.threads,
            fit_window=request.window,
            timing=request.timing,
            db=db,
        )
    if request.format == "json":
        context.store.write_json("slopes.json", [entry.model_dump(mode="json") for entry in slopes])
    else:
        context.store.write_csv("slopes.csv", SLOPES_CSV_HEADER, [entry.csv_values() for entry in slopes])
        for entry in slopes:
            context.store.write_csv(
                f"sweep_d{entry.dim}.csv",
                SWEEP_CSV_HEADER,
                [row.csv_values() for row in entry.rows],
            )
    if request.svg:
        _write_figure(context, "slopes.svg", figures.slopes_figure(slopes))
    return "\n".join(
        f"dim={entry.dim} slope={entry.fit.slope!r}" if entry.fit is not None else f"dim={entry.dim} slope=none"
        for entry in slopes
    )


def run_tile(request: TileRequest, context: RunContext) -> str:
    config = request.train_config()
    reports = []
    for n in request.latents:
        report, result = experiments.circle_tiling(n, config, request.seeds, request.threads)
        reports.append(report)
        context.store.write_json(f"arcs_n{n}.json", report.model_dump(mode="json"))
        context.store.write_csv(
            f"history_n{n}.csv",
            ("step", "total", "recon", "sparsity"),
            [(row.step, row.total, row.recon, row.sparsity) for row in result.history],
        )
        save_checkpoint(
            context.store,
            f"model_n{n}",
            result.model,
            {"config_hash": result.config_hash, "seed": report.seed},
        )
        if request.svg:
            _write_figure(context, f"tiling_n{n}.svg", figures.tiling_figure(report))

    header = ("n", "seed", "final_loss", "loss_stderr", "live_latents", "contiguous_fraction", "mean_arc_width")
    table = [
        (r.n_latents, r.seed, r.final_loss, r.loss_stderr, r.live_latents, r.contiguous_fraction, r.mean_arc_width)
        for r in reports
    ]
    violations = experiments.monotonicity_violations(
        [
            BestPoint(n=r.n_latents, seed=r.seed, final_loss=r.final_loss, loss_stderr=r.loss_stderr, dead_latents=0)
            for r in reports
        ]
    )
    if request.format == "json":
        context.store.write_json("tiling.json", [dict(zip(header, row)) for row in table])
    else:
        context.store.write_csv("tiling.csv", header, table)
    context.store.write_json("violations.json", [v.model_dump(mode="json") for v in violations])
    return "\n".join(
        [f"n={r.n_latents} loss={r.final_loss:.6f} mean_arc_width={r.mean_arc_width:.4f}" for r in reports]
        + [f"violations={len(violations)}"]
    )


def run_additivity(request: AdditivityRequest, context: RunContext) -> str:
    leaves = []
    for kind in request.components:
        if kind == "circle":
            leaves.append(CircleSpec())
        elif kind == "shell":
            leaves.append(ShellSpec(dim=request.dim))
        else:
            leaves.append(HypersphereSpec(dim=request.dim))
    spec = composite_spec(leaves, request.frequencies, seed=request.seed)
    report = experiments.additivity_check(
        spec,
        request.latents,
        request.train_config(),
        request.seeds,
        request.threads,
    )
    if request.format == "json":
        context.store.write_json("additivity.json", report.model_dump(mode="json"))
    else:
        rows = [
            (str(position + 1), feature.frequency, feature.n_latents, feature.loss, feature.loss_stderr)
            for position, feature in enumerate(report.features)
        ]
        rows.append(("joint", 1.0, sum(report.latents), report.joint_loss, report.joint_stderr))
        context.store.write_csv("additivity.csv", ("component", "frequency", "n_latents", "loss", "loss_stderr"), rows)
    return (
        f"joint_loss={report.joint_loss!r}\n"
        f"predicted_loss={report.predicted_loss!r}\n"
        f"relative_gap={report.relative_gap:.4f}"
    )


def _load_decoder(path: Path) -> np.ndarray:
    arrays, meta = read_arrays(path)
    if meta.get("kind") == "sae_checkpoint":
        return arrays["w_dec"]
    matrix, _ = read_array(path)
    if matrix.ndim != 2:
        raise ArtifactFormatError(f"{path} holds a {matrix.ndim}-d array; expected a (d, N) decoder matrix")
    return matrix


def run_geometry(request: GeometryRequest, context: RunContext) -> str:
    w_dec = _load_decoder(request.weights)
    report = experiments.decoder_geometry(
        w_dec,
        absolute=request.absolute,
        threshold=request.threshold,
        bins=request.bins,
    )
    if request.format == "json":
        context.store.write_json("geometry.json", report.model_dump(mode="json"))
    else:
        context.store.write_csv(
            "geometry.csv",
            ("latent", "nn_similarity", "nn_index", "dead"),
            [
                (j, "" if sim is None else sim, "" if idx is None else idx, int(dead))
                for j, (sim, idx, dead) in enumerate(zip(report.nn_similarity, report.nn_index, report.dead))
            ],
        )
        context.store.write_json(
            "geometry_summary.json",
            report.model_dump(mode="json", exclude={"nn_similarity", "nn_index", "dead"}),
        )
    lines = [
        f"live_latents={report.live_latents}",
        f"median_similarity={report.median_similarity:.6f}",
        f"pairs_above={report.pairs_above}",
    ]
    lines += [f"pair={p.first},{p.second} similarity={p.similarity:.6f}" for p in report.high_pairs[:10]]
    if request.baseline_resamples:
        comparison = experiments.compare_to_random_baseline(report, request.baseline_resamples, request.seed)
        context.store.write_json("baseline.json", comparison.model_dump(mode="json"))
        lines.append(f"baseline_median={comparison.baseline_median:.6f}")
    if request.svg:
        _write_figure(context, "geometry.svg", figures.geometry_figure(report))
    return "\n".join(lines)


COMMANDS: dict[str, Command] = {
    command.name: command
    for command in (
        Command("allocate", AllocateRequest, run_allocate, "optimal latent allocation over a Zipf ensemble"),
        Command("simulate", SimulateRequest, run_simulate, "one power-law manifold plus discrete features"),
        Command("predict", PredictRequest, run_predict, "regime and exponents for (alpha, beta)"),
        Command("fit", FitRequest, run_fit, "power-law fit of a CSV table"),
        Command("sweep", SweepRequest, run_sweep, "L(n) sweep of SAEs on one manifold"),
        Command("slopes", SlopesRequest, run_slopes, "L(n) slope of unit hyperspheres across dimensions"),
        Command("tile", TileRequest, run_tile, "circle tiling arcs"),
        Command("additivity", AdditivityRequest, run_additivity, "joint vs per-feature SAE loss"),
        Command("geometry", GeometryRequest, run_geometry, "decoder nearest-neighbor cosine similarity"),
    )
}


def _float_or_inf(text: str) -> float:
    return math.inf if text.strip().lower() in {"inf", "infinity", "step"} else float(text)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    parser.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", type=Path)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--format", choices=["csv", "json"])
    parser.add_argument("--svg", action="store_true", default=argparse.SUPPRESS)
    parser.add_argument("--no-timing", dest="timing", action="store_false", default=argparse.SUPPRESS)


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--nonlinearity", choices=["relu", "jumprelu"])
    parser.add_argument("--sparsity", choices=["l1", "tanh"])
    parser.add_argument("--l1-coefficient", type=float)
    parser.add_argument("--tanh-c", type=float)
    parser.add_argument("--tanh-coefficient", type=float)
    parser.add_argument("--eval-samples", type=int)
    parser.add_argument("--dead-latent-samples", type=int)
    parser.add_argument("--seeds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sae-lab", description="Latent allocation and SAE scaling experiments.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    allocate = subparsers.add_parser("allocate", help=COMMANDS["allocate"].help, argument_default=argparse.SUPPRESS)
    allocate.add_argument("--alpha", type=float)
    allocate.add_argument("--features", type=int)
    allocate.add_argument("--curve", choices=["step", "power_law"])
    allocate.add_argument("--beta", type=float)
    allocate.add_argument("--floor", type=float)
    allocate.add_argument("--budget", type=int)
    allocate.add_argument("--budgets", help="grid such as 10:1e5:log4 or 10,100,1000")
    allocate.add_argument("--solver", choices=["greedy", "continuous"])
    allocate.add_argument("--flagged", help="1-based feature ranks to report, e.g. 1,2")
    allocate.add_argument("--verify", action="store_true")

    simulate = subparsers.add_parser("simulate", help=COMMANDS["simulate"].help, argument_default=argparse.SUPPRESS)
    simulate.add_argument("--alpha", type=float)
    simulate.add_argument("--beta", type=float)
    simulate.add_argument("--features", type=int)
    simulate.add_argument("--budgets")
    simulate.add_argument("--flagged")

    predict_parser = subparsers.add_parser("predict", help=COMMANDS["predict"].help, argument_default=argparse.SUPPRESS)
    predict_parser.add_argument("--alpha", type=float)
    predict_parser.add_argument("--beta", type=_float_or_inf)

    fit = subparsers.add_parser("fit", help=COMMANDS["fit"].help, argument_default=argparse.SUPPRESS)
    fit.add_argument("--input", type=Path)
    fit.add_argument("--x")
    fit.add_argument("--y")
    fit.add_argument("--window", help="lo:hi")
    fit.add_argument("--alpha", type=float)
    fit.add_argument("--beta", type=_float_or_inf)
    fit.add_argument("--loss-tolerance", type=float)
    fit.add_argument("--discovery-tolerance", type=float)

    sweep = subparsers.add_parser("sweep", help=COMMANDS["sweep"].help, argument_default=argparse.SUPPRESS)
    sweep.add_argument("--manifold", choices=["circle", "sphere", "hypersphere", "shell"])
    sweep.add_argument("--dim", type=int)
    sweep.add_argument("--r-min", type=float)
    sweep.add_argument("--r-max", type=float)
    sweep.add_argument("--latents", help="grid such as 2:1024:log")
    sweep.add_argument("--window", help="lo:hi")
    sweep.add_argument("--resume", type=Path, help="existing run directory to continue")
    _add_training(sweep)

    slopes = subparsers.add_parser("slopes", help=COMMANDS["slopes"].help, argument_default=argparse.SUPPRESS)
    slopes.add_argument("--dims", help="e.g. 2:8:lin or 6,8")
    slopes.add_argument("--latents", help="grid such as 2:1024:log")
    slopes.add_argument("--window", help="lo:hi")
    slopes.add_argument("--resume", type=Path, help="existing run directory to continue")
    _add_training(slopes)

    tile = subparsers.add_parser("tile", help=COMMANDS["tile"].help, argument_default=argparse.SUPPRESS)
    tile.add_argument("--latents", help="e.g. 4,8,24")
    _add_training(tile)

    additivity = subparsers.add_parser(
        "additivity",
        help=COMMANDS["additivity"].help,
        argument_default=argparse.SUPPRESS,
    )
    additivity.add_argument("--components", help="e.g. circle,circle")
    additivity.add_argument("--dim", type=int)
    additivity.add_argument("--frequencies", help="e.g. 0.2,0.2")
    additivity.add_argument("--latents", help="latents per component, e.g. 8,8")
    _add_training(additivity)

    geometry = subparsers.add_parser("geometry", help=COMMANDS["geometry"].help, argument_default=argparse.SUPPRESS)
    geometry.add_argument("--weights", type=Path, help="checkpoint or decoder matrix (.bin with .json sidecar)")
    geometry.add_argument("--absolute", action="store_true")
    geometry.add_argument("--threshold", type=float)
    geometry.add_argument("--bins", type=int)
    geometry.add_argument("--baseline-resamples", type=int)

    for subparser in subparsers.choices.values():
        _add_common(subparser)
    return parser


def request_flags(args: argparse.Namespace) -> dict:
    return {key: value for key, value in vars(args).items() if key not in {"command", "config", "dry_run"}}


def dry_run_text(request: CommonOptions) -> str:
    return json.dumps(request.model_dump(mode="json"), indent=2, sort_keys=True)
