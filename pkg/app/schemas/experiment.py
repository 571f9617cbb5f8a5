import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, computed_field

from app.schemas.manifold import CompositeSpec, ManifoldSpec
from app.schemas.sae import TrainConfig
from app.schemas.theory import PowerLawFit

SWEEP_CSV_HEADER = ("n", "seed", "final_loss", "dead_latents", "wall_ms")


class SweepRow(BaseModel):
    """One (n, seed) training run. Diverged runs keep their row but carry no loss."""

    n: int = Field(ge=0)
    seed: int
    seed_index: int = Field(ge=0)
    status: Literal["ok", "diverged"]
    final_loss: float | None = None
    loss_stderr: float | None = None
    dead_latents: int | None = None
    diverged_step: int | None = None
    wall_ms: float = 0.0
    config_hash: str

    def csv_values(self) -> tuple:
        loss = self.final_loss if self.final_loss is not None else math.nan
        dead = self.dead_latents if self.dead_latents is not None else ""
        return (self.n, self.seed, loss, dead, self.wall_ms)


class BestPoint(BaseModel):
    n: int
    seed: int
    final_loss: float
    loss_stderr: float
    dead_latents: int


class MonotonicityViolation(BaseModel):
    """Best loss rose from `n_prev` to `n` by more than the noise band."""

    n_prev: int
    n: int
    loss_prev: float
    loss: float
    band: float


class SweepResult(BaseModel):
    spec: ManifoldSpec
    train: TrainConfig
    latent_counts: list[int]
    seeds: int
    sweep_hash: str
    rows: list[SweepRow]
    best: list[BestPoint]
    fit: PowerLawFit | None = None
    fit_note: str | None = None
    violations: list[MonotonicityViolation] = []

    def best_loss(self, n: int) -> float:
        for point in self.best:
            if point.n == n:
                return point.final_loss
        raise KeyError(n)


SLOPES_CSV_HEADER = ("dim", "slope", "intercept", "residual_rms", "points")


class DimensionSlope(BaseModel):
    """Fitted L(n) slope of one hypersphere dimension."""

    dim: int
    sweep_hash: str
    rows: list[SweepRow]
    best: list[BestPoint]
    fit: PowerLawFit | None = None
    fit_note: str | None = None

    def csv_values(self) -> tuple:
        if self.fit is None:
            return (self.dim, math.nan, math.nan, math.nan, 0)
        return (self.dim, self.fit.slope, self.fit.intercept, self.fit.residual_rms, self.fit.points)


class LatentArc(BaseModel):
    """Where one latent fires on the evaluation grid; angles in radians in [0, 2*pi)."""

    latent: int
    kind: Literal["empty", "full", "arc"]
    start: float | None = None
    end: float | None = None
    width: float = 0.0
    runs: int = 0
    contiguous: bool = True


class ArcReport(BaseModel):
    n_latents: int
    seed: int
    final_loss: float
    loss_stderr: float
    grid_size: int
    arcs: list[LatentArc]
    decoder_directions: list[tuple[float, float]]
    reconstruction: list[tuple[float, float]]

    @computed_field
    @property
    def live_latents(self) -> int:
        return sum(1 for arc in self.arcs if arc.kind != "empty")

    @computed_field
    @property
    def contiguous_fraction(self) -> float:
        live = [arc for arc in self.arcs if arc.kind != "empty"]
        if not live:
            return 1.0
        return sum(1 for arc in live if arc.contiguous) / len(live)

    @computed_field
    @property
    def mean_arc_width(self) -> float:
        widths = [arc.width for arc in self.arcs if arc.kind != "empty"]
        return sum(widths) / len(widths) if widths else 0.0


class FeatureLoss(BaseModel):
    frequency: float
    n_latents: int
    loss: float
    loss_stderr: float


class AdditivityReport(BaseModel):
    spec: CompositeSpec
    latents: list[int]
    joint_loss: float
    joint_stderr: float
    features: list[FeatureLoss]
    predicted_loss: float
    relative_gap: float


class SimilarPair(BaseModel):
    first: int
    second: int
    similarity: float


class GeometryReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_latents: int
    input_dim: int
    absolute: bool = False
    nn_similarity: list[float | None]
    nn_index: list[int | None]
    dead: list[bool]
    histogram_edges: list[float]
    histogram_counts: list[int]
    threshold: float
    pairs_above: int
    latents_above: int
    high_pairs: list[SimilarPair]

    @computed_field
    @property
    def live_latents(self) -> int:
        return sum(1 for flag in self.dead if not flag)

    @computed_field
    @property
    def median_similarity(self) -> float:
        values = sorted(value for value in self.nn_similarity if value is not None)
        middle = len(values) // 2
        if len(values) % 2:
            return values[middle]
        return 0.5 * (values[middle - 1] + values[middle])


class BaselineComparison(BaseModel):
    median_similarity: float
    baseline_median: float
    resamples: int
    above_baseline: bool
