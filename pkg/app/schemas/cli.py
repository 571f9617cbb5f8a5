import math
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.settings import settings
from app.schemas.sae import L1Sparsity, SparsityConfig, TanhSparsity, TrainConfig
from app.utils.grids import GridParseError, parse_grid


def _grid(value: str | list[int]) -> list[int]:
    if isinstance(value, list):
        return sorted(set(int(v) for v in value))
    try:
        return parse_grid(str(value))
    except GridParseError as exc:
        raise ValueError(str(exc)) from exc


def _floats(value: str | list[float]) -> list[float]:
    if isinstance(value, list):
        return [float(v) for v in value]
    return [float(part) for part in str(value).split(",") if part.strip()]


def _window(value: str | list[float] | None) -> tuple[float, float] | None:
    if value is None:
        return None
    bounds = _floats(value.replace(":", ",")) if isinstance(value, str) else _floats(list(value))
    if len(bounds) != 2 or not 0 < bounds[0] < bounds[1]:
        raise ValueError(f"window must be lo:hi with 0 < lo < hi, got {value!r}")
    return (bounds[0], bounds[1])


def _beta(value: str | float | None) -> float | None:
    if isinstance(value, str) and value.strip().lower() in {"inf", "infinity", "step"}:
        return math.inf
    return value


class CommonOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: settings.seed)
    out_dir: Path = Field(default_factory=lambda: settings.out_dir)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    format: Literal["csv", "json"] = "csv"
    svg: bool = False
    timing: bool = True


class TrainingOptions(CommonOptions):
    """Training hyperparameters shared by every SAE subcommand."""

    steps: int = Field(default=12000, ge=0)
    batch_size: int = Field(default=2048, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    nonlinearity: Literal["relu", "jumprelu"] = "relu"
    sparsity: Literal["l1", "tanh"] = "l1"
    l1_coefficient: float = Field(default=0.1, ge=0.0)
    tanh_c: float = Field(default=0.1, gt=0.0)
    tanh_coefficient: float = Field(default=1.0, ge=0.0)
    eval_samples: int = Field(default=2**15, gt=1)
    dead_latent_samples: int = Field(default=2**16, gt=0)

    def sparsity_config(self) -> SparsityConfig:
        if self.sparsity == "tanh":
            return TanhSparsity(c=self.tanh_c, coefficient=self.tanh_coefficient)
        return L1Sparsity(coefficient=self.l1_coefficient)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            nonlinearity=self.nonlinearity,
            sparsity=self.sparsity_config(),
            seed=self.seed,
            eval_samples=self.eval_samples,
            dead_latent_samples=self.dead_latent_samples,
        )


class AllocateRequest(CommonOptions):
    alpha: float = Field(gt=0.0)
    features: int = Field(ge=1)
    curve: Literal["step", "power_law"] = "step"
    beta: float | None = Field(default=None, gt=0.0)
    floor: float = Field(default=0.0, ge=0.0, lt=1.0)
    budget: int | None = Field(default=None, ge=0)
    budgets: list[int] | None = None
    solver: Literal["greedy", "continuous"] = "greedy"
    flagged: list[int] = [1]
    verify: bool = False

    @field_validator("budgets", "flagged", mode="before")
    @classmethod
    def _parse_grids(cls, value: str | list[int] | None) -> list[int] | None:
        return None if value is None else _grid(value)

    @model_validator(mode="after")
    def _check(self) -> "AllocateRequest":
        if self.curve == "power_law" and self.beta is None:
            raise ValueError("beta is required for the power_law curve")
        if self.budget is None and self.budgets is None:
            raise ValueError("give a budget or a budgets grid")
        if self.budget is not None and self.budgets is not None:
            raise ValueError("budget and budgets are mutually exclusive")
        if self.solver == "continuous" and self.curve != "power_law":
            raise ValueError("the continuous solver needs the power_law curve")
        return self

    def budget_grid(self) -> list[int]:
        return [self.budget] if self.budget is not None else list(self.budgets)


class SimulateRequest(CommonOptions):
    """One power-law manifold as the most frequent feature, discrete features after it."""

    alpha: float = Field(default=0.5, gt=0.0)
    beta: float = Field(default=0.05, gt=0.0)
    features: int = Field(default=10_000_000, ge=2)
    budgets: list[int] = Field(default_factory=lambda: parse_grid("10:1000000:log4"))
    flagged: list[int] = [1]

    @field_validator("budgets", "flagged", mode="before")
    @classmethod
    def _parse_grids(cls, value: str | list[int]) -> list[int]:
        return _grid(value)


class PredictRequest(CommonOptions):
    alpha: float = Field(gt=0.0)
    beta: float = Field(gt=0.0)

    @field_validator("beta", mode="before")
    @classmethod
    def _parse_beta(cls, value: str | float) -> float:
        return _beta(value)


class FitRequest(CommonOptions):
    """Power-law fit of two columns of a CSV file, optionally checked against a regime prediction."""

    input: Path
    x: str = "N"
    y: str = "expected_loss"
    window: tuple[float, float] | None = None
    alpha: float | None = Field(default=None, gt=0.0)
    beta: float | None = Field(default=None, gt=0.0)
    loss_tolerance: float = Field(default=0.05, gt=0.0)
    discovery_tolerance: float = Field(default=0.05, gt=0.0)

    @field_validator("window", mode="before")
    @classmethod
    def _parse_window(cls, value: str | list[float] | None) -> tuple[float, float] | None:
        return _window(value)

    @field_validator("beta", mode="before")
    @classmethod
    def _parse_beta(cls, value: str | float | None) -> float | None:
        return _beta(value)

    @model_validator(mode="after")
    def _check(self) -> "FitRequest":
        if (self.alpha is None) != (self.beta is None):
            raise ValueError("alpha and beta must be given together")
        return self


class SweepRequest(TrainingOptions):
    manifold: Literal["circle", "sphere", "hypersphere", "shell"] = "sphere"
    dim: int = Field(default=8, ge=1)
    r_min: float = Field(default=0.5, ge=0.0)
    r_max: float = 2.0
    latents: list[int] = Field(default_factory=lambda: parse_grid("2:1024:log"))
    seeds: int = Field(default=3, ge=1)
    window: tuple[float, float] | None = None
    resume: Path | None = None

    @field_validator("latents", mode="before")
    @classmethod
    def _parse_latents(cls, value: str | list[int]) -> list[int]:
        return _grid(value)

    @field_validator("window", mode="before")
    @classmethod
    def _parse_window(cls, value: str | list[float] | None) -> tuple[float, float] | None:
        return _window(value)


class SlopesRequest(TrainingOptions):
    """L(n) slope of unit hyperspheres across dimensions."""

    dims: list[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    latents: list[int] = Field(default_factory=lambda: parse_grid("2:1024:log"))
    seeds: int = Field(default=3, ge=1)
    window: tuple[float, float] | None = (100.0, 1000.0)
    resume: Path | None = None

    @field_validator("dims", "latents", mode="before")
    @classmethod
    def _parse_grids(cls, value: str | list[int]) -> list[int]:
        return _grid(value)

    @field_validator("window", mode="before")
    @classmethod
    def _parse_window(cls, value: str | list[float] | None) -> tuple[float, float] | None:
        return _window(value)


class TileRequest(TrainingOptions):
    latents: list[int] = Field(default_factory=lambda: [4, 8, 24])
    seeds: int = Field(default=3, ge=1)

    @field_validator("latents", mode="before")
    @classmethod
    def _parse_latents(cls, value: str | list[int]) -> list[int]:
        return _grid(value)

    @field_validator("latents")
    @classmethod
    def _positive(cls, value: list[int]) -> list[int]:
        if any(n < 1 for n in value):
            raise ValueError("circle tiling needs at least one latent per run")
        return value


class AdditivityRequest(TrainingOptions):
    components: list[Literal["circle", "sphere", "shell"]] = ["circle", "circle"]
    dim: int = Field(default=3, ge=1)
    frequencies: list[float] = [0.2, 0.2]
    latents: list[int] = [8, 8]
    seeds: int = Field(default=1, ge=1)

    @field_validator("components", mode="before")
    @classmethod
    def _parse_components(cls, value: str | list[str]) -> list[str]:
        return [part.strip() for part in value.split(",")] if isinstance(value, str) else value

    @field_validator("frequencies", mode="before")
    @classmethod
    def _parse_frequencies(cls, value: str | list[float]) -> list[float]:
        return _floats(value)

    @field_validator("latents", mode="before")
    @classmethod
    def _parse_latents(cls, value: str | list[int]) -> list[int]:
        if isinstance(value, str):
            return [int(part) for part in value.split(",") if part.strip()]
        return value

    @model_validator(mode="after")
    def _check(self) -> "AdditivityRequest":
        if not len(self.components) == len(self.frequencies) == len(self.latents):
            raise ValueError("components, frequencies and latents need the same length")
        return self


class GeometryRequest(CommonOptions):
    weights: Path
    absolute: bool = False
    threshold: float = Field(default=0.97, ge=-1.0, le=1.0)
    bins: int = Field(default=40, ge=1)
    baseline_resamples: int = Field(default=0, ge=0)
