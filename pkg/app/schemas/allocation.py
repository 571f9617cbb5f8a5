import math
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

CONVEXITY_TOLERANCE = 1e-12


class StepCurve(BaseModel):
    """Discrete feature: loss `unsatisfied_loss` with no latent, `satisfied_loss` with one or more."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["step"] = "step"
    satisfied_loss: float = Field(default=0.0, ge=0.0)
    unsatisfied_loss: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_order(self) -> "StepCurve":
        if self.satisfied_loss > self.unsatisfied_loss:
            raise ValueError("satisfied_loss must not exceed unsatisfied_loss")
        return self

    def values(self, counts: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts)
        return np.where(counts >= 1, self.satisfied_loss, self.unsatisfied_loss).astype(np.float64)

    def value(self, n: float) -> float:
        return self.satisfied_loss if n >= 1 else self.unsatisfied_loss


class PowerLawCurve(BaseModel):
    """Manifold feature: ``floor + (1 - floor) * (1 + n) ** -beta``.

    L(0) = 1 and the curve is convex for every n >= 0, so the first latent
    always carries a positive marginal gain. Asymptotically L(n) ~ n^-beta.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["power_law"] = "power_law"
    beta: float = Field(gt=0.0)
    floor: float = Field(default=0.0, ge=0.0, lt=1.0)

    @field_validator("beta")
    @classmethod
    def _finite_beta(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("beta must be finite; use a step curve for the discrete limit")
        return value

    def values(self, counts: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.float64)
        return self.floor + (1.0 - self.floor) * np.power(1.0 + counts, -self.beta)

    def value(self, n: float) -> float:
        return self.floor + (1.0 - self.floor) * (1.0 + n) ** (-self.beta)


class TabulatedCurve(BaseModel):
    """Empirical curve: ``loss[n]`` for n < len(loss), the last value beyond."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["tabulated"] = "tabulated"
    loss: tuple[float, ...] = Field(min_length=1)

    @field_validator("loss")
    @classmethod
    def _check_convex(cls, values: tuple[float, ...]) -> tuple[float, ...]:
        for n, value in enumerate(values):
            if not math.isfinite(value):
                raise ValueError(f"loss[{n}] is not finite")
        scale = max(1.0, max(abs(v) for v in values))
        gains = [values[n] - values[n + 1] for n in range(len(values) - 1)]
        for n, gain in enumerate(gains):
            if gain < -CONVEXITY_TOLERANCE * scale:
                raise ValueError(f"loss curve increases between n={n} and n={n + 1}")
        # The implicit gain past the table is zero.
        for n in range(len(gains)):
            following = gains[n + 1] if n + 1 < len(gains) else 0.0
            if following > gains[n] + CONVEXITY_TOLERANCE * scale:
                raise ValueError(f"marginal gains increase at n={n + 1}; curve is not convex")
        return values

    def values(self, counts: np.ndarray) -> np.ndarray:
        table = np.asarray(self.loss, dtype=np.float64)
        index = np.minimum(np.asarray(counts, dtype=np.int64), len(table) - 1)
        return table[index]

    def value(self, n: float) -> float:
        return self.loss[min(int(n), len(self.loss) - 1)]


LossCurve = Annotated[StepCurve | PowerLawCurve | TabulatedCurve, Field(discriminator="kind")]


class CurveSegment(BaseModel):
    """Features ``start <= i < stop`` (0-based) share one loss curve."""

    model_config = ConfigDict(frozen=True)

    start: int = Field(ge=0)
    stop: int
    curve: LossCurve

    @model_validator(mode="after")
    def _check_bounds(self) -> "CurveSegment":
        if self.stop <= self.start:
            raise ValueError("segment must contain at least one feature")
        return self


class FeatureEnsemble(BaseModel):
    """Features in frequency-rank order.

    Frequencies are held as one array and curves as contiguous segments, so an
    ensemble of 10^7 discrete features costs one float per feature.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frequencies: np.ndarray
    segments: tuple[CurveSegment, ...]
    normalized: bool = False

    @field_validator("frequencies", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_ensemble(self) -> "FeatureEnsemble":
        freqs = self.frequencies
        if freqs.ndim != 1 or freqs.size == 0:
            raise ValueError("ensemble must contain at least one feature")
        if not np.all(np.isfinite(freqs)) or np.any(freqs <= 0.0):
            raise ValueError("frequencies must be finite and positive")
        if self.normalized and np.any(freqs > 1.0 + 1e-12):
            raise ValueError("normalized frequencies must not exceed 1")
        if freqs.size > 1 and np.any(np.diff(freqs) > 0.0):
            raise ValueError("frequencies must be sorted non-increasing")
        expected_start = 0
        for segment in self.segments:
            if segment.start != expected_start:
                raise ValueError(f"segments must tile the features; gap or overlap at index {segment.start}")
            expected_start = segment.stop
        if expected_start != freqs.size:
            raise ValueError(f"segments cover {expected_start} features, ensemble has {freqs.size}")
        return self

    @field_serializer("frequencies")
    def _serialize_frequencies(self, value: np.ndarray) -> list[float]:
        return value.tolist()

    @property
    def size(self) -> int:
        return int(self.frequencies.size)

    def curve_at(self, index: int) -> StepCurve | PowerLawCurve | TabulatedCurve:
        for segment in self.segments:
            if segment.start <= index < segment.stop:
                return segment.curve
        raise IndexError(f"feature index {index} out of range")

    def loss_values(self, counts: np.ndarray) -> np.ndarray:
        """Per-feature L_i(n_i) for a full count vector."""
        result = np.empty(self.size, dtype=np.float64)
        for segment in self.segments:
            result[segment.start : segment.stop] = segment.curve.values(counts[segment.start : segment.stop])
        return result

    def expected_loss(self, counts: np.ndarray) -> float:
        return float(np.dot(self.frequencies, self.loss_values(counts)))

    def normalized_copy(self) -> "FeatureEnsemble":
        total = float(self.frequencies.sum())
        return FeatureEnsemble(frequencies=self.frequencies / total, segments=self.segments, normalized=True)


class Allocation(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    solver: Literal["greedy", "continuous"]
    counts: np.ndarray
    total_latents: float = Field(ge=0)
    expected_loss: float
    discovered: int = Field(ge=0)

    @field_validator("counts", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        array = np.array(value)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_totals(self) -> "Allocation":
        counts = self.counts
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        total = float(counts.sum())
        if self.solver == "greedy":
            if not np.issubdtype(counts.dtype, np.integer):
                raise ValueError("greedy allocations carry integer counts")
            if int(counts.sum()) != int(self.total_latents):
                raise ValueError(f"counts sum to {int(counts.sum())}, expected {int(self.total_latents)}")
        elif abs(total - self.total_latents) > 1e-9 * max(self.total_latents, 1.0):
            raise ValueError(f"counts sum to {total}, expected {self.total_latents}")
        if int(np.count_nonzero(counts)) != self.discovered:
            raise ValueError("discovered must equal the number of features with a positive count")
        return self

    @field_serializer("counts")
    def _serialize_counts(self, value: np.ndarray) -> list[float] | list[int]:
        return value.tolist()


class ScalingRow(BaseModel):
    """One budget of a scaling simulation."""

    total_latents: int
    expected_loss: float
    discovered: int
    frac_latents_feature_1: float
    flagged_counts: dict[int, int] = Field(default_factory=dict)


class ScalingTrends(BaseModel):
    """Direction of D(N)/N and of feature 1's latent share over the final decade of budgets."""

    window: tuple[int, int]
    points: int
    discovery_ratio_decreasing: bool
    feature_1_share_increasing: bool
