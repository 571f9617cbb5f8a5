from typing import Literal

from pydantic import BaseModel, Field


class RegimePrediction(BaseModel):
    """Closed-form scaling prediction for Zipf frequencies and uniform power-law curves.

    Exponents are positive magnitudes: loss decays as N^-loss_exponent and
    discovery grows as N^discovery_exponent.
    """

    alpha: float
    beta: float
    gamma: float
    regime: Literal["pathological", "benign", "critical"]
    loss_exponent: float
    discovery_exponent: float
    degenerate: bool = False


class PowerLawFit(BaseModel):
    """Least-squares line through (log x, log y); `slope` keeps its sign."""

    slope: float
    intercept: float
    window: tuple[float, float]
    residual_rms: float = Field(ge=0.0)
    points: int = Field(ge=3)


class RegimeTolerances(BaseModel):
    loss_exponent: float = Field(default=0.05, gt=0.0)
    discovery_exponent: float = Field(default=0.05, gt=0.0)


class ExponentCheck(BaseModel):
    quantity: Literal["loss_exponent", "discovery_exponent"]
    predicted: float
    measured: float
    tolerance: float
    passed: bool


class RegimeReport(BaseModel):
    prediction: RegimePrediction
    window: tuple[float, float]
    checks: list[ExponentCheck]
    loss_fit: PowerLawFit
    discovery_fit: PowerLawFit

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)
