from dataclasses import dataclass, field
from typing import Annotated, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class L1Sparsity(BaseModel):
    """coefficient * sum_j f_j * ||w_j||."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["l1"] = "l1"
    coefficient: float = Field(default=0.1, ge=0.0)


class TanhSparsity(BaseModel):
    """coefficient * sum_j tanh(c * f_j * ||w_j||)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["tanh"] = "tanh"
    c: float = Field(default=0.1, gt=0.0)
    coefficient: float = Field(default=1.0, ge=0.0)


SparsityConfig = Annotated[L1Sparsity | TanhSparsity, Field(discriminator="kind")]


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=12000, ge=0)
    batch_size: int = Field(default=2048, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    adam: AdamConfig = AdamConfig()
    nonlinearity: Literal["relu", "jumprelu"] = "relu"
    sparsity: SparsityConfig = L1Sparsity()
    seed: int = 0
    init_scale: float = Field(default=0.1, gt=0.0)
    jumprelu_threshold_init: float = Field(default=0.001, ge=0.0)
    bandwidth_fraction: float = Field(default=0.001, gt=0.0)
    log_every: int = Field(default=100, gt=0)
    eval_samples: int = Field(default=2**15, gt=1)
    dead_latent_samples: int = Field(default=2**16, gt=0)
    activation_threshold: float = Field(default=1e-6, ge=0.0)


@dataclass(eq=False)
class SaeModel:
    """Encoder ``f = sigma(W_e x + b_e)``, decoder ``x_hat = W_d f + b_d``.

    Shapes: w_enc (N, d), b_enc (N,), w_dec (d, N), b_dec (d,), threshold (N,)
    for JumpReLU. `bandwidth` is the straight-through kernel width.
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    nonlinearity: Literal["relu", "jumprelu"] = "relu"
    threshold: np.ndarray | None = None
    bandwidth: float = 0.001
    parameter_names: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        n_latents, input_dim = self.w_enc.shape
        if self.b_enc.shape != (n_latents,):
            raise ValueError(f"b_enc shape {self.b_enc.shape} != ({n_latents},)")
        if self.w_dec.shape != (input_dim, n_latents):
            raise ValueError(f"w_dec shape {self.w_dec.shape} != ({input_dim}, {n_latents})")
        if self.b_dec.shape != (input_dim,):
            raise ValueError(f"b_dec shape {self.b_dec.shape} != ({input_dim},)")
        names = ["w_enc", "b_enc", "w_dec", "b_dec"]
        if self.nonlinearity == "jumprelu":
            if self.threshold is None:
                self.threshold = np.zeros(n_latents)
            if self.threshold.shape != (n_latents,):
                raise ValueError(f"threshold shape {self.threshold.shape} != ({n_latents},)")
            names.append("threshold")
        self.parameter_names = tuple(names)

    @property
    def n_latents(self) -> int:
        return int(self.w_enc.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.w_enc.shape[1])

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.parameter_names}

    def copy(self) -> "SaeModel":
        return SaeModel(
            w_enc=self.w_enc.copy(),
            b_enc=self.b_enc.copy(),
            w_dec=self.w_dec.copy(),
            b_dec=self.b_dec.copy(),
            nonlinearity=self.nonlinearity,
            threshold=None if self.threshold is None else self.threshold.copy(),
            bandwidth=self.bandwidth,
        )

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for value in self.parameters().values())


class LossBreakdown(BaseModel):
    total: float
    reconstruction: float
    sparsity: float


class HistoryRow(BaseModel):
    """Mean batch loss over the `log_every` steps ending at `step`."""

    step: int
    total: float
    recon: float
    sparsity: float


class EvaluationResult(BaseModel):
    loss: float
    stderr: float
    reconstruction: float
    sparsity: float
    samples: int


@dataclass(eq=False)
class TrainResult:
    model: SaeModel
    history: list[HistoryRow]
    evaluation: EvaluationResult
    dead_latents: int
    config_hash: str

    @property
    def final_loss(self) -> float:
        return self.evaluation.loss
