from dataclasses import dataclass
import logging
import time
from typing import Any

import numpy as np

from app.clients.artifacts import ArtifactStore, read_arrays
from app.schemas.sae import (
    EvaluationResult,
    HistoryRow,
    L1Sparsity,
    LossBreakdown,
    SaeModel,
    SparsityConfig,
    TanhSparsity,
    TrainConfig,
    TrainResult,
)
from app.services.adam import Adam
from app.services.manifolds import ManifoldSampler, ManifoldSpecType
from app.utils.hashing import config_hash
from app.utils.seeds import rng_for

logger = logging.getLogger(__name__)

# Seed streams derived from TrainConfig.seed.
DATA_STREAM = 0
INIT_STREAM = 1
EVAL_STREAM = 2
DEAD_LATENT_STREAM = 3

EVAL_CHUNK = 8192
SCALE_DECAY = 0.99


class SaeError(Exception):
    pass


class SaeShapeError(SaeError):
    pass


class TrainingDivergedError(SaeError):
    def __init__(self, step: int, detail: str = "non-finite loss") -> None:
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class _Forward:
    pre: np.ndarray
    gate: np.ndarray
    acts: np.ndarray
    norms: np.ndarray
    residual: np.ndarray


def init_model(input_dim: int, n_latents: int, config: TrainConfig, rng: np.random.Generator) -> SaeModel:
    """Encoder rows uniform on the sphere scaled by `init_scale`; decoder tied to the encoder at init."""
    directions = rng.standard_normal((n_latents, input_dim))
    if n_latents:
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    w_enc = config.init_scale * directions
    threshold = np.full(n_latents, config.jumprelu_threshold_init) if config.nonlinearity == "jumprelu" else None
    return SaeModel(
        w_enc=w_enc,
        b_enc=np.zeros(n_latents),
        w_dec=w_enc.T.copy(),
        b_dec=np.zeros(input_dim),
        nonlinearity=config.nonlinearity,
        threshold=threshold,
        bandwidth=config.bandwidth_fraction,
    )


def _check_batch(model: SaeModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise SaeShapeError(f"batch must be a non-empty (B, d) matrix, got shape {batch.shape}")
    if batch.shape[1] != model.input_dim:
        raise SaeShapeError(f"batch has dimension {batch.shape[1]}, model expects {model.input_dim}")
    return batch


def _forward(model: SaeModel, batch: np.ndarray) -> _Forward:
    pre = batch @ model.w_enc.T + model.b_enc
    if model.nonlinearity == "jumprelu":
        gate = pre > model.threshold
    else:
        gate = pre > 0.0
    acts = np.where(gate, pre, 0.0)
    norms = np.linalg.norm(model.w_dec, axis=0)
    residual = acts @ model.w_dec.T + model.b_dec - batch
    return _Forward(pre=pre, gate=gate, acts=acts, norms=norms, residual=residual)


def _sparsity_terms(weighted: np.ndarray, sparsity: SparsityConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry penalty h(u) and its derivative h'(u) for u = f_j * ||w_j||."""
    if isinstance(sparsity, L1Sparsity):
        return sparsity.coefficient * weighted, np.full_like(weighted, sparsity.coefficient)
    if isinstance(sparsity, TanhSparsity):
        squashed = np.tanh(sparsity.c * weighted)
        return (
            sparsity.coefficient * squashed,
            sparsity.coefficient * sparsity.c * (1.0 - squashed * squashed),
        )
    raise SaeError(f"unsupported sparsity {type(sparsity).__name__}")


def encode(model: SaeModel, batch: np.ndarray) -> np.ndarray:
    return _forward(model, _check_batch(model, batch)).acts


def decode(model: SaeModel, acts: np.ndarray) -> np.ndarray:
    return np.asarray(acts) @ model.w_dec.T + model.b_dec


def per_sample_loss(
    model: SaeModel,
    batch: np.ndarray,
    sparsity: SparsityConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """(squared reconstruction error, sparsity penalty) for every sample."""
    forward = _forward(model, _check_batch(model, batch))
    penalty, _ = _sparsity_terms(forward.acts * forward.norms, sparsity)
    return np.sum(forward.residual**2, axis=1), np.sum(penalty, axis=1)


def loss(model: SaeModel, batch: np.ndarray, sparsity: SparsityConfig) -> LossBreakdown:
    recon, penalty = per_sample_loss(model, batch, sparsity)
    reconstruction = float(np.mean(recon))
    sparsity_term = float(np.mean(penalty))
    return LossBreakdown(total=reconstruction + sparsity_term, reconstruction=reconstruction, sparsity=sparsity_term)


def _loss_and_gradients(
    model: SaeModel,
    batch: np.ndarray,
    sparsity: SparsityConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray], _Forward]:
    batch = _check_batch(model, batch)
    forward = _forward(model, batch)
    count = batch.shape[0]

    penalty, penalty_slope = _sparsity_terms(forward.acts * forward.norms, sparsity)
    reconstruction = float(np.mean(np.sum(forward.residual**2, axis=1)))
    sparsity_term = float(np.sum(penalty) / count)
    breakdown = LossBreakdown(
        total=reconstruction + sparsity_term,
        reconstruction=reconstruction,
        sparsity=sparsity_term,
    )

    grad_residual = (2.0 / count) * forward.residual
    grad_norms = np.sum(penalty_slope * forward.acts, axis=0) / count
    safe_norms = np.where(forward.norms > 0.0, forward.norms, 1.0)
    norm_direction = np.where(forward.norms > 0.0, grad_norms / safe_norms, 0.0)

    grad_w_dec = grad_residual.T @ forward.acts + model.w_dec * norm_direction
    grad_b_dec = np.sum(grad_residual, axis=0)
    grad_acts = grad_residual @ model.w_dec + penalty_slope * forward.norms / count
    grad_pre = grad_acts * forward.gate

    grads = {
        "w_enc": grad_pre.T @ batch,
        "b_enc": np.sum(grad_pre, axis=0),
        "w_dec": grad_w_dec,
        "b_dec": grad_b_dec,
    }
    if model.nonlinearity == "jumprelu":
        # Rectangle straight-through estimate of d acts / d threshold.
        bandwidth = model.bandwidth
        inside = np.abs(forward.pre - model.threshold) < 0.5 * bandwidth
        pseudo = -(model.threshold / bandwidth) * inside
        grads["threshold"] = np.sum(grad_acts * pseudo, axis=0)
    return breakdown, grads, forward


def gradients(model: SaeModel, batch: np.ndarray, sparsity: SparsityConfig) -> dict[str, np.ndarray]:
    _, grads, _ = _loss_and_gradients(model, batch, sparsity)
    return grads


def evaluate(
    model: SaeModel,
    spec: ManifoldSpecType,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> EvaluationResult:
    """Mean loss over `config.eval_samples` fresh samples, with its standard error."""
    rng = rng if rng is not None else rng_for(config.seed, EVAL_STREAM)
    sampler = ManifoldSampler(spec, rng)
    recon_parts = []
    penalty_parts = []
    remaining = config.eval_samples
    while remaining > 0:
        chunk = min(EVAL_CHUNK, remaining)
        recon, penalty = per_sample_loss(model, sampler.draw(chunk), config.sparsity)
        recon_parts.append(recon)
        penalty_parts.append(penalty)
        remaining -= chunk
    recon = np.concatenate(recon_parts)
    penalty = np.concatenate(penalty_parts)
    totals = recon + penalty
    return EvaluationResult(
        loss=float(np.mean(totals)),
        stderr=float(np.std(totals, ddof=1) / np.sqrt(totals.size)),
        reconstruction=float(np.mean(recon)),
        sparsity=float(np.mean(penalty)),
        samples=int(totals.size),
    )


def latent_activation_counts(
    model: SaeModel,
    spec: ManifoldSpecType,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """How often each latent fires above `activation_threshold` on fresh samples."""
    rng = rng if rng is not None else rng_for(config.seed, DEAD_LATENT_STREAM)
    sampler = ManifoldSampler(spec, rng)
    counts = np.zeros(model.n_latents, dtype=np.int64)
    remaining = config.dead_latent_samples
    while remaining > 0:
        chunk = min(EVAL_CHUNK, remaining)
        acts = encode(model, sampler.draw(chunk))
        counts += np.count_nonzero(acts > config.activation_threshold, axis=0)
        remaining -= chunk
    return counts


def count_dead_latents(
    model: SaeModel,
    spec: ManifoldSpecType,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> int:
    return int(np.count_nonzero(latent_activation_counts(model, spec, config, rng) == 0))


def train_config_hash(spec: ManifoldSpecType, n_latents: int, config: TrainConfig) -> str:
    return config_hash(
        {
            "spec": spec.model_dump(mode="json"),
            "n_latents": n_latents,
            "config": config.model_dump(mode="json"),
        }
    )


def train(
    spec: ManifoldSpecType,
    n_latents: int,
    config: TrainConfig,
    init: SaeModel | None = None,
) -> TrainResult:
    """Adam on freshly streamed batches; deterministic given `config.seed`."""
    if n_latents < 0:
        raise SaeError(f"latent count must be non-negative, got {n_latents}")
    digest = train_config_hash(spec, n_latents, config)
    started = time.perf_counter()
    outcome = "unknown"
    step = 0
    try:
        if init is not None:
            if init.n_latents != n_latents or init.input_dim != spec.ambient_dim:
                raise SaeShapeError("initial model does not match the requested latent count and manifold")
            model = init.copy()
        else:
            model = init_model(spec.ambient_dim, n_latents, config, rng_for(config.seed, INIT_STREAM))

        sampler = ManifoldSampler(spec, rng_for(config.seed, DATA_STREAM))
        optimizer = Adam(config.learning_rate, config.adam)
        history: list[HistoryRow] = []
        window = np.zeros(3)
        window_steps = 0
        activation_scale: float | None = None

        for step in range(1, config.steps + 1):
            batch = sampler.draw(config.batch_size)
            breakdown, grads, forward = _loss_and_gradients(model, batch, config.sparsity)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(step)
            optimizer.step(model.parameters(), grads)
            if model.nonlinearity == "jumprelu":
                np.maximum(model.threshold, 0.0, out=model.threshold)
                batch_scale = float(np.mean(np.abs(forward.pre))) if forward.pre.size else 1.0
                activation_scale = (
                    batch_scale
                    if activation_scale is None
                    else SCALE_DECAY * activation_scale + (1.0 - SCALE_DECAY) * batch_scale
                )
                model.bandwidth = config.bandwidth_fraction * max(activation_scale, 1e-12)
            if not model.is_finite():
                raise TrainingDivergedError(step, "non-finite parameters")

            window += (breakdown.total, breakdown.reconstruction, breakdown.sparsity)
            window_steps += 1
            if step % config.log_every == 0:
                total, recon, sparsity = (window / window_steps).tolist()
                history.append(HistoryRow(step=step, total=total, recon=recon, sparsity=sparsity))
                window[:] = 0.0
                window_steps = 0

        evaluation = evaluate(model, spec, config)
        dead = count_dead_latents(model, spec, config)
        outcome = "ok"
        return TrainResult(
            model=model,
            history=history,
            evaluation=evaluation,
            dead_latents=dead,
            config_hash=digest,
        )
    except TrainingDivergedError:
        outcome = "diverged"
        raise
    finally:
        logger.info(
            "sae_train kind=%s n_latents=%s seed=%s steps=%s outcome=%s elapsed_s=%.2f",
            spec.kind,
            n_latents,
            config.seed,
            step,
            outcome,
            time.perf_counter() - started,
        )


def model_arrays(model: SaeModel) -> dict[str, np.ndarray]:
    arrays = dict(model.parameters())
    arrays["bandwidth"] = np.array([model.bandwidth])
    return arrays


def save_checkpoint(store: ArtifactStore, name: str, model: SaeModel, meta: dict[str, Any] | None = None) -> None:
    store.write_arrays(
        name,
        model_arrays(model),
        {
            "kind": "sae_checkpoint",
            "nonlinearity": model.nonlinearity,
            "input_dim": model.input_dim,
            "n_latents": model.n_latents,
            **(meta or {}),
        },
    )


def load_checkpoint(path: Any) -> tuple[SaeModel, dict[str, Any]]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "sae_checkpoint":
        raise SaeError(f"{path} is not an SAE checkpoint")
    model = SaeModel(
        w_enc=arrays["w_enc"],
        b_enc=arrays["b_enc"],
        w_dec=arrays["w_dec"],
        b_dec=arrays["b_dec"],
        nonlinearity=meta["nonlinearity"],
        threshold=arrays.get("threshold"),
        bandwidth=float(arrays["bandwidth"][0]) if "bandwidth" in arrays else 0.001,
    )
    return model, meta


__all__ = [
    "SaeError",
    "SaeShapeError",
    "TrainingDivergedError",
    "count_dead_latents",
    "decode",
    "encode",
    "evaluate",
    "gradients",
    "init_model",
    "latent_activation_counts",
    "load_checkpoint",
    "loss",
    "model_arrays",
    "per_sample_loss",
    "save_checkpoint",
    "train",
    "train_config_hash",
]
