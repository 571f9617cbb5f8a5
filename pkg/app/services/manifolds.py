from collections.abc import Sequence
import logging
from pathlib import Path

import numpy as np
from pydantic import TypeAdapter

from app.clients.artifacts import ArtifactStore, read_arrays
from app.schemas.manifold import (
    CircleSpec,
    CompositeComponent,
    CompositeSpec,
    HypersphereSpec,
    ManifoldDataset,
    ManifoldSpec,
    ShellSpec,
)

logger = logging.getLogger(__name__)

LeafSpecType = CircleSpec | HypersphereSpec | ShellSpec
ManifoldSpecType = LeafSpecType | CompositeSpec


class ManifoldError(Exception):
    pass


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    draws = rng.standard_normal((count, dim))
    return draws / np.linalg.norm(draws, axis=1, keepdims=True)


def _sample_leaf(spec: LeafSpecType, rng: np.random.Generator, count: int) -> np.ndarray:
    if isinstance(spec, CircleSpec):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return np.column_stack([np.cos(angles), np.sin(angles)])
    if isinstance(spec, HypersphereSpec):
        return _unit_directions(rng, count, spec.dim)
    if isinstance(spec, ShellSpec):
        directions = _unit_directions(rng, count, spec.dim)
        radii = rng.uniform(spec.r_min, spec.r_max, size=count)
        return directions * radii[:, None]
    raise ManifoldError(f"unsupported leaf manifold {type(spec).__name__}")


class ManifoldSampler:
    """Streams batches from one manifold; the same seed always yields the same stream."""

    def __init__(self, spec: ManifoldSpecType, rng: np.random.Generator | None = None) -> None:
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)
        self._bases = (
            [component.basis_matrix() for component in spec.components]
            if isinstance(spec, CompositeSpec)
            else []
        )

    @property
    def ambient_dim(self) -> int:
        return self.spec.ambient_dim

    def draw(self, count: int) -> np.ndarray:
        return self.draw_dataset(count).points

    def draw_dataset(self, count: int) -> ManifoldDataset:
        if count <= 0:
            raise ManifoldError(f"sample count must be positive, got {count}")
        spec = self.spec
        if not isinstance(spec, CompositeSpec):
            return ManifoldDataset(points=_sample_leaf(spec, self.rng, count))

        frequencies = np.array([component.frequency for component in spec.components])
        active = self.rng.random((count, len(spec.components))) < frequencies
        points = np.zeros((count, spec.ambient_dim))
        parts = []
        for position, (component, basis) in enumerate(zip(spec.components, self._bases)):
            values = _sample_leaf(component.spec, self.rng, count)
            values = values * active[:, position : position + 1]
            parts.append(values)
            points += values @ basis.T
        return ManifoldDataset(points=points, active=active, parts=tuple(parts))


def sample(spec: ManifoldSpecType) -> ManifoldDataset:
    """Fixed dataset of `spec.n_samples` points drawn with `spec.seed`."""
    outcome = "unknown"
    try:
        dataset = ManifoldSampler(spec).draw_dataset(spec.n_samples)
        outcome = "ok"
        return dataset
    except ManifoldError:
        outcome = "error"
        raise
    finally:
        logger.info(
            "manifold_sample kind=%s n_samples=%s seed=%s outcome=%s",
            spec.kind,
            spec.n_samples,
            spec.seed,
            outcome,
        )


def mean_square_norm(spec: ManifoldSpecType) -> float:
    """E||x||^2 under the sampling law of `spec`."""
    if isinstance(spec, (CircleSpec, HypersphereSpec)):
        return 1.0
    if isinstance(spec, ShellSpec):
        a, b = spec.r_min, spec.r_max
        return (a * a + a * b + b * b) / 3.0
    if isinstance(spec, CompositeSpec):
        return sum(component.frequency * mean_square_norm(component.spec) for component in spec.components)
    raise ManifoldError(f"unsupported manifold {type(spec).__name__}")


def orthogonal_blocks(dims: Sequence[int], ambient_dim: int | None = None) -> list[np.ndarray]:
    """Consecutive coordinate blocks of the identity: block i spans dims[i] fresh axes."""
    total = sum(dims)
    ambient_dim = ambient_dim or total
    if ambient_dim < total:
        raise ManifoldError(f"ambient dimension {ambient_dim} cannot hold blocks of total size {total}")
    eye = np.eye(ambient_dim)
    blocks = []
    offset = 0
    for dim in dims:
        blocks.append(eye[:, offset : offset + dim])
        offset += dim
    return blocks


def random_orthogonal_blocks(
    dims: Sequence[int],
    ambient_dim: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    total = sum(dims)
    if ambient_dim < total:
        raise ManifoldError(f"ambient dimension {ambient_dim} cannot hold blocks of total size {total}")
    q, r = np.linalg.qr(rng.standard_normal((ambient_dim, total)))
    q = q * np.sign(np.diag(r))
    blocks = []
    offset = 0
    for dim in dims:
        blocks.append(q[:, offset : offset + dim])
        offset += dim
    return blocks


def composite_spec(
    leaves: Sequence[LeafSpecType],
    frequencies: Sequence[float],
    n_samples: int = 4096,
    seed: int = 0,
    blocks: Sequence[np.ndarray] | None = None,
) -> CompositeSpec:
    if len(leaves) != len(frequencies):
        raise ManifoldError("need one frequency per component")
    blocks = blocks if blocks is not None else orthogonal_blocks([leaf.ambient_dim for leaf in leaves])
    components = tuple(
        CompositeComponent(spec=leaf, frequency=frequency, basis=tuple(map(tuple, block.tolist())))
        for leaf, frequency, block in zip(leaves, frequencies, blocks)
    )
    return CompositeSpec(components=components, n_samples=n_samples, seed=seed)


_SPEC_ADAPTER: TypeAdapter = TypeAdapter(ManifoldSpec)


def parse_spec(payload: dict) -> ManifoldSpecType:
    return _SPEC_ADAPTER.validate_python(payload)


def save_dataset(store: ArtifactStore, name: str, spec: ManifoldSpecType, dataset: ManifoldDataset) -> Path:
    """Dump points (and composite gates) as float64 arrays with the spec in the sidecar."""
    arrays = {"points": dataset.points}
    if dataset.active is not None:
        arrays["active"] = dataset.active.astype(np.float64)
    return store.write_arrays(name, arrays, {"kind": "manifold_dataset", "spec": spec.model_dump(mode="json")})


def load_dataset(path: Path) -> tuple[ManifoldSpecType, ManifoldDataset]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "manifold_dataset" or "points" not in arrays:
        raise ManifoldError(f"{path} is not a manifold dataset")
    spec = parse_spec(meta["spec"])
    active = arrays["active"].astype(bool) if "active" in arrays else None
    return spec, ManifoldDataset(points=arrays["points"], active=active)


__all__ = [
    "ManifoldError",
    "ManifoldSampler",
    "composite_spec",
    "load_dataset",
    "mean_square_norm",
    "orthogonal_blocks",
    "parse_spec",
    "random_orthogonal_blocks",
    "sample",
    "save_dataset",
]
