from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

ORTHOGONALITY_TOLERANCE = 1e-9


class _SpecBase(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_samples: int = Field(default=4096, gt=0)
    seed: int = 0


class CircleSpec(_SpecBase):
    kind: Literal["circle"] = "circle"

    @property
    def ambient_dim(self) -> int:
        return 2


class HypersphereSpec(_SpecBase):
    kind: Literal["hypersphere"] = "hypersphere"
    dim: int = Field(ge=1)

    @property
    def ambient_dim(self) -> int:
        return self.dim


class ShellSpec(_SpecBase):
    """Direction uniform on the sphere, radius uniform on [r_min, r_max]."""

    kind: Literal["shell"] = "shell"
    dim: int = Field(ge=1)
    r_min: float = Field(default=0.5, ge=0.0)
    r_max: float = 2.0

    @model_validator(mode="after")
    def _check_radii(self) -> "ShellSpec":
        if self.r_min >= self.r_max:
            raise ValueError(f"shell needs r_min < r_max, got {self.r_min} >= {self.r_max}")
        return self

    @property
    def ambient_dim(self) -> int:
        return self.dim


LeafSpec = Annotated[Union[CircleSpec, HypersphereSpec, ShellSpec], Field(discriminator="kind")]


class CompositeComponent(BaseModel):
    """One sparse feature: active with probability `frequency`, embedded by `basis` (ambient x d_i)."""

    model_config = ConfigDict(frozen=True)

    spec: LeafSpec
    frequency: float = Field(ge=0.0, le=1.0)
    basis: tuple[tuple[float, ...], ...]

    def basis_matrix(self) -> np.ndarray:
        return np.array(self.basis, dtype=np.float64)


class CompositeSpec(_SpecBase):
    """Sum of independently gated features living in mutually orthogonal subspaces.

    Component `n_samples`/`seed` are ignored; the composite's own fields drive sampling.
    """

    kind: Literal["composite"] = "composite"
    components: tuple[CompositeComponent, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_blocks(self) -> "CompositeSpec":
        ambient = len(self.components[0].basis)
        blocks = []
        for position, component in enumerate(self.components):
            block = component.basis_matrix()
            if block.ndim != 2 or block.shape[0] != ambient:
                raise ValueError(f"component {position}: basis must have {ambient} rows")
            if block.shape[1] != component.spec.ambient_dim:
                raise ValueError(
                    f"component {position}: basis has {block.shape[1]} columns, "
                    f"feature dimension is {component.spec.ambient_dim}"
                )
            gram = block.T @ block
            if np.max(np.abs(gram - np.eye(block.shape[1]))) > ORTHOGONALITY_TOLERANCE:
                raise ValueError(f"component {position}: basis columns are not orthonormal")
            blocks.append(block)
        for i in range(len(blocks)):
            for k in range(i + 1, len(blocks)):
                overlap = np.max(np.abs(blocks[i].T @ blocks[k]))
                if overlap > ORTHOGONALITY_TOLERANCE:
                    raise ValueError(f"components {i} and {k} are not orthogonal (max |dot| = {overlap:.3g})")
        return self

    @property
    def ambient_dim(self) -> int:
        return len(self.components[0].basis)


ManifoldSpec = Annotated[
    Union[CircleSpec, HypersphereSpec, ShellSpec, CompositeSpec],
    Field(discriminator="kind"),
]


class ManifoldDataset(BaseModel):
    """Sampled points; for composites also the gates and the per-feature values f_i."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    points: np.ndarray
    active: np.ndarray | None = None
    parts: tuple[np.ndarray, ...] = ()
