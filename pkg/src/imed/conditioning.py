"""Feature/prediction conditioning maps and the endogeny-network input."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from imed.errors import ConfigError

EXACT_MAP_LIMIT = 4096
DEFAULT_PROJECTION_DIM = 1024


def t_ml(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Flattened outer product, ``out[..., k * d_g + j] = f[..., k] * g[..., j]``."""
    if f.shape[:-1] != g.shape[:-1]:
        raise ConfigError(f"batch shapes differ: {tuple(f.shape)} vs {tuple(g.shape)}")
    outer = f.unsqueeze(-1) * g.unsqueeze(-2)
    return outer.reshape(*f.shape[:-1], f.shape[-1] * g.shape[-1])


@dataclass
class RandomProjection:
    """Frozen Gaussian projections for the randomized multilinear map."""

    weight_f: torch.Tensor  # (d, d_f)
    weight_g: torch.Tensor  # (d, d_g)
    seed: int | None = None

    @classmethod
    def create(cls, d_f: int, d_g: int, d: int = DEFAULT_PROJECTION_DIM, seed: int = 0) -> "RandomProjection":
        gen = torch.Generator().manual_seed(seed)
        weight_f = torch.randn(d, d_f, generator=gen)
        weight_g = torch.randn(d, d_g, generator=gen)
        return cls(weight_f, weight_g, seed)

    @property
    def d(self) -> int:
        return self.weight_f.shape[0]

    def to(self, dtype: torch.dtype) -> "RandomProjection":
        return RandomProjection(self.weight_f.to(dtype), self.weight_g.to(dtype), self.seed)

    def tensors(self, prefix: str = "projection") -> dict[str, torch.Tensor]:
        return {f"{prefix}.weight_f": self.weight_f, f"{prefix}.weight_g": self.weight_g}

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor], seed: int | None, prefix: str = "projection"):
        return cls(tensors[f"{prefix}.weight_f"], tensors[f"{prefix}.weight_g"], seed)


def t_rml(proj: RandomProjection, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """``(W_f f) * (W_g g) / sqrt(d)`` row-wise."""
    if f.shape[-1] != proj.weight_f.shape[1] or g.shape[-1] != proj.weight_g.shape[1]:
        raise ConfigError(
            f"projection expects d_f={proj.weight_f.shape[1]}, d_g={proj.weight_g.shape[1]}; "
            f"got {f.shape[-1]}, {g.shape[-1]}"
        )
    wf = proj.weight_f.to(f.dtype)
    wg = proj.weight_g.to(g.dtype)
    return (f @ wf.T) * (g @ wg.T) / math.sqrt(proj.d)


def uses_exact_map(d_f: int, d_g: int, limit: int = EXACT_MAP_LIMIT) -> bool:
    return d_f * d_g <= limit


def conditioning_width(d_f: int, d_g: int, d: int = DEFAULT_PROJECTION_DIM) -> int:
    return d_f * d_g if uses_exact_map(d_f, d_g) else d


@dataclass
class ConditioningVector:
    values: torch.Tensor  # (B, width)
    mode: str  # "ml" or "rml"

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def condition(f: torch.Tensor, g: torch.Tensor, proj: RandomProjection | None = None) -> ConditioningVector:
    """Exact outer product when d_f * d_g <= 4096, randomized map otherwise."""
    d_f, d_g = f.shape[-1], g.shape[-1]
    if uses_exact_map(d_f, d_g):
        return ConditioningVector(t_ml(f, g), "ml")
    if proj is None:
        raise ConfigError(
            f"d_f*d_g = {d_f * d_g} exceeds {EXACT_MAP_LIMIT}: a RandomProjection is required"
        )
    return ConditioningVector(t_rml(proj, f, g), "rml")


def assemble_v1(conds: list[ConditioningVector]) -> torch.Tensor:
    """Concatenate per-component conditioning vectors in component order."""
    if not conds:
        raise ConfigError("need at least one conditioning vector")
    width, batch = conds[0].width, conds[0].values.shape[0]
    for i, c in enumerate(conds):
        if c.width != width or c.values.shape[0] != batch:
            raise ConfigError(
                f"component {i} conditioning is {tuple(c.values.shape)}, expected ({batch}, {width})"
            )
    if len(conds) == 1:
        return conds[0].values
    return torch.cat([c.values for c in conds], dim=-1)
