"""Shuffle linear layers: grouped, channel-shuffled sparse linear maps.

Inputs of width ``d_in`` are split into ``groups`` groups, each group into
``groups`` subgroups. Subgroup ``j`` of every input group feeds output group
``j``. Equivalently: a fixed channel permutation followed by a block-diagonal
linear map with ``groups`` blocks of shape (d_in/groups, d_out/groups).

Below the sharing threshold ``tau`` all blocks reuse one weight block.
No bias terms live inside these layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from imed.errors import ConfigError
from imed.kernels import grouped_matmul

DEFAULT_TAU = 128


@dataclass(frozen=True)
class ShuffleLinearSpec:
    d_in: int
    d_out: int
    groups: int
    tau: int = DEFAULT_TAU

    def __post_init__(self):
        h = self.groups
        if min(self.d_in, self.d_out, h, self.tau) <= 0:
            raise ConfigError(f"shuffle layer sizes must be positive: {self}")
        if self.d_out % h:
            raise ConfigError(f"groups={h} must divide d_out={self.d_out}")
        if self.d_in % (h * h):
            raise ConfigError(
                f"groups**2={h * h} must divide d_in={self.d_in} "
                "(each input group is split into `groups` subgroups)"
            )

    @property
    def shared(self) -> bool:
        return self.groups < self.tau

    @property
    def group_in(self) -> int:
        return self.d_in // self.groups

    @property
    def subgroup(self) -> int:
        return self.d_in // (self.groups * self.groups)

    @property
    def group_out(self) -> int:
        return self.d_out // self.groups

    @property
    def n_blocks(self) -> int:
        return 1 if self.shared else self.groups

    @property
    def param_count(self) -> int:
        return self.n_blocks * self.group_in * self.group_out

    def to_dict(self) -> dict:
        return {"d_in": self.d_in, "d_out": self.d_out, "groups": self.groups, "tau": self.tau}


def param_count(d_in: int, d_out: int, groups: int, shared: bool) -> int:
    full = d_in * d_out // groups
    return full // groups if shared else full


def valid_groups(d_in: int, d_out: int) -> list[int]:
    return [h for h in range(1, d_out + 1) if d_out % h == 0 and d_in % (h * h) == 0]


@dataclass(frozen=True)
class Wiring:
    """Connectivity of a shuffle layer.

    ``permutation[j * group_in + k]`` is the input index that enters row ``k``
    of block ``j``; block ``j`` writes output columns
    ``[j * group_out, (j + 1) * group_out)``.
    """

    spec: ShuffleLinearSpec
    permutation: np.ndarray

    def block_inputs(self, j: int) -> np.ndarray:
        k = self.spec.group_in
        return self.permutation[j * k : (j + 1) * k]

    def block_outputs(self, j: int) -> np.ndarray:
        m = self.spec.group_out
        return np.arange(j * m, (j + 1) * m)

    def mask(self) -> np.ndarray:
        """Boolean (d_in, d_out) support of the equivalent dense matrix."""
        s = self.spec
        mask = np.zeros((s.d_in, s.d_out), dtype=bool)
        for j in range(s.groups):
            mask[np.ix_(self.block_inputs(j), self.block_outputs(j))] = True
        return mask


def wiring(spec: ShuffleLinearSpec) -> Wiring:
    h, gin, sub = spec.groups, spec.group_in, spec.subgroup
    # (input group i, subgroup j, offset s) -> ordered by (j, i, s)
    idx = np.arange(spec.d_in).reshape(h, h, sub).transpose(1, 0, 2).reshape(-1)
    assert idx.size == h * gin
    return Wiring(spec, idx)


_PERM_CACHE: dict[ShuffleLinearSpec, torch.Tensor] = {}


def _permutation(spec: ShuffleLinearSpec) -> torch.Tensor:
    perm = _PERM_CACHE.get(spec)
    if perm is None:
        perm = torch.from_numpy(wiring(spec).permutation.copy())
        _PERM_CACHE[spec] = perm
    return perm


def _blocks(spec: ShuffleLinearSpec, params: torch.Tensor) -> torch.Tensor:
    """View flat params (..., P) as (..., groups, group_in, group_out)."""
    lead = params.shape[:-1]
    w = params.reshape(*lead, spec.n_blocks, spec.group_in, spec.group_out)
    return w.expand(*lead, spec.groups, spec.group_in, spec.group_out)


def _shuffle_input(spec: ShuffleLinearSpec, x: torch.Tensor) -> torch.Tensor:
    return x.index_select(-1, _permutation(spec)).reshape(x.shape[0], spec.groups, spec.group_in)


def forward(spec: ShuffleLinearSpec, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply one shuffle layer with a single parameter vector to a batch."""
    if params.dim() != 1 or params.shape[0] != spec.param_count:
        raise ConfigError(
            f"expected {spec.param_count} params for {spec}, got shape {tuple(params.shape)}"
        )
    if x.dim() != 2 or x.shape[1] != spec.d_in:
        raise ConfigError(f"expected input (B, {spec.d_in}), got {tuple(x.shape)}")
    w = _blocks(spec, params).unsqueeze(0)
    out = grouped_matmul(_shuffle_input(spec, x), w)
    return out.reshape(x.shape[0], spec.d_out)


def forward_per_instance(spec: ShuffleLinearSpec, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply a shuffle layer where row ``b`` of ``x`` uses parameter row ``b``."""
    if params.dim() != 2 or params.shape[1] != spec.param_count:
        raise ConfigError(
            f"expected params (B, {spec.param_count}) for {spec}, got {tuple(params.shape)}"
        )
    if x.dim() != 2 or x.shape[1] != spec.d_in:
        raise ConfigError(f"expected input (B, {spec.d_in}), got {tuple(x.shape)}")
    if params.shape[0] != x.shape[0]:
        raise ConfigError(f"batch mismatch: {params.shape[0]} parameter rows for {x.shape[0]} inputs")
    out = grouped_matmul(_shuffle_input(spec, x), _blocks(spec, params))
    return out.reshape(x.shape[0], spec.d_out)


def dense_weight(spec: ShuffleLinearSpec, params: torch.Tensor) -> torch.Tensor:
    """Materialize the (d_in, d_out) matrix such that ``forward == x @ W``."""
    w = _blocks(spec, params)
    dense = params.new_zeros(spec.d_in, spec.d_out)
    perm = _permutation(spec).reshape(spec.groups, spec.group_in)
    cols = torch.arange(spec.d_out).reshape(spec.groups, spec.group_out)
    rows = perm[:, :, None].expand(-1, -1, spec.group_out)
    cols = cols[:, None, :].expand(-1, spec.group_in, -1)
    dense = dense.index_put((rows.reshape(-1), cols.reshape(-1)), w.reshape(-1))
    return dense


def params_from_dense(spec: ShuffleLinearSpec, dense: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dense_weight`.

    Raises ConfigError if ``dense`` has mass outside the layer's support, or,
    in shared mode, if the blocks it implies are not identical.
    """
    wire = wiring(spec)
    outside = dense[torch.from_numpy(~wire.mask())]
    if outside.numel() and bool((outside != 0).any()):
        raise ConfigError(
            "matrix has nonzero entries outside the shuffle layer support: output group j "
            f"only sees subgroup j of each input group (d_in={spec.d_in}, d_out={spec.d_out}, "
            f"groups={spec.groups})"
        )
    blocks = torch.stack(
        [
            dense[torch.from_numpy(wire.block_inputs(j))][:, torch.from_numpy(wire.block_outputs(j))]
            for j in range(spec.groups)
        ]
    )
    if spec.shared:
        if not all(torch.equal(blocks[0], b) for b in blocks[1:]):
            raise ConfigError("shared shuffle layer requires identical blocks for every output group")
        blocks = blocks[:1]
    return blocks.reshape(-1)


@dataclass(frozen=True)
class LayoutEntry:
    layer: int
    block_shape: tuple[int, int, int]
    offset: int

    @property
    def size(self) -> int:
        a, b, c = self.block_shape
        return a * b * c


@dataclass(frozen=True)
class FusionParamLayout:
    """Maps one flat parameter vector onto every layer of the fusion sub-network."""

    specs: tuple[ShuffleLinearSpec, ...]
    entries: tuple[LayoutEntry, ...] = field(init=False)

    def __post_init__(self):
        entries, offset = [], 0
        for i, s in enumerate(self.specs):
            entries.append(LayoutEntry(i, (s.n_blocks, s.group_in, s.group_out), offset))
            offset += s.param_count
        object.__setattr__(self, "entries", tuple(entries))

    @property
    def total(self) -> int:
        return sum(e.size for e in self.entries)

    def split(self, flat: torch.Tensor) -> list[torch.Tensor]:
        if flat.shape[-1] != self.total:
            raise ConfigError(f"layout expects {self.total} params, got {flat.shape[-1]}")
        return [flat[..., e.offset : e.offset + e.size] for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "specs": [s.to_dict() for s in self.specs],
            "entries": [
                {"layer": e.layer, "block_shape": list(e.block_shape), "offset": e.offset}
                for e in self.entries
            ],
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionParamLayout":
        layout = cls(tuple(ShuffleLinearSpec(**s) for s in d["specs"]))
        if layout.to_dict() != d:
            raise ConfigError("fusion layout in manifest does not match its layer specs")
        return layout
