"""Component UDA models: MLP feature extractors, affine heads, per-model losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from imed.conditioning import RandomProjection, condition, conditioning_width, uses_exact_map
from imed.errors import ConfigError
from imed.objectives import Discriminator, cross_entropy, grad_reverse, loss_dc

METHODS = ("source_only", "jan_like", "cdan_like")
DOMAINS = ("source", "target")


@dataclass
class DomainBatch:
    inputs: torch.Tensor
    labels: torch.Tensor | None
    domain: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.inputs.dim() != 2 or self.inputs.shape[0] == 0:
            raise ConfigError(f"inputs must be a non-empty (B, d_x) matrix, got {tuple(self.inputs.shape)}")
        if (self.labels is not None) != (self.domain == "source"):
            raise ConfigError("labels must be present for source batches and absent for target batches")
        if self.labels is not None:
            if self.labels.shape != (self.inputs.shape[0],):
                raise ConfigError("one label per input row required")
            if self.num_classes is not None and int(self.labels.max()) >= self.num_classes:
                raise ConfigError(f"label {int(self.labels.max())} out of range for {self.num_classes} classes")
            if int(self.labels.min()) < 0:
                raise ConfigError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def mlp(d_in: int, hidden: Sequence[int], d_out: int) -> nn.Sequential:
    """Linear/ReLU stack with a linear output layer."""
    layers: list[nn.Module] = []
    width = d_in
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU()]
        width = h
    layers.append(nn.Linear(width, d_out))
    return nn.Sequential(*layers)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class ComponentModel(nn.Module):
    """Feature extractor F_i plus classifier G_i.

    ``cdan_like`` components carry their own small domain discriminator; it
    is training-only and excluded from :meth:`inference_parameter_count`.
    """

    def __init__(
        self,
        d_in: int,
        feature_dim: int,
        num_classes: int,
        seed: int,
        method: str = "source_only",
        hidden: Sequence[int] = (64, 64),
        head: nn.Linear | None = None,
        name: str = "component",
        projection_dim: int = 1024,
    ):
        super().__init__()
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
        self.d_in, self.feature_dim, self.num_classes = d_in, feature_dim, num_classes
        self.seed, self.method, self.name, self.hidden = seed, method, name, tuple(hidden)
        self.backbone = _seeded(seed, lambda: mlp(d_in, hidden, feature_dim))
        self.head = head if head is not None else _seeded(seed + 1, lambda: nn.Linear(feature_dim, num_classes))
        self.adversary: Discriminator | None = None
        self.projection: RandomProjection | None = None
        if method == "cdan_like":
            width = conditioning_width(feature_dim, num_classes, projection_dim)
            if not uses_exact_map(feature_dim, num_classes):
                self.projection = RandomProjection.create(feature_dim, num_classes, projection_dim, seed + 2)
            self.adversary = _seeded(seed + 3, lambda: Discriminator(width, hidden=64))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.backbone(x)
        return features, self.head(features)

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def inference_parameter_count(self) -> int:
        return sum(p.numel() for p in self.backbone.parameters()) + sum(p.numel() for p in self.head.parameters())


def build_components(
    d_in: int,
    num_classes: int,
    seeds: Sequence[int],
    methods: Sequence[str],
    feature_dim: int = 32,
    hidden: Sequence[int] = (64, 64),
    share_head: bool = False,
) -> list[ComponentModel]:
    if len(methods) == 1:
        methods = list(methods) * len(seeds)
    if len(methods) != len(seeds):
        raise ConfigError(f"{len(seeds)} seeds but {len(methods)} methods")
    head = _seeded(seeds[0] + 1, lambda: nn.Linear(feature_dim, num_classes)) if share_head else None
    return [
        ComponentModel(d_in, feature_dim, num_classes, s, m, hidden, head=head, name=f"component{i}")
        for i, (s, m) in enumerate(zip(seeds, methods))
    ]


def unique_parameters(modules: Sequence[nn.Module]) -> list[nn.Parameter]:
    seen, out = set(), []
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def forward_component(model: ComponentModel, batch: DomainBatch) -> tuple[torch.Tensor, torch.Tensor]:
    if batch.inputs.shape[1] != model.d_in:
        raise ConfigError(
            f"{model.name}: backbone expects {model.d_in} input features, batch has {batch.inputs.shape[1]}"
        )
    return model(batch.inputs)


def gaussian_mmd(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Biased squared MMD with a Gaussian kernel.

    Bandwidth is the median pairwise distance of the pooled sample (1.0 if
    that median is zero). The median is not detached.
    """
    z = torch.cat([x, y], dim=0)
    sq = (z.unsqueeze(1) - z.unsqueeze(0)).pow(2).sum(-1)
    n = z.shape[0]
    if n < 2:
        return z.new_zeros(())
    off = ~torch.eye(n, dtype=torch.bool)
    sigma = torch.sqrt(sq[off] + 1e-12).median()
    if sigma.item() <= 1e-6:
        sigma = torch.ones((), dtype=z.dtype)
    k = torch.exp(-sq / (2 * sigma**2))
    nx = x.shape[0]
    kxx, kyy, kxy = k[:nx, :nx], k[nx:, nx:], k[:nx, nx:]
    return kxx.mean() + kyy.mean() - 2 * kxy.mean()


def component_loss(
    model: ComponentModel,
    source: DomainBatch,
    target: DomainBatch,
    weight: float = 1.0,
    reverse: bool = True,
) -> torch.Tensor:
    """Individual training loss of one component.

    ``source_only``: source cross-entropy. ``jan_like``: plus ``weight`` times
    Gaussian MMD between source and target features. ``cdan_like``: plus
    ``weight`` times the component's own conditional domain loss, with the
    feature path gradient-reversed when ``reverse`` is set.
    """
    if source.labels is None:
        raise ConfigError(f"{model.name}: source batch has no labels")
    fs, gs = forward_component(model, source)
    loss = cross_entropy(gs, source.labels)
    if model.method == "source_only":
        return loss
    ft, gt = forward_component(model, target)
    if model.method == "jan_like":
        return loss + weight * gaussian_mmd(fs, ft)
    cs = condition(fs, F.softmax(gs, dim=1), model.projection).values
    ct = condition(ft, F.softmax(gt, dim=1), model.projection).values
    if reverse:
        cs, ct = grad_reverse(cs), grad_reverse(ct)
    return loss + weight * loss_dc(model.adversary, cs, ct)
