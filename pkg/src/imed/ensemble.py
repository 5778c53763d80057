"""Instance-aware ensemble: endogeny hypernetwork, per-instance fusion, head J."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from imed import shuffle
from imed.conditioning import (
    DEFAULT_PROJECTION_DIM,
    ConditioningVector,
    RandomProjection,
    assemble_v1,
    condition,
    conditioning_width,
    uses_exact_map,
)
from imed.errors import ConfigError
from imed.objectives import Discriminator
from imed.shuffle import FusionParamLayout, ShuffleLinearSpec

FUSION_KINDS = ("shuffle", "dense", "avg")


@dataclass
class EnsembleOutput:
    fusion_params: torch.Tensor | None  # (B, P_total)
    feature: torch.Tensor  # (B, d_e)
    logits: torch.Tensor  # (B, d_g)


def assemble_v2(features: Sequence[torch.Tensor]) -> torch.Tensor:
    if not features:
        raise ConfigError("need at least one feature matrix")
    shape = features[0].shape
    for i, f in enumerate(features):
        if f.shape != shape:
            raise ConfigError(f"component {i} features {tuple(f.shape)} differ from {tuple(shape)}")
    if len(features) == 1:
        return features[0]
    return torch.cat(list(features), dim=-1)


def fusion_specs(n_components: int, feature_dim: int, groups: int, depth: int, tau: int = shuffle.DEFAULT_TAU):
    if depth < 1:
        raise ConfigError(f"fusion depth must be >= 1, got {depth}")
    specs = [ShuffleLinearSpec(n_components * feature_dim, feature_dim, groups, tau)]
    specs += [ShuffleLinearSpec(feature_dim, feature_dim, groups, tau) for _ in range(depth - 1)]
    return tuple(specs)


class EnsembleModel(nn.Module):
    """Teacher ensemble over ``n_components`` frozen-interface component outputs.

    ``fusion_kind``: ``shuffle`` uses ``groups`` groups, ``dense`` forces one
    group (fully connected), ``avg`` replaces the fusion sub-network by the
    mean of component features (head J still applies). With ``instance_aware=False``
    the fusion parameters are a single learned vector shared by all inputs.
    """

    def __init__(
        self,
        n_components: int,
        feature_dim: int,
        num_classes: int,
        groups: int = 4,
        depth: int = 2,
        hidden: int = 256,
        tau: int = shuffle.DEFAULT_TAU,
        fusion_kind: str = "shuffle",
        instance_aware: bool = True,
        disc_hidden: int = 1024,
        projection_dim: int = DEFAULT_PROJECTION_DIM,
        projection_seed: int = 0,
        softmax_conditioning: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"fusion_kind must be one of {FUSION_KINDS}, got {fusion_kind!r}")
        if n_components < 1:
            raise ConfigError("need at least one component")
        self.n_components, self.feature_dim, self.num_classes = n_components, feature_dim, num_classes
        self.fusion_kind, self.instance_aware = fusion_kind, instance_aware
        self.softmax_conditioning = softmax_conditioning
        self.hparams = dict(
            n_components=n_components, feature_dim=feature_dim, num_classes=num_classes, groups=groups,
            depth=depth, hidden=hidden, tau=tau, fusion_kind=fusion_kind, instance_aware=instance_aware,
            disc_hidden=disc_hidden, projection_dim=projection_dim, projection_seed=projection_seed,
            softmax_conditioning=softmax_conditioning, seed=seed,
        )  # fmt: skip

        self.projection = None
        if not uses_exact_map(feature_dim, num_classes):
            self.projection = RandomProjection.create(feature_dim, num_classes, projection_dim, projection_seed)
        cond_width = conditioning_width(feature_dim, num_classes, projection_dim)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layout: FusionParamLayout | None = None
            self.endogeny: nn.Sequential | None = None
            self.static_params: nn.Parameter | None = None
            if fusion_kind != "avg":
                h = 1 if fusion_kind == "dense" else groups
                self.layout = FusionParamLayout(fusion_specs(n_components, feature_dim, h, depth, tau))
                total = self.layout.total
                scale = torch.cat(
                    [torch.full((e.size,), 1 / math.sqrt(e.block_shape[1])) for e in self.layout.entries]
                )
                self.register_buffer("param_scale", scale)
                if instance_aware:
                    self.endogeny = nn.Sequential(
                        nn.Linear(n_components * cond_width, hidden),
                        nn.ReLU(),
                        nn.Linear(hidden, hidden),
                        nn.ReLU(),
                        nn.Linear(hidden, total),
                    )
                    # unit-variance bias: a random static fusion network to start from
                    nn.init.normal_(self.endogeny[-1].bias)
                else:
                    self.static_params = nn.Parameter(torch.randn(total))
            self.head = nn.Linear(feature_dim, num_classes)
            self.discriminator = Discriminator(cond_width, hidden=disc_hidden)

    @property
    def specs(self) -> tuple[ShuffleLinearSpec, ...]:
        return self.layout.specs if self.layout is not None else ()

    def conditioning(self, f: torch.Tensor, logits: torch.Tensor) -> ConditioningVector:
        g = F.softmax(logits, dim=-1) if self.softmax_conditioning else logits
        return condition(f, g, self.projection)

    def fusion_parameters(self, features: Sequence[torch.Tensor], logits: Sequence[torch.Tensor]) -> torch.Tensor:
        batch = features[0].shape[0]
        if self.instance_aware:
            v1 = assemble_v1([self.conditioning(f, g) for f, g in zip(features, logits)])
            expected = self.endogeny[0].in_features
            if v1.shape[1] != expected:
                raise ConfigError(f"endogeny expects {expected} conditioning features, got {v1.shape[1]}")
            return self.endogeny(v1) * self.param_scale
        return (self.static_params * self.param_scale).expand(batch, -1)

    def fuse(self, fusion_params: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
        x = v2
        blocks = self.layout.split(fusion_params)
        for i, (spec, p) in enumerate(zip(self.layout.specs, blocks)):
            x = shuffle.forward_per_instance(spec, p, x)
            if i < len(blocks) - 1:
                x = F.relu(x)
        return x

    def forward(self, features: Sequence[torch.Tensor], logits: Sequence[torch.Tensor]) -> EnsembleOutput:
        if len(features) != self.n_components or len(logits) != self.n_components:
            raise ConfigError(
                f"ensemble built for {self.n_components} components, got {len(features)} feature sets"
            )
        for f, g in zip(features, logits):
            if f.shape[-1] != self.feature_dim or g.shape[-1] != self.num_classes:
                raise ConfigError(
                    f"component output dims ({f.shape[-1]}, {g.shape[-1]}) do not match "
                    f"({self.feature_dim}, {self.num_classes})"
                )
        if self.fusion_kind == "avg":
            feat = torch.stack(list(features)).mean(0)
            return EnsembleOutput(None, feat, self.head(feat))
        params = self.fusion_parameters(features, logits)
        feat = self.fuse(params, assemble_v2(features))
        return EnsembleOutput(params, feat, self.head(feat))

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into the SAM-updated side (E and J) and D."""
        ensemble: list[nn.Parameter] = []
        if self.endogeny is not None:
            ensemble += list(self.endogeny.parameters())
        if self.static_params is not None:
            ensemble.append(self.static_params)
        ensemble += list(self.head.parameters())
        return {"ensemble": ensemble, "discriminator": list(self.discriminator.parameters())}

    def inference_parameter_count(self) -> int:
        groups = self.trainable_groups()
        return sum(p.numel() for p in groups["ensemble"])


def ensemble_forward(model: EnsembleModel, features, logits) -> EnsembleOutput:
    return model(features, logits)


def averaging_matrix(n_components: int, feature_dim: int, dtype=torch.float64) -> torch.Tensor:
    """Dense (n*d_f, d_f) matrix whose product with V2 is the feature mean."""
    eye = torch.eye(feature_dim, dtype=dtype) / n_components
    return torch.cat([eye] * n_components, dim=0)


def supports_averaging(spec: ShuffleLinearSpec, n_components: int, feature_dim: int) -> bool:
    try:
        shuffle.params_from_dense(spec, averaging_matrix(n_components, feature_dim))
    except ConfigError:
        return False
    return True


def averaging_params(model: EnsembleModel) -> torch.Tensor:
    """Flat fusion parameters that make the fusion output the mean of component features.

    Needs a single fusion layer whose support contains every "diagonal"
    connection (input ``c * d_f + k`` to output ``k``).
    """
    if model.layout is None or len(model.layout.specs) != 1:
        raise ConfigError("averaging parameters need exactly one fusion layer")
    spec = model.layout.specs[0]
    dense = averaging_matrix(model.n_components, model.feature_dim, model.head.weight.dtype)
    try:
        return shuffle.params_from_dense(spec, dense)
    except ConfigError as err:
        raise ConfigError(
            f"averaging is not representable with groups={spec.groups}: feature k of every component "
            f"must sit in subgroup k // (d_f / groups) of its input group ({err})"
        ) from None


@torch.no_grad()
def install_fusion_params(model: EnsembleModel, flat: torch.Tensor):
    """Make the endogeny network emit ``flat`` for every instance."""
    if model.endogeny is not None:
        last = model.endogeny[-1]
        last.weight.zero_()
        last.bias.copy_(flat / model.param_scale)
    elif model.static_params is not None:
        model.static_params.copy_(flat / model.param_scale)
    else:
        raise ConfigError("averaging ensembles have no fusion parameters")


def lemma2_check(head_weight: torch.Tensor, features: Sequence[torch.Tensor], head_bias: torch.Tensor | None = None):
    """Label averaging vs feature averaging under one shared affine head.

    Returns ``(mean_i(W f_i + b), W mean_i(f_i) + b)``.
    """
    bias = 0 if head_bias is None else head_bias
    label_avg = torch.stack([f @ head_weight.T + bias for f in features]).mean(0)
    feat_avg = torch.stack(list(features)).mean(0) @ head_weight.T + bias
    return label_avg, feat_avg
