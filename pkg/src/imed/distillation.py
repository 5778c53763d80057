"""Student model and the distillation objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from imed.components import _seeded, mlp
from imed.errors import ConfigError
from imed.objectives import cross_entropy

FEATURE_MODES = ("softmax", "mse")


class StudentModel(nn.Module):
    """Backbone H1 (same family as a component backbone) and affine head H2."""

    def __init__(self, d_in: int, feature_dim: int, num_classes: int, hidden: Sequence[int] = (64, 64), seed: int = 0):
        super().__init__()
        self.d_in, self.feature_dim, self.num_classes, self.hidden, self.seed = (
            d_in, feature_dim, num_classes, tuple(hidden), seed,
        )  # fmt: skip
        self.backbone = _seeded(seed, lambda: mlp(d_in, hidden, feature_dim))
        self.head = _seeded(seed + 1, lambda: nn.Linear(feature_dim, num_classes))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.backbone(x)
        return f, self.head(f)

    def inference_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class DistillOutputs:
    source_features: torch.Tensor
    source_logits: torch.Tensor
    target_features: torch.Tensor
    target_logits: torch.Tensor


def soft_cross_entropy(teacher: torch.Tensor, student: torch.Tensor, alpha: float) -> torch.Tensor:
    """Batch mean of ``-sum softmax(teacher/alpha) * log_softmax(student/alpha)``."""
    target = F.softmax(teacher / alpha, dim=-1)
    return -(target * F.log_softmax(student / alpha, dim=-1)).sum(-1).mean()


def soft_entropy(teacher: torch.Tensor, alpha: float) -> torch.Tensor:
    p = F.softmax(teacher / alpha, dim=-1)
    return -(p * F.log_softmax(teacher / alpha, dim=-1)).sum(-1).mean()


def kd_loss(
    teacher: DistillOutputs,
    student: DistillOutputs,
    alpha: float = 2.0,
    mu2: float = 0.1,
    feature_mode: str = "softmax",
) -> torch.Tensor:
    """alpha^2-scaled soft cross-entropy on source/target logits plus mu2-weighted feature terms.

    ``feature_mode="softmax"`` softens features like logits; ``"mse"`` uses a
    plain mean-squared feature distance (no alpha^2 factor).
    """
    if alpha < 1:
        raise ConfigError(f"alpha must be >= 1, got {alpha}")
    if feature_mode not in FEATURE_MODES:
        raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
    for name in ("source_features", "target_features", "source_logits", "target_logits"):
        t, s = getattr(teacher, name), getattr(student, name)
        if t.shape != s.shape:
            raise ConfigError(f"teacher/student {name} shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
    a2 = alpha * alpha
    loss = a2 * (
        soft_cross_entropy(teacher.source_logits, student.source_logits, alpha)
        + soft_cross_entropy(teacher.target_logits, student.target_logits, alpha)
    )
    if mu2 == 0:
        return loss
    if feature_mode == "softmax":
        feat = a2 * (
            soft_cross_entropy(teacher.source_features, student.source_features, alpha)
            + soft_cross_entropy(teacher.target_features, student.target_features, alpha)
        )
    else:
        feat = F.mse_loss(student.source_features, teacher.source_features) + F.mse_loss(
            student.target_features, teacher.target_features
        )
    return loss + mu2 * feat


def kd_entropy_floor(teacher: DistillOutputs, alpha: float = 2.0, mu2: float = 0.1) -> torch.Tensor:
    """Lower bound of the softmax-mode :func:`kd_loss`; reached iff the student matches."""
    a2 = alpha * alpha
    out = a2 * (soft_entropy(teacher.source_logits, alpha) + soft_entropy(teacher.target_logits, alpha))
    return out + mu2 * a2 * (
        soft_entropy(teacher.source_features, alpha) + soft_entropy(teacher.target_features, alpha)
    )


def student_ce(student_logits: torch.Tensor, labels: torch.Tensor | None) -> torch.Tensor:
    return cross_entropy(student_logits, labels)


def student_total(kd: torch.Tensor, ce: torch.Tensor, mu3: float) -> torch.Tensor:
    return kd + mu3 * ce
