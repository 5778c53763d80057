"""Teacher-phase losses, gradient reversal, and the two-step SAM update."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from imed.conditioning import ConditioningVector
from imed.errors import ConfigError, NonFiniteError

DEFAULT_MCC_TEMPERATURE = 2.5


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.coeff * grad, None


def grad_reverse(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-coeff``."""
    return _ReverseGrad.apply(x, coeff)


class Discriminator(nn.Module):
    """Domain classifier on conditioning vectors; source -> 1, target -> 0."""

    def __init__(self, in_features: int, hidden: int = 1024, depth: int = 2):
        super().__init__()
        layers: list[nn.Module] = []
        width = in_features
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)
        self.in_features = in_features

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        eps = torch.finfo(x.dtype).eps
        return torch.sigmoid(self.logits(x)).clamp(eps, 1 - eps)


@dataclass
class LossBundle:
    l_ce: float = 0.0
    l_dc: float = 0.0
    l_c: float = 0.0
    mu1: float = 1.0
    mu2: float = 0.1
    mu3: float = 1.0
    rho: float = 0.02
    alpha: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise NonFiniteError(f"{k} is not finite: {v}", asdict(self))
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor | None) -> torch.Tensor:
    if labels is None:
        raise ConfigError("cross-entropy needs labels (source batch)")
    return F.cross_entropy(logits, labels)


def loss_ce(ensemble_logits: torch.Tensor, labels: torch.Tensor | None) -> torch.Tensor:
    """Mean source cross-entropy of the ensemble predictions."""
    return cross_entropy(ensemble_logits, labels)


def _values(c) -> torch.Tensor:
    return c.values if isinstance(c, ConditioningVector) else c


def loss_dc(disc: Discriminator, source_cond, target_cond) -> torch.Tensor:
    """-E_s log D - E_t log(1 - D), each expectation a batch mean."""
    src, tgt = _values(source_cond), _values(target_cond)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ConfigError("domain loss needs non-empty source and target batches")
    ls, lt = disc.logits(src), disc.logits(tgt)
    return F.binary_cross_entropy_with_logits(ls, torch.ones_like(ls)) + F.binary_cross_entropy_with_logits(
        lt, torch.zeros_like(lt)
    )


def loss_mcc(target_logits: torch.Tensor, temperature: float = DEFAULT_MCC_TEMPERATURE) -> torch.Tensor:
    """Minimum class confusion on a target batch.

    Temperature-scaled probabilities, entropy-based certainty weights
    (1 + exp(-H)) normalized to sum to the batch size, class correlation
    ``P^T diag(w) P``, row normalization, then the mean off-diagonal row mass.
    """
    batch, n_classes = target_logits.shape
    probs = F.softmax(target_logits / temperature, dim=1)
    entropy = -(probs * torch.log(probs + 1e-5)).sum(dim=1)
    weight = 1 + torch.exp(-entropy)
    weight = batch * weight / weight.sum()
    confusion = (probs * weight.unsqueeze(1)).T @ probs
    # a class no instance predicts has an all-zero row
    confusion = confusion / confusion.sum(dim=1, keepdim=True).clamp_min(torch.finfo(confusion.dtype).tiny)
    return (confusion.sum() - torch.trace(confusion)) / n_classes


def adversarial_loss(disc: Discriminator, source_cond, target_cond, mu1: float) -> torch.Tensor:
    """``mu1 * L_DC`` with the feature path reversed.

    Backpropagating this gives the discriminator ``+mu1 dL_DC`` (descent) and
    everything upstream of the conditioning vectors ``-mu1 dL_DC``.
    """
    src = grad_reverse(_values(source_cond))
    tgt = grad_reverse(_values(target_cond))
    return mu1 * loss_dc(disc, src, tgt)


def teacher_objective(l_ce: torch.Tensor, l_c: torch.Tensor, l_dc: torch.Tensor, mu1: float) -> dict[str, torch.Tensor]:
    """Scalar objective per parameter group of the min-max game.

    The ensemble/head side minimizes ``L_CE + mu1 * (L_C - L_DC)``; the
    discriminator minimizes ``mu1 * L_DC``.
    """
    return {"ensemble": l_ce + mu1 * (l_c - l_dc), "discriminator": mu1 * l_dc}


def _flat_norm(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.sqrt(sum((t.double() ** 2).sum() for t in tensors))


@dataclass
class SamStepInfo:
    grad_norm: float
    eps_norm: float


class SAM:
    """Sharpness-aware wrapper around a base optimizer.

    ``eps = rho * g / ||g||`` uses one joint norm over all wrapped parameters.
    """

    def __init__(self, params: Sequence[torch.Tensor], base_optimizer: torch.optim.Optimizer, rho: float = 0.02):
        if rho < 0:
            raise ConfigError(f"rho must be >= 0, got {rho}")
        self.params = list(params)
        self.base_optimizer = base_optimizer
        self.rho = rho
        self._backup: list[torch.Tensor] | None = None

    @torch.no_grad()
    def ascent(self, grads: Sequence[torch.Tensor]) -> tuple[SamStepInfo, list[torch.Tensor] | None]:
        """Return ``eps`` (None when rho or the gradient is zero)."""
        norm = _flat_norm(grads)
        if not torch.isfinite(norm):
            raise NonFiniteError("non-finite gradient in SAM ascent step", {"grad_norm": float(norm)})
        if self.rho == 0 or norm == 0:
            return SamStepInfo(float(norm), 0.0), None
        scale = self.rho / norm
        eps = [(g.double() * scale).to(g.dtype) for g in grads]
        return SamStepInfo(float(norm), float(_flat_norm(eps))), eps

    @torch.no_grad()
    def apply(self, eps: Sequence[torch.Tensor]):
        self._backup = [p.detach().clone() for p in self.params]
        for p, e in zip(self.params, eps):
            p.add_(e)

    @torch.no_grad()
    def restore(self):
        if self._backup is None:
            return
        for p, b in zip(self.params, self._backup):
            p.copy_(b)
        self._backup = None


def sam_step(
    sam: SAM,
    task_loss: torch.Tensor,
    closure: Callable[[], torch.Tensor],
    adversarial: torch.Tensor | None = None,
    extra_optimizers: Sequence[torch.optim.Optimizer] = (),
    max_grad_norm: float = 0.0,
) -> SamStepInfo:
    """One two-step SAM update.

    ``task_loss`` holds the perturbed terms (L_CE + mu1 L_C) evaluated at the
    current parameters and ``closure`` recomputes them. ``adversarial`` is the
    reversed-gradient domain term at the unperturbed parameters; it is never
    re-evaluated, so the discriminator (and any module stepped by
    ``extra_optimizers``) gets its gradient from that single evaluation.
    Callers zero gradients beforehand. ``max_grad_norm > 0`` clips the final
    gradient of each optimizer's parameters to that norm before stepping.
    """
    opts = [sam.base_optimizer, *extra_optimizers]
    if not torch.isfinite(task_loss):
        raise NonFiniteError("non-finite task loss", {"task_loss": float(task_loss.detach())})
    grads = torch.autograd.grad(task_loss, sam.params, retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(sam.params, grads)]
    info, eps = sam.ascent(grads)
    if eps is None:
        # nothing to perturb: one backward of the full objective
        total = task_loss if adversarial is None else task_loss + adversarial
        total.backward()
    else:
        if adversarial is not None:
            adversarial.backward()
        sam.apply(eps)
        try:
            loss2 = closure()
            if not torch.isfinite(loss2):
                raise NonFiniteError("non-finite task loss at perturbed point", {"task_loss": float(loss2)})
            loss2.backward()
        finally:
            sam.restore()
    for p in sam.params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            for opt in opts:
                opt.zero_grad(set_to_none=True)
            raise NonFiniteError("non-finite gradient in SAM descent step", {"grad_norm": info.grad_norm})
    for opt in opts:
        if max_grad_norm > 0:
            params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, max_grad_norm)
        opt.step()
    return info
