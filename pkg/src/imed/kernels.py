"""Per-instance grouped matmul with a compiled core and a torch fallback.

The backend is chosen once at import. ``IMED_KERNEL=python`` forces the
torch path, ``IMED_KERNEL=compiled`` makes a missing extension an error.
"""
from __future__ import annotations

import os

import torch
from torch.autograd.function import once_differentiable

try:
    from imed import _grouped
except ImportError:  # extension not built
    _grouped = None

_requested = os.environ.get("IMED_KERNEL", "auto").lower()
if _requested not in {"auto", "compiled", "python"}:
    raise ImportError(f"IMED_KERNEL must be auto, compiled or python, got {_requested!r}")
if _requested == "compiled" and _grouped is None:
    raise ImportError("IMED_KERNEL=compiled but imed._grouped is not built")

BACKEND = "compiled" if (_grouped is not None and _requested != "python") else "python"

_COMPILED_DTYPES = (torch.float32, torch.float64)


def grouped_matmul_python(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """out[b, g, :] = x[b, g, :] @ w[b, g, :, :]."""
    return torch.matmul(x.unsqueeze(-2), w).squeeze(-2)


class _CompiledGroupedMatmul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, w):
        x = x.detach().contiguous()
        w = w.detach()
        out = x.new_empty((x.shape[0], x.shape[1], w.shape[3]))
        _grouped.grouped_forward(x.numpy(), w.numpy(), out.numpy())
        ctx.save_for_backward(x, w)
        return out

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out):
        x, w = ctx.saved_tensors
        grad_out = grad_out.contiguous()
        grad_x = grad_w = None
        if ctx.needs_input_grad[0]:
            grad_x = torch.empty_like(x)
            _grouped.grouped_backward_input(w.numpy(), grad_out.numpy(), grad_x.numpy())
        if ctx.needs_input_grad[1]:
            grad_w = x.new_empty((x.shape[0], x.shape[1], x.shape[2], grad_out.shape[2]))
            _grouped.grouped_backward_weight(x.numpy(), grad_out.numpy(), grad_w.numpy())
        return grad_x, grad_w


def grouped_matmul_compiled(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    if _grouped is None:
        raise RuntimeError("compiled kernel not available")
    w = w.expand(x.shape[0], *w.shape[-3:])
    return _CompiledGroupedMatmul.apply(x, w)


def grouped_matmul(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Batched per-group product of ``x`` (B, G, K) with ``w`` (B|1, G, K, M).

    Dispatches to the compiled kernel for CPU float32/float64 inputs of
    matching dtype, and to plain torch otherwise. The compiled path is only
    once differentiable.
    """
    if (
        BACKEND == "compiled"
        and x.device.type == "cpu"
        and x.dtype in _COMPILED_DTYPES
        and x.dtype == w.dtype
    ):
        return grouped_matmul_compiled(x, w)
    return grouped_matmul_python(x, w)

