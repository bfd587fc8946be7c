"""Tensor primitives, attention and gradient utilities.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
``finite_diff_check`` is an independent central-difference harness used to
validate those gradients, so it never calls autograd itself.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import torch


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when an API is called outside its contract."""


class EvaluationError(ArithmeticError):
    """Raised when a function under test produces a non-finite value."""


DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to deterministic kernels and a fixed thread count.

    Fixed thread count keeps reduction order (and therefore bits) stable.
    """
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch torch's default floating dtype."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def _require_shape(t: torch.Tensor, rank: int, name: str) -> None:
    if t.dim() != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {tuple(t.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of ``a[m, k]`` and ``b[k, n]`` (leading batch dims allowed)."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = a - a.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` for ``q[..., m, d]``, ``k[..., n, d]``, ``v[..., n, dv]``."""
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention head width must be positive")
    if k.shape[-1] != d:
        raise DimensionError(f"query width {d} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    weights = softmax_rows(matmul(q, k.transpose(-1, -2)) / math.sqrt(d))
    return matmul(weights, v)


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean (not sum) of squared differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Exact gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters that do not influence the loss receive zeros.
    """
    if loss.numel() != 1:
        raise UsageError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise UsageError("loss was not recorded on the tape (no grad_fn)")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    p: torch.Tensor,
    eps: float = 1e-4,
    analytic: torch.Tensor | None = None,
    indices: Sequence[int] | None = None,
    floor: float = 1e-12,
) -> float:
    """Compare autograd against central differences; return the max relative error.

    ``f`` maps a parameter tensor shaped like ``p`` to a scalar. ``indices``
    restricts the comparison to a subset of flat positions (large tensors).
    The error is ``|a - n| / max(|a| + |n|, floor)``; a floor above the
    differencing noise keeps gradients that are identically zero from
    reporting noise over noise.
    """
    p = p.detach()
    if analytic is None:
        leaf = p.clone().requires_grad_(True)
        out = f(leaf)
        if out.grad_fn is None:
            analytic = torch.zeros_like(p)
        else:
            (analytic,) = backward(out, [leaf])
    analytic = analytic.detach().reshape(-1)

    flat = p.reshape(-1)
    positions = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in positions:
            plus = flat.clone()
            minus = flat.clone()
            plus[i] += eps
            minus[i] -= eps
            fp = float(f(plus.reshape(p.shape)))
            fm = float(f(minus.reshape(p.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite function value at flat index {i}")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            worst = max(worst, err)
    return worst
