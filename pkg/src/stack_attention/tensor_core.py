"""Numeric primitives used throughout the package.

Tensors are plain :class:`torch.Tensor` objects and the differentiation tape
is torch's autograd graph. This module pins down the exact conventions the
rest of the package relies on (shift-stable softmax, ``-inf`` as a log-space
zero, population-variance layer norm, inverted dropout) and adds a
finite-difference gradient checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, ParameterError

LOG_ZERO = -math.inf


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(v: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if v.dim() == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    return torch.softmax(v, dim=axis)


def logsumexp(v: torch.Tensor, axis: int = -1, keepdim: bool = False) -> torch.Tensor:
    """``log(sum(exp(v)))`` treating ``-inf`` as zero mass.

    An axis that is entirely ``-inf`` yields ``-inf`` with a zero (not NaN)
    gradient.
    """
    if v.dim() == 0:
        raise DimensionError("logsumexp needs at least one axis")
    m = v.detach().amax(dim=axis, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    s = torch.exp(v - m).sum(dim=axis, keepdim=True)
    positive = s > 0
    out = torch.where(positive, torch.log(torch.where(positive, s, torch.ones_like(s))) + m,
                      torch.full_like(s, LOG_ZERO))
    return out if keepdim else out.squeeze(axis)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # Biased variance, eps inside the square root.
    if gain.shape != bias.shape or gain.shape[-1] != x.shape[-1]:
        raise DimensionError("gain/bias must match the normalized extent")
    return F.layer_norm(x, gain.shape, gain, bias, eps)


def logistic(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dropout(
    x: torch.Tensor,
    p: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Inverted dropout: identity in eval mode, survivors rescaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    try:
        loss.reshape(()).backward()
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise ContractError("the tape was already replayed; rebuild the graph first") from exc
        raise


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    num_coords: int


def _as_list(x: torch.Tensor | Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [x] if isinstance(x, torch.Tensor) else list(x)


def grad_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-6,
    numeric_f: Callable[..., torch.Tensor] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``f`` with central differences.

    Tensor-valued outputs are reduced to a scalar through a fixed random
    projection. ``numeric_f`` (default ``f``) evaluates the finite
    differences; pass a 64-bit twin of ``f`` to check a 32-bit graph. The
    error is the largest coordinate deviation divided by the largest
    reference-gradient magnitude.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    xs = [t.detach().clone().requires_grad_(True) for t in _as_list(x)]
    out = f(*xs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    loss = (out * proj.to(out.dtype)).sum()
    grads = torch.autograd.grad(loss, xs, allow_unused=True)
    analytic = torch.cat([
        (g if g is not None else torch.zeros_like(t)).detach().to(torch.float64).reshape(-1)
        for g, t in zip(grads, xs)
    ])

    nf = numeric_f or f
    base = [t.detach().to(torch.float64).clone() for t in xs]
    numeric = []
    with torch.no_grad():
        for j, b in enumerate(base):
            flat = b.view(-1)
            for c in range(flat.numel()):
                orig = flat[c].item()
                vals = []
                for step in (eps, -eps):
                    flat[c] = orig + step
                    args = [bb if numeric_f is not None else bb.to(xs[k].dtype) for k, bb in enumerate(base)]
                    y = nf(*args).to(torch.float64)
                    vals.append((y * proj).sum().item())
                flat[c] = orig
                numeric.append((vals[0] - vals[1]) / (2 * eps))
    numeric_t = torch.tensor(numeric, dtype=torch.float64)
    abs_err = (analytic - numeric_t).abs().max().item() if numeric else 0.0
    scale = max(numeric_t.abs().max().item() if numeric else 0.0, 1e-12)
    rel = abs_err / scale
    return GradCheckReport(rel <= tol, rel, abs_err, len(numeric))
