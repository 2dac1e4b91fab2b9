"""Attention sublayers: causal multi-head SDPA, the pre-norm residual
wrapper, sinusoidal positions, and the two stack-attention variants.

All modules take ``(batch, n, d_model)`` inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from . import tensor_core as tc
from .errors import ContractError, DimensionError, ParameterError
from .stacks.superposition import superposition_readings
from .stacks.vpda import VpdaConfig, vpda_readings

SUPERPOSITION = "superposition"
NONDETERMINISTIC = "nondeterministic"


def sinusoidal_encoding(n: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    """``PE[pos, 2i] = sin(pos / 10000^(2i/d))``, ``PE[pos, 2i+1] = cos(...)``."""
    if d_model % 2 != 0 or d_model <= 0:
        raise ParameterError(f"sinusoidal encoding needs an even positive width, got {d_model}")
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    inv_freq = torch.exp(-math.log(10000.0) * torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(n, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv_freq)
    pe[:, 1::2] = torch.cos(pos * inv_freq)
    return pe.to(dtype)


# -- SDPA ---------------------------------------------------------------------

@dataclass(frozen=True)
class SdpaConfig:
    d_model: int
    num_heads: int
    causal: bool = True
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ParameterError(f"d_model={self.d_model} is not divisible into {self.num_heads} heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError("dropout_p must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


def sdpa_multihead(
    x: torch.Tensor,
    config: SdpaConfig,
    in_weight: torch.Tensor,
    in_bias: torch.Tensor,
    out_weight: torch.Tensor,
    out_bias: torch.Tensor,
    training: bool = False,
    generator: torch.Generator | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with a fused ``3d x d`` input
    projection. Heads are concatenated before the output projection, which
    equals summing per-head projections."""
    B, n, d = x.shape
    if d != config.d_model:
        raise DimensionError(f"expected width {config.d_model}, got {d}")
    h, dk = config.num_heads, config.d_head
    qkv = torch.nn.functional.linear(x, in_weight, in_bias)
    q, k, v = (t.reshape(B, n, h, dk).transpose(1, 2) for t in qkv.split(d, dim=-1))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
    if config.causal:
        mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, -math.inf)
    z = tc.softmax(scores, axis=-1)
    z_drop = tc.dropout(z, config.dropout_p, training, generator)
    heads = (z_drop @ v).transpose(1, 2).reshape(B, n, d)
    out = torch.nn.functional.linear(heads, out_weight, out_bias)
    return (out, z) if return_weights else out


class MultiHeadSdpa(nn.Module):
    def __init__(self, config: SdpaConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.in_proj = nn.Linear(d, 3 * d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return sdpa_multihead(
            x, self.config, self.in_proj.weight, self.in_proj.bias,
            self.out_proj.weight, self.out_proj.bias, training=self.training,
        )


# -- sublayer wrapper ---------------------------------------------------------

def sublayer_apply(
    f: Callable[[torch.Tensor], torch.Tensor],
    h: torch.Tensor,
    norm: nn.LayerNorm,
    dropout_p: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pre-norm residual sublayer: ``h + Dropout(f(LayerNorm(h)))``."""
    x = tc.layer_norm(h, norm.weight, norm.bias, norm.eps)
    y = f(x)
    if y.shape != h.shape:
        raise ContractError(f"sublayer function returned {tuple(y.shape)} for input {tuple(h.shape)}")
    return h + tc.dropout(y, dropout_p, training, generator)


class Sublayer(nn.Module):
    def __init__(self, d_model: int, fn: nn.Module, dropout_p: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.fn = fn
        self.dropout_p = dropout_p

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return sublayer_apply(self.fn, h, self.norm, self.dropout_p, self.training)


class FeedForward(nn.Module):
    """Two affine maps with a ReLU between; dropout on the hidden units."""

    def __init__(self, d_model: int, hidden: int, dropout_p: float = 0.0):
        super().__init__()
        self.linear1 = nn.Linear(d_model, hidden)
        self.linear2 = nn.Linear(hidden, d_model)
        self.dropout_p = dropout_p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = torch.relu(self.linear1(x))
        return self.linear2(tc.dropout(hidden, self.dropout_p, self.training))


# -- stack attention ----------------------------------------------------------

@dataclass(frozen=True)
class StackAttentionConfig:
    variant: str
    m: int
    num_states: int = 1
    num_symbols: int = 1

    def __post_init__(self):
        if self.variant not in (SUPERPOSITION, NONDETERMINISTIC):
            raise ParameterError(f"unknown stack attention variant {self.variant!r}")
        if self.m < 1 or self.num_states < 1 or self.num_symbols < 1:
            raise ParameterError("stack sizes must be positive")

    @property
    def vpda(self) -> VpdaConfig:
        return VpdaConfig(self.num_states, self.num_symbols, self.m)

    @property
    def action_size(self) -> int:
        return 3 if self.variant == SUPERPOSITION else self.vpda.action_size

    @property
    def reading_size(self) -> int:
        return self.m if self.variant == SUPERPOSITION else self.vpda.reading_size


def superposition_attention(x, w_a, w_v, w_y, return_actions: bool = False):
    """Softmax actions and logistic pushed vectors drive a superposition
    stack; its readings are projected back to the model width."""
    actions = tc.softmax(torch.nn.functional.linear(x, w_a), axis=-1)
    pushed = tc.logistic(torch.nn.functional.linear(x, w_v))
    out = torch.nn.functional.linear(superposition_readings(actions, pushed), w_y)
    return (out, actions) if return_actions else out


def _rowwise_linear(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    # Explicit per-position dot products, so a position's result never depends
    # on how many positions are in the batch (GEMM kernels switch blocking
    # with the row count, which changes the rounding).
    return (x.unsqueeze(-2) * w).sum(-1)


def nondeterministic_attention(x, config: VpdaConfig, w_a, w_v, w_y, r0_logits, return_actions: bool = False):
    """Affine outputs are used directly as log transition weights of a dVPDA
    whose initial vector is ``logistic(r0_logits)``."""
    B = x.shape[0]
    log_weights = _rowwise_linear(x, w_a)
    pushed = tc.logistic(_rowwise_linear(x, w_v))
    r0 = tc.logistic(r0_logits).expand(B, config.m)
    readings = vpda_readings(log_weights, pushed, r0, config)
    out = _rowwise_linear(readings, w_y)
    return (out, log_weights) if return_actions else out


class StackAttention(nn.Module):
    """Stack attention sublayer function (either variant). The projections
    carry no biases."""

    def __init__(self, d_model: int, config: StackAttentionConfig):
        super().__init__()
        self.config = config
        self.action_proj = nn.Linear(d_model, config.action_size, bias=False)
        self.push_proj = nn.Linear(d_model, config.m, bias=False)
        self.read_proj = nn.Linear(config.reading_size, d_model, bias=False)
        if config.variant == NONDETERMINISTIC:
            self.initial_vector = nn.Parameter(torch.zeros(config.m))
        else:
            self.register_parameter("initial_vector", None)

    def forward(self, x: torch.Tensor, return_actions: bool = False):
        if self.config.variant == SUPERPOSITION:
            return superposition_attention(
                x, self.action_proj.weight, self.push_proj.weight, self.read_proj.weight, return_actions
            )
        return nondeterministic_attention(
            x, self.config.vpda, self.action_proj.weight, self.push_proj.weight,
            self.read_proj.weight, self.initial_vector, return_actions,
        )
