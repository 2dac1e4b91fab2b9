"""Parameter initialization for :class:`~stack_attention.model.TransformerLM`.

* weights of fully-connected layers outside SDPA: Xavier uniform
* layer-norm gains 1, biases 0
* everything else (SDPA projections, embeddings, biases, the learned initial
  stack vector): uniform in [-0.1, 0.1]
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

UNIFORM_BOUND = 0.1


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _uniform_(p: torch.Tensor, bound: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * (2 * bound) - bound)


def init_parameters(model: nn.Module, generator: torch.Generator) -> nn.Module:
    # Imported here to avoid a cycle (the model module builds on this one).
    from .attention import MultiHeadSdpa

    sdpa_params = {
        id(p) for mod in model.modules() if isinstance(mod, MultiHeadSdpa) for p in mod.parameters()
    }
    handled = set()
    for mod in model.modules():
        if isinstance(mod, nn.LayerNorm):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
            handled.update((id(mod.weight), id(mod.bias)))
        elif isinstance(mod, nn.Linear) and id(mod.weight) not in sdpa_params:
            fan_out, fan_in = mod.weight.shape
            _uniform_(mod.weight, xavier_bound(fan_in, fan_out), generator)
            handled.add(id(mod.weight))
    for _, p in model.named_parameters():
        if id(p) not in handled:
            _uniform_(p, UNIFORM_BOUND, generator)
    return model
