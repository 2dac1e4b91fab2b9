"""Causal transformer language model with one swappable attention layer.

Token conventions: symbol ``i`` of the alphabet has index ``i`` on both
sides. The input side adds BOS at index ``|alphabet|`` and the output side
adds EOS at the same index, so logits have ``|alphabet| + 1`` columns and a
string ``x`` yields ``|x| + 1`` prediction rows.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from . import tensor_core as tc
from .attention import (
    NONDETERMINISTIC,
    SUPERPOSITION,
    FeedForward,
    MultiHeadSdpa,
    SdpaConfig,
    StackAttention,
    StackAttentionConfig,
    Sublayer,
    sinusoidal_encoding,
)
from .errors import InputError, ParameterError
from .initialization import init_parameters

SDPA = "sdpa"
VARIANTS = (SDPA, SUPERPOSITION, NONDETERMINISTIC)
CHECKPOINT_FORMAT = "stack-attention-lm"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    alphabet: tuple[str, ...]
    d_model: int = 32
    variant: str = SDPA
    num_layers: int = 5
    stack_layer: int = 3  # 1-based
    num_heads: int = 4
    ffn_hidden: int | None = None  # defaults to 2 * d_model
    dropout: float = 0.1
    m: int = 32
    num_states: int = 2
    num_symbols: int = 3

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if len(self.alphabet) == 0 or len(set(self.alphabet)) != len(self.alphabet):
            raise ParameterError("alphabet must be non-empty with distinct symbols")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_layers < 1 or not 1 <= self.stack_layer <= self.num_layers:
            raise ParameterError("stack_layer must lie in [1, num_layers]")
        if self.hidden < 1:
            raise ParameterError("ffn_hidden must be positive")
        if self.d_model % 2 != 0 or self.d_model % self.num_heads != 0:
            raise ParameterError("d_model must be even and divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")

    @property
    def hidden(self) -> int:
        return 2 * self.d_model if self.ffn_hidden is None else self.ffn_hidden

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    @property
    def special(self) -> int:
        """Index of BOS on the input side and of EOS on the output side."""
        return len(self.alphabet)

    def stack_config(self) -> StackAttentionConfig:
        return StackAttentionConfig(self.variant, self.m, self.num_states, self.num_symbols)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphabet"] = list(self.alphabet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def default_config(alphabet: Sequence[str], variant: str, **overrides) -> ModelConfig:
    """Sizes used for the CFL experiments: d_model 32 for the baseline and
    superposition models (m = 32); d_model 28 with m = 5, 2 states and 3
    stack symbols for the nondeterministic model."""
    sizes = {
        SDPA: dict(d_model=32),
        SUPERPOSITION: dict(d_model=32, m=32),
        NONDETERMINISTIC: dict(d_model=28, m=5, num_states=2, num_symbols=3),
    }
    if variant not in sizes:
        raise ParameterError(f"unknown variant {variant!r}")
    return ModelConfig(alphabet=tuple(alphabet), variant=variant, **{**sizes[variant], **overrides})


class Layer(nn.Module):
    def __init__(self, config: ModelConfig, use_stack: bool):
        super().__init__()
        d = config.d_model
        if use_stack:
            fn = StackAttention(d, config.stack_config())
        else:
            fn = MultiHeadSdpa(SdpaConfig(d, config.num_heads, causal=True, dropout_p=config.dropout))
        self.attention = Sublayer(d, fn, config.dropout)
        self.feedforward = Sublayer(d, FeedForward(d, config.hidden, config.dropout), config.dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.feedforward(self.attention(h))


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embedding = nn.Embedding(config.vocab_size + 1, d)
        self.layers = nn.ModuleList(
            Layer(config, use_stack=(config.variant != SDPA and i + 1 == config.stack_layer))
            for i in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, config.vocab_size + 1)
        self._pe = torch.zeros(0, d)

    @property
    def stack_attention(self) -> StackAttention | None:
        if self.config.variant == SDPA:
            return None
        return self.layers[self.config.stack_layer - 1].attention.fn

    def positions(self, n: int) -> torch.Tensor:
        if self._pe.shape[0] < n:
            self._pe = sinusoidal_encoding(max(n, 128), self.config.d_model)
        return self._pe[:n]

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens`` is ``(batch, |x|)`` of symbol indices; BOS is prepended."""
        B = tokens.shape[0]
        bos = torch.full((B, 1), self.config.special, dtype=torch.long)
        inputs = torch.cat([bos, tokens.long()], dim=1)
        h = self.embedding(inputs) * math.sqrt(self.config.d_model)
        h = h + self.positions(inputs.shape[1]).to(h.dtype)
        return tc.dropout(h, self.config.dropout, self.training)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits ``(batch, |x| + 1, |alphabet| + 1)``."""
        check_tokens(tokens, self.config.vocab_size)
        h = self.embed(tokens)
        for layer in self.layers:
            h = layer(h)
        return self.output(self.final_norm(h))

    def stack_actions(self, tokens: torch.Tensor) -> torch.Tensor:
        """Actions of the stack layer for each input position including BOS:
        probability triples for superposition, log transition weights for the
        nondeterministic variant."""
        stack = self.stack_attention
        if stack is None:
            raise ParameterError("model has no stack attention layer")
        check_tokens(tokens, self.config.vocab_size)
        h = self.embed(tokens)
        for layer in self.layers[: self.config.stack_layer - 1]:
            h = layer(h)
        sub = self.layers[self.config.stack_layer - 1].attention
        x = tc.layer_norm(h, sub.norm.weight, sub.norm.bias, sub.norm.eps)
        _, actions = stack(x, return_actions=True)
        return actions


def check_tokens(tokens: torch.Tensor, vocab_size: int) -> None:
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size):
        raise InputError(f"token index outside [0, {vocab_size})")


def build_model(config: ModelConfig, seed: int = 0) -> TransformerLM:
    model = TransformerLM(config)
    init_parameters(model, torch.Generator().manual_seed(seed))
    return model


def encode(config: ModelConfig, text: str | Sequence[str]) -> torch.Tensor:
    """Map a string over the alphabet to a 1-D index tensor."""
    index = {s: i for i, s in enumerate(config.alphabet)}
    try:
        return torch.tensor([index[c] for c in text], dtype=torch.long)
    except KeyError as exc:
        raise InputError(f"symbol {exc.args[0]!r} is not in the alphabet {config.alphabet}") from None


def _as_batch(model: TransformerLM, tokens) -> torch.Tensor:
    if isinstance(tokens, str):
        tokens = encode(model.config, tokens)
    t = torch.as_tensor(tokens, dtype=torch.long)
    return t.reshape(1, -1)


def forward_logits(model: TransformerLM, tokens) -> torch.Tensor:
    """Logits ``(|x| + 1, |alphabet| + 1)`` for one sequence."""
    return model(_as_batch(model, tokens))[0]


def batch_logprobs(model: TransformerLM, tokens: torch.Tensor) -> torch.Tensor:
    """Per-sequence log-probabilities (EOS included) for a ``(B, n)`` batch."""
    logits = model(tokens)
    B = tokens.shape[0]
    targets = torch.cat([tokens.long(), torch.full((B, 1), model.config.special, dtype=torch.long)], dim=1)
    logp = torch.log_softmax(logits, dim=-1)
    return logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).sum(dim=1)


def sequence_logprob(model: TransformerLM, tokens) -> float:
    with torch.no_grad():
        return float(batch_logprobs(model, _as_batch(model, tokens))[0])


def parameter_breakdown(model: nn.Module) -> dict[str, int]:
    """Learnable scalars per top-level component (per sublayer for layers)."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "layers" else parts[0]
        out[key] = out.get(key, 0) + p.numel()
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path: str | Path, model: TransformerLM, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[TransformerLM, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {blob.get('version')}")
    model = TransformerLM(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
