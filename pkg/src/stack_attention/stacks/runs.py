"""Exhaustive enumeration of vector-PDA runs.

This is a test oracle: it follows the push / replace / pop semantics one
transition at a time with explicit stacks, without any dynamic programming,
so it is only usable for very short inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError
from .vpda import VpdaConfig

MAX_RUNS = 10**6

PUSH, REPLACE, POP = "push", "replace", "pop"


@dataclass(frozen=True)
class Transition:
    state: int
    symbol: int
    next_state: int
    kind: str
    new_symbol: int | None  # None for pop


@dataclass(frozen=True)
class VpdaRun:
    transitions: tuple[Transition, ...]
    weight: float
    state: int
    # bottom-to-top; vector_ids index the pushed-vector list (0 is r0)
    symbols: tuple[int, ...]
    vector_ids: tuple[int, ...]

    @property
    def top_symbol(self) -> int:
        return self.symbols[-1]

    @property
    def top_vector_id(self) -> int:
        return self.vector_ids[-1]


def _decode(j: int, num_symbols: int) -> tuple[str, int | None]:
    if j < num_symbols:
        return PUSH, j
    if j < 2 * num_symbols:
        return REPLACE, j - num_symbols
    return POP, None


def enumerate_runs(
    log_weights: Sequence[np.ndarray],
    r0: np.ndarray,
    pushed: Sequence[np.ndarray],
    config: VpdaConfig,
    max_runs: int = MAX_RUNS,
) -> list[VpdaRun]:
    """All runs scanning exactly ``len(log_weights)`` symbols.

    ``log_weights[t]`` has shape ``(Q, G, Q, 2G+1)`` and is used for the
    ``t+1``-th scanned symbol; ``pushed[t]`` is the vector pushed by it.
    Zero-weight transitions still produce runs (with weight 0). Popping the
    last remaining element is not a valid transition.
    """
    if len(pushed) != len(log_weights):
        raise ValueError("need one pushed vector per timestep")
    Q, G = config.num_states, config.num_symbols
    runs = [VpdaRun((), 1.0, config.q0, (config.bottom,), (0,))]
    for t, lw in enumerate(log_weights, start=1):
        w = np.exp(np.asarray(lw, dtype=np.float64))
        nxt: list[VpdaRun] = []
        for run in runs:
            q, x = run.state, run.top_symbol
            for r in range(Q):
                for j in range(2 * G + 1):
                    kind, y = _decode(j, G)
                    if kind == PUSH:
                        symbols = run.symbols + (y,)
                        ids = run.vector_ids + (t,)
                    elif kind == REPLACE:
                        symbols = run.symbols[:-1] + (y,)
                        ids = run.vector_ids
                    else:
                        if len(run.symbols) == 1:
                            continue
                        symbols = run.symbols[:-1]
                        ids = run.vector_ids[:-1]
                    nxt.append(VpdaRun(
                        run.transitions + (Transition(q, x, r, kind, y),),
                        run.weight * float(w[q, x, r, j]),
                        r,
                        symbols,
                        ids,
                    ))
                    if len(nxt) > max_runs:
                        raise ContractError(f"more than {max_runs} runs; oracle is for tiny inputs only")
        runs = nxt
    return runs


def oracle_reading(
    runs: Sequence[VpdaRun],
    r0: np.ndarray,
    pushed: Sequence[np.ndarray],
    config: VpdaConfig,
) -> np.ndarray:
    """Run-weighted mean top vector per final (state, symbol), divided by
    the total weight of all runs. Shape ``(Q * G * m,)``; zero if the total
    weight is zero."""
    Q, G, m = config.num_states, config.num_symbols, config.m
    vectors = [np.asarray(r0, dtype=np.float64)] + [np.asarray(v, dtype=np.float64) for v in pushed]
    numer = np.zeros((Q, G, m))
    total = math.fsum(run.weight for run in runs)
    for run in runs:
        numer[run.state, run.top_symbol] += run.weight * vectors[run.top_vector_id]
    if total == 0.0:
        return np.zeros(Q * G * m)
    return (numer / total).reshape(-1)
