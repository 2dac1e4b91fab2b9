"""Superposition stack: every element interpolates its neighbours above, at
and below under push / no-op / pop probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import DimensionError

PUSH, NOOP, POP = 0, 1, 2


@dataclass(frozen=True)
class SuperpositionState:
    """Stack elements, shape ``(*batch, rows, m)``; row 0 is the top.

    ``t`` counts applied updates. The initial state has ``t == 0`` and a
    single zero row.
    """

    elements: torch.Tensor
    t: int

    @property
    def m(self) -> int:
        return self.elements.shape[-1]


def sup_init(m: int, batch_shape: tuple[int, ...] = (), dtype=torch.float64) -> SuperpositionState:
    return SuperpositionState(torch.zeros(*batch_shape, 1, m, dtype=dtype), 0)


def sup_update(state: SuperpositionState, actions: torch.Tensor, pushed: torch.Tensor) -> SuperpositionState:
    if actions.shape[-1] != 3:
        raise DimensionError(f"actions need a trailing extent of 3, got {tuple(actions.shape)}")
    if pushed.shape[-1] != state.m:
        raise DimensionError(f"pushed vector has size {pushed.shape[-1]}, stack holds {state.m}")
    t = state.t + 1
    # V_0 = [0] is only a reading placeholder; the recurrence sees t-1 real rows.
    prev = state.elements[..., : t - 1, :]
    batch = prev.shape[:-2]
    zero_row = pushed.new_zeros(*batch, 1, state.m)
    above = torch.cat([pushed.unsqueeze(-2), prev], dim=-2)
    at = torch.cat([prev, zero_row], dim=-2)
    below_rows = prev[..., 1:, :]
    below = torch.cat([below_rows, pushed.new_zeros(*batch, t - below_rows.shape[-2], state.m)], dim=-2)
    a = actions.unsqueeze(-1).unsqueeze(-1)
    elements = a[..., PUSH, :, :] * above + a[..., NOOP, :, :] * at + a[..., POP, :, :] * below
    return SuperpositionState(elements, t)


def sup_reading(state: SuperpositionState) -> torch.Tensor:
    return state.elements[..., 0, :]


def superposition_readings(actions: torch.Tensor, pushed: torch.Tensor) -> torch.Tensor:
    """Readings after each of ``n`` updates.

    ``actions`` is ``(*batch, n, 3)``, ``pushed`` is ``(*batch, n, m)``;
    returns ``(*batch, n, m)``. Under ``torch.no_grad`` only the current
    stack is alive, so memory is O(m n); with autograd every stack is kept.
    """
    n = actions.shape[-2]
    if pushed.shape[-2] != n:
        raise DimensionError("actions and pushed vectors disagree on sequence length")
    state = sup_init(pushed.shape[-1], tuple(pushed.shape[:-2]), pushed.dtype)
    readings = []
    for t in range(n):
        state = sup_update(state, actions[..., t, :], pushed[..., t, :])
        readings.append(sup_reading(state))
    return torch.stack(readings, dim=-2)
