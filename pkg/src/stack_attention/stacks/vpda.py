"""Differentiable vector PDA (dVPDA) via Lang's dynamic program.

The state consists of inner weights ``gamma[i -> t][q, x, r, y]``, vector
inner weights ``zeta[i -> t][q, x, r, y, :]`` and forward weights
``alpha[t][r, y]``, pre-allocated for the whole sequence and filled column by
column as ``t`` increases.

Two implementation choices:

* ``gamma[i -> t]`` only covers partial runs whose top element at ``t`` is
  the one pushed at ``i + 1`` (replace keeps vectors, pop re-exposes it), so
  ``zeta[i -> t] = gamma[i -> t] * v[i + 1]`` and the reading is a weighted
  average of pushed vectors. The vector recurrence can still be run
  explicitly (``track_zeta=True``) to check this.
* Columns are stored with per-timestep scaling rather than as raw log
  weights. Column ``t`` is divided by ``c_t`` (chosen so ``alpha[t]`` sums to
  one); the factors telescope along every span, so scaled values obey the
  same recurrences and each reading is unchanged. True log weights are
  available from :meth:`VpdaState.log_gamma` and :meth:`VpdaState.log_alpha`.

Gradients come from :class:`VpdaFunction`, a hand-written reverse sweep over
the same buffers.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ContractError, DimensionError, ParameterError

DTYPE = torch.float64


@dataclass(frozen=True)
class VpdaConfig:
    num_states: int
    num_symbols: int
    m: int

    # Start state and bottom symbol are always index 0.
    q0 = 0
    bottom = 0

    def __post_init__(self):
        if self.num_states < 1 or self.num_symbols < 1 or self.m < 1:
            raise ParameterError(f"invalid dVPDA sizes: {self}")

    @property
    def actions_per_pair(self) -> int:
        return 2 * self.num_symbols + 1

    @property
    def action_size(self) -> int:
        """Flattened size of one timestep's transition tensor."""
        return self.num_states * self.num_symbols * self.num_states * self.actions_per_pair

    @property
    def reading_size(self) -> int:
        return self.num_states * self.num_symbols * self.m

    @property
    def transition_shape(self) -> tuple[int, int, int, int]:
        return (self.num_states, self.num_symbols, self.num_states, self.actions_per_pair)


def split_transitions(weights: torch.Tensor, num_symbols: int):
    """Split ``(..., Q, G, Q, 2G+1)`` weights into push, replace and pop parts.

    Per ``(q, x, r)`` the trailing axis holds ``G`` push targets, ``G``
    replace targets, then the pop weight. Push and replace come back as
    ``(..., q, x, r, y)``, pop as ``(..., q, x, r)``.
    """
    g = num_symbols
    return weights[..., :g], weights[..., g : 2 * g], weights[..., 2 * g]


def _shifted_exp(log_weights: torch.Tensor):
    # Scaling all of one step's weights by a constant leaves every reading
    # unchanged, so exponentiate relative to the step maximum.
    mx = log_weights.reshape(log_weights.shape[0], -1).amax(dim=1)
    mx = torch.where(torch.isfinite(mx), mx, torch.zeros_like(mx))
    return torch.exp(log_weights - mx.view(-1, 1, 1, 1, 1)), mx


def _triangle(buf: torch.Tensor, size: int) -> torch.Tensor:
    """View a ``(B, G, N, Q, G, N, Q)`` buffer restricted to rows ``< size``
    and columns ``< size`` as a batched matrix ``(B*G, (row, q, x), (col, r))``
    without copying."""
    B, G, N, Q = buf.shape[0], buf.shape[1], buf.shape[2], buf.shape[3]
    s = buf.stride()
    return buf.as_strided((B * G, size * Q * G, size * Q), (s[1], s[4], 1), buf.storage_offset())


class VpdaState:
    """Pre-allocated dVPDA state for a batch of sequences of length ``n``.

    ``gamma_buf[b, y, i + 1, q, x, t, r]`` holds scaled ``gamma[i -> t][q, x,
    r, y]`` for ``-1 <= i <= n - 1`` and ``0 <= t <= n``; this layout turns
    the pop contraction into a batched matmul over ``(b, y)``.
    ``alpha_buf[b, t + 1]`` holds scaled ``alpha[t]`` for ``-1 <= t <= n``.
    ``pushed[b, j]`` is the vector pushed at step ``j`` (``j = 0`` is r0).
    """

    def __init__(self, n: int, config: VpdaConfig, r0: torch.Tensor, track_zeta: bool = False):
        if n < 0:
            raise ParameterError("sequence length must be non-negative")
        if r0.dim() != 2 or r0.shape[1] != config.m:
            raise DimensionError(f"r0 must be (batch, {config.m}), got {tuple(r0.shape)}")
        self.n = n
        self.config = config
        Q, G, m = config.num_states, config.num_symbols, config.m
        B = r0.shape[0]
        q0, bot = config.q0, config.bottom
        self.batch_size = B
        try:
            self.gamma_buf = torch.zeros(B, G, n + 1, Q, G, n + 1, Q, dtype=DTYPE)
            self.zeta_buf = (
                torch.zeros(B, n + 1, n + 1, Q, G, Q, G, m, dtype=DTYPE) if track_zeta else None
            )
        except RuntimeError as exc:
            raise MemoryError(f"cannot allocate dVPDA state for n={n}") from exc
        self.alpha_buf = torch.zeros(B, n + 2, Q, G, dtype=DTYPE)
        self.c = torch.ones(B, n + 1, dtype=DTYPE)
        # log of the full scale of column t: log c_t plus that step's weight shift
        self.log_c = torch.zeros(B, n + 1, dtype=DTYPE)
        self.push_w = torch.zeros(B, n + 1, Q, G, Q, G, dtype=DTYPE)
        self.repl_w = torch.zeros(B, n + 1, Q, G, Q, G, dtype=DTYPE)
        self.pop_w = torch.zeros(B, n + 1, Q, G, Q, dtype=DTYPE)
        self.pushed = torch.zeros(B, n + 1, m, dtype=DTYPE)

        r0 = r0.detach().to(DTYPE)
        self.pushed[:, 0] = r0
        self.gamma_buf[:, bot, 0, q0, bot, 0, q0] = 1.0
        if self.zeta_buf is not None:
            self.zeta_buf[:, 0, 0, q0, bot, q0, bot] = r0
        self.alpha_buf[:, 0, q0, bot] = 1.0
        self.alpha_buf[:, 1, q0, bot] = 1.0
        self.t = 0

    def column(self, t: int, rows: int) -> torch.Tensor:
        """Scaled ``gamma[i -> t]`` for ``i + 1 < rows``, laid out ``(b, y, i, q, x, r)``."""
        return self.gamma_buf[:, :, :rows, :, :, t, :]

    def update(self, log_weights: torch.Tensor, pushed: torch.Tensor) -> "VpdaState":
        """Advance one timestep in place and return ``self``."""
        cfg = self.config
        if self.t >= self.n:
            raise ContractError(f"state was allocated for {self.n} updates")
        if tuple(log_weights.shape[1:]) != cfg.transition_shape or log_weights.shape[0] != self.batch_size:
            raise DimensionError(
                f"expected transition tensor ({self.batch_size}, {cfg.transition_shape}), "
                f"got {tuple(log_weights.shape)}"
            )
        if tuple(pushed.shape) != (self.batch_size, cfg.m):
            raise DimensionError(f"pushed vector must be ({self.batch_size}, {cfg.m})")
        t = self.t + 1
        B, Q, G = self.batch_size, cfg.num_states, cfg.num_symbols
        weights, shift = _shifted_exp(log_weights.detach().to(DTYPE))
        P, R, O = split_transitions(weights, G)
        v = pushed.detach().to(DTYPE)
        self.push_w[:, t], self.repl_w[:, t], self.pop_w[:, t] = P, R, O
        self.pushed[:, t] = v

        U = self.gamma_buf.new_zeros(B, G, t + 1, Q, G, Q)  # (b, y, i, q, x, r)
        # replace: gamma[i -> t-1][q, x, s, z] R[s, z, r, y]
        U[:, :, :t] = torch.einsum("bziqxs,bszry->byiqxr", self.column(t - 1, t), R)
        # pop: sum_k gamma[i -> k][q, x, u, y] gamma[k -> t-1][u, y, s, z] O[s, z, r]
        if t >= 2:
            Gp = self._pop_aux(t)
            L = _triangle(self.gamma_buf, t - 1)
            U[:, :, : t - 1] += torch.bmm(L, Gp).view(B, G, t - 1, Q, G, Q)
        # push: only i = t - 1
        U[:, :, t] += P.permute(0, 4, 1, 2, 3)

        alpha_hat = torch.einsum("biqx,byiqxr->bry", self.alpha_buf[:, : t + 1], U)
        c = alpha_hat.sum(dim=(1, 2))
        fallback = U.reshape(B, -1).amax(dim=1)
        c = torch.where(c > 0, c, torch.where(fallback > 0, fallback, torch.ones_like(c)))
        self.gamma_buf[:, :, : t + 1, :, :, t, :] = U / c.view(B, 1, 1, 1, 1, 1)
        self.alpha_buf[:, t + 1] = alpha_hat / c.view(B, 1, 1)
        self.c[:, t] = c
        self.log_c[:, t] = torch.log(c) + shift
        if self.zeta_buf is not None:
            self._update_zeta(t, P, R, O, v, c)
        self.t = t
        return self

    def _pop_aux(self, t: int) -> torch.Tensor:
        """``sum_{s,z} gamma[k -> t-1][u, y, s, z] O_t[s, z, r]`` for
        ``0 <= k <= t-2`` as a ``(b*y, (k, u), r)`` batch of matrices."""
        B, Q, G = self.batch_size, self.config.num_states, self.config.num_symbols
        col = self.gamma_buf[:, :, 1:t, :, :, t - 1, :]  # (b, z, k, u, y, s)
        gp = torch.einsum("bzkuys,bszr->bykur", col, self.pop_w[:, t])
        return gp.reshape(B * G, (t - 1) * Q, Q)

    def _update_zeta(self, t, P, R, O, v, c):
        # Explicit vector recurrence, only used to verify the factorization.
        Z = self.zeta_buf
        B = self.batch_size
        UZ = Z.new_zeros(B, t + 1, *Z.shape[3:])
        UZ[:, :t] = torch.einsum("biqxszm,bszry->biqxrym", Z[:, :t, t - 1], R)
        if t >= 2:
            col = self.gamma_buf[:, :, 1:t, :, :, t - 1, :]
            Gp = torch.einsum("bzkuys,bszr->bkuyr", col, O)
            UZ[:, : t - 1] += torch.einsum("bikqxuym,bkuyr->biqxrym", Z[:, : t - 1, : t - 1], Gp)
        UZ[:, t] += P.unsqueeze(-1) * v.view(B, 1, 1, 1, 1, -1)
        Z[:, : t + 1, t] = UZ / c.view(B, 1, 1, 1, 1, 1, 1)

    def top_weights(self, t: int | None = None) -> torch.Tensor:
        """``w[b, i + 1, r, y]``: scaled weight of runs ending in ``(r, y)``
        whose top element was pushed at step ``i + 1``."""
        t = self.t if t is None else t
        if not 0 <= t <= self.t:
            raise ContractError(f"reading at t={t} not available (state at t={self.t})")
        return torch.einsum("biqx,byiqxr->biry", self.alpha_buf[:, : t + 1], self.column(t, t + 1))

    def reading_slices(self, t: int | None = None) -> torch.Tensor:
        """Stack reading as ``(batch, Q, G, m)``."""
        t = self.t if t is None else t
        w = self.top_weights(t)
        if self.zeta_buf is not None:
            H = torch.einsum("biqx,biqxrym->brym", self.alpha_buf[:, : t + 1], self.zeta_buf[:, : t + 1, t])
        else:
            H = torch.einsum("biry,bim->brym", w, self.pushed[:, : t + 1])
        S = self.alpha_buf[:, t + 1].sum(dim=(1, 2))
        ok = S > 0
        denom = torch.where(ok, S, torch.ones_like(S)).view(-1, 1, 1, 1)
        return torch.where(ok.view(-1, 1, 1, 1), H / denom, torch.zeros_like(H))

    def reading(self, t: int | None = None) -> torch.Tensor:
        """Flattened reading, ``(batch, Q * G * m)``, ordered ``(r, y, :)``."""
        r = self.reading_slices(t)
        return r.reshape(r.shape[0], -1)

    def _log_C(self, t: int) -> torch.Tensor:
        # cumulative scale of column t; C_{-1} = C_0 = 1
        if t <= 0:
            return torch.zeros(self.batch_size, dtype=DTYPE)
        return self.log_c[:, 1 : t + 1].sum(dim=1)

    def log_gamma(self, i: int, t: int) -> torch.Tensor:
        """log ``gamma[i -> t]`` as ``(batch, q, x, r, y)``."""
        g = self.gamma_buf[:, :, i + 1, :, :, t, :].permute(0, 2, 3, 4, 1)
        return torch.log(g) + (self._log_C(t) - self._log_C(i)).view(-1, 1, 1, 1, 1)

    def log_alpha(self, t: int) -> torch.Tensor:
        """log ``alpha[t]`` as ``(batch, r, y)``."""
        return torch.log(self.alpha_buf[:, t + 1]) + self._log_C(t).view(-1, 1, 1)

    def zeta(self, i: int, t: int) -> torch.Tensor:
        """``zeta[i -> t]`` as ``(batch, q, x, r, y, m)`` in linear space."""
        scale = torch.exp(self._log_C(t) - self._log_C(i)).view(-1, 1, 1, 1, 1, 1)
        if self.zeta_buf is not None:
            return self.zeta_buf[:, i + 1, t] * scale
        g = self.gamma_buf[:, :, i + 1, :, :, t, :].permute(0, 2, 3, 4, 1)
        return g.unsqueeze(-1) * self.pushed[:, i + 1].view(-1, 1, 1, 1, 1, self.config.m) * scale


def vpda_init(n: int, config: VpdaConfig, r0: torch.Tensor, track_zeta: bool = False) -> VpdaState:
    if r0.dim() == 1:
        r0 = r0.unsqueeze(0)
    return VpdaState(n, config, r0, track_zeta=track_zeta)


def vpda_update(state: VpdaState, log_weights: torch.Tensor, pushed: torch.Tensor) -> VpdaState:
    if log_weights.dim() == 4:
        log_weights = log_weights.unsqueeze(0)
    if pushed.dim() == 1:
        pushed = pushed.unsqueeze(0)
    return state.update(log_weights, pushed)


def vpda_reading(state: VpdaState) -> torch.Tensor:
    return state.reading()


class VpdaFunction(torch.autograd.Function):
    """Readings for ``t = 1..n`` with gradients w.r.t. log weights, pushed
    vectors and the initial vector. Inputs are float64 and batched:
    ``log_weights (B, n, Q, G, Q, 2G+1)``, ``pushed (B, n, m)``, ``r0 (B, m)``;
    the output is ``(B, n, Q, G, m)``.
    """

    @staticmethod
    def forward(ctx, log_weights, pushed, r0, config: VpdaConfig):
        B, n = pushed.shape[:2]
        state = VpdaState(n, config, r0)
        readings = log_weights.new_zeros(B, n, config.num_states, config.num_symbols, config.m)
        for t in range(n):
            state.update(log_weights[:, t], pushed[:, t])
            readings[:, t] = state.reading_slices()
        ctx.state = state
        ctx.save_for_backward(readings)
        return readings

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_readings):
        (readings,) = ctx.saved_tensors
        st: VpdaState = ctx.state
        cfg = st.config
        n, B = st.n, st.batch_size
        Q, G = cfg.num_states, cfg.num_symbols
        A, V = st.alpha_buf, st.pushed
        dbuf = torch.zeros_like(st.gamma_buf)
        dA = torch.zeros_like(A)
        dP = torch.zeros_like(st.push_w)
        dR = torch.zeros_like(st.repl_w)
        dO = torch.zeros_like(st.pop_w)
        dV = torch.zeros_like(V)
        grad_readings = grad_readings.to(DTYPE)

        for t in range(n, 0, -1):
            # reading_t = sum_i w_i v_{i+1} / S with S = sum(alpha[t]) = sum_i w_i
            g = grad_readings[:, t - 1]
            S = A[:, t + 1].sum(dim=(1, 2))
            ok = S > 0
            Ssafe = torch.where(ok, S, torch.ones_like(S))
            dH = torch.where(ok.view(-1, 1, 1, 1), g / Ssafe.view(-1, 1, 1, 1), torch.zeros_like(g))
            dS = torch.where(ok, -(g * readings[:, t - 1]).sum(dim=(1, 2, 3)) / Ssafe, torch.zeros_like(S))
            dA[:, t + 1] += dS.view(-1, 1, 1)

            col = st.column(t, t + 1)
            w = torch.einsum("biqx,byiqxr->biry", A[:, : t + 1], col)
            dV[:, : t + 1] += torch.einsum("brym,biry->bim", dH, w)
            # alpha[t] = sum_i w_i, so the adjoint of alpha[t] flows into every w_i
            dw = torch.einsum("brym,bim->biry", dH, V[:, : t + 1]) + dA[:, t + 1].unsqueeze(1)
            dA[:, : t + 1] += torch.einsum("biry,byiqxr->biqx", dw, col)
            dcol = dbuf[:, :, : t + 1, :, :, t, :]
            dcol += torch.einsum("biqx,biry->byiqxr", A[:, : t + 1], dw)

            dU = dcol / st.c[:, t].view(B, 1, 1, 1, 1, 1)
            dP[:, t] = dU[:, :, t].permute(0, 2, 3, 4, 1)
            prev = st.column(t - 1, t)
            dbuf[:, :, :t, :, :, t - 1, :] += torch.einsum("byiqxr,bszry->bziqxs", dU[:, :, :t], st.repl_w[:, t])
            dR[:, t] = torch.einsum("bziqxs,byiqxr->bszry", prev, dU[:, :, :t])

            if t >= 2:
                Gp = st._pop_aux(t)
                dUp = dU[:, :, : t - 1].reshape(B * G, (t - 1) * Q * G, Q)
                L = _triangle(st.gamma_buf, t - 1)
                dL = _triangle(dbuf, t - 1)
                # entries below the diagonal are structural zeros; their adjoints are never read
                dL += torch.bmm(dUp, Gp.transpose(1, 2))
                dGp = torch.bmm(L.transpose(1, 2), dUp).view(B, G, t - 1, Q, Q)  # (b, y, k, u, r)
                colk = st.gamma_buf[:, :, 1:t, :, :, t - 1, :]  # (b, z, k, u, y, s)
                dbuf[:, :, 1:t, :, :, t - 1, :] += torch.einsum("bykur,bszr->bzkuys", dGp, st.pop_w[:, t])
                dO[:, t] = torch.einsum("bzkuys,bykur->bszr", colk, dGp)

        E = torch.cat([st.push_w, st.repl_w, st.pop_w.unsqueeze(-1)], dim=-1)[:, 1:]
        dE = torch.cat([dP, dR, dO.unsqueeze(-1)], dim=-1)[:, 1:]
        # d(log w) = d(w) * w for the shifted exponentials
        return dE * E, dV[:, 1:].clone(), dV[:, 0].clone(), None


def vpda_readings(log_weights: torch.Tensor, pushed: torch.Tensor, r0: torch.Tensor, config: VpdaConfig) -> torch.Tensor:
    """Differentiable readings for every timestep.

    ``log_weights`` is ``(B, n, Q, G, Q, 2G+1)`` or flattened ``(B, n,
    action_size)``; ``pushed`` is ``(B, n, m)`` and ``r0`` is ``(B, m)``.
    Returns ``(B, n, Q * G * m)`` in the dtype of ``pushed``. The dynamic
    program itself always runs in float64.
    """
    B, n = pushed.shape[:2]
    if log_weights.dim() == 3 and log_weights.shape[-1] == config.action_size:
        log_weights = log_weights.reshape(B, n, *config.transition_shape)
    if tuple(log_weights.shape) != (B, n, *config.transition_shape):
        raise DimensionError(f"log weights shape {tuple(log_weights.shape)} does not match {config}")
    if tuple(r0.shape) != (B, config.m):
        raise DimensionError(f"r0 must be ({B}, {config.m})")
    out = VpdaFunction.apply(log_weights.to(DTYPE), pushed.to(DTYPE), r0.to(DTYPE), config)
    return out.reshape(B, n, -1).to(pushed.dtype)
