"""Probabilistic context-free grammars: inside probabilities, length masses
and exact length-conditioned sampling.

Rules may have any right-hand side, including the empty one. Internally the
grammar is binarized (terminals get preterminals, long right-hand sides get
intermediate nonterminals) and empty derivations are folded away: the
probability that each nonterminal derives the empty string is solved for
first, after which a binary rule with a nullable child also acts as a unary
rule. Unary chains (including cycles) are summed in closed form through
``(I - U)^-1``.

All charts are computed in float64 linear space, which is ample for strings
of a few hundred symbols.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from ..errors import ParameterError

PROB_TOL = 1e-9


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    prob: float


class Pcfg:
    """A PCFG over single-character terminals.

    ``rules`` are ``(lhs, rhs, prob)`` triples; a right-hand-side symbol is a
    nonterminal if it appears as some rule's left-hand side and a terminal
    otherwise.
    """

    def __init__(self, start: str, rules: Iterable[tuple[str, Sequence[str], float]]):
        self.start = start
        self.rules = tuple(Rule(lhs, tuple(rhs), float(p)) for lhs, rhs, p in rules)
        self.nonterminals = tuple(dict.fromkeys(r.lhs for r in self.rules))
        nts = set(self.nonterminals)
        if start not in nts:
            raise ParameterError(f"start symbol {start!r} has no rules")
        self.terminals = tuple(sorted({s for r in self.rules for s in r.rhs if s not in nts}))
        for a in self.terminals:
            if len(a) != 1:
                raise ParameterError(f"terminal {a!r} must be a single character")
        for nt in self.nonterminals:
            total = math.fsum(r.prob for r in self.rules if r.lhs == nt)
            if abs(total - 1.0) > PROB_TOL:
                raise ParameterError(f"rules for {nt!r} sum to {total}, not 1")
        if any(r.prob < 0 for r in self.rules):
            raise ParameterError("rule probabilities must be non-negative")
        if WILDCARD in self.terminals:
            raise ParameterError(f"{WILDCARD!r} is reserved as the wildcard symbol")
        self._binarize()
        self._mass_cache: list[np.ndarray] | None = None
        self._options: dict = {}

    # -- normal form ---------------------------------------------------------
    def _binarize(self) -> None:
        names = list(self.nonterminals)
        index = {nt: i for i, nt in enumerate(names)}

        def nt_id(sym: str) -> int:
            if sym not in index:
                index[sym] = len(names)
                names.append(sym)
            return index[sym]

        pre = {a: nt_id(f"<{a}>") for a in self.terminals}
        term, eps, unary, binary = [], [], [], []
        for a, k in pre.items():
            term.append((k, a, 1.0))
        fresh = 0
        for r in self.rules:
            lhs = index[r.lhs]
            syms = [pre[s] if s in pre else index[s] for s in r.rhs]
            if len(syms) == 0:
                eps.append((lhs, r.prob))
            elif len(syms) == 1:
                unary.append((lhs, syms[0], r.prob))
            else:
                # A -> X1 X2 ... Xk becomes A -> X1 N1, N1 -> X2 N2, ...
                cur, p = lhs, r.prob
                for s in syms[:-2]:
                    fresh += 1
                    nxt = nt_id(f"<{r.lhs}#{fresh}>")
                    binary.append((cur, s, nxt, p))
                    cur, p = nxt, 1.0
                binary.append((cur, syms[-2], syms[-1], p))
        self.symbols = tuple(names)
        self.preterminal = pre
        n = len(names)
        self.start_id = index[self.start]
        self.term = np.zeros((n, len(self.terminals)))
        for k, a, p in term:
            self.term[k, self.terminals.index(a)] += p
        self.eps = np.zeros(n)
        for k, p in eps:
            self.eps[k] += p
        self.unary = np.zeros((n, n))
        for a, b, p in unary:
            self.unary[a, b] += p
        self.binary = np.zeros((n, n, n))
        for a, b, c, p in binary:
            self.binary[a, b, c] += p
        self._binary_flat = self.binary.reshape(n, n * n)

    @cached_property
    def nullable(self) -> np.ndarray:
        """``e[A] = P(A =>* empty string)``, the least fixed point."""
        e = np.zeros(len(self.symbols))
        for _ in range(100000):
            new = self.eps + self.unary @ e + np.einsum("abc,b,c->a", self.binary, e, e)
            if np.max(np.abs(new - e)) < 1e-15:
                return new
            e = new
        return e

    @cached_property
    def unary_closure(self) -> np.ndarray:
        """``(I - U')^-1`` where ``U'`` adds binary rules with one nullable child."""
        e = self.nullable
        u = self.unary + np.einsum("abc,c->ab", self.binary, e) + np.einsum("abc,b->ac", self.binary, e)
        return np.linalg.inv(np.eye(len(self.symbols)) - u)

    @cached_property
    def _pair_rules(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Child pairs ``(B, C)`` used by some binary rule, and the map from
        their span products to closed parent weights."""
        used = np.flatnonzero(self._binary_flat.any(axis=0))
        N = len(self.symbols)
        return used // N, used % N, (self.unary_closure @ self._binary_flat[:, used]).T

    # -- charts ----------------------------------------------------------------
    def _root_inside(self, leaves: np.ndarray) -> np.ndarray:
        """Inside weights ``(b, A)`` of the whole span for a batch of
        equal-length inputs, where ``leaves[b, i, A]`` is the weight of ``A``
        producing position ``i``.

        Spans are stored twice, indexed by (start, width) for left children
        and by (end, width) for right children, already projected onto the
        child pairs that binary rules use. Both operands of every split sum
        are then plain strided views.
        """
        S, n, N = leaves.shape
        pb, pc, to_parent = self._pair_rules
        K = len(pb)
        left = np.zeros((S, n + 1, n + 1, K))  # [b, start, width]
        right = np.zeros((S, n + 1, n + 1, K))  # [b, end, width]
        cell = leaves @ self.unary_closure.T
        left[:, :n, 1] = cell[..., pb]
        right[:, 1:, 1] = cell[..., pc]
        for width in range(2, n + 1):
            count = n - width + 1
            pair = np.einsum(
                "bisk,bisk->bik", left[:, :count, 1:width], right[:, width : n + 1, width - 1 : 0 : -1]
            )
            cell = pair @ to_parent
            left[:, :count, width] = cell[..., pb]
            right[:, width : n + 1, width] = cell[..., pc]
        return cell[:, 0]

    def _leaves(self, x: str) -> np.ndarray | None:
        cols = []
        for ch in x:
            if ch == WILDCARD:
                cols.append(self.term.sum(axis=1))
            elif ch in self.terminals:
                cols.append(self.term[:, self.terminals.index(ch)])
            else:
                return None
        return np.array(cols).reshape(len(x), len(self.symbols))

    def inside_prob(self, x: str) -> float:
        """Total probability of all derivations of ``x``. The character
        ``WILDCARD`` matches any terminal."""
        return self.inside_probs([x])[0]

    def inside_probs(self, xs: Sequence[str], chunk: int = 4) -> list[float]:
        """:meth:`inside_prob` for many strings, charting equal-length
        strings together."""
        out = [0.0] * len(xs)
        by_len: dict[int, list[tuple[int, np.ndarray]]] = {}
        for i, x in enumerate(xs):
            if len(x) == 0:
                out[i] = float(self.nullable[self.start_id])
                continue
            leaves = self._leaves(x)
            if leaves is not None:
                by_len.setdefault(len(x), []).append((i, leaves))
        for n, items in by_len.items():
            for j in range(0, len(items), chunk):
                part = items[j : j + chunk]
                root = self._root_inside(np.stack([lv for _, lv in part]))
                for (i, _), v in zip(part, root[:, self.start_id]):
                    out[i] = float(v)
        return out

    def width_masses(self, n: int) -> list[np.ndarray]:
        """``M[k][A]``: total probability that ``A`` derives some string of
        length exactly ``k``, for ``k = 0..n``."""
        if self._mass_cache is None:
            self._mass_cache = [self.nullable.copy()]
        M = self._mass_cache
        pb, pc, to_parent = self._pair_rules
        while len(M) <= n:
            k = len(M)
            if k == 1:
                M.append(self.unary_closure @ self.term.sum(axis=1))
            else:
                left = np.stack(M[1:k])[:, pb]
                right = np.stack(M[k - 1 : 0 : -1])[:, pc]
                M.append((left * right).sum(axis=0) @ to_parent)
        return M[: n + 1]

    def length_mass(self, n: int) -> float:
        if n < 0:
            raise ParameterError("length must be non-negative")
        return float(self.width_masses(n)[n][self.start_id])

    # -- sampling -------------------------------------------------------------
    def _option_table(self, a: int, k: int):
        """Weighted expansions of nonterminal ``a`` over a span of width
        ``k >= 1``: (cumulative probabilities, list of expansions)."""
        key = (a, k)
        cached = self._options.get(key)
        if cached is not None:
            return cached
        M = self.width_masses(k)
        e = self.nullable
        opts, weights = [], []
        if k == 1:
            for j, t in enumerate(self.terminals):
                if self.term[a, j] > 0:
                    opts.append(("t", t))
                    weights.append(self.term[a, j])
        for b in np.nonzero(self.unary[a])[0]:
            w = self.unary[a, b] * M[k][b]
            if w > 0:
                opts.append(("u", int(b)))
                weights.append(w)
        bs, cs = np.nonzero(self.binary[a])
        for b, c in zip(bs.tolist(), cs.tolist()):
            p = self.binary[a, b, c]
            if e[c] > 0 and M[k][b] > 0:
                opts.append(("l", b, c))  # right child empty
                weights.append(p * e[c] * M[k][b])
            if e[b] > 0 and M[k][c] > 0:
                opts.append(("r", b, c))  # left child empty
                weights.append(p * e[b] * M[k][c])
            for s in range(1, k):
                w = p * M[s][b] * M[k - s][c]
                if w > 0:
                    opts.append(("b", b, c, s))
                    weights.append(w)
        weights = np.array(weights)
        total = weights.sum()
        if total <= 0:
            raise ParameterError(f"{self.symbols[a]!r} cannot derive a string of length {k}")
        cdf = np.cumsum(weights / total)
        cdf[-1] = 1.0
        self._options[key] = (cdf, opts)
        return cdf, opts

    def sample_conditioned(self, n: int, rng: np.random.Generator) -> str:
        """Exact sample from ``p(x | |x| = n)``."""
        if n < 0 or self.length_mass(n) <= 0:
            raise ParameterError(f"no string of length {n} has positive probability")
        if n == 0:
            return ""
        out = []
        stack = [(self.start_id, n)]
        while stack:
            a, k = stack.pop()
            cdf, opts = self._option_table(a, k)
            choice = opts[min(int(np.searchsorted(cdf, rng.random(), side="right")), len(opts) - 1)]
            kind = choice[0]
            if kind == "t":
                out.append(choice[1])
            elif kind == "u":
                stack.append((choice[1], k))
            elif kind == "l":
                stack.append((choice[1], k))
            elif kind == "r":
                stack.append((choice[2], k))
            else:
                _, b, c, s = choice
                stack.append((c, k - s))
                stack.append((b, s))
        return "".join(out)

    def sample(self, rng: np.random.Generator, max_length: int = 10000) -> str:
        """Unconditioned sample: draw the length from the length masses, then
        the string given its length."""
        u = rng.random()
        acc = 0.0
        for n in range(max_length + 1):
            acc += self.length_mass(n)
            if u < acc:
                return self.sample_conditioned(n, rng)
        raise ParameterError(f"sampled length exceeds {max_length}")


WILDCARD = "?"


def inside_logprob(g: Pcfg, x: str) -> float:
    """Log of the total derivation probability of ``x``; ``-inf`` outside the language."""
    p = g.inside_prob(x)
    return math.log(p) if p > 0 else -math.inf


def length_mass(g: Pcfg, n: int) -> float:
    return g.length_mass(n)


def sample_conditioned(g: Pcfg, n: int, rng: np.random.Generator) -> str:
    return g.sample_conditioned(n, rng)
