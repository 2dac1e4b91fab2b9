import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stack_attention.errors import ParameterError
from stack_attention.tasks import Pcfg, inside_logprob, length_mass, make_task, sample_conditioned

ONE_A = Pcfg("S", [("S", ["a"], 1.0)])
GEOMETRIC = Pcfg("S", [("S", ["a", "S"], 0.5), ("S", ["a"], 0.5)])
# ambiguous: S -> S S | a, so "aaa" has two derivations
AMBIGUOUS = Pcfg("S", [("S", ["S", "S"], 0.3), ("S", ["a"], 0.7)])


def test_inside_examples():
    assert inside_logprob(ONE_A, "a") == 0.0
    assert math.isclose(inside_logprob(GEOMETRIC, "aa"), math.log(0.25), rel_tol=1e-12)
    assert inside_logprob(ONE_A, "aa") == -math.inf
    assert inside_logprob(ONE_A, "b") == -math.inf
    assert inside_logprob(GEOMETRIC, "") == -math.inf


def test_inside_sums_ambiguous_derivations():
    expected = 2 * 0.3 * 0.3 * 0.7**3
    assert math.isclose(inside_logprob(AMBIGUOUS, "aaa"), math.log(expected), rel_tol=1e-12)
    # Catalan(3) = 5 binary trees over four leaves
    assert math.isclose(inside_logprob(AMBIGUOUS, "aaaa"), math.log(5 * 0.3**3 * 0.7**4), rel_tol=1e-12)


def derivation_sum(rules, start, x, depth=12):
    """Brute-force leftmost derivations of x; small grammars only."""
    total = 0.0
    stack = [((start,), 1.0, 0)]
    nts = {lhs for lhs, _, _ in rules}
    while stack:
        form, p, d = stack.pop()
        i = next((k for k, s in enumerate(form) if s in nts), None)
        if i is None:
            if "".join(form) == x:
                total += p
            continue
        prefix = "".join(form[:i])
        terminals = sum(1 for s in form if s not in nts)
        if not x.startswith(prefix) or terminals > len(x) or d > depth:
            continue
        for lhs, rhs, q in rules:
            if lhs == form[i]:
                stack.append((form[:i] + tuple(rhs) + form[i + 1 :], p * q, d + 1))
    return total


EPS_RULES = [
    ("S", ["A", "B"], 0.6), ("S", ["b"], 0.4),
    ("A", ["a", "A"], 0.3), ("A", [], 0.7),
    ("B", ["b"], 0.5), ("B", ["A", "b"], 0.5),
]


@pytest.mark.parametrize("x", ["b", "ab", "bb", "abb", "aab", "aabb"])
def test_inside_matches_derivation_enumeration(x):
    g = Pcfg("S", EPS_RULES)
    expected = derivation_sum(EPS_RULES, "S", x)
    got = math.exp(inside_logprob(g, x))
    assert math.isclose(got, expected, rel_tol=1e-9, abs_tol=1e-15)


def test_length_mass_examples():
    assert length_mass(ONE_A, 1) == 1.0
    assert length_mass(ONE_A, 2) == 0.0
    for n in range(1, 12):
        assert math.isclose(length_mass(GEOMETRIC, n), 0.5**n, rel_tol=1e-12)


# truncation points past each grammar's effective tail; the hardest-CFL
# length distribution decays by only about 1.1% per symbol
@pytest.mark.parametrize(
    "task, cutoff",
    [("marked-reversal", 400), ("unmarked-reversal", 400), ("padded-reversal", 400), ("hardest-cfl", 900)],
)
def test_length_masses_sum_to_one(task, cutoff):
    g = make_task(task).grammar
    total = math.fsum(g.length_mass(n) for n in range(0, cutoff))
    assert math.isclose(total, 1.0, abs_tol=1e-6)


def test_length_mass_matches_enumeration():
    g = make_task("dyck").grammar
    for n in range(0, 7):
        total = math.fsum(
            math.exp(inside_logprob(g, "".join(w))) for w in itertools.product("()[]", repeat=n)
        )
        assert math.isclose(g.length_mass(n), total, rel_tol=1e-9, abs_tol=1e-300)


def test_sample_conditioned_basics():
    g = make_task("dyck").grammar
    for n in [0, 2, 10, 40]:
        assert len(sample_conditioned(g, n, np.random.default_rng(0))) == n
    a = sample_conditioned(g, 40, np.random.default_rng(5))
    b = sample_conditioned(g, 40, np.random.default_rng(5))
    assert a == b
    with pytest.raises(ParameterError):
        sample_conditioned(g, 3, np.random.default_rng(0))


def test_sample_frequencies_match_inside():
    # the Dyck support at length 4 has 8 strings; compare every one within 3 sigma
    g = make_task("dyck").grammar
    rng = np.random.default_rng(0)
    N = 100_000
    counts = Counter(g.sample_conditioned(4, rng) for _ in range(N))
    mass = g.length_mass(4)
    support = [w for w in map("".join, itertools.product("()[]", repeat=4)) if inside_logprob(g, w) > -math.inf]
    assert set(counts) <= set(support)
    assert len(support) == 8
    for w in support:
        p = math.exp(inside_logprob(g, w)) / mass
        sigma = math.sqrt(N * p * (1 - p))
        assert abs(counts[w] - N * p) <= 3 * sigma, (w, counts[w], N * p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_unconditioned_sample_has_positive_probability(seed):
    g = make_task("hardest-cfl").grammar
    x = g.sample(np.random.default_rng(seed))
    assert inside_logprob(g, x) > -math.inf


def test_grammar_validation():
    with pytest.raises(ParameterError):
        Pcfg("S", [("S", ["a"], 0.5)])
    with pytest.raises(ParameterError):
        Pcfg("T", [("S", ["a"], 1.0)])
    with pytest.raises(ParameterError):
        Pcfg("S", [("S", ["ab"], 1.0)])
    with pytest.raises(ParameterError):
        Pcfg("S", [("S", ["?"], 1.0)])
