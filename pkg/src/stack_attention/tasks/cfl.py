"""The five context-free language modeling tasks, their datasets, and the
cross-entropy difference metric.

Conditioning modes for a string's true log-probability:

``range``
    Training and validation strings: the length is drawn uniformly from the
    lengths in ``[40, 80]`` that have positive mass, then the string is drawn
    from ``p(x | length)``. ``log p = log p(x | n) - log(#lengths)``.
``mass``
    The grammar distribution restricted to the length range:
    ``log p = inside(x) - log(sum of length masses over the range)``.
``exact``
    Test strings: ``log p = log p(x | n)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..errors import InputError, ParameterError
from .grammar import WILDCARD, Pcfg, inside_logprob

RANGE, MASS, EXACT = "range", "mass", "exact"
CONDITIONINGS = (RANGE, MASS, EXACT)
TRAIN_LENGTHS = (40, 80)
TEST_LENGTHS = (40, 100)
DEFAULT_TEST_SEED = 1000
DATASET_FORMAT = "cfl-dataset"


def _reversal_rules(center: str | None):
    rules = [("S", "0S0", 0.25), ("S", "1S1", 0.25)]
    rules.append(("S", center if center is not None else "", 0.5))
    return rules


def marked_reversal() -> Pcfg:
    return Pcfg("S", _reversal_rules("#"))


def unmarked_reversal() -> Pcfg:
    return Pcfg("S", _reversal_rules(None))


def padded_reversal() -> Pcfg:
    rules = [("S", "0S0", 0.25), ("S", "1S1", 0.25), ("S", ["T"], 0.5),
             ("T", ["P0"], 0.5), ("T", ["P1"], 0.5)]
    for a in "01":
        rules += [(f"P{a}", [a, f"P{a}"], 0.5), (f"P{a}", [], 0.5)]
    return Pcfg("S", rules)


def dyck() -> Pcfg:
    return Pcfg("S", [("S", "(S)S", 0.25), ("S", "[S]S", 0.25), ("S", "", 0.5)])


HARDEST_FILLER = ",$()[]"


def hardest_cfl() -> Pcfg:
    """A grammar for Greibach's hardest context-free language over two
    bracket pairs.

    Strings are sequences of ``;``-terminated blocks whose ``,``-separated
    pieces are free filler over ``, $ ( ) [ ]``, except that one piece per
    block, introduced by ``$``, is selected; the selected pieces must
    concatenate to a Dyck word. ``W`` generates that Dyck word, with ``C``
    inserting block boundaries (``, filler ; filler ,``) between its
    brackets. Every disjunction is uniform.
    """
    rules = [
        ("S", ["Xs", ",", "$", "W", ",", "Xs", ";"], 1.0),
        ("W", [], 0.5),
        ("W", ["N", "W"], 0.5),
        ("N", ["C"], 1 / 3),
        ("N", ["(", "W", ")"], 1 / 3),
        ("N", ["[", "W", "]"], 1 / 3),
        ("C", [",", "Xs", ";", "Xs", ","], 1.0),
        ("Xs", [], 0.5),
        ("Xs", ["Xc", "Xs"], 0.5),
    ]
    rules += [("Xc", [c], 1 / len(HARDEST_FILLER)) for c in HARDEST_FILLER]
    return Pcfg("S", rules)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    grammar: Pcfg = field(repr=False, compare=False)
    alphabet: tuple[str, ...]
    deterministic: bool  # real-time DCFL
    # dVPDA sizes for the nondeterministic model on this task
    num_states: int
    num_symbols: int
    train_lengths: tuple[int, int] = TRAIN_LENGTHS
    test_lengths: tuple[int, int] = TEST_LENGTHS

    def support(self, lo: int, hi: int) -> list[int]:
        return [n for n in range(lo, hi + 1) if self.grammar.length_mass(n) > 0]

    @property
    def train_support(self) -> list[int]:
        return self.support(*self.train_lengths)

    @property
    def test_grid(self) -> list[int]:
        return self.support(*self.test_lengths)


_TASKS: dict[str, tuple[Callable[[], Pcfg], str, bool, int, int]] = {
    "marked-reversal": (marked_reversal, "01#", True, 2, 3),
    "unmarked-reversal": (unmarked_reversal, "01", False, 2, 3),
    "padded-reversal": (padded_reversal, "01", False, 3, 3),
    "dyck": (dyck, "()[]", True, 2, 3),
    "hardest-cfl": (hardest_cfl, "()[]$,;", False, 3, 3),
}
TASK_NAMES = tuple(_TASKS)
_CACHE: dict[str, TaskSpec] = {}


def make_task(name: str) -> TaskSpec:
    if name not in _TASKS:
        raise ParameterError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    if name not in _CACHE:
        build, alphabet, det, q, g = _TASKS[name]
        grammar = build()
        if set(grammar.terminals) != set(alphabet):
            raise AssertionError(f"{name}: grammar terminals {grammar.terminals} differ from alphabet")
        _CACHE[name] = TaskSpec(name, grammar, tuple(alphabet), det, q, g)
    return _CACHE[name]


# -- true log-probabilities ----------------------------------------------------

def exact_length_logprob(task: TaskSpec, x: str) -> float:
    """``log p(x | |x|)``."""
    mass = task.grammar.length_mass(len(x))
    if mass <= 0:
        raise ParameterError(f"length {len(x)} has zero mass for {task.name}")
    return inside_logprob(task.grammar, x) - math.log(mass)


def exact_length_logprobs(task: TaskSpec, strings: Sequence[str]) -> list[float]:
    """:func:`exact_length_logprob` for many strings at once."""
    probs = task.grammar.inside_probs(strings)
    out = []
    for x, p in zip(strings, probs):
        mass = task.grammar.length_mass(len(x))
        if mass <= 0:
            raise ParameterError(f"length {len(x)} has zero mass for {task.name}")
        out.append((math.log(p) if p > 0 else -math.inf) - math.log(mass))
    return out


def true_logprobs(task: TaskSpec, strings: Sequence[str], conditioning: str = RANGE) -> list[float]:
    """:func:`true_logprob` for many strings at once."""
    if conditioning != RANGE:
        return exact_length_logprobs(task, strings) if conditioning == EXACT else [
            true_logprob(task, x, conditioning) for x in strings
        ]
    lo, hi = task.train_lengths
    for x in strings:
        if not lo <= len(x) <= hi:
            raise ParameterError(f"length {len(x)} outside the conditioning range [{lo}, {hi}]")
    offset = math.log(len(task.train_support))
    return [v - offset for v in exact_length_logprobs(task, strings)]


def true_logprob(task: TaskSpec, x: str, conditioning: str = RANGE) -> float:
    lo, hi = task.train_lengths
    if conditioning == EXACT:
        return exact_length_logprob(task, x)
    if not lo <= len(x) <= hi:
        raise ParameterError(f"length {len(x)} outside the conditioning range [{lo}, {hi}]")
    if conditioning == RANGE:
        support = task.train_support
        if not support:
            raise ParameterError("empty conditioning support")
        return exact_length_logprob(task, x) - math.log(len(support))
    if conditioning == MASS:
        total = math.fsum(task.grammar.length_mass(n) for n in range(lo, hi + 1))
        if total <= 0:
            raise ParameterError("zero conditioning mass")
        return inside_logprob(task.grammar, x) - math.log(total)
    raise ParameterError(f"unknown conditioning {conditioning!r}")


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    task: str
    strings: list[str]
    logprobs: list[float]
    conditioning: str
    seed: int

    def __len__(self) -> int:
        return len(self.strings)

    @property
    def num_events(self) -> int:
        """Prediction events: every symbol plus EOS."""
        return sum(len(s) + 1 for s in self.strings)


def sample_dataset(task: TaskSpec, size: int, seed: int, conditioning: str = RANGE,
                   block: int = 10) -> Dataset:
    """Strings with lengths in ``task.train_lengths``, generated in blocks of
    ``block`` consecutive strings that share one sampled length (these
    blocks become the training minibatches)."""
    if size < 0 or block < 1:
        raise ParameterError("size must be >= 0 and block >= 1")
    rng = np.random.default_rng(seed)
    g = task.grammar
    support = task.train_support
    num_blocks = -(-size // block)
    if conditioning == RANGE:
        block_lengths = [support[i] for i in rng.integers(0, len(support), num_blocks)]
    elif conditioning == MASS:
        masses = np.array([g.length_mass(n) for n in support])
        block_lengths = [support[i] for i in rng.choice(len(support), size=num_blocks, p=masses / masses.sum())]
    else:
        raise ParameterError("training data uses range or mass conditioning")
    lengths = [n for n in block_lengths for _ in range(block)][:size]
    strings = [g.sample_conditioned(n, rng) for n in lengths]
    return Dataset(task.name, strings, true_logprobs(task, strings, conditioning), conditioning, seed)


def sample_test_set(task: TaskSpec, seed: int = DEFAULT_TEST_SEED, per_length: int = 100,
                    lengths: Sequence[int] | None = None) -> Dataset:
    rng = np.random.default_rng(seed)
    lengths = task.test_grid if lengths is None else list(lengths)
    strings = [task.grammar.sample_conditioned(n, rng) for n in lengths for _ in range(per_length)]
    return Dataset(task.name, strings, exact_length_logprobs(task, strings), EXACT, seed)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """One string per line, plus a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    path.write_text("".join(s + "\n" for s in ds.strings))
    meta = {
        "format": DATASET_FORMAT,
        "task": ds.task,
        "seed": ds.seed,
        "conditioning": ds.conditioning,
        "logprobs": ds.logprobs,
    }
    _meta_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_path = _meta_path(path)
    if not path.exists() or not meta_path.exists():
        raise InputError(f"dataset {path} or its metadata is missing")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise InputError(f"{meta_path} is not dataset metadata")
    strings = path.read_text().splitlines()
    if len(strings) != len(meta["logprobs"]):
        raise InputError(f"{path}: {len(strings)} lines but {len(meta['logprobs'])} log-probabilities")
    return Dataset(meta["task"], strings, [float(v) for v in meta["logprobs"]], meta["conditioning"], meta["seed"])


# -- metric --------------------------------------------------------------------

@dataclass
class MetricResult:
    value: float  # nats per symbol
    stderr: float  # standard error of the per-string normalized differences
    count: int


def per_string_differences(model_logprobs: Sequence[float], ds: Dataset) -> np.ndarray:
    """``(-log q(x) + log p(x)) / (|x| + 1)`` per string."""
    q = np.asarray(model_logprobs, dtype=np.float64)
    p = np.asarray(ds.logprobs, dtype=np.float64)
    lengths = np.array([len(s) + 1 for s in ds.strings], dtype=np.float64)
    return (p - q) / lengths


def cross_entropy_difference(model_logprobs: Sequence[float], ds: Dataset) -> MetricResult:
    """Model cross-entropy minus true cross-entropy, per prediction event.

    ``model_logprobs[i]`` is the model's log-probability of ``ds.strings[i]``
    including EOS.
    """
    if len(model_logprobs) != len(ds):
        raise InputError("need one model log-probability per string")
    q = np.asarray(model_logprobs, dtype=np.float64)
    p = np.asarray(ds.logprobs, dtype=np.float64)
    value = float((p - q).sum() / ds.num_events)
    d = per_string_differences(q, ds)
    stderr = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
    return MetricResult(value, stderr, len(d))


def binned_differences(model_logprobs: Sequence[float], ds: Dataset) -> list[tuple[int, MetricResult]]:
    """Cross-entropy difference per string length, ascending."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(ds.strings):
        by_len.setdefault(len(s), []).append(i)
    rows = []
    for n in sorted(by_len):
        idx = by_len[n]
        sub = Dataset(ds.task, [ds.strings[i] for i in idx], [ds.logprobs[i] for i in idx], ds.conditioning, ds.seed)
        rows.append((n, cross_entropy_difference([model_logprobs[i] for i in idx], sub)))
    return rows


def binned_test_eval(score: Callable[[list[str]], Sequence[float]], task: TaskSpec,
                     seed: int = DEFAULT_TEST_SEED, per_length: int = 100):
    """Sample the task's test set and return ``(length, MetricResult)`` rows.
    ``score`` maps strings to model log-probabilities."""
    ds = sample_test_set(task, seed, per_length)
    return binned_differences(score(ds.strings), ds)


# -- oracle "model" ------------------------------------------------------------

class OracleModel:
    """Predicts with the task's exact length-conditioned distribution
    ``p(. | |x| = n)``.

    ``next_distribution`` gives per-token conditionals from prefix masses
    (wildcard inside charts); their product telescopes to
    ``p(x | n)``, which ``logprob`` computes directly.
    """

    def __init__(self, task: TaskSpec):
        self.task = task

    def logprob(self, x: str) -> float:
        return exact_length_logprob(self.task, x)

    def score(self, strings: Sequence[str]) -> list[float]:
        return exact_length_logprobs(self.task, strings)

    def next_distribution(self, prefix: str, n: int) -> np.ndarray:
        """Probabilities over ``alphabet + [EOS]`` for the symbol after
        ``prefix`` given total length ``n``."""
        k = len(self.task.alphabet)
        out = np.zeros(k + 1)
        if len(prefix) == n:
            out[k] = 1.0
            return out
        g = self.task.grammar
        rest = WILDCARD * (n - len(prefix) - 1)
        out[:k] = g.inside_probs([prefix + a + rest for a in self.task.alphabet])
        total = out.sum()
        if total <= 0:
            raise ParameterError(f"prefix {prefix!r} has no completion of length {n}")
        return out / total

    def chain_rule_logprob(self, x: str) -> float:
        k = len(self.task.alphabet)
        total = 0.0
        for t in range(len(x) + 1):
            dist = self.next_distribution(x[:t], len(x))
            target = self.task.alphabet.index(x[t]) if t < len(x) else k
            total += math.log(dist[target]) if dist[target] > 0 else -math.inf
        return total
