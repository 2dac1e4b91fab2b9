"""Training loop: Adam, global-norm gradient clipping, plateau LR decay and
early stopping on validation cross-entropy."""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ParameterError, TrainingError
from .initialization import init_parameters
from .model import TransformerLM, batch_logprobs, encode, save_checkpoint
from .tasks.cfl import Dataset

__all__ = [
    "TrainConfig", "ScheduleState", "TrainResult", "init_parameters", "clip_gradients",
    "make_optimizer", "adam_step", "schedule_step", "sample_learning_rate", "make_batches",
    "score_strings", "evaluate", "train_model",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    max_epochs: int = 200
    learning_rate: float | None = None  # None: sample log-uniformly from lr_range
    lr_range: tuple[float, float] = (5e-4, 1e-2)
    clip_threshold: float = 5.0
    lr_decay: float = 0.9
    decay_patience: int = 5
    stop_patience: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_range", tuple(self.lr_range))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ParameterError("batch_size and max_epochs must be positive")
        if self.decay_patience < 1 or self.stop_patience < 1:
            raise ParameterError("patience values must be at least 1")
        if self.clip_threshold <= 0 or not 0 < self.lr_decay <= 1:
            raise ParameterError("clip threshold must be positive and lr_decay in (0, 1]")
        lo, hi = self.lr_range
        if not 0 < lo <= hi:
            raise ParameterError("lr_range must be positive and ordered")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_range"] = list(self.lr_range)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def sample_learning_rate(lr_range: tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = lr_range
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


# -- optimizer pieces ---------------------------------------------------------

def clip_gradients(params: Iterable[torch.nn.Parameter], threshold: float = 5.0) -> float:
    """Rescale all gradients in place so their global L2 norm is at most
    ``threshold``. Returns the norm before clipping."""
    if threshold <= 0:
        raise ParameterError("clip threshold must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(math.fsum(float(g.detach().double().pow(2).sum()) for g in grads))
    if norm > threshold:
        scale = threshold / norm
        for g in grads:
            g.mul_(scale)
    return norm


def make_optimizer(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    """Adam with bias correction (the optimizer state holds both moments and
    the step count per parameter)."""
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps)


def adam_step(params: Sequence[torch.nn.Parameter], grads: Sequence[torch.Tensor],
              optimizer: torch.optim.Adam) -> None:
    """Apply one Adam update using explicit gradients."""
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    optimizer.step()


@dataclass
class ScheduleState:
    lr: float
    best: float = math.inf
    since_best: int = 0
    since_decay: int = 0
    stop: bool = False


def schedule_step(metric: float, state: ScheduleState, decay: float = 0.9,
                  decay_patience: int = 5, stop_patience: int = 10) -> ScheduleState:
    """Update the schedule after one epoch's validation metric. Improvement
    means strictly lower than the best so far. The learning rate is
    multiplied by ``decay`` after every ``decay_patience`` consecutive
    epochs without improvement; ``stop`` is set after ``stop_patience``."""
    if metric < state.best:
        state.best = metric
        state.since_best = 0
        state.since_decay = 0
    else:
        state.since_best += 1
        state.since_decay += 1
        if state.since_decay >= decay_patience:
            state.lr *= decay
            state.since_decay = 0
        if state.since_best >= stop_patience:
            state.stop = True
    return state


# -- data ---------------------------------------------------------------------

def make_batches(model: TransformerLM, strings: Sequence[str], batch_size: int) -> list[torch.Tensor]:
    """Group strings into batches of equal length. Strings are taken in
    order and grouped by length, so data generated in equal-length blocks
    yields exactly those blocks."""
    by_len: dict[int, list[str]] = {}
    order: list[int] = []
    for s in strings:
        if len(s) not in by_len:
            by_len[len(s)] = []
            order.append(len(s))
        by_len[len(s)].append(s)
    batches = []
    for n in order:
        group = by_len[n]
        for i in range(0, len(group), batch_size):
            batches.append(torch.stack([encode(model.config, s) for s in group[i : i + batch_size]]).reshape(-1, n))
    return batches


def score_strings(model: TransformerLM, strings: Sequence[str], batch_size: int = 50) -> list[float]:
    """Model log-probabilities (EOS included) in eval mode."""
    was_training = model.training
    model.eval()
    out = [0.0] * len(strings)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(strings):
        by_len.setdefault(len(s), []).append(i)
    with torch.no_grad():
        for n, idx in by_len.items():
            for j in range(0, len(idx), batch_size):
                chunk = idx[j : j + batch_size]
                tokens = torch.stack([encode(model.config, strings[i]) for i in chunk]).reshape(-1, n)
                for i, v in zip(chunk, batch_logprobs(model, tokens).tolist()):
                    out[i] = v
    model.train(was_training)
    return out


@dataclass
class EvalResult:
    cross_entropy: float  # nats per prediction event
    difference: float  # minus the true per-event cross-entropy


def evaluate(model: TransformerLM, ds: Dataset) -> EvalResult:
    lp = score_strings(model, ds.strings)
    events = ds.num_events
    ce = -math.fsum(lp) / events
    true_ce = -math.fsum(ds.logprobs) / events
    return EvalResult(ce, ce - true_ce)


# -- loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TransformerLM
    best_val: EvalResult
    best_epoch: int
    epochs: int
    learning_rate: float
    log: list[dict] = field(default_factory=list)


STATE_FILE = "last.pt"


def train_model(
    model: TransformerLM,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train in place and return the best-validation model.

    The loss of a batch is the log-loss summed over timesteps and averaged
    over strings. If ``out_dir`` is given, ``log.jsonl``, the best checkpoint
    ``best.pt`` and the resumable end-of-epoch state ``last.pt`` are written
    there; ``resume=True`` continues from ``last.pt`` when it exists.
    """
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    lr = config.learning_rate if config.learning_rate is not None else sample_learning_rate(config.lr_range, rng)
    batches = make_batches(model, train.strings, config.batch_size)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, lr, config.betas, config.adam_eps)
    sched = ScheduleState(lr=lr)
    out = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    first_epoch = 1
    elapsed_before = 0.0
    state_path = out / STATE_FILE if out is not None else None

    if resume and state_path is not None and state_path.exists():
        st = torch.load(state_path, map_location="cpu", weights_only=True)
        model.load_state_dict(st["model"])
        optimizer.load_state_dict(st["optimizer"])
        sched = ScheduleState(**json.loads(st["schedule"]))
        rng.bit_generator.state = json.loads(st["numpy_rng"])
        torch.set_rng_state(st["torch_rng"])
        best_state = st["best_model"]
        best_val = EvalResult(**json.loads(st["best_val"]))
        best_epoch = int(st["best_epoch"])
        lr = float(st["initial_lr"])
        first_epoch = int(st["epoch"]) + 1
        elapsed_before = float(st["seconds"])
        log = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines() if line.strip()]
        log = [r for r in log if r["epoch"] < first_epoch]
    else:
        best_state = copy.deepcopy(model.state_dict())
        best_val = evaluate(model, val)
        best_epoch = 0
        sched.best = best_val.cross_entropy
        log.append(dict(epoch=0, split="val", metric="cross_entropy", value=best_val.cross_entropy,
                        difference=best_val.difference, lr=lr, seconds=0.0))
        if progress is not None:
            progress(log[-1])

    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "log.jsonl", "w")
        for rec in log:
            log_file.write(json.dumps(rec) + "\n")
        log_file.flush()
        if best_epoch == 0 and first_epoch == 1:
            _save_best(out, model, 0, best_val)

    def record(**rec):
        log.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()
        if progress is not None:
            progress(rec)

    start = time.perf_counter() - elapsed_before
    epoch = first_epoch - 1
    try:
        for epoch in range(first_epoch, config.max_epochs + 1):
            if sched.stop:
                break
            model.train()
            total, events = 0.0, 0
            for b in rng.permutation(len(batches)):
                tokens = batches[b]
                optimizer.zero_grad(set_to_none=True)
                logp = batch_logprobs(model, tokens)
                loss = -logp.mean()
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at epoch {epoch} "
                        f"(batch of length {tokens.shape[1]}, lr {sched.lr:g})"
                    )
                loss.backward()
                clip_gradients(params, config.clip_threshold)
                optimizer.step()
                total += -float(logp.detach().sum())
                events += tokens.numel() + tokens.shape[0]
            result = evaluate(model, val)
            elapsed = time.perf_counter() - start
            record(epoch=epoch, split="train", metric="cross_entropy", value=total / events,
                   lr=sched.lr, seconds=elapsed)
            record(epoch=epoch, split="val", metric="cross_entropy", value=result.cross_entropy,
                   difference=result.difference, lr=sched.lr, seconds=elapsed)
            if result.cross_entropy < best_val.cross_entropy:
                best_val, best_epoch = result, epoch
                best_state = copy.deepcopy(model.state_dict())
                if out is not None:
                    _save_best(out, model, epoch, result)
            schedule_step(result.cross_entropy, sched, config.lr_decay, config.decay_patience, config.stop_patience)
            for group in optimizer.param_groups:
                group["lr"] = sched.lr
            if state_path is not None:
                torch.save({
                    "model": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "schedule": json.dumps(asdict(sched)),
                    "numpy_rng": json.dumps(rng.bit_generator.state),
                    "torch_rng": torch.get_rng_state(),
                    "best_model": best_state,
                    "best_val": json.dumps(asdict(best_val)),
                    "best_epoch": best_epoch,
                    "initial_lr": lr,
                    "epoch": epoch,
                    "seconds": elapsed,
                }, state_path)
            if sched.stop:
                break
    finally:
        if log_file is not None:
            log_file.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_val, best_epoch, epoch, lr, log)


def _save_best(out: Path, model: TransformerLM, epoch: int, result: EvalResult) -> None:
    save_checkpoint(out / "best.pt", model, {
        "epoch": epoch, "val_cross_entropy": result.cross_entropy, "val_difference": result.difference,
    })
