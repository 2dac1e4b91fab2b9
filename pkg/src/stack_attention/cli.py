"""Command-line interface: ``stack-attention <command> ...``.

Commands: ``generate``, ``train``, ``eval``, ``inspect-actions`` and
``count-params``. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

import torch

from .errors import InputError, ParameterError, StackAttentionError
from .model import (
    NONDETERMINISTIC,
    SDPA,
    SUPERPOSITION,
    VARIANTS,
    ModelConfig,
    build_model,
    count_parameters,
    default_config,
    encode,
    load_checkpoint,
    parameter_breakdown,
)
from .tasks import (
    DEFAULT_TEST_SEED,
    TASK_NAMES,
    binned_differences,
    cross_entropy_difference,
    load_dataset,
    make_task,
    sample_dataset,
    sample_test_set,
    save_dataset,
)
from .training import TrainConfig, score_strings, train_model

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_FILE = "config.json"
SUMMARY_FILE = "summary.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")


def _check_task(name: str | None) -> str:
    if name is None:
        raise UsageError("a task is required (--task or the config file)")
    if name not in TASK_NAMES:
        raise UsageError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    return name


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- generate -------------------------------------------------------------------

GENERATE_KEYS = {"task", "seed", "train_size", "val_size", "test_seed", "per_length", "conditioning"}


def cmd_generate(args) -> int:
    cfg = {"seed": 0, "train_size": 10000, "val_size": 1000, "test_seed": DEFAULT_TEST_SEED,
           "per_length": 100, "conditioning": "range"}
    file_cfg = _read_json(args.config)
    _check_keys(file_cfg, GENERATE_KEYS, "generate config")
    cfg.update(file_cfg)
    for key in GENERATE_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["task"] = _check_task(cfg.get("task"))
    for key in ("train_size", "val_size", "per_length"):
        if not isinstance(cfg[key], int) or cfg[key] < 0:
            raise UsageError(f"{key} must be a non-negative integer")
    if cfg["conditioning"] not in ("range", "mass"):
        raise UsageError("conditioning must be 'range' or 'mass'")
    task = make_task(cfg["task"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # validation and test seeds are offset so the splits never share a stream
    train = sample_dataset(task, cfg["train_size"], cfg["seed"], cfg["conditioning"])
    val = sample_dataset(task, cfg["val_size"], cfg["seed"] + 1_000_003, cfg["conditioning"])
    test = sample_test_set(task, cfg["test_seed"], cfg["per_length"])
    save_dataset(train, out / "train.txt")
    save_dataset(val, out / "val.txt")
    save_dataset(test, out / "test.txt")
    _write_json(out / "generate_config.json", cfg)
    print(json.dumps({"out": str(out), "train": len(train), "val": len(val), "test": len(test), **cfg}))
    return EXIT_OK


# -- train --------------------------------------------------------------------

EXPERIMENT_KEYS = {"task", "variant", "model", "train", "data", "out", "restarts"}
MODEL_KEYS = set(ModelConfig.__dataclass_fields__) - {"alphabet", "variant"}


def _experiment_config(args) -> dict:
    cfg = _read_json(args.config)
    _check_keys(cfg, EXPERIMENT_KEYS, "experiment config")
    for key in ("task", "variant", "data", "out", "restarts"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    model = dict(cfg.get("model", {}))
    train = dict(cfg.get("train", {}))
    _check_keys(model, MODEL_KEYS, "model config")
    _check_keys(train, set(TrainConfig.__dataclass_fields__), "train config")
    if args.seed is not None:
        train["seed"] = args.seed
    if args.max_epochs is not None:
        train["max_epochs"] = args.max_epochs
    if args.lr is not None:
        train["learning_rate"] = args.lr
    cfg["task"] = _check_task(cfg.get("task"))
    cfg["variant"] = cfg.get("variant", SDPA)
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; choose from {', '.join(VARIANTS)}")
    for key in ("data", "out"):
        if not cfg.get(key):
            raise UsageError(f"--{key} is required")
    cfg["restarts"] = int(cfg.get("restarts", 1))
    if cfg["restarts"] < 1:
        raise UsageError("restarts must be at least 1")
    task = make_task(cfg["task"])
    if cfg["variant"] == NONDETERMINISTIC:
        model.setdefault("num_states", task.num_states)
        model.setdefault("num_symbols", task.num_symbols)
    try:
        mc = default_config(task.alphabet, cfg["variant"], **model)
        tc = TrainConfig.from_dict(train)
    except (ParameterError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    cfg["model"] = {k: v for k, v in mc.to_dict().items() if k not in ("alphabet", "variant")}
    cfg["train"] = tc.to_dict()
    return cfg


def _hashed_part(cfg: dict) -> dict:
    # everything that determines the result; output location does not
    return {k: cfg[k] for k in ("task", "variant", "model", "train", "data")}


def _train_one(cfg: dict, out: Path, seed: int, resume: bool) -> dict:
    task = make_task(cfg["task"])
    data = Path(cfg["data"])
    train = load_dataset(data / "train.txt")
    val = load_dataset(data / "val.txt")
    for ds in (train, val):
        if ds.task != task.name:
            raise InputError(f"dataset {data} was generated for {ds.task}, not {task.name}")
    mc = ModelConfig(alphabet=task.alphabet, variant=cfg["variant"], **cfg["model"])
    tc = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    model = build_model(mc, seed)

    def progress(rec):
        if rec["split"] == "val":
            print(json.dumps({"run": str(out), **rec}), flush=True)

    result = train_model(model, train, val, tc, out_dir=out, progress=progress, resume=resume)
    summary = {
        "seed": seed,
        "learning_rate": result.learning_rate,
        "best_epoch": result.best_epoch,
        "epochs": result.epochs,
        "val_cross_entropy": result.best_val.cross_entropy,
        "val_difference": result.best_val.difference,
        "checkpoint": str(out / "best.pt"),
    }
    _write_json(out / SUMMARY_FILE, summary)
    return summary


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    data = Path(cfg["data"])
    for name in ("train.txt", "val.txt"):
        if not (data / name).exists():
            print(f"error: missing dataset {data / name}; run 'stack-attention generate' first", file=sys.stderr)
            return EXIT_RUNTIME
    out = Path(cfg["out"])
    digest = _config_hash(_hashed_part(cfg))
    existing = out / CONFIG_FILE
    if existing.exists():
        old = json.loads(existing.read_text())
        if old.get("hash") != digest:
            print(f"error: {out} holds a run with a different configuration (hash {old.get('hash')} != {digest}); "
                  "use a new --out directory", file=sys.stderr)
            return EXIT_USAGE
        if not args.resume:
            print(f"error: {out} already holds this run; pass --resume to continue it", file=sys.stderr)
            return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    _write_json(existing, {**cfg, "hash": digest})
    print(json.dumps({"effective_config": cfg, "hash": digest}), flush=True)

    base_seed = cfg["train"]["seed"]
    if cfg["restarts"] == 1:
        summary = _train_one(cfg, out, base_seed, args.resume)
        print(json.dumps({"best": summary}))
        return EXIT_OK
    runs = []
    for k in range(cfg["restarts"]):
        run_dir = out / f"run-{k}"
        if args.resume and (run_dir / SUMMARY_FILE).exists():
            runs.append(json.loads((run_dir / SUMMARY_FILE).read_text()))
            continue
        runs.append(_train_one(cfg, run_dir, base_seed + k, args.resume))
    best = min(runs, key=lambda r: r["val_cross_entropy"])
    shutil.copyfile(best["checkpoint"], out / "best.pt")
    _write_json(out / SUMMARY_FILE, {**best, "checkpoint": str(out / "best.pt"), "source": best["checkpoint"],
                                     "runs": runs})
    print(json.dumps({"best": best}))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _load_model(path: str):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except (InputError, RuntimeError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    task = make_task(_check_task(args.task))
    model, _ = _load_model(args.checkpoint)
    if tuple(model.config.alphabet) != task.alphabet:
        print(f"error: checkpoint alphabet {model.config.alphabet} does not match task {task.name} "
              f"{task.alphabet}", file=sys.stderr)
        return EXIT_USAGE
    if args.data is not None:
        ds = load_dataset(Path(args.data) / "test.txt")
        if ds.task != task.name:
            raise UsageError(f"test set belongs to {ds.task}, not {task.name}")
    else:
        ds = sample_test_set(task, args.test_seed, args.per_length)
    scores = score_strings(model, ds.strings)
    rows = [{"length": n, "difference": r.value, "stderr": r.stderr, "count": r.count}
            for n, r in binned_differences(scores, ds)]
    overall = cross_entropy_difference(scores, ds)
    rows.append({"length": "all", "difference": overall.value, "stderr": overall.stderr, "count": overall.count})
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- inspect-actions ------------------------------------------------------------

ACTION_NAMES = ("push", "noop", "pop")


def action_table(model, string: str) -> list[list[str]]:
    """Header plus one row per input position (BOS first)."""
    tokens = encode(model.config, string).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        actions = model.stack_actions(tokens)[0]
    symbols = ["<bos>"] + list(string)
    if model.config.variant == SUPERPOSITION:
        header = ["position", "symbol", *ACTION_NAMES]
        body = [[str(i), symbols[i], *(f"{v:.6f}" for v in actions[i].tolist())] for i in range(len(symbols))]
        return [header, *body]
    cfg = model.stack_attention.config.vpda
    Q, G = cfg.num_states, cfg.num_symbols
    names = []
    for q in range(Q):
        for x in range(G):
            for r in range(Q):
                names += [f"q{q}.x{x}>r{r}.push{y}" for y in range(G)]
                names += [f"q{q}.x{x}>r{r}.repl{y}" for y in range(G)]
                names.append(f"q{q}.x{x}>r{r}.pop")
    header = ["position", "symbol", *names]
    flat = actions.reshape(actions.shape[0], -1)
    body = [[str(i), symbols[i], *(f"{v:.6f}" for v in flat[i].tolist())] for i in range(len(symbols))]
    return [header, *body]


def cmd_inspect_actions(args) -> int:
    model, _ = _load_model(args.checkpoint)
    if model.config.variant == SDPA:
        print("error: inspect-actions needs a model with a stack attention layer", file=sys.stderr)
        return EXIT_USAGE
    try:
        table = action_table(model, args.string)
    except InputError as exc:
        raise UsageError(str(exc)) from None
    text = "".join("\t".join(row) + "\n" for row in table)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- count-params ---------------------------------------------------------------

def cmd_count_params(args) -> int:
    tasks = TASK_NAMES if args.task is None else (_check_task(args.task),)
    variants = VARIANTS if args.variant is None else (args.variant,)
    overrides = _read_json(args.config)
    _check_keys(overrides, MODEL_KEYS, "model config")
    rows = []
    for name in tasks:
        task = make_task(name)
        for variant in variants:
            extra = dict(overrides)
            if variant == NONDETERMINISTIC:
                extra.setdefault("num_states", task.num_states)
                extra.setdefault("num_symbols", task.num_symbols)
            try:
                model = build_model(default_config(task.alphabet, variant, **extra))
            except ParameterError as exc:
                raise UsageError(str(exc)) from None
            rows.append({"task": name, "variant": variant, "total": count_parameters(model),
                         "breakdown": parameter_breakdown(model)})
    if args.json:
        for row in rows:
            print(json.dumps(row))
    else:
        for row in rows:
            print(f"{row['task']}\t{row['variant']}\t{row['total']}")
            if args.breakdown:
                for key, n in row["breakdown"].items():
                    print(f"  {key}\t{n}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stack-attention", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample train/val/test datasets for a task")
    g.add_argument("--config")
    g.add_argument("--task")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--train-size", type=int, dest="train_size")
    g.add_argument("--val-size", type=int, dest="val_size")
    g.add_argument("--test-seed", type=int, dest="test_seed")
    g.add_argument("--per-length", type=int, dest="per_length")
    g.add_argument("--conditioning", choices=("range", "mass"))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a language model on generated data")
    t.add_argument("--config")
    t.add_argument("--task")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int, dest="max_epochs")
    t.add_argument("--lr", type=float)
    t.add_argument("--restarts", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-length cross-entropy difference on the test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--data", help="directory holding test.txt (default: sample the test set)")
    e.add_argument("--test-seed", type=int, default=DEFAULT_TEST_SEED, dest="test_seed")
    e.add_argument("--per-length", type=int, default=100, dest="per_length")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("inspect-actions", help="write the stack actions for one string as TSV")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--string", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_inspect_actions)

    c = sub.add_parser("count-params", help="parameter counts per task and variant")
    c.add_argument("--task")
    c.add_argument("--variant", choices=VARIANTS)
    c.add_argument("--config", help="JSON object of model size overrides")
    c.add_argument("--breakdown", action="store_true")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_count_params)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StackAttentionError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
