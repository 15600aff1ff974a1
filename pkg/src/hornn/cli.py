"""Command-line entry point: ``hornn train|eval|sweep|gradcheck|inspect``.

Settings resolve as command-line flag > config file > built-in default.
A config file is either a JSON object (such as a run's ``run.json``) or
flat ``key = value`` lines with JSON values; ``#`` starts a comment.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from hornn.checkpoint import CheckpointError, load_checkpoint, read_header
from hornn.corpus import CorpusError, Vocab, build_vocab, make_stream, read_tokens
from hornn.evaluation import alpha_sweep, gradient_check, order_sweep, perplexity
from hornn.model import POOLINGS, HornnConfig, param_shapes
from hornn.numerics import ACTIVATIONS, ContractError
from hornn.training import SCHEDULES, TrainingDivergedError, TrainSettings, train

log = logging.getLogger("hornn")

OUT_ENV = "HORNN_OUT"

# every training-style setting with its default (the reference training recipe)
TRAIN_DEFAULTS: dict[str, object] = {
    "corpus": None,
    "valid": None,
    "test": None,
    "min_count": 0,
    "eos": True,
    "order": 3,
    "hidden": 400,
    "pooling": "fofe",
    "alpha": 0.6,
    "activation": "sigmoid",
    "seed": 1,
    "init_std": 0.1,
    "bias": False,
    "precision": 32,
    "lanes": 20,
    "window": 30,
    "epochs": 10,
    "lr": 0.5,
    "momentum": 0.9,
    "weight_decay": 1e-5,
    "clip": 5.0,
    "clip_mode": "elementwise",
    "column_norm_cap": 1.0,
    "schedule": "validation_halving",
    "fixed_epochs": 5,
    "eval_window": 30,
    "resume": None,
    "out": None,
}

_HELP = {
    "corpus": "training corpus, whitespace-tokenised UTF-8",
    "valid": "validation corpus for the learning-rate schedule",
    "test": "test corpus (required by sweep)",
    "min_count": "tokens seen fewer times than this map to <unk>",
    "eos": "append <eos> at every line end (true/false)",
    "order": "number of delayed hidden states fed back",
    "hidden": "hidden layer width",
    "pooling": f"feedback pooling, one of {', '.join(POOLINGS)}",
    "alpha": "fofe forgetting factor in (0, 1)",
    "activation": f"hidden nonlinearity, one of {', '.join(ACTIVATIONS)}",
    "seed": "initialisation seed",
    "init_std": "std of the Gaussian weight initialisation",
    "bias": "add hidden and output bias vectors (true/false)",
    "precision": "float width, 32 or 64",
    "lanes": "subsequences per mini-batch",
    "window": "BPTT window length",
    "epochs": "total number of epochs",
    "lr": "initial learning rate",
    "momentum": "momentum coefficient",
    "weight_decay": "L2 weight decay",
    "clip": "gradient clipping limit",
    "clip_mode": "elementwise or norm",
    "column_norm_cap": "max L2 norm of w_in / w_h columns; 'none' disables",
    "schedule": f"learning-rate schedule, one of {', '.join(SCHEDULES)}",
    "fixed_epochs": "epochs at the initial rate under text8_schedule",
    "eval_window": "window length for perplexity passes",
    "resume": "checkpoint to continue training from",
    "out": f"run directory (default root: ${OUT_ENV} or ./runs)",
}

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}") from None


def _cap(text: str):
    return None if text.lower() in ("none", "off", "0") else float(text)


_TYPES = {
    "min_count": int, "eos": _bool, "order": int, "hidden": int, "alpha": float, "seed": int,
    "init_std": float, "bias": _bool, "precision": int, "lanes": int, "window": int,
    "epochs": int, "lr": float, "momentum": float, "weight_decay": float, "clip": float,
    "column_norm_cap": _cap, "fixed_epochs": int, "eval_window": int,
}
_CHOICES = {
    "pooling": POOLINGS, "activation": ACTIVATIONS, "schedule": SCHEDULES,
    "clip_mode": ("elementwise", "norm"), "precision": (32, 64),
}


def read_config_file(path) -> dict:
    """Parse a JSON object or ``key = json-value`` lines."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        return data.get("settings", data)
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            data[key.replace("-", "_")] = json.loads(raw)
        except json.JSONDecodeError:
            raise UsageError(f"{path}:{lineno}: value for {key!r} is not valid JSON") from None
    return data


def resolve(flags: dict, config_path, defaults: dict) -> dict:
    """Merge built-in defaults, then config-file values, then explicit flags."""
    merged = dict(defaults)
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} in {config_path}")
            merged[key] = value
    merged.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    return merged


def _add_train_flags(p: argparse.ArgumentParser, skip=()) -> None:
    for key, default in TRAIN_DEFAULTS.items():
        if key in skip:
            continue
        kwargs = {"dest": key, "default": None, "help": f"{_HELP[key]} (default: {default})"}
        if key in _TYPES:
            kwargs["type"] = _TYPES[key]
        if key in _CHOICES and key != "precision":
            kwargs["choices"] = _CHOICES[key]
        p.add_argument("--" + key.replace("_", "-"), **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hornn", description="Higher order RNN language models.")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file (JSON object or key = value lines) (default: none)")
    _add_train_flags(p, skip=("test",))

    p = sub.add_parser("eval", help="score a corpus with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--name", help="corpus name in the report (default: file name)")
    p.add_argument("--window", type=int, default=30, help="scoring window (default: 30)")
    p.add_argument("--histogram", type=int, default=0, help="NLL histogram bins, 0 for none (default: 0)")
    p.add_argument("--vocab", help="vocabulary file to compare against the checkpoint's (default: none)")

    p = sub.add_parser("sweep", help="order or alpha sweep")
    p.add_argument("kind", choices=("order", "alpha"))
    p.add_argument("--values", required=True, help="comma list or a..b[:step] range (required)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes (default: 1)")
    p.add_argument("--config", help="config file (default: none)")
    _add_train_flags(p, skip=("resume",))

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--variant", default="all", help="pooling or 'all' (default: all)")
    p.add_argument("--order", default="1,2,3,4", help="orders, comma list (default: 1,2,3,4)")
    p.add_argument("--activation", default="sigmoid,tanh", help="activations, comma list (default: sigmoid,tanh)")
    p.add_argument("--seed", type=int, default=0, help="first instance seed (default: 0)")
    p.add_argument("--seeds", type=int, default=1, help="instances per cell (default: 1)")
    p.add_argument("--tolerance", type=float, default=1e-5, help="max relative error (default: 1e-05)")
    p.add_argument(
        "--inject-fault",
        metavar="MATRIX",
        help="negative control: flip the sign of this gradient (e.g. w_h1) (default: none)",
    )

    p = sub.add_parser("inspect", help="print a checkpoint header")
    p.add_argument("checkpoint")
    p.add_argument("--stats", action="store_true", help="load matrices and print norms (default: off)")
    return parser


# --- helpers ----------------------------------------------------------------


def _tokens(path, eos: bool) -> list[str]:
    try:
        return read_tokens(path, add_eos=eos)
    except OSError as exc:
        raise UsageError(f"cannot read corpus {path}: {exc.strerror}") from None


def _model_and_settings(s: dict, vocab_size: int) -> tuple[HornnConfig, TrainSettings]:
    try:
        cfg = HornnConfig(
            vocab=vocab_size, order=s["order"], hidden=s["hidden"], pooling=s["pooling"],
            alpha=s["alpha"], activation=s["activation"], seed=s["seed"],
            init_std=s["init_std"], bias=s["bias"], precision=s["precision"],
        )
        settings = TrainSettings(
            lanes=s["lanes"], window=s["window"], epochs=s["epochs"], lr=s["lr"],
            momentum=s["momentum"], weight_decay=s["weight_decay"], clip=s["clip"],
            clip_mode=s["clip_mode"], column_norm_cap=s["column_norm_cap"],
            schedule=s["schedule"], fixed_epochs=s["fixed_epochs"], eval_window=s["eval_window"],
        )
    except (ContractError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return cfg, settings


def _check_ranges(s: dict) -> None:
    """Reject bad hyperparameters before any file is read."""
    if s["pooling"] == "fofe" and not 0 < float(s["alpha"]) < 1:
        raise UsageError(f"--alpha must lie in (0, 1) for fofe pooling, got {s['alpha']}")
    for key, choices in _CHOICES.items():
        if s[key] not in choices:
            raise UsageError(f"--{key.replace('_', '-')} must be one of {choices}, got {s[key]!r}")
    _model_and_settings(s, 2)


def _default_out(kind: str, s: dict) -> Path:
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{kind}-{s['pooling']}-o{s['order']}-s{s['seed']}"


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    s = resolve(vars(args), args.config, TRAIN_DEFAULTS)
    _check_ranges(s)
    if not s["corpus"]:
        raise UsageError("train needs --corpus")
    out = Path(s["out"]) if s["out"] else _default_out("train", s)

    resume = None
    if s["resume"]:
        resume = load_checkpoint(s["resume"])
        vocab = Vocab.from_dict(resume.vocab)
    elif (out / "metrics.jsonl").exists():
        raise UsageError(f"{out} already holds a run; pass --resume or choose another --out")

    train_tokens = _tokens(s["corpus"], s["eos"])
    valid_tokens = _tokens(s["valid"], s["eos"]) if s["valid"] else None
    if resume is None:
        try:
            vocab = build_vocab(train_tokens, s["min_count"])
        except CorpusError as exc:
            raise UsageError(str(exc)) from None
    cfg, settings = _model_and_settings(s, vocab.size)
    if resume is not None:
        cfg = resume.config
    train_ids = vocab.encode(train_tokens)
    valid_ids = None if valid_tokens is None else vocab.encode(valid_tokens)
    try:
        make_stream(train_ids, settings.lanes, settings.window)
    except CorpusError as exc:
        raise UsageError(str(exc)) from None

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run.json", {"command": "train", "settings": s})
    vocab.save(out / "vocab.tsv")
    vocab_record = vocab.to_dict() | {"add_eos": s["eos"]}

    def report(rec: dict) -> None:
        if "lr_next" in rec:
            log.info(
                "epoch %d  train_nll %.4f  valid_ppl %s  lr_next %g",
                rec["epoch"], rec["train_nll"],
                "-" if rec["valid_ppl"] is None else f"{rec['valid_ppl']:.3f}", rec["lr_next"],
            )

    train(
        cfg, train_ids, valid_ids, settings,
        out_dir=out, resume=resume, vocab=vocab_record, on_metrics=report,
    )
    log.info("run written to %s", out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise UsageError(f"{args.checkpoint} carries no vocabulary")
    vocab = Vocab.from_dict(ckpt.vocab)
    if args.vocab:
        other = Vocab.load(args.vocab, vocab.unk_token)
        if other.digest() != vocab.digest():
            print(f"warning: {args.vocab} differs from the checkpoint vocabulary", file=sys.stderr)
    tokens = _tokens(args.corpus, ckpt.vocab.get("add_eos", True))
    ids = vocab.encode(tokens)
    oov = sum(1 for t in tokens if t not in vocab.token_to_id)
    if oov:
        print(f"warning: {oov} of {len(tokens)} tokens are out of vocabulary, scored as {vocab.unk_token}", file=sys.stderr)
    try:
        report = perplexity(
            ckpt.config, ckpt.params, ids, args.window,
            name=args.name or Path(args.corpus).name, histogram_bins=args.histogram or None,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    print(report.to_json())
    return 0


def parse_values(text: str, kind: str) -> list:
    """``"2,3,4"`` or ``"0.2..0.9"`` (step 0.1 for alpha, 1 for order) or ``"a..b:step"``."""
    text = text.strip()
    cast = int if kind == "order" else float
    if not text:
        raise UsageError("--values is empty")
    if ".." in text:
        span, _, step = text.partition(":")
        lo, hi = (cast(v) for v in span.split(".."))
        step = cast(step) if step else (1 if kind == "order" else 0.1)
        if step <= 0 or hi < lo:
            raise UsageError(f"bad range {text!r}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        values = [round(lo + i * step, 10) for i in range(count)]
        return [int(v) for v in values] if kind == "order" else values
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --values {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    return values


def cmd_sweep(args) -> int:
    values = parse_values(args.values, args.kind)
    s = resolve(vars(args), args.config, TRAIN_DEFAULTS)
    if args.kind == "alpha":
        s["pooling"] = "fofe"
        bad = [a for a in values if not 0 < a < 1]
        if bad:
            raise UsageError(f"alpha values must lie in (0, 1): {bad}")
    _check_ranges(s)
    if not s["corpus"] or not s["test"]:
        raise UsageError("sweep needs --corpus and --test")
    out = Path(s["out"]) if s["out"] else _default_out(f"sweep-{args.kind}", s)
    train_tokens = _tokens(s["corpus"], s["eos"])
    test_tokens = _tokens(s["test"], s["eos"])
    valid_tokens = _tokens(s["valid"], s["eos"]) if s["valid"] else None
    vocab = build_vocab(train_tokens, s["min_count"])
    cfg, settings = _model_and_settings(s, vocab.size)
    valid_ids = None if valid_tokens is None else vocab.encode(valid_tokens)
    sweep = order_sweep if args.kind == "order" else alpha_sweep
    try:
        result = sweep(
            cfg, values, vocab.encode(train_tokens), vocab.encode(test_tokens),
            settings, valid_ids=valid_ids, jobs=args.jobs,
        )
    except (ContractError, CorpusError) as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run.json", {"command": f"sweep {args.kind}", "values": values, "settings": s})
    (out / f"sweep-{args.kind}.txt").write_text(result.to_table(), encoding="utf-8")
    (out / f"sweep-{args.kind}.json").write_text(result.to_json() + "\n", encoding="utf-8")
    (out / f"sweep-{args.kind}.csv").write_text(result.to_csv(), encoding="utf-8")
    print(result.to_table(), end="")
    return 0


def _faulty_backward(matrix: str):
    from hornn.training import backward_window

    def backward(*a, **kw):
        grads = backward_window(*a, **kw)
        for name, arr in grads.named():
            if name == matrix:
                arr *= -1
        return grads

    return backward


def cmd_gradcheck(args) -> int:
    from hornn.training import backward_window

    variants = POOLINGS if args.variant == "all" else tuple(args.variant.split(","))
    try:
        orders = [int(o) for o in args.order.split(",")]
    except ValueError:
        raise UsageError(f"bad --order {args.order!r}") from None
    activations = tuple(args.activation.split(","))
    for v in variants:
        if v not in POOLINGS:
            raise UsageError(f"unknown variant {v!r}")
    for a in activations:
        if a not in ACTIVATIONS:
            raise UsageError(f"unknown activation {a!r}")
    if args.seeds < 1 or any(o < 1 for o in orders):
        raise UsageError("--seeds and --order must be positive")
    if args.inject_fault:
        known = set()
        for pooling in variants:
            for order in orders:
                known |= set(param_shapes(HornnConfig(vocab=11, order=order, hidden=7, pooling=pooling)))
        if args.inject_fault not in known:
            raise UsageError(f"--inject-fault {args.inject_fault!r} names no checked matrix; known: {sorted(known)}")
    backward = _faulty_backward(args.inject_fault) if args.inject_fault else backward_window

    failed = 0
    for pooling in variants:
        for order in orders:
            for act in activations:
                cfg = HornnConfig(vocab=11, order=order, hidden=7, pooling=pooling, activation=act, precision=64)
                for seed in range(args.seed, args.seed + args.seeds):
                    rep = gradient_check(cfg, seed, tolerance=args.tolerance, backward=backward)
                    worst = rep.worst
                    print(json.dumps({
                        "pooling": pooling, "order": order, "activation": act, "seed": seed,
                        "passed": rep.passed, "max_rel_error": rep.max_rel_error,
                        "worst_matrix": worst.name, "worst_index": list(worst.worst_index),
                    }))
                    failed += not rep.passed
    print(json.dumps({"summary": "fail" if failed else "pass", "failed_cells": failed}))
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    header = read_header(args.checkpoint)
    vocab = header.pop("vocab", None)
    if vocab is not None:
        header["vocab"] = {"size": len(vocab["tokens"]), "unk_id": vocab["unk_id"]}
    header["matrix_count"] = len(header["matrices"])
    if args.stats:
        ckpt = load_checkpoint(args.checkpoint)
        header["stats"] = {
            name: {"l2_norm": float(np.linalg.norm(a)), "max_abs": float(np.max(np.abs(a)))}
            for name, a in ckpt.params.named()
        }
    print(json.dumps(header, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hornn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDivergedError, ContractError, CorpusError, OSError) as exc:
        print(f"hornn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
