"""Truncated BPTT, the optimiser, the learning-rate schedules and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from hornn.corpus import fingerprint, make_stream
from hornn.model import (
    HornnConfig,
    Parameters,
    StateBuffer,
    StepTrace,
    forward_window,
    init_params,
)
from hornn.numerics import ContractError, Rng, activation_grad

log = logging.getLogger(__name__)

SCHEDULES = ("validation_halving", "text8_schedule")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    lanes: int = 20
    window: int = 30
    epochs: int = 10
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-5
    clip: float = 5.0
    clip_mode: str = "elementwise"
    column_norm_cap: float | None = 1.0
    schedule: str = "validation_halving"
    fixed_epochs: int = 5
    eval_window: int = 30

    def __post_init__(self):
        if self.lanes < 1 or self.window < 1 or self.eval_window < 1:
            raise ContractError("lanes, window and eval_window must be positive")
        if self.epochs < 0:
            raise ContractError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.clip <= 0:
            raise ContractError(f"clip must be positive, got {self.clip}")
        if self.clip_mode not in ("elementwise", "norm"):
            raise ContractError(f"clip_mode must be elementwise or norm, got {self.clip_mode!r}")
        if self.column_norm_cap is not None and self.column_norm_cap <= 0:
            raise ContractError("column_norm_cap must be positive or None")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptState:
    lr: float
    buffers: Parameters
    momentum: float = 0.9
    weight_decay: float = 1e-5
    column_norm_cap: float | None = 1.0
    epoch: int = 0
    best_valid_nll: float = math.inf
    halvings: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Parameters, settings: TrainSettings) -> "OptState":
        return cls(
            lr=settings.lr,
            buffers=params.zeros_like(),
            momentum=settings.momentum,
            weight_decay=settings.weight_decay,
            column_norm_cap=settings.column_norm_cap,
        )

    def header(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "column_norm_cap": self.column_norm_cap,
            "epoch": self.epoch,
            "best_valid_nll": None if math.isinf(self.best_valid_nll) else self.best_valid_nll,
            "halvings": list(self.halvings),
        }


# --- backward pass --------------------------------------------------------


def backward_window(
    cfg: HornnConfig,
    params: Parameters,
    traces: list[StepTrace],
    targets,
    weights=None,
    return_state_grads: bool = False,
):
    """Exact gradient of the window's mean NLL with respect to every parameter.

    States carried in from before the window are constants: gradient flows
    into ``W_hn`` through them but stops there. ``weights`` (length T)
    rescales each time step's loss term; it exists for instrumentation and
    for checking that per-step contributions add up. With
    ``return_state_grads`` the per-step gradients ``dL/dh[t]`` are returned
    as a second value, shaped ``(T, lanes, hidden)``.
    """
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None]
    T = len(traces)
    if T == 0 or targets.shape[1] != T or traces[0].h.shape[0] != targets.shape[0]:
        raise ContractError(
            f"trace/window mismatch: {T} traces of {traces[0].h.shape[0] if T else 0} lanes "
            f"vs targets {targets.shape}"
        )
    B = targets.shape[0]
    N, V = cfg.order, cfg.vocab
    grads = params.zeros_like()

    ys = np.stack([tr.y for tr in traces])
    hs = np.stack([tr.h for tr in traces])
    d_logits = ys.copy()
    t_idx, b_idx = np.meshgrid(np.arange(T), np.arange(B), indexing="ij")
    d_logits[t_idx, b_idx, targets.T] -= 1
    d_logits *= 1.0 / (B * T)
    if weights is not None:
        d_logits *= np.asarray(weights, dtype=d_logits.dtype)[:, None, None]

    grads.w_out[...] = d_logits.reshape(T * B, V).T @ hs.reshape(T * B, -1)
    if grads.b_out is not None:
        grads.b_out[...] = d_logits.sum(axis=(0, 1))
    d_h = d_logits @ params.w_out  # (T, B, d); later steps add into earlier rows
    d_z_all = np.empty_like(d_h)
    coef = cfg.fofe_coefficients() if cfg.pooling == "fofe" else None

    for t in range(T - 1, -1, -1):
        tr = traces[t]
        d_z = d_h[t] * activation_grad(cfg.activation, tr.z, tr.h)
        d_z_all[t] = d_z
        for n in range(1, N + 1):
            h_prev = tr.history[n - 1]
            if cfg.pooling == "plain":
                d_p = d_z
            elif cfg.pooling == "fofe":
                d_p = d_z * d_z.dtype.type(coef[n - 1])
            elif cfg.pooling == "max":
                d_p = d_z * (tr.selector == n - 1)
            else:
                r = tr.gates[n - 1]
                d_p = d_z * r
                d_a = d_z * tr.products[n - 1] * r * (1 - r)
                np.add.at(grads.gate_w1[n - 1].T, tr.x, d_a)
                grads.gate_w2[n - 1] += d_a.T @ h_prev
            grads.w_h[n - 1] += d_p.T @ h_prev
            if t - n >= 0:
                d_h[t - n] += d_p @ params.w_h[n - 1]
                if cfg.pooling == "gated":
                    d_h[t - n] += d_a @ params.gate_w2[n - 1]

    xs = np.stack([tr.x for tr in traces])
    np.add.at(grads.w_in.T, xs.ravel(), d_z_all.reshape(T * B, -1))
    if grads.b_h is not None:
        grads.b_h[...] = d_z_all.sum(axis=(0, 1))
    if return_state_grads:
        return grads, d_h
    return grads


# --- optimiser ------------------------------------------------------------


def clip_gradients(g: Parameters, limit: float, mode: str = "elementwise") -> Parameters:
    """Clamp every element into ``[-limit, limit]`` (or rescale by global norm)."""
    if limit <= 0:
        raise ContractError(f"clip limit must be positive, got {limit}")
    if mode == "elementwise":
        return g.map(lambda a: np.clip(a, -limit, limit))
    if mode == "norm":
        norm = math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in g.arrays()))
        if norm <= limit:
            return g.copy()
        scale = limit / norm
        return g.map(lambda a: a * a.dtype.type(scale))
    raise ContractError(f"unknown clip mode {mode!r}")


def _cap_columns(w: np.ndarray, cap: float) -> None:
    norms = np.sqrt(np.sum(np.square(w, dtype=np.float64), axis=0))
    over = norms > cap
    if np.any(over):
        w[:, over] *= (cap / norms[over]).astype(w.dtype)


def sgd_update(params: Parameters, g: Parameters, opt: OptState) -> Parameters:
    """Momentum SGD with weight decay, then column-norm capping of ``w_in`` and ``w_h*``.

    Updates ``params`` and ``opt.buffers`` in place and returns ``params``.
    """
    dt = params.w_in.dtype.type
    mu, wd, lr = dt(opt.momentum), dt(opt.weight_decay), dt(opt.lr)
    for (_, p), (_, grad), (_, buf) in zip(params.named(), g.named(), opt.buffers.named()):
        buf *= mu
        buf += grad
        if wd:
            buf += wd * p
        p -= lr * buf
    if opt.column_norm_cap is not None:
        _cap_columns(params.w_in, opt.column_norm_cap)
        for w in params.w_h:
            _cap_columns(w, opt.column_norm_cap)
    return params


def end_of_epoch_schedule(
    opt: OptState,
    valid_nll: float | None,
    schedule: str = "validation_halving",
    fixed_epochs: int = 5,
) -> OptState:
    """Apply the end-of-epoch learning-rate rule; ``opt.epoch`` is the epoch just finished.

    ``validation_halving`` halves whenever the validation NLL fails to improve
    on the best so far (no-op without a validation score). ``text8_schedule``
    keeps the rate for ``fixed_epochs`` epochs and halves after every later one.
    """
    if schedule == "validation_halving":
        if valid_nll is None:
            return opt
        if not math.isfinite(valid_nll):
            raise ContractError(f"validation NLL must be finite, got {valid_nll}")
        if valid_nll >= opt.best_valid_nll:
            opt.lr /= 2
            opt.halvings.append(opt.epoch)
        opt.best_valid_nll = min(opt.best_valid_nll, valid_nll)
    elif schedule == "text8_schedule":
        if valid_nll is not None:
            opt.best_valid_nll = min(opt.best_valid_nll, valid_nll)
        if opt.epoch > fixed_epochs:
            opt.lr /= 2
            opt.halvings.append(opt.epoch)
    else:
        raise ContractError(f"unknown schedule {schedule!r}")
    if opt.halvings and opt.halvings[-1] == opt.epoch:
        log.info("epoch %d: learning rate halved to %g", opt.epoch, opt.lr)
    return opt


# --- evaluation helper shared with hornn.evaluation ------------------------


def corpus_nll(cfg: HornnConfig, params: Parameters, ids: np.ndarray, window: int = 30) -> tuple[float, int]:
    """Single-lane stateful pass; returns ``(mean NLL, scored tokens)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("need at least two tokens to score a corpus")
    state = StateBuffer.zeros(cfg, 1)
    ref, deviation, scored = None, 0.0, 0
    for start in range(0, ids.size - 1, window):
        stop = min(start + window, ids.size - 1)
        _, nll = forward_window(
            cfg, params, state, ids[start:stop], ids[start + 1 : stop + 1], keep_traces=False
        )
        if ref is None:
            ref = nll
        deviation += (nll - ref) * (stop - start)
        scored += stop - start
    return ref + deviation / scored, scored


# --- the epoch loop -------------------------------------------------------


@dataclass
class Checkpoint:
    config: HornnConfig
    params: Parameters
    opt: OptState
    settings: TrainSettings
    rng_state: dict
    corpus_hash: str = ""
    vocab: dict | None = None


def train(
    cfg: HornnConfig,
    train_ids: np.ndarray,
    valid_ids: np.ndarray | None = None,
    settings: TrainSettings | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    vocab: dict | None = None,
    on_metrics: Callable[[dict], None] | None = None,
    timing: bool = True,
    on_batch: Callable | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train for ``settings.epochs`` epochs (counting epochs already in ``resume``).

    Hidden state is carried from window to window inside a lane and reset at
    the start of each epoch. With ``out_dir`` the metrics are appended to
    ``metrics.jsonl`` and a checkpoint is written after every epoch as
    ``epoch-XXX.horn`` plus ``last.horn``. ``on_batch(cfg, params, traces,
    targets)`` is called after each forward pass, before the update.
    """
    from hornn.checkpoint import save_checkpoint

    settings = settings or TrainSettings()
    train_ids = np.asarray(train_ids, dtype=np.int64)
    stream = make_stream(train_ids, settings.lanes, settings.window)
    corpus_hash = fingerprint(train_ids)

    if resume is not None:
        if resume.config != cfg:
            raise ContractError("resume checkpoint was trained with a different model config")
        if resume.corpus_hash and resume.corpus_hash != corpus_hash:
            raise ContractError("resume checkpoint was trained on a different corpus")
        params = resume.params
        opt = resume.opt
        rng = Rng.from_state(resume.rng_state)
        vocab = vocab or resume.vocab
        # the remaining schedule comes from the new settings, optimiser state from the checkpoint
    else:
        params = init_params(cfg)
        opt = OptState.fresh(params, settings)
        rng = Rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []

    def emit(record: dict) -> None:
        metrics.append(record)
        if on_metrics is not None:
            on_metrics(record)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def snapshot() -> Checkpoint:
        return Checkpoint(cfg, params, opt, settings, rng.state(), corpus_hash, vocab)

    for epoch in range(opt.epoch + 1, settings.epochs + 1):
        state = StateBuffer.zeros(cfg, settings.lanes)
        epoch_nll, n_batches = 0.0, 0
        for batch, (inputs, targets) in enumerate(stream):
            t0 = time.perf_counter()
            traces, nll = forward_window(cfg, params, state, inputs, targets)
            if not math.isfinite(nll):
                msg = (
                    f"non-finite training loss at epoch {epoch} batch {batch}; "
                    f"max |param| = {params.max_abs():.6g}"
                )
                if out is not None:
                    save_checkpoint(snapshot(), out / "aborted.horn")
                raise TrainingDivergedError(msg)
            if on_batch is not None:
                on_batch(cfg, params, traces, targets)
            grads = backward_window(cfg, params, traces, targets)
            grad_maxabs = grads.max_abs()
            grads = clip_gradients(grads, settings.clip, settings.clip_mode)
            sgd_update(params, grads, opt)
            epoch_nll += nll
            n_batches += 1
            emit(
                {
                    "epoch": epoch,
                    "batch": batch,
                    "train_nll": nll,
                    "lr": opt.lr,
                    "grad_maxabs": grad_maxabs,
                    "wall_ms": round((time.perf_counter() - t0) * 1000, 3) if timing else 0.0,
                }
            )

        valid_nll = None
        if valid_ids is not None:
            valid_nll, _ = corpus_nll(cfg, params, valid_ids, settings.eval_window)
        opt.epoch = epoch
        end_of_epoch_schedule(opt, valid_nll, settings.schedule, settings.fixed_epochs)
        emit(
            {
                "epoch": epoch,
                "train_nll": epoch_nll / max(n_batches, 1),
                "valid_nll": valid_nll,
                "valid_ppl": None if valid_nll is None else math.exp(valid_nll),
                "lr_next": opt.lr,
            }
        )
        if out is not None:
            save_checkpoint(snapshot(), out / f"epoch-{epoch:03d}.horn")
            save_checkpoint(snapshot(), out / "last.horn")

    final = snapshot()
    if out is not None and not (out / "last.horn").exists():
        save_checkpoint(final, out / "last.horn")
    return final, metrics


def resume_settings(ckpt: Checkpoint, epochs: int) -> TrainSettings:
    """The checkpoint's settings with a new total epoch count."""
    return replace(ckpt.settings, epochs=epochs)
