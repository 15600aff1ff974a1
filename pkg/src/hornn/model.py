"""Higher order recurrent cells and their forward pass.

A cell of order N feeds back the N most recent hidden states, each through
its own matrix ``W_hn``, and combines the N products with a pooling rule:

    plain   sum_n  W_hn h[t-n]
    max     elementwise max_n  W_hn h[t-n]
    fofe    sum_n  alpha**n * W_hn h[t-n]
    gated   sum_n  r_n * W_hn h[t-n],   r_n = sigmoid(W1n x[t] + W2n h[t-n])

    h[t] = f(W_in x[t] + pooled),   y[t] = softmax(W_out h[t])

Order 1 with plain pooling is the ordinary Elman RNN. All arrays are
batch-first: hidden states are ``(lanes, hidden)`` and token ids ``(lanes,)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from hornn.numerics import (
    ACTIVATIONS,
    ContractError,
    Rng,
    activation,
    dtype_for,
    gaussian_init,
    sigmoid,
    softmax,
)

POOLINGS: tuple[str, ...] = ("plain", "max", "fofe", "gated")


@dataclass(frozen=True)
class HornnConfig:
    vocab: int
    order: int = 3
    hidden: int = 400
    pooling: str = "fofe"
    alpha: float = 0.6
    activation: str = "sigmoid"
    seed: int = 1
    init_std: float = 0.1
    bias: bool = False
    precision: int = 32

    def __post_init__(self):
        if self.order < 1:
            raise ContractError(f"order must be >= 1, got {self.order}")
        if self.hidden < 1:
            raise ContractError(f"hidden must be >= 1, got {self.hidden}")
        if self.vocab < 2:
            raise ContractError(f"vocab must be >= 2, got {self.vocab}")
        if self.pooling not in POOLINGS:
            raise ContractError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if self.pooling == "fofe" and not 0 < self.alpha < 1:
            raise ContractError(f"fofe alpha must lie in (0, 1), got {self.alpha}")
        if self.init_std <= 0:
            raise ContractError(f"init_std must be positive, got {self.init_std}")
        dtype_for(self.precision)

    @property
    def dtype(self) -> np.dtype:
        return dtype_for(self.precision)

    def fofe_coefficients(self) -> np.ndarray:
        """``alpha**n`` for n = 1..order."""
        return self.alpha ** np.arange(1, self.order + 1, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HornnConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Parameters:
    """Every trainable array. Gate lists are empty unless pooling is gated."""

    w_in: np.ndarray
    w_h: list[np.ndarray]
    w_out: np.ndarray
    gate_w1: list[np.ndarray] = field(default_factory=list)
    gate_w2: list[np.ndarray] = field(default_factory=list)
    b_h: np.ndarray | None = None
    b_out: np.ndarray | None = None

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` in the canonical serialisation order."""
        yield "w_in", self.w_in
        for n, w in enumerate(self.w_h, 1):
            yield f"w_h{n}", w
        yield "w_out", self.w_out
        for n, w in enumerate(self.gate_w1, 1):
            yield f"gate_w1_{n}", w
        for n, w in enumerate(self.gate_w2, 1):
            yield f"gate_w2_{n}", w
        if self.b_h is not None:
            yield "b_h", self.b_h
        if self.b_out is not None:
            yield "b_out", self.b_out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named()]

    def zeros_like(self) -> "Parameters":
        return self.map(np.zeros_like)

    def copy(self) -> "Parameters":
        return self.map(np.copy)

    def map(self, fn) -> "Parameters":
        return Parameters(
            w_in=fn(self.w_in),
            w_h=[fn(w) for w in self.w_h],
            w_out=fn(self.w_out),
            gate_w1=[fn(w) for w in self.gate_w1],
            gate_w2=[fn(w) for w in self.gate_w2],
            b_h=None if self.b_h is None else fn(self.b_h),
            b_out=None if self.b_out is None else fn(self.b_out),
        )

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], order: int, gated: bool) -> "Parameters":
        return cls(
            w_in=named["w_in"],
            w_h=[named[f"w_h{n}"] for n in range(1, order + 1)],
            w_out=named["w_out"],
            gate_w1=[named[f"gate_w1_{n}"] for n in range(1, order + 1)] if gated else [],
            gate_w2=[named[f"gate_w2_{n}"] for n in range(1, order + 1)] if gated else [],
            b_h=named.get("b_h"),
            b_out=named.get("b_out"),
        )

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self.arrays())


def param_shapes(cfg: HornnConfig) -> dict[str, tuple[int, ...]]:
    d, V, N = cfg.hidden, cfg.vocab, cfg.order
    shapes: dict[str, tuple[int, ...]] = {"w_in": (d, V)}
    shapes.update({f"w_h{n}": (d, d) for n in range(1, N + 1)})
    shapes["w_out"] = (V, d)
    if cfg.pooling == "gated":
        shapes.update({f"gate_w1_{n}": (d, V) for n in range(1, N + 1)})
        shapes.update({f"gate_w2_{n}": (d, d) for n in range(1, N + 1)})
    if cfg.bias:
        shapes["b_h"] = (d,)
        shapes["b_out"] = (V,)
    return shapes


def init_params(cfg: HornnConfig) -> Parameters:
    """Gaussian weights, one independent seed-derived stream per matrix.

    Biases, when enabled, start at zero.
    """
    root = Rng(cfg.seed)
    named = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b_"):
            named[name] = np.zeros(shape, dtype=cfg.dtype)
        else:
            named[name] = gaussian_init(root.child(name), *shape, cfg.init_std, cfg.dtype)
    return Parameters.from_named(named, cfg.order, cfg.pooling == "gated")


class StateBuffer:
    """The N most recent hidden states per lane, newest first.

    ``history[n-1]`` is ``h[t-n]``. States before the start of a sequence are
    zero.
    """

    def __init__(self, history: list[np.ndarray], time: int = 0):
        self.history = history
        self.time = time

    @classmethod
    def zeros(cls, cfg: HornnConfig, lanes: int = 1) -> "StateBuffer":
        return cls([np.zeros((lanes, cfg.hidden), dtype=cfg.dtype) for _ in range(cfg.order)])

    @property
    def order(self) -> int:
        return len(self.history)

    @property
    def lanes(self) -> int:
        return self.history[0].shape[0]

    def previous(self, n: int) -> np.ndarray:
        return self.history[n - 1]

    def push(self, h: np.ndarray) -> None:
        self.history = [h] + self.history[:-1]
        self.time += 1

    def copy(self) -> "StateBuffer":
        return StateBuffer([h.copy() for h in self.history], self.time)


@dataclass
class StepTrace:
    """Forward intermediates of one time step, enough for the exact backward pass."""

    x: np.ndarray
    history: list[np.ndarray]
    products: np.ndarray
    pooled: np.ndarray | None = None
    z: np.ndarray | None = None
    h: np.ndarray | None = None
    y: np.ndarray | None = None
    gates: np.ndarray | None = None
    gate_pre: np.ndarray | None = None
    selector: np.ndarray | None = None


def _lane_ids(cfg: HornnConfig, x_id) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x_id))
    if not np.issubdtype(x.dtype, np.integer):
        raise ContractError(f"token ids must be integers, got {x.dtype}")
    if x.size and (x.min() < 0 or x.max() >= cfg.vocab):
        raise ContractError(f"token id out of range [0, {cfg.vocab})")
    return x


def pool(
    pooling: str,
    products: np.ndarray,
    alpha: float = 0.6,
    gates: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Combine per-path products ``(N, ..., d)``; also return the argmax selector for max."""
    if pooling == "plain":
        return _ordered_sum(products), None
    if pooling == "fofe":
        coef = alpha ** np.arange(1, products.shape[0] + 1, dtype=np.float64)
        return _ordered_sum(products * coef.astype(products.dtype).reshape(-1, *[1] * (products.ndim - 1))), None
    if pooling == "max":
        selector = np.argmax(products, axis=0)
        return np.take_along_axis(products, selector[None], axis=0)[0], selector
    if pooling == "gated":
        return _ordered_sum(gates * products), None
    raise ContractError(f"unknown pooling {pooling!r}")


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    # fixed left-to-right order keeps results bitwise reproducible
    out = stack[0].copy()
    for term in stack[1:]:
        out += term
    return out


def feedback(
    cfg: HornnConfig,
    params: Parameters,
    state: StateBuffer,
    x_id,
    trace: StepTrace | None = None,
) -> np.ndarray:
    """Pooled recurrent term of the hidden pre-activation for the current step."""
    x = _lane_ids(cfg, x_id)
    history = state.history
    products = np.stack([h @ w.T for h, w in zip(history, params.w_h)])
    gates = gate_pre = None
    if cfg.pooling == "gated":
        gate_pre = np.stack(
            [w1[:, x].T + h @ w2.T for h, w1, w2 in zip(history, params.gate_w1, params.gate_w2)]
        )
        gates = sigmoid(gate_pre)
    pooled, selector = pool(cfg.pooling, products, cfg.alpha, gates)
    if trace is not None:
        trace.history = list(history)
        trace.products = products
        trace.pooled = pooled
        trace.gates = gates
        trace.gate_pre = gate_pre
        trace.selector = selector
    return pooled


def _hidden_update(cfg, params, state, x, input_proj, trace):
    pooled = feedback(cfg, params, state, x, trace)
    z = input_proj + pooled
    if params.b_h is not None:
        z = z + params.b_h
    h = activation(cfg.activation, z)
    if trace is not None:
        trace.z, trace.h = z, h
    state.push(h)
    return h


def _output(params: Parameters, h: np.ndarray) -> np.ndarray:
    logits = h @ params.w_out.T
    if params.b_out is not None:
        logits = logits + params.b_out
    return softmax(logits)


def step(
    cfg: HornnConfig,
    params: Parameters,
    state: StateBuffer,
    x_id,
    trace: StepTrace | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance every lane by one token; returns ``(h, y)`` and pushes ``h`` into ``state``.

    A scalar ``x_id`` is treated as a single lane.
    """
    x = _lane_ids(cfg, x_id)
    h = _hidden_update(cfg, params, state, x, params.w_in[:, x].T, trace)
    y = _output(params, h)
    if trace is not None:
        trace.x, trace.y = x, y
    return h, y


def forward_window(
    cfg: HornnConfig,
    params: Parameters,
    state: StateBuffer,
    inputs,
    targets,
    keep_traces: bool = True,
) -> tuple[list[StepTrace], float]:
    """Run a ``lanes x T`` window and return its traces and mean NLL.

    Input projections are gathered for the whole window up front, the
    recursion runs step by step, and all outputs are projected in one
    product at the end. ``state`` is advanced in place, so the next window
    continues where this one stopped. A 1-D ``inputs`` is a single lane.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.ndim == 1:
        inputs, targets = inputs[None], targets[None]
    if inputs.shape != targets.shape or inputs.shape[1] < 1:
        raise ContractError(f"inputs {inputs.shape} and targets {targets.shape} must match, T >= 1")
    if inputs.shape[0] != state.lanes:
        raise ContractError(f"window has {inputs.shape[0]} lanes, state has {state.lanes}")
    _lane_ids(cfg, inputs.ravel())
    _lane_ids(cfg, targets.ravel())
    B, T = inputs.shape

    projections = params.w_in[:, inputs.T].transpose(1, 2, 0)  # (T, B, d)
    traces: list[StepTrace] = []
    hs = np.empty((T, B, cfg.hidden), dtype=cfg.dtype)
    for t in range(T):
        trace = StepTrace(x=inputs[:, t], history=[], products=None) if keep_traces else None
        hs[t] = _hidden_update(cfg, params, state, inputs[:, t], projections[t], trace)
        if keep_traces:
            traces.append(trace)

    logits = hs.reshape(T * B, -1) @ params.w_out.T
    if params.b_out is not None:
        logits += params.b_out
    logits = logits.reshape(T, B, -1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    if keep_traces:
        ys = e / total
        for t, trace in enumerate(traces):
            trace.y = ys[t]
    # log-probabilities from the shifted logits so a tiny target probability stays finite
    picked = np.take_along_axis(shifted, targets.T[..., None], axis=2)[..., 0]
    log_p = picked.astype(np.float64) - np.log(total[..., 0].astype(np.float64))
    return traces, -_mean(log_p.ravel())


def _mean(values: np.ndarray) -> float:
    # averaging deviations from the first entry keeps a constant array's mean exact
    ref = values[0]
    return float(ref + np.mean(values - ref))
