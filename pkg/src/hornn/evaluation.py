"""Perplexity, the finite-difference gradient oracle and experiment harnesses."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from hornn.model import (
    HornnConfig,
    Parameters,
    StateBuffer,
    StepTrace,
    forward_window,
    init_params,
    step,
)
from hornn.numerics import ContractError, Rng, activation_grad
from hornn.training import TrainSettings, backward_window, train

# --- perplexity -------------------------------------------------------------


@dataclass
class EvalReport:
    corpus: str
    tokens: int
    mean_nll: float
    perplexity: float
    histogram: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _target_probs(cfg: HornnConfig, params: Parameters, ids: np.ndarray, window: int) -> np.ndarray:
    state = StateBuffer.zeros(cfg, 1)
    out = np.empty(ids.size - 1)
    for start in range(0, ids.size - 1, window):
        stop = min(start + window, ids.size - 1)
        targets = ids[start + 1 : stop + 1]
        traces, _ = forward_window(cfg, params, state, ids[start:stop], targets)
        out[start:stop] = [tr.y[0, k] for tr, k in zip(traces, targets)]
    return out


def token_nlls(cfg: HornnConfig, params: Parameters, ids, window: int = 30) -> np.ndarray:
    """Per-target NLL of a single-lane stateful pass; entry ``i`` scores ``ids[i + 1]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("need at least two tokens to score a corpus")
    return -np.log(_target_probs(cfg, params, ids, window))


def perplexity(
    cfg: HornnConfig,
    params: Parameters,
    ids,
    window: int = 30,
    name: str = "corpus",
    histogram_bins: int | None = None,
) -> EvalReport:
    """Score every token after the first exactly once, carrying state throughout.

    Log-probabilities are accumulated in extended precision; ``mean_nll`` and
    ``perplexity`` are each rounded once from that sum, so they agree to the
    last unit of the model's float width and a uniform model scores exactly V.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError(f"corpus {name!r} has {ids.size} tokens; need at least 2")
    probs = _target_probs(cfg, params, ids, window)
    nll = -np.log(probs.astype(np.longdouble))
    mean = np.sum(nll) / nll.size
    width = cfg.dtype.type
    hist = None
    if histogram_bins:
        counts, edges = np.histogram(nll.astype(np.float64), bins=histogram_bins)
        hist = {"counts": counts.tolist(), "edges": edges.tolist()}
    return EvalReport(name, int(nll.size), float(width(mean)), float(width(np.exp(mean))), hist)


# --- gradient oracle --------------------------------------------------------


@dataclass
class MatrixCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    excluded: int = 0


@dataclass
class GradCheckReport:
    pooling: str
    order: int
    activation: str
    seed: int
    tolerance: float
    matrices: list[MatrixCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((m.max_rel_error for m in self.matrices), default=0.0)

    @property
    def worst(self) -> MatrixCheck | None:
        return max(self.matrices, key=lambda m: m.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed=self.passed, max_rel_error=self.max_rel_error)
        w = self.worst
        d["worst_matrix"] = None if w is None else w.name
        return d


@dataclass(frozen=True)
class GradCheckInstance:
    cfg: HornnConfig
    params: Parameters
    history: list
    inputs: np.ndarray
    targets: np.ndarray


def make_instance(
    cfg: HornnConfig, seed: int, lanes: int = 2, window: int = 5, init_std: float = 0.5
) -> GradCheckInstance:
    """A random tiny problem with non-zero carried-in states."""
    if cfg.precision != 64:
        raise ContractError("gradient checks need 64-bit precision")
    cfg = replace(cfg, seed=seed, init_std=init_std)
    params = init_params(cfg)
    rng = Rng(seed).child("gradcheck")
    if params.b_h is not None:
        params.b_h[...] = rng.normal(cfg.hidden) * init_std
        params.b_out[...] = rng.normal(cfg.vocab) * init_std
    low = -1.0 if cfg.activation == "tanh" else 0.0
    history = [
        low + (1.0 - low) * rng.uniform(lanes * cfg.hidden).reshape(lanes, cfg.hidden)
        for _ in range(cfg.order)
    ]
    inputs = rng.integers(cfg.vocab, lanes * window).reshape(lanes, window)
    targets = rng.integers(cfg.vocab, lanes * window).reshape(lanes, window)
    return GradCheckInstance(cfg, params, history, inputs, targets)


def _kink_pattern(inst: GradCheckInstance) -> bytes:
    """Which side of every relu kink and max-pool tie the window sits on."""
    traces, _ = forward_window(
        inst.cfg, inst.params, StateBuffer([h.copy() for h in inst.history]), inst.inputs, inst.targets
    )
    parts = []
    for tr in traces:
        if inst.cfg.activation == "relu":
            parts.append(np.packbits(tr.z > 0).tobytes())
        if tr.selector is not None:
            parts.append(tr.selector.astype(np.int8).tobytes())
    return b"".join(parts)


def numeric_gradient(inst: GradCheckInstance, step: float = 1e-5, skip_kinks: bool = True):
    """Central differences of the window NLL for every parameter element.

    Returns ``(gradients, excluded_mask)``. Coordinates whose perturbation
    flips a relu side or a max-pool selection are excluded (left as NaN)
    when ``skip_kinks`` is set, since the loss is not differentiable there.
    """
    cfg = inst.cfg
    kinky = skip_kinks and (cfg.activation == "relu" or cfg.pooling == "max")
    base = _kink_pattern(inst) if kinky else None

    def loss() -> float:
        state = StateBuffer([h.copy() for h in inst.history])
        return forward_window(cfg, inst.params, state, inst.inputs, inst.targets, keep_traces=False)[1]

    numeric = inst.params.zeros_like().map(lambda a: a.astype(np.float64))
    excluded = inst.params.map(lambda a: np.zeros(a.shape, dtype=bool))
    for (_, a), (_, g), (_, ex) in zip(inst.params.named(), numeric.named(), excluded.named()):
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            plus = loss()
            flip = kinky and _kink_pattern(inst) != base
            a[idx] = orig - step
            minus = loss()
            flip = flip or (kinky and _kink_pattern(inst) != base)
            a[idx] = orig
            if flip:
                ex[idx] = True
                g[idx] = np.nan
            else:
                g[idx] = (plus - minus) / (2 * step)
    return numeric, excluded


def relative_error(analytic, numeric, floor: float = 1e-4):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from
    turning finite-difference round-off into large ratios."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(
    cfg: HornnConfig,
    seed: int,
    tolerance: float = 1e-5,
    step: float = 1e-5,
    floor: float = 1e-4,
    lanes: int = 2,
    window: int = 5,
    init_std: float = 0.5,
    backward: Callable = backward_window,
) -> GradCheckReport:
    """Compare ``backward`` against central finite differences on a random tiny instance."""
    inst = make_instance(cfg, seed, lanes, window, init_std)
    traces, _ = forward_window(
        inst.cfg, inst.params, StateBuffer([h.copy() for h in inst.history]), inst.inputs, inst.targets
    )
    analytic = backward(inst.cfg, inst.params, traces, inst.targets)
    numeric, excluded = numeric_gradient(inst, step)
    report = GradCheckReport(cfg.pooling, cfg.order, cfg.activation, seed, tolerance)
    for (name, a), (_, n), (_, ex) in zip(analytic.named(), numeric.named(), excluded.named()):
        err = np.where(ex, 0.0, relative_error(a, np.nan_to_num(n), floor))
        idx = np.unravel_index(int(np.argmax(err)), err.shape)
        report.matrices.append(
            MatrixCheck(name, float(err[idx]), tuple(int(i) for i in idx), float(a[idx]), float(n[idx]), int(ex.sum()))
        )
    return report


# --- sweeps -----------------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    values: list
    perplexities: list[float]
    fingerprint: str
    label: str = ""

    def __post_init__(self):
        if len(self.values) != len(self.perplexities):
            raise ContractError("one perplexity per sweep value")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ContractError(f"sweep values must be strictly increasing: {self.values}")

    @property
    def rows(self) -> list[tuple]:
        return list(zip(self.values, self.perplexities))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        lines = [f"{self.axis},perplexity"]
        lines += [f"{v},{p!r}" for v, p in self.rows]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned text: one model row, one column per sweep value."""
        heads = [_column_name(self.axis, v) for v in self.values]
        label = self.label or "Model"
        first = max(len("Models"), len(label))
        widths = [max(len(h), 9) for h in heads]
        top = "Models".ljust(first) + "".join("  " + h.rjust(w) for h, w in zip(heads, widths))
        row = label.ljust(first) + "".join(
            "  " + f"{p:.2f}".rjust(w) for p, w in zip(self.perplexities, widths)
        )
        rule = "-" * len(top)
        return "\n".join([rule, top, rule, row, rule]) + "\n"


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def _column_name(axis: str, value) -> str:
    if axis == "order":
        return f"{_ordinal(int(value))} order"
    return f"alpha={value:g}"


def model_label(cfg: HornnConfig) -> str:
    prefix = {"plain": "", "max": "Max ", "fofe": "FOFE ", "gated": "Gated "}[cfg.pooling]
    return f"{prefix}HORNN"


def sweep_fingerprint(cfg: HornnConfig, settings: TrainSettings, axis: str) -> str:
    blob = json.dumps({"cfg": cfg.to_dict(), "settings": settings.to_dict(), "axis": axis}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _train_and_score(args) -> float:
    cfg, train_ids, valid_ids, test_ids, settings = args
    ckpt, _ = train(cfg, train_ids, valid_ids, settings, timing=False)
    return perplexity(cfg, ckpt.params, test_ids, settings.eval_window).perplexity


def _run_points(cfgs, train_ids, valid_ids, test_ids, settings, jobs) -> list[float]:
    work = [(c, train_ids, valid_ids, test_ids, settings) for c in cfgs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_and_score, work))
    return [_train_and_score(w) for w in work]


def order_sweep(
    base: HornnConfig,
    orders: Sequence[int],
    train_ids,
    test_ids,
    settings: TrainSettings | None = None,
    valid_ids=None,
    jobs: int = 1,
) -> SweepResult:
    """Train one model per order with a shared seed and recipe; test PPL per order."""
    settings = settings or TrainSettings()
    orders = sorted(int(o) for o in orders)
    if not orders:
        raise ContractError("order sweep needs at least one order")
    cfgs = [replace(base, order=o) for o in orders]
    ppl = _run_points(cfgs, train_ids, valid_ids, test_ids, settings, jobs)
    return SweepResult("order", orders, ppl, sweep_fingerprint(base, settings, "order"), model_label(base))


def alpha_sweep(
    base: HornnConfig,
    alphas: Sequence[float],
    train_ids,
    test_ids,
    settings: TrainSettings | None = None,
    valid_ids=None,
    jobs: int = 1,
) -> SweepResult:
    """One FOFE run per forgetting factor."""
    if base.pooling != "fofe":
        raise ContractError(f"alpha sweep needs fofe pooling, got {base.pooling!r}")
    alphas = sorted(float(a) for a in alphas)
    if not alphas:
        raise ContractError("alpha sweep needs at least one value")
    bad = [a for a in alphas if not 0 < a < 1]
    if bad:
        raise ContractError(f"forgetting factors must lie in (0, 1): {bad}")
    settings = settings or TrainSettings()
    cfgs = [replace(base, alpha=a) for a in alphas]
    ppl = _run_points(cfgs, train_ids, valid_ids, test_ids, settings, jobs)
    return SweepResult("alpha", alphas, ppl, sweep_fingerprint(base, settings, "alpha"), model_label(base))


# --- long-dependency diagnostic ---------------------------------------------


def copy_task(length: int, lag: int, alphabet: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Blocks of ``lag`` random tokens followed by their copies.

    Noise tokens are drawn from ``[0, alphabet)``; the copy of token ``a`` is
    written as ``a + alphabet`` so each position's role is visible in the
    token itself. Returns ``(ids, determined)`` where ``determined[i]`` marks
    the positions fixed by the token ``lag`` steps earlier.
    """
    if lag < 1:
        raise ContractError(f"lag must be >= 1, got {lag}")
    blocks = max(1, length // (2 * lag))
    noise = Rng(seed).child("copy-task").integers(alphabet, blocks * lag).reshape(blocks, lag)
    ids = np.concatenate([noise, noise + alphabet], axis=1).ravel()
    determined = np.tile(np.r_[np.zeros(lag, bool), np.ones(lag, bool)], blocks)
    return ids, determined


@dataclass
class ProbeRow:
    variant: str
    order: int
    seed: int
    determined_nll: float
    lag_grad: list[float]


def state_jvp(cfg: HornnConfig, params: Parameters, history, x_id, lag: int, direction) -> np.ndarray:
    """Directional derivative of ``h[t]`` with respect to ``h[t-lag]`` alone.

    Only the direct feedback path counts; other delayed states are held
    fixed. Zero whenever ``lag`` exceeds the order.
    """
    state = StateBuffer([np.atleast_2d(h).copy() for h in history])
    x = np.atleast_1d(np.asarray(x_id))
    trace = StepTrace(x=x, history=[], products=None)
    step(cfg, params, state, x, trace)
    if lag > cfg.order:
        return np.zeros_like(trace.h)
    v = np.atleast_2d(direction)
    w = params.w_h[lag - 1]
    dp = v @ w.T
    if cfg.pooling == "fofe":
        d_pool = dp * cfg.alpha**lag
    elif cfg.pooling == "max":
        d_pool = dp * (trace.selector == lag - 1)
    elif cfg.pooling == "gated":
        r = trace.gates[lag - 1]
        d_pool = r * dp + trace.products[lag - 1] * r * (1 - r) * (v @ params.gate_w2[lag - 1].T)
    else:
        d_pool = dp
    return activation_grad(cfg.activation, trace.z, trace.h) * d_pool


def long_dependency_probe(
    variants: Sequence[HornnConfig],
    lag: int = 3,
    seeds: Sequence[int] = (0,),
    settings: TrainSettings | None = None,
    train_length: int = 6000,
    test_length: int = 1200,
    alphabet: int = 4,
) -> list[ProbeRow]:
    """Train each variant on the copy task and report NLL on the determined positions.

    During training the gradient of the last step's loss with respect to
    ``h[t-k]`` is measured for ``k = 1..lag`` and averaged over batches and
    lanes.
    """
    settings = settings or TrainSettings(lanes=8, window=30, epochs=12, column_norm_cap=None)
    rows = []
    for seed in seeds:
        train_ids, _ = copy_task(train_length, lag, alphabet, seed=10_000 + seed)
        test_ids, determined = copy_task(test_length, lag, alphabet, seed=20_000 + seed)
        for base in variants:
            cfg = replace(base, vocab=2 * alphabet, seed=seed + 1)
            sums = np.zeros(lag)
            count = 0

            def instrument(cfg_, params, traces, targets):
                nonlocal sums, count
                T = len(traces)
                if T <= lag:
                    return
                weights = np.zeros(T)
                weights[-1] = 1.0
                _, d_h = backward_window(cfg_, params, traces, targets, weights=weights, return_state_grads=True)
                norms = np.linalg.norm(d_h[T - 1 - np.arange(1, lag + 1)], axis=-1).mean(axis=-1)
                sums += norms
                count += 1

            ckpt, _ = train(cfg, train_ids, None, settings, timing=False, on_batch=instrument)
            nll = token_nlls(cfg, ckpt.params, test_ids, settings.eval_window)
            rows.append(
                ProbeRow(
                    variant=f"{model_label(cfg)} order {cfg.order}",
                    order=cfg.order,
                    seed=seed,
                    determined_nll=float(np.mean(nll[determined[1:]])),
                    lag_grad=(sums / max(count, 1)).tolist(),
                )
            )
    return rows


def probe_table(rows: Sequence[ProbeRow]) -> str:
    lag = len(rows[0].lag_grad) if rows else 0
    head = f"{'variant':<22} {'seed':>4} {'det. NLL':>9}" + "".join(f" {'|g| k=' + str(k):>10}" for k in range(1, lag + 1))
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.variant:<22} {r.seed:>4} {r.determined_nll:>9.4f}" + "".join(f" {g:>10.3e}" for g in r.lag_grad)
        )
    return "\n".join(lines) + "\n"
