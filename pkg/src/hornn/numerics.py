"""Dense kernels, activations and the portable random generator.

Matrices and vectors are plain numpy arrays. Batched inputs are accepted
everywhere a vector is: the trailing axis is the vector axis.

Random numbers come from SplitMix64 used in counter mode. The i-th raw
64-bit output of a stream with seed ``s`` is::

    x  = s + (i + 1) * 0x9E3779B97F4A7C15        (mod 2**64)
    x  = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
    x  = (x ^ (x >> 27)) * 0x94D049BB133111EB
    x  =  x ^ (x >> 31)

which is exactly the sequential SplitMix64 recurrence, written so that a
whole block can be produced with vectorised uint64 arithmetic. Uniforms
use the top 53 bits, ``u = ((x >> 11) + 0.5) * 2**-53`` (never 0 or 1),
and Gaussians use the Box-Muller transform on consecutive uniform pairs.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

Activation = Literal["sigmoid", "relu", "tanh"]
ACTIVATIONS: tuple[str, ...] = ("sigmoid", "relu", "tanh")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ContractError(ValueError):
    """A precondition of a kernel or model operation was violated."""


def dtype_for(precision: int) -> np.dtype:
    if precision == 32:
        return np.dtype(np.float32)
    if precision == 64:
        return np.dtype(np.float64)
    raise ContractError(f"precision must be 32 or 64, got {precision}")


# --- linear algebra -------------------------------------------------------


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Return ``m @ v`` for a vector or a batch of row vectors ``v``."""
    if m.ndim != 2 or v.ndim < 1 or m.shape[1] != v.shape[-1]:
        raise ContractError(
            f"matvec shape mismatch: matrix {m.shape} vs vector {v.shape}"
        )
    return v @ m.T


def matvec_onehot(m: np.ndarray, index) -> np.ndarray:
    """Column lookup: ``m @ e_index``. ``index`` may be an int or an id array.

    For an id array of shape ``(B,)`` the result has shape ``(B, rows)``.
    """
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"one-hot index must be integral, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[1]):
        raise ContractError(
            f"one-hot index out of range for matrix with {m.shape[1]} columns"
        )
    return m[:, idx].T


def one_hot(index: int, size: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros(size, dtype=dtype)
    out[index] = 1
    return out


# --- nonlinearities -------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1 + e)
    return out


def activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    raise ContractError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z: np.ndarray, f_of_z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of ``activation(kind, .)`` at ``z``."""
    if kind == "sigmoid":
        return f_of_z * (1 - f_of_z)
    if kind == "relu":
        return (z > 0).astype(f_of_z.dtype)
    if kind == "tanh":
        return 1 - f_of_z * f_of_z
    raise ContractError(f"unknown activation {kind!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --- random numbers -------------------------------------------------------


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def _mix_int(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """SplitMix64 stream; the whole state is ``(seed, counter)``."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def child(self, name: str) -> "Rng":
        """Independent stream keyed by ``name``; does not advance ``self``."""
        return Rng(_mix_int(self.seed ^ _fnv1a(name)))

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + steps * _GAMMA
        self.counter += n
        return _mix(x)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 samples in the open interval (0, 1)."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (multiply-shift, negligible bias)."""
        return np.floor(self.uniform(n) * high).astype(np.int64)


def gaussian_init(rng: Rng, rows: int, cols: int, std: float, dtype=np.float64) -> np.ndarray:
    if std <= 0:
        raise ContractError(f"std must be positive, got {std}")
    return (rng.normal(rows * cols) * std).reshape(rows, cols).astype(dtype)
