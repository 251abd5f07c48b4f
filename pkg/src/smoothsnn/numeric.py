"""Dense-tensor arithmetic and deterministic RNG shared by every module.

Tensors are plain C-contiguous ``numpy.ndarray`` values in the engine-wide
float mode: float32 for training, float64 for gradient checking.  All
operations here are pure; given the same inputs in a fixed float mode they
return bitwise-identical outputs.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, ParameterError

_FLOAT_MODES = {"float32": np.float32, "float64": np.float64}
_active_mode = "float32"


def set_float_mode(mode: str) -> None:
    """Switch the engine-wide float mode ("float32" or "float64")."""
    global _active_mode
    if mode not in _FLOAT_MODES:
        raise ParameterError(f"unknown float mode {mode!r}, expected one of {sorted(_FLOAT_MODES)}")
    _active_mode = mode


def float_mode() -> str:
    return _active_mode


def float_dtype() -> type:
    return _FLOAT_MODES[_active_mode]


@contextmanager
def precision(mode: str):
    """Temporarily run the engine in the given float mode."""
    previous = _active_mode
    set_float_mode(mode)
    try:
        yield
    finally:
        set_float_mode(previous)


def tensor(data, shape=None) -> np.ndarray:
    """Build a C-contiguous array in the active float mode."""
    arr = np.ascontiguousarray(data, dtype=float_dtype())
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=float_dtype())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed reduction order.

    Deterministic for fixed inputs within one process; callers must not vary
    BLAS threading between runs that are expected to match bitwise.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``x / temperature`` with max-subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=float_dtype()) / float_dtype()(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _label_entropy(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngState:
    """Counter-based (Philox) random stream with named, independent children.

    The same seed and the same call sequence always reproduce the same draws
    bitwise.  ``child(label)`` derives a stream that is independent of the
    parent and of children with other labels, so consumers (weight init,
    shuffling, loss dropping, ...) cannot perturb each other's sequences.
    """

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def child(self, label: str) -> "RngState":
        return RngState(self.seed, self._spawn_key + (_label_entropy(label),))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Draws in [low, high); advances the stream."""
        u = self._gen.random(tuple(shape) if not np.isscalar(shape) else (shape,))
        out = low + (high - low) * u
        return out.astype(float_dtype())

    def uniform64(self, shape) -> np.ndarray:
        """Raw float64 draws in [0, 1), independent of the float mode."""
        return self._gen.random(tuple(shape) if not np.isscalar(shape) else (shape,))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_uniform(state: RngState, shape) -> np.ndarray:
    """Uniform [0, 1) tensor; advances ``state`` deterministically."""
    return state.uniform(shape)
