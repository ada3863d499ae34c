"""Dense float64 tensor helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. Randomness
always flows through an explicit :class:`numpy.random.Generator` backed by the
counter-based Philox bit generator, so sample streams are replayable and do not
depend on the platform.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a fresh generator for ``seed``; equal seeds give equal streams."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must be non-empty")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be positive")
    return shape


def kaiming_uniform_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Sample i.i.d. U[-b, b] with ``b = sqrt(6 / fan_in)``."""
    shape = _check_shape(shape)
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def reshape_hierarchical(x: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """View ``x`` with shape ``dims`` using the row-major digit map.

    Index ``(i1, ..., in)`` lands on flat offset ``((i1 * I2 + i2) * I3 + ...)``.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = _check_shape(dims)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"cannot reshape {x.size} elements into {dims}")
    return np.ascontiguousarray(x).reshape(dims)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    raise ValueError(f"unknown elementwise op {op!r}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x
