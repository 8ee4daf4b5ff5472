"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects in channels-first layout
``(N, C, D, H, W)``. This module only adds the few primitives the rest of the
package relies on, with strict shape checks (no broadcasting except scalars)
and a seeded random source.

Random numbers come from numpy's ``Philox`` counter-based bit generator keyed
by a 64-bit seed. Normal samples use numpy's ziggurat transform on top of it,
so a given ``(seed, shape, dtype)`` always yields the same buffer.
"""
from __future__ import annotations

import numbers

import numpy as np

FLOAT64 = np.float64
FLOAT32 = np.float32


def rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def child_seed(seed: int, *path: int) -> int:
    """Derive an independent seed from ``seed`` and an integer path."""
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def zeros(shape, dtype=FLOAT64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    return np.zeros(shape, dtype=dtype)


def randn(shape, seed: int, stddev: float = 1.0, dtype=FLOAT64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    out = rng(seed).standard_normal(shape, dtype=np.float64)
    if stddev != 1.0:
        out *= stddev
    return out.astype(dtype, copy=False)


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def ew_add(a, b) -> np.ndarray:
    a = np.asarray(a)
    if isinstance(b, numbers.Number):
        return a + b
    b = np.asarray(b)
    _check_same(a, b, "ew_add")
    return a + b


def ew_mul(a, b) -> np.ndarray:
    a = np.asarray(a)
    if isinstance(b, numbers.Number):
        return a * b
    b = np.asarray(b)
    _check_same(a, b, "ew_mul")
    return a * b


def scale(a, factor: float) -> np.ndarray:
    return np.asarray(a) * factor


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    return a @ b
