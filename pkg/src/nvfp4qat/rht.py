"""Random Hadamard transform used to smooth outliers before FP4 quantization.

``T = H_h @ diag(signs) / sqrt(h)`` is orthogonal, so rotating both operands
of a GEMM along their shared axis leaves the exact product unchanged while
spreading any single large value over ``h`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RhtTransform", "apply_rht", "build_hadamard", "rht_pair_apply", "DEFAULT_RHT_SIZE"]

DEFAULT_RHT_SIZE = 16


def build_hadamard(h: int) -> np.ndarray:
    """Sylvester Hadamard matrix of order ``h`` with integer +-1 entries."""
    if h < 1 or h > 1024 or h & (h - 1):
        raise ValueError("RHT size must be power of two")
    H = np.ones((1, 1), dtype=np.int64)
    while H.shape[0] < h:
        H = np.block([[H, H], [H, -H]])
    return H


@dataclass(frozen=True)
class RhtTransform:
    size: int
    signs: np.ndarray

    @classmethod
    def random(cls, size: int = DEFAULT_RHT_SIZE, rng=None) -> "RhtTransform":
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        build_hadamard(size)  # validates size
        if size == 1:
            return cls(1, np.ones(1))
        signs = rng.integers(0, 2, size=size) * 2 - 1
        return cls(size, signs.astype(np.float64))

    @classmethod
    def identity_signs(cls, size: int = DEFAULT_RHT_SIZE) -> "RhtTransform":
        return cls(size, np.ones(size))

    @property
    def matrix(self) -> np.ndarray:
        return build_hadamard(self.size) * self.signs[None, :] / np.sqrt(self.size)


def apply_rht(x, t: RhtTransform, axis: int = -1) -> np.ndarray:
    """Contract ``x`` with ``T`` blockwise along ``axis``: ``out_j = sum_i x_i T_ij``."""
    x = np.asarray(x)
    n = x.shape[axis]
    if n % t.size:
        raise ValueError(f"axis {axis} of shape {x.shape} is not divisible by RHT size {t.size}")
    if t.size == 1:
        return x
    moved = np.moveaxis(x, axis, -1)
    blocks = moved.reshape(-1, t.size)
    out = blocks @ t.matrix.astype(blocks.dtype if blocks.dtype.kind == "f" else np.float64)
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


def rht_pair_apply(a, b, seed=None, axis_a: int = -1, axis_b: int = 0,
                   size: int = DEFAULT_RHT_SIZE, transform: RhtTransform | None = None):
    """Rotate both GEMM operands along their contracted axes with one shared transform.

    ``a @ b == rht(a) @ rht(b)`` up to rounding, because ``T @ T.T == I``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[axis_a] != b.shape[axis_b]:
        raise ValueError(f"contracted dims differ: {a.shape[axis_a]} vs {b.shape[axis_b]}")
    t = transform if transform is not None else RhtTransform.random(size, seed)
    return apply_rht(a, t, axis_a), apply_rht(b, t, axis_b)
