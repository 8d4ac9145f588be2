"""NVFP4 numerics: E2M1 element codes, E4M3 block scales, two-level quantizer.

A tensor is stored as 4-bit E2M1 codes, one E4M3 scale per 16-element block
(1x16 runs along the last axis, or 16x16 tiles of a matrix) and one FP32
per-tensor scale::

    x_hat = decode_e2m1(code) * decode_e4m3(block_scale) * tensor_scale

All quantizer arithmetic runs in float64; dequantized values are exact in
float32 because a code times a block scale has at most six significant bits
and the tensor scale is a power of two.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "E2M1_GRID",
    "E2M1_MAX",
    "E4M3_MAX",
    "E4M3_MIN_NORMAL",
    "BlockGeometry",
    "QuantizationError",
    "QuantizedTensor",
    "RoundingMode",
    "NEAREST",
    "decode_e2m1",
    "decode_e4m3",
    "dequantize",
    "encode_e2m1",
    "encode_e4m3",
    "encode_scale_e4m3",
    "fake_quantize",
    "quantization_stats",
    "quantize",
    "round_e2m1",
    "tensor_scale_for",
]

# magnitudes indexed by the 3 low bits of an E2M1 code (exp:2, mantissa:1)
E2M1_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
E2M1_MAX = 6.0
_E2M1_TABLE = np.concatenate([E2M1_GRID, -E2M1_GRID])

E4M3_MAX = 448.0
FP32_MIN_NORMAL = 2.0**-126
E4M3_MIN_NORMAL = 2.0**-6


def _build_e4m3_table() -> np.ndarray:
    table = np.empty(256)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0xF and man == 0x7:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * man / 8.0 * 2.0**-6
        else:
            table[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return table


_E4M3_TABLE = _build_e4m3_table()
# non-negative finite codes 0x00..0x7E are monotone in value
_E4M3_POS = _E4M3_TABLE[:0x7F].copy()

# Largest E4M3 value not above 1/6. Choosing the tensor scale so the global
# maximum normalizes to at most 6 * this keeps the top block's scale at or
# below 1/6, which is what makes quantize(dequantize(q)) reproduce q.
_TOP_BLOCK_SCALE = float(_E4M3_POS[np.searchsorted(_E4M3_POS, 1.0 / 6.0, side="right") - 1])
_TENSOR_HEADROOM = E2M1_MAX * _TOP_BLOCK_SCALE  # 0.9375


class QuantizationError(ValueError):
    """Raised for inputs the NVFP4 quantizer cannot represent."""


class BlockGeometry(enum.Enum):
    ROWS_1x16 = "1x16"
    SQUARE_16x16 = "16x16"

    @property
    def block_elements(self) -> int:
        return 16 if self is BlockGeometry.ROWS_1x16 else 256

    @classmethod
    def parse(cls, value) -> "BlockGeometry":
        if isinstance(value, cls):
            return value
        aliases = {"1x16": cls.ROWS_1x16, "rows1x16": cls.ROWS_1x16, "1d": cls.ROWS_1x16,
                   "16x16": cls.SQUARE_16x16, "square16x16": cls.SQUARE_16x16, "2d": cls.SQUARE_16x16}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown block geometry {value!r}; expected '1x16' or '16x16'") from None


@dataclass(frozen=True)
class RoundingMode:
    """Nearest-even, or stochastic rounding driven by an explicit generator.

    Stochastic draws come from ``rng.random`` (PCG64 for ``default_rng``), one
    uniform per padded element in C order, so replaying a generator seeded the
    same way reproduces the codes bit for bit.
    """

    stochastic: bool = False
    rng: np.random.Generator | None = field(default=None, compare=False)

    @classmethod
    def sr(cls, rng) -> "RoundingMode":
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        return cls(True, rng)

    @property
    def name(self) -> str:
        return "stochastic" if self.stochastic else "nearest"

    def uniforms(self, shape) -> np.ndarray:
        if self.rng is None:
            raise ValueError("stochastic rounding needs a seeded generator")
        return self.rng.random(shape)


NEAREST = RoundingMode()


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantizationError("non-finite value reached quantizer")


# --------------------------------------------------------------------------
# E2M1
# --------------------------------------------------------------------------


def decode_e2m1(codes) -> np.ndarray:
    return _E2M1_TABLE[np.asarray(codes, dtype=np.intp) & 0xF]


def _nearest_even_index(a: float) -> int:
    d = np.abs(E2M1_GRID - a)
    best = np.flatnonzero(d == d.min())
    return int(best[0] if best[0] % 2 == 0 else best[-1])


# Every grid point and every midpoint is a multiple of 0.25, so the code is
# a function of floor(4a) alone, except exactly on a quarter where ties apply.
_QUARTERS = np.arange(25) / 4.0
_IDX_ABOVE = np.array([_nearest_even_index(q + 0.125) for q in _QUARTERS[:-1]] + [7], dtype=np.uint8)
_IDX_ON = np.array([_nearest_even_index(q) for q in _QUARTERS], dtype=np.uint8)
_IDX_FLOOR = np.array([np.flatnonzero(E2M1_GRID <= q)[-1] for q in _QUARTERS], dtype=np.uint8)


# Grid gaps are powers of two, so multiplying by the reciprocal is exact.
_GRID_LO = E2M1_GRID[_IDX_FLOOR]
_INV_GAP = np.append(1.0 / np.diff(E2M1_GRID), 0.0)[_IDX_FLOOR]


def _round_e2m1(v, mode, uniforms=None):
    shape = v.shape
    v = v.reshape(-1)
    a4 = np.abs(v)
    np.minimum(a4, E2M1_MAX, out=a4)
    a4 *= 4.0
    k = a4.astype(np.intp)
    if mode.stochastic:
        p_up = 0.25 * a4
        p_up -= _GRID_LO[k]
        p_up *= _INV_GAP[k]
        u = mode.uniforms(shape) if uniforms is None else np.asarray(uniforms)
        codes = _IDX_FLOOR[k]
        codes += u.reshape(-1) < p_up
    else:
        codes = _IDX_ABOVE[k]
        on = np.flatnonzero(a4 == k)
        codes[on] = _IDX_ON[k[on]]
    codes |= np.signbit(v).view(np.uint8) << 3
    return codes.reshape(shape)


def round_e2m1(v, mode: RoundingMode = NEAREST, uniforms=None) -> np.ndarray:
    """Vectorized E2M1 encoder; returns uint8 codes with the shape of ``v``.

    Magnitudes above 6 saturate to 6 in both modes. The sign bit is kept even
    when the magnitude rounds to zero, so -0.0 encodes to the negative zero code.
    """
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v)
    return _round_e2m1(v, mode, uniforms)


def encode_e2m1(x: float, mode: RoundingMode = NEAREST) -> int:
    return int(round_e2m1(np.float64(x), mode))


# --------------------------------------------------------------------------
# E4M3
# --------------------------------------------------------------------------


def decode_e4m3(codes) -> np.ndarray:
    return _E4M3_TABLE[np.asarray(codes, dtype=np.intp) & 0xFF]


def encode_e4m3(x) -> np.ndarray:
    """Round-to-nearest-even E4M3 encoder (general purpose, sign aware)."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    a = np.abs(x)
    if np.any(a > E4M3_MAX):
        raise QuantizationError(f"value {float(a.max())} exceeds E4M3 range")
    hi = np.minimum(np.searchsorted(_E4M3_POS, a, side="left"), 0x7E)
    lo = np.maximum(hi - 1, 0)
    d_lo = a - _E4M3_POS[lo]
    d_hi = _E4M3_POS[hi] - a
    idx = np.where(d_lo < d_hi, lo, hi)
    idx = np.where(d_lo == d_hi, np.where(lo % 2 == 0, lo, hi), idx)
    codes = idx.astype(np.uint8)
    codes |= np.where(np.signbit(x), 0x80, 0).astype(np.uint8)
    return codes


def encode_scale_e4m3(s):
    """Smallest E4M3 value >= ``s`` (round away from zero).

    Scalar in, int out; array in, uint8 array out.
    """
    arr = np.asarray(s, dtype=np.float64)
    _check_finite(arr)
    if np.any(arr < 0):
        raise QuantizationError("block scale must be non-negative")
    if np.any(arr > E4M3_MAX):
        raise QuantizationError("block scale overflow")
    codes = np.searchsorted(_E4M3_POS, arr, side="left").astype(np.uint8)
    return int(codes) if codes.ndim == 0 else codes


# --------------------------------------------------------------------------
# Two-level tensor quantizer
# --------------------------------------------------------------------------


@dataclass
class QuantizedTensor:
    shape: tuple
    codes: np.ndarray  # uint8, padded 2-D layout
    block_scales: np.ndarray  # uint8 E4M3 codes, one per block
    tensor_scale: float
    geometry: BlockGeometry

    @property
    def padded_shape(self) -> tuple:
        return self.codes.shape

    def block_scale_values(self) -> np.ndarray:
        return decode_e4m3(self.block_scales)

    def equals(self, other: "QuantizedTensor") -> bool:
        """Bitwise equality of every stored field."""
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.geometry is other.geometry
            and np.float32(self.tensor_scale).tobytes() == np.float32(other.tensor_scale).tobytes()
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.block_scales, other.block_scales)
        )


def _as_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x.reshape(-1, x.shape[-1])


def _pad_to(x2: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if x2.shape == (rows, cols):
        return x2
    out = np.zeros((rows, cols), dtype=x2.dtype)
    out[: x2.shape[0], : x2.shape[1]] = x2
    return out


def _ceil16(n: int) -> int:
    return max(16, -(-n // 16) * 16)


def _block_view(a: np.ndarray, geometry: BlockGeometry) -> np.ndarray:
    r, c = a.shape
    if geometry is BlockGeometry.ROWS_1x16:
        return a.reshape(r, c // 16, 16)
    return a.reshape(r // 16, 16, c // 16, 16)


def _block_amax(a: np.ndarray, geometry: BlockGeometry) -> np.ndarray:
    axes = 2 if geometry is BlockGeometry.ROWS_1x16 else (1, 3)
    return _block_view(a, geometry).max(axis=axes)


def _per_block(b: np.ndarray, geometry: BlockGeometry) -> np.ndarray:
    """Per-block values shaped to broadcast against ``_block_view``."""
    return b[..., None] if geometry is BlockGeometry.ROWS_1x16 else b[:, None, :, None]


def tensor_scale_for(amax: float) -> float:
    """Per-tensor scale: the power of two just above ``amax / 0.9375``.

    Within a factor of two of ``max|x|``; see the module notes in the README
    for why a plain ``max|x|`` cannot round-trip.
    """
    if amax == 0.0:
        return 1.0
    m, e = np.frexp(amax / _TENSOR_HEADROOM)
    return float(np.ldexp(1.0, int(e) - 1 if m == 0.5 else int(e)))


def _padded_matrix(x: np.ndarray, geometry: BlockGeometry) -> np.ndarray:
    if geometry is BlockGeometry.ROWS_1x16:
        x2 = _as_rows(x)
        return _pad_to(x2, x2.shape[0], _ceil16(x2.shape[1]))
    if x.ndim != 2:
        raise ValueError(f"16x16 block geometry needs a 2-D tensor, got shape {x.shape}")
    return _pad_to(x, _ceil16(x.shape[0]), _ceil16(x.shape[1]))


def quantize(x, geometry=BlockGeometry.ROWS_1x16, mode: RoundingMode = NEAREST,
             literal_scaling: bool = False) -> QuantizedTensor:
    """Quantize ``x`` to NVFP4.

    Block scales are ``ceil_e4m3(max|x_b| / (6 * S_t))`` so each block maximum
    lands on the +-6 code; with ``literal_scaling`` the ``/6`` is dropped and
    the block maximum maps to 1. Scales are floored at the smallest normal
    E4M3 value. Blocks whose codes are all zero store a zero scale. A tensor
    whose largest magnitude is below the FP32 normal range quantizes to zero.
    """
    geometry = BlockGeometry.parse(geometry)
    x = np.asarray(x)
    _check_finite(x)
    xp = _padded_matrix(x.astype(np.float64), geometry)
    ax = np.abs(xp)
    amax = float(ax.max()) if xp.size else 0.0
    if 0.0 < amax < FP32_MIN_NORMAL:
        # flush to zero: no FP32 tensor scale can represent the result
        xp = np.zeros_like(xp)
        ax = xp
        amax = 0.0
    s_t = tensor_scale_for(amax)
    # dividing by a power of two is exact, so scaling after the max is the same
    blk_amax = _block_amax(ax, geometry) / s_t
    ideal = blk_amax if literal_scaling else blk_amax / E2M1_MAX
    scale_codes = encode_scale_e4m3(np.maximum(ideal, E4M3_MIN_NORMAL))
    scale_codes = np.where(blk_amax > 0, scale_codes, 0).astype(np.uint8)

    s_b = decode_e4m3(scale_codes)
    s_b = np.where(s_b > 0, s_b, 1.0)  # all-zero blocks stay zero
    v = _block_view(xp / s_t, geometry) / _per_block(s_b, geometry)
    codes = _round_e2m1(v.reshape(xp.shape), mode)

    nonzero = _block_amax(codes & 0x7, geometry) > 0
    scale_codes = np.where(nonzero, scale_codes, 0).astype(np.uint8)
    return QuantizedTensor(tuple(x.shape), codes, scale_codes, s_t, geometry)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    vals = _block_view(decode_e2m1(q.codes), q.geometry)
    full = (vals * _per_block(decode_e4m3(q.block_scales), q.geometry) * q.tensor_scale).reshape(q.codes.shape)
    shape = tuple(q.shape)
    if q.geometry is BlockGeometry.SQUARE_16x16:
        out = full[: shape[0], : shape[1]]
    else:
        cols = shape[-1] if len(shape) else 1
        out = full[:, :cols]
    return out.reshape(shape).astype(np.float32)


def fake_quantize(x, geometry=BlockGeometry.ROWS_1x16, mode: RoundingMode = NEAREST,
                  literal_scaling: bool = False) -> np.ndarray:
    return dequantize(quantize(x, geometry, mode, literal_scaling))


def quantization_stats(x, q: QuantizedTensor, literal_scaling: bool = False) -> dict:
    """Error statistics for ``q`` against its source ``x``.

    ``saturation_fraction`` is the fraction of non-zero blocks whose ideal
    scale fell outside the normal E4M3 range and was clamped to its edge.
    """
    x = np.asarray(x, dtype=np.float64)
    err = dequantize(q).astype(np.float64) - x
    xp = _padded_matrix(x, q.geometry)
    blk = _block_amax(np.abs(xp) / q.tensor_scale, q.geometry)
    ideal = blk if literal_scaling else blk / E2M1_MAX
    live = blk > 0
    clamped = live & ((ideal < E4M3_MIN_NORMAL) | (ideal > E4M3_MAX))
    return {
        "max_abs_err": float(np.max(np.abs(err))) if err.size else 0.0,
        "rmse": float(np.sqrt(np.mean(err**2))) if err.size else 0.0,
        "saturation_fraction": float(clamped.sum() / live.sum()) if live.any() else 0.0,
        "tensor_scale": float(q.tensor_scale),
        "blocks": int(blk.size),
    }
