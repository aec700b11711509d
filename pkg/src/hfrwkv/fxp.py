"""Signed fixed-point scalars and vectors with hardware saturation semantics.

Every datapath in this package is built on the two primitives below:

* ``FxVal``  - one signed raw code plus a format (total bits, fraction bits).
* ``FxVec``  - a vector of raw codes sharing one format plus a per-tensor
  power-of-two scale exponent, so the real value of element ``i`` is
  ``raw[i] * 2**(scale_exp - frac_bits)``.

Semantics are chosen to match simple synthesizable hardware:

* saturation is symmetric (codes ``-(2**(n-1)-1) .. 2**(n-1)-1``); the most
  negative two's-complement code is accepted on input but never produced,
* right shifts are arithmetic (floor), left shifts saturate,
* requantization rounds to nearest, ties to even, then saturates.

All operations are pure and deterministic; there is no shared state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FxFormat",
    "FxVal",
    "FxVec",
    "A9",
    "INT16",
    "Q13_19",
    "fx_add",
    "fx_sub",
    "fx_shift",
    "fx_requantize",
    "vec_from_reals",
    "vec_to_reals",
    "vec_add",
    "vec_requantize",
    "shift_round_even",
    "shift_floor",
]


@dataclass(frozen=True)
class FxFormat:
    """Bit layout of a signed fixed-point code."""

    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not self.signed:
            raise ValueError("only signed formats are supported")
        if not (1 <= self.frac_bits < self.total_bits <= 32):
            raise ValueError(f"bad format ({self.total_bits}, {self.frac_bits})")

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_raw(self) -> int:
        # Symmetric clamp: ops never produce the most negative code.
        return -self.max_raw

    @property
    def lowest_raw(self) -> int:
        # Most negative representable code (valid on input only).
        return -(1 << (self.total_bits - 1))

    @property
    def ulp(self) -> float:
        return 2.0 ** (-self.frac_bits)

    def clamp(self, raw: int) -> int:
        if raw > self.max_raw:
            return self.max_raw
        if raw < self.min_raw:
            return self.min_raw
        return raw

    def contains(self, raw: int) -> bool:
        return self.lowest_raw <= raw <= self.max_raw


# Canonical formats used across the unit models.
A9 = FxFormat(9, 8)        # activation path: 9-bit uniform symmetric codes
INT16 = FxFormat(16, 10)   # internal precision of the function units
Q13_19 = FxFormat(32, 19)  # wide denormalized output of the divider / exp unit


@dataclass(frozen=True)
class FxVal:
    """One signed fixed-point code. ``value = raw * 2**-fmt.frac_bits``."""

    raw: int
    fmt: FxFormat

    def __post_init__(self):
        if not self.fmt.contains(self.raw):
            raise ValueError(f"raw {self.raw} does not fit {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.ulp

    @classmethod
    def from_real(cls, x: float, fmt: FxFormat) -> "FxVal":
        raw = shift_round_even(int(round(x * (1 << (fmt.frac_bits + 8)))), 8)
        return cls(fmt.clamp(raw), fmt)


class FxVec:
    """Vector of raw codes with a shared format and power-of-two tensor scale.

    ``value[i] = raw[i] * 2**(scale_exp - fmt.frac_bits)``. The raw array is
    held read-only so vectors can be shared safely between callers.
    """

    __slots__ = ("raw", "fmt", "scale_exp")

    def __init__(self, raw, fmt: FxFormat, scale_exp: int = 0):
        arr = np.asarray(raw, dtype=np.int64).copy()
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("FxVec needs a non-empty 1-D array")
        if arr.max(initial=0) > fmt.max_raw or arr.min(initial=0) < fmt.lowest_raw:
            raise ValueError("raw codes out of format range")
        arr.flags.writeable = False
        self.raw = arr
        self.fmt = fmt
        self.scale_exp = int(scale_exp)

    def __len__(self) -> int:
        return self.raw.size

    @property
    def values(self) -> np.ndarray:
        return self.raw * 2.0 ** (self.scale_exp - self.fmt.frac_bits)

    def elem(self, i: int) -> FxVal:
        return FxVal(int(self.raw[i]), self.fmt)


def _require_same_fmt(a: FxVal, b: FxVal) -> None:
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")


def fx_add(a: FxVal, b: FxVal) -> FxVal:
    """Saturating addition of two codes in the same format."""
    _require_same_fmt(a, b)
    return FxVal(a.fmt.clamp(a.raw + b.raw), a.fmt)


def fx_sub(a: FxVal, b: FxVal) -> FxVal:
    _require_same_fmt(a, b)
    return FxVal(a.fmt.clamp(a.raw - b.raw), a.fmt)


def fx_shift(a: FxVal, s: int) -> FxVal:
    """Barrel shift of the raw code: left saturates, right floors.

    Right shift is an arithmetic shift on the two's-complement code, i.e.
    it truncates toward minus infinity (-5 >> 1 == -3).
    """
    if abs(s) >= a.fmt.total_bits + 8:
        raise ValueError(f"shift {s} out of range for {a.fmt}")
    if s >= 0:
        return FxVal(a.fmt.clamp(a.raw << s), a.fmt)
    return FxVal(a.raw >> (-s), a.fmt)


def shift_floor(raw: int, s: int) -> int:
    """Arithmetic shift by ``s`` (positive = left) without width limits."""
    return raw << s if s >= 0 else raw >> (-s)


def shift_round_even(raw: int, s: int) -> int:
    """Shift ``raw`` right by ``s`` bits rounding to nearest, ties to even.

    Uses the non-negative remainder of floor division, which makes the rule
    uniform for negative codes: 0.5 ulp goes to the even neighbour.
    """
    if s <= 0:
        return raw << (-s)
    q = raw >> s
    r = raw & ((1 << s) - 1)
    half = 1 << (s - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def fx_requantize(a: FxVal, target: FxFormat, rounding: str = "nearest-even") -> FxVal:
    """Convert to another format; round-to-nearest-even then saturate."""
    shift = a.fmt.frac_bits - target.frac_bits
    if rounding == "nearest-even":
        raw = shift_round_even(a.raw, shift)
    elif rounding == "floor":
        raw = shift_floor(a.raw, -shift)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    return FxVal(target.clamp(raw), target)


# ---------------------------------------------------------------------------
# Vector helpers (same semantics as the scalar ops, applied lane-wise).
# ---------------------------------------------------------------------------

def _clamp_arr(raw: np.ndarray, fmt: FxFormat) -> np.ndarray:
    return np.clip(raw, fmt.min_raw, fmt.max_raw)


def vec_from_reals(x, fmt: FxFormat, scale_exp: int = 0) -> FxVec:
    """Quantize real values into raw codes at the given format and scale."""
    x = np.asarray(x, dtype=np.float64)
    scaled = x * 2.0 ** (fmt.frac_bits - scale_exp)
    raw = np.rint(scaled).astype(np.int64)  # ties to even, matching hardware
    return FxVec(_clamp_arr(raw, fmt), fmt, scale_exp)


def vec_to_reals(v: FxVec) -> np.ndarray:
    return v.values


def vec_add(a: FxVec, b: FxVec) -> FxVec:
    if a.fmt != b.fmt or a.scale_exp != b.scale_exp:
        raise ValueError("vec_add needs matching formats and scales")
    if len(a) != len(b):
        raise ValueError("length mismatch")
    return FxVec(_clamp_arr(a.raw + b.raw, a.fmt), a.fmt, a.scale_exp)


def vec_requantize(v: FxVec, target: FxFormat, scale_exp: int = 0,
                   rounding: str = "nearest-even") -> FxVec:
    """Shift-only rescale between (format, scale) pairs.

    The net shift is ``(v.scale_exp - scale_exp) + (target.frac - v.frac)``
    applied to the raw codes, so any combination of power-of-two scales is
    exact up to one rounding step.
    """
    shift = (v.scale_exp - scale_exp) + (target.frac_bits - v.fmt.frac_bits)
    raw = v.raw
    if shift >= 0:
        out = raw << shift
    elif rounding == "nearest-even":
        s = -shift
        q = raw >> s
        r = raw & ((1 << s) - 1)
        half = 1 << (s - 1)
        out = q + ((r > half) | ((r == half) & ((q & 1) == 1))).astype(np.int64)
    elif rounding == "floor":
        out = raw >> (-shift)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    return FxVec(_clamp_arr(out, target), target, scale_exp)
