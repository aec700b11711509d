"""Behavioral models of the arithmetic function units.

Units modeled here, each bit-exact with respect to its own definition:

* PMAC multiplier: multiplies a 9-bit activation by a Δ-PoT weight code with
  barrel shifts on a guard-extended bus and a single truncation, so the raw
  result equals ``trunc_toward_zero(act * decoded_weight * 2**GUARD_BITS)``.
* LOD: leading-one detector via hierarchical binary search (-1 for zero).
* DIVU: unsigned divider. Operands are normalized with the LOD, the 4 bits
  after each leading one index a 16x16 quotient table, and the exponent gap
  is applied as a shift. Table entries are midpoint ratios rounded to 8
  fraction bits; diagonal entries are forced to exactly 1.0 so x/x == 1.
* EXP-sigmoid unit: one datapath, two modes. Exponential mode rewrites
  e**x as 2**(x * log2 e) with the constant realized as x + (x>>1) - (x>>4)
  (1.0111 in binary), then a 256-entry table supplies 2**frac and the integer
  part becomes a shift. Sigmoid mode walks a four-segment piecewise-linear
  table whose slopes are single shifts, with f(-x) = 1 - f(x) by reflection.

Sticky error flags live in a caller-owned ``HwContext`` (no global state);
tables are immutable and safe to share.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .fxp import FxFormat, FxVal, INT16, Q13_19, fx_requantize
from .quant import DeltaPotCode, DeltaPotConfig, _shifts_from_deltas

__all__ = [
    "GUARD_BITS",
    "HwContext",
    "Lut2D",
    "ExpLut",
    "SigmaLut",
    "UnitLuts",
    "default_luts",
    "pmac_mul",
    "pmac_out_format",
    "lod",
    "divu",
    "signed_div",
    "shift_addition_log2e",
    "exp_sigma",
    "dump_lut",
    "load_lut",
    "LutFormatError",
]

GUARD_BITS = 4          # extra fraction bits on the multiplier output bus
EXP_X_MIN = -16.0       # below this the exponential underflows to zero
EXP_X_MAX = 8.0         # at or above this the exponential saturates


class HwContext:
    """Per-caller evaluation context: sticky status flags and cycle reports.

    Flags latch on first occurrence and stay set until ``clear_flags``,
    mirroring hardware status registers.
    """

    def __init__(self):
        self.div_by_zero = False
        self.overflow = False
        self.exp_overflow = False
        self.reports = []

    def clear_flags(self):
        self.div_by_zero = False
        self.overflow = False
        self.exp_overflow = False

    def any_flag(self) -> bool:
        return self.div_by_zero or self.overflow or self.exp_overflow

    def add_report(self, report):
        self.reports.append(report)


# ---------------------------------------------------------------------------
# Lookup tables.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lut2D:
    """16x16 quotient table: rows index the dividend, columns the divisor."""

    codes: np.ndarray  # uint16, 8 fraction bits, values in [128, 511]

    @classmethod
    def build(cls) -> "Lut2D":
        mid = 1.0 + (np.arange(16) + 0.5) / 16.0
        codes = np.rint(256.0 * (mid[:, None] / mid[None, :])).astype(np.uint16)
        codes[np.arange(16), np.arange(16)] = 256  # x/x is exact by fiat
        return cls(_frozen(codes))

    def validate(self):
        if self.codes.shape != (16, 16):
            raise ValueError("quotient table must be 16x16")
        if self.codes.min() < 128 or self.codes.max() >= 512:
            raise ValueError("quotient codes out of [0.5, 2.0) range")


@dataclass(frozen=True)
class ExpLut:
    """256-entry table of 2**v for v in [0, 1), 8 fraction bits."""

    codes: np.ndarray  # uint16, entry(i) ~ 2**((i + 0.5) / 256)

    @classmethod
    def build(cls) -> "ExpLut":
        codes = np.rint(256.0 * np.exp2((np.arange(256) + 0.5) / 256.0))
        return cls(_frozen(codes.astype(np.uint16)))

    def validate(self):
        if self.codes.shape != (256,):
            raise ValueError("exp table must have 256 entries")
        if self.codes[0] != 256:
            raise ValueError("entry 0 must decode to 1.0")
        if np.any(np.diff(self.codes.astype(np.int64)) < 0):
            raise ValueError("exp table must be monotone nondecreasing")


@dataclass(frozen=True)
class SigmaLut:
    """Positive-domain segments of the sigmoid approximation.

    Each row is (breakpoint_raw, shifts, intercept_raw) at 10 fraction bits;
    slopes are sums of right shifts. Negative inputs use 1 - f(-x).
    """

    rows: tuple

    @classmethod
    def build(cls) -> "SigmaLut":
        frac = INT16.frac_bits
        def c(x):
            return int(round(x * (1 << frac)))
        return cls((
            (c(0.0), (2,), c(0.5)),        # 0.25 x + 0.5
            (c(1.0), (3,), c(0.625)),      # 0.125 x + 0.625
            (c(2.375), (5,), c(0.84375)),  # 0.03125 x + 0.84375
            (c(5.0), (), c(1.0)),          # saturated tail
        ))

    def validate(self):
        if len(self.rows) != 4:
            raise ValueError("sigmoid table must have exactly 4 segments")
        bps = [r[0] for r in self.rows]
        if bps != sorted(bps) or bps[0] != 0:
            raise ValueError("segment breakpoints must ascend from 0")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class UnitLuts:
    div: Lut2D
    exp: ExpLut
    sigma: SigmaLut


_DEFAULT_LUTS = None


def default_luts() -> UnitLuts:
    global _DEFAULT_LUTS
    if _DEFAULT_LUTS is None:
        _DEFAULT_LUTS = UnitLuts(Lut2D.build(), ExpLut.build(), SigmaLut.build())
    return _DEFAULT_LUTS


# ---------------------------------------------------------------------------
# Δ-PoT multiplier.
# ---------------------------------------------------------------------------

def pmac_out_format(act_fmt: FxFormat) -> FxFormat:
    return FxFormat(16, act_fmt.frac_bits + GUARD_BITS)


def pmac_mul(act: FxVal, w: DeltaPotCode, cfg: DeltaPotConfig) -> FxVal:
    """Multiply an activation code by a Δ-PoT weight code.

    The shifters run on a bus extended by the largest possible exponent, so
    the only truncation (toward zero) happens once, at the accumulator input.
    The per-tensor ``2 * gamma`` factor is tracked in the output descriptor
    by callers, never multiplied in-datapath.
    """
    if act.fmt.total_bits > 9:
        raise ValueError("activation operand must be at most 9 bits")
    if cfg.n_terms > 3:
        raise ValueError("datapath supports at most three terms")
    shifts = _shifts_from_deltas(w.deltas, cfg)
    out_fmt = pmac_out_format(act.fmt)
    if not shifts:
        return FxVal(0, out_fmt)
    qmax = cfg.max_shift
    a = abs(act.raw)
    wide = 0
    for q in shifts:
        wide += a << (qmax - q)
    mag = wide >> (qmax - GUARD_BITS)
    sign = w.sign * (-1 if act.raw < 0 else 1)
    return FxVal(out_fmt.clamp(sign * mag), out_fmt)


def pmac_mul_raw_vec(act_raw, signs, shifts, qmax: int) -> np.ndarray:
    """Vector form of the multiplier. Bit-identical to ``pmac_mul``.

    ``signs``/``shifts`` are the per-code arrays of a quantized tensor slice
    (inactive terms carry the 255 sentinel); ``act_raw`` is one streamed
    activation code or an array of per-lane codes.
    """
    act = np.asarray(act_raw, dtype=np.int64)
    a_wide = np.abs(act) << qmax
    wide = np.zeros(signs.shape, dtype=np.int64)
    for t in range(shifts.shape[-1]):
        s = shifts[..., t].astype(np.int64)
        wide += np.where(s == 255, 0, a_wide >> np.minimum(s, 63))
    mag = wide >> (qmax - GUARD_BITS)
    out = signs.astype(np.int64) * mag
    return np.where(act < 0, -out, out)


# ---------------------------------------------------------------------------
# Leading-one detector.
# ---------------------------------------------------------------------------

def lod(x: int, width: int = 16) -> int:
    """Index of the most significant set bit via hierarchical binary search.

    Returns -1 for a zero input. ``width`` must be a power of two <= 32;
    narrower operands are zero-extended.
    """
    if width not in (1, 2, 4, 8, 16, 32):
        raise ValueError("width must be a power of two <= 32")
    if not (0 <= x < (1 << width)):
        raise ValueError(f"operand does not fit in {width} bits")
    p, w, d = 0, width, x
    while w > 1:
        h = w // 2
        top = d >> h
        if top != 0:
            d = top
            p += h
        else:
            d &= (1 << h) - 1
        w = h
    return p if d == 1 else -1


# ---------------------------------------------------------------------------
# Unsigned divider.
# ---------------------------------------------------------------------------

def _norm_index(x: int, k: int) -> int:
    """The 4 bits that follow the leading one, zero-padded when short."""
    if k >= 4:
        return (x >> (k - 4)) & 0xF
    return (x << (4 - k)) & 0xF


def divu(x: int, y: int, lut: Lut2D, ctx: HwContext | None = None) -> FxVal:
    """Unsigned division through normalize / table lookup / denormalize.

    Stages mirror the three-step pipeline: leading-one detection on both
    operands, fractional quotient from the 2-D table, then a shift by the
    exponent difference. A zero divisor saturates the quotient and latches
    the sticky divide-by-zero flag instead of aborting.
    """
    if not (0 <= x < (1 << 16) and 0 <= y < (1 << 16)):
        raise ValueError("operands must be unsigned 16-bit values")
    if y == 0:
        if ctx is not None:
            ctx.div_by_zero = True
        return FxVal(Q13_19.max_raw, Q13_19)
    if x == 0:
        return FxVal(0, Q13_19)
    k1 = lod(x, 32)
    k2 = lod(y, 32)
    entry = int(lut.codes[_norm_index(x, k1), _norm_index(y, k2)])
    shift = (Q13_19.frac_bits - 8) + (k1 - k2)
    if shift >= 0:
        raw = entry << shift
        if raw > Q13_19.max_raw:
            if ctx is not None:
                ctx.overflow = True
            raw = Q13_19.max_raw
    else:
        raw = entry >> (-shift)
    return FxVal(raw, Q13_19)


def signed_div(a: FxVal, b: FxVal, lut: Lut2D, ctx: HwContext | None = None) -> FxVal:
    """Signed wrapper: separate the sign bits, divide magnitudes, recombine."""
    if a.fmt != b.fmt:
        raise ValueError("operands must share a format")
    q = divu(abs(a.raw), abs(b.raw), lut, ctx)
    if (a.raw < 0) != (b.raw < 0):
        return FxVal(-q.raw, Q13_19)
    return q


# ---------------------------------------------------------------------------
# Exponential / sigmoid unit.
# ---------------------------------------------------------------------------

def shift_addition_log2e(x: FxVal) -> FxVal:
    """Multiply by log2(e) ~ 1.0111b as x + (x>>1) - (x>>4), saturating."""
    raw = x.raw + (x.raw >> 1) - (x.raw >> 4)
    return FxVal(x.fmt.clamp(raw), x.fmt)


def _exp_core(x: FxVal, luts: UnitLuts, ctx: HwContext | None) -> FxVal:
    if x.value < EXP_X_MIN:
        return FxVal(0, Q13_19)
    if x.value >= EXP_X_MAX:
        if ctx is not None:
            ctx.exp_overflow = True
        return FxVal(Q13_19.max_raw, Q13_19)
    y = shift_addition_log2e(x)
    frac = y.fmt.frac_bits
    u = y.raw >> frac                      # floor split keeps v in [0, 1)
    v = y.raw & ((1 << frac) - 1)
    idx = v >> (frac - 8) if frac >= 8 else v << (8 - frac)
    entry = int(luts.exp.codes[idx])
    shift = (Q13_19.frac_bits - 8) + u
    if shift >= 0:
        raw = entry << shift
        if raw > Q13_19.max_raw:
            if ctx is not None:
                ctx.exp_overflow = True
            raw = Q13_19.max_raw
    else:
        raw = entry >> (-shift)
    return FxVal(raw, Q13_19)


def _sigmoid_core(x: FxVal, luts: UnitLuts) -> FxVal:
    xi = x if x.fmt == INT16 else fx_requantize(x, INT16)
    ax = abs(xi.raw)
    row = luts.sigma.rows[0]
    for r in luts.sigma.rows:
        if ax >= r[0]:
            row = r
        else:
            break
    _, shifts, intercept = row
    raw = intercept
    for s in shifts:
        raw += ax >> s
    raw = min(raw, 1 << INT16.frac_bits)
    if xi.raw < 0:
        raw = (1 << INT16.frac_bits) - raw
    return FxVal(raw, INT16)


def exp_sigma(x: FxVal, mode: str, luts: UnitLuts | None = None,
              ctx: HwContext | None = None) -> FxVal:
    """Shared-datapath nonlinearity: ``mode`` selects exp or sigmoid.

    Exponential results come back in the wide denormalized format (the
    mantissa has 8 fraction bits; the integer part of y = x log2 e becomes a
    shift). Sigmoid results are in the 16-bit internal format, in [0, 1].
    """
    if luts is None:
        luts = default_luts()
    if mode == "exp":
        return _exp_core(x, luts, ctx)
    if mode == "sigmoid":
        return _sigmoid_core(x, luts)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Validation sweeps (used by the units subcommand and the acceptance tests).
# ---------------------------------------------------------------------------

def lod_sweep(width: int = 16) -> dict:
    """Exhaustive comparison of the detector against floor(log2)."""
    mismatches = 0
    for x in range(1 << width):
        want = x.bit_length() - 1 if x > 0 else -1
        if lod(x, width) != want:
            mismatches += 1
    return {"inputs": 1 << width, "mismatches": mismatches}


def divu_norm_index_vec(x: np.ndarray):
    """Vectorized (leading-one position, 4-bit index) used by the sweep."""
    m, e = np.frexp(x.astype(np.float64))  # exact for integers below 2**53
    k = e - 1
    idx = np.where(k >= 4, (x >> np.maximum(k - 4, 0)) & 0xF,
                   (x << np.maximum(4 - k, 0)) & 0xF)
    return k, idx


def divu_sweep(lut: Lut2D | None = None, bits: int = 12) -> dict:
    """Exhaustive relative-error sweep over all positive ``bits``-wide pairs.

    Uses the same table and indexing as ``divu`` in vectorized form (the
    tests pin the two paths bit-equal); errors are measured on the exact
    denormalized quotient, before any output-register saturation.
    """
    if lut is None:
        lut = default_luts().div
    n = (1 << bits) - 1
    x = np.arange(1, n + 1, dtype=np.int64)
    k, idx = divu_norm_index_vec(x)
    entry = lut.codes.astype(np.float64) / 256.0
    xf = x.astype(np.float64)
    best = (-1.0, 0, 0)
    diag_exact = True
    for lo_i in range(0, n, 512):
        sl = slice(lo_i, min(lo_i + 512, n))
        q_hw = entry[idx[sl, None], idx[None, :]] * np.exp2((k[sl, None] - k[None, :]).astype(np.float64))
        rel = np.abs(q_hw * xf[None, :] / xf[sl, None] - 1.0)
        i, j = np.unravel_index(int(rel.argmax()), rel.shape)
        if rel[i, j] > best[0]:
            best = (float(rel[i, j]), int(x[sl][i]), int(x[j]))
        rows = np.arange(sl.start, sl.stop)
        if not np.all(q_hw[np.arange(rows.size), rows] == 1.0):
            diag_exact = False
    return {"pairs": n * n, "max_rel_err": best[0],
            "worst_x": best[1], "worst_y": best[2],
            "diagonal_exact": diag_exact}


def exp_sweep(luts: UnitLuts | None = None, lo: float = -8.0, hi: float = 8.0) -> dict:
    """Dense exponential sweep at 2**-8 steps: relative error and monotonicity."""
    if luts is None:
        luts = default_luts()
    step = 2.0 ** -8
    xs = np.arange(lo, hi, step)
    raws = np.rint(xs * (1 << INT16.frac_bits)).astype(np.int64)
    outs = np.empty(raws.size, dtype=np.int64)
    for i, r in enumerate(raws):
        outs[i] = exp_sigma(FxVal(int(r), INT16), "exp", luts).raw
    vals = outs / float(1 << Q13_19.frac_bits)
    rel = np.abs(vals / np.exp(raws / float(1 << INT16.frac_bits)) - 1.0)
    one = exp_sigma(FxVal(0, INT16), "exp", luts)
    return {"points": raws.size, "max_rel_err": float(rel.max()),
            "monotone": bool(np.all(np.diff(outs) >= 0)),
            "exp0_exact": one.raw == (1 << Q13_19.frac_bits)}


def sigmoid_sweep(luts: UnitLuts | None = None, lo: float = -8.0, hi: float = 8.0) -> dict:
    """Dense sigmoid sweep: absolute error, reflection identity, fixed points."""
    if luts is None:
        luts = default_luts()
    frac = INT16.frac_bits
    step = 2.0 ** -8
    xs = np.arange(lo, hi + step / 2, step)
    raws = np.rint(xs * (1 << frac)).astype(np.int64)
    outs = np.empty(raws.size, dtype=np.int64)
    for i, r in enumerate(raws):
        outs[i] = exp_sigma(FxVal(int(r), INT16), "sigmoid", luts).raw
    vals = outs / float(1 << frac)
    err = np.abs(vals - 1.0 / (1.0 + np.exp(-raws / float(1 << frac))))
    refl = outs + outs[::-1]  # symmetric grid: f(x) + f(-x) must be exactly 1
    f0 = exp_sigma(FxVal(0, INT16), "sigmoid", luts).raw
    f5 = exp_sigma(FxVal(5 << frac, INT16), "sigmoid", luts).raw
    return {"points": raws.size, "max_abs_err": float(err.max()),
            "reflection_exact": bool(np.all(refl == (1 << frac))),
            "f0_exact": f0 == 1 << (frac - 1),
            "f5_exact": f5 == 1 << frac,
            "in_range": bool(np.all((outs >= 0) & (outs <= 1 << frac)))}


# ---------------------------------------------------------------------------
# Table serialization: 8-byte header then little-endian 16-bit entries.
# ---------------------------------------------------------------------------

_MAGIC = b"HLUT"
_KIND_DIV, _KIND_EXP, _KIND_SIGMA = 1, 2, 3
_VERSION = 1


class LutFormatError(ValueError):
    pass


def dump_lut(obj) -> bytes:
    if isinstance(obj, Lut2D):
        kind, entries = _KIND_DIV, [int(v) for v in obj.codes.ravel()]
    elif isinstance(obj, ExpLut):
        kind, entries = _KIND_EXP, [int(v) for v in obj.codes]
    elif isinstance(obj, SigmaLut):
        kind, entries = _KIND_SIGMA, []
        for bp, shifts, intercept in obj.rows:
            padded = tuple(shifts) + (0,) * (2 - len(shifts))
            entries += [bp, len(shifts), padded[0], padded[1], intercept]
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    head = struct.pack("<4sBBH", _MAGIC, kind, _VERSION, len(entries))
    return head + struct.pack(f"<{len(entries)}H", *entries)


def load_lut(blob: bytes):
    if len(blob) < 8:
        raise LutFormatError("blob shorter than the header")
    magic, kind, version, count = struct.unpack("<4sBBH", blob[:8])
    if magic != _MAGIC:
        raise LutFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise LutFormatError(f"unsupported version {version}")
    if len(blob) != 8 + 2 * count:
        raise LutFormatError("entry count does not match payload size")
    entries = struct.unpack(f"<{count}H", blob[8:])
    if kind == _KIND_DIV:
        if count != 256:
            raise LutFormatError("divider table must have 256 entries")
        lut = Lut2D(_frozen(np.array(entries, dtype=np.uint16).reshape(16, 16)))
        lut.validate()
        return lut
    if kind == _KIND_EXP:
        if count != 256:
            raise LutFormatError("exp table must have 256 entries")
        lut = ExpLut(_frozen(np.array(entries, dtype=np.uint16)))
        lut.validate()
        return lut
    if kind == _KIND_SIGMA:
        if count != 20:
            raise LutFormatError("sigmoid table must have 20 entries")
        rows = []
        for i in range(0, 20, 5):
            bp, n, s0, s1, intercept = entries[i:i + 5]
            if n > 2:
                raise LutFormatError("segment slope uses at most two shifts")
            rows.append((bp, (s0, s1)[:n], intercept))
        lut = SigmaLut(tuple(rows))
        lut.validate()
        return lut
    raise LutFormatError(f"unknown table kind {kind}")
