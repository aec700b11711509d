"""Matrix-vector processing array: column-streamed matvec and lane-wise ops.

The array streams one matrix column (and the matching vector element) per
cycle into ``d`` parallel multiplier lanes. Accumulation order is normative:
ascending column index, one saturating 16-bit add per step, so results are
bit-identical regardless of how the software batches the work. Lane count
only changes cycle counts, never values.

Cycle model:

* matvec:       ``(l + 4) * ceil(rows / d)`` with ``l`` the streamed length
  (pipeline fill and drain cost 4 cycles per pass),
* element-wise: ``ceil(l / d) + 4`` (multiply with accumulators off, or the
  adder array).

Ragged ``l/d`` splits round up with idle lanes.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .fxp import FxVec
from .quant import QMatrix, QVector
from .units import HwContext, pmac_mul_raw_vec, pmac_out_format

__all__ = ["MvpaConfig", "CycleReport", "mv_mul", "ew_mul", "ew_add"]


@dataclass(frozen=True)
class MvpaConfig:
    """Lane count and accumulator width of the processing array."""

    lanes: int = 512
    acc_bits: int = 16

    def __post_init__(self):
        if self.lanes <= 0:
            raise ValueError("lane count must be positive")
        if self.acc_bits != 16:
            raise ValueError("accumulators are 16-bit registers")


@dataclass(frozen=True)
class CycleReport:
    """Latency of one array operation under the streaming model."""

    op: str
    l: int
    d: int
    cycles: int

    def to_json_obj(self) -> dict:
        return {"op": self.op, "l": self.l, "d": self.d, "cycles": self.cycles}


def matvec_cycles(l: int, d: int, rows: int | None = None) -> int:
    passes = math.ceil((rows if rows is not None else l) / d)
    return (l + 4) * passes


def elementwise_cycles(l: int, d: int) -> int:
    return math.ceil(l / d) + 4


def _row_chunks(rows: int):
    """Split the row range per the thread cap; numerically inert."""
    n = max(1, min(int(os.environ.get("HFRWKV_THREADS", "1") or 1), rows))
    step = math.ceil(rows / n)
    return [(i, min(i + step, rows)) for i in range(0, rows, step)]


def mv_mul(w: QMatrix, v: FxVec, cfg: MvpaConfig,
           ctx: HwContext | None = None) -> tuple[FxVec, CycleReport]:
    """Column-streamed matrix-vector multiply on the multiplier lanes.

    Output raw ``r_i = sum_j pmac(v_j, W_ij)`` accumulated in ascending-j
    order with 16-bit saturation at every step. The combined tensor scale
    (weight gamma times vector scale) lands in the output descriptor; the
    weight gamma must therefore be a power of two on this path.
    """
    if w.cols != len(v):
        raise ValueError(f"dimension mismatch: matrix cols {w.cols} vs vector {len(v)}")
    if v.fmt.total_bits > 9:
        raise ValueError("vector operand must be in a 9-bit activation format")
    if w.scale.pot_exp is None:
        raise ValueError("matrix scale must be a power of two for the array path")
    out_fmt = pmac_out_format(v.fmt)
    lo, hi = out_fmt.min_raw, out_fmt.max_raw
    qmax = w.config.max_shift
    acc = np.zeros(w.rows, dtype=np.int64)
    overflow = False
    for r0, r1 in _row_chunks(w.rows):
        part = np.zeros(r1 - r0, dtype=np.int64)
        for j in range(w.cols):
            term = pmac_mul_raw_vec(int(v.raw[j]), w.signs[r0:r1, j],
                                    w.shifts[r0:r1, j, :], qmax)
            part += term
            if not overflow and ((part > hi).any() or (part < lo).any()):
                overflow = True
            np.clip(part, lo, hi, out=part)
        acc[r0:r1] = part
    if overflow and ctx is not None:
        ctx.overflow = True
    scale_exp = v.scale_exp + w.scale.pot_exp + 1  # the decoded level carries 2*gamma
    report = CycleReport("mv_mul", w.cols, cfg.lanes,
                         matvec_cycles(w.cols, cfg.lanes, w.rows))
    if ctx is not None:
        ctx.add_report(report)
    return FxVec(acc, out_fmt, scale_exp), report


def ew_mul(a: FxVec, w, cfg: MvpaConfig,
           ctx: HwContext | None = None) -> tuple[FxVec, CycleReport]:
    """Lane-parallel element-wise multiply with the accumulators disabled.

    ``w`` is either a Δ-PoT vector (shift-add lanes) or another ``FxVec``
    (exact integer product truncated back to ``a``'s format, floor).
    """
    if len(a) != len(w):
        raise ValueError("length mismatch")
    if isinstance(w, QVector):
        if a.fmt.total_bits > 9:
            raise ValueError("vector operand must be in a 9-bit activation format")
        if w.scale.pot_exp is None:
            raise ValueError("weight scale must be a power of two for the array path")
        out_fmt = pmac_out_format(a.fmt)
        raw = pmac_mul_raw_vec(a.raw, w.signs, w.shifts, w.config.max_shift)
        out = FxVec(np.clip(raw, out_fmt.min_raw, out_fmt.max_raw), out_fmt,
                    a.scale_exp + w.scale.pot_exp + 1)
    elif isinstance(w, FxVec):
        prod = a.raw * w.raw
        raw = prod >> w.fmt.frac_bits
        clipped = np.clip(raw, a.fmt.min_raw, a.fmt.max_raw)
        if ctx is not None and (clipped != raw).any():
            ctx.overflow = True
        out = FxVec(clipped, a.fmt, a.scale_exp + w.scale_exp)
    else:
        raise TypeError(f"unsupported weight operand {type(w).__name__}")
    report = CycleReport("ew_mul", len(a), cfg.lanes, elementwise_cycles(len(a), cfg.lanes))
    if ctx is not None:
        ctx.add_report(report)
    return out, report


def ew_add(a: FxVec, b: FxVec, cfg: MvpaConfig,
           ctx: HwContext | None = None) -> tuple[FxVec, CycleReport]:
    """Lane-wise saturating addition via the adder array."""
    if len(a) != len(b):
        raise ValueError("length mismatch")
    if a.fmt != b.fmt or a.scale_exp != b.scale_exp:
        raise ValueError("format mismatch: requantize operands first")
    raw = a.raw + b.raw
    clipped = np.clip(raw, a.fmt.min_raw, a.fmt.max_raw)
    if ctx is not None and (clipped != raw).any():
        ctx.overflow = True
    report = CycleReport("ew_add", len(a), cfg.lanes, elementwise_cycles(len(a), cfg.lanes))
    if ctx is not None:
        ctx.add_report(report)
    return FxVec(clipped, a.fmt, a.scale_exp), report
