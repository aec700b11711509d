"""On-chip LayerNorm: addition-tree summation, variance identity, divider.

The module makes one pass over the input, feeding two addition-tree plus
accumulator (ATAC) reductions: sum(x) and sum(x^2). The variance comes from
``E[x^2] - mean^2`` (clamped at zero against mean-truncation dust), the
standard deviation from a restoring digit-recurrence square root after the
epsilon bump, and each element is then normalized through the unsigned
divider. Statistics are always final before normalization starts; the cycle
model accounts for the tree latency ``ceil(d / P) + 9`` per reduction.

Division by the vector length is shift-only for power-of-two lengths and a
three-term signed shift-add reciprocal otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fxp import FxFormat, FxVec, INT16
from .mvpa import CycleReport
from .quant import U9Vector
from .units import HwContext, Lut2D, default_luts, divu

__all__ = ["LnConfig", "atac_sum", "atac_cycles", "layernorm", "isqrt"]

_VAR_FRAC = 2 * INT16.frac_bits  # variance path fraction bits


@dataclass(frozen=True)
class LnConfig:
    """Vector length, tree parallelism, epsilon and optional affine params."""

    dim: int
    tree_par: int = 512
    eps: float = 2.0 ** -10
    gain: U9Vector | None = None
    bias: U9Vector | None = None
    out_fmt: FxFormat = FxFormat(9, 8)
    out_scale_exp: int = 2

    def __post_init__(self):
        if self.dim <= 0 or self.tree_par <= 0:
            raise ValueError("dim and tree parallelism must be positive")
        if not (self.eps > 0):
            raise ValueError("eps must be positive")

    @property
    def eps_raw(self) -> int:
        return int(round(self.eps * (1 << _VAR_FRAC)))


def atac_cycles(d: int, p: int) -> int:
    return math.ceil(d / p) + 9


def atac_sum(x: FxVec, p: int, ctx: HwContext | None = None) -> tuple[int, CycleReport]:
    """Exact wide-accumulator sum of the raw codes (no intermediate truncation)."""
    total = int(np.sum(x.raw, dtype=np.int64))
    report = CycleReport("atac_sum", len(x), p, atac_cycles(len(x), p))
    if ctx is not None:
        ctx.add_report(report)
    return total, report


def isqrt(v: int) -> int:
    """Floor square root by restoring digit recurrence, one bit per step.

    Handles inputs up to 32 bits (16 result bits), which covers the variance
    path: internal codes are below 2**15 in magnitude and squares are divided
    by the vector length before reaching this unit.
    """
    if v < 0:
        raise ValueError("operand must be non-negative")
    if v >= 1 << 32:
        raise ValueError("operand wider than 32 bits")
    root = 0
    rem = 0
    for i in range(15, -1, -1):
        rem = (rem << 2) | ((v >> (2 * i)) & 0x3)
        trial = (root << 2) | 1
        root <<= 1
        if rem >= trial:
            rem -= trial
            root |= 1
    return root


_RECIP_TERMS: dict = {}


def _recip_terms(d: int):
    """Up to three signed power-of-two terms approximating 1/d."""
    terms = _RECIP_TERMS.get(d)
    if terms is None:
        terms = []
        rem = 1.0 / d
        for _ in range(3):
            if rem == 0.0:
                break
            e = round(math.log2(abs(rem)))
            s = 1 if rem > 0 else -1
            terms.append((s, -e))
            rem -= s * 2.0 ** e
        _RECIP_TERMS[d] = terms = tuple(terms)
    return terms


def _div_by_const(raw: int, d: int) -> int:
    if d & (d - 1) == 0:
        return raw >> (d.bit_length() - 1)
    out = 0
    for s, sh in _recip_terms(d):
        out += s * (raw >> sh)
    return out


def layernorm(x: FxVec, cfg: LnConfig, lut: Lut2D | None = None,
              ctx: HwContext | None = None) -> FxVec:
    """Normalize one vector: ``(x - mean) / sqrt(var + eps)`` plus affine.

    Both reductions consume the same single pass over ``x``; the mean, the
    squared sum and the variance stay in wide integers until the final
    divide, so the only precision losses are the documented shifts and the
    divider tolerance.
    """
    if len(x) != cfg.dim:
        raise ValueError(f"expected dim {cfg.dim}, got {len(x)}")
    if lut is None:
        lut = default_luts().div
    d = cfg.dim
    frac = INT16.frac_bits

    # promote activation codes to internal precision (exact when shifting up)
    up = frac - x.fmt.frac_bits + x.scale_exp
    xi = (x.raw << up) if up >= 0 else (x.raw >> -up)
    xi = np.clip(xi, INT16.min_raw, INT16.max_raw)

    sum_x, _ = atac_sum(FxVec(xi, INT16), cfg.tree_par, ctx)
    sum_x2 = int(np.sum(xi * xi, dtype=np.int64))
    if ctx is not None:
        ctx.add_report(CycleReport("atac_sum", d, cfg.tree_par, atac_cycles(d, cfg.tree_par)))

    mean = _div_by_const(sum_x, d)                     # internal fraction bits
    ex2 = _div_by_const(sum_x2, d)                     # doubled fraction bits
    var = max(ex2 - mean * mean, 0)
    sigma = isqrt(var + cfg.eps_raw)                   # >= sqrt(eps) > 0

    num = np.clip(xi - mean, INT16.min_raw, INT16.max_raw)
    out_raw = np.empty(d, dtype=np.int64)
    for i in range(d):
        q = divu(abs(int(num[i])), sigma, lut, ctx)
        out_raw[i] = -q.raw if num[i] < 0 else q.raw
    norm = shift_round_even_arr(out_raw, 19 - frac)    # wide quotient -> internal

    if cfg.gain is not None:
        ge = cfg.gain.scale.pot_exp
        if ge is None:
            raise ValueError("affine gain scale must be a power of two")
        norm = shift_round_even_arr(norm * cfg.gain.codes, -ge)
    if cfg.bias is not None:
        be = cfg.bias.scale.pot_exp
        if be is None:
            raise ValueError("affine bias scale must be a power of two")
        shift = frac + be
        braw = (cfg.bias.codes << shift) if shift >= 0 else (cfg.bias.codes >> -shift)
        norm = norm + braw
    norm = np.clip(norm, INT16.min_raw, INT16.max_raw)

    down = frac - cfg.out_fmt.frac_bits + cfg.out_scale_exp
    out = shift_round_even_arr(norm, down)
    out = np.clip(out, cfg.out_fmt.min_raw, cfg.out_fmt.max_raw)
    return FxVec(out, cfg.out_fmt, cfg.out_scale_exp)


def shift_round_even_arr(raw: np.ndarray, s: int) -> np.ndarray:
    """Array version of round-to-nearest-even right shift."""
    if s <= 0:
        return raw << -s
    q = raw >> s
    r = raw & ((1 << s) - 1)
    half = 1 << (s - 1)
    return q + ((r > half) | ((r == half) & ((q & 1) == 1))).astype(np.int64)
