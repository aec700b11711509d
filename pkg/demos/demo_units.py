#!/usr/bin/env python3
"""Error behavior of the function units against exact math: the shift-add
multiplier, leading-one detector, table divider, and the exp/sigmoid unit."""

import math

from hfrwkv.fxp import A9, FxVal, INT16
from hfrwkv.quant import DEFAULT_DPOT, TensorScale, dpot_decode, dpot_encode
from hfrwkv.units import (default_luts, divu, divu_sweep, exp_sigma, exp_sweep,
                          lod, pmac_mul, sigmoid_sweep)

luts = default_luts()

# --- shift-add multiply is exact up to one final truncation ----------------
act = FxVal(181, A9)              # 0.70703125
code = dpot_encode(0.6, DEFAULT_DPOT, TensorScale(0.5))
out = pmac_mul(act, code, DEFAULT_DPOT)
exact = act.value * dpot_decode(code, DEFAULT_DPOT, TensorScale(0.5))
print(f"multiplier: {act.value} x {dpot_decode(code, DEFAULT_DPOT, TensorScale(0.5)):.5f}")
print(f"  datapath {out.value:.6f} (x 2 gamma applied) vs exact {exact:.6f}"
      f" -> error {abs(out.value - exact):.2e} (< one output ulp)")

# --- leading-one detection --------------------------------------------------
for x in (0, 1, 12, 255, 40000):
    print(f"lod({x:>6}) = {lod(x, 16):>2}")

# --- divider: exact diagonal, ~6% worst case off-diagonal -------------------
print(f"\ndivu(12, 3)      = {divu(12, 3, luts.div).value}")
print(f"divu(777, 777)   = {divu(777, 777, luts.div).value} (diagonal forced exact)")
stats = divu_sweep(bits=10)
print(f"10-bit exhaustive sweep: max relative error {stats['max_rel_err']:.4f} "
      f"at {stats['worst_x']}/{stats['worst_y']}")
print("(the 16x16 table's 4-bit operand truncation bounds this near 6%;")
print(" x/x stays exact and the exponent path is error-free)")

# --- exponential mode --------------------------------------------------------
print()
for xv in (-8.0, -1.0, 0.0, 1.0, 4.0):
    raw = int(round(xv * (1 << INT16.frac_bits)))
    got = exp_sigma(FxVal(raw, INT16), "exp", luts).value
    print(f"exp({xv:+.1f}) = {got:.6g}  (true {math.exp(xv):.6g}, "
          f"rel {abs(got / math.exp(xv) - 1):.3%})")
r = exp_sweep()
print(f"dense sweep [-8, 8): max rel err {r['max_rel_err']:.4f}, "
      f"monotone={r['monotone']}")

# --- sigmoid mode -------------------------------------------------------------
print()
for xv in (-5.0, -1.0, 0.0, 1.0, 2.375, 5.0):
    raw = int(round(xv * (1 << INT16.frac_bits)))
    got = exp_sigma(FxVal(raw, INT16), "sigmoid", luts).value
    true = 1.0 / (1.0 + math.exp(-xv))
    print(f"sigma({xv:+.3f}) = {got:.6f}  (true {true:.6f})")
r = sigmoid_sweep()
print(f"dense sweep [-8, 8]: max abs err {r['max_abs_err']:.4f}, "
      f"reflection exact={r['reflection_exact']}")
