#!/usr/bin/env python3
"""Tour of the weight quantizers: codebooks, the 4-bit comparison, and
reconstruction error across schemes on a random tensor."""

import numpy as np

from hfrwkv.quant import (DeltaPotConfig, TensorScale, apot_codebook,
                          calibrate_gamma, dpot_codebook, dpot_decode,
                          dpot_encode, dpot_fake_quantize, quantize_baseline)

# --- the 4-bit comparison -------------------------------------------------
# Additive-PoT with b=4, k=2 has two fixed 2-bit terms; the difference-coded
# variant re-centers each term on the previous one, which shifts the level
# set. The value gamma*(2^0 + 2^-2) is the classic separating example.
k22 = DeltaPotConfig((2, 2))
print("difference-coded levels (x 2 gamma):", 2.0 * dpot_codebook(k22))
print("additive-PoT levels   (x gamma)   :", apot_codebook(4, 2))

target = 1.0 + 2.0 ** -2
code = dpot_encode(target, k22, TensorScale(1.0))
print(f"\ntarget {target}: encoded as sign={code.sign} deltas={code.deltas}"
      f" -> decodes to {dpot_decode(code, k22, TensorScale(1.0))} (exact)")
apot = apot_codebook(4, 2)
print(f"nearest additive-PoT level: {apot[np.argmin(np.abs(apot - target))]}"
      " (off by 0.125)")

# --- reconstruction error across schemes ----------------------------------
rng = np.random.default_rng(0)
w = rng.normal(0, 0.4, 4096)
cfg = DeltaPotConfig((3, 3, 2))  # sign + 8 field bits, the default layout

rows = []
deq = dpot_fake_quantize(w, cfg, calibrate_gamma(w, cfg, pot=True))
rows.append(("dpot(3,3,2)", deq))
for scheme in ("rtn", "pot", "logq"):
    _, deq = quantize_baseline(w, scheme, 9)
    rows.append((f"{scheme}-9bit", deq))

print(f"\n{'scheme':<12} {'mse':>12} {'max_abs':>10}")
for name, deq in rows:
    print(f"{name:<12} {np.mean((deq - w) ** 2):>12.3e} "
          f"{np.max(np.abs(deq - w)):>10.4f}")

# --- calibration modes -----------------------------------------------------
g_max = calibrate_gamma(w, cfg, mode="max")
g_grid = calibrate_gamma(w, cfg, mode="grid")
for name, g in (("max-match", g_max), ("grid-search", g_grid)):
    mse = np.mean((dpot_fake_quantize(w, cfg, g) - w) ** 2)
    print(f"gamma {name:<11} = {g.gamma:.5f} -> mse {mse:.3e}")
