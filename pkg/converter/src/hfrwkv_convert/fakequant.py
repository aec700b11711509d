"""Weight-only fake quantization of interchange models for ablations.

Mirrors the published comparison methodology: precision loss of an
equivalent 9-bit weight quantization is simulated by replacing each matrix
with its quantize-dequantize image and scoring on the float engine. The
matrices touched are the seven projections per block plus the head, the
same set the accelerator stores in weight-code form.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import read_interchange_tensors, write_interchange

MATRIX_SUFFIXES = (".receptance", ".key", ".value", ".output", "head.weight")


def _rtn(w: np.ndarray, bits: int) -> np.ndarray:
    n = (1 << (bits - 1)) - 1
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return w.copy()
    scale = top / n
    return np.clip(np.rint(w / scale), -n, n) * scale


def _pot(w: np.ndarray, bits: int) -> np.ndarray:
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return w.copy()
    exps = np.arange(0, -((1 << (bits - 1)) - 1), -1, dtype=np.float64)
    levels = np.unique(np.concatenate(([0.0], np.exp2(exps))) * top)
    idx = np.clip(np.searchsorted(levels, np.abs(w)), 1, len(levels) - 1)
    lo, hi = levels[idx - 1], levels[idx]
    nearest = np.where((hi - np.abs(w)) < (np.abs(w) - lo), hi, lo)
    return np.sign(w) * nearest


def _logq(w: np.ndarray, bits: int) -> np.ndarray:
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return w.copy()
    e_min = -((1 << (bits - 1)) - 2)
    mag = np.abs(w) / top
    with np.errstate(divide="ignore"):
        e = np.clip(np.rint(np.log2(np.where(mag > 0, mag, 1.0))), e_min, 0.0)
    deq = np.where(mag >= 2.0 ** (e_min - 1), np.exp2(e), 0.0)
    return np.sign(w) * deq * top


_SCHEMES = {"rtn": _rtn, "pot": _pot, "logq": _logq}


def fake_quantize_interchange(src_dir, out_dir, scheme: str, bits: int = 9):
    """Write a copy of an interchange model with fake-quantized matrices."""
    fn = _SCHEMES.get(scheme.lower())
    if fn is None:
        raise ValueError(f"unsupported scheme {scheme!r}")
    manifest, tensors = read_interchange_tensors(src_dir)
    out = {}
    for name, arr in tensors.items():
        if name.endswith(MATRIX_SUFFIXES):
            out[name] = fn(arr, bits)
        else:
            out[name] = arr
    return write_interchange(out, manifest["n_layers"], manifest["hidden"],
                             manifest["ffn"], manifest["vocab"], out_dir,
                             ln_eps=manifest.get("ln_eps", 1e-5))
