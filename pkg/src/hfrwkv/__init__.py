"""Bit-accurate software model of a shift-add RWKV-4 inference accelerator.

Subpackages mirror the hardware: ``fxp`` (fixed-point substrate), ``quant``
(Δ-PoT and baseline weight codecs), ``units`` (multiplier, divider,
exp/sigmoid, leading-one detector), ``mvpa`` (matrix-vector array and cycle
model), ``lnorm`` (LayerNorm), ``engine`` (quantized inference plus float
reference), ``modelio`` (binary container), ``interchange`` (float hand-off
format) and ``cli``.
"""

from . import cli, engine, fxp, interchange, lnorm, modelio, mvpa, quant, units

__all__ = ["cli", "engine", "fxp", "interchange", "lnorm", "modelio",
           "mvpa", "quant", "units"]
__version__ = "0.1.0"
