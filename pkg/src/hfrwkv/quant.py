"""Weight quantizers: difference-encoded additive powers of two and baselines.

The centrepiece is the Δ-PoT code: a sign bit followed by ``n`` difference
fields Δq_0..Δq_{n-1} of configurable widths k_i. Term ``i`` contributes
``p_i = p_{i-1} * 2**-Δq_i`` with ``p_{-1} = 1``; a zero field makes that term
and every later one vanish (later terms are multiples of the dead one). The
decoded weight is ``2 * gamma * sign * sum(p_i)``, so the whole multiply
reduces to a few barrel shifts.

Also provided: 9-bit uniform symmetric quantization for additive weights and
the fake-quantization baselines (RTN, PoT, LogQ, APoT) used by the error
comparison tooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DeltaPotConfig",
    "DeltaPotCode",
    "TensorScale",
    "QMatrix",
    "U9Vector",
    "DEFAULT_DPOT",
    "dpot_decode",
    "dpot_encode",
    "dpot_codebook",
    "quantize_uniform9",
    "quantize_baseline",
    "calibrate_gamma",
    "encode_tensor",
    "decode_tensor",
    "encode_vector",
]

_INACTIVE = 255  # sentinel shift for terms absorbed by a zero field


@dataclass(frozen=True)
class DeltaPotConfig:
    """Per-term field widths of a Δ-PoT code. ``total_bits = 1 + sum(k)``."""

    term_bits: tuple = (3, 3, 2)

    def __post_init__(self):
        ks = tuple(int(k) for k in self.term_bits)
        if len(ks) < 1 or any(k < 1 for k in ks):
            raise ValueError("need at least one term of width >= 1")
        object.__setattr__(self, "term_bits", ks)

    @property
    def n_terms(self) -> int:
        return len(self.term_bits)

    @property
    def total_bits(self) -> int:
        return 1 + sum(self.term_bits)

    @property
    def max_shift(self) -> int:
        # largest cumulative exponent q_i any active term can reach
        return sum((1 << k) - 1 for k in self.term_bits)


DEFAULT_DPOT = DeltaPotConfig((3, 3, 2))  # sign + 8 field bits = 9-bit storage


@dataclass(frozen=True)
class DeltaPotCode:
    """Sign and difference fields of one quantized weight."""

    sign: int
    deltas: tuple

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        object.__setattr__(self, "deltas", tuple(int(d) for d in self.deltas))

    def validate(self, cfg: DeltaPotConfig) -> None:
        if len(self.deltas) != cfg.n_terms:
            raise ValueError("wrong number of difference fields")
        for d, k in zip(self.deltas, cfg.term_bits):
            if not (0 <= d < (1 << k)):
                raise ValueError(f"field value {d} out of range for {k} bits")


@dataclass(frozen=True)
class TensorScale:
    """Per-tensor scale. ``pot_exp`` is set when gamma is an exact power of two."""

    gamma: float
    pot_exp: int | None = None

    def __post_init__(self):
        if not (self.gamma > 0):
            raise ValueError("gamma must be positive")
        if self.pot_exp is not None and self.gamma != 2.0 ** self.pot_exp:
            raise ValueError("pot_exp does not match gamma")

    @classmethod
    def pot(cls, exp: int) -> "TensorScale":
        return cls(2.0 ** exp, exp)


def _shifts_from_deltas(deltas, cfg: DeltaPotConfig):
    """Cumulative shift amounts q_i for the active terms (zero field absorbs)."""
    shifts = []
    q = 0
    for d, k in zip(deltas, cfg.term_bits):
        if not (0 <= d < (1 << k)):
            raise ValueError(f"field value {d} out of range for {k} bits")
        if d == 0:
            break
        q += d
        shifts.append(q)
    return shifts


def _magnitude(deltas, cfg: DeltaPotConfig) -> float:
    return sum(2.0 ** -q for q in _shifts_from_deltas(deltas, cfg))


def dpot_decode(code: DeltaPotCode, cfg: DeltaPotConfig, scale: TensorScale) -> float:
    """Real value of one code: ``2 * gamma * sign * sum(p_i)``."""
    code.validate(cfg)
    return 2.0 * scale.gamma * code.sign * _magnitude(code.deltas, cfg)


class _Codebook:
    """Enumerated level set of a config: sorted magnitudes plus one canonical
    delta tuple per magnitude (distinct active-term codes never alias, since
    the cumulative exponents are strictly increasing)."""

    def __init__(self, cfg: DeltaPotConfig):
        entries = {}

        def walk(i, q, mag, deltas):
            entries.setdefault(mag, tuple(deltas + [0] * (cfg.n_terms - len(deltas))))
            if i == cfg.n_terms:
                return
            for d in range(1, 1 << cfg.term_bits[i]):
                walk(i + 1, q + d, mag + 2.0 ** -(q + d), deltas + [d])

        walk(0, 0, 0.0, [])
        mags = sorted(entries)
        self.magnitudes = np.array(mags)
        self.deltas = [entries[m] for m in mags]
        self.index_of = {entries[m]: i for i, m in enumerate(mags)}


_CODEBOOKS: dict = {}


def _codebook(cfg: DeltaPotConfig) -> _Codebook:
    cb = _CODEBOOKS.get(cfg.term_bits)
    if cb is None:
        cb = _CODEBOOKS[cfg.term_bits] = _Codebook(cfg)
    return cb


def dpot_codebook(cfg: DeltaPotConfig) -> np.ndarray:
    """All distinct decodable magnitudes (pre-scale), sorted ascending."""
    return _codebook(cfg).magnitudes.copy()


def _nearest_level(cb: _Codebook, mags: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook magnitude; ties go to the smaller level."""
    levels = cb.magnitudes
    idx = np.searchsorted(levels, mags)
    idx = np.clip(idx, 1, len(levels) - 1)
    lo, hi = levels[idx - 1], levels[idx]
    pick_hi = (hi - mags) < (mags - lo)  # strict: equal distance keeps lo
    return np.where(pick_hi, idx, idx - 1)


def dpot_encode(w: float, cfg: DeltaPotConfig, scale: TensorScale) -> DeltaPotCode:
    """Nearest-level encoder. Ties break toward the smaller magnitude."""
    cb = _codebook(cfg)
    mag = abs(w) / (2.0 * scale.gamma)
    i = int(_nearest_level(cb, np.array([mag]))[0])
    sign = -1 if (w < 0 and cb.magnitudes[i] > 0) else 1
    return DeltaPotCode(sign, cb.deltas[i])


def encode_tensor(w: np.ndarray, cfg: DeltaPotConfig, scale: TensorScale):
    """Vectorized encode of a tensor into (sign, delta-fields) arrays."""
    w = np.asarray(w, dtype=np.float64)
    cb = _codebook(cfg)
    idx = _nearest_level(cb, np.abs(w) / (2.0 * scale.gamma))
    deltas_lut = np.array(cb.deltas, dtype=np.uint8)
    signs = np.where((w < 0) & (cb.magnitudes[idx] > 0), -1, 1).astype(np.int8)
    return signs, deltas_lut[idx]


def decode_tensor(signs: np.ndarray, deltas: np.ndarray, cfg: DeltaPotConfig,
                  scale: TensorScale) -> np.ndarray:
    shifts = shifts_tensor(deltas, cfg)
    mags = np.where(shifts == _INACTIVE, 0.0, np.exp2(-shifts.astype(np.float64)))
    return 2.0 * scale.gamma * signs * mags.sum(axis=-1)


def shifts_tensor(deltas: np.ndarray, cfg: DeltaPotConfig) -> np.ndarray:
    """Cumulative shifts per term with the inactive sentinel applied."""
    deltas = np.asarray(deltas, dtype=np.int64)
    alive = np.ones(deltas.shape[:-1], dtype=bool)
    q = np.zeros(deltas.shape[:-1], dtype=np.int64)
    out = np.full(deltas.shape, _INACTIVE, dtype=np.uint8)
    for t in range(cfg.n_terms):
        d = deltas[..., t]
        alive = alive & (d > 0)
        q = q + np.where(alive, d, 0)
        out[..., t] = np.where(alive, q, _INACTIVE)
    return out


@dataclass
class QMatrix:
    """Δ-PoT-quantized matrix in row-major layout plus its tensor scale."""

    rows: int
    cols: int
    signs: np.ndarray       # int8 (rows, cols), +1 / -1
    deltas: np.ndarray      # uint8 (rows, cols, n_terms)
    scale: TensorScale
    config: DeltaPotConfig
    shifts: np.ndarray = field(init=False)  # uint8, cumulative, 255 = inactive

    def __post_init__(self):
        if self.signs.shape != (self.rows, self.cols):
            raise ValueError("sign array shape mismatch")
        if self.deltas.shape != (self.rows, self.cols, self.config.n_terms):
            raise ValueError("delta array shape mismatch")
        self.shifts = shifts_tensor(self.deltas, self.config)

    @classmethod
    def from_real(cls, w: np.ndarray, cfg: DeltaPotConfig, scale: TensorScale) -> "QMatrix":
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("expected a 2-D weight array")
        signs, deltas = encode_tensor(w, cfg, scale)
        return cls(w.shape[0], w.shape[1], signs, deltas, scale, cfg)

    def code_at(self, r: int, c: int) -> DeltaPotCode:
        return DeltaPotCode(int(self.signs[r, c]), tuple(self.deltas[r, c]))

    def to_real(self) -> np.ndarray:
        return decode_tensor(self.signs, self.deltas, self.config, self.scale)


@dataclass
class QVector:
    """Δ-PoT-quantized vector (element-wise multiply weights)."""

    signs: np.ndarray
    deltas: np.ndarray
    scale: TensorScale
    config: DeltaPotConfig
    shifts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.shifts = shifts_tensor(self.deltas, self.config)

    def __len__(self) -> int:
        return self.signs.shape[0]

    @classmethod
    def from_real(cls, w: np.ndarray, cfg: DeltaPotConfig, scale: TensorScale) -> "QVector":
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("expected a 1-D weight array")
        signs, deltas = encode_tensor(w, cfg, scale)
        return cls(signs, deltas, scale, cfg)

    def to_real(self) -> np.ndarray:
        return decode_tensor(self.signs, self.deltas, self.config, self.scale)


def encode_vector(w: np.ndarray, cfg: DeltaPotConfig, scale: TensorScale) -> QVector:
    return QVector.from_real(w, cfg, scale)


@dataclass
class U9Vector:
    """9-bit uniform symmetric codes (-255..255) with a per-tensor scale."""

    codes: np.ndarray
    scale: TensorScale

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.max(initial=0) > 255 or codes.min(initial=0) < -255:
            raise ValueError("codes out of the 9-bit symmetric range")
        self.codes = codes

    def to_real(self) -> np.ndarray:
        return self.codes * self.scale.gamma

    def __len__(self) -> int:
        return self.codes.shape[0]


def quantize_uniform9(x: np.ndarray, pot_scale: bool = False) -> U9Vector:
    """Uniform symmetric 9-bit quantizer: ``scale = max|x| / 255``.

    With ``pot_scale`` the scale is rounded up to the next power of two so
    downstream rescaling stays shift-only; codes still fit in -255..255.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    top = float(np.max(np.abs(x)))
    if top == 0.0:
        scale = TensorScale.pot(0) if pot_scale else TensorScale(1.0)
        return U9Vector(np.zeros(x.shape, dtype=np.int64), scale)
    if pot_scale:
        exp = math.ceil(math.log2(top / 255.0))
        scale = TensorScale.pot(exp)
    else:
        scale = TensorScale(top / 255.0)
    codes = np.clip(np.rint(x / scale.gamma).astype(np.int64), -255, 255)
    return U9Vector(codes, scale)


# ---------------------------------------------------------------------------
# Comparison baselines (fake quantization: quantize then dequantize).
# ---------------------------------------------------------------------------

def _levels_rtn(x, bits):
    n = (1 << (bits - 1)) - 1
    top = float(np.max(np.abs(x)))
    scale = top / n if top > 0 else 1.0
    q = np.clip(np.rint(x / scale), -n, n)
    return q.astype(np.int64), q * scale


def _pot_exponents(bits):
    # 1 sign bit + (bits-1)-bit field: value 0 encodes zero, the rest map to
    # exponents 0, -1, ..., -(2**(bits-1) - 2) relative to the top level.
    return np.arange(0, -((1 << (bits - 1)) - 1), -1, dtype=np.float64)


def _levels_pot(x, bits):
    top = float(np.max(np.abs(x)))
    scale = top if top > 0 else 1.0
    levels = np.concatenate(([0.0], np.exp2(_pot_exponents(bits)))) * scale
    levels = np.unique(levels)
    idx = _nearest_sorted(levels, np.abs(x))
    deq = np.sign(x) * levels[idx]
    return idx, deq


def _levels_logq(x, bits):
    top = float(np.max(np.abs(x)))
    scale = top if top > 0 else 1.0
    exps = _pot_exponents(bits)
    e_min = exps.min()
    mag = np.abs(x) / scale
    with np.errstate(divide="ignore"):
        e = np.rint(np.log2(np.where(mag > 0, mag, 1.0)))
    e = np.clip(e, e_min, 0.0)
    deq = np.where(mag >= 2.0 ** (e_min - 1), np.exp2(e), 0.0)  # deadzone below half the smallest level
    deq = np.sign(x) * deq * scale
    return e.astype(np.int64), deq


def apot_codebook(bits: int, k: int) -> np.ndarray:
    """Level magnitudes of additive-PoT with n = bits/k equal-width terms."""
    if bits % k != 0:
        raise ValueError("bits must be divisible by k")
    n = bits // k
    levels = np.array([0.0])
    for i in range(n):
        terms = [0.0] + [2.0 ** -(i + j * n) for j in range((1 << k) - 1)]
        levels = (levels[:, None] + np.array(terms)[None, :]).ravel()
    return np.unique(levels)


def _levels_apot(x, bits, k):
    levels = apot_codebook(bits, k)
    top = float(np.max(np.abs(x)))
    gamma = top / levels.max() if top > 0 else 1.0
    scaled = levels * gamma
    idx = _nearest_sorted(scaled, np.abs(x))
    deq = np.sign(x) * scaled[idx]
    return idx, deq


def _nearest_sorted(levels: np.ndarray, mags: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(levels, mags)
    idx = np.clip(idx, 1, len(levels) - 1)
    lo, hi = levels[idx - 1], levels[idx]
    return np.where((hi - mags) < (mags - lo), idx, idx - 1)


def quantize_baseline(x: np.ndarray, scheme: str, bits: int, apot_k: int = 2):
    """Fake-quantize ``x`` under a named scheme; returns (codes, dequantized).

    Schemes: RTN (uniform symmetric), PoT (single power of two), LogQ
    (log-domain rounding with a zero deadzone), APoT (additive PoT with
    equal term widths ``apot_k``).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    if not (2 <= bits <= 9):
        raise ValueError("bits must be in [2, 9]")
    s = scheme.lower()
    if s == "rtn":
        return _levels_rtn(x, bits)
    if s == "pot":
        return _levels_pot(x, bits)
    if s == "logq":
        return _levels_logq(x, bits)
    if s == "apot":
        return _levels_apot(x, bits, apot_k)
    raise ValueError(f"unsupported scheme {scheme!r}")


def dpot_fake_quantize(x: np.ndarray, cfg: DeltaPotConfig,
                       scale: TensorScale | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if scale is None:
        scale = calibrate_gamma(x, cfg)
    signs, deltas = encode_tensor(x, cfg, scale)
    return decode_tensor(signs, deltas, cfg, scale)


# ---------------------------------------------------------------------------
# Scale calibration.
# ---------------------------------------------------------------------------

def calibrate_gamma(w: np.ndarray, cfg: DeltaPotConfig, mode: str = "max",
                    pot: bool = False, grid_points: int = 33) -> TensorScale:
    """Choose gamma for a tensor.

    ``max``  : the top codebook level lands on max|w| (all-zero tensors get 1).
    ``grid`` : sweep a multiplicative grid around the max-match point and keep
               the gamma with the lowest squared reconstruction error; the
               grid always contains the max-match point itself.
    ``pot``  : round the chosen gamma to the nearest power of two.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty tensor")
    top = float(np.max(np.abs(w)))
    m_max = float(_codebook(cfg).magnitudes[-1])
    if top == 0.0:
        return TensorScale.pot(0) if pot else TensorScale(1.0)
    g_max = top / (2.0 * m_max)
    if mode == "max":
        gamma = g_max
    elif mode == "grid":
        best, gamma = None, g_max
        candidates = [g_max] + [g_max * f for f in np.linspace(0.5, 1.25, grid_points)]
        for g in candidates:
            deq = dpot_fake_quantize(w, cfg, TensorScale(g))
            mse = float(np.mean((deq - w) ** 2))
            if best is None or mse < best - 1e-18:
                best, gamma = mse, g
    else:
        raise ValueError(f"unknown calibration mode {mode!r}")
    if pot:
        return TensorScale.pot(round(math.log2(gamma)))
    return TensorScale(gamma)
