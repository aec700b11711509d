"""Quantized RWKV-4 inference graph and its floating-point reference.

The network is an embedding lookup, a stack of residual blocks (LayerNorm,
time mixing, residual, LayerNorm, channel mixing, residual), a final
LayerNorm and a head projection. Every arithmetic step of the quantized
path routes through the unit models: matrices and interpolation vectors are
Δ-PoT codes on the multiplier lanes, additive weights are 9-bit uniform
codes, nonlinearities go through the exp/sigmoid unit and all divisions
through the table divider.

The recurrent weighted-average state (numerator, denominator) is kept at
the 16-bit internal precision between tokens together with a per-channel
running maximum of the exponent arguments. Shifting every exponent argument
by that maximum keeps all of them non-positive; the shift cancels in the
quotient, so the recurrence is mathematically unchanged (the float reference
validates this against the direct double sum).

``FloatModel`` holds the real-valued tensors; ``quantize_model`` calibrates
per-site power-of-two activation scales on a token stream and encodes all
weights. Both engines are deterministic: identical inputs give bit-identical
outputs regardless of lane counts or the thread cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fxp import (A9, FxFormat, FxVec, FxVal, INT16, Q13_19, shift_round_even,
                  vec_requantize)
from .lnorm import LnConfig, layernorm, shift_round_even_arr
from .mvpa import MvpaConfig, ew_add, ew_mul, mv_mul
from .quant import (DEFAULT_DPOT, DeltaPotConfig, QMatrix, QVector,
                    U9Vector, calibrate_gamma, quantize_uniform9)
from .units import HwContext, UnitLuts, default_luts, divu, exp_sigma

__all__ = [
    "FloatModel",
    "build_random_model",
    "FloatState",
    "float_init_states",
    "forward_float_reference",
    "float_forward_hidden",
    "wkv_direct_reference",
    "TimeMixState",
    "ChannelMixState",
    "BlockWeights",
    "QuantModel",
    "quantize_model",
    "init_states",
    "token_shift",
    "wkv_step",
    "time_mixing",
    "channel_mixing",
    "forward_token",
    "forward_hidden",
    "generate",
]

E_FMT = FxFormat(16, 14)      # exponential factors in (0, 1]
_WKV_FMT = FxFormat(32, 19)   # wide per-channel quotients before requantize
_PP_INIT = -(10 ** 9)         # running-max sentinel, acts as minus infinity


# ---------------------------------------------------------------------------
# Float model container and reference engine.
# ---------------------------------------------------------------------------

MATRIX_KEYS = ("receptance", "key", "value")


@dataclass
class FloatModel:
    """Real-valued tensors in the engine's naming schema."""

    n_layers: int
    hidden: int
    ffn: int
    vocab: int
    tensors: dict
    ln_eps: float = 2.0 ** -10  # converted checkpoints carry their own value

    def t(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def has(self, name: str) -> bool:
        return name in self.tensors

    def required_names(self) -> list[str]:
        names = ["emb.weight", "ln_out.gain", "ln_out.bias", "head.weight"]
        for i in range(self.n_layers):
            a, f = f"blocks.{i}.att", f"blocks.{i}.ffn"
            names += [f"blocks.{i}.ln1.gain", f"blocks.{i}.ln1.bias",
                      f"blocks.{i}.ln2.gain", f"blocks.{i}.ln2.bias",
                      f"{a}.receptance", f"{a}.key", f"{a}.value", f"{a}.output",
                      f"{a}.mu_r", f"{a}.mu_k", f"{a}.mu_v",
                      f"{a}.cmu_r", f"{a}.cmu_k", f"{a}.cmu_v",
                      f"{a}.decay", f"{a}.bonus",
                      f"{f}.receptance", f"{f}.key", f"{f}.value",
                      f"{f}.mu_r", f"{f}.mu_k", f"{f}.cmu_r", f"{f}.cmu_k"]
        return names

    def validate_schema(self) -> None:
        missing = [n for n in self.required_names() if n not in self.tensors]
        if missing:
            raise ValueError(f"missing tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        if np.any(self.t("emb.weight").shape != np.array([self.vocab, self.hidden])):
            raise ValueError("embedding shape mismatch")


def build_random_model(n_layers: int = 2, hidden: int = 64, ffn: int | None = None,
                       vocab: int = 256, seed: int = 0,
                       head_structure: float = 1.0) -> FloatModel:
    """Random model with init-style weight magnitudes, for tests and demos.

    ``head_structure`` blends a random successor permutation into the head so
    next-token distributions are confident, as in trained language models; 0
    gives a fully unstructured head (near-uniform top-2 logit gaps).
    """
    ffn = 4 * hidden if ffn is None else ffn
    rng = np.random.default_rng(seed)
    t = {}
    t["emb.weight"] = rng.normal(0.0, 0.4, (vocab, hidden))
    t["ln_pre.gain"] = rng.uniform(0.8, 1.2, hidden)
    t["ln_pre.bias"] = rng.normal(0.0, 0.05, hidden)
    for i in range(n_layers):
        a, f = f"blocks.{i}.att", f"blocks.{i}.ffn"
        for ln in (f"blocks.{i}.ln1", f"blocks.{i}.ln2"):
            t[f"{ln}.gain"] = rng.uniform(0.8, 1.2, hidden)
            t[f"{ln}.bias"] = rng.normal(0.0, 0.05, hidden)
        for key, shape, std in ((f"{a}.receptance", (hidden, hidden), 0.8),
                                (f"{a}.key", (hidden, hidden), 0.8),
                                (f"{a}.value", (hidden, hidden), 1.0),
                                (f"{a}.output", (hidden, hidden), 0.8),
                                (f"{f}.receptance", (hidden, hidden), 0.8),
                                (f"{f}.key", (ffn, hidden), 0.8),
                                (f"{f}.value", (hidden, ffn), 0.8)):
            t[key] = rng.normal(0.0, std / math.sqrt(shape[1]), shape)
        for mu in ("mu_r", "mu_k", "mu_v"):
            m = rng.uniform(0.15, 0.85, hidden)
            t[f"{a}.{mu}"] = m
            t[f"{a}.c{mu}"] = 1.0 - m
        for mu in ("mu_r", "mu_k"):
            m = rng.uniform(0.15, 0.85, hidden)
            t[f"{f}.{mu}"] = m
            t[f"{f}.c{mu}"] = 1.0 - m
        t[f"{a}.decay"] = rng.uniform(0.7, 2.5, hidden)   # positive magnitudes
        t[f"{a}.bonus"] = rng.normal(0.3, 0.4, hidden)
    t["ln_out.gain"] = rng.uniform(0.8, 1.2, hidden)
    t["ln_out.bias"] = rng.normal(0.0, 0.05, hidden)
    head = rng.normal(0.0, 1.0 / math.sqrt(hidden), (vocab, hidden))
    if head_structure > 0.0:
        emb_n = t["emb.weight"] / np.linalg.norm(t["emb.weight"], axis=1, keepdims=True)
        pred = np.empty(vocab, dtype=np.int64)
        pred[rng.permutation(vocab)] = np.arange(vocab)
        head = head + head_structure * emb_n[pred]
    t["head.weight"] = head
    return FloatModel(n_layers, hidden, ffn, vocab, t)


@dataclass
class FloatState:
    """Reference recurrent state of one block."""

    x_tm: np.ndarray
    x_cm: np.ndarray
    aa: np.ndarray
    bb: np.ndarray
    pp: np.ndarray


def float_init_states(model: FloatModel) -> list[FloatState]:
    h = model.hidden
    return [FloatState(np.zeros(h), np.zeros(h), np.zeros(h), np.zeros(h),
                       np.full(h, -np.inf)) for _ in range(model.n_layers)]


def _ln_f(x, gain, bias, eps=2.0 ** -10):
    mu = x.mean()
    var = np.mean(x * x) - mu * mu
    return (x - mu) / math.sqrt(max(var, 0.0) + eps) * gain + bias


def _sigmoid_f(x):
    return 1.0 / (1.0 + np.exp(-x))


class _Recorder:
    """Tracks per-site activation maxima during calibration runs."""

    def __init__(self):
        self.maxima = {}

    def see(self, site: str, arr) -> None:
        m = float(np.max(np.abs(arr)))
        if m > self.maxima.get(site, 0.0):
            self.maxima[site] = m


def _float_wkv_step(k, v, decay, u, st: FloatState):
    ww = u + k
    p = np.maximum(st.pp, ww)
    e1 = np.exp(st.pp - p)
    e2 = np.exp(ww - p)
    wkv = (e1 * st.aa + e2 * v) / (e1 * st.bb + e2)
    ww2 = st.pp - decay
    p2 = np.maximum(ww2, k)
    e1b = np.exp(ww2 - p2)
    e2b = np.exp(k - p2)
    st.aa = e1b * st.aa + e2b * v
    st.bb = e1b * st.bb + e2b
    st.pp = p2
    return wkv


def float_forward_hidden(token_id: int, model: FloatModel, states: list[FloatState],
                         rec: _Recorder | None = None) -> np.ndarray:
    """Reference block stack up to (and including) the final LayerNorm."""
    if not (0 <= token_id < model.vocab):
        raise ValueError(f"token {token_id} out of vocabulary")
    x = model.t("emb.weight")[token_id].astype(np.float64)
    if rec:
        rec.see("emb", x)
    if model.has("ln_pre.gain"):
        x = _ln_f(x, model.t("ln_pre.gain"), model.t("ln_pre.bias"), model.ln_eps)
    if rec:
        rec.see("res", x)
    for i, st in enumerate(states):
        a, f = f"blocks.{i}.att", f"blocks.{i}.ffn"
        xa = _ln_f(x, model.t(f"blocks.{i}.ln1.gain"), model.t(f"blocks.{i}.ln1.bias"),
                   model.ln_eps)
        r = model.t(f"{a}.receptance") @ (model.t(f"{a}.mu_r") * xa + model.t(f"{a}.cmu_r") * st.x_tm)
        k = model.t(f"{a}.key") @ (model.t(f"{a}.mu_k") * xa + model.t(f"{a}.cmu_k") * st.x_tm)
        v = model.t(f"{a}.value") @ (model.t(f"{a}.mu_v") * xa + model.t(f"{a}.cmu_v") * st.x_tm)
        st.x_tm = xa
        wkv = _float_wkv_step(k, v, model.t(f"{a}.decay"), model.t(f"{a}.bonus"), st)
        att = model.t(f"{a}.output") @ (_sigmoid_f(r) * wkv)
        if rec:
            rec.see(f"b{i}.ln1", xa)
            rec.see(f"b{i}.r", r)
            rec.see(f"b{i}.k", k)
            rec.see(f"b{i}.v", v)
            rec.see(f"b{i}.wkv", wkv)
            rec.see(f"b{i}.num", st.aa)
        x = x + att
        if rec:
            rec.see("res", x)
        xb = _ln_f(x, model.t(f"blocks.{i}.ln2.gain"), model.t(f"blocks.{i}.ln2.bias"),
                   model.ln_eps)
        rp = model.t(f"{f}.receptance") @ (model.t(f"{f}.mu_r") * xb + model.t(f"{f}.cmu_r") * st.x_cm)
        kp = model.t(f"{f}.key") @ (model.t(f"{f}.mu_k") * xb + model.t(f"{f}.cmu_k") * st.x_cm)
        st.x_cm = xb
        hidden = np.maximum(kp, 0.0) ** 2
        ffn_out = _sigmoid_f(rp) * (model.t(f"{f}.value") @ hidden)
        if rec:
            rec.see(f"b{i}.ln2", xb)
            rec.see(f"b{i}.cm_r", rp)
            rec.see(f"b{i}.cm_k", kp)
            rec.see(f"b{i}.hidden", hidden)
        x = x + ffn_out
        if rec:
            rec.see("res", x)
    out = _ln_f(x, model.t("ln_out.gain"), model.t("ln_out.bias"), model.ln_eps)
    if rec:
        rec.see("lnout", out)
    return out


def forward_float_reference(token_id: int, model: FloatModel,
                            states: list[FloatState],
                            rec: _Recorder | None = None) -> np.ndarray:
    hidden = float_forward_hidden(token_id, model, states, rec)
    return model.t("head.weight") @ hidden


def wkv_direct_reference(ks: np.ndarray, vs: np.ndarray, decay: np.ndarray,
                         u: np.ndarray, t: int) -> np.ndarray:
    """Literal double-sum weighted average at step ``t`` (1-indexed)."""
    num = np.exp(u + ks[t - 1]) * vs[t - 1]
    den = np.exp(u + ks[t - 1])
    for i in range(1, t):
        w = np.exp(-(t - 1 - i) * decay + ks[i - 1])
        num = num + w * vs[i - 1]
        den = den + w
    return num / den


# ---------------------------------------------------------------------------
# Quantized model containers.
# ---------------------------------------------------------------------------

@dataclass
class SiteScales:
    """Calibrated power-of-two scale exponents of one block's activations."""

    ln1: int
    r: int
    k: int
    v: int
    wkv: int
    num: int
    ln2: int
    cm_r: int
    cm_k: int
    hidden: int

    def as_list(self) -> list[int]:
        return [self.ln1, self.r, self.k, self.v, self.wkv, self.num,
                self.ln2, self.cm_r, self.cm_k, self.hidden]

    @classmethod
    def from_list(cls, vals) -> "SiteScales":
        return cls(*(int(v) for v in vals))


@dataclass
class BlockWeights:
    """All quantized tensors and scales of one residual block."""

    ln1: LnConfig
    ln2: LnConfig
    mu_r: QVector
    mu_k: QVector
    mu_v: QVector
    cmu_r: QVector
    cmu_k: QVector
    cmu_v: QVector
    w_r: QMatrix
    w_k: QMatrix
    w_v: QMatrix
    w_o: QMatrix
    decay: U9Vector
    bonus: U9Vector
    f_mu_r: QVector
    f_mu_k: QVector
    f_cmu_r: QVector
    f_cmu_k: QVector
    f_w_r: QMatrix
    f_w_k: QMatrix
    f_w_v: QMatrix
    scales: SiteScales


@dataclass
class QuantModel:
    n_layers: int
    hidden: int
    ffn: int
    vocab: int
    dpot: DeltaPotConfig
    emb_raw: np.ndarray          # (vocab, hidden) 9-bit codes
    emb_se: int
    res_se: int
    ln_pre: LnConfig | None
    blocks: list[BlockWeights]
    ln_out: LnConfig
    head: QMatrix
    mv_cfg: MvpaConfig = field(default_factory=MvpaConfig)
    tree_par: int = 512

    def luts(self) -> UnitLuts:
        return default_luts()


@dataclass
class TimeMixState:
    x_prev: FxVec
    num: np.ndarray     # internal-precision raws, scale 2**num_se
    den: np.ndarray     # internal-precision raws, absolute
    max_k: np.ndarray   # running log-domain maximum, internal raws


@dataclass
class ChannelMixState:
    x_prev: FxVec


def init_states(model: QuantModel) -> list[tuple[TimeMixState, ChannelMixState]]:
    out = []
    h = model.hidden
    for blk in model.blocks:
        zeros_ln1 = FxVec(np.zeros(h, dtype=np.int64), blk.ln1.out_fmt, blk.ln1.out_scale_exp)
        zeros_ln2 = FxVec(np.zeros(h, dtype=np.int64), blk.ln2.out_fmt, blk.ln2.out_scale_exp)
        tm = TimeMixState(zeros_ln1, np.zeros(h, dtype=np.int64),
                          np.zeros(h, dtype=np.int64),
                          np.full(h, _PP_INIT, dtype=np.int64))
        out.append((tm, ChannelMixState(zeros_ln2)))
    return out


# ---------------------------------------------------------------------------
# Quantized operators.
# ---------------------------------------------------------------------------

def token_shift(x_t: FxVec, x_prev: FxVec, mu: QVector, w: QMatrix, *,
                mu_c: QVector, out_se: int, mv_cfg: MvpaConfig,
                ctx: HwContext | None = None) -> FxVec:
    """Interpolate current/previous inputs with stored (mu, 1-mu) codes, then
    project: ``W (mu*x_t + (1-mu)*x_prev)``. Both weight vectors share one
    scale so the lane outputs add without a rescale."""
    a, _ = ew_mul(x_t, mu, mv_cfg, ctx)
    b, _ = ew_mul(x_prev, mu_c, mv_cfg, ctx)
    mix, _ = ew_add(a, b, mv_cfg, ctx)
    mix9 = vec_requantize(mix, x_t.fmt, x_t.scale_exp)
    y, _ = mv_mul(w, mix9, mv_cfg, ctx)
    return vec_requantize(y, A9, out_se)


def _u9_to_internal(vec: U9Vector) -> np.ndarray:
    """9-bit codes to internal-precision raws (value = code * 2**pot_exp)."""
    pe = vec.scale.pot_exp
    if pe is None:
        raise ValueError("additive weights need a power-of-two scale")
    shift = INT16.frac_bits + pe
    raw = (vec.codes << shift) if shift >= 0 else shift_round_even_arr(vec.codes, -shift)
    return np.clip(raw, INT16.min_raw, INT16.max_raw)


def _exp_e14(arg_raw: int, luts: UnitLuts, ctx: HwContext | None) -> int:
    """Exponential of a non-positive internal-precision argument, 14-bit frac."""
    wide = exp_sigma(FxVal(int(np.clip(arg_raw, INT16.min_raw, INT16.max_raw)), INT16),
                     "exp", luts, ctx)
    return shift_round_even(wide.raw, Q13_19.frac_bits - E_FMT.frac_bits)


def wkv_step(k_t: FxVec, v_t: FxVec, w: U9Vector, u: U9Vector,
             state: TimeMixState, *, num_se: int, luts: UnitLuts,
             ctx: HwContext | None = None) -> tuple[FxVec, TimeMixState]:
    """One recurrent weighted-average update at internal precision.

    Every exponent argument is shifted by the per-channel running maximum
    before entering the exp unit, so arguments stay non-positive and the
    factors in (0, 1]; the shift cancels between numerator and denominator.
    """
    h = len(k_t)
    frac = INT16.frac_bits
    k16 = vec_requantize(k_t, INT16, 0).raw
    v16 = vec_requantize(v_t, INT16, num_se).raw
    w16 = _u9_to_internal(w)
    u16 = _u9_to_internal(u)
    lo, hi = INT16.min_raw, INT16.max_raw

    wkv_raw = np.empty(h, dtype=np.int64)
    num2 = np.empty(h, dtype=np.int64)
    den2 = np.empty(h, dtype=np.int64)
    pp2 = np.empty(h, dtype=np.int64)
    for c in range(h):
        kk, vv = int(k16[c]), int(v16[c])
        pp = int(state.max_k[c])
        ww = max(lo, min(int(u16[c]) + kk, hi))
        p = max(pp, ww)
        e1 = _exp_e14(pp - p, luts, ctx)
        e2 = _exp_e14(ww - p, luts, ctx)
        na = (e1 * int(state.num[c]) >> E_FMT.frac_bits) + (e2 * vv >> E_FMT.frac_bits)
        nb = (e1 * int(state.den[c]) >> E_FMT.frac_bits) + (e2 >> (E_FMT.frac_bits - frac))
        na = max(lo, min(hi, na))
        nb = max(lo, min(hi, nb))
        q = divu(abs(na), nb, luts.div, ctx)
        wkv_raw[c] = -q.raw if na < 0 else q.raw

        ww2 = max(pp - int(w16[c]), _PP_INIT)
        p2 = max(ww2, kk)
        e1b = _exp_e14(ww2 - p2, luts, ctx)
        e2b = _exp_e14(kk - p2, luts, ctx)
        aa = (e1b * int(state.num[c]) >> E_FMT.frac_bits) + (e2b * vv >> E_FMT.frac_bits)
        bb = (e1b * int(state.den[c]) >> E_FMT.frac_bits) + (e2b >> (E_FMT.frac_bits - frac))
        num2[c] = max(lo, min(hi, aa))
        den2[c] = max(lo, min(hi, bb))
        pp2[c] = p2

    wkv = FxVec(wkv_raw, _WKV_FMT, num_se)
    return wkv, TimeMixState(state.x_prev, num2, den2, pp2)


def _sigmoid_gate(x: FxVec, luts: UnitLuts, ctx: HwContext | None) -> FxVec:
    xi = vec_requantize(x, INT16, 0)
    raw = np.fromiter((exp_sigma(FxVal(int(r), INT16), "sigmoid", luts, ctx).raw
                       for r in xi.raw), dtype=np.int64, count=len(x))
    return FxVec(raw, INT16, 0)


def time_mixing(x: FxVec, blk: BlockWeights, state: TimeMixState, *,
                mv_cfg: MvpaConfig, luts: UnitLuts, res_se: int,
                ctx: HwContext | None = None) -> tuple[FxVec, TimeMixState]:
    s = blk.scales
    r = token_shift(x, state.x_prev, blk.mu_r, blk.w_r, mu_c=blk.cmu_r,
                    out_se=s.r, mv_cfg=mv_cfg, ctx=ctx)
    k = token_shift(x, state.x_prev, blk.mu_k, blk.w_k, mu_c=blk.cmu_k,
                    out_se=s.k, mv_cfg=mv_cfg, ctx=ctx)
    v = token_shift(x, state.x_prev, blk.mu_v, blk.w_v, mu_c=blk.cmu_v,
                    out_se=s.v, mv_cfg=mv_cfg, ctx=ctx)
    state = TimeMixState(x, state.num, state.den, state.max_k)
    wkv, state = wkv_step(k, v, blk.decay, blk.bonus, state,
                          num_se=s.num, luts=luts, ctx=ctx)
    wkv9 = vec_requantize(wkv, A9, s.wkv)
    gate = _sigmoid_gate(r, luts, ctx)
    gated, _ = ew_mul(wkv9, gate, mv_cfg, ctx)
    y, _ = mv_mul(blk.w_o, gated, mv_cfg, ctx)
    return vec_requantize(y, A9, res_se), state


def channel_mixing(x: FxVec, blk: BlockWeights, state: ChannelMixState, *,
                   mv_cfg: MvpaConfig, luts: UnitLuts, res_se: int,
                   ctx: HwContext | None = None) -> tuple[FxVec, ChannelMixState]:
    s = blk.scales
    r = token_shift(x, state.x_prev, blk.f_mu_r, blk.f_w_r, mu_c=blk.f_cmu_r,
                    out_se=s.cm_r, mv_cfg=mv_cfg, ctx=ctx)
    k = token_shift(x, state.x_prev, blk.f_mu_k, blk.f_w_k, mu_c=blk.f_cmu_k,
                    out_se=s.cm_k, mv_cfg=mv_cfg, ctx=ctx)
    # squared ReLU at exact 18-bit product precision, then one requantize
    pos = np.maximum(k.raw, 0)
    sq = FxVec(pos * pos, FxFormat(32, 16), 2 * s.cm_k)
    hidden = vec_requantize(sq, A9, s.hidden)
    v, _ = mv_mul(blk.f_w_v, hidden, mv_cfg, ctx)
    v9 = vec_requantize(v, A9, res_se)
    gate = _sigmoid_gate(r, luts, ctx)
    out, _ = ew_mul(v9, gate, mv_cfg, ctx)
    return out, ChannelMixState(x)


def forward_hidden(token_id: int, model: QuantModel,
                   states: list[tuple[TimeMixState, ChannelMixState]],
                   ctx: HwContext | None = None) -> FxVec:
    """Block stack up to the final LayerNorm; mutates ``states`` in place."""
    if not (0 <= token_id < model.vocab):
        raise ValueError(f"token {token_id} out of vocabulary")
    luts = model.luts()
    mv_cfg = model.mv_cfg
    x = FxVec(model.emb_raw[token_id], A9, model.emb_se)
    if model.ln_pre is not None:
        x = layernorm(x, model.ln_pre, luts.div, ctx)
    else:
        x = vec_requantize(x, A9, model.res_se)
    for i, blk in enumerate(model.blocks):
        tm, cm = states[i]
        xa = layernorm(x, blk.ln1, luts.div, ctx)
        att, tm = time_mixing(xa, blk, tm, mv_cfg=mv_cfg, luts=luts,
                              res_se=model.res_se, ctx=ctx)
        x, _ = ew_add(x, att, mv_cfg, ctx)
        xb = layernorm(x, blk.ln2, luts.div, ctx)
        ffn, cm = channel_mixing(xb, blk, cm, mv_cfg=mv_cfg, luts=luts,
                                 res_se=model.res_se, ctx=ctx)
        x, _ = ew_add(x, ffn, mv_cfg, ctx)
        states[i] = (tm, cm)
    return layernorm(x, model.ln_out, luts.div, ctx)


def forward_token(token_id: int, model: QuantModel,
                  states: list[tuple[TimeMixState, ChannelMixState]],
                  ctx: HwContext | None = None) -> FxVec:
    hidden = forward_hidden(token_id, model, states, ctx)
    logits, _ = mv_mul(model.head, hidden, model.mv_cfg, ctx)
    return logits


def generate(model: QuantModel, prompt: list[int], n_tokens: int,
             ctx: HwContext | None = None):
    """Greedy decoding; returns (generated ids, per-token cycle totals)."""
    states = init_states(model)
    own_ctx = ctx if ctx is not None else HwContext()
    logits = None
    for tok in prompt:
        logits = forward_token(tok, model, states, own_ctx)
    out, cycles = [], []
    for _ in range(n_tokens):
        base = len(own_ctx.reports)
        if logits is None:
            raise ValueError("prompt must contain at least one token")
        nxt = int(np.argmax(logits.raw))
        out.append(nxt)
        logits = forward_token(nxt, model, states, own_ctx)
        cycles.append(sum(r.cycles for r in own_ctx.reports[base:]))
    return out, cycles


# ---------------------------------------------------------------------------
# Calibration and quantization.
# ---------------------------------------------------------------------------

def _se_for(maxima: dict, site: str, margin: int = 0, floor: int = -2) -> int:
    m = maxima.get(site, 0.0)
    if m <= 0.0:
        return floor
    return max(math.ceil(math.log2(m / (255.0 / 256.0))), floor) + margin


def _encode_matrix(w: np.ndarray, cfg: DeltaPotConfig) -> QMatrix:
    return QMatrix.from_real(w, cfg, calibrate_gamma(w, cfg, pot=True))


def _encode_mu_pair(mu: np.ndarray, cmu: np.ndarray, cfg: DeltaPotConfig):
    scale = calibrate_gamma(np.concatenate([mu, cmu]), cfg, pot=True)
    return QVector.from_real(mu, cfg, scale), QVector.from_real(cmu, cfg, scale)


def default_calib_tokens(model: FloatModel, count: int = 48, seed: int = 7) -> list[int]:
    """Deterministic calibration stream: a pseudo-random mix plus a greedy
    rollout from token 0 so recurrent sites see realistic magnitudes."""
    rng = np.random.default_rng(seed)
    toks = [int(v) for v in rng.integers(0, model.vocab, count // 2)]
    states = float_init_states(model)
    cur = 0
    for _ in range(count - len(toks)):
        logits = forward_float_reference(cur, model, states)
        cur = int(np.argmax(logits))
        toks.append(cur)
    return toks


def quantize_model(model: FloatModel, cfg: DeltaPotConfig = DEFAULT_DPOT,
                   calib_tokens: list[int] | None = None,
                   mv_cfg: MvpaConfig | None = None,
                   tree_par: int = 512) -> QuantModel:
    """Calibrate activation scales on a token stream and encode all weights."""
    model.validate_schema()
    if calib_tokens is None:
        calib_tokens = default_calib_tokens(model)
    rec = _Recorder()
    states = float_init_states(model)
    for tok in calib_tokens:
        forward_float_reference(tok, model, states, rec)

    emb_se = _se_for(rec.maxima, "emb")
    res_se = _se_for(rec.maxima, "res", margin=1)
    blocks = []
    for i in range(model.n_layers):
        a, f = f"blocks.{i}.att", f"blocks.{i}.ffn"
        v_se = _se_for(rec.maxima, f"b{i}.v")
        scales = SiteScales(
            ln1=_se_for(rec.maxima, f"b{i}.ln1"),
            r=_se_for(rec.maxima, f"b{i}.r"),
            k=_se_for(rec.maxima, f"b{i}.k"),
            v=v_se,
            wkv=_se_for(rec.maxima, f"b{i}.wkv", margin=1),
            num=max(_se_for(rec.maxima, f"b{i}.num", margin=1), v_se),
            ln2=_se_for(rec.maxima, f"b{i}.ln2"),
            cm_r=_se_for(rec.maxima, f"b{i}.cm_r"),
            cm_k=_se_for(rec.maxima, f"b{i}.cm_k"),
            hidden=_se_for(rec.maxima, f"b{i}.hidden"),
        )
        mu_r, cmu_r = _encode_mu_pair(model.t(f"{a}.mu_r"), model.t(f"{a}.cmu_r"), cfg)
        mu_k, cmu_k = _encode_mu_pair(model.t(f"{a}.mu_k"), model.t(f"{a}.cmu_k"), cfg)
        mu_v, cmu_v = _encode_mu_pair(model.t(f"{a}.mu_v"), model.t(f"{a}.cmu_v"), cfg)
        fmu_r, fcmu_r = _encode_mu_pair(model.t(f"{f}.mu_r"), model.t(f"{f}.cmu_r"), cfg)
        fmu_k, fcmu_k = _encode_mu_pair(model.t(f"{f}.mu_k"), model.t(f"{f}.cmu_k"), cfg)
        blocks.append(BlockWeights(
            ln1=_ln_cfg(model, f"blocks.{i}.ln1", tree_par, scales.ln1),
            ln2=_ln_cfg(model, f"blocks.{i}.ln2", tree_par, scales.ln2),
            mu_r=mu_r, mu_k=mu_k, mu_v=mu_v,
            cmu_r=cmu_r, cmu_k=cmu_k, cmu_v=cmu_v,
            w_r=_encode_matrix(model.t(f"{a}.receptance"), cfg),
            w_k=_encode_matrix(model.t(f"{a}.key"), cfg),
            w_v=_encode_matrix(model.t(f"{a}.value"), cfg),
            w_o=_encode_matrix(model.t(f"{a}.output"), cfg),
            decay=quantize_uniform9(model.t(f"{a}.decay"), pot_scale=True),
            bonus=quantize_uniform9(model.t(f"{a}.bonus"), pot_scale=True),
            f_mu_r=fmu_r, f_mu_k=fmu_k, f_cmu_r=fcmu_r, f_cmu_k=fcmu_k,
            f_w_r=_encode_matrix(model.t(f"{f}.receptance"), cfg),
            f_w_k=_encode_matrix(model.t(f"{f}.key"), cfg),
            f_w_v=_encode_matrix(model.t(f"{f}.value"), cfg),
            scales=scales,
        ))

    emb = model.t("emb.weight")
    emb_raw = np.clip(np.rint(emb * 2.0 ** (A9.frac_bits - emb_se)).astype(np.int64),
                      A9.min_raw, A9.max_raw)
    ln_pre = None
    if model.has("ln_pre.gain"):
        ln_pre = _ln_cfg(model, "ln_pre", tree_par, res_se)
    return QuantModel(
        n_layers=model.n_layers, hidden=model.hidden, ffn=model.ffn,
        vocab=model.vocab, dpot=cfg, emb_raw=emb_raw, emb_se=emb_se,
        res_se=res_se, ln_pre=ln_pre, blocks=blocks,
        ln_out=_ln_cfg(model, "ln_out", tree_par, _se_for(rec.maxima, "lnout")),
        head=_encode_matrix(model.t("head.weight"), cfg),
        mv_cfg=mv_cfg if mv_cfg is not None else MvpaConfig(),
        tree_par=tree_par,
    )


def _ln_cfg(model: FloatModel, prefix: str, tree_par: int, out_se: int) -> LnConfig:
    return LnConfig(
        dim=model.hidden, tree_par=tree_par,
        eps=2.0 ** round(math.log2(model.ln_eps)),  # shift-friendly epsilon
        gain=quantize_uniform9(model.t(f"{prefix}.gain"), pot_scale=True),
        bias=quantize_uniform9(model.t(f"{prefix}.bias"), pot_scale=True),
        out_fmt=A9, out_scale_exp=out_se,
    )
