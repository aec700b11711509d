"""Weight codecs: Δ-PoT enumeration/encode/decode, 9-bit uniform, baselines."""

import itertools
from fractions import Fraction

import numpy as np
import pytest

from hfrwkv.quant import (DEFAULT_DPOT, DeltaPotCode, DeltaPotConfig, TensorScale,
                          QMatrix, U9Vector, apot_codebook, calibrate_gamma,
                          dpot_codebook, dpot_decode, dpot_encode,
                          dpot_fake_quantize, quantize_baseline, quantize_uniform9)

K22 = DeltaPotConfig((2, 2))


def enum_codebook_oracle(cfg: DeltaPotConfig):
    """Brute-force level set: every delta tuple, decoded by the recurrence."""
    mags = set()
    for deltas in itertools.product(*(range(1 << k) for k in cfg.term_bits)):
        p = Fraction(1)
        total = Fraction(0)
        for d in deltas:
            if d == 0:
                break
            p = p / (1 << d)
            total += p
        mags.add(total)
    return sorted(mags)


def test_decode_paper_worked_example():
    # sign +, deltas [1,2] with 2-bit fields: 2 * (2^-1 + 2^-3) = 1.25
    code = DeltaPotCode(1, (1, 2))
    assert dpot_decode(code, K22, TensorScale(1.0)) == 1.25


def test_decode_zero_absorbs_tail():
    assert dpot_decode(DeltaPotCode(1, (0, 3)), K22, TensorScale(1.0)) == 0.0
    assert dpot_decode(DeltaPotCode(-1, (0, 0)), K22, TensorScale(1.0)) == 0.0
    # a zero in the middle kills later terms too
    cfg3 = DeltaPotConfig((2, 2, 2))
    assert dpot_decode(DeltaPotCode(1, (1, 0, 3)), cfg3, TensorScale(1.0)) == \
        dpot_decode(DeltaPotCode(1, (1, 0, 0)), cfg3, TensorScale(1.0))


def test_decode_matches_enumeration_oracle():
    for cfg in (K22, DEFAULT_DPOT, DeltaPotConfig((1,)), DeltaPotConfig((3, 2))):
        oracle = enum_codebook_oracle(cfg)
        got = dpot_codebook(cfg)
        assert len(got) == len(oracle)
        assert np.allclose(got, [float(m) for m in oracle])


def test_codebook_k1_single_term():
    cb = dpot_codebook(DeltaPotConfig((1,)))
    assert list(cb) == [0.0, 0.5]


def test_codebook_sorted_unique():
    cb = dpot_codebook(DEFAULT_DPOT)
    assert np.all(np.diff(cb) > 0)
    # canonical active codes never alias: count matches the oracle set size
    assert len(cb) == len(enum_codebook_oracle(DEFAULT_DPOT))


def test_paper_separation_dpot_vs_apot():
    # the 4-bit configurations: target gamma * (2^0 + 2^-2) = 1.25 * gamma
    dpot_levels = 2.0 * dpot_codebook(K22)          # includes the 2x scaling
    assert 1.25 in dpot_levels                       # representable exactly
    apot_levels = apot_codebook(4, 2)
    assert 1.25 not in apot_levels
    # APoT's nearest level is 2^0 + 2^-3
    nearest = apot_levels[np.argmin(np.abs(apot_levels - 1.25))]
    assert nearest == 1.0 + 2.0 ** -3


def test_apot_codebook_matches_equation_sets():
    # b=4, k=2: p0 in {0,1,2^-2,2^-4}, p1 in {0,2^-1,2^-3,2^-5}
    p0 = [0.0, 1.0, 2.0 ** -2, 2.0 ** -4]
    p1 = [0.0, 2.0 ** -1, 2.0 ** -3, 2.0 ** -5]
    want = sorted({a + b for a in p0 for b in p1})
    assert np.allclose(apot_codebook(4, 2), want)


def test_encode_exact_level_and_zero():
    c = dpot_encode(1.25, K22, TensorScale(1.0))
    assert c.sign == 1 and c.deltas == (1, 2)
    z = dpot_encode(0.0, K22, TensorScale(1.0))
    assert z.deltas[0] == 0
    assert dpot_decode(z, K22, TensorScale(1.0)) == 0.0


def test_encode_clamps_to_max_level():
    c = dpot_encode(100.0, K22, TensorScale(1.0))
    levels = 2.0 * dpot_codebook(K22)
    assert dpot_decode(c, K22, TensorScale(1.0)) == levels[-1]


def test_encode_nearest_neighbour_oracle():
    rng = np.random.default_rng(0)
    cfg = DEFAULT_DPOT
    scale = TensorScale(0.5)
    levels = 2.0 * scale.gamma * dpot_codebook(cfg)
    signed_levels = np.concatenate([-levels[::-1], levels])
    for w in rng.uniform(-2.0, 2.0, 10000):
        got = dpot_decode(dpot_encode(w, cfg, scale), cfg, scale)
        best = np.min(np.abs(signed_levels - w))
        assert abs(abs(got - w) - best) < 1e-12
        assert got in signed_levels  # codebook closure


def test_encode_tie_breaks_to_smaller_magnitude():
    cfg = DeltaPotConfig((1,))
    scale = TensorScale(1.0)  # levels 0 and 1.0
    c = dpot_encode(0.5, cfg, scale)  # exactly between
    assert dpot_decode(c, cfg, scale) == 0.0


def test_uniform9_basics():
    z = quantize_uniform9(np.zeros(3))
    assert np.array_equal(z.codes, [0, 0, 0]) and z.scale.gamma == 1.0
    e = quantize_uniform9(np.array([-1.0, 1.0]))
    assert np.array_equal(e.codes, [-255, 255])


def test_uniform9_rounding_bound_and_odd():
    rng = np.random.default_rng(2)
    x = rng.normal(size=500)
    q = quantize_uniform9(x)
    assert np.max(np.abs(q.to_real() - x)) <= q.scale.gamma / 2 + 1e-12
    qn = quantize_uniform9(-x)
    assert np.array_equal(qn.codes, -q.codes)


def test_uniform9_pot_scale():
    x = np.array([0.3, -0.7, 0.11])
    q = quantize_uniform9(x, pot_scale=True)
    assert q.scale.pot_exp is not None
    assert np.max(np.abs(q.codes)) <= 255
    assert np.max(np.abs(q.to_real() - x)) <= q.scale.gamma / 2 + 1e-12


def test_baseline_pot_on_grid_value_unchanged():
    x = np.array([1.0, 0.5, 0.25, -0.125])
    _, deq = quantize_baseline(x, "pot", 4)
    assert np.allclose(deq, x)


def test_baseline_rtn_rounding_bound():
    rng = np.random.default_rng(3)
    x = rng.normal(size=400)
    _, deq = quantize_baseline(x, "rtn", 9)
    scale = np.max(np.abs(x)) / 255
    assert np.max(np.abs(deq - x)) <= scale / 2 + 1e-12


def test_baseline_apot_paper_example():
    # quantizing gamma*(2^0 + 2^-2) under APoT b=4 k=2 gives gamma*(2^0 + 2^-3)
    x = np.array([1.25, 1.0])  # max sets gamma so top level = 1.5 -> gamma != 1
    levels = apot_codebook(4, 2)
    gamma = 1.25 / levels.max()
    _, deq = quantize_baseline(x, "apot", 4)
    assert np.isclose(deq[0], gamma * (1.0 + 2.0 ** -3)) or np.isclose(
        deq[0], gamma * levels[np.argmin(np.abs(levels * gamma - 1.25))])


def test_baseline_logq_deadzone_and_sign():
    # 4-bit: exponents 0..-6, deadzone below half the smallest level
    x = np.array([0.5, -0.5, 1e-9])
    _, deq = quantize_baseline(x, "logq", 4)
    assert deq[0] > 0 and deq[1] < 0 and deq[2] == 0.0
    assert np.isclose(deq[0], -deq[1])
    # 9-bit keeps tiny magnitudes representable (huge exponent range)
    _, deq9 = quantize_baseline(x, "logq", 9)
    assert deq9[2] != 0.0


def test_baseline_rejects_bad_args():
    with pytest.raises(ValueError):
        quantize_baseline(np.ones(3), "nope", 4)
    with pytest.raises(ValueError):
        quantize_baseline(np.ones(3), "rtn", 1)


def test_calibrate_gamma_k1_single_weight():
    s = calibrate_gamma(np.array([1.0]), DeltaPotConfig((1,)))
    assert np.isclose(s.gamma, 1.0)  # max level 2*gamma*0.5 == 1


def test_calibrate_gamma_symmetric():
    rng = np.random.default_rng(4)
    x = rng.normal(size=100)
    a = calibrate_gamma(x, DEFAULT_DPOT)
    b = calibrate_gamma(np.abs(x), DEFAULT_DPOT)
    assert np.isclose(a.gamma, b.gamma)


def test_calibrate_gamma_zero_tensor():
    assert calibrate_gamma(np.zeros(5), DEFAULT_DPOT).gamma == 1.0


def test_grid_search_never_worse_than_max_match():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        x = rng.normal(scale=rng.uniform(0.1, 3.0), size=32)
        g_max = calibrate_gamma(x, K22, mode="max")
        g_grid = calibrate_gamma(x, K22, mode="grid", grid_points=17)
        mse_max = np.mean((dpot_fake_quantize(x, K22, g_max) - x) ** 2)
        mse_grid = np.mean((dpot_fake_quantize(x, K22, g_grid) - x) ** 2)
        assert mse_grid <= mse_max + 1e-15


def test_qmatrix_roundtrip_and_code_access():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(8, 8))
    scale = calibrate_gamma(w, DEFAULT_DPOT)
    qm = QMatrix.from_real(w, DEFAULT_DPOT, scale)
    deq = qm.to_real()
    levels = 2.0 * scale.gamma * dpot_codebook(DEFAULT_DPOT)
    gaps = np.diff(levels)
    assert np.max(np.abs(deq - w)) <= max(gaps.max(), levels[0]) + 1e-9
    c = qm.code_at(3, 4)
    assert dpot_decode(c, DEFAULT_DPOT, scale) == pytest.approx(deq[3, 4])


def test_u9vector_range_enforced():
    with pytest.raises(ValueError):
        U9Vector(np.array([300]), TensorScale(1.0))
