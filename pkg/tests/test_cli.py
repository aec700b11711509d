"""Operator CLI: subcommand behavior, exit codes, determinism, golden decode."""

import json
import subprocess
import sys

import numpy as np
import pytest

from hfrwkv import cli, interchange
from hfrwkv.engine import build_random_model

GOLDEN_SEED = 42


@pytest.fixture(scope="module")
def model_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    fm = build_random_model(2, 32, vocab=64, seed=GOLDEN_SEED)
    ic = root / "float_model"
    interchange.write_interchange(fm, ic)
    container = root / "model.hfrw"
    rc = cli.main(["quantize", "--input", str(ic), "--out", str(container)])
    assert rc == 0
    return ic, container


def run_cli(args):
    return subprocess.run([sys.executable, "-m", "hfrwkv.cli", *args],
                          capture_output=True, text=True)


def test_quantize_reports_error_table(model_files, capsys):
    ic, container = model_files
    rc = cli.main(["quantize", "--input", str(ic), "--out",
                   str(container.parent / "again.hfrw"), "--compare"])
    out = capsys.readouterr().out.strip().splitlines()
    assert rc == 0
    rows = [json.loads(l) for l in out]
    tensor_rows = [r for r in rows if "tensor" in r]
    assert tensor_rows
    for r in tensor_rows:
        assert {"dpot_mse", "rtn_mse", "pot_mse", "logq_mse"} <= set(r)
        assert r["dpot_mse"] >= 0


def test_quantize_idempotent_fixed_point(model_files, tmp_path):
    """Re-quantizing a dequantized model changes no code."""
    from hfrwkv import modelio
    from hfrwkv.engine import FloatModel, quantize_model
    _, container = model_files
    qm = modelio.load_model(container.read_bytes())
    # dequantize every tensor back to floats, rebuild, re-quantize
    tensors = {}
    tensors["emb.weight"] = qm.emb_raw * 2.0 ** (qm.emb_se - 8)
    ln_map = {"ln_pre": qm.ln_pre, "ln_out": qm.ln_out}
    for i, blk in enumerate(qm.blocks):
        ln_map[f"blocks.{i}.ln1"] = blk.ln1
        ln_map[f"blocks.{i}.ln2"] = blk.ln2
        a, f = f"blocks.{i}.att", f"blocks.{i}.ffn"
        tensors[f"{a}.receptance"] = blk.w_r.to_real()
        tensors[f"{a}.key"] = blk.w_k.to_real()
        tensors[f"{a}.value"] = blk.w_v.to_real()
        tensors[f"{a}.output"] = blk.w_o.to_real()
        for nm, qv in (("mu_r", blk.mu_r), ("cmu_r", blk.cmu_r),
                       ("mu_k", blk.mu_k), ("cmu_k", blk.cmu_k),
                       ("mu_v", blk.mu_v), ("cmu_v", blk.cmu_v)):
            tensors[f"{a}.{nm}"] = qv.to_real()
        tensors[f"{a}.decay"] = blk.decay.to_real()
        tensors[f"{a}.bonus"] = blk.bonus.to_real()
        for nm, qv in (("mu_r", blk.f_mu_r), ("cmu_r", blk.f_cmu_r),
                       ("mu_k", blk.f_mu_k), ("cmu_k", blk.f_cmu_k)):
            tensors[f"{f}.{nm}"] = qv.to_real()
        tensors[f"{f}.receptance"] = blk.f_w_r.to_real()
        tensors[f"{f}.key"] = blk.f_w_k.to_real()
        tensors[f"{f}.value"] = blk.f_w_v.to_real()
    for prefix, cfg in ln_map.items():
        tensors[f"{prefix}.gain"] = cfg.gain.to_real()
        tensors[f"{prefix}.bias"] = cfg.bias.to_real()
    tensors["head.weight"] = qm.head.to_real()
    fm2 = FloatModel(qm.n_layers, qm.hidden, qm.ffn, qm.vocab, tensors)
    qm2 = quantize_model(fm2, qm.dpot)
    for b1, b2 in zip(qm.blocks, qm2.blocks):
        assert np.array_equal(b1.w_r.deltas, b2.w_r.deltas)
        assert np.array_equal(b1.w_r.signs, b2.w_r.signs)
        assert b1.w_r.scale == b2.w_r.scale
        assert np.array_equal(b1.mu_k.deltas, b2.mu_k.deltas)
    assert np.array_equal(qm.head.deltas, qm2.head.deltas)


# regression lock: recorded once from the fixed seed-42 fixture
GOLDEN_TOKEN = 18


def test_infer_golden_token(model_files, capsys):
    _, container = model_files
    rc = cli.main(["infer", "--model", str(container), "--prompt", "3",
                   "--tokens", "1"])
    out = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    assert out[0]["token"] == GOLDEN_TOKEN
    assert out[0]["cycles"] > 0


def test_infer_deterministic_bytes(model_files):
    _, container = model_files
    args = ["infer", "--model", str(container), "--prompt", "3,9,20",
            "--tokens", "4"]
    a = run_cli(args)
    b = run_cli(args)
    assert a.returncode == 0
    assert a.stdout == b.stdout


def test_infer_cycles_match_report_stream(model_files, tmp_path, capsys):
    _, container = model_files
    report = tmp_path / "cycles.jsonl"
    rc = cli.main(["infer", "--model", str(container), "--prompt", "5",
                   "--tokens", "2", "--out", str(report)])
    out = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    stream = [json.loads(l) for l in report.read_text().splitlines()]
    assert all(set(r) == {"op", "l", "d", "cycles"} for r in stream)
    total_stream = sum(r["cycles"] for r in stream)
    per_token = [r["cycles"] for r in out if "token" in r]
    # stream = one prompt pass + the generated passes; per-token latency is
    # dimension-driven and therefore uniform, so the split is exact
    assert len(per_token) == 2
    assert per_token[0] == per_token[1]
    assert total_stream == sum(per_token) + per_token[0]


def test_infer_vocab_overflow(model_files):
    _, container = model_files
    r = run_cli(["infer", "--model", str(container), "--prompt", "9999",
                 "--tokens", "1"])
    assert r.returncode != 0


def test_score_produces_finite_ppl(model_files, capsys):
    _, container = model_files
    rc = cli.main(["score", "--model", str(container), "--prompt", "3,9,20,7"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    assert np.isfinite(rows[-1]["ppl"]) and rows[-1]["tokens"] == 3


def test_score_float_engine(model_files, capsys):
    ic, _ = model_files
    rc = cli.main(["score", "--float-input", str(ic), "--prompt", "3,9,20"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    assert np.isfinite(rows[-1]["ppl"])


def test_units_bounded_sweeps_pass(capsys):
    rc = cli.main(["units", "--sweep", "lod,exp,sigmoid"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    assert all(r["pass"] for r in rows)
    assert {r["unit"] for r in rows} == {"lod", "exp", "sigmoid"}


def test_units_divider_bound_is_violated_by_construction(capsys):
    # the 16x16 table cannot reach the 3.5% target (see the divider notes);
    # the subcommand reports the honest number and signals failure
    rc = cli.main(["units", "--sweep", "divu", "--bits", "8"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 1
    assert rows[0]["unit"] == "divu"
    assert rows[0]["diagonal_exact"] is True
    assert 0.05 < rows[0]["max_rel_err"] < 0.07


def test_cycles_table(capsys):
    rc = cli.main(["cycles", "--l", "768,4096"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    mv = {(r["l"], r["d"]): r["cycles"] for r in rows if r["op"] == "mv_mul"}
    assert mv[(768, 384)] == 1544
    at = {(r["l"], r["d"]): r["cycles"] for r in rows if r["op"] == "atac_sum"}
    assert at[(4096, 512)] == 17
    ew = {(r["l"], r["d"]): r["cycles"] for r in rows if r["op"] == "ew_mul"}
    assert ew[(768, 384)] == 2 + 4


def test_cycles_single_pass_when_lanes_match(capsys):
    rc = cli.main(["cycles", "--l", "512", "--lanes", "512"])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    mv = [r for r in rows if r["op"] == "mv_mul" and r["d"] == 512]
    assert any(r["cycles"] == 512 + 4 for r in mv)


def test_validate_prints_directory(model_files, capsys):
    _, container = model_files
    rc = cli.main(["validate", "--model", str(container)])
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert rc == 0
    assert rows[0]["magic"] == "HFRW"
    assert any(r.get("name") == "head.weight" for r in rows[1:])


def test_validate_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.hfrw"
    bad.write_bytes(b"NOPE" + b"\x00" * 64)
    rc = cli.main(["validate", "--model", str(bad)])
    assert rc == 1
    assert "BadMagicError" in capsys.readouterr().out


def test_codebook_dump_sorted(capsys):
    rc = cli.main(["codebook", "--config", "2,2"])
    lines = capsys.readouterr().out.strip().splitlines()
    vals = [float(l) for l in lines]
    assert rc == 0
    assert vals == sorted(vals)
    assert 1.25 in vals  # 2 * (2^-1 + 2^-3) at unit scale
    assert 0.0 in vals


def test_interchange_roundtrip(tmp_path):
    fm = build_random_model(1, 16, vocab=8, seed=5)
    interchange.write_interchange(fm, tmp_path / "m")
    back = interchange.read_interchange(tmp_path / "m")
    assert back.n_layers == 1 and back.vocab == 8
    for name, arr in fm.tensors.items():
        assert np.allclose(back.tensors[name], arr, atol=1e-6)


def test_interchange_missing_tensor(tmp_path):
    fm = build_random_model(1, 16, vocab=8, seed=5)
    interchange.write_interchange(fm, tmp_path / "m")
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    del manifest["tensors"]["head.weight"]
    (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(interchange.InterchangeError):
        interchange.read_interchange(tmp_path / "m")
