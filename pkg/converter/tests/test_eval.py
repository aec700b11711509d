"""Quality-evaluation harness: smoke corpus end to end, scheme ordering."""

import json

import numpy as np
import pytest

from hfrwkv_convert.checkpoint import convert_checkpoint
from hfrwkv_convert.evalharness import (eval_quality, load_dataset,
                                        run_primary, run_quantize,
                                        score_sequence)
from hfrwkv_convert.fakequant import fake_quantize_interchange


@pytest.fixture(scope="module")
def workspace(ckpt_path, tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    float_dir = root / "float"
    convert_checkpoint(ckpt_path, float_dir)
    container = run_quantize(float_dir, root / "model.hfrw")
    return root, float_dir, container


@pytest.fixture(scope="module")
def smoke_corpus(workspace):
    """Sequences the float model itself considers plausible: greedy rollouts
    from a few seeds, so scoring is meaningful rather than uniform noise."""
    root, float_dir, _ = workspace
    corpus = root / "smoke.jsonl"
    lines = []
    for start in (3, 17, 42):
        proc = run_primary(["infer", "--model", str(root / "model.hfrw"),
                            "--prompt", str(start), "--tokens", "8"])
        toks = [start] + [json.loads(l)["token"]
                          for l in proc.stdout.strip().splitlines()
                          if "token" in json.loads(l)]
        lines.append(json.dumps({"tokens": toks}))
    corpus.write_text("\n".join(lines) + "\n")
    return corpus


def test_smoke_corpus_end_to_end(workspace, smoke_corpus):
    root, float_dir, container = workspace
    table = eval_quality({"fp": ("float", float_dir)}, smoke_corpus)
    assert len(table) == 1
    assert np.isfinite(table[0]["ppl"]) and table[0]["ppl"] > 0
    assert 0.0 <= table[0]["acc"] <= 1.0
    assert table[0]["sequences"] == 3


def test_quantized_container_scores(workspace, smoke_corpus):
    root, float_dir, container = workspace
    table = eval_quality({"dpot": ("quant", container)}, smoke_corpus)
    assert np.isfinite(table[0]["ppl"])


def test_dpot_beats_pot_baseline(workspace, smoke_corpus):
    """Comparative run: the deployed scheme vs the single-term baseline."""
    root, float_dir, container = workspace
    pot_dir = root / "pot9"
    fake_quantize_interchange(float_dir, pot_dir, "pot", 9)
    table = eval_quality({
        "dpot": ("quant", container),
        "pot9": ("float", pot_dir),
    }, smoke_corpus)
    by_name = {r["variant"]: r for r in table}
    assert by_name["dpot"]["ppl"] <= by_name["pot9"]["ppl"]


def test_fakequant_schemes_write_valid_models(workspace, tmp_path):
    root, float_dir, _ = workspace
    for scheme in ("rtn", "logq"):
        out = tmp_path / scheme
        fake_quantize_interchange(float_dir, out, scheme, 9)
        rows = score_sequence("float", out, [3, 17, 42])
        assert any("logprob" in r for r in rows)


def test_full_protocol_scores_every_position(workspace, smoke_corpus):
    root, float_dir, _ = workspace
    last = eval_quality({"fp": ("float", float_dir)}, smoke_corpus, "last-word")
    full = eval_quality({"fp": ("float", float_dir)}, smoke_corpus, "full")
    assert full[0]["positions"] > last[0]["positions"]


def test_dataset_validation(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"tokens": [5]}) + "\n")
    with pytest.raises(ValueError):
        load_dataset(bad)
