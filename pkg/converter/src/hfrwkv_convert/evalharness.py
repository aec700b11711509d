"""Perplexity/accuracy harness driving the accelerator-model CLI.

Every model evaluation is a subprocess call to ``hfrwkv score`` (teacher
forcing); the harness only aggregates. A dataset is a JSON-lines file where
each line carries ``{"tokens": [...]}``. The last-word protocol scores the
log-probability of the final token given the full preceding context and
counts an exact argmax hit, sequence by sequence.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

__all__ = ["cli_command", "run_primary", "run_quantize", "score_sequence",
           "eval_quality", "load_dataset"]


def cli_command() -> list[str]:
    """Locate the accelerator-model CLI (override with HFRWKV_CLI)."""
    override = os.environ.get("HFRWKV_CLI")
    if override:
        return override.split()
    exe = shutil.which("hfrwkv")
    if exe:
        return [exe]
    return [sys.executable, "-m", "hfrwkv.cli"]


def run_primary(args: list[str]) -> subprocess.CompletedProcess:
    proc = subprocess.run(cli_command() + args, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"primary CLI failed ({proc.returncode}): "
                           f"{proc.stderr.strip() or proc.stdout.strip()}")
    return proc


def run_quantize(interchange_dir, out_path, extra: list[str] | None = None) -> Path:
    run_primary(["quantize", "--input", str(interchange_dir),
                 "--out", str(out_path)] + (extra or []))
    return Path(out_path)


def _variant_args(kind: str, path) -> list[str]:
    if kind == "quant":
        return ["--model", str(path)]
    if kind == "float":
        return ["--float-input", str(path)]
    raise ValueError(f"unknown variant kind {kind!r} (use quant|float)")


def score_sequence(kind: str, path, tokens: list[int],
                   logits: bool = False) -> list[dict]:
    """Teacher-forced scoring rows for one token sequence."""
    if len(tokens) < 2:
        raise ValueError("scoring needs at least two tokens")
    args = ["score"] + _variant_args(kind, path) + \
        ["--prompt", ",".join(str(t) for t in tokens)]
    if logits:
        args.append("--logits")
    proc = run_primary(args)
    return [json.loads(line) for line in proc.stdout.strip().splitlines()]


def load_dataset(path) -> list[list[int]]:
    seqs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        toks = [int(t) for t in row["tokens"]]
        if len(toks) < 2:
            raise ValueError("dataset sequences need at least two tokens")
        seqs.append(toks)
    if not seqs:
        raise ValueError(f"dataset {path} is empty")
    return seqs


def eval_quality(variants: dict, dataset_path, protocol: str = "last-word") -> list[dict]:
    """Score every variant on the dataset.

    ``variants`` maps a display name to ``(kind, path)``. The last-word
    protocol aggregates the final-position log-probability of each sequence
    into perplexity and counts final-token argmax hits as accuracy; the
    full protocol averages over all scored positions instead.
    """
    if protocol not in ("last-word", "full"):
        raise ValueError(f"unknown protocol {protocol!r}")
    seqs = load_dataset(dataset_path)
    table = []
    for name, (kind, path) in variants.items():
        nlls, hits, count = [], 0, 0
        for toks in seqs:
            rows = score_sequence(kind, path, toks)
            scored = [r for r in rows if "pos" in r and not r.get("final")]
            if protocol == "last-word":
                scored = scored[-1:]
            for r in scored:
                nlls.append(-r["logprob"])
                hits += int(r["argmax"] == r["token"])
                count += 1
        table.append({"variant": name, "ppl": float(np.exp(np.mean(nlls))),
                      "acc": hits / count, "sequences": len(seqs),
                      "positions": count})
    return table
