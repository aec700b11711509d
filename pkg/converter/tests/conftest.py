"""Shared fixtures: a synthetic checkpoint in the official RWKV-4 layout."""

import math

import numpy as np
import pytest
import torch


def synthetic_state_dict(n_layers=2, hidden=32, vocab=64, seed=0,
                         dtype=torch.float16):
    """Official tensor names and shapes, plausible init-style values."""
    rng = np.random.default_rng(seed)
    t = {}

    def put(name, arr):
        t[name] = torch.tensor(np.asarray(arr, dtype=np.float32), dtype=dtype)

    put("emb.weight", rng.normal(0, 0.4, (vocab, hidden)))
    put("blocks.0.ln0.weight", rng.uniform(0.8, 1.2, hidden))
    put("blocks.0.ln0.bias", rng.normal(0, 0.05, hidden))
    ffn = 4 * hidden
    for i in range(n_layers):
        for ln in (f"blocks.{i}.ln1", f"blocks.{i}.ln2"):
            put(f"{ln}.weight", rng.uniform(0.8, 1.2, hidden))
            put(f"{ln}.bias", rng.normal(0, 0.05, hidden))
        a = f"blocks.{i}.att"
        for lam in ("k", "v", "r"):
            put(f"{a}.time_mix_{lam}", rng.uniform(0.15, 0.85, (1, 1, hidden)))
        put(f"{a}.time_decay", np.log(rng.uniform(0.6, 2.2, hidden)))
        put(f"{a}.time_first", rng.normal(0.3, 0.4, hidden))
        s = 0.8 / math.sqrt(hidden)
        put(f"{a}.receptance.weight", rng.normal(0, s, (hidden, hidden)))
        put(f"{a}.key.weight", rng.normal(0, s, (hidden, hidden)))
        put(f"{a}.value.weight", rng.normal(0, 1.0 / math.sqrt(hidden), (hidden, hidden)))
        put(f"{a}.output.weight", rng.normal(0, s, (hidden, hidden)))
        f = f"blocks.{i}.ffn"
        for lam in ("k", "r"):
            put(f"{f}.time_mix_{lam}", rng.uniform(0.15, 0.85, (1, 1, hidden)))
        put(f"{f}.receptance.weight", rng.normal(0, s, (hidden, hidden)))
        put(f"{f}.key.weight", rng.normal(0, s, (ffn, hidden)))
        put(f"{f}.value.weight", rng.normal(0, s, (hidden, ffn)))
    put("ln_out.weight", rng.uniform(0.8, 1.2, hidden))
    put("ln_out.bias", rng.normal(0, 0.05, hidden))
    put("head.weight", rng.normal(0, 1.0 / math.sqrt(hidden), (vocab, hidden)))
    return t


@pytest.fixture(scope="session")
def ckpt_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "rwkv4_tiny.pth"
    torch.save(synthetic_state_dict(), path)
    return path
