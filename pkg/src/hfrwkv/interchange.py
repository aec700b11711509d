"""Float interchange format: a JSON manifest plus raw float32 payload files.

This is the hand-off surface between checkpoint converters and the
quantizer. ``manifest.json`` carries the dimensions and the tensor table;
each tensor lives in its own little-endian float32 file next to the
manifest. Tensor names follow the engine schema (``blocks.{i}.att.mu_r``
and friends, with precomputed ``cmu_*`` complements).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import FloatModel

__all__ = ["write_interchange", "read_interchange", "InterchangeError"]

MANIFEST = "manifest.json"


class InterchangeError(ValueError):
    pass


def write_interchange(model: FloatModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    for name in sorted(model.tensors):
        arr = np.asarray(model.tensors[name], dtype=np.float32)
        fname = name + ".bin"
        (out / fname).write_bytes(arr.astype("<f4").tobytes())
        table[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "version": 1,
        "n_layers": model.n_layers,
        "hidden": model.hidden,
        "ffn": model.ffn,
        "vocab": model.vocab,
        "ln_eps": model.ln_eps,
        "tensors": table,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / MANIFEST


def read_interchange(path) -> FloatModel:
    """Load a manifest (or its directory) and validate the tensor schema."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise InterchangeError(f"no manifest at {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InterchangeError(f"malformed manifest: {e}") from e
    for key in ("n_layers", "hidden", "ffn", "vocab", "tensors"):
        if key not in manifest:
            raise InterchangeError(f"manifest missing {key!r}")
    tensors = {}
    for name, info in manifest["tensors"].items():
        f = p.parent / info["file"]
        if not f.exists():
            raise InterchangeError(f"missing payload file for {name}")
        arr = np.frombuffer(f.read_bytes(), dtype="<f4").astype(np.float64)
        shape = tuple(info["shape"])
        if arr.size != int(np.prod(shape)):
            raise InterchangeError(f"payload size mismatch for {name}")
        tensors[name] = arr.reshape(shape)
    model = FloatModel(int(manifest["n_layers"]), int(manifest["hidden"]),
                       int(manifest["ffn"]), int(manifest["vocab"]), tensors,
                       ln_eps=float(manifest.get("ln_eps", 2.0 ** -10)))
    try:
        model.validate_schema()
    except ValueError as e:
        raise InterchangeError(str(e)) from e
    return model
