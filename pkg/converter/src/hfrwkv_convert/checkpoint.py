"""Official RWKV-4 checkpoint to float-interchange conversion.

The official layout stores, per block, LayerNorm ``weight``/``bias`` pairs,
token-shift interpolation vectors ``time_mix_{r,k,v}`` (often shaped
``(1, 1, C)``), the log-domain decay ``time_decay``, the current-token bonus
``time_first`` and the four projection matrices. Conversion:

* ``blocks.0.ln0`` is folded into the embedding rows, matching the official
  inference preprocessing;
* ``decay = exp(time_decay)`` so the stored value is the positive magnitude
  whose negation exponentiates to the per-step decay factor;
* interpolation complements ``1 - time_mix_*`` are precomputed and stored;
* everything is written as little-endian float32 payloads plus a JSON
  manifest (the quantizer's input format).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"

# schema name -> official checkpoint name, per block ({i} placeholder)
OFFICIAL_TO_SCHEMA = {
    "blocks.{i}.ln1.gain": "blocks.{i}.ln1.weight",
    "blocks.{i}.ln1.bias": "blocks.{i}.ln1.bias",
    "blocks.{i}.ln2.gain": "blocks.{i}.ln2.weight",
    "blocks.{i}.ln2.bias": "blocks.{i}.ln2.bias",
    "blocks.{i}.att.receptance": "blocks.{i}.att.receptance.weight",
    "blocks.{i}.att.key": "blocks.{i}.att.key.weight",
    "blocks.{i}.att.value": "blocks.{i}.att.value.weight",
    "blocks.{i}.att.output": "blocks.{i}.att.output.weight",
    "blocks.{i}.ffn.receptance": "blocks.{i}.ffn.receptance.weight",
    "blocks.{i}.ffn.key": "blocks.{i}.ffn.key.weight",
    "blocks.{i}.ffn.value": "blocks.{i}.ffn.value.weight",
}


class ConvertError(ValueError):
    pass


def _load_state_dict(path) -> dict:
    import torch
    try:
        sd = torch.load(path, map_location="cpu", weights_only=True)
    except TypeError:
        sd = torch.load(path, map_location="cpu")
    return {k: v.float().numpy().astype(np.float64) for k, v in sd.items()}


def _layer_count(sd: dict) -> int:
    n = -1
    for k in sd:
        if k.startswith("blocks."):
            n = max(n, int(k.split(".")[1]))
    if n < 0:
        raise ConvertError("no blocks.* tensors: not an RWKV-4 family checkpoint")
    return n + 1


def _get(sd: dict, name: str) -> np.ndarray:
    if name not in sd:
        raise ConvertError(f"missing tensor {name}")
    return sd[name]


def _mix_vector(sd: dict, name: str, hidden: int) -> np.ndarray:
    v = _get(sd, name).reshape(-1)
    if v.shape != (hidden,):
        raise ConvertError(f"{name} has {v.size} elements, expected {hidden}")
    return v


def _layer_norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def convert_checkpoint(ckpt_path, out_dir) -> Path:
    """Map an official RWKV-4 state dict into the interchange directory."""
    sd = _load_state_dict(ckpt_path)
    emb = _get(sd, "emb.weight")
    if emb.ndim != 2:
        raise ConvertError("emb.weight must be 2-D")
    vocab, hidden = emb.shape
    n_layers = _layer_count(sd)

    tensors = {}
    if "blocks.0.ln0.weight" in sd:
        emb = _layer_norm_rows(emb, _get(sd, "blocks.0.ln0.weight"),
                               _get(sd, "blocks.0.ln0.bias"))
    tensors["emb.weight"] = emb

    ffn = None
    for i in range(n_layers):
        for schema_t, official_t in OFFICIAL_TO_SCHEMA.items():
            tensors[schema_t.format(i=i)] = _get(sd, official_t.format(i=i))
        a = f"blocks.{i}.att"
        for lam in ("r", "k", "v"):
            mu = _mix_vector(sd, f"{a}.time_mix_{lam}", hidden)
            tensors[f"{a}.mu_{lam}"] = mu
            tensors[f"{a}.cmu_{lam}"] = 1.0 - mu
        tensors[f"{a}.decay"] = np.exp(_mix_vector(sd, f"{a}.time_decay", hidden))
        tensors[f"{a}.bonus"] = _mix_vector(sd, f"{a}.time_first", hidden)
        f = f"blocks.{i}.ffn"
        for lam in ("r", "k"):
            mu = _mix_vector(sd, f"{f}.time_mix_{lam}", hidden)
            tensors[f"{f}.mu_{lam}"] = mu
            tensors[f"{f}.cmu_{lam}"] = 1.0 - mu
        fk = tensors[f"{f}.key"]
        if fk.shape[1] != hidden or tensors[f"{f}.value"].shape != (hidden, fk.shape[0]):
            raise ConvertError(f"inconsistent feed-forward shapes in block {i}")
        if ffn is None:
            ffn = fk.shape[0]
        elif ffn != fk.shape[0]:
            raise ConvertError("feed-forward width differs between blocks")
        for m in ("receptance", "key"):
            if tensors[f"{a}.{m}"].shape != (hidden, hidden):
                raise ConvertError(f"{a}.{m} is not {hidden}x{hidden}")

    tensors["ln_out.gain"] = _get(sd, "ln_out.weight")
    tensors["ln_out.bias"] = _get(sd, "ln_out.bias")
    head = _get(sd, "head.weight")
    if head.shape != (vocab, hidden):
        raise ConvertError(f"head.weight shape {head.shape} != {(vocab, hidden)}")
    tensors["head.weight"] = head

    return write_interchange(tensors, n_layers, hidden, int(ffn), vocab, out_dir)


def write_interchange(tensors: dict, n_layers: int, hidden: int, ffn: int,
                      vocab: int, out_dir, ln_eps: float = 1e-5) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        fname = name + ".bin"
        (out / fname).write_bytes(arr.astype("<f4").tobytes())
        table[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"version": 1, "n_layers": n_layers, "hidden": hidden,
                "ffn": ffn, "vocab": vocab, "ln_eps": ln_eps, "tensors": table}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / MANIFEST


def read_interchange_tensors(path) -> tuple[dict, dict]:
    """Read back an interchange directory (manifest dict, tensor dict)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    manifest = json.loads(p.read_text())
    tensors = {}
    for name, info in manifest["tensors"].items():
        raw = (p.parent / info["file"]).read_bytes()
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64) \
            .reshape(info["shape"])
    return manifest, tensors
