#!/usr/bin/env python3
"""End-to-end walk: random model -> calibrated quantization -> container ->
greedy decoding on the bit-accurate engine, with the float reference and the
cycle model alongside."""

import tempfile
from pathlib import Path

import numpy as np

from hfrwkv import engine, modelio
from hfrwkv.units import HwContext

# A small model; the head gets a successor structure so generations are
# confident, as trained language models are.
fm = engine.build_random_model(n_layers=2, hidden=64, vocab=256, seed=7)
print(f"model: {fm.n_layers} layers, hidden {fm.hidden}, vocab {fm.vocab}")

qm = engine.quantize_model(fm)
blob = modelio.pack_model(qm)
path = Path(tempfile.mkdtemp()) / "demo.hfrw"
path.write_bytes(blob)
print(f"container: {len(blob)} bytes -> {path}")

reloaded = modelio.load_model(path.read_bytes())

ctx = HwContext()
prompt = [11, 42, 7]
ids, cycles = engine.generate(reloaded, prompt, 12, ctx)
print(f"\nprompt {prompt} -> greedy continuation {ids}")
print(f"per-token cycles: {cycles}")
print(f"sticky flags: div_by_zero={ctx.div_by_zero} overflow={ctx.overflow} "
      f"exp_overflow={ctx.exp_overflow}")

# float reference on the same forced token stream
fstates = engine.float_init_states(fm)
qstates = engine.init_states(reloaded)
agree = 0
cos = []
for tok in prompt + ids[:-1]:
    ql = engine.forward_token(tok, reloaded, qstates)
    fl = engine.forward_float_reference(tok, fm, fstates)
    qv = ql.values
    cos.append(float(qv @ fl / (np.linalg.norm(qv) * np.linalg.norm(fl))))
    agree += int(np.argmax(qv) == np.argmax(fl))
print(f"\nquantized vs float over {len(cos)} steps: "
      f"cosine min {min(cos):.4f}, argmax agreement {agree}/{len(cos)}")

# what the cycle model says about the shipped configurations
from hfrwkv.lnorm import atac_cycles
from hfrwkv.mvpa import elementwise_cycles, matvec_cycles

print(f"\n{'config':<16} {'matvec(l=768)':>14} {'ew(l=768)':>10} {'sum(d=4096)':>12}")
for d, p in ((384, 256), (512, 512), (768, 256), (1024, 512)):
    print(f"d={d:<5} P={p:<6} {matvec_cycles(768, d):>14} "
          f"{elementwise_cycles(768, d):>10} {atac_cycles(4096, p):>12}")
