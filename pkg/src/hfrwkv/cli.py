"""Command-line surface: quantization, inference, unit sweeps, cycle tables.

Subcommands
-----------
quantize   float interchange -> .hfrw container, with per-tensor error stats
infer      greedy decoding from a token-id prompt, per-token cycle totals
score      teacher-forced log-probabilities over a token sequence
units      error sweeps of the function units against exact oracles
cycles     latency tables for the shipped array configurations
validate   parse a container and print its directory
codebook   dump the decoded level set of a weight-code configuration

All machine output is JSON lines (``--pretty`` switches to tables). Exit
status is 1 when a declared error bound is violated or, under ``--strict``,
when any sticky hardware flag fired; argparse uses 2 for usage errors.
``HFRWKV_THREADS`` caps internal parallelism and never changes results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import engine, interchange, modelio
from .mvpa import MvpaConfig, elementwise_cycles, matvec_cycles
from .lnorm import atac_cycles
from .quant import (DEFAULT_DPOT, DeltaPotConfig, calibrate_gamma,
                    dpot_codebook, dpot_fake_quantize, quantize_baseline)
from .units import HwContext, divu_sweep, exp_sweep, lod_sweep, sigmoid_sweep

# Bounds asserted by the units subcommand (shared with the acceptance suite).
DIVU_REL_BOUND = 0.035
EXP_REL_BOUND = 0.035
SIGMOID_ABS_BOUND = 0.02

PAPER_CONFIGS = ((384, 256), (512, 512), (768, 256), (1024, 512))


def _emit(obj, pretty: bool):
    if pretty:
        print("  ".join(f"{k}={v}" for k, v in obj.items()))
    else:
        print(json.dumps(obj, sort_keys=True))


def _parse_tokens(args) -> list[int]:
    if args.prompt_file:
        text = Path(args.prompt_file).read_text()
    else:
        text = args.prompt
    if text is None:
        raise SystemExit("a --prompt or --prompt-file is required")
    toks = [int(t) for t in text.replace(",", " ").split()]
    if not toks:
        raise SystemExit("empty prompt")
    return toks


def _dpot_cfg(spec: str | None) -> DeltaPotConfig:
    if not spec:
        return DEFAULT_DPOT
    return DeltaPotConfig(tuple(int(k) for k in spec.replace(",", " ").split()))


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    model = interchange.read_interchange(args.input)
    cfg = _dpot_cfg(args.config)
    calib = [int(t) for t in args.calib.replace(",", " ").split()] if args.calib else None
    qm = engine.quantize_model(model, cfg, calib_tokens=calib,
                               mv_cfg=MvpaConfig(lanes=args.lanes),
                               tree_par=args.tree_par)
    blob = modelio.pack_model(qm)
    Path(args.out).write_bytes(blob)

    schemes = ["dpot"] + (["rtn", "pot", "logq"] if args.compare else [])
    for name in sorted(model.tensors):
        if not _is_matrixlike(name):
            continue
        w = model.tensors[name]
        row = {"tensor": name}
        for s in schemes:
            if s == "dpot":
                deq = dpot_fake_quantize(w, cfg, calibrate_gamma(w, cfg, pot=True))
            else:
                _, deq = quantize_baseline(w, s, args.bits)
            row[f"{s}_mse"] = float(np.mean((deq - w) ** 2))
            row[f"{s}_max_abs"] = float(np.max(np.abs(deq - w)))
        _emit(row, args.pretty)
    _emit({"container": args.out, "bytes": len(blob)}, args.pretty)
    return 0


def _is_matrixlike(name: str) -> bool:
    return name.endswith((".receptance", ".key", ".value", ".output", "head.weight"))


# ---------------------------------------------------------------------------
# infer / score
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    qm = modelio.load_model(Path(args.model).read_bytes())
    prompt = _parse_tokens(args)
    if max(prompt) >= qm.vocab or min(prompt) < 0:
        raise SystemExit(f"prompt token out of vocabulary (size {qm.vocab})")
    ctx = HwContext()
    ids, cycles = engine.generate(qm, prompt, args.tokens, ctx)
    for tok, cyc in zip(ids, cycles):
        _emit({"token": tok, "cycles": cyc}, args.pretty)
    if args.out:
        with open(args.out, "w") as fh:
            for r in ctx.reports:
                fh.write(json.dumps(r.to_json_obj(), sort_keys=True) + "\n")
    flags = {"div_by_zero": ctx.div_by_zero, "overflow": ctx.overflow,
             "exp_overflow": ctx.exp_overflow}
    _emit({"total_cycles": sum(cycles), **flags}, args.pretty)
    if args.strict and any(flags.values()):
        return 1
    return 0


def cmd_score(args) -> int:
    toks = _parse_tokens(args)
    if not args.model and not args.float_input:
        raise SystemExit("score needs --model or --float-input")
    if args.model:
        qm = modelio.load_model(Path(args.model).read_bytes())
        states = engine.init_states(qm)
        step = lambda t: engine.forward_token(t, qm, states).values
    else:
        fm = interchange.read_interchange(args.float_input)
        fstates = engine.float_init_states(fm)
        step = lambda t: engine.forward_float_reference(t, fm, fstates)
    total = 0.0
    count = 0
    logits = step(toks[0])
    for pos in range(1, len(toks)):
        z = logits - logits.max()
        logprobs = z - np.log(np.sum(np.exp(z)))
        lp = float(logprobs[toks[pos]])
        row = {"pos": pos, "token": toks[pos], "logprob": lp,
               "argmax": int(np.argmax(logits))}
        if args.logits:
            row["logits"] = [float(v) for v in logits]
        _emit(row, args.pretty)
        total += lp
        count += 1
        logits = step(toks[pos])
    if args.logits:
        _emit({"pos": len(toks), "final": True,
               "logits": [float(v) for v in logits]}, args.pretty)
    _emit({"nll": -total, "tokens": count,
           "ppl": float(np.exp(-total / max(count, 1)))}, args.pretty)
    return 0


# ---------------------------------------------------------------------------
# units / cycles / validate / codebook
# ---------------------------------------------------------------------------

def cmd_units(args) -> int:
    wanted = args.sweep.split(",") if args.sweep else ["lod", "divu", "exp", "sigmoid"]
    failed = False
    if "lod" in wanted:
        r = lod_sweep()
        ok = r["mismatches"] == 0
        _emit({"unit": "lod", **r, "pass": ok}, args.pretty)
        failed |= not ok
    if "divu" in wanted:
        r = divu_sweep(bits=args.bits)
        ok = r["max_rel_err"] <= DIVU_REL_BOUND and r["diagonal_exact"]
        _emit({"unit": "divu", **r, "bound": DIVU_REL_BOUND, "pass": ok}, args.pretty)
        failed |= not ok
    if "exp" in wanted:
        r = exp_sweep()
        ok = r["max_rel_err"] <= EXP_REL_BOUND and r["monotone"] and r["exp0_exact"]
        _emit({"unit": "exp", **r, "bound": EXP_REL_BOUND, "pass": ok}, args.pretty)
        failed |= not ok
    if "sigmoid" in wanted:
        r = sigmoid_sweep()
        ok = (r["max_abs_err"] <= SIGMOID_ABS_BOUND and r["reflection_exact"]
              and r["f0_exact"] and r["f5_exact"] and r["in_range"])
        _emit({"unit": "sigmoid", **r, "bound": SIGMOID_ABS_BOUND, "pass": ok}, args.pretty)
        failed |= not ok
    return 1 if failed else 0


def cmd_cycles(args) -> int:
    rows = []
    dims = [int(v) for v in args.l.replace(",", " ").split()] if args.l else [512, 768, 1024, 4096]
    configs = list(PAPER_CONFIGS)
    if args.lanes or args.tree_par:
        configs.append((args.lanes or 512, args.tree_par or 512))
    for d, p in configs:
        for l in dims:
            rows.append({"op": "mv_mul", "l": l, "d": d,
                         "cycles": matvec_cycles(l, d)})
            rows.append({"op": "ew_mul", "l": l, "d": d,
                         "cycles": elementwise_cycles(l, d)})
            rows.append({"op": "atac_sum", "l": l, "d": p,
                         "cycles": atac_cycles(l, p)})
    for r in rows:
        _emit(r, args.pretty)
    return 0


def cmd_validate(args) -> int:
    try:
        rows = modelio.describe_container(Path(args.model).read_bytes())
    except modelio.ContainerError as e:
        _emit({"error": type(e).__name__, "detail": str(e)}, args.pretty)
        return 1
    for r in rows:
        _emit(r, args.pretty)
    return 0


def cmd_codebook(args) -> int:
    cfg = _dpot_cfg(args.config)
    gamma = args.gamma
    for level in dpot_codebook(cfg):
        print(repr(2.0 * gamma * float(level)))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hfrwkv",
                                 description="Bit-accurate accelerator model tools")
    sub = ap.add_subparsers(dest="cmd", required=True)

    q = sub.add_parser("quantize", help="encode a float interchange model")
    q.add_argument("--input", required=True, help="interchange manifest or directory")
    q.add_argument("--out", required=True, help="output .hfrw path")
    q.add_argument("--config", help="difference-field widths, e.g. '3,3,2'")
    q.add_argument("--calib", help="calibration token ids (default: auto stream)")
    q.add_argument("--compare", action="store_true",
                   help="add RTN/PoT/LogQ error columns")
    q.add_argument("--scheme", default="dpot", choices=["dpot"],
                   help="container weight scheme (comparison schemes are report-only)")
    q.add_argument("--bits", type=int, default=9, help="bit width for baselines")
    q.add_argument("--lanes", type=int, default=512)
    q.add_argument("--tree-par", dest="tree_par", type=int, default=512)
    q.add_argument("--pretty", action="store_true")
    q.set_defaults(fn=cmd_quantize)

    i = sub.add_parser("infer", help="greedy decoding")
    i.add_argument("--model", required=True)
    i.add_argument("--prompt", help="token ids, e.g. '12,7,3'")
    i.add_argument("--prompt-file", dest="prompt_file")
    i.add_argument("--tokens", type=int, default=1)
    i.add_argument("--out", help="write the full cycle-report stream here")
    i.add_argument("--strict", action="store_true",
                   help="exit 1 if any sticky hardware flag fired")
    i.add_argument("--pretty", action="store_true")
    i.set_defaults(fn=cmd_infer)

    s = sub.add_parser("score", help="teacher-forced log-probabilities")
    s.add_argument("--model", help=".hfrw container (quantized engine)")
    s.add_argument("--float-input", dest="float_input",
                   help="interchange manifest (float reference engine)")
    s.add_argument("--prompt", help="token ids")
    s.add_argument("--prompt-file", dest="prompt_file")
    s.add_argument("--logits", action="store_true",
                   help="include the full logits vector per position")
    s.add_argument("--pretty", action="store_true")
    s.set_defaults(fn=cmd_score)

    u = sub.add_parser("units", help="function-unit error sweeps")
    u.add_argument("--sweep", help="comma list of lod,divu,exp,sigmoid")
    u.add_argument("--bits", type=int, default=12, help="divider sweep operand width")
    u.add_argument("--pretty", action="store_true")
    u.set_defaults(fn=cmd_units)

    c = sub.add_parser("cycles", help="latency tables")
    c.add_argument("--l", help="comma list of dimensions")
    c.add_argument("--lanes", type=int)
    c.add_argument("--tree-par", dest="tree_par", type=int)
    c.add_argument("--pretty", action="store_true")
    c.set_defaults(fn=cmd_cycles)

    v = sub.add_parser("validate", help="print a container directory")
    v.add_argument("--model", required=True)
    v.add_argument("--pretty", action="store_true")
    v.set_defaults(fn=cmd_validate)

    b = sub.add_parser("codebook", help="dump decoded levels, one per line")
    b.add_argument("--config", help="difference-field widths, e.g. '3,3,2'")
    b.add_argument("--gamma", type=float, default=1.0)
    b.set_defaults(fn=cmd_codebook)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (modelio.ContainerError, interchange.InterchangeError) as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
