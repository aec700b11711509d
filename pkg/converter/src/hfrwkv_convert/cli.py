"""Converter CLI: checkpoint conversion, baseline fake-quant, evaluation."""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import ConvertError, convert_checkpoint
from .evalharness import eval_quality, run_quantize
from .fakequant import fake_quantize_interchange


def cmd_convert(args) -> int:
    manifest = convert_checkpoint(args.ckpt, args.out)
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def cmd_fakequant(args) -> int:
    manifest = fake_quantize_interchange(args.input, args.out, args.scheme, args.bits)
    print(json.dumps({"manifest": str(manifest), "scheme": args.scheme}))
    return 0


def cmd_quantize(args) -> int:
    out = run_quantize(args.input, args.out)
    print(json.dumps({"container": str(out)}))
    return 0


def cmd_eval(args) -> int:
    variants = {}
    for spec in args.variant:
        name, kind, path = spec.split(":", 2)
        variants[name] = (kind, path)
    for row in eval_quality(variants, args.dataset, args.protocol):
        print(json.dumps(row, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hfrwkv-convert")
    sub = ap.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("convert", help="official checkpoint -> interchange dir")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_convert)

    f = sub.add_parser("fakequant", help="weight-only baseline quantization")
    f.add_argument("--input", required=True, help="interchange directory")
    f.add_argument("--out", required=True)
    f.add_argument("--scheme", required=True, choices=["rtn", "pot", "logq"])
    f.add_argument("--bits", type=int, default=9)
    f.set_defaults(fn=cmd_fakequant)

    q = sub.add_parser("quantize", help="interchange -> container via the primary CLI")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_quantize)

    e = sub.add_parser("eval", help="perplexity/accuracy over a token dataset")
    e.add_argument("--dataset", required=True, help="JSONL with {'tokens': [...]}")
    e.add_argument("--variant", action="append", required=True,
                   help="name:kind:path with kind in {quant, float}")
    e.add_argument("--protocol", default="last-word", choices=["last-word", "full"])
    e.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConvertError, RuntimeError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
