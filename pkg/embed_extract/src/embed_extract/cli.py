"""CLI: extract --model <id> --data <jsonl> --out <bin> [--max-len N] [--pool first|mean]."""

from __future__ import annotations

import argparse
import json
import sys

from .extract import ExtractConfig, ExtractError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="emit sentence + token embeddings for a dataset JSONL")
    parser.add_argument("--model", required=True,
                        help="model identifier or local checkpoint directory")
    parser.add_argument("--data", required=True, help="dataset JSONL")
    parser.add_argument("--out", required=True, help="output embedding binary")
    parser.add_argument("--max-len", type=int, default=512)
    parser.add_argument("--pool", choices=("first", "mean"), default="first")
    parser.add_argument("--layer", type=int, default=-1,
                        help="hidden-state layer to pool (-1 = last)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--allow-truncate", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExtractConfig(model=args.model, data=args.data, out=args.out,
                        max_len=args.max_len, pool=args.pool, layer=args.layer,
                        device=args.device, batch_size=args.batch_size,
                        allow_truncate=args.allow_truncate)
    try:
        path = extract(cfg)
    except (ExtractError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": {"type": "extract",
                                               "message": str(exc)}}) + "\n")
        return 1
    print(json.dumps({"out": str(path)}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
