"""CLI: kvextract extract --model <id> --prompt-file <path> --t 32
--layers 0,1 --out <path>"""

from __future__ import annotations

import argparse
import json
import sys

from .extract import ExtractSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvextract")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="dump KV cache and weights")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--prompt-file", default=None)
    p.add_argument("--token-ids", default=None,
                   help="comma-separated token ids (skips the tokenizer)")
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--t", type=int, default=32)
    p.add_argument("--layers", default=None,
                   help="comma-separated layer indices, default all")
    p.add_argument("--out", default="dump.aqkv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExtractSpec(
        model=args.model,
        prompt=args.prompt,
        prompt_file=args.prompt_file,
        token_ids=(
            [int(x) for x in args.token_ids.split(",")]
            if args.token_ids else None
        ),
        max_tokens=args.max_tokens,
        t=args.t,
        layers=(
            [int(x) for x in args.layers.split(",")] if args.layers else None
        ),
        out=args.out,
    )
    try:
        path = extract(spec)
    except FileNotFoundError as err:
        print(json.dumps({"error": "input-not-found", "message": str(err)}))
        return 2
    except Exception as err:  # model-load and tokenizer failures included
        print(json.dumps({"error": "extract-error", "message": str(err)}))
        return 2
    print(json.dumps({"written": path}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
