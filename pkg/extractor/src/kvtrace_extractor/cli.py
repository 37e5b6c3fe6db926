"""`extract` command line: dump a model's K/Q/V streams to a KVTR file."""

import argparse
import sys
from pathlib import Path

from .capture import ConfigError, ExtractionSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Dump per-layer, per-head key/query/value tensors from a "
        "pretrained decoder model into the KVTR trace format",
    )
    parser.add_argument("--model", required=True, help="model id or local path")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--prompt-file", help="file whose text is the prompt")
    source.add_argument("--prompt", help="inline prompt text")
    parser.add_argument("--out", required=True, help="output .kvtr path")
    parser.add_argument("--max-tokens", type=int, default=None)
    parser.add_argument("--layers", help="comma-separated layer indices to keep")
    parser.add_argument("--kv-heads", dest="kv_heads",
                        help="comma-separated kv head indices to keep")
    return parser


def _indices(text):
    if text is None:
        return None
    return tuple(int(x) for x in text.split(",") if x.strip())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    prompt = args.prompt if args.prompt is not None else Path(args.prompt_file).read_text()
    spec = ExtractionSpec(
        model=args.model,
        prompt=prompt,
        out_path=args.out,
        max_tokens=args.max_tokens,
        layers=_indices(args.layers),
        kv_heads=_indices(args.kv_heads),
    )
    try:
        path = extract(spec)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {path}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
