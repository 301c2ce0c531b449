"""CLI: extract --backbone <id> --images <dir> --out <file> [--pool cls|mean]"""

from __future__ import annotations

import argparse
import logging
import sys

from embextract import __version__
from embextract.pipeline import ExtractorError, ExtractorSpec, extract
from embextract.registry import available_backbones

_POOL_FLAGS = {"cls": "cls_token", "mean": "mean_pool"}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Embed an image folder with a registered backbone and "
        "write a harness-format embedding file.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--backbone", required=True, help=f"backbone id (available: {available_backbones()})"
    )
    parser.add_argument("--images", required=True, help="directory of images")
    parser.add_argument("--out", required=True, help="output embedding file")
    parser.add_argument("--pool", choices=sorted(_POOL_FLAGS), default="cls", help="probe feature")
    parser.add_argument("--batch", type=int, default=16, help="inference batch size")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = ExtractorSpec(
            backbone_id=args.backbone,
            image_dir=args.images,
            output_path=args.out,
            pooling=_POOL_FLAGS[args.pool],
            batch=args.batch,
        )
        out = extract(spec)
    except (ExtractorError, KeyError, ValueError) as exc:
        print(f"extract failed: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
