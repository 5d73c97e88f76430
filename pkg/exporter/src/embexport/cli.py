"""Command line entry point: run an export spec."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .encoders import EncoderLoadError
from .export import load_export_spec, run_export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embexport",
        description="Encode an image folder and prompt list into EMBF files",
    )
    parser.add_argument("--spec", required=True, help="export spec (YAML)")
    parser.add_argument("--out", default=None, help="override the spec's output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        spec = load_export_spec(args.spec)
        if args.out is not None:
            spec.out_dir = Path(args.out)
        result = run_export(spec)
    except EncoderLoadError as exc:
        sys.stderr.write(f"encoder error: {exc}\n")
        return 2
    except (ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"export error: {exc}\n")
        return 3
    except OSError as exc:
        sys.stderr.write(f"i/o error: {exc}\n")
        return 4

    sys.stdout.write(
        f"exported {result.test_rows} test rows and {result.shot_rows} shot rows "
        f"for {len(result.class_names)} classes (dim {result.dim}, "
        f"{result.skipped} skipped) to {result.out_dir}\n"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
