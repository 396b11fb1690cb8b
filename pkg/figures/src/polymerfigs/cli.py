"""polymer-figures RUN_DIR KIND OUT_DIR: batch figure rendering."""

from __future__ import annotations

import argparse
import sys

from .render import FIGURE_KINDS, RenderError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="polymer-figures",
        description="Render publication-style figures from a polymerlab run directory.",
    )
    parser.add_argument("run_dir", help="directory containing the run's CSV artifacts")
    parser.add_argument("kind", choices=list(FIGURE_KINDS) + ["all"])
    parser.add_argument("out_dir", help="where images and data sidecars are written")
    args = parser.parse_args(argv)
    try:
        produced = render(args.run_dir, args.kind, args.out_dir)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in produced:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
