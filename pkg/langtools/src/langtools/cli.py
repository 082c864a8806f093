"""langtools CLI: export-embeddings and plot-metrics."""

from __future__ import annotations

import argparse
import sys

from .catalog import InstructionCatalog
from .export import DEFAULT_ENCODER, EncoderUnavailable, export_embeddings
from .plots import MetricsError, plot_metrics


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langtools", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export-embeddings", help="encode instruction texts into a fixture")
    e.add_argument("--catalog", default=None, help="JSON catalog; defaults to the built-in one")
    e.add_argument("--encoder", default=DEFAULT_ENCODER,
                   help=f"encoder name (default {DEFAULT_ENCODER}; 'hashed-bow' works offline)")
    e.add_argument("--out", required=True)

    m = sub.add_parser("plot-metrics", help="render success-rate curves from metrics CSVs")
    m.add_argument("csv", nargs="+", help="one or more trainer metrics.csv files")
    m.add_argument("--labels", nargs="*", default=None)
    m.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-embeddings":
            catalog = (InstructionCatalog.from_json(args.catalog) if args.catalog
                       else InstructionCatalog.default())
            doc = export_embeddings(catalog, args.encoder, args.out)
            print(f"wrote fixture with {len(doc['entries'])} entries (dim {doc['dim']}) to {args.out}")
        else:
            paths = plot_metrics(args.csv, args.out_dir, args.labels)
            for path in paths:
                print(f"wrote {path}")
        return 0
    except (EncoderUnavailable, MetricsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
