"""Print per-layer norms and stable ranks of a native or safetensors checkpoint.

Example: python3 scripts/audit_checkpoint.py model.safetensors --group attn0 q k v
"""
import argparse
import sys

from wdlab.checkpoint import layer_report, read_checkpoint
from wdlab.errors import ConfigError, FormatError


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("path")
    ap.add_argument("--group", nargs="+", action="append", default=[], metavar=("NAME", "TENSOR"),
                    help="stack the listed tensors along rows and report them as one layer")
    ap.add_argument("--csv", help="also write the report to this CSV file")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    groups = {g[0]: g[1:] for g in args.group}
    try:
        ck = read_checkpoint(args.path)
        rep = layer_report(ck, groups, args.jobs)
    except (FormatError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for w in ck.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{'name':24s} {'shape':>12s} {'fro':>10s} {'spec':>10s} {'srank':>8s}")
    for r in rep.rows:
        print(f"{r.name:24s} {f'{r.rows}x{r.cols}':>12s} {r.fro_norm:10.4g} {r.spec_norm:10.4g} {r.stable_rank:8.3f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rep.to_csv())
    return 0


if __name__ == "__main__":
    sys.exit(main())
