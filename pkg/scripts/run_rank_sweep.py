"""Sweep the weight decay and report the average inverse stable rank of a
deep ReLU net trained by SGD, one CSV row per lambda."""
import argparse
from pathlib import Path

from wdlab.cli import emit_plotdata
from wdlab.experiments import SWEEP_CSV_FIELDS, SweepConfig, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="sweep_out")
    ap.add_argument("--lambdas", type=float, nargs="+", default=[1e-4, 1e-3, 1e-2, 1e-1])
    ap.add_argument("--epochs", type=int, default=5000)
    ap.add_argument("--label-freq", type=float, default=10.0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        cfg = SweepConfig(lambdas=tuple(args.lambdas), epochs=args.epochs, label_freq=args.label_freq, seed=seed)
        rows = run_sweep(cfg, args.jobs)
        emit_plotdata(rows, out / f"sweep_seed{seed}.csv", SWEEP_CSV_FIELDS)
        for r in rows:
            print(f"seed={seed} lambda={r['lambda']:g} avg_inv_srank={r['avg_inv_stable_rank']:.4f} "
                  f"margin_err={r['margin_error']:.3f}")


if __name__ == "__main__":
    main()
