"""Command-line entry point: ``wdlab <command> --config cfg.json``.

Exit codes: 0 success, 1 runtime error, 2 invalid config (field path on
stderr), 3 training diverged (last finite checkpoint written to the output dir).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_mod
from . import datagen, experiments
from .diagnostics import stationarity_report
from .errors import ConfigError, DivergenceError, FormatError, InvalidInputError
from .merging import GAP_CSV_FIELDS, cross_task_epsilon
from .model import Activation, Architecture, Dataset, end_to_end_vector
from .optimize import (
    GFConfig,
    TrainConfig,
    Trajectory,
    balanced_rank1_init,
    gd_train,
    gf_integrate,
    init_params,
    layer_sranks,
    polish_to_stationary,
)

COMMANDS = ("train", "polish", "gf", "merge", "rank-sweep", "inspect", "gen-data")
EXIT_CONFIG, EXIT_DIVERGED = 2, 3
log = logging.getLogger("wdlab")


class Run:
    """Output directory plus the provenance written into every artifact."""

    def __init__(self, command: str, out: Path, config_hash: str, seed: int):
        self.command, self.out, self.config_hash, self.seed = command, out, config_hash, seed
        self.artifacts = {}
        out.mkdir(parents=True, exist_ok=True)

    def _register(self, path: Path):
        self.artifacts[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def csv(self, name: str, fields, rows) -> Path:
        path = self.out / name
        emit_plotdata(rows, path, fields)
        self._register(path)
        return path

    def json(self, name: str, doc: dict) -> Path:
        path = self.out / name
        doc = {"config_sha256": self.config_hash, "seed": self.seed, **doc}
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        self._register(path)
        return path

    def checkpoint(self, name: str, ck: ckpt_io.Checkpoint) -> Path:
        path = self.out / name
        ck.meta = {**(ck.meta or {}), "config_sha256": self.config_hash, "seed": self.seed}
        ckpt_io.write_native(path, ck)
        self._register(path)
        self._register(ckpt_io.meta_path(path))
        return path

    def manifest(self):
        doc = {
            "command": self.command,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def emit_plotdata(rows, path, fields) -> None:
    """Write one CSV panel with the given header; raises on empty input."""
    rows = list(rows)
    if not rows:
        raise InvalidInputError(f"nothing to write to {path}")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in rows:
                w.writerow([_fmt(r[f]) for f in fields])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def trajectory_rows(traj: Trajectory, n_layers: int) -> tuple[list, list]:
    fields = ["step_or_time", "L", "L_lambda", "residual", *(f"srank_{k + 1}" for k in range(n_layers))]
    rows = []
    for r in traj.records:
        row = {"step_or_time": r.t, "L": r.L, "L_lambda": r.L_lam, "residual": r.residual}
        sr = r.extras.get("srank") or (layer_sranks(r.state) if r.state is not None and n_layers else [])
        for k in range(n_layers):
            row[f"srank_{k + 1}"] = sr[k]
        rows.append(row)
    return fields, rows


def _arch(doc: dict) -> Architecture:
    a = doc["arch"]
    return Architecture(a["d"], tuple(a.get("widths", ())), Activation(a.get("activation", "relu"), a.get("H", 1)))


def load_data(spec: dict, d: int, seed: int) -> Dataset:
    src = spec["source"]
    if src == "synthetic":
        ts = datagen.TaskSpec(d, spec["n"], tuple(spec.get("subspace", range(d))), spec.get("label_freq", 1.0), seed)
        return datagen.gen_task(ts, "a")
    if src == "clusters":
        return datagen.gen_clusters(d, spec["n"], spec.get("noise", 0.3), seed)
    if src == "csv":
        try:
            arr = np.loadtxt(spec["path"], delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load dataset: {e}", "data.path") from None
        if arr.shape[1] != d + 1:
            raise ConfigError(f"dataset has {arr.shape[1] - 1} coordinates, arch.d is {d}", "data.path")
        return Dataset(arr[:, 1:], arr[:, 0])
    data = datagen.idx_dataset(spec["images"], spec["labels"], spec.get("n", 10), seed, spec.get("offset", 0))
    if data.d != d:
        raise ConfigError(f"images have {data.d} pixels, arch.d is {d}", "arch.d")
    return data


def _train_config(doc: dict, seed: int) -> TrainConfig:
    t = doc["train"]
    return TrainConfig(
        eta=t["eta"],
        lam=t["lam"],
        steps=t["steps"],
        seed=seed,
        checkpoint_every=t.get("checkpoint_every"),
        init=t.get("init", "xavier"),
        init_scale=t.get("init_scale", 1.0),
        batch_size=t.get("batch_size"),
    )


def _train(run: Run, doc: dict):
    arch = _arch(doc)
    data = load_data(doc["data"], arch.d, run.seed)
    tc = _train_config(doc, run.seed)
    p0 = init_params(arch, tc.init, run.seed, tc.init_scale)
    try:
        # overflow is caught and reported as divergence below
        with np.errstate(over="ignore", invalid="ignore"):
            traj = gd_train(p0, arch, data, tc)
    except DivergenceError as e:
        if e.last_checkpoint is not None and e.last_checkpoint.state is not None:
            run.checkpoint("last_finite.nwt", ckpt_io.params_to_checkpoint(e.last_checkpoint.state, arch, step=e.last_checkpoint.t))
        raise
    fields, rows = trajectory_rows(traj, arch.K)
    run.csv("trajectory.csv", fields, rows)
    return arch, data, tc, p0, traj


def cmd_train(run: Run, doc: dict, jobs: int):
    arch, _, tc, _, traj = _train(run, doc)
    run.checkpoint("final.nwt", ckpt_io.params_to_checkpoint(traj.final.state, arch, lam=tc.lam, eta=tc.eta, step=traj.final.t))
    print(f"trained {tc.steps} steps: L={traj.final.L:.6g} L_lambda={traj.final.L_lam:.6g} residual={traj.final.residual:.3e}")


def cmd_polish(run: Run, doc: dict, jobs: int):
    arch, data, tc, p0, traj = _train(run, doc)
    pc = doc["polish"]
    res = polish_to_stationary(traj.final.state, arch, data, tc.lam, pc["tol"], pc.get("max_iter", 500_000))
    rep = stationarity_report(res.params, arch, data, tc.lam, theta0=p0, kink_delta=pc.get("kink_delta", 1e-6))
    rep.meta = {"converged": res.converged, "iterations": res.iterations, "tol": pc["tol"]}
    run.json("report.json", rep.to_dict())
    (run.out / "report.csv").write_text(rep.to_csv())
    run._register(run.out / "report.csv")
    run.checkpoint("polished.nwt", ckpt_io.params_to_checkpoint(res.params, arch, lam=tc.lam, eta=tc.eta))
    status = "converged" if res.converged else "NOT converged"
    print(f"polish {status} after {res.iterations} iterations: residual={res.residual:.3e} pseudo_rank={rep.pseudo_rank:.6g}")


def cmd_gf(run: Run, doc: dict, jobs: int):
    arch = _arch(doc)
    data = load_data(doc["data"], arch.d, run.seed)
    g = doc["gf"]
    cfg = GFConfig(lam=g["lam"], T=g["T"], h=g.get("h", 1e-3), mode=g.get("mode", "per_layer"), record_every=g.get("record_every"))
    p0 = balanced_rank1_init(arch, g.get("init_scale", 0.5), run.seed)
    start = p0 if cfg.mode == "per_layer" else end_to_end_vector(p0, arch)
    traj = gf_integrate(start, arch, data, cfg)
    n_layers = arch.K if cfg.mode == "per_layer" else 0
    fields, rows = trajectory_rows(traj, n_layers)
    run.csv("trajectory.csv", fields, rows)
    K, L0 = arch.K, traj.records[0].L
    inv = []
    for r in traj.records:
        w = r.extras["w"] if cfg.mode == "per_layer" else r.state
        inv.append(
            {
                "t": r.t,
                "integral": r.extras["integral"],
                "integral_bound": math.sqrt((K - 1) * (1 + cfg.lam * K) * L0 * r.t),
                "balancedness": r.extras.get("balancedness", float("nan")),
                "w_norm": float(np.linalg.norm(w)),
            }
        )
    run.csv("invariants.csv", ["t", "integral", "integral_bound", "balancedness", "w_norm"], inv)
    print(f"integrated {cfg.n_steps} RK4 steps ({cfg.mode}); final L={traj.final.L:.6g}")


def cmd_merge(run: Run, doc: dict, jobs: int):
    keys = ("d", "n", "eta", "lam", "steps", "label_freq", "control", "w0_b", "n_heldout", "checkpoint_every")
    kw = {k: doc[k] for k in keys if k in doc}
    # "m" selects the shallow fixed-head model; otherwise every layer of a
    # (default 128, 32) ReLU net is trained and merged
    if "m" in doc:
        widths, fixed = (doc["m"],), True
    else:
        widths, fixed = tuple(doc.get("widths", (128, 32))), False
    cfg = experiments.MergeConfig(seed=run.seed, widths=widths, fixed_head=fixed, **kw)
    res = experiments.run_merge(cfg, jobs)
    run.csv("merge_losses.csv", experiments.MERGE_CSV_FIELDS, res.loss_rows())
    if res.heldout_a is not None:
        run.csv("merge_losses_heldout.csv", experiments.MERGE_CSV_FIELDS, res.loss_rows(heldout=True))
    run.csv("gap_bound_task_a.csv", GAP_CSV_FIELDS, res.gap_rows("a"))
    run.csv("gap_bound_task_b.csv", GAP_CSV_FIELDS, res.gap_rows("b"))
    K = res.arch.K
    sr_fields = ["step", *(f"srank_{w}_{k + 1}" for w in ("model_a", "model_b", "merged") for k in range(K))]
    sr_rows = []
    for i, t in enumerate(res.steps):
        row = {"step": int(t)}
        for w, key in (("model_a", "a"), ("model_b", "b"), ("merged", "merged")):
            for k in range(K):
                row[f"srank_{w}_{k + 1}"] = res.srank[key][i][k]
        sr_rows.append(row)
    run.csv("srank.csv", sr_fields, sr_rows)
    ga, gb = res.final_loss_gaps()
    run.json("summary.json", {"eps": res.pair.eps, "final_loss_gap_a": ga, "final_loss_gap_b": gb, "widths": list(cfg.widths)})
    print(f"merged: eps={res.pair.eps:.3g} final loss gaps a={ga:.3e} b={gb:.3e}")


def cmd_rank_sweep(run: Run, doc: dict, jobs: int):
    keys = ("d", "n", "label_freq", "eta", "epochs", "batch_size", "activation")
    kw = {k: doc[k] for k in keys if k in doc}
    if "widths" in doc:
        kw["widths"] = tuple(doc["widths"])
    if "lambdas" in doc:
        kw["lambdas"] = tuple(doc["lambdas"])
    cfg = experiments.SweepConfig(seed=run.seed, **kw)
    rows = experiments.run_sweep(cfg, jobs)
    run.csv("sweep.csv", experiments.SWEEP_CSV_FIELDS, rows)
    for r in rows:
        print(f"lambda={r['lambda']:g} avg_inv_srank={r['avg_inv_stable_rank']:.4f} err={r['classification_error']:.3f}")


def cmd_inspect(run: Run, doc: dict, jobs: int):
    ck = ckpt_io.read_checkpoint(doc["checkpoint"])
    rep = ckpt_io.layer_report(ck, doc.get("groups"), jobs)
    path = run.out / "layer_report.csv"
    path.write_text(rep.to_csv())
    run._register(path)
    run.json("layer_report.json", {**json.loads(rep.to_json()), "warnings": ck.warnings})
    for w in ck.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(rep.rows)} layers reported, {len(rep.skipped)} non-matrix tensors skipped")


def cmd_gen_data(run: Run, doc: dict, jobs: int):
    d = doc["d"]
    made = {}
    for name, t in doc["tasks"].items():
        spec = datagen.TaskSpec(d, t["n"], tuple(t.get("subspace", range(d))), t.get("label_freq", 1.0), run.seed)
        data = datagen.gen_task(spec, name)
        made[name] = data
        path = run.out / f"task_{name}.csv"
        datagen.write_dataset_csv(data, path)
        run._register(path)
        if t.get("heldout"):
            path = run.out / f"task_{name}_heldout.csv"
            datagen.write_dataset_csv(datagen.held_out(spec, t["heldout"], name), path)
            run._register(path)
    names = list(made)
    eps = {f"{a}|{b}": cross_task_epsilon(made[a].X, made[b].X) for i, a in enumerate(names) for b in names[i + 1 :]}
    run.json("datasets.json", {"tasks": names, "eps": eps})
    print(f"wrote {len(names)} task(s) to {run.out}")


HANDLERS = {
    "train": cmd_train,
    "polish": cmd_polish,
    "gf": cmd_gf,
    "merge": cmd_merge,
    "rank-sweep": cmd_rank_sweep,
    "inspect": cmd_inspect,
    "gen-data": cmd_gen_data,
}


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wdlab", description="Weight decay, low rank and model merging lab.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", help="output directory (WDLAB_OUT takes precedence)")
    ap.add_argument("--seed", type=_u64, help="override the config seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker count for independent sub-runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_out(command: str, flag, doc: dict) -> Path:
    return Path(os.environ.get("WDLAB_OUT") or flag or doc.get("out") or f"wdlab_out/{command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("config error at --jobs: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        doc, digest = config_mod.load(args.command, args.config)
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        run = Run(args.command, resolve_out(args.command, args.out, doc), digest, seed)
        HANDLERS[args.command](run, doc, args.jobs)
        run.manifest()
    except ConfigError as e:
        print(f"config error at {e.path or '<root>'}: {e.message}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        last = e.last_checkpoint.t if e.last_checkpoint is not None else "none"
        print(f"diverged: {e} (last finite checkpoint at step {last})", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidInputError, FormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
