"""Experiment recipes shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import datagen, merging
from .linalg import spectral_norm
from .model import RELU, Activation, Architecture, Dataset, Params, forward_batch, logistic_pair, sign_head
from .optimize import TrainConfig, gd_train, init_params, layer_sranks
from .rng import stream

MERGE_CSV_FIELDS = (
    "step",
    "loss_task_a_model_a",
    "loss_task_a_merged",
    "loss_task_b_model_b",
    "loss_task_b_merged",
)
SWEEP_CSV_FIELDS = ("lambda", "avg_inv_stable_rank", "classification_error", "margin_error", "avg_loss")


def mean_loss(params: Params, arch: Architecture, data: Dataset) -> float:
    f = forward_batch(params, arch, data.X).f
    return float(np.mean(logistic_pair(data.y * f)[0]))


@dataclass
class MergeConfig:
    """Two ReLU nets, one per task, merged by summing parameters.

    ``fixed_head=True`` with one hidden layer is the shallow model with a
    shared untrained head; otherwise every layer is trained and summed.
    ``control="same_task"`` draws both tasks on the same input subspace with
    independent labelers; ``w0_b="task_support"`` restricts the initial task-b
    first layer to task-b coordinates; ``"zero"`` starts task b at 0.
    """

    d: int = 40
    n: int = 100
    widths: tuple = (64,)
    fixed_head: bool = True
    eta: float = 0.5
    lam: float = 1e-3
    steps: int = 20_000
    seed: int = 0
    label_freq: float = 1.0
    control: str = "orthogonal"
    w0_b: str = "xavier"
    n_heldout: int = 1000
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.fixed_head and len(self.widths) != 1:
            raise ValueError("a fixed head is only used with one hidden layer")
        if self.control not in ("orthogonal", "same_task"):
            raise ValueError(f"unknown control {self.control!r}")
        if self.w0_b not in ("xavier", "task_support", "zero"):
            raise ValueError(f"unknown init {self.w0_b!r}")


@dataclass
class MergeResult:
    cfg: MergeConfig
    arch: Architecture
    pair: datagen.TaskPair
    steps: np.ndarray
    params_a: list
    params_b: list
    heldout_a: Optional[Dataset] = None
    heldout_b: Optional[Dataset] = None
    srank: dict = field(default_factory=dict)

    @property
    def shallow(self) -> bool:
        return self.cfg.fixed_head

    def merged(self, i: int) -> Params:
        return merging.merge_params(self.params_a[i], self.params_b[i], fixed_head=self.cfg.fixed_head)

    def loss_rows(self, heldout: bool = False) -> list[dict]:
        a, b = (self.heldout_a, self.heldout_b) if heldout else (self.pair.data_a, self.pair.data_b)
        rows = []
        for i, t in enumerate(self.steps):
            m = self.merged(i)
            rows.append(
                {
                    "step": int(t),
                    "loss_task_a_model_a": mean_loss(self.params_a[i], self.arch, a),
                    "loss_task_a_merged": mean_loss(m, self.arch, a),
                    "loss_task_b_model_b": mean_loss(self.params_b[i], self.arch, b),
                    "loss_task_b_merged": mean_loss(m, self.arch, b),
                }
            )
        return rows

    def final_loss_gaps(self) -> tuple[float, float]:
        """``|L(merged) - L(single)|`` on task a and task b at the last checkpoint."""
        r = self.loss_rows()[-1]
        return (
            abs(r["loss_task_a_merged"] - r["loss_task_a_model_a"]),
            abs(r["loss_task_b_merged"] - r["loss_task_b_model_b"]),
        )

    def _side(self, on: str):
        if on == "a":
            return self.params_a, self.params_b, self.pair.data_a.X
        return self.params_b, self.params_a, self.pair.data_b.X

    def transfer_norms(self, i: int, on: str = "a") -> np.ndarray:
        """``||W'_t x||`` of the other task's first layer on this task's inputs."""
        _, others, X = self._side(on)
        return merging.shallow_transfer_norms(others[i].weights[0], X)

    def gap_rows(self, on: str = "a") -> list[dict]:
        """Measured gap next to the shallow bound (bound columns NaN for deep nets)."""
        own, others, X = self._side(on)
        if self.shallow:
            return merging.shallow_gap_curve(
                self.steps, [p.weights[0] for p in others], others[0].weights[0], X,
                self.cfg.eta, self.cfg.lam, self.pair.eps,
            )
        nan = float("nan")
        return [
            {
                "step": t,
                "measured_gap": merging.merge_gap_eval(p, q, self.arch, X).max_gap,
                "bound": nan,
                "decay_term": nan,
                "eps_term": nan,
            }
            for t, p, q in zip(self.steps, own, others)
        ]


def merge_specs(cfg: MergeConfig) -> tuple[datagen.TaskSpec, datagen.TaskSpec]:
    sa, sb = datagen.halves(cfg.d)
    if cfg.control == "same_task":
        sb = sa
    return (
        datagen.TaskSpec(cfg.d, cfg.n, sa, cfg.label_freq, cfg.seed),
        datagen.TaskSpec(cfg.d, cfg.n, sb, cfg.label_freq, cfg.seed),
    )


def _merge_init(cfg: MergeConfig, arch: Architecture, role: str, kind: str, support=None) -> Params:
    p = init_params(arch, "xavier", seed=int(stream(cfg.seed, "init_seed", role).integers(2**63)))
    if cfg.fixed_head:
        p.head = sign_head(arch.head_dim, stream(cfg.seed, "head"))
    if kind == "zero":
        p.weights[0] = np.zeros_like(p.weights[0])
    elif kind == "task_support":
        mask = np.zeros(arch.d)
        mask[list(support)] = 1.0
        p.weights[0] = p.weights[0] * mask
    return p


def _train_job(args):
    p0, arch, data, tc = args
    tr = gd_train(p0, arch, data, tc)
    return tr.times(), [r.state for r in tr.records], [r.extras["srank"] for r in tr.records]


def run_merge(cfg: MergeConfig, jobs: int = 1) -> MergeResult:
    spec_a, spec_b = merge_specs(cfg)
    pair = datagen.gen_task_pair(spec_a, spec_b)
    arch = Architecture(cfg.d, cfg.widths, RELU)
    p_a = _merge_init(cfg, arch, "a", "xavier")
    p_b = _merge_init(cfg, arch, "b", cfg.w0_b, spec_b.subspace)
    tc = TrainConfig(
        eta=cfg.eta,
        lam=cfg.lam,
        steps=cfg.steps,
        seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every,
        freeze_head=cfg.fixed_head,
    )
    work = [(p_a, arch, pair.data_a, tc), (p_b, arch, pair.data_b, tc)]
    if jobs > 1:
        with ProcessPoolExecutor(2) as ex:
            (steps, ps_a, sr_a), (_, ps_b, sr_b) = ex.map(_train_job, work)
    else:
        (steps, ps_a, sr_a), (_, ps_b, sr_b) = map(_train_job, work)
    res = MergeResult(
        cfg,
        arch,
        pair,
        steps,
        ps_a,
        ps_b,
        datagen.held_out(spec_a, cfg.n_heldout, "a") if cfg.n_heldout else None,
        datagen.held_out(spec_b, cfg.n_heldout, "b") if cfg.n_heldout else None,
    )
    res.srank = {"a": sr_a, "b": sr_b, "merged": [layer_sranks(res.merged(i)) for i in range(len(steps))]}
    return res


@dataclass
class SweepConfig:
    d: int = 100
    n: int = 1000
    widths: tuple = (10, 10)
    label_freq: float = 10.0
    lambdas: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    eta: float = 0.1
    epochs: int = 5000
    batch_size: int = 32
    seed: int = 0
    activation: str = "relu"


def sweep_dataset(cfg: SweepConfig) -> Dataset:
    spec = datagen.TaskSpec(cfg.d, cfg.n, tuple(range(cfg.d)), cfg.label_freq, cfg.seed)
    return datagen.gen_task(spec, "sweep")


def avg_inv_stable_rank(params: Params) -> float:
    """``(1/K) sum_k ||W_k||_2 / ||W_k||_F`` over all layers, head included.

    NaN when some layer is exactly zero (the stable rank is undefined there).
    """
    vals = []
    for a in params.layers():
        a2 = np.atleast_2d(a)
        fro = float(np.linalg.norm(a2))
        vals.append(float("nan") if fro == 0.0 else spectral_norm(a2) / fro)
    return float(np.mean(vals))


def sweep_point(cfg: SweepConfig, lam: float) -> dict:
    data = sweep_dataset(cfg)
    arch = Architecture(cfg.d, tuple(cfg.widths), Activation(cfg.activation))
    p0 = init_params(arch, "xavier", cfg.seed)
    tc = TrainConfig(
        eta=cfg.eta,
        lam=lam,
        steps=cfg.epochs,
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        checkpoint_every=cfg.epochs or 1,
        keep_params=True,
        track_srank=False,
    )
    p = gd_train(p0, arch, data, tc).final.state
    margins = data.y * forward_batch(p, arch, data.X).f
    return {
        "lambda": lam,
        "avg_inv_stable_rank": avg_inv_stable_rank(p),
        "classification_error": float(np.mean(margins <= 0.0)),
        "margin_error": float(np.mean(margins < 1.0)),
        "avg_loss": float(np.mean(logistic_pair(margins)[0])),
    }


def _sweep_job(args):
    return sweep_point(*args)


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list[dict]:
    """One row per lambda; points are independent and run in parallel."""
    work = [(cfg, lam) for lam in cfg.lambdas]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_sweep_job, work))
    return [_sweep_job(w) for w in work]
