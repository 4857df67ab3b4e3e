"""Training loops: GD/SGD with weight decay, line-search polishing to a
stationary point, and RK4 gradient-flow integration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import linalg
from .errors import DivergenceError, InvalidInputError, UnsupportedOperationError
from .model import (
    Architecture,
    Dataset,
    Params,
    end_to_end_vector,
    logistic_pair,
    loss_grad_arrays,
)
from .rng import stream

log = logging.getLogger(__name__)

INIT_KINDS = ("xavier", "scaled_gaussian", "zeros", "balanced_rank1")


@dataclass
class TrainConfig:
    """GD (``batch_size=None``) or shuffled-minibatch SGD.

    For SGD, ``steps`` counts epochs; otherwise it counts updates.
    ``init_scale`` is sigma for ``scaled_gaussian`` and s for ``balanced_rank1``.
    """

    eta: float
    lam: float
    steps: int
    seed: int = 0
    checkpoint_every: Optional[int] = None
    init: str = "xavier"
    init_scale: float = 1.0
    batch_size: Optional[int] = None
    freeze_head: bool = False
    keep_params: bool = True
    track_srank: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidInputError("step size must be positive")
        if self.lam < 0:
            raise InvalidInputError("weight decay must be nonnegative")
        if self.steps < 0:
            raise InvalidInputError("steps must be nonnegative")
        if self.init not in INIT_KINDS:
            raise InvalidInputError(f"unknown init {self.init!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInputError("batch size must be positive")

    @property
    def every(self) -> int:
        return self.checkpoint_every or max(self.steps // 200, 1)


@dataclass
class GFConfig:
    lam: float
    T: float
    h: float = 1e-3
    mode: str = "per_layer"
    record_every: Optional[int] = None
    keep_params: bool = True

    def __post_init__(self):
        if not self.h > 0 or not self.T > 0:
            raise InvalidInputError("h and T must be positive")
        if self.mode not in ("per_layer", "end_to_end"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")

    @property
    def n_steps(self) -> int:
        return max(int(round(self.T / self.h)), 1)

    @property
    def every(self) -> int:
        return self.record_every or max(self.n_steps // 200, 1)


@dataclass
class Record:
    t: float
    state: object  # Params, end-to-end vector, or None
    L: float
    L_lam: float
    residual: float = float("nan")
    extras: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def append(self, rec: Record):
        if self.records and not rec.t > self.records[-1].t:
            raise ValueError("trajectory times must increase strictly")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def final(self) -> Record:
        return self.records[-1]

    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    def column(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) if hasattr(r, key) else r.extras[key] for r in self.records])


def init_params(arch: Architecture, kind: str = "xavier", seed: int = 0, scale: float = 1.0) -> Params:
    if kind == "zeros":
        return Params.zeros(arch)
    if kind == "balanced_rank1":
        return balanced_rank1_init(arch, scale, seed)
    rng = stream(seed, "init", kind)
    shapes = [*arch.weight_shapes(), (1, arch.head_dim)]
    layers = []
    for fan_out, fan_in in shapes:
        std = math.sqrt(2.0 / (fan_in + fan_out)) if kind == "xavier" else scale
        layers.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
    return Params(layers[:-1], layers[-1][0])


def balanced_rank1_init(arch: Architecture, s: float, seed: int = 0) -> Params:
    """``W_k = s u_{k+1} u_k^T`` and ``w_K = s u_K`` with random unit ``u_k``.

    Consecutive layers are exactly balanced and the end-to-end vector is
    ``s^K u_1``.
    """
    if arch.activation.kind != "identity":
        raise UnsupportedOperationError("balanced init is defined for deep linear networks")
    if not s > 0:
        raise InvalidInputError("scale must be positive")
    rng = stream(seed, "balanced_rank1")
    dims = (arch.d, *arch.widths)
    us = []
    for m in dims:
        u = rng.normal(size=m)
        us.append(u / np.linalg.norm(u))
    weights = [s * np.outer(us[k + 1], us[k]) for k in range(len(arch.widths))]
    return Params(weights, s * us[-1])


def balancedness_defect(params: Params) -> float:
    """``max_k ||W_{k+1}^T W_{k+1} - W_k W_k^T||_F`` with ``W_K = w_K^T``."""
    mats = [*params.weights, params.head[None, :]]
    worst = 0.0
    for lo, hi in zip(mats[:-1], mats[1:]):
        worst = max(worst, float(np.linalg.norm(hi.T @ hi - lo @ lo.T)))
    return worst


def layer_sranks(params: Params) -> list[float]:
    out = []
    for a in params.layers():
        try:
            out.append(linalg.stable_rank(a)[2])
        except ValueError:
            out.append(float("nan"))
    return out


def _record(t, params, arch, X, y, lam, cfg, lg=None) -> Record:
    if lg is None:
        lg = loss_grad_arrays(params, arch, X, y, lam)
    extras = {}
    if cfg.track_srank:
        extras["srank"] = layer_sranks(params)
    return Record(
        t,
        params.copy() if cfg.keep_params else None,
        lg.L,
        lg.L_lam,
        float(np.linalg.norm(lg.grad.flat())),
        extras,
    )


def _step(params: Params, grad_L: Params, eta: float, lam: float, freeze_head: bool) -> Params:
    decay = 1.0 - eta * lam
    weights = [decay * w - eta * g for w, g in zip(params.weights, grad_L.weights)]
    head = params.head if freeze_head else decay * params.head - eta * grad_L.head
    return Params(weights, head)


def gd_train(params0: Params, arch: Architecture, data: Dataset, cfg: TrainConfig) -> Trajectory:
    """Run GD (or SGD) with decoupled decay ``W <- (1 - eta lam) W - eta grad L``."""
    params = params0.copy().check(arch)
    if data.d != arch.d:
        raise InvalidInputError("dataset dimension does not match architecture")
    X, y = data.X, data.y
    traj = Trajectory()
    every = cfg.every
    shuffle = stream(cfg.seed, "sgd_shuffle") if cfg.batch_size else None

    for s in range(cfg.steps + 1):
        if shuffle is None:
            lg = loss_grad_arrays(params, arch, X, y, cfg.lam)
            if not math.isfinite(lg.L_lam):
                raise DivergenceError(f"non-finite loss at step {s}", traj.records[-1] if traj.records else None)
            if s % every == 0 or s == cfg.steps:
                traj.append(_record(float(s), params, arch, X, y, cfg.lam, cfg, lg))
            if s == cfg.steps:
                break
            params = _step(params, lg.grad_L, cfg.eta, cfg.lam, cfg.freeze_head)
        else:
            if s % every == 0 or s == cfg.steps:
                rec = _record(float(s), params, arch, X, y, cfg.lam, cfg)
                if not math.isfinite(rec.L_lam):
                    raise DivergenceError(f"non-finite loss at epoch {s}", traj.records[-1] if traj.records else None)
                traj.append(rec)
            if s == cfg.steps:
                break
            order = shuffle.permutation(data.n)
            for lo in range(0, data.n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                lg = loss_grad_arrays(params, arch, X[idx], y[idx], cfg.lam)
                params = _step(params, lg.grad_L, cfg.eta, cfg.lam, cfg.freeze_head)
            if not all(np.all(np.isfinite(a)) for a in params.layers()):
                raise DivergenceError(f"non-finite parameters in epoch {s}", traj.records[-1] if traj.records else None)
    return traj


class PolishResult(NamedTuple):
    params: Params
    residual: float
    converged: bool
    iterations: int


def polish_to_stationary(
    params: Params,
    arch: Architecture,
    data: Dataset,
    lam: float,
    tol: float,
    max_iter: int = 500_000,
    c: float = 1e-4,
    shrink: float = 0.5,
    step0: float = 1.0,
) -> PolishResult:
    """Armijo-backtracking GD on ``L_lam`` until
    ``||grad L_lam|| <= tol * max(1, ||theta||)``.

    Returns the best point seen and whether the target was met. ``L_lam`` never
    increases between accepted iterates.
    """
    if not lam > 0 or not tol > 0:
        raise InvalidInputError("polishing needs lam > 0 and tol > 0")
    X, y = data.X, data.y
    theta = params.copy().check(arch)
    lg = loss_grad_arrays(theta, arch, X, y, lam)
    it = 0
    while True:
        gnorm2 = float(np.sum(lg.grad.flat() ** 2))
        residual = math.sqrt(gnorm2)
        if residual <= tol * max(1.0, theta.norm()):
            return PolishResult(theta, residual, True, it)
        if it >= max_iter:
            break
        step = step0
        while True:
            cand = theta.map(lambda p, g: p - step * g, lg.grad)
            lg_c = loss_grad_arrays(cand, arch, X, y, lam)
            if lg_c.L_lam <= lg.L_lam - c * step * gnorm2:
                break
            step *= shrink
            if step < 1e-30:
                log.warning("line search stalled at iteration %d (residual %.3e)", it, residual)
                return PolishResult(theta, residual, False, it)
        theta, lg = cand, lg_c
        it += 1
    log.warning("polish hit the iteration cap (residual %.3e)", residual)
    return PolishResult(theta, residual, False, it)


def rk4(rhs, y0: np.ndarray, h: float, n_steps: int, every: int, on_record):
    """Classic fixed-step RK4; calls ``on_record(step, y)`` at step 0, every
    ``every`` steps, and at the final step."""
    y = np.array(y0, dtype=np.float64)
    on_record(0, y)
    for i in range(1, n_steps + 1):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at step {i}")
        if i % every == 0 or i == n_steps:
            on_record(i, y)
    return y


def _l1_grad(w: np.ndarray, data: Optional[Dataset]) -> tuple[float, np.ndarray]:
    """Loss and gradient of the linear predictor ``x -> <w, x>``."""
    if data is None:
        return 0.0, np.zeros_like(w)
    losses, slopes = logistic_pair(data.y * (data.X @ w))
    return float(np.mean(losses)), data.X.T @ (data.y * slopes) / data.n


def stationarity_integrand(w: np.ndarray, grad: np.ndarray, K: int) -> float:
    """``(K-1) ||w||^(1-1/K) |<grad L1(w), w>|``."""
    return (K - 1) * float(np.linalg.norm(w)) ** (1.0 - 1.0 / K) * abs(float(grad @ w))


def end_to_end_rhs(w: np.ndarray, data: Optional[Dataset], lam: float, K: int) -> np.ndarray:
    """Induced flow of the end-to-end vector of a balanced deep linear net.

    ``dw/dt = -lam K w - |w|^(2-2/K) g - (K-1) |w|^(-2/K) <g, w> w`` with
    ``g = grad L1(w)``.
    """
    _, g = _l1_grad(w, data)
    nw = float(np.linalg.norm(w))
    if nw == 0.0:
        return -lam * K * w
    return -lam * K * w - nw ** (2.0 - 2.0 / K) * g - (K - 1) * nw ** (-2.0 / K) * float(g @ w) * w


def gf_integrate(start, arch: Architecture, data: Optional[Dataset], cfg: GFConfig) -> Trajectory:
    """Integrate gradient flow on ``L_lam`` with RK4.

    ``per_layer`` integrates every layer (``start`` is Params); ``end_to_end``
    integrates the induced dynamics of the product vector (``start`` is a
    vector, identity activation only). ``data=None`` drops the loss term.
    The last state component accumulates the stationarity integral by the same
    quadrature (deep linear only; NaN otherwise).
    """
    lam, K = cfg.lam, arch.K
    linear = arch.activation.kind == "identity"
    traj = Trajectory()
    if data is None:
        X, y = np.zeros((0, arch.d)), np.zeros(0)
    else:
        X, y = data.X, data.y

    if cfg.mode == "end_to_end":
        if not linear:
            raise UnsupportedOperationError("end-to-end flow requires identity activation")
        w0 = np.asarray(start, dtype=np.float64)
        if w0.shape != (arch.d,):
            raise InvalidInputError("end-to-end start must be a d-vector")

        def rhs(state):
            w = state[:-1]
            _, g = _l1_grad(w, data)
            return np.append(end_to_end_rhs(w, data, lam, K), stationarity_integrand(w, g, K))

        def on_record(i, state):
            w = state[:-1]
            L, _ = _l1_grad(w, data)
            traj.append(
                Record(
                    i * cfg.h,
                    w.copy(),
                    L,
                    L + 0.5 * lam * K * float(np.linalg.norm(w)) ** (2.0 / K),
                    extras={"integral": float(state[-1])},
                )
            )

        rk4(rhs, np.append(w0, 0.0), cfg.h, cfg.n_steps, cfg.every, on_record)
        return traj

    params0 = start.copy().check(arch)

    def rhs(state):
        p = Params.from_flat(arch, state[:-1])
        lg = loss_grad_arrays(p, arch, X, y, lam) if data is not None else None
        dtheta = -(lg.grad.flat() if lg else lam * state[:-1])
        if linear:
            w = end_to_end_vector(p, arch)
            _, g = _l1_grad(w, data)
            rate = stationarity_integrand(w, g, K)
        else:
            rate = 0.0
        return np.append(dtheta, rate)

    def on_record(i, state):
        p = Params.from_flat(arch, state[:-1])
        if data is not None:
            lg = loss_grad_arrays(p, arch, X, y, lam)
            L, L_lam, res = lg.L, lg.L_lam, float(np.linalg.norm(lg.grad.flat()))
        else:
            L, L_lam, res = 0.0, 0.5 * lam * p.norm() ** 2, lam * p.norm()
        extras = {"integral": float(state[-1]) if linear else float("nan")}
        if linear:
            extras["balancedness"] = balancedness_defect(p)
            extras["w"] = end_to_end_vector(p, arch)
        traj.append(Record(i * cfg.h, p if cfg.keep_params else None, L, L_lam, res, extras))

    rk4(rhs, np.append(params0.flat(), 0.0), cfg.h, cfg.n_steps, cfg.every, on_record)
    return traj
