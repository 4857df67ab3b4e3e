"""Merging networks trained on different tasks by summing their parameters,
and the bounds that control how much the merged predictor deviates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, InvalidRegimeError
from .model import Architecture, Params, forward_batch, logistic_pair

BOUND_KINDS = ("linear", "shallow", "deep_linear", "loss_transfer")


def merge_params(theta: Params, theta_p: Params, fixed_head: bool = False) -> Params:
    """Elementwise sum of two parameter sets with identical shapes.

    With ``fixed_head`` only the hidden matrices are summed and the shared,
    untrained head is kept (shallow nets with a fixed output layer).
    """
    a, b = theta.layers(), theta_p.layers()
    if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
        raise InvalidInputError("cannot merge parameters with different shapes")
    if fixed_head:
        if not np.array_equal(theta.head, theta_p.head):
            raise InvalidInputError("fixed-head merge needs identical heads")
        return Params([w + v for w, v in zip(theta.weights, theta_p.weights)], theta.head.copy())
    return theta.map(np.add, theta_p)


def cross_task_epsilon(X, X_p) -> float:
    """``max_{i,j} |<x_i, x'_j>|``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X_p = np.atleast_2d(np.asarray(X_p, dtype=np.float64))
    if X.size == 0 or X_p.size == 0:
        raise InvalidInputError("input sets must be nonempty")
    if X.shape[1] != X_p.shape[1]:
        raise InvalidInputError("input sets differ in dimension")
    return float(np.max(np.abs(X @ X_p.T)))


@dataclass
class GapReport:
    gaps: np.ndarray  # |f_{theta+theta'}(x) - f_theta(x)| per probe
    loss_base: Optional[float] = None
    loss_merged: Optional[float] = None

    @property
    def max_gap(self) -> float:
        return float(np.max(self.gaps))

    @property
    def loss_gap(self) -> Optional[float]:
        if self.loss_base is None:
            return None
        return self.loss_merged - self.loss_base


def merge_gap_eval(
    theta: Params, theta_p: Params, arch: Architecture, X, y=None, fixed_head: bool = False
) -> GapReport:
    """Prediction gap of the merged model relative to ``theta`` on probes ``X``.

    The merged prediction always comes from a full forward pass through the
    summed layers. With labels, the logistic losses of both models are reported.
    """
    merged = merge_params(theta, theta_p, fixed_head)
    f = forward_batch(theta, arch, X).f
    fm = forward_batch(merged, arch, X).f
    rep = GapReport(np.abs(fm - f))
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        rep.loss_base = float(np.mean(logistic_pair(y * f)[0]))
        rep.loss_merged = float(np.mean(logistic_pair(y * fm)[0]))
    return rep


@dataclass
class MergeBoundInputs:
    """Inputs of one bound evaluation.

    ``init_term`` is |<theta_0, x'>| (linear), ||W_0 x'|| (shallow) or the
    initial prediction magnitude (deep_linear). For ``loss_transfer`` give the
    base loss and the per-example norms ||W' x_i||.
    """

    kind: str
    lam: float = 0.0
    t: float = 0.0
    eps: float = 0.0
    eta: Optional[float] = None
    init_term: float = 0.0
    C: Optional[float] = None
    w0_norm2: Optional[float] = None
    K: Optional[int] = None
    base_loss: Optional[float] = None
    transfer_norms: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in BOUND_KINDS:
            raise InvalidInputError(f"unknown bound kind {self.kind!r}")
        for name in ("lam", "t", "eps", "init_term"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")


@dataclass
class BoundValue:
    value: float
    components: dict = field(default_factory=dict)


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _discrete(inp: MergeBoundInputs) -> BoundValue:
    if inp.eta is None or not inp.eta > 0:
        raise InvalidInputError("discrete bounds need a positive step size")
    if not inp.lam > 0:
        raise InvalidInputError("weight decay must be positive")
    rate = inp.eta * inp.lam
    if rate >= 1.0:
        raise InvalidRegimeError(f"eta*lam = {rate} must be below 1")
    factor = _exp(inp.t * math.log1p(-rate))
    decay = inp.init_term * factor
    eps_term = inp.eps * (1.0 - factor) / inp.lam
    return BoundValue(decay + eps_term, {"decay_term": decay, "eps_term": eps_term, "factor": factor})


def deep_linear_constants(lam: float, K: int, C: float, w0_norm2: float, t: float) -> dict:
    """``A1``, ``A2`` and ``B`` of the deep linear merging bound.

    ``log_A1`` is kept as well since ``A1`` overflows for small ``lam``.
    """
    if not lam > 0:
        raise InvalidInputError("weight decay must be positive")
    if K is None or K < 1 or C is None or C < 0 or w0_norm2 is None or w0_norm2 < 0:
        raise InvalidInputError("deep linear bound needs K >= 1, C >= 0 and ||w(0)||^2 >= 0")
    B = w0_norm2 + C / lam
    p = B ** (2.0 - 2.0 / K)
    log_A1 = p * (K - 1) * (1.0 + lam * K) * C / (2.0 * lam * K)
    A1 = _exp(log_A1)
    A2 = 2.0 * p * C * A1 * (-math.expm1(-lam * K * t / 2.0)) / (lam * K)
    return {"A1": A1, "A2": A2, "B": B, "log_A1": log_A1}


def bound_eval(inp: MergeBoundInputs) -> BoundValue:
    """Evaluate one merging bound and return its value with named components."""
    if inp.kind in ("linear", "shallow"):
        return _discrete(inp)
    if inp.kind == "deep_linear":
        c = deep_linear_constants(inp.lam, inp.K, inp.C, inp.w0_norm2, inp.t)
        log_decay = c["log_A1"] - inp.lam * inp.K * inp.t
        decay = 0.0 if inp.init_term == 0.0 else inp.init_term * _exp(log_decay)
        eps_term = 0.0 if inp.eps == 0.0 else c["A2"] * inp.eps
        return BoundValue(decay + eps_term, {**c, "decay_term": decay, "eps_term": eps_term})
    if inp.base_loss is None or inp.transfer_norms is None:
        raise InvalidInputError("loss transfer bound needs base_loss and transfer_norms")
    norms = np.asarray(inp.transfer_norms, dtype=np.float64)
    extra = float(np.mean(norms))
    return BoundValue(inp.base_loss + extra, {"base_loss": inp.base_loss, "transfer_term": extra})


def shallow_transfer_norms(W_p: np.ndarray, X) -> np.ndarray:
    """``||W' x||`` for each row ``x`` of ``X``."""
    return np.linalg.norm(np.atleast_2d(X) @ np.asarray(W_p).T, axis=1)


GAP_CSV_FIELDS = ("step", "measured_gap", "bound", "decay_term", "eps_term")


def shallow_gap_curve(steps, Ws_p, W0_p, X, eta: float, lam: float, eps: float) -> list[dict]:
    """Worst-case ``||W'_t x||`` over probes next to the shallow bound per checkpoint."""
    X = np.atleast_2d(X)
    init = float(np.max(shallow_transfer_norms(W0_p, X)))
    rows = []
    for t, W in zip(steps, Ws_p):
        b = bound_eval(MergeBoundInputs("shallow", lam=lam, t=t, eps=eps, eta=eta, init_term=init))
        rows.append(
            {
                "step": t,
                "measured_gap": float(np.max(shallow_transfer_norms(W, X))),
                "bound": b.value,
                "decay_term": b.components["decay_term"],
                "eps_term": b.components["eps_term"],
            }
        )
    return rows
