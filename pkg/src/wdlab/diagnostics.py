"""Checks of the structure weight decay imposes at stationary points.

At a stationary point of ``L_lam`` the parameters align with the negative loss
gradient (``lam * theta = -grad L``). From that follow per-layer norm
preservation (``lam ||W_k||_F^2 = H^(K-k) B^2``), exact rank one layers for deep
linear nets, and a lower bound on the weighted mean inverse stable rank. The
functions here measure how closely a given parameter vector meets each
statement.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq, lsq_linear

from . import linalg
from .errors import DegenerateInputError, InvalidInputError, KinkError, UnsupportedOperationError
from .model import (
    Architecture,
    Dataset,
    Params,
    backward,
    forward_batch,
    grad_f,
    logistic_pair,
    loss_grad_arrays,
)

EPS = np.finfo(np.float64).eps


def alignment_residual(params: Params, arch: Architecture, data: Dataset, lam: float) -> float:
    """``||lam * theta + grad L(theta)||`` over the flattened parameters."""
    if not lam > 0:
        raise InvalidInputError("alignment needs lam > 0")
    lg = loss_grad_arrays(params, arch, data.X, data.y, lam)
    return float(np.linalg.norm(lg.grad_L.flat() + lam * params.flat()))


def clarke_residual(params: Params, arch: Architecture, data: Dataset, lam: float, delta: float = 1e-6):
    """Approximate min-norm element of the Clarke differential of ``L_lam``.

    Every ReLU pre-activation with ``|z| <= delta`` may take any derivative in
    ``[0, 1]``; the coefficients are chosen by bounded least squares and the
    exact gradient at that choice is returned as ``(norm, n_kinks)``. For
    smooth activations this is just ``||grad L_lam||``.
    """
    X, y = data.X, data.y
    fw = forward_batch(params, arch, X)
    losses, slopes = logistic_pair(np.atleast_1d(y * fw.f))
    g = y * slopes / data.n
    theta = params.flat()
    derivs = [arch.activation.deriv(z) for z in fw.zs]

    def full_grad(ds):
        return backward(params, arch, fw, g, ds).flat() + lam * theta

    if arch.activation.kind != "relu":
        return float(np.linalg.norm(full_grad(derivs))), 0
    kinks = [(k, i, j) for k, z in enumerate(fw.zs) for i, j in zip(*np.nonzero(np.abs(z) <= delta))]
    if not kinks:
        return float(np.linalg.norm(full_grad(derivs))), 0
    base = [d.copy() for d in derivs]
    for k, i, j in kinks:
        base[k][i, j] = 0.0
    g0 = full_grad(base)
    cols = []
    for k, i, j in kinks:
        ds = [d.copy() for d in base]
        ds[k][i, j] = 1.0
        cols.append(full_grad(ds) - g0)
    V = np.stack(cols, axis=1)
    a = lsq_linear(V, -g0, bounds=(0.0, 1.0), method="bvls").x
    for (k, i, j), ak in zip(kinks, a):
        base[k][i, j] = ak
    return float(np.linalg.norm(full_grad(base))), len(kinks)


def b_squared(params: Params, arch: Architecture, data: Dataset) -> float:
    """``-(1/n) sum_i l'(y_i f(x_i)) y_i f(x_i)``."""
    margins = data.y * forward_batch(params, arch, data.X).f
    _, slopes = logistic_pair(np.atleast_1d(margins))
    return float(-np.mean(slopes * margins))


def layer_norms(params: Params):
    fro, spec = [], []
    for a in params.layers():
        f = float(np.linalg.norm(a))
        fro.append(f)
        spec.append(linalg.spectral_norm(a) if f > 0 else 0.0)
    return fro, spec


@dataclass
class NormReport:
    B2: float
    fro: list
    targets: list  # sqrt(H^(K-k) B^2 / lam)
    residuals: list  # |lam ||W_k||^2 - H^(K-k) B^2| / max(lam ||W_k||^2, eps)

    @property
    def max_residual(self) -> float:
        return max(self.residuals)

    @property
    def fro_spread(self) -> float:
        """Relative spread ``(max - min) / max`` of layer Frobenius norms."""
        return (max(self.fro) - min(self.fro)) / max(self.fro)


def norm_preservation_report(params: Params, arch: Architecture, data: Dataset, lam: float) -> NormReport:
    if not lam > 0:
        raise InvalidInputError("norm preservation needs lam > 0")
    if params.norm() == 0.0:
        raise DegenerateInputError("norm preservation is vacuous at theta = 0")
    B2 = b_squared(params, arch, data)
    factors = arch.layer_factors()
    fro = [float(np.linalg.norm(a)) for a in params.layers()]
    res, targets = [], []
    for f, h in zip(fro, factors):
        lhs = lam * f * f
        res.append(abs(lhs - h * B2) / max(lhs, EPS))
        targets.append(math.sqrt(max(h * B2, 0.0) / lam))
    return NormReport(B2, fro, targets, res)


def pseudo_rank_weights(arch: Architecture) -> tuple[np.ndarray, float]:
    """Per-layer weights ``(H^(K-k))^(3/2) / Z`` and ``Z = sum_k H^(K-k)``."""
    factors = arch.layer_factors()
    Z = float(np.sum(factors))
    return factors**1.5 / Z, Z


@dataclass
class PseudoRankReport:
    weights: list
    Z: float
    inv_sranks: list
    lhs: float
    rhs: float
    pseudo_rank: float
    reference_rhs: Optional[float] = None
    reference_applies: Optional[bool] = None

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs

    @property
    def holds(self) -> bool:
        return self.slack >= 0.0

    @property
    def reference_slack(self) -> Optional[float]:
        return None if self.reference_rhs is None else self.lhs - self.reference_rhs


def pseudo_rank_report(
    params: Params, arch: Architecture, data: Dataset, lam: float, theta0: Optional[Params] = None
) -> PseudoRankReport:
    """Both sides of ``sum_k w_k ||W_k||_2/||W_k||_F >= sqrt(lam) L^-(1/4 + 1/(2Z))``.

    With a reference ``theta0`` also reports ``sqrt(lam / (L(theta0) + lam ||theta0||^2))``;
    ``reference_applies`` says whether its premises (``L_lam(theta) <= L_lam(theta0)``
    and ``L(theta0) >= 1``) hold.
    """
    if arch.K < 2:
        raise InvalidInputError("pseudo-rank bound needs K >= 2")
    weights, Z = pseudo_rank_weights(arch)
    inv = []
    for a in params.layers():
        fro, spec, _ = _srank_or_raise(a)
        inv.append(spec / fro)
    lhs = float(np.dot(weights, inv))
    lg = loss_grad_arrays(params, arch, data.X, data.y, lam)
    rhs = math.sqrt(lam) * lg.L ** -(0.25 + 0.5 / Z)
    rep = PseudoRankReport(list(weights), Z, inv, lhs, rhs, 1.0 / lhs)
    if theta0 is not None:
        lg0 = loss_grad_arrays(theta0, arch, data.X, data.y, lam)
        sq0 = theta0.norm() ** 2
        rep.reference_rhs = math.sqrt(lam / (lg0.L + lam * sq0))
        rep.reference_applies = bool(lg.L_lam <= lg0.L_lam and lg0.L >= 1.0)
    return rep


def _srank_or_raise(a):
    try:
        return linalg.stable_rank(a)
    except DegenerateInputError:
        raise DegenerateInputError("a layer is identically zero") from None


@dataclass
class Rank1Report:
    ratios: list
    threshold: float

    @property
    def passed(self) -> bool:
        return all(r <= self.threshold for r in self.ratios)


def rank1_check(params: Params, threshold: float = 1e-4) -> Rank1Report:
    """``sigma_2 / sigma_1`` of each weight matrix (the head is a vector and skipped)."""
    if not params.weights:
        raise InvalidInputError("no matrix layers to check")
    ratios = []
    for W in params.weights:
        s1, s2 = linalg.top2_singular_values(W)
        ratios.append(s2 / s1 if s1 > 0 else 0.0)
    return Rank1Report(ratios, threshold)


def euler_identity_check(params: Params, arch: Architecture, x) -> list[float]:
    """Relative defects ``|tr(grad_{W_k} f W_k^T) - H^(K-k) f| / max(|f|, 1e-12)``.

    Raises :class:`KinkError` if a ReLU pre-activation is exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if arch.activation.kind != "identity":
        zs = forward_batch(params, arch, x[None, :]).zs
        if any(np.any(z == 0.0) for z in zs):
            raise KinkError("input sits on a ReLU kink; perturb and retry")
    f, g = grad_f(params, arch, x)
    scale = max(abs(f), 1e-12)
    return [
        abs(float(np.sum(gk * wk)) - h * f) / scale
        for gk, wk, h in zip(g.layers(), params.layers(), arch.layer_factors())
    ]


def off_kink(params: Params, arch: Architecture, x, rng, eps: float = 1e-9, tries: int = 100):
    """Perturb ``x`` by ``eps``-sized noise until no pre-activation is exactly 0."""
    x = np.asarray(x, dtype=np.float64)
    for _ in range(tries):
        zs = forward_batch(params, arch, x[None, :]).zs
        if not any(np.any(z == 0.0) for z in zs):
            return x
        x = x + eps * rng.standard_normal(x.shape)
    raise KinkError("could not move off the kink")


# zero-solution sandwich ---------------------------------------------------


def _proxy_slope(r, lam: float, K: int):
    """Derivative of ``lam/2 r^2 + ln(1 + exp(-r^K K^(-K/2)))``."""
    c = K ** (-K / 2.0)
    u = c * r**K
    return lam * r - K * c * r ** (K - 1) * np.exp(-np.logaddexp(0.0, u))


@dataclass
class ZeroSolutionReport:
    status: str  # "ok" or "not_applicable"
    nonzero_critical_point: bool
    critical_points: list = field(default_factory=list)
    threshold_estimate: float = float("nan")
    C_HK: float = float("nan")


def _nonzero_roots(lam: float, K: int, grid: int = 4000) -> list[float]:
    r_max = math.sqrt(10.0 * K / lam)
    rs = np.geomspace(r_max * 1e-9, r_max, grid)
    gs = _proxy_slope(rs, lam, K)
    roots = []
    for a, b, ga, gb in zip(rs[:-1], rs[1:], gs[:-1], gs[1:]):
        if ga == 0.0:
            roots.append(float(a))
        elif ga * gb < 0.0:
            roots.append(brentq(_proxy_slope, a, b, args=(lam, K), xtol=1e-14, rtol=1e-14))
    return roots


def zero_solution_diagnostic(lam: float, K: int, H: int = 1) -> ZeroSolutionReport:
    """Scan the lower sandwich proxy of ``L_lam`` for nonzero critical points.

    ``threshold_estimate`` is the weight decay above which only ``r = 0`` is
    critical, located by bisection in ``log(lam)``.
    """
    if H != 1:
        raise UnsupportedOperationError("the sandwich proxy is defined for H = 1")
    if K < 2:
        return ZeroSolutionReport("not_applicable", False)
    if not lam > 0:
        raise InvalidInputError("lam must be positive")
    weights, _ = pseudo_rank_weights(Architecture(1, (1,) * (K - 1)))
    C_HK = float(np.sum(weights)) ** 2
    roots = _nonzero_roots(lam, K)

    lo, hi = 1e-12, 1e6
    if not _nonzero_roots(lo, K) or _nonzero_roots(hi, K):
        thr = float("nan")
    else:
        for _ in range(80):
            mid = math.sqrt(lo * hi)
            if _nonzero_roots(mid, K, grid=1500):
                lo = mid
            else:
                hi = mid
            if hi / lo < 1 + 1e-10:
                break
        thr = math.sqrt(lo * hi)
    return ZeroSolutionReport("ok", bool(roots), roots, thr, C_HK)


# full report -------------------------------------------------------------


@dataclass
class StationarityReport:
    lam: float
    residual: float
    clarke_residual: float
    L: float
    L_lam: float
    fro: list
    spec: list
    srank: list
    B2: float
    norm_residuals: list
    Z: float
    rank_bound_weights: list
    rank_bound_lhs: float
    rank_bound_rhs: float
    rank_bound_slack: float
    pseudo_rank: float
    rank1_ratios: Optional[list] = None
    reference_rhs: Optional[float] = None
    reference_applies: Optional[bool] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    CSV_FIELDS = (
        "lam", "residual", "clarke_residual", "L", "L_lam", "B2", "Z",
        "rank_bound_lhs", "rank_bound_rhs", "rank_bound_slack", "pseudo_rank",
        "max_norm_residual", "max_rank1_ratio",
    )

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS if hasattr(self, k)}
        row["max_norm_residual"] = max(self.norm_residuals)
        row["max_rank1_ratio"] = max(self.rank1_ratios) if self.rank1_ratios else ""
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def stationarity_report(
    params: Params,
    arch: Architecture,
    data: Dataset,
    lam: float,
    theta0: Optional[Params] = None,
    kink_delta: float = 1e-6,
) -> StationarityReport:
    lg = loss_grad_arrays(params, arch, data.X, data.y, lam)
    fro, spec = layer_norms(params)
    np_rep = norm_preservation_report(params, arch, data, lam)
    pr = pseudo_rank_report(params, arch, data, lam, theta0) if arch.K >= 2 else None
    rank1 = rank1_check(params).ratios if params.weights else None
    cr, _ = clarke_residual(params, arch, data, lam, kink_delta)
    return StationarityReport(
        lam=lam,
        residual=alignment_residual(params, arch, data, lam),
        clarke_residual=cr,
        L=lg.L,
        L_lam=lg.L_lam,
        fro=fro,
        spec=spec,
        srank=[f / s if s > 0 else float("nan") for f, s in zip(fro, spec)],
        B2=np_rep.B2,
        norm_residuals=np_rep.residuals,
        Z=pr.Z if pr else 1.0,
        rank_bound_weights=pr.weights if pr else [1.0],
        rank_bound_lhs=pr.lhs if pr else float("nan"),
        rank_bound_rhs=pr.rhs if pr else float("nan"),
        rank_bound_slack=pr.slack if pr else float("nan"),
        pseudo_rank=pr.pseudo_rank if pr else float("nan"),
        rank1_ratios=rank1,
        reference_rhs=pr.reference_rhs if pr else None,
        reference_applies=pr.reference_applies if pr else None,
    )
