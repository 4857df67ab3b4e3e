"""Bias-free homogeneous feed-forward networks with logistic loss.

A depth-``K`` network is ``f(x) = <w_K, h_{K-1}>`` with ``h_k = act(W_k h_{k-1})``
and ``h_0 = x``. The first layer maps ``d -> widths[0]``; the head ``w_K`` is a
vector. Gradients are computed by hand-written backprop; the ReLU derivative at
exactly zero is taken as 0 (the minimum-norm Clarke subgradient).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, UnsupportedOperationError

KINDS = ("identity", "relu", "relu_power")


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    H: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown activation {self.kind!r}")
        if int(self.H) != self.H or self.H < 1:
            raise InvalidInputError("homogeneity degree H must be a positive integer")
        if self.kind != "relu_power" and self.H != 1:
            raise InvalidInputError(f"{self.kind} is 1-homogeneous; got H={self.H}")

    def __call__(self, z):
        if self.kind == "identity":
            return z
        p = np.maximum(z, 0.0)
        return p if self.H == 1 else p**self.H

    def deriv(self, z):
        if self.kind == "identity":
            return np.ones_like(z)
        pos = (z > 0.0).astype(np.float64)
        if self.H == 1:
            return pos
        return self.H * np.maximum(z, 0.0) ** (self.H - 1) * pos


IDENTITY = Activation("identity")
RELU = Activation("relu")


@dataclass(frozen=True)
class Architecture:
    d: int
    widths: tuple = ()
    activation: Activation = RELU

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(m) for m in self.widths))
        if self.d < 1 or any(m < 1 for m in self.widths):
            raise InvalidInputError("dimensions must be positive")

    @property
    def K(self) -> int:
        return len(self.widths) + 1

    @property
    def H(self) -> int:
        return self.activation.H

    def weight_shapes(self) -> list[tuple[int, int]]:
        dims = (self.d, *self.widths)
        return [(dims[k + 1], dims[k]) for k in range(len(self.widths))]

    @property
    def head_dim(self) -> int:
        return self.widths[-1] if self.widths else self.d

    def layer_factors(self) -> np.ndarray:
        """``H^(K-k)`` for ``k = 1..K`` (the head gets factor 1)."""
        return np.array([float(self.H) ** (self.K - k) for k in range(1, self.K + 1)])

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.weight_shapes()) + self.head_dim


@dataclass
class Params:
    weights: list = field(default_factory=list)
    head: np.ndarray = None

    def layers(self) -> list[np.ndarray]:
        return [*self.weights, self.head]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.layers()])

    @classmethod
    def from_flat(cls, arch: Architecture, v) -> "Params":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (arch.n_params,):
            raise InvalidInputError(f"expected {arch.n_params} parameters, got {v.shape}")
        ws, pos = [], 0
        for r, c in arch.weight_shapes():
            ws.append(v[pos : pos + r * c].reshape(r, c).copy())
            pos += r * c
        return cls(ws, v[pos:].copy())

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], self.head.copy())

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.layers())))

    def map(self, fn, other: "Params" = None) -> "Params":
        if other is None:
            return Params([fn(w) for w in self.weights], fn(self.head))
        return Params([fn(a, b) for a, b in zip(self.weights, other.weights)], fn(self.head, other.head))

    def check(self, arch: Architecture) -> "Params":
        shapes = [w.shape for w in self.weights]
        if shapes != arch.weight_shapes() or np.shape(self.head) != (arch.head_dim,):
            raise InvalidInputError(
                f"parameter shapes {shapes} + head {np.shape(self.head)} do not match {arch}"
            )
        if not all(np.all(np.isfinite(a)) for a in self.layers()):
            raise InvalidInputError("parameters contain non-finite values")
        return self

    @classmethod
    def zeros(cls, arch: Architecture) -> "Params":
        return cls([np.zeros(s) for s in arch.weight_shapes()], np.zeros(arch.head_dim))


@dataclass
class Dataset:
    """Inputs ``X`` (n x d, rows in the unit ball) and labels ``y`` in {-1, +1}."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] < 1:
            raise InvalidInputError("dataset is empty")
        if self.y.shape[0] != self.X.shape[0]:
            raise InvalidInputError("inputs and labels differ in length")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidInputError("labels must be -1 or +1")
        if np.any(np.linalg.norm(self.X, axis=1) > 1.0 + 1e-9):
            raise InvalidInputError("inputs must lie in the unit ball")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class ShallowConfig:
    """``f(x) = <u, (W x)_+>`` with ``u`` fixed during training."""

    W: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(self.u) > 1.0 + 1e-12:
            raise InvalidInputError("fixed head u must have norm at most 1")

    @property
    def arch(self) -> Architecture:
        return Architecture(self.W.shape[1], (self.W.shape[0],), RELU)

    def params(self) -> Params:
        return Params([np.asarray(self.W, dtype=np.float64)], np.asarray(self.u, dtype=np.float64))


def sign_head(m: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed head with entries ``+-1/sqrt(m)`` (unit norm)."""
    return rng.choice((-1.0, 1.0), size=m) / np.sqrt(m)


class Forward(NamedTuple):
    f: np.ndarray
    hs: list  # h_0 .. h_{K-1}, each (n, width)
    zs: list  # pre-activations z_1 .. z_{K-1}


def forward_batch(params: Params, arch: Architecture, X) -> Forward:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != arch.d:
        raise InvalidInputError(f"input dim {X.shape[1]} != {arch.d}")
    hs, zs = [X], []
    h = X
    for W in params.weights:
        z = h @ W.T
        h = arch.activation(z)
        zs.append(z)
        hs.append(h)
    return Forward(h @ params.head, hs, zs)


def predict(params: Params, arch: Architecture, X) -> np.ndarray:
    return forward_batch(params, arch, X).f


def forward(params: Params, arch: Architecture, x) -> tuple[float, list]:
    """Prediction for a single input plus all activations ``h_0 .. h_{K-1}``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (arch.d,):
        raise InvalidInputError(f"input shape {x.shape} != ({arch.d},)")
    out = forward_batch(params, arch, x[None, :])
    return float(out.f[0]), [h[0] for h in out.hs]


def logistic_pair(z):
    """``(ln(1 + e^-z), d/dz ln(1 + e^-z))`` evaluated without overflow."""
    z = np.asarray(z, dtype=np.float64)
    loss = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    e = np.exp(-np.abs(z))
    # -1/(1+e^z), split by sign so that e^z never overflows
    slope = np.where(z >= 0, -e / (1.0 + e), -1.0 / (1.0 + e))
    if loss.ndim == 0:
        return float(loss), float(slope)
    return loss, slope


def backward(params: Params, arch: Architecture, fw: Forward, g: np.ndarray, derivs=None) -> Params:
    """Gradient of ``sum_i g_i f(x_i)`` with respect to all layers.

    ``derivs`` overrides the activation derivative arrays (one per hidden
    layer), which lets callers pick other elements of the Clarke differential.
    """
    if derivs is None:
        derivs = [arch.activation.deriv(z) for z in fw.zs]
    head_grad = fw.hs[-1].T @ g
    grads = []
    if params.weights:
        delta = np.outer(g, params.head) * derivs[-1]
        for k in range(len(params.weights) - 1, -1, -1):
            grads.append(delta.T @ fw.hs[k])
            if k > 0:
                delta = (delta @ params.weights[k]) * derivs[k - 1]
        grads.reverse()
    return Params(grads, head_grad)


def grad_f(params: Params, arch: Architecture, x) -> tuple[float, Params]:
    """``f(x)`` and its gradient with respect to every layer."""
    fw = forward_batch(params, arch, np.asarray(x, dtype=np.float64)[None, :])
    return float(fw.f[0]), backward(params, arch, fw, np.ones(1))


class LossGrad(NamedTuple):
    L: float
    L_lam: float
    grad: Params  # gradient of the regularized loss
    grad_L: Params  # gradient of the data loss alone
    f: np.ndarray


def loss_and_grad(params: Params, arch: Architecture, data: Dataset, lam: float) -> LossGrad:
    if lam < 0:
        raise InvalidInputError("weight decay must be nonnegative")
    if data.n < 1:
        raise InvalidInputError("dataset is empty")
    return loss_grad_arrays(params, arch, data.X, data.y, lam)


def loss_grad_arrays(params: Params, arch: Architecture, X, y, lam: float) -> LossGrad:
    """Unchecked core of :func:`loss_and_grad` (used inside training loops)."""
    fw = forward_batch(params, arch, X)
    losses, slopes = logistic_pair(np.atleast_1d(y * fw.f))
    n = X.shape[0]
    L = float(np.mean(losses))
    g = y * slopes / n
    grad_L = backward(params, arch, fw, g)
    sq = sum(float(np.sum(a * a)) for a in params.layers())
    grad = grad_L.map(lambda gl, p: gl + lam * p, params)
    return LossGrad(L, L + 0.5 * lam * sq, grad, grad_L, fw.f)


def regularized_loss_and_grad(params, arch, data, lam):
    """``(L, L_lam, grad L_lam, grad L)``."""
    out = loss_and_grad(params, arch, data, lam)
    return out.L, out.L_lam, out.grad, out.grad_L


def loss(params: Params, arch: Architecture, data: Dataset) -> float:
    f = predict(params, arch, data.X)
    return float(np.mean(logistic_pair(np.atleast_1d(data.y * f))[0]))


def end_to_end_vector(params: Params, arch: Architecture) -> np.ndarray:
    """``w`` with ``w^T = w_K^T W_{K-1} ... W_1`` (deep linear networks only)."""
    if arch.activation.kind != "identity":
        raise UnsupportedOperationError("end-to-end vector requires identity activation")
    w = params.head.copy()
    for W in reversed(params.weights):
        w = W.T @ w
    return w


def min_abs_preactivation(params: Params, arch: Architecture, X) -> float:
    """Smallest ``|z|`` over all hidden pre-activations (inf for K=1)."""
    zs = forward_batch(params, arch, X).zs
    return min((float(np.min(np.abs(z))) for z in zs), default=float("inf"))
