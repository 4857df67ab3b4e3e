import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_data, random_net, unit_rows
from wdlab.errors import InvalidInputError, InvalidRegimeError
from wdlab.merging import (
    BoundValue,
    MergeBoundInputs,
    bound_eval,
    cross_task_epsilon,
    deep_linear_constants,
    merge_gap_eval,
    merge_params,
    shallow_gap_curve,
)
from wdlab.model import Architecture, Params


def test_merge_identity_and_commutativity(rng):
    arch, p = random_net(rng)
    _, q = random_net(rng)
    zero = Params.zeros(arch)
    assert np.array_equal(merge_params(p, zero).flat(), p.flat())
    assert np.array_equal(merge_params(p, q).flat(), merge_params(q, p).flat())


def test_merge_shape_mismatch(rng):
    _, p = random_net(rng, 5, (4,))
    _, q = random_net(rng, 5, (3,))
    with pytest.raises(InvalidInputError):
        merge_params(p, q)


def test_fixed_head_merge(rng):
    arch, p = random_net(rng, 3, (2,))
    q = p.copy()
    q.weights[0] = rng.normal(size=q.weights[0].shape)
    m = merge_params(p, q, fixed_head=True)
    assert np.array_equal(m.head, p.head)
    assert np.array_equal(m.weights[0], p.weights[0] + q.weights[0])
    q.head = q.head + 1.0
    with pytest.raises(InvalidInputError):
        merge_params(p, q, fixed_head=True)


def test_epsilon_examples():
    assert cross_task_epsilon([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    assert cross_task_epsilon([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]) == 1.0
    c, s = math.cos(math.pi / 3), math.sin(math.pi / 3)
    assert cross_task_epsilon([[1.0, 0.0]], [[c, s]]) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(InvalidInputError):
        cross_task_epsilon(np.zeros((0, 2)), [[1.0, 0.0]])


def test_gap_zero_for_zero_other(rng):
    arch, p = random_net(rng)
    X = unit_rows(rng, 4, 5)
    rep = merge_gap_eval(p, Params.zeros(arch), arch, X, y=np.ones(4))
    assert rep.max_gap == 0.0 and rep.loss_gap == 0.0


def test_shallow_example_against_mpmath():
    mp.mp.dps = 50
    oracle = float((1 - mp.mpf("1e-4")) ** 100000)
    b = bound_eval(MergeBoundInputs("shallow", lam=1e-4, t=1e5, eps=0.0, eta=1.0, init_term=1.0))
    assert b.value == pytest.approx(oracle, rel=1e-12)
    # frozen oracle value (the rounded figure quoted in the design notes differs in the 4th digit)
    assert b.value == pytest.approx(4.5376e-5, rel=1e-4)


def test_zero_inputs_give_zero_bound():
    for kind in ("linear", "shallow"):
        assert bound_eval(MergeBoundInputs(kind, lam=0.1, t=10, eta=0.5)).value == 0.0
    b = bound_eval(MergeBoundInputs("deep_linear", lam=0.1, t=1.0, K=2, C=math.log(2), w0_norm2=1.0))
    assert b.value == 0.0


def _deep_oracle(lam, K, C, w2, t):
    """Independent mpmath evaluation of the deep linear constants."""
    mp.mp.dps = 50
    lam, C, w2, t = map(mp.mpf, (lam, C, w2, t))
    B = w2 + C / lam
    p = B ** (2 - mp.mpf(2) / K)
    log_A1 = p * (K - 1) * (1 + lam * K) * C / (2 * lam * K)
    A1 = mp.e**log_A1
    A2 = 2 * p * C * A1 * -mp.expm1(-lam * K * t / 2) / (lam * K)
    return B, A1, A2, log_A1


def test_deep_linear_example():
    c = deep_linear_constants(0.1, 2, math.log(2), 1.0, 3.0)
    B, A1, A2, _ = _deep_oracle(0.1, 2, math.log(2), 1.0, 3.0)
    assert c["B"] == pytest.approx(7.9315, abs=1e-4)
    assert c["B"] == pytest.approx(float(B), rel=1e-14)
    assert c["A1"] == pytest.approx(float(A1), rel=1e-12)
    assert c["A2"] == pytest.approx(float(A2), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 2.0), st.integers(2, 5), st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.floats(0.0, 20.0))
def test_deep_linear_against_oracle(lam, K, C, w2, t):
    c = deep_linear_constants(lam, K, C, w2, t)
    B, A1, A2, log_A1 = _deep_oracle(lam, K, C, w2, t)
    assert c["B"] == pytest.approx(float(B), rel=1e-12)
    assert c["log_A1"] == pytest.approx(float(log_A1), rel=1e-10, abs=1e-300)
    if math.isfinite(c["A1"]):
        assert c["A2"] == pytest.approx(float(A2), rel=1e-9, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from(["linear", "shallow"]),
    st.floats(1e-4, 0.5),
    st.floats(0.1, 1.0),
    st.integers(0, 10**5),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_monotonicity(kind, lam, eta, t, eps, init, bump):
    base = MergeBoundInputs(kind, lam=lam, t=t, eps=eps, eta=eta, init_term=init)
    v = bound_eval(base)
    more_eps = bound_eval(MergeBoundInputs(kind, lam=lam, t=t, eps=eps + bump, eta=eta, init_term=init))
    more_init = bound_eval(MergeBoundInputs(kind, lam=lam, t=t, eps=eps, eta=eta, init_term=init + bump))
    later = bound_eval(MergeBoundInputs(kind, lam=lam, t=t + 1, eps=eps, eta=eta, init_term=init))
    assert more_eps.value >= v.value and more_init.value >= v.value
    if init > 0 and v.components["decay_term"] > 1e-300:
        assert later.components["decay_term"] < v.components["decay_term"]


def test_invalid_regime():
    with pytest.raises(InvalidRegimeError):
        bound_eval(MergeBoundInputs("shallow", lam=1.0, t=1, eta=1.0))
    with pytest.raises(InvalidInputError):
        MergeBoundInputs("shallow", lam=-1.0)
    with pytest.raises(InvalidInputError):
        MergeBoundInputs("nope")


def test_loss_transfer():
    b = bound_eval(MergeBoundInputs("loss_transfer", base_loss=0.3, transfer_norms=np.array([0.1, 0.3])))
    assert b.value == pytest.approx(0.5) and isinstance(b, BoundValue)


def test_shallow_recursion_is_tight(rng):
    # exact GD recursion on the other task: W' moves only in the span of its inputs
    d, m = 6, 4
    X = np.zeros((3, d))
    X[:, :3] = unit_rows(rng, 3, 3)
    Xp = np.zeros((3, d))
    Xp[:, 3:] = unit_rows(rng, 3, 3)
    eta, lam = 0.5, 0.01
    W = rng.normal(size=(m, d))
    Ws, steps = [], []
    for t in range(50):
        steps.append(t)
        Ws.append(W.copy())
        G = rng.normal(size=(m, 3)) @ Xp
        W = (1 - eta * lam) * W - eta * G
    rows = shallow_gap_curve(steps, Ws, Ws[0], X, eta, lam, 0.0)
    for r in rows:
        assert r["measured_gap"] <= r["bound"] * (1 + 1e-12) + 1e-15
    assert rows[-1]["measured_gap"] == pytest.approx(rows[-1]["bound"], rel=1e-10)
