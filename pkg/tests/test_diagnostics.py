import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_data, random_net
from wdlab.diagnostics import (
    alignment_residual,
    clarke_residual,
    euler_identity_check,
    pseudo_rank_weights,
    norm_preservation_report,
    off_kink,
    pseudo_rank_report,
    rank1_check,
    stationarity_report,
    zero_solution_diagnostic,
)
from wdlab.errors import DegenerateInputError, InvalidInputError, KinkError, UnsupportedOperationError
from wdlab.model import IDENTITY, Architecture, Params, loss_and_grad
from wdlab.optimize import init_params, polish_to_stationary


@pytest.fixture(scope="module")
def stationary_linear():
    rng = np.random.default_rng(4)
    arch = Architecture(4, (3, 3), IDENTITY)
    data = random_data(rng, 6, 4)
    lam = 0.02
    res = polish_to_stationary(init_params(arch, "xavier", 0), arch, data, lam, tol=1e-11)
    assert res.converged
    return arch, data, lam, res.params


def test_alignment_equals_gradient_norm(rng):
    arch, p = random_net(rng, 4, (3,))
    data = random_data(rng, 5, 4)
    r = alignment_residual(p, arch, data, 0.1)
    assert r == pytest.approx(np.linalg.norm(loss_and_grad(p, arch, data, 0.1).grad.flat()), rel=1e-12)
    with pytest.raises(InvalidInputError):
        alignment_residual(p, arch, data, 0.0)


def test_norm_preservation_at_stationary(stationary_linear):
    arch, data, lam, p = stationary_linear
    rep = norm_preservation_report(p, arch, data, lam)
    assert rep.max_residual < 1e-7
    assert rep.fro_spread < 1e-7
    assert np.allclose(rep.targets, rep.fro, rtol=1e-7)


def test_rank_one_at_stationary(stationary_linear):
    _, _, _, p = stationary_linear
    assert rank1_check(p).passed


def test_pseudo_rank_bound_at_stationary(stationary_linear):
    arch, data, lam, p = stationary_linear
    rep = pseudo_rank_report(p, arch, data, lam)
    assert rep.holds
    assert rep.pseudo_rank == pytest.approx(1.0, abs=1e-6)


def test_pseudo_rank_weights_hand_values():
    w, Z = pseudo_rank_weights(Architecture(3, (2, 2), IDENTITY))
    assert Z == 3.0 and np.allclose(w, [1 / 3] * 3)
    from wdlab.model import Activation

    w2, Z2 = pseudo_rank_weights(Architecture(3, (2, 2), Activation("relu_power", 2)))
    assert Z2 == 7.0
    assert np.allclose(w2, np.array([4.0, 2.0, 1.0]) ** 1.5 / 7.0)


def test_rank1_detects_full_rank():
    rep = rank1_check(Params([np.eye(3)], np.ones(3)))
    assert not rep.passed and rep.ratios == [pytest.approx(1.0)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clarke_never_exceeds_plain(seed):
    rng = np.random.default_rng(seed)
    arch, p = random_net(rng, 3, (3,))
    data = random_data(rng, 4, 3)
    # plant kinks: zero a hidden unit's weights
    p.weights[0][0] = 0.0
    cr, n_kinks = clarke_residual(p, arch, data, 0.1)
    assert n_kinks >= data.n
    assert cr <= alignment_residual(p, arch, data, 0.1) + 1e-12


def test_euler_kink_error_and_off_kink(rng):
    arch = Architecture(2, (1,))
    p = Params([np.array([[1.0, -1.0]])], np.array([1.0]))
    x = np.array([0.5, 0.5])
    with pytest.raises(KinkError):
        euler_identity_check(p, arch, x)
    x2 = off_kink(p, arch, x, rng)
    assert np.linalg.norm(x2 - x) < 1e-7
    assert max(euler_identity_check(p, arch, x2)) < 1e-8


def test_zero_solution_threshold():
    small = zero_solution_diagnostic(1e-4, 3)
    big = zero_solution_diagnostic(10.0, 3)
    assert small.status == "ok" and small.nonzero_critical_point
    assert not big.nonzero_critical_point
    assert 1e-4 < small.threshold_estimate < 10.0
    # H = 1: three weights of 1/3 sum to one
    assert small.C_HK == pytest.approx(1.0, rel=1e-12)
    assert zero_solution_diagnostic(0.1, 1).status == "not_applicable"
    with pytest.raises(UnsupportedOperationError):
        zero_solution_diagnostic(0.1, 3, H=2)


def test_report_serializes(stationary_linear):
    arch, data, lam, p = stationary_linear
    rep = stationarity_report(p, arch, data, lam, theta0=init_params(arch, "xavier", 0))
    doc = json.loads(rep.to_json())
    assert doc["residual"] < 1e-9
    header, row = rep.to_csv().strip().split("\n")
    assert header.split(",")[0] == "lam"
    assert float(row.split(",")[0]) == lam


def test_degenerate_zero_params():
    arch = Architecture(2, (2,), IDENTITY)
    data = random_data(np.random.default_rng(0), 3, 2)
    with pytest.raises(DegenerateInputError):
        norm_preservation_report(Params.zeros(arch), arch, data, 0.1)
    with pytest.raises(DegenerateInputError):
        pseudo_rank_report(Params.zeros(arch), arch, data, 0.1)
