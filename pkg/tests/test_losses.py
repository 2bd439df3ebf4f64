"""Margin losses, the 1-D penalized population curve, and its minimizer.

The minimizer from the grid + golden-section solver is cross-checked
against closed forms in the noiseless case and against finite-difference
stationarity in the noisy case.
"""

import math

import numpy as np
import pytest

from addmark.losses import (
    MarginLoss,
    PopulationCurve,
    check_curve_assumptions,
    objective_finite,
    solve_r_star,
)
from addmark.tensor import SeededRng


def test_hinge_values():
    loss = MarginLoss("hinge")
    assert loss.value(0.0) == 1.0
    assert loss.value(1.0) == 0.0
    assert loss.value(3.0) == 0.0
    assert loss.value(-2.0) == 3.0


def test_logistic_values():
    loss = MarginLoss("logistic")
    assert loss.value(0.0) == pytest.approx(math.log(2.0))
    # stable for extreme arguments
    assert loss.value(1000.0) == pytest.approx(0.0, abs=1e-12)
    assert loss.value(-1000.0) == pytest.approx(1000.0, rel=1e-12)


def test_subgradients_match_finite_differences():
    h = 1e-6
    for kind in ("hinge", "logistic"):
        loss = MarginLoss(kind)
        for t in (-2.0, -0.5, 0.0, 0.5, 2.0, 5.0):
            if kind == "hinge" and abs(t - 1.0) < 2 * h:
                continue  # kink
            fd = (loss.value(t + h) - loss.value(t - h)) / (2 * h)
            assert loss.subgradient(t) == pytest.approx(fd, abs=1e-5)


def test_subgradient_range():
    for kind in ("hinge", "logistic"):
        loss = MarginLoss(kind)
        g = loss.subgradient(np.linspace(-10, 10, 101))
        assert np.all(g <= 0.0) and np.all(g >= -1.0)


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        MarginLoss("exponential")


def test_phi_noiseless_equals_loss():
    for kind in ("hinge", "logistic"):
        curve = PopulationCurve(MarginLoss(kind), 0.0, 0.1)
        r = np.array([0.0, 0.5, 1.0, 2.0])
        np.testing.assert_allclose(curve.phi(r), MarginLoss(kind).value(r))


def test_phi_matches_monte_carlo():
    curve = PopulationCurve(MarginLoss("hinge"), 0.3, 0.05)
    g = SeededRng(1).generator
    z = g.standard_normal(400000)
    for r in (0.5, 1.0, 2.0):
        mc = np.mean(np.maximum(1.0 - (r + 0.3 * math.sqrt(r) * z), 0.0))
        assert curve.phi(r) == pytest.approx(mc, abs=3e-3)


def test_curve_assumption_errors_name_inequality():
    with pytest.raises(ValueError, match="sigma_eps\\^2 < 4"):
        check_curve_assumptions(PopulationCurve(MarginLoss("hinge"), 2.5, 0.1))
    with pytest.raises(ValueError, match="beta < 1"):
        check_curve_assumptions(PopulationCurve(MarginLoss("hinge"), 0.3, 1.5))
    with pytest.raises(ValueError, match="-4\\+2\\*sqrt\\(6\\)"):
        check_curve_assumptions(PopulationCurve(MarginLoss("logistic"), 1.0, 0.1))
    with pytest.raises(ValueError, match="1/2 - sigma_eps\\^2/8"):
        check_curve_assumptions(PopulationCurve(MarginLoss("logistic"), 0.3, 0.49))


def test_r_star_hinge_noiseless_closed_form():
    # h(r) = (1 - r)_+ + beta r has minimizer r = 1 for beta < 1
    curve = PopulationCurve(MarginLoss("hinge"), 0.0, 0.5)
    r_star, h_min = solve_r_star(curve)
    assert r_star == pytest.approx(1.0, abs=1e-5)
    assert h_min == pytest.approx(0.5, abs=1e-5)


def test_r_star_logistic_noiseless_closed_form():
    # d/dr [log(1+e^-r) + beta r] = 0  =>  r = ln(1/beta - 1)
    curve = PopulationCurve(MarginLoss("logistic"), 0.0, 0.25)
    r_star, _ = solve_r_star(curve)
    assert r_star == pytest.approx(math.log(3.0), abs=1e-5)


def test_r_star_is_stationary_under_noise():
    curve = PopulationCurve(MarginLoss("logistic"), 0.3, 0.05)
    r_star, h_min = solve_r_star(curve)
    h = 1e-4
    lo = float(curve.h_pop(r_star - h))
    hi = float(curve.h_pop(r_star + h))
    assert lo >= h_min - 1e-10 and hi >= h_min - 1e-10
    fd = (hi - lo) / (2 * h)
    assert abs(fd) < 1e-3


def test_harness_r_star_pinned():
    curve = PopulationCurve(MarginLoss("hinge"), 0.3, 0.05)
    r_star, _ = solve_r_star(curve)
    assert r_star == pytest.approx(1.5365169, abs=1e-4)


def test_objective_finite_exhaustive_vs_monte_carlo():
    rng = SeededRng(2)
    g = rng.generator
    W = 0.3 * g.standard_normal((4, 20))
    X = g.standard_normal((50, 20))
    loss = MarginLoss("logistic")
    exact = objective_finite(W, X, loss, 0.05)
    mc = objective_finite(W, X, loss, 0.05, rng=SeededRng(3), exhaustive=False)
    assert mc == pytest.approx(exact, rel=0.05)


def test_objective_finite_zero_watermark():
    # at W = 0 every margin is 0, so the objective is K * V(0)
    X = SeededRng(4).generator.standard_normal((10, 6))
    for kind in ("hinge", "logistic"):
        loss = MarginLoss(kind)
        val = objective_finite(np.zeros((3, 6)), X, loss, 0.1)
        assert val == pytest.approx(3 * loss.value_at_zero(), abs=1e-12)
