from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gedoe.design import WorkModelParams
from gedoe.forward import (
    Evaluator,
    LinearModel,
    OutOfDomainError,
    ParabolicCylinderModel,
    UnknownModelError,
    available_models,
    evaluate,
    get_model,
    noise_rng,
    parabolic_cylinder,
    register_model,
)

from conftest import central_diff


def test_parabolic_cylinder_example():
    y, g = parabolic_cylinder([1.0, 1.5], 0.0)
    assert y == pytest.approx(6.25, rel=1e-15)
    np.testing.assert_allclose(g, [5.0, 5.0], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 2 * math.pi), st.floats(0.0, 2.0))
def test_parabolic_cylinder_zero_set(phi, t):
    # points with cos(phi)(p1+p2) = sin(phi)(p1-p2): p = t * (sin+cos, sin-cos)
    c, s = math.cos(phi), math.sin(phi)
    p = t * np.array([s + c, s - c])
    y, g = parabolic_cylinder(p, phi)
    assert abs(y) <= 1e-24 + 1e-28 * t
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(0.0, 2.0)), st.floats(0.0, 2 * math.pi))
def test_gradient_matches_finite_differences(p, phi):
    fd = central_diff(lambda x: parabolic_cylinder(x, phi)[0], p, h=1e-6)
    np.testing.assert_allclose(fd, parabolic_cylinder(p, phi)[1], rtol=0, atol=1e-8)


def test_benchmark_model_stacks_angles():
    fm = get_model("parabolic_cylinder")
    assert (fm.spec.d, fm.spec.m) == (2, 3)
    p = np.array([0.3, 1.7])
    y, J = fm(p)
    for r, phi in enumerate((0.0, 2.0, 4.0)):
        yr, gr = parabolic_cylinder(p, phi)
        assert y[r] == yr
        np.testing.assert_array_equal(J[r], gr)
    X = np.random.default_rng(0).uniform(0, 2, (5, 2))
    Y, JJ = fm.mean_and_jacobian_batch(X)
    for i, x in enumerate(X):
        yi, Ji = fm(x)
        np.testing.assert_allclose(Y[i], yi, rtol=1e-14)
        np.testing.assert_allclose(JJ[i], Ji, rtol=1e-14)


def test_registry():
    assert "parabolic_cylinder" in available_models()
    with pytest.raises(UnknownModelError):
        get_model("nope")
    register_model("lin_test", lambda: LinearModel(np.eye(2)))
    assert isinstance(get_model("lin_test"), LinearModel)
    assert isinstance(get_model("parabolic_cylinder"), ParabolicCylinderModel)


def test_evaluate_contract():
    fm = get_model("parabolic_cylinder")
    rng = noise_rng(0, 0)
    with pytest.raises(OutOfDomainError):
        evaluate(fm, [2.5, 0.0], 0.1, math.inf, rng)
    with pytest.raises(ValueError):
        evaluate(fm, [0.5, 0.5], 0.1, 0.05, rng)
    with pytest.raises(ValueError):
        evaluate(fm, [0.5, 0.5], math.inf, math.inf, rng)
    ev = evaluate(fm, [0.5, 0.5], 0.01, math.inf, rng, WorkModelParams())
    assert ev.gradient is None and ev.charged_work == pytest.approx(100.0)
    ev = evaluate(fm, [0.5, 0.5], 0.01, 0.01, rng, WorkModelParams())
    assert ev.gradient.shape == (3, 2) and ev.charged_work == pytest.approx(200.0)


def test_vanishing_noise_returns_exact_values():
    fm = get_model("parabolic_cylinder")
    p = np.array([1.2, 0.4])
    ev = evaluate(fm, p, 1e-10, 1e-10, noise_rng(3, 0))
    y, J = fm(p)
    np.testing.assert_allclose(ev.value, y, rtol=0, atol=1e-8)
    np.testing.assert_allclose(ev.gradient, J, rtol=0, atol=1e-8)


def test_noise_determinism_and_independence():
    fm = get_model("parabolic_cylinder")
    a = evaluate(fm, [1.0, 1.0], 0.1, 0.1, noise_rng(5, 7))
    b = evaluate(fm, [1.0, 1.0], 0.1, 0.1, noise_rng(5, 7))
    c = evaluate(fm, [1.0, 1.0], 0.1, 0.1, noise_rng(5, 8))
    np.testing.assert_array_equal(a.value, b.value)
    np.testing.assert_array_equal(a.gradient, b.gradient)
    assert not np.array_equal(a.value, c.value)


def test_noise_variance_matches_tolerance():
    fm = get_model("parabolic_cylinder")
    p, tau = np.array([0.7, 1.1]), 0.05
    y, _ = fm(p)
    draws = np.array([evaluate(fm, p, tau, math.inf, noise_rng(11, k)).value - y for k in range(10_000)])
    var = draws.var(axis=0)
    np.testing.assert_allclose(var, tau**2, rtol=0.05)
    corr = np.corrcoef(draws[:-1, 0], draws[1:, 0])[0, 1]
    assert abs(corr) < 0.05


def test_evaluator_ledger_and_charge_override():
    ev = Evaluator("parabolic_cylinder", WorkModelParams(), seed=1)
    ev([0.5, 0.5], 0.1)
    ev([0.5, 0.5], 0.01, 0.01, charge=190.0)
    assert ev.counter == 2
    assert ev.total_work == pytest.approx(10.0 + 190.0)
