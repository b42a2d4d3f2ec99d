from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gedoe.design import Design
from gedoe.gegpr import (
    GegprModel,
    HyperparameterBounds,
    NotFittedError,
    TrainingSet,
    assemble_covariance,
    fit,
    log_marginal_likelihood,
    optimize_hyperparameters,
    predict,
    predictive_variance_traces,
    prior_traces,
)
from gedoe.kernel import KernelParams, gram_matrix, joint_cross_covariance

from conftest import central_diff


def value_only(points, values, tol):
    points = np.atleast_2d(points)
    n = len(points)
    design = Design(points, np.full(n, tol), np.full(n, math.inf))
    return TrainingSet(design, np.asarray(values, dtype=float).reshape(n, -1), np.full((n, np.shape(values)[-1] if np.ndim(values) > 1 else 1, points.shape[1]), np.nan))


def random_training(seed, n=8, m=2, d=2, grad_frac=0.5, tol=0.05):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 2, (n, d))
    has = rng.random(n) < grad_frac
    tv = np.full(n, tol)
    tg = np.where(has, tol, math.inf)
    values = np.column_stack([np.sin(P @ rng.normal(size=d)) for _ in range(m)])
    grads = np.full((n, m, d), np.nan)
    grads[has] = rng.normal(size=(has.sum(), m, d))
    return TrainingSet(Design(P, tv, tg), values, grads)


# -- assembly ---------------------------------------------------------------

def test_assembly_single_value_point():
    A = assemble_covariance([[0.3, 0.4]], [0.1], [math.inf], KernelParams(1.0, (1.0,)))
    assert len(A) == 1
    np.testing.assert_allclose(A[0], [[1.01]], rtol=1e-15)


def test_assembly_single_gradient_point():
    A = assemble_covariance([[0.3, 0.4]], [1e-300], [1e-300], KernelParams(3.0, (1.0,)))
    np.testing.assert_allclose(A[0], np.diag([1.0, 6.0, 6.0]), atol=1e-15)


def test_assembly_permutation_symmetry():
    P = np.array([[0.1, 0.2], [1.3, 0.7]])
    params = KernelParams(0.7, (1.0, 2.0))
    A = assemble_covariance(P, [0.1, 0.2], [0.1, 0.2], params)
    B = assemble_covariance(P[::-1], [0.2, 0.1], [0.2, 0.1], params)
    # rows are (v1, v2, g1x, g1y, g2x, g2y); swapping points permutes them
    perm = [1, 0, 4, 5, 2, 3]
    for a, b in zip(A, B):
        np.testing.assert_allclose(a[np.ix_(perm, perm)], b, rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(a, a.T, rtol=0, atol=1e-15)


def test_assembly_matches_independent_construction():
    rng = np.random.default_rng(3)
    P = rng.uniform(0, 2, (4, 2))
    tv = np.array([0.1, 0.2, 0.05, 0.3])
    tg = np.array([0.1, math.inf, 0.05, math.inf])
    sigma = 0.9
    A = assemble_covariance(P, tv, tg, KernelParams(sigma, (2.0,)))[0]
    C = joint_cross_covariance(P, P, sigma)
    rows = [(i, 0) for i in range(4)] + [(i, 1 + a) for i in (0, 2) for a in range(2)]
    ref = np.array([[C[i, a, j, b] for (j, b) in rows] for (i, a) in rows]) * 2.0
    ref += np.diag(np.concatenate([tv**2, [0.01, 0.01, 0.0025, 0.0025]]))
    np.testing.assert_allclose(A, ref, rtol=1e-14)


# -- conditioning -------------------------------------------------------------

def test_scalar_conditioning_closed_form():
    y, tau = 1.7, 0.3
    model = fit(value_only([[0.5, 0.5]], [[y]], tau), KernelParams(1.0, (1.0,)), zeta=[0.0])
    post = predict(model, [0.5, 0.5])
    assert post.mean_value[0] == pytest.approx(y / (1 + tau**2), rel=1e-14)
    assert post.cov_value[0] == pytest.approx(tau**2 / (1 + tau**2), rel=1e-12)


def test_value_only_matches_textbook_formula():
    rng = np.random.default_rng(4)
    P = rng.uniform(0, 2, (6, 2))
    y = np.sin(P[:, 0]) + P[:, 1]
    tau, sigma, s = 0.05, 0.8, 1.5
    model = fit(value_only(P, y[:, None], tau), KernelParams(sigma, (s,)))
    zeta = y.mean()
    K = s * gram_matrix(P, sigma) + tau**2 * np.eye(6)
    X = rng.uniform(0, 2, (5, 2))
    kx = s * np.exp(-sigma * ((X[:, None, :] - P[None]) ** 2).sum(-1))
    mean = zeta + kx @ np.linalg.solve(K, y - zeta)
    var = s - np.einsum("ij,ji->i", kx, np.linalg.solve(K, kx.T))
    m, cov = model.predict_batch(X)
    np.testing.assert_allclose(m[:, 0, 0], mean, rtol=1e-10)
    np.testing.assert_allclose(cov[:, 0, 0, 0], var, rtol=1e-8, atol=1e-14)


def test_interpolation_limit_with_gradients():
    P = np.array([[0.5, 0.5], [1.5, 1.0]])
    vals = np.array([[1.0], [2.0]])
    grads = np.array([[[0.3, -0.2]], [[1.0, 0.5]]])
    tr = TrainingSet(Design(P, [1e-7, 1e-7], [1e-7, 1e-7]), vals, grads)
    model = fit(tr, KernelParams(1.0, (1.0,)))
    for i in range(2):
        post = predict(model, P[i])
        np.testing.assert_allclose(post.mean_value, vals[i], atol=1e-6)
        np.testing.assert_allclose(post.mean_grad, grads[i], atol=1e-5)
        assert post.cov_value[0] < 1e-10


def test_constant_data_gives_constant_mean():
    tr = random_training(5)
    const = TrainingSet(tr.design, np.full_like(tr.values, 3.25),
                        np.where(np.isnan(tr.gradients), np.nan, 0.0))
    model = fit(const, KernelParams(1.2, (1.0, 0.5)))
    X = np.random.default_rng(0).uniform(-1, 3, (20, 2))
    mean, _ = model.predict_batch(X, with_cov=False)
    np.testing.assert_allclose(mean[..., 0], 3.25, rtol=1e-12)
    np.testing.assert_allclose(mean[..., 1:], 0.0, atol=1e-12)


def test_far_field_reverts_to_prior():
    tr = random_training(6)
    params = KernelParams(1.0, (0.7, 2.0))
    model = fit(tr, params)
    post = predict(model, [40.0, 40.0])
    assert post.extrapolated is False  # no box given
    np.testing.assert_allclose(post.mean_value, model.zeta, rtol=1e-12)
    np.testing.assert_allclose(post.cov_value, params.output_scales, rtol=1e-12)
    boxed = fit(tr, params, box=([0, 0], [2, 2]))
    assert predict(boxed, [40.0, 40.0]).extrapolated


def test_errors():
    with pytest.raises(NotFittedError):
        predict(object(), [0.0, 0.0])
    with pytest.raises(ValueError):
        fit(TrainingSet(Design.empty(2), np.empty((0, 1)), np.empty((0, 1, 2))), KernelParams(1.0, (1.0,)))
    tr = random_training(0)
    with pytest.raises(ValueError):
        fit(tr, KernelParams(1.0, (1.0,)))  # wrong number of output scales
    bad = np.array(tr.gradients)
    bad[~tr.design.has_grad] = 0.0
    with pytest.raises(ValueError):
        TrainingSet(tr.design, tr.values, bad)


def test_gradient_consistency_at_50_queries():
    tr = random_training(7, n=10, m=3)
    model = fit(tr, KernelParams(0.9, (1.0, 0.3, 2.0)))
    X = np.random.default_rng(8).uniform(0, 2, (50, 2))
    for x in X:
        _, jac = model.mean_and_jacobian(x)
        fd = central_diff(lambda z: model.mean_and_jacobian(z)[0], x)
        assert np.max(np.abs(fd - jac)) <= 1e-5 * max(np.max(np.abs(jac)), 1.0)


def test_per_component_decomposition():
    tr = random_training(9, m=2)
    params = KernelParams(0.8, (0.5, 3.0))
    joint = fit(tr, params)
    X = np.random.default_rng(1).uniform(0, 2, (7, 2))
    mean, cov = joint.predict_batch(X)
    for r in range(2):
        single = TrainingSet(tr.design, tr.values[:, [r]], tr.gradients[:, [r]])
        mr, cr = fit(single, KernelParams(0.8, (params.output_scales[r],))).predict_batch(X)
        np.testing.assert_allclose(mean[:, r], mr[:, 0], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(cov[:, r], cr[:, 0], rtol=1e-10, atol=1e-14)


def test_training_order_invariance():
    tr = random_training(10)
    perm = np.random.default_rng(0).permutation(len(tr.design))
    d = tr.design
    shuffled = TrainingSet(Design(d.points[perm], d.tol_value[perm], d.tol_grad[perm]),
                           tr.values[perm], tr.gradients[perm])
    params = KernelParams(1.1, (1.0, 1.0))
    X = np.random.default_rng(2).uniform(0, 2, (5, 2))
    a = fit(tr, params).predict_batch(X)
    b = fit(shuffled, params).predict_batch(X)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-9, atol=1e-12)


# -- variance traces ----------------------------------------------------------

def test_prior_traces():
    params = KernelParams(1.5, (1.0, 2.0, 0.5))
    eps, eps_g = prior_traces(params, 2)
    assert eps == pytest.approx(3.5)
    assert eps_g == pytest.approx(2 * 1.5 * 2 * 3.5)


def test_exact_hypothetical_kills_variance():
    model = fit(random_training(11), KernelParams(1.0, (1.0, 1.0)))
    eps, eps_g = predictive_variance_traces(model, [1.23, 0.45], (0.0, 0.0))
    assert eps == pytest.approx(0.0, abs=1e-10)
    assert eps_g == pytest.approx(0.0, abs=1e-10)


def test_hypothetical_update_matches_refit():
    model = fit(random_training(12), KernelParams(0.9, (1.0, 2.0)))
    p = np.array([0.77, 1.31])
    for tv, tg in ((0.1, math.inf), (0.05, 0.05), (0.02, 0.3)):
        eps, eps_g = predictive_variance_traces(model, p, (tv, tg))
        aug = model.with_hypothetical(p, tv, tg)
        ref = predictive_variance_traces(aug, p)
        assert eps == pytest.approx(ref[0], rel=1e-7, abs=1e-12)
        assert eps_g == pytest.approx(ref[1], rel=1e-7, abs=1e-12)
        # the hypothetical update at p also agrees away from p
        q = np.array([[0.5, 0.5]])
        _, c_aug = aug.predict_batch(q)
        assert np.all(np.isfinite(c_aug))


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.1, 0.99))
def test_hypothetical_monotone_in_tau(tau, shrink):
    model = fit(random_training(13), KernelParams(1.0, (1.0, 1.0)))
    p = [0.9, 1.7]
    big = predictive_variance_traces(model, p, (tau, math.inf))
    small = predictive_variance_traces(model, p, (tau * shrink, math.inf))
    assert small[0] <= big[0] + 1e-12


def test_trace_monotonicity_in_tolerances_at_100_queries():
    rng = np.random.default_rng(14)
    tr = random_training(14, n=9, grad_frac=0.6)
    params = KernelParams(0.8, (1.0, 0.5))
    X = rng.uniform(0, 2, (100, 2))
    base = fit(tr, params)
    eps0, epsg0 = base.traces(X)
    d = tr.design
    for _ in range(10):
        shrink = rng.uniform(0.05, 1.0, len(d))
        refined = TrainingSet(Design(d.points, d.tol_value * shrink, d.tol_grad * shrink), tr.values, tr.gradients)
        eps1, epsg1 = fit(refined, params).traces(X)
        assert np.all(eps1 <= eps0 + 1e-10)
        assert np.all(epsg1 <= epsg0 + 1e-10)


# -- hyperparameters ------------------------------------------------------------

def _prior_sample(sigma, n, seed, tol=1e-3):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 2, (n, 2))
    K = np.exp(-sigma * ((P[:, None] - P[None]) ** 2).sum(-1)) + tol**2 * np.eye(n)
    y = np.linalg.cholesky(K + 1e-10 * np.eye(n)) @ rng.standard_normal(n)
    return value_only(P, y[:, None], tol)


def test_sigma_recovery_from_prior_samples():
    sigma_true = 3.0
    found = [optimize_hyperparameters(_prior_sample(sigma_true, 20, seed)).params.sigma for seed in range(10)]
    med = float(np.median(found))
    assert sigma_true / 2 <= med <= sigma_true * 2


def test_constant_data_drives_scale_to_lower_bound():
    tr = value_only(np.random.default_rng(0).uniform(0, 2, (6, 2)), np.full((6, 1), 2.0), 0.01)
    bounds = HyperparameterBounds(output_scale=(1e-6, 1e6))
    fitp = optimize_hyperparameters(tr, bounds).params
    assert fitp.output_scales[0] == pytest.approx(1e-6, rel=1e-3)


def test_optimizer_improves_on_init():
    tr = _prior_sample(2.0, 15, 3, tol=0.01)
    init = KernelParams(0.7, (0.3,))
    res = optimize_hyperparameters(tr, init=init)
    assert res.log_likelihood >= log_marginal_likelihood(tr, init) - 1e-9
    assert res.log_likelihood == pytest.approx(log_marginal_likelihood(tr, res.params), rel=1e-10)
    assert not res.degraded


def test_optimizer_needs_two_points():
    with pytest.raises(ValueError):
        optimize_hyperparameters(value_only([[0.0, 0.0]], [[1.0]], 0.1))


def test_model_round_trip():
    model = fit(random_training(15), KernelParams(1.0, (1.0, 2.0)), box=([0, 0], [2, 2]))
    back = GegprModel.from_dict(model.to_dict())
    X = np.random.default_rng(0).uniform(0, 2, (4, 2))
    np.testing.assert_array_equal(back.predict_batch(X)[0], model.predict_batch(X)[0])
