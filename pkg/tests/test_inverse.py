from __future__ import annotations

import numpy as np
import pytest

from gedoe.forward import LinearModel, get_model
from gedoe.inverse import InverseProblem, gauss_newton, reconstruct, sampled_true_error


class Shifted:
    """An exact model with a constant bias added to its output."""

    def __init__(self, base, bias):
        self.base, self.bias = base, bias

    def mean_and_jacobian(self, p):
        y, J = self.base.mean_and_jacobian(p)
        return y + self.bias, J


def _problem(y, m, d, prior=None, lower=None, upper=None, Sl=None):
    return InverseProblem(
        np.asarray(y, dtype=float),
        np.eye(m) if Sl is None else Sl,
        prior,
        np.zeros(d),
        np.full(d, -1e6) if lower is None else lower,
        np.full(d, 1e6) if upper is None else upper,
    )


def test_linear_model_one_step():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    Sl = np.diag(rng.uniform(0.5, 2.0, 5))
    W = np.linalg.inv(Sl)
    p_ls = np.linalg.solve(A.T @ W @ A, A.T @ W @ y)
    p, rep = gauss_newton(_problem(y, 5, 3, Sl=Sl), LinearModel(A), np.zeros(3))
    np.testing.assert_allclose(p, p_ls, rtol=1e-10, atol=1e-12)
    assert rep.converged and rep.iterations == 1


def test_zero_residual_recovery_on_benchmark():
    fm = get_model("parabolic_cylinder")
    p_true = np.array([1.0, 1.5])
    y, _ = fm(p_true)
    prob = InverseProblem(y, 1e-2 * np.diag([1, 0.1, 1]), None, np.ones(2), *fm.spec.box)
    p, rep = gauss_newton(prob, fm, p_true + np.array([0.05, -0.04]))
    assert rep.converged
    assert np.linalg.norm(p - p_true) <= 1e-8


def test_first_order_condition_without_prior():
    fm = get_model("parabolic_cylinder")
    rng = np.random.default_rng(2)
    y, _ = fm([0.8, 1.3])
    Sl = 1e-2 * np.diag([1, 0.1, 1])
    prob = InverseProblem(y + 0.05 * rng.normal(size=3), Sl, None, np.ones(2), *fm.spec.box)
    p, rep = gauss_newton(prob, fm, [0.8, 1.3], gtol=1e-10)
    yp, J = fm(p)
    assert rep.converged and not any(rep.active_bounds)
    assert np.linalg.norm(J.T @ np.linalg.inv(Sl) @ (yp - prob.measurements)) <= 1e-6


def test_objective_never_increases():
    fm = get_model("parabolic_cylinder")
    y, _ = fm([1.7, 0.2])
    prob = InverseProblem(y, 1e-2 * np.diag([1, 0.1, 1]), np.eye(2), np.ones(2), *fm.spec.box)
    _, rep = gauss_newton(prob, fm, [0.1, 1.9])
    assert np.all(np.diff(rep.trajectory) <= 1e-12)


def test_box_bounds_reported_active():
    # the unconstrained minimiser of |p - 5|^2 lies outside the unit box
    prob = _problem([5.0, 5.0], 2, 2, lower=np.zeros(2), upper=np.ones(2))
    p, rep = gauss_newton(prob, LinearModel(np.eye(2)), [0.5, 0.5])
    np.testing.assert_allclose(p, [1.0, 1.0])
    assert rep.active_bounds == [True, True] and rep.converged


def test_invalid_covariances():
    with pytest.raises(ValueError):
        _problem([0.0], 1, 1, Sl=np.array([[-1.0]]))
    with pytest.raises(ValueError):
        _problem([0.0, 0.0], 2, 2, Sl=np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_multistart_picks_lowest_objective():
    fm = get_model("parabolic_cylinder")
    y, _ = fm([1.0, 1.5])
    prob = InverseProblem(y, 1e-2 * np.diag([1, 0.1, 1]), np.eye(2), np.ones(2), *fm.spec.box)
    rec = reconstruct(prob, fm, n_starts=5, seed=0)
    assert rec.objective == min(r.objective for r in rec.reports)
    assert len(rec.reports) == 5
    out = rec.to_dict([1.0, 1.5])
    assert out["abs_error"][0] < 1e-3 and out["abs_error"][1] < 1e-3


def test_sampled_true_error_zero_for_exact_surrogate():
    fm = get_model("parabolic_cylinder")
    tmpl = InverseProblem(np.zeros(3), 1e-2 * np.diag([1, 0.1, 1]), np.eye(2), np.ones(2), *fm.spec.box)
    err, dropped = sampled_true_error([0.9, 1.2], fm, fm, tmpl, 5, np.random.default_rng(0))
    assert dropped == 0 and err <= 1e-10


def test_sampled_true_error_grows_with_bias():
    fm = get_model("parabolic_cylinder")
    tmpl = InverseProblem(np.zeros(3), 1e-2 * np.diag([1, 0.1, 1]), np.eye(2), np.ones(2), *fm.spec.box)
    increasing = 0
    for seed in range(10):
        errs = [sampled_true_error([1.0, 1.5], Shifted(fm, b), fm, tmpl, 5, np.random.default_rng(seed))[0]
                for b in (0.0, 0.01, 0.03, 0.1)]
        increasing += bool(np.all(np.diff(errs) > 0))
    assert increasing >= 9
