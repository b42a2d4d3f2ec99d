"""Gauss-Newton maximum-posterior parameter identification.

Minimises ``J(p) = 1/2 |y(p) - y^m|^2_{Sl^-1} + 1/2 |p - p0|^2_{Sp^-1}`` over a
box by projected, Armijo-damped Gauss-Newton steps. ``forward`` is any
object with ``mean_and_jacobian(p)``: an exact model or a fitted surrogate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .error_model import sobol_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class InverseProblem:
    measurements: np.ndarray
    likelihood_cov: np.ndarray
    prior_cov: np.ndarray | None
    prior_mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("measurements", "prior_mean", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        Sl = np.asarray(self.likelihood_cov, dtype=float)
        Sl = np.diag(Sl) if Sl.ndim == 1 else Sl
        _require_spd(Sl, "likelihood covariance")
        object.__setattr__(self, "likelihood_cov", Sl)
        d = self.prior_mean.size
        if self.prior_cov is not None:
            Sp = np.asarray(self.prior_cov, dtype=float)
            Sp = np.diag(Sp) if Sp.ndim == 1 else Sp
            _require_spd(Sp, "prior covariance")
            object.__setattr__(self, "prior_cov", Sp)
        object.__setattr__(self, "_Sl_inv", np.linalg.inv(Sl))
        object.__setattr__(
            self, "_Sp_inv", np.zeros((d, d)) if self.prior_cov is None else np.linalg.inv(self.prior_cov)
        )

    @property
    def likelihood_precision(self) -> np.ndarray:
        return self._Sl_inv

    @property
    def prior_precision(self) -> np.ndarray:
        return self._Sp_inv

    def with_measurements(self, y) -> "InverseProblem":
        return InverseProblem(np.asarray(y, dtype=float), self.likelihood_cov, self.prior_cov,
                              self.prior_mean, self.lower, self.upper)

    def objective(self, p, y) -> float:
        r = y - self.measurements
        dp = p - self.prior_mean
        return float(0.5 * r @ self._Sl_inv @ r + 0.5 * dp @ self._Sp_inv @ dp)


def _require_spd(M, name):
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass
class GNReport:
    converged: bool
    status: str
    iterations: int
    objective: float
    trajectory: list = field(default_factory=list)
    damped: bool = False
    active_bounds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "objective": self.objective,
            "trajectory": list(self.trajectory),
            "damped": self.damped,
            "active_bounds": list(self.active_bounds),
        }


def gauss_newton(
    problem: InverseProblem,
    forward,
    p_init,
    gtol: float = 1e-10,
    max_iter: int = 100,
    armijo: float = 1e-4,
) -> tuple[np.ndarray, GNReport]:
    """Projected, damped Gauss-Newton from ``p_init``.

    The step solves ``(J^T Sl^-1 J + Sp^-1) dp = -(J^T Sl^-1 (y - y^m) + Sp^-1 (p - p0))``.
    Iteration stops once the projected step is at most ``gtol``.
    """
    lo, hi = problem.lower, problem.upper
    p = np.clip(np.asarray(p_init, dtype=float), lo, hi)
    W, P = problem.likelihood_precision, problem.prior_precision
    y, Jac = forward.mean_and_jacobian(p)
    f = problem.objective(p, y)
    trajectory = [f]
    damped = False
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        r = y - problem.measurements
        grad = Jac.T @ W @ r + P @ (p - problem.prior_mean)
        H = Jac.T @ W @ Jac + P
        try:
            np.linalg.cholesky(H)
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            damped = True
            lam = 1e-8 * max(np.trace(H), 1.0)
            step = np.linalg.solve(H + lam * np.eye(H.shape[0]), -grad)
        if not np.all(np.isfinite(step)):
            status = "nonfinite"
            break
        full = np.clip(p + step, lo, hi) - p
        if np.linalg.norm(full) <= gtol:
            status = "converged"
            it -= 1
            break
        t = 1.0
        while True:
            p_new = np.clip(p + t * step, lo, hi)
            y_new, J_new = forward.mean_and_jacobian(p_new)
            f_new = problem.objective(p_new, y_new)
            if f_new <= f + armijo * float(grad @ (p_new - p)):
                break
            t *= 0.5
            if t < 1e-12:
                p_new = None
                break
        if p_new is None:
            status = "stalled"
            it -= 1
            break
        moved = float(np.linalg.norm(p_new - p))
        p, y, Jac, f = p_new, y_new, J_new, f_new
        trajectory.append(f)
        if moved <= gtol:
            status = "converged"
            break
    active = [bool(a) for a in (np.isclose(p, lo, atol=1e-12) | np.isclose(p, hi, atol=1e-12))]
    converged = status in ("converged", "stalled")
    return p, GNReport(converged, status, it, f, trajectory, damped, active)


@dataclass
class Reconstruction:
    p: np.ndarray
    objective: float
    best_start: int
    reports: list

    def to_dict(self, p_true=None) -> dict:
        out = {
            "p": self.p.tolist(),
            "objective": self.objective,
            "best_start": self.best_start,
            "starts": [r.to_dict() for r in self.reports],
        }
        if p_true is not None:
            out["p_true"] = list(map(float, p_true))
            out["abs_error"] = np.abs(self.p - np.asarray(p_true)).tolist()
        return out


def reconstruct(
    problem: InverseProblem,
    forward,
    n_starts: int = 5,
    seed: int = 0,
    starts=None,
    **gn_opts,
) -> Reconstruction:
    """Multi-start Gauss-Newton; lowest final objective wins, ties to the lowest start index."""
    if starts is None:
        starts = sobol_points(n_starts, problem.lower, problem.upper, seed)
    results = [gauss_newton(problem, forward, s, **gn_opts) for s in np.atleast_2d(starts)]
    best = min(range(len(results)), key=lambda i: (results[i][1].objective, i))
    return Reconstruction(results[best][0], results[best][1].objective, best, [r for _, r in results])


def sampled_true_error(
    p_i,
    surrogate,
    exact,
    problem_template: InverseProblem,
    n_k: int,
    rng: np.random.Generator,
    **gn_opts,
) -> tuple[float, int]:
    """Mean distance between exact-model and surrogate reconstructions from noisy data.

    Measurements are ``y(p_i) + delta`` with ``delta ~ N(0, Sl)``; both
    reconstructions start at ``p_i``. Replicates where either solve fails are
    dropped. Returns ``(mean error, number dropped)``; the mean is NaN if
    every replicate was dropped.
    """
    p_i = np.asarray(p_i, dtype=float)
    y_true, _ = exact.mean_and_jacobian(p_i)
    chol = np.linalg.cholesky(problem_template.likelihood_cov)
    errors, dropped = [], 0
    for _ in range(n_k):
        delta = chol @ rng.standard_normal(y_true.size)
        prob = problem_template.with_measurements(y_true + delta)
        p_exact, rep_exact = gauss_newton(prob, exact, p_i, **gn_opts)
        p_sur, rep_sur = gauss_newton(prob, surrogate, p_i, **gn_opts)
        if not (rep_exact.converged and rep_sur.converged):
            dropped += 1
            continue
        errors.append(float(np.linalg.norm(p_exact - p_sur)))
    if not errors:
        return math.nan, dropped
    return float(np.mean(errors)), dropped
