"""Gradient-enhanced Gaussian process regression.

Each output component ``r`` is an independent scalar GP with covariance
``output_scales[r] * k`` (diagonal component covariance). Training rows of one
component are ordered as all value rows first, then the ``d`` gradient rows
of each gradient-equipped point, point by point.

Conditioning uses a Cholesky factorization of ``K + E`` where ``E`` holds the
noise variances ``tau^2`` (values) and ``tau'^2`` (gradients).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .design import Design
from .kernel import KernelParams, joint_cross_covariance

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0,) + tuple(10.0**e for e in range(-12, -5))
VARIANCE_SLACK = 1e-10


class IllConditionedCovarianceError(np.linalg.LinAlgError):
    pass


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Noisy values ``(n, m)`` and gradients ``(n, m, d)`` paired with a design.

    Gradient entries of points with ``tol_grad == inf`` are NaN.
    """

    design: Design
    values: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        n, d = len(self.design), self.design.d
        values = np.asarray(self.values, dtype=float).reshape(n, -1)
        m = values.shape[1]
        grads = np.asarray(self.gradients, dtype=float).reshape(n, m, d)
        has = self.design.has_grad
        if np.any(~np.isfinite(values)):
            raise ValueError("training values must be finite")
        if np.any(~np.isfinite(grads[has])):
            raise ValueError("gradients missing for a gradient-equipped point")
        if np.any(np.isfinite(grads[~has])):
            raise ValueError("gradients given for a point with tol_grad = inf")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gradients", grads)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict:
        return {
            "design": self.design.to_dict(),
            "values": self.values.tolist(),
            "gradients": [
                g.tolist() if h else None for g, h in zip(self.gradients, self.design.has_grad)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, d: int | None = None, m: int | None = None) -> "TrainingSet":
        design = Design.from_dict(data["design"], d)
        n, d = len(design), design.d
        values = np.array(data["values"], dtype=float).reshape(n, -1) if n else np.empty((0, m or 0))
        m = values.shape[1]
        grads = np.full((n, m, d), np.nan)
        for i, g in enumerate(data["gradients"]):
            if g is not None:
                grads[i] = g
        return cls(design, values, grads)


def row_index(has_grad: np.ndarray, d: int) -> np.ndarray:
    """Flat indices into a ``(n, 1 + d)`` layout selecting the observed rows."""
    n = has_grad.size
    value_rows = np.arange(n) * (1 + d)
    grad_pts = np.flatnonzero(has_grad)
    grad_rows = (grad_pts[:, None] * (1 + d) + 1 + np.arange(d)[None, :]).reshape(-1)
    return np.concatenate([value_rows, grad_rows])


def noise_variances(tol_value, tol_grad, d: int) -> np.ndarray:
    tol_value = np.asarray(tol_value, dtype=float)
    tol_grad = np.asarray(tol_grad, dtype=float)
    has = np.isfinite(tol_grad)
    return np.concatenate([tol_value**2, np.repeat(tol_grad[has] ** 2, d)])


def unit_covariance(points, has_grad, sigma: float) -> np.ndarray:
    """Noise-free joint covariance of the observed rows at unit output scale."""
    P = np.atleast_2d(points)
    n, d = P.shape
    C = joint_cross_covariance(P, P, sigma).reshape(n * (1 + d), n * (1 + d))
    idx = row_index(np.asarray(has_grad, dtype=bool), d)
    return C[np.ix_(idx, idx)]


def assemble_covariance(points, tol_value, tol_grad, kernel_params: KernelParams) -> list[np.ndarray]:
    """Per-component ``K + E`` matrices of the gradient-enhanced prior."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("need at least one point")
    has = np.isfinite(np.asarray(tol_grad, dtype=float))
    C = unit_covariance(P, has, kernel_params.sigma)
    noise = noise_variances(tol_value, tol_grad, P.shape[1])
    return [s * C + np.diag(noise) for s in kernel_params.output_scales]


def cholesky_with_jitter(A: np.ndarray, scale_diag: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + j * diag(scale_diag)`` climbing the jitter ladder."""
    for jitter in JITTER_LADDER:
        Aj = A.copy()
        Aj[np.diag_indices_from(Aj)] += jitter * scale_diag
        try:
            return np.linalg.cholesky(Aj), jitter
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedCovarianceError(
        f"covariance not positive definite with jitter up to {JITTER_LADDER[-1]:g}"
    )


def _observations(training: TrainingSet, zeta: np.ndarray) -> np.ndarray:
    """Centred observation vectors, one column per component."""
    has = training.design.has_grad
    vals = training.values - zeta[None, :]
    grads = training.gradients[has]  # (g, m, d)
    grads = np.transpose(grads, (1, 0, 2)).reshape(training.m, -1).T
    return np.vstack([vals, grads])


@dataclass(frozen=True)
class Posterior:
    mean_value: np.ndarray
    mean_grad: np.ndarray
    cov_value: np.ndarray
    cov_grad: np.ndarray
    extrapolated: bool = False


@dataclass(eq=False)
class GegprModel:
    """A fitted surrogate. Immutable after construction; use :func:`fit`."""

    training: TrainingSet
    params: KernelParams
    zeta: np.ndarray
    box: tuple[np.ndarray, np.ndarray] | None = None
    _chol: list = field(default_factory=list, repr=False)
    _alpha: list = field(default_factory=list, repr=False)
    jitter: float = 0.0

    def __post_init__(self):
        training = self.training
        if len(training.design) == 0:
            raise ValueError("empty training set")
        if self.params.m != training.m:
            raise ValueError("output scale count does not match the number of outputs")
        self.zeta = np.asarray(self.zeta, dtype=float).reshape(training.m)
        design = training.design
        self._idx = row_index(design.has_grad, design.d)
        C = unit_covariance(design.points, design.has_grad, self.params.sigma)
        self._unit_diag = np.diag(C).copy()
        noise = noise_variances(design.tol_value, design.tol_grad, design.d)
        Z = _observations(training, self.zeta)
        self._chol, self._alpha = [], []
        jitters = []
        for r, s in enumerate(self.params.output_scales):
            A = s * C
            A[np.diag_indices_from(A)] += noise
            L, jit = cholesky_with_jitter(A, s * self._unit_diag)
            self._chol.append(L)
            self._alpha.append(linalg.cho_solve((L, True), Z[:, r]))
            jitters.append(jit)
        self.jitter = max(jitters)

    @property
    def d(self) -> int:
        return self.training.design.d

    @property
    def m(self) -> int:
        return self.training.m

    @property
    def design(self) -> Design:
        return self.training.design

    def _cross(self, X: np.ndarray) -> np.ndarray:
        """Unit covariance between training rows and ``[f, grad f]`` at ``X``: ``(N, l, 1+d)``."""
        P = self.design.points
        n, d = P.shape
        C = joint_cross_covariance(P, X, self.params.sigma)
        return C.reshape(n * (1 + d), X.shape[0], 1 + d)[self._idx]

    def _prior_point_cov(self) -> np.ndarray:
        d = self.d
        return np.diag(np.concatenate([[1.0], np.full(d, 2.0 * self.params.sigma)]))

    def predict_batch(self, X, with_cov: bool = True):
        """Posterior mean ``(l, m, 1+d)`` and, optionally, covariance ``(l, m, 1+d, 1+d)``.

        Entry ``0`` along the last mean axis is the value, ``1:`` the gradient.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Kx = self._cross(X)
        l, d = X.shape[0], self.d
        mean = np.empty((l, self.m, 1 + d))
        cov = np.empty((l, self.m, 1 + d, 1 + d)) if with_cov else None
        prior = self._prior_point_cov()
        for r, s in enumerate(self.params.output_scales):
            mean[:, r, :] = s * np.einsum("nlc,n->lc", Kx, self._alpha[r])
            mean[:, r, 0] += self.zeta[r]
            if with_cov:
                V = linalg.solve_triangular(self._chol[r], s * Kx.reshape(Kx.shape[0], -1), lower=True)
                V = V.reshape(-1, l, 1 + d)
                cov[:, r] = s * prior[None] - np.einsum("nla,nlb->lab", V, V)
        if with_cov:
            idx = np.arange(1 + d)
            diag = cov[..., idx, idx]
            if np.any(diag < -VARIANCE_SLACK * np.max(np.abs(prior)) * max(self.params.output_scales)):
                logger.warning("negative posterior variance %.3e clamped", diag.min())
            cov[..., idx, idx] = np.maximum(diag, 0.0)
        return mean, cov

    def predict(self, p) -> Posterior:
        p = np.asarray(p, dtype=float).reshape(1, -1)
        mean, cov = self.predict_batch(p)
        extrapolated = False
        if self.box is not None:
            lo, hi = self.box
            extrapolated = bool(np.any(p < lo) or np.any(p > hi))
        return Posterior(
            mean_value=mean[0, :, 0].copy(),
            mean_grad=mean[0, :, 1:].copy(),
            cov_value=cov[0, :, 0, 0].copy(),
            cov_grad=cov[0, :, 1:, 1:].copy(),
            extrapolated=extrapolated,
        )

    def mean_and_jacobian(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Surrogate forward interface: value ``(m,)`` and Jacobian ``(m, d)``."""
        mean, _ = self.predict_batch(np.asarray(p, dtype=float).reshape(1, -1), with_cov=False)
        return mean[0, :, 0], mean[0, :, 1:]

    def mean_and_jacobian_batch(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean, _ = self.predict_batch(X, with_cov=False)
        return mean[..., 0], mean[..., 1:]

    def traces(self, X, tol_value=None, tol_grad=None) -> tuple[np.ndarray, np.ndarray]:
        """Value and gradient variance traces at ``X``.

        With ``tol_value`` given, returns the traces after a hypothetical
        evaluation at each query point with tolerances ``(tol_value,
        tol_grad)`` (``tol_grad = inf`` for value only). The update is the
        exact conditioning on that extra observation (Schur complement).
        """
        _, cov = self.predict_batch(X)
        if tol_value is not None:
            cov = hypothetical_update(cov, tol_value, math.inf if tol_grad is None else tol_grad)
        eps = np.sum(cov[..., 0, 0], axis=-1)
        eps_g = np.sum(np.trace(cov[..., 1:, 1:], axis1=-2, axis2=-1), axis=-1)
        return eps, eps_g

    def with_hypothetical(self, p, tol_value: float, tol_grad: float) -> "GegprModel":
        """A copy conditioned additionally on an evaluation at ``p`` (data = current mean).

        Variances do not depend on the observed data, so the returned model
        is exact for variance queries.
        """
        p = np.asarray(p, dtype=float).reshape(1, -1)
        value, jac = self.mean_and_jacobian(p[0])
        grad = jac[None] if math.isfinite(tol_grad) else np.full((1, self.m, self.d), np.nan)
        design = self.design.with_points(p, tol_value, tol_grad)
        training = TrainingSet(
            design,
            np.vstack([self.training.values, value[None]]),
            np.concatenate([self.training.gradients, grad]),
        )
        return GegprModel(training, self.params, self.zeta, self.box)

    def log_marginal_likelihood(self) -> float:
        total = 0.0
        Z = _observations(self.training, self.zeta)
        for r in range(self.m):
            L = self._chol[r]
            total += (
                -0.5 * Z[:, r] @ self._alpha[r]
                - np.sum(np.log(np.diag(L)))
                - 0.5 * L.shape[0] * np.log(2 * np.pi)
            )
        return float(total)

    def to_dict(self) -> dict:
        return {
            "training": self.training.to_dict(),
            "params": self.params.to_dict(),
            "zeta": self.zeta.tolist(),
            "box": None if self.box is None else [list(map(float, b)) for b in self.box],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GegprModel":
        params = KernelParams.from_dict(data["params"])
        box = data.get("box")
        box = None if box is None else (np.array(box[0]), np.array(box[1]))
        d = None if box is None else len(box[0])
        training = TrainingSet.from_dict(data["training"], d=d, m=params.m)
        return cls(training, params, np.array(data["zeta"]), box)


def hypothetical_update(cov: np.ndarray, tol_value, tol_grad) -> np.ndarray:
    """Condition marginal covariances ``(..., 1+d, 1+d)`` on one more observation.

    ``tol_value``/``tol_grad`` broadcast against the leading query axis;
    ``tol_grad = inf`` observes the value only.
    """
    cov = np.asarray(cov, dtype=float)
    lead = cov.shape[:-2]
    k = cov.shape[-1]
    l = lead[0]
    tv = np.broadcast_to(np.asarray(tol_value, dtype=float), (l,))
    tg = np.broadcast_to(np.asarray(tol_grad, dtype=float), (l,))
    out = cov.copy()
    extra = (slice(None),) + (None,) * (len(lead) - 1)
    value_only = ~np.isfinite(tg)
    if np.any(value_only):
        c = cov[value_only]
        t2 = (tv[value_only] ** 2)[extra]
        g00 = c[..., 0, 0] + t2
        col = c[..., :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            upd = col[..., :, None] * col[..., None, :] / g00[..., None, None]
        upd = np.where((g00 > 0)[..., None, None], upd, 0.0)
        out[value_only] = c - upd
    if np.any(~value_only):
        c = cov[~value_only]
        noise = np.concatenate(
            [tv[~value_only, None] ** 2, np.repeat(tg[~value_only, None] ** 2, k - 1, axis=1)], axis=1
        )
        S = c + noise[extra][..., None] * np.eye(k)
        out[~value_only] = c - c @ np.linalg.pinv(S, hermitian=True) @ c
    idx = np.arange(k)
    out[..., idx, idx] = np.maximum(out[..., idx, idx], 0.0)
    return out


def fit(
    training: TrainingSet,
    kernel_params: KernelParams,
    zeta=None,
    box=None,
) -> GegprModel:
    """Condition the gradient-enhanced prior on ``training``.

    The prior mean defaults to the per-component mean of the training values.
    """
    if len(training.design) == 0:
        raise ValueError("empty training set")
    if zeta is None:
        zeta = training.values.mean(axis=0)
    if box is not None:
        box = (np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float))
    return GegprModel(training, kernel_params, zeta, box)


def predict(model: GegprModel, p) -> Posterior:
    if not isinstance(model, GegprModel):
        raise NotFittedError("predict needs a fitted GegprModel")
    return model.predict(p)


def predictive_variance_traces(model: GegprModel, p, hypothetical_tols=None) -> tuple[float, float]:
    """``(eps, eps')``: traces of the value and gradient marginal covariances at ``p``."""
    if not isinstance(model, GegprModel):
        raise NotFittedError("predict needs a fitted GegprModel")
    p = np.asarray(p, dtype=float).reshape(1, -1)
    if hypothetical_tols is None:
        eps, eps_g = model.traces(p)
    else:
        eps, eps_g = model.traces(p, *hypothetical_tols)
    return float(eps[0]), float(eps_g[0])


def prior_traces(params: KernelParams, d: int) -> tuple[float, float]:
    s = np.sum(params.output_scales)
    return float(s), float(2.0 * params.sigma * d * s)


# -- hyperparameters ---------------------------------------------------------


@dataclass(frozen=True)
class HyperparameterBounds:
    sigma: tuple[float, float] = (1.0, 1e2)
    output_scale: tuple[float, float] = (1e-6, 1e6)


@dataclass(frozen=True)
class HyperparameterFit:
    params: KernelParams
    log_likelihood: float
    degraded: bool = False
    n_failed_starts: int = 0


def _dsigma_cross(P, sigma: float) -> np.ndarray:
    """Derivative of the unit joint covariance of ``P`` with respect to ``sigma``."""
    n, d = P.shape
    delta = P[:, None, :] - P[None, :, :]
    r2 = np.einsum("ija,ija->ij", delta, delta)
    k = np.exp(-sigma * r2)
    out = np.empty((n, 1 + d, n, 1 + d))
    out[:, 0, :, 0] = -r2 * k
    g = 2.0 * delta * (k * (1.0 - sigma * r2))[..., None]
    out[:, 0, :, 1:] = g
    out[:, 1:, :, 0] = -np.transpose(g, (0, 2, 1))
    outer = delta[..., :, None] * delta[..., None, :]
    eye = np.eye(d)
    h = (2.0 * eye - 8.0 * sigma * outer) - r2[..., None, None] * (2.0 * sigma * eye - 4.0 * sigma**2 * outer)
    h *= k[..., None, None]
    out[:, 1:, :, 1:] = np.transpose(h, (0, 2, 1, 3))
    return out.reshape(n * (1 + d), n * (1 + d))


class _LikelihoodObjective:
    """Negative log marginal likelihood over ``(log sigma, log s_1, ..., log s_m)``."""

    def __init__(self, training: TrainingSet, zeta: np.ndarray):
        design = training.design
        self.points = design.points
        self.has = design.has_grad
        self.idx = row_index(self.has, design.d)
        self.noise = noise_variances(design.tol_value, design.tol_grad, design.d)
        self.Z = _observations(training, zeta)
        self.N = self.Z.shape[0]

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        sigma = math.exp(theta[0])
        scales = np.exp(theta[1:])
        C = unit_covariance(self.points, self.has, sigma)
        dC = _dsigma_cross(self.points, sigma)[np.ix_(self.idx, self.idx)]
        unit_diag = np.diag(C)
        value = 0.0
        grad = np.zeros_like(theta)
        for r, s in enumerate(scales):
            A = s * C
            A[np.diag_indices_from(A)] += self.noise
            L, _ = cholesky_with_jitter(A, s * unit_diag)
            alpha = linalg.cho_solve((L, True), self.Z[:, r])
            Ainv = linalg.cho_solve((L, True), np.eye(self.N))
            value += 0.5 * self.Z[:, r] @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * self.N * np.log(2 * np.pi)
            W = np.outer(alpha, alpha) - Ainv
            grad[0] -= 0.5 * np.sum(W * (s * sigma * dC))
            grad[1 + r] -= 0.5 * np.sum(W * (s * C))
        return float(value), grad


def log_marginal_likelihood(training: TrainingSet, params: KernelParams, zeta=None) -> float:
    zeta = training.values.mean(axis=0) if zeta is None else np.asarray(zeta, dtype=float)
    theta = np.concatenate([[math.log(params.sigma)], np.log(params.output_scales)])
    value, _ = _LikelihoodObjective(training, zeta)(theta)
    return -value


def fallback_params(training: TrainingSet, bounds: HyperparameterBounds) -> KernelParams:
    """Length scale 1 and the empirical value variance (scales clipped to the bounds).

    The length scale ignores the ``sigma`` bounds on purpose: it is the
    fixed default used when the likelihood cannot be optimised.
    """
    var = training.values.var(axis=0) if len(training.design) > 1 else np.ones(training.m)
    scales = np.clip(np.where(var > 0, var, 1.0), *bounds.output_scale)
    return KernelParams.from_length_scale(1.0, tuple(scales))


def optimize_hyperparameters(
    training: TrainingSet,
    bounds: HyperparameterBounds | None = None,
    init: KernelParams | None = None,
    n_starts: int = 3,
    zeta=None,
) -> HyperparameterFit:
    """Maximise the summed per-component log marginal likelihood.

    Multi-start L-BFGS-B in log coordinates with analytic gradients. Starts
    are ``init`` (when given) followed by a deterministic spread of length
    scales. If every start fails, the length-scale-1 fallback is returned
    with ``degraded=True``.
    """
    bounds = bounds or HyperparameterBounds()
    if len(training.design) < 2:
        raise ValueError("hyperparameter optimisation needs at least two training points")
    zeta = training.values.mean(axis=0) if zeta is None else np.asarray(zeta, dtype=float)
    objective = _LikelihoodObjective(training, zeta)
    m = training.m
    log_bounds = [tuple(np.log(bounds.sigma))] + [tuple(np.log(bounds.output_scale))] * m

    fallback = fallback_params(training, bounds)
    starts = []
    if init is not None:
        starts.append(np.concatenate([[math.log(init.sigma)], np.log(init.output_scales)]))
    lo, hi = log_bounds[0]
    for frac in np.linspace(0.25, 0.75, n_starts):
        starts.append(np.concatenate([[lo + frac * (hi - lo)], np.log(fallback.output_scales)]))

    best_theta, best_value, failed = None, np.inf, 0
    for theta0 in starts:
        theta0 = np.clip(theta0, [b[0] for b in log_bounds], [b[1] for b in log_bounds])
        try:
            res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=log_bounds)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            logger.debug("hyperparameter start failed: %s", exc)
            failed += 1
            continue
        if not np.isfinite(res.fun):
            failed += 1
            continue
        if res.fun < best_value:
            best_theta, best_value = res.x, res.fun
    if best_theta is None:
        logger.warning("hyperparameter optimisation failed; using length scale 1")
        try:
            ll = log_marginal_likelihood(training, fallback, zeta)
        except np.linalg.LinAlgError:
            ll = -np.inf
        return HyperparameterFit(fallback, ll, degraded=True, n_failed_starts=failed)
    params = KernelParams(math.exp(best_theta[0]), tuple(np.exp(best_theta[1:])))
    return HyperparameterFit(params, -float(best_value), degraded=False, n_failed_starts=failed)
