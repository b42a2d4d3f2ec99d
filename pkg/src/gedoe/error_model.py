"""Goal-oriented error model: parameter-reconstruction error estimates.

The local error at ``p`` combines the surrogate's value and gradient variance
traces ``eps``, ``eps'`` with first-order transport factors ``a``, ``a'``
obtained from one linearized Gauss-Newton step::

    e(p) = (a(p) eps(p) + a'(p) eps'(p)) / (1 + alpha e0(p))

and the global error is the ``L^q`` norm of ``e`` over the domain, estimated on
a fixed scrambled-Sobol node set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from .gegpr import GegprModel, cholesky_with_jitter, row_index, unit_covariance
from .kernel import joint_cross_covariance

GAIN_CAP = 1e12


@dataclass(frozen=True)
class ErrorModelConfig:
    q: float = 2.0
    alpha: float = 1.0
    mc_samples: int = 1024
    mc_seed: int = 0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class TransportFactors:
    """Value gain ``a``, gradient gain ``a_prime`` and error floor ``e0`` (scalars or arrays)."""

    a: np.ndarray
    a_prime: np.ndarray
    e0: np.ndarray
    ill_conditioned: np.ndarray | bool = False

    def take(self, idx) -> "TransportFactors":
        return TransportFactors(
            np.asarray(self.a)[idx],
            np.asarray(self.a_prime)[idx],
            np.asarray(self.e0)[idx],
            np.broadcast_to(self.ill_conditioned, np.shape(self.a))[idx],
        )


@dataclass(frozen=True)
class NoiseModel:
    """Likelihood covariance and (optional) prior covariance of the inverse problem."""

    likelihood_cov: np.ndarray
    prior_cov: np.ndarray | None = None


def _as_cov(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        cov = np.diag(cov)
    return cov


def transport_factors_batch(forward, X, likelihood_cov, prior_cov=None) -> TransportFactors:
    """Transport factors at each row of ``X`` from the forward Jacobian.

    ``forward`` is anything with ``mean_and_jacobian_batch`` (a fitted
    surrogate or an exact model). With ``J = y'(p)`` and
    ``H = J^T Sl^-1 J + Sp^-1``::

        a  = |H^-1 J^T Sl^-1|_2
        a' = |H^-1|_2 |Sl^-1 r|_2,   r = diag(Sl)^(1/2)
        e0 = sqrt(tr H^-1)
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, J = forward.mean_and_jacobian_batch(X)
    return transport_factors_from_jacobian(J, likelihood_cov, prior_cov)


def transport_factors_from_jacobian(J, likelihood_cov, prior_cov=None, residual=None) -> TransportFactors:
    """Transport factors from Jacobians ``(m, d)`` or ``(l, m, d)``.

    ``residual`` defaults to the noise scale ``diag(Sl)^(1/2)``.
    """
    J = np.asarray(J, dtype=float)
    single = J.ndim == 2
    J = np.atleast_3d(J) if not single else J[None]
    l, m, d = J.shape
    Sl = _as_cov(likelihood_cov)
    Sl_inv = np.linalg.inv(Sl)
    H = np.einsum("lma,mn,lnb->lab", J, Sl_inv, J)
    if prior_cov is not None:
        H = H + np.linalg.inv(_as_cov(prior_cov))[None]
    cond = np.linalg.cond(H)
    ill = ~np.isfinite(cond) | (cond > 1e14)
    Hinv = np.empty_like(H)
    Hinv[~ill] = np.linalg.inv(H[~ill])
    if np.any(ill):
        Hinv[ill] = np.linalg.pinv(H[ill], hermitian=True)
    G = Hinv @ np.transpose(J, (0, 2, 1)) @ Sl_inv
    a = np.linalg.norm(G, 2, axis=(-2, -1))
    residual = np.sqrt(np.diag(Sl)) if residual is None else np.asarray(residual, dtype=float)
    a_prime = np.linalg.norm(Hinv, 2, axis=(-2, -1)) * np.linalg.norm(Sl_inv @ residual)
    e0 = np.sqrt(np.maximum(np.trace(Hinv, axis1=-2, axis2=-1), 0.0))
    a, a_prime = np.minimum(a, GAIN_CAP), np.minimum(a_prime, GAIN_CAP)
    if single:
        return TransportFactors(float(a[0]), float(a_prime[0]), float(e0[0]), bool(ill[0]))
    return TransportFactors(a, a_prime, e0, ill)


def transport_factors(forward, p, likelihood_cov, prior_cov=None) -> TransportFactors:
    f = transport_factors_batch(forward, np.asarray(p, dtype=float).reshape(1, -1), likelihood_cov, prior_cov)
    return f.take(0) if np.ndim(f.a) else f


def combine_local(eps, eps_g, factors: TransportFactors, alpha: float) -> np.ndarray:
    return (np.asarray(factors.a) * eps + np.asarray(factors.a_prime) * eps_g) / (
        1.0 + alpha * np.asarray(factors.e0)
    )


def local_error(p, model: GegprModel, factors: TransportFactors, config: ErrorModelConfig) -> float:
    """``e(p) = (a eps + a' eps') / (1 + alpha e0)``."""
    eps, eps_g = model.traces(np.asarray(p, dtype=float).reshape(1, -1))
    return float(combine_local(eps[0], eps_g[0], factors, config.alpha))


def local_errors(model: GegprModel, X, factors: TransportFactors, config: ErrorModelConfig) -> np.ndarray:
    eps, eps_g = model.traces(X)
    return combine_local(eps, eps_g, factors, config.alpha)


def lq_norm(values, volume: float, q: float) -> float:
    return float((volume * np.mean(np.asarray(values) ** q)) ** (1.0 / q))


def sobol_points(n: int, lower, upper, seed) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence scaled to the box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = max(0, int(np.ceil(np.log2(max(n, 1)))))
    sampler = qmc.Sobol(lower.size, scramble=True, seed=np.random.default_rng(seed))
    return qmc.scale(sampler.random_base2(m)[:n], lower, upper)


@dataclass(frozen=True, eq=False)
class ErrorField:
    """MC nodes over the domain with transport factors evaluated there."""

    nodes: np.ndarray
    factors: TransportFactors
    volume: float


def make_error_field(forward, box, noise: NoiseModel, config: ErrorModelConfig, nodes=None) -> ErrorField:
    lower, upper = box
    if nodes is None:
        nodes = sobol_points(config.mc_samples, lower, upper, config.mc_seed)
    factors = transport_factors_batch(forward, nodes, noise.likelihood_cov, noise.prior_cov)
    volume = float(np.prod(np.asarray(upper) - np.asarray(lower)))
    return ErrorField(nodes, factors, volume)


def global_error(model: GegprModel, field: ErrorField, config: ErrorModelConfig) -> float:
    """``E = (|X| mean_i e(x_i)^q)^(1/q)`` over the field's nodes."""
    return lq_norm(local_errors(model, field.nodes, field.factors, config), field.volume, config.q)


def write_error_field_csv(path, model: GegprModel, field: ErrorField, config: ErrorModelConfig) -> None:
    e = local_errors(model, field.nodes, field.factors, config)
    eps, eps_g = model.traces(field.nodes)
    d = field.nodes.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write("# gedoe-error-field v1\n")
        w = csv.writer(fh)
        w.writerow([f"p{j + 1}" for j in range(d)] + ["e", "eps", "eps_grad", "a", "a_prime", "e0"])
        for i in range(field.nodes.shape[0]):
            w.writerow(
                [repr(float(x)) for x in field.nodes[i]]
                + [repr(float(v)) for v in (e[i], eps[i], eps_g[i], field.factors.a[i],
                                            field.factors.a_prime[i], field.factors.e0[i])]
            )


class DesignErrorFunctional:
    """``E(v, v')^q`` as a function of per-point precisions ``v = tau^-2``, ``v' = tau'^-2``.

    The point set (existing design plus candidates), hyperparameters and
    transport factors are held fixed; ``v = 0`` means "not evaluated". Uses
    ``B = I + S K S`` with ``S = diag(sqrt(precision))`` so unevaluated rows
    are handled without infinities. The gradient uses
    ``d Var/d prec_row = -(row of (I - K M) k_x)^2`` with ``M = (K + P^-1)^-1``.
    """

    def __init__(self, model: GegprModel, points, field: ErrorField, config: ErrorModelConfig):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.n, self.d = self.points.shape
        self.params = model.params
        self.config = config
        self.volume = field.volume
        sigma = self.params.sigma
        self.C = unit_covariance(self.points, np.ones(self.n, dtype=bool), sigma)
        idx = row_index(np.ones(self.n, dtype=bool), self.d)
        Kx = joint_cross_covariance(self.points, field.nodes, sigma)
        L = field.nodes.shape[0]
        self.Kx = Kx.reshape(self.n * (1 + self.d), L * (1 + self.d))[idx]
        self.L = L
        self.prior_diag = np.concatenate([[1.0], np.full(self.d, 2.0 * sigma)])
        den = 1.0 + config.alpha * np.asarray(field.factors.e0)
        self.wa = np.asarray(field.factors.a) / den
        self.wg = np.asarray(field.factors.a_prime) / den
        self.n_evals = 0

    def _precisions(self, v, vg) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(self.n)
        vg = np.asarray(vg, dtype=float).reshape(self.n)
        if np.any(v < 0) or np.any(vg < 0):
            raise ValueError("precisions must be nonnegative")
        return np.concatenate([v, np.repeat(vg, self.d)])

    def traces(self, v, vg, with_grad: bool = False):
        """Node traces ``eps, eps'`` ``(L,)`` and, optionally, their row derivatives ``(N, L)``."""
        prec = self._precisions(v, vg)
        sq = np.sqrt(prec)
        N = prec.size
        k1 = 1 + self.d
        eps = np.zeros(self.L)
        eps_g = np.zeros(self.L)
        d_eps = np.zeros((N, self.L)) if with_grad else None
        d_eps_g = np.zeros((N, self.L)) if with_grad else None
        for s in self.params.output_scales:
            Kt = s * self.C
            B = sq[:, None] * Kt * sq[None, :]
            B[np.diag_indices_from(B)] += 1.0
            chol, _ = cholesky_with_jitter(B, np.ones(N))
            sK = s * self.Kx
            Mk = sq[:, None] * linalg.cho_solve((chol, True), sq[:, None] * sK)
            var = (s * self.prior_diag)[None, :] - np.einsum("nk,nk->k", sK, Mk).reshape(self.L, k1)
            var = np.maximum(var, 0.0)
            eps += var[:, 0]
            eps_g += var[:, 1:].sum(axis=1)
            if with_grad:
                R = (sK - Kt @ Mk).reshape(N, self.L, k1)
                R2 = R * R
                d_eps -= R2[:, :, 0]
                d_eps_g -= R2[:, :, 1:].sum(axis=2)
        self.n_evals += 1
        return eps, eps_g, d_eps, d_eps_g

    def local(self, v, vg) -> np.ndarray:
        eps, eps_g, _, _ = self.traces(v, vg)
        return self.wa * eps + self.wg * eps_g

    def value(self, v, vg) -> float:
        """``E^q``."""
        e = self.local(v, vg)
        return float(self.volume * np.mean(e**self.config.q))

    def value_and_grad(self, v, vg) -> tuple[float, np.ndarray, np.ndarray]:
        """``E^q`` and its partial derivatives in ``v`` and ``v'``."""
        q = self.config.q
        eps, eps_g, d_eps, d_eps_g = self.traces(v, vg, with_grad=True)
        e = self.wa * eps + self.wg * eps_g
        weight = self.volume * q * e ** (q - 1) / self.L
        g_rows = d_eps @ (weight * self.wa) + d_eps_g @ (weight * self.wg)
        gv = g_rows[: self.n]
        gvg = g_rows[self.n:].reshape(self.n, self.d).sum(axis=1)
        return float(self.volume * np.mean(e**q)), gv, gvg


FactorsFn = Callable[[np.ndarray], TransportFactors]
