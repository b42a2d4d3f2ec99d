"""Gaussian kernel with the parameter derivatives needed for
gradient-enhanced covariance blocks.

The kernel is ``k(p, q) = exp(-sigma * |p - q|^2)``. For a scalar process
``f`` with this covariance the joint covariance of ``[f, grad f]`` at two
points follows from differentiating ``k``::

    cov(f(p),      f(q))      = k
    cov(f(p),      d_q f(q))  = kernel_grad_q(p, q)  =  2 sigma (p - q) k
    cov(d_p f(p),  f(q))      = kernel_grad_p(p, q)  = -2 sigma (p - q) k
    cov(d_p f(p),  d_q f(q))  = kernel_hess_pq(p, q) = (2 sigma I - 4 sigma^2 (p-q)(p-q)^T) k
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised for malformed points or kernel parameters."""


@dataclass(frozen=True)
class KernelParams:
    """Inverse squared length scale ``sigma`` and per-output signal variances.

    The output scales are the diagonal of the component covariance ``K``.
    """

    sigma: float
    output_scales: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(
            self, "output_scales", tuple(float(s) for s in np.atleast_1d(self.output_scales))
        )
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if len(self.output_scales) == 0 or not all(
            np.isfinite(s) and s > 0 for s in self.output_scales
        ):
            raise InvalidInputError(f"output scales must be positive, got {self.output_scales}")

    @property
    def m(self) -> int:
        return len(self.output_scales)

    @property
    def length_scale(self) -> float:
        """Length scale ``L`` of the equivalent ``exp(-r^2 / (2 L^2))`` kernel."""
        return float(np.sqrt(0.5 / self.sigma))

    @classmethod
    def from_length_scale(cls, length_scale: float, output_scales) -> "KernelParams":
        return cls(0.5 / length_scale**2, tuple(output_scales))

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "output_scales": list(self.output_scales)}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelParams":
        return cls(data["sigma"], tuple(data["output_scales"]))


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
        raise InvalidInputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("points must be finite")
    return p, q


def _sigma(params) -> float:
    return params.sigma if isinstance(params, KernelParams) else float(params)


def kernel_value(p, q, params) -> float:
    p, q = _pair(p, q)
    delta = p - q
    return float(np.exp(-_sigma(params) * np.dot(delta, delta)))


def kernel_grad_q(p, q, params) -> np.ndarray:
    """Gradient of ``k(p, q)`` with respect to its second argument."""
    p, q = _pair(p, q)
    sigma = _sigma(params)
    delta = p - q
    return 2.0 * sigma * delta * np.exp(-sigma * np.dot(delta, delta))


def kernel_grad_p(p, q, params) -> np.ndarray:
    return -kernel_grad_q(p, q, params)


def kernel_hess_pq(p, q, params) -> np.ndarray:
    """Mixed second derivative ``d_p d_q k(p, q)`` as a ``(d, d)`` matrix."""
    p, q = _pair(p, q)
    sigma = _sigma(params)
    delta = p - q
    k = np.exp(-sigma * np.dot(delta, delta))
    return (2.0 * sigma * np.eye(p.size) - 4.0 * sigma**2 * np.outer(delta, delta)) * k


def joint_cross_covariance(P, Q, sigma: float) -> np.ndarray:
    """Unit-scale covariance between ``[f, grad f]`` at rows of ``P`` and ``Q``.

    Returns an array of shape ``(n, 1 + d, l, 1 + d)``; index ``0`` on the
    second/fourth axis is the value, ``1 + a`` the derivative along ``a``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if P.shape[1] != Q.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {P.shape[1]} vs {Q.shape[1]}")
    n, d = P.shape
    l = Q.shape[0]
    delta = P[:, None, :] - Q[None, :, :]
    k = np.exp(-sigma * np.einsum("ija,ija->ij", delta, delta))
    out = np.empty((n, 1 + d, l, 1 + d))
    out[:, 0, :, 0] = k
    grad_q = 2.0 * sigma * delta * k[..., None]
    out[:, 0, :, 1:] = grad_q
    out[:, 1:, :, 0] = -np.transpose(grad_q, (0, 2, 1))
    hess = -4.0 * sigma**2 * delta[..., :, None] * delta[..., None, :]
    hess += 2.0 * sigma * np.eye(d)
    hess *= k[..., None, None]
    out[:, 1:, :, 1:] = np.transpose(hess, (0, 2, 1, 3))
    return out


def gram_matrix(points, params, jitter: float = 0.0) -> np.ndarray:
    """Value-only Gram matrix ``[k(p_i, p_j)]`` with optional diagonal jitter."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    sq = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    G = np.exp(-_sigma(params) * sq)
    G[np.diag_indices_from(G)] += jitter
    return G
