"""Candidate scoring: predicted local error decrease per unit of work.

For a candidate ``p`` with current value-variance trace ``eps`` the
hypothetical evaluation tolerance is ``tau = sqrt(eps)``. For the gradient
flag ``beta = 0`` (value only, cost ``tau^-2s``) and ``beta = 1``
(``tau' = tau``, cost ``(1 + c) tau^-2s``) the score is::

    e(p)^(q-1) * (d e / d tau) / (d W / d tau)

with the trace derivatives taken by central differences of the
hypothetically updated marginal covariance. ``de/dtau > 0`` and
``dW/dtau < 0``, so the negated ratio is a nonnegative decrease rate; larger
is better.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .design import DUPLICATE_RADIUS, Design, WorkModelParams
from .error_model import ErrorModelConfig, TransportFactors, combine_local, sobol_points
from .gegpr import GegprModel, hypothetical_update

FD_REL_STEP = 1e-3


@dataclass(frozen=True)
class Candidate:
    point: np.ndarray
    beta: int
    score: float


def _traces(cov):
    eps = np.sum(cov[..., 0, 0], axis=-1)
    eps_g = np.sum(np.trace(cov[..., 1:, 1:], axis1=-2, axis2=-1), axis=-1)
    return eps, eps_g


def acquisition_scores(
    model: GegprModel,
    X,
    factors: TransportFactors,
    wm: WorkModelParams,
    config: ErrorModelConfig,
    allow_gradients: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores for ``beta = 0`` and ``beta = 1`` at each row of ``X``.

    Returns ``(best_score, best_beta, scores)`` with ``scores`` of shape
    ``(l, 2)``. Ties go to ``beta = 0``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, cov = model.predict_batch(X)
    eps, eps_g = _traces(cov)
    e = combine_local(eps, eps_g, factors, config.alpha)
    tau = np.sqrt(eps)
    h = FD_REL_STEP * tau
    s, c, q = wm.s, wm.c, config.q
    scores = np.zeros((X.shape[0], 2))
    ok = tau > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for beta in (0, 1):
            if beta == 1 and not allow_gradients:
                continue
            local = []
            for t in (tau + h, tau - h):
                tg = t if beta else np.inf
                cov_h = hypothetical_update(cov, t, tg)
                local.append(combine_local(*_traces(cov_h), factors, config.alpha))
            de_dtau = (local[0] - local[1]) / (2 * h)
            dW_dtau = -2.0 * s * tau ** (-2.0 * s - 1.0) * (1.0 + c * beta)
            score = -(e ** (q - 1.0)) * de_dtau / dW_dtau
            scores[:, beta] = np.where(ok & np.isfinite(score), np.maximum(score, 0.0), 0.0)
    best_beta = (scores[:, 1] > scores[:, 0]).astype(int)
    best = scores[np.arange(X.shape[0]), best_beta]
    return best, best_beta, scores


def acquisition_score(p, model, factors, wm, config, allow_gradients: bool = True) -> tuple[float, int]:
    best, beta, _ = acquisition_scores(model, np.asarray(p, dtype=float).reshape(1, -1),
                                       _as_batch(factors), wm, config, allow_gradients)
    return float(best[0]), int(beta[0])


def _as_batch(f: TransportFactors) -> TransportFactors:
    return TransportFactors(np.atleast_1d(f.a), np.atleast_1d(f.a_prime), np.atleast_1d(f.e0),
                            np.atleast_1d(f.ill_conditioned))


@dataclass(frozen=True)
class CandidateScores:
    """A scored candidate pool (kept for diagnostics export)."""

    points: np.ndarray
    scores: np.ndarray
    betas: np.ndarray
    admissible: np.ndarray

    def write_csv(self, path) -> None:
        d = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            fh.write("# gedoe-candidates v1\n")
            w = csv.writer(fh)
            w.writerow([f"p{j + 1}" for j in range(d)] + ["score_value", "score_gradient", "beta", "admissible"])
            for p, sc, b, ok in zip(self.points, self.scores, self.betas, self.admissible):
                w.writerow([repr(float(x)) for x in p] + [repr(float(sc[0])), repr(float(sc[1])), int(b), int(ok)])


def select_candidates(
    model: GegprModel,
    design: Design,
    factors_fn,
    wm: WorkModelParams,
    config: ErrorModelConfig,
    box,
    n_candidates: int,
    n_add: int = 1,
    seed=0,
    allow_gradients: bool = True,
) -> tuple[list[Candidate], CandidateScores]:
    """Best ``n_add`` points of a seeded scrambled-Sobol pool.

    Pool points within ``DUPLICATE_RADIUS`` of a design point are dropped;
    ties are broken by the lowest pool index.
    """
    lower, upper = box
    pool = sobol_points(n_candidates, lower, upper, seed)
    factors = factors_fn(pool)
    best, beta, scores = acquisition_scores(model, pool, factors, wm, config, allow_gradients)
    admissible = np.ones(pool.shape[0], dtype=bool)
    if len(design):
        dist = np.linalg.norm(pool[:, None, :] - design.points[None, :, :], axis=-1).min(axis=1)
        admissible = dist > DUPLICATE_RADIUS
    diag = CandidateScores(pool, scores, beta, admissible)
    order = np.lexsort((np.arange(pool.shape[0]), -best))
    chosen = [i for i in order if admissible[i]][:n_add]
    return [Candidate(pool[i].copy(), int(beta[i]), float(best[i])) for i in chosen], diag
