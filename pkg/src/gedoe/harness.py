"""Experiment helpers: error-ratio histograms, reconstructions and run comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .error_model import ErrorModelConfig, NoiseModel, local_errors, transport_factors_batch
from .inverse import InverseProblem, reconstruct, sampled_true_error


@dataclass
class RatioSample:
    points: np.ndarray
    estimated: np.ndarray
    actual: np.ndarray
    dropped: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.actual > 0, self.estimated / self.actual, np.inf)


def inverse_template(noise: NoiseModel, prior_mean, box) -> InverseProblem:
    m = np.asarray(noise.likelihood_cov).shape[0]
    return InverseProblem(np.zeros(m), noise.likelihood_cov, noise.prior_cov, prior_mean, *box)


def error_ratio_sample(
    surrogate,
    exact,
    noise: NoiseModel,
    prior_mean,
    config: ErrorModelConfig,
    n_points: int = 1600,
    n_k: int = 10,
    seed: int = 0,
    estimator=None,
) -> RatioSample:
    """Estimated local errors against sampled reconstruction errors at random points.

    The estimate comes from ``estimator`` (default: ``surrogate``), a fitted
    model; reconstructions go through ``surrogate`` and ``exact``.
    """
    estimator = surrogate if estimator is None else estimator
    lower, upper = exact.spec.box
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    P = lower + (upper - lower) * rng.random((n_points, exact.spec.d))
    factors = transport_factors_batch(estimator, P, noise.likelihood_cov, noise.prior_cov)
    est = local_errors(estimator, P, factors, config)
    template = inverse_template(noise, prior_mean, exact.spec.box)
    actual = np.empty(n_points)
    dropped = np.zeros(n_points, dtype=int)
    for i, p in enumerate(P):
        actual[i], dropped[i] = sampled_true_error(p, surrogate, exact, template, n_k, rng)
    return RatioSample(P, est, actual, dropped)


@dataclass
class LogHistogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int
    undefined: int

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.underflow + self.overflow)

    def mass_between(self, lo: float, hi: float) -> float:
        """Fraction of defined ratios with ``lo <= r < hi`` (bin-aligned bounds)."""
        if self.total == 0:
            return 0.0
        left = self.edges[:-1] >= math.log10(lo) - 1e-12
        right = self.edges[1:] <= math.log10(hi) + 1e-12
        return float(self.counts[left & right].sum() / self.total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# gedoe-histogram v1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin", "log10_lo", "log10_hi", "count"])
            w.writerow(["underflow", "-inf", repr(float(self.edges[0])), self.underflow])
            for j, c in enumerate(self.counts):
                w.writerow([j, repr(float(self.edges[j])), repr(float(self.edges[j + 1])), int(c)])
            w.writerow(["overflow", repr(float(self.edges[-1])), "inf", self.overflow])
            w.writerow(["undefined", "", "", self.undefined])


def log_histogram(ratios, lo: float = -3.0, hi: float = 3.0, bins_per_decade: int = 4) -> LogHistogram:
    """Histogram of ``log10(ratios)``; infinite ratios go to overflow, NaN to undefined."""
    r = np.asarray(ratios, dtype=float)
    undefined = int(np.isnan(r).sum())
    r = r[~np.isnan(r)]
    edges = np.linspace(lo, hi, int(round((hi - lo) * bins_per_decade)) + 1)
    with np.errstate(divide="ignore"):
        lr = np.log10(r)
    under = int(np.sum(lr < lo))
    over = int(np.sum(lr > hi))
    inside = lr[(lr >= lo) & (lr <= hi)]
    counts, _ = np.histogram(inside, bins=edges)
    return LogHistogram(edges, counts, under, over, undefined)


def reconstruct_report(surrogate, exact, noise: NoiseModel, prior_mean, p_true, noise_scale: float = 0.0,
                       seed: int = 0, n_starts: int = 5) -> dict:
    """Reconstruct ``p_true`` through ``surrogate`` from (optionally noisy) exact-model data."""
    p_true = np.asarray(p_true, dtype=float)
    y, _ = exact.mean_and_jacobian(p_true)
    if noise_scale > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
        y = y + noise_scale * np.linalg.cholesky(np.asarray(noise.likelihood_cov)) @ rng.standard_normal(y.size)
    problem = inverse_template(noise, prior_mean, exact.spec.box).with_measurements(y)
    rec = reconstruct(problem, surrogate, n_starts=n_starts, seed=seed)
    out = rec.to_dict(p_true)
    out["converged"] = bool(rec.reports[rec.best_start].converged)
    out["active_bounds"] = rec.reports[rec.best_start].active_bounds
    return out
