"""Forward models with tolerance-controlled (simulated) evaluation error.

Models are registered by name. An evaluation at tolerances ``(tau, tau')``
returns the exact value and Jacobian perturbed by independent Gaussian noise
with variances ``tau^2`` and ``tau'^2``; the noise stream is keyed by
``(seed, call counter)`` so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .design import WorkModelParams


class UnknownModelError(KeyError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ForwardSpec:
    d: int
    m: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("need d >= 1 and m >= 1")
        if len(self.lower) != self.d or len(self.upper) != self.d:
            raise ValueError("box bounds must have length d")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("empty domain box")

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.lower, dtype=float), np.array(self.upper, dtype=float)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def contains(self, p, slack: float = 1e-12) -> bool:
        lo, hi = self.box
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo - slack) and np.all(p <= hi + slack))


class ForwardModel:
    """Exact model ``p -> (y(p), y'(p))`` on a box domain."""

    spec: ForwardSpec

    def __call__(self, p) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    # the differentiable-forward protocol shared with surrogates
    def mean_and_jacobian(self, p) -> tuple[np.ndarray, np.ndarray]:
        return self(p)

    def mean_and_jacobian_batch(self, X) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self(x) for x in np.atleast_2d(X)]
        return np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])


def parabolic_cylinder(p, phi: float) -> tuple[float, np.ndarray]:
    """Rotated parabolic cylinder ``(cos(phi)(p1+p2) + sin(phi)(p2-p1))^2`` and its gradient."""
    p = np.asarray(p, dtype=float)
    c, s = math.cos(phi), math.sin(phi)
    u = c * (p[..., 0] + p[..., 1]) + s * (p[..., 1] - p[..., 0])
    direction = np.array([c - s, c + s])
    return u**2, 2.0 * u[..., None] * direction if np.ndim(u) else 2.0 * u * direction


class ParabolicCylinderModel(ForwardModel):
    """Stack of rotated parabolic cylinders on ``[0, 2]^2``, one output per angle."""

    def __init__(self, phis=(0.0, 2.0, 4.0), lower=(0.0, 0.0), upper=(2.0, 2.0)):
        self.phis = tuple(float(phi) for phi in phis)
        self.spec = ForwardSpec(2, len(self.phis), tuple(lower), tuple(upper))

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        vals, grads = zip(*(parabolic_cylinder(p, phi) for phi in self.phis))
        return np.array(vals, dtype=float), np.array(grads, dtype=float)

    def mean_and_jacobian_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        vals, grads = zip(*(parabolic_cylinder(X, phi) for phi in self.phis))
        return np.stack(vals, axis=1), np.stack(grads, axis=1)


class LinearModel(ForwardModel):
    """``y(p) = A p + b``; handy for exactness checks of the inverse solver."""

    def __init__(self, A, b=None, lower=None, upper=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        m, d = self.A.shape
        self.b = np.zeros(m) if b is None else np.asarray(b, dtype=float)
        lower = (-1e6,) * d if lower is None else tuple(lower)
        upper = (1e6,) * d if upper is None else tuple(upper)
        self.spec = ForwardSpec(d, m, lower, upper)

    def __call__(self, p):
        return self.A @ np.asarray(p, dtype=float) + self.b, self.A.copy()


_REGISTRY: dict[str, Callable[[], ForwardModel]] = {
    "parabolic_cylinder": ParabolicCylinderModel,
}


def register_model(name: str, factory: Callable[[], ForwardModel]) -> None:
    """Mount an external evaluator (e.g. a FEM wrapper) under ``name``."""
    _REGISTRY[name] = factory


def get_model(model_id: str) -> ForwardModel:
    try:
        return _REGISTRY[model_id]()
    except KeyError:
        raise UnknownModelError(f"unknown forward model {model_id!r}; known: {sorted(_REGISTRY)}") from None


def available_models() -> list[str]:
    return sorted(_REGISTRY)


@dataclass(frozen=True)
class Evaluation:
    point: np.ndarray
    value: np.ndarray
    gradient: np.ndarray | None
    tol_value: float
    tol_grad: float
    charged_work: float

    def to_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "value": self.value.tolist(),
            "gradient": None if self.gradient is None else self.gradient.tolist(),
            "tol_value": self.tol_value,
            "tol_grad": None if math.isinf(self.tol_grad) else self.tol_grad,
            "work": self.charged_work,
        }


def noise_rng(seed: int, counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(counter)]))


def evaluate(
    model: str | ForwardModel,
    p,
    tol_value: float,
    tol_grad: float,
    rng: np.random.Generator,
    wm: WorkModelParams | None = None,
) -> Evaluation:
    """Simulated inexact evaluation of ``model`` at ``p``."""
    fm = get_model(model) if isinstance(model, str) else model
    p = np.asarray(p, dtype=float)
    if p.shape != (fm.spec.d,):
        raise ValueError(f"point must have shape ({fm.spec.d},), got {p.shape}")
    if not fm.spec.contains(p):
        raise OutOfDomainError(f"point {p} outside the domain")
    if not tol_value > 0 or math.isinf(tol_value):
        raise ValueError("value tolerance must be positive and finite")
    if not tol_grad >= tol_value:
        raise ValueError("gradient tolerance must not be below the value tolerance")
    wm = wm or WorkModelParams()
    y, J = fm(p)
    value = y + tol_value * rng.standard_normal(y.shape)
    gradient = None
    if math.isfinite(tol_grad):
        gradient = J + tol_grad * rng.standard_normal(J.shape)
    charged = float(wm.point_work(tol_value, tol_grad))
    return Evaluation(p.copy(), value, gradient, float(tol_value), float(tol_grad), charged)


class Evaluator:
    """Counter-keyed evaluation service with a serialized work ledger."""

    def __init__(self, model: str | ForwardModel, wm: WorkModelParams, seed: int = 0, counter: int = 0, journal=None):
        self.model = get_model(model) if isinstance(model, str) else model
        self.wm = wm
        self.seed = int(seed)
        self.counter = int(counter)
        self.total_work = 0.0
        self.journal = journal

    def __call__(self, p, tol_value: float, tol_grad: float = math.inf, charge: float | None = None) -> Evaluation:
        """Evaluate; ``charge`` overrides the ledger charge (continuation of earlier runs)."""
        ev = evaluate(self.model, p, tol_value, tol_grad, noise_rng(self.seed, self.counter), self.wm)
        self.counter += 1
        self.total_work += ev.charged_work if charge is None else charge
        if self.journal is not None:
            self.journal.write({"event": "evaluation", **ev.to_dict(),
                                "charged": ev.charged_work if charge is None else charge})
        return ev
