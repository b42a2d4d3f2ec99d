"""Designs (evaluation points with value/gradient tolerances) and the work model.

A design assigns each evaluation point ``p_i`` a value tolerance ``tau_i``
and a gradient tolerance ``tau'_i``; ``tau'_i = inf`` means the gradient is
not evaluated. Work is modelled as ``tau^(-2s) + c * tau'^(-2s)`` per point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

TOL_MIN = 1e-8
DUPLICATE_RADIUS = 1e-9


class InvalidDesignError(ValueError):
    pass


class InvalidRefinementError(ValueError):
    """Raised when a supposed refinement loosens a tolerance or drops a point."""


@dataclass(frozen=True)
class WorkModelParams:
    s: float = 0.5
    c: float = 1.0

    def __post_init__(self):
        if not (self.s > 0 and self.c > 0):
            raise ValueError(f"work model needs s > 0 and c > 0, got s={self.s}, c={self.c}")

    def tol_work(self, tol) -> np.ndarray:
        """``tau^(-2s)`` with ``inf -> 0``."""
        tol = np.asarray(tol, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(np.isinf(tol), 0.0, tol ** (-2.0 * self.s))

    def point_work(self, tol_value, tol_grad) -> np.ndarray:
        return self.tol_work(tol_value) + self.c * self.tol_work(tol_grad)

    def tol_for_work(self, work: float) -> float:
        """Inverse of ``tol_work``: the tolerance bought by ``work`` units."""
        if work <= 0:
            return math.inf
        return work ** (-1.0 / (2.0 * self.s))


@dataclass(frozen=True, eq=False)
class Design:
    points: np.ndarray
    tol_value: np.ndarray
    tol_grad: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(0, 0) if pts.size == 0 else pts[None, :]
        tv = np.asarray(self.tol_value, dtype=float).reshape(-1)
        tg = np.asarray(self.tol_grad, dtype=float).reshape(-1)
        if not (pts.shape[0] == tv.size == tg.size):
            raise InvalidDesignError("points and tolerance arrays differ in length")
        if np.any(~np.isfinite(pts)):
            raise InvalidDesignError("points must be finite")
        if np.any(~np.isfinite(tv)) or np.any(tv <= 0):
            raise InvalidDesignError("value tolerances must be finite and positive")
        if np.any(np.isnan(tg)) or np.any(tg <= 0):
            raise InvalidDesignError("gradient tolerances must be positive or inf")
        if np.any(tv > tg):
            raise InvalidDesignError("value tolerance must not exceed gradient tolerance")
        for name, arr in (("points", pts), ("tol_value", tv), ("tol_grad", tg)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, d: int) -> "Design":
        return cls(np.empty((0, d)), np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def has_grad(self) -> np.ndarray:
        return np.isfinite(self.tol_grad)

    @property
    def n_grad(self) -> int:
        return int(np.count_nonzero(self.has_grad))

    def check_box(self, lower, upper) -> None:
        if len(self) and (np.any(self.points < np.asarray(lower)) or np.any(self.points > np.asarray(upper))):
            raise InvalidDesignError("design point outside the domain box")

    def with_points(self, points, tol_value, tol_grad) -> "Design":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return Design(
            np.vstack([self.points.reshape(-1, points.shape[1]), points]),
            np.concatenate([self.tol_value, np.atleast_1d(tol_value)]),
            np.concatenate([self.tol_grad, np.atleast_1d(tol_grad)]),
        )

    def with_tolerances(self, tol_value, tol_grad) -> "Design":
        return Design(self.points, tol_value, tol_grad)

    def is_near_existing(self, p, radius: float = DUPLICATE_RADIUS) -> bool:
        if len(self) == 0:
            return False
        return bool(np.min(np.linalg.norm(self.points - np.asarray(p), axis=1)) <= radius)

    def to_dict(self) -> list[dict]:
        return [
            {
                "point": [float(x) for x in p],
                "tol_value": float(tv),
                "tol_grad": None if math.isinf(tg) else float(tg),
            }
            for p, tv, tg in zip(self.points, self.tol_value, self.tol_grad)
        ]

    @classmethod
    def from_dict(cls, entries: list[dict], d: int | None = None) -> "Design":
        if not entries:
            if d is None:
                raise InvalidDesignError("cannot infer dimension of an empty design")
            return cls.empty(d)
        return cls(
            np.array([e["point"] for e in entries], dtype=float),
            np.array([e["tol_value"] for e in entries], dtype=float),
            np.array([math.inf if e.get("tol_grad") is None else e["tol_grad"] for e in entries]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, d: int | None = None) -> "Design":
        return cls.from_dict(json.loads(text), d)


def work(design: Design, wm: WorkModelParams) -> float:
    """Total modelled work ``sum_i tau_i^(-2s) + c tau'_i^(-2s)``."""
    if len(design) == 0:
        return 0.0
    return float(np.sum(wm.point_work(design.tol_value, design.tol_grad)))


def check_refinement(refined: Design, base: Design) -> None:
    """Refinements keep every base point (by index) with no looser tolerance."""
    n = len(base)
    if len(refined) < n:
        raise InvalidRefinementError("refined design drops base points")
    if n == 0:
        return
    if not np.array_equal(refined.points[:n], base.points):
        raise InvalidRefinementError("refined design moves base points")
    if np.any(refined.tol_value[:n] > base.tol_value) or np.any(refined.tol_grad[:n] > base.tol_grad):
        raise InvalidRefinementError("refined design increases a tolerance")


def incremental_work(refined: Design, base: Design, wm: WorkModelParams) -> float:
    """Work to continue ``base`` into ``refined``: ``W(refined) - W(base)``."""
    check_refinement(refined, base)
    n = len(base)
    extra = 0.0
    if n:
        extra += float(
            np.sum(
                wm.point_work(refined.tol_value[:n], refined.tol_grad[:n])
                - wm.point_work(base.tol_value, base.tol_grad)
            )
        )
    if len(refined) > n:
        extra += float(np.sum(wm.point_work(refined.tol_value[n:], refined.tol_grad[n:])))
    return extra
