"""Budget-constrained tolerance allocation.

Minimises ``E(v, v')^q`` over precisions ``v = tau^-2`` subject to
``v_new >= v`` and ``W(v_new) <= W(v) + dW``. Each point either keeps its
gradient precision frozen (value-only points) or ties it to the value
precision (``tau' = tau``), so the decision variable is one precision per
point with per-point work weight ``1`` or ``1 + c``. A value-only point
marked ``switchable`` may be tied during the solve; the switch pays
``c (v^s - v'^s)`` up front.

The search runs in work-increment coordinates ``u_i = w_i (v_new_i^s - v_i^s)``
where the budget set is the simplex ``u >= 0, sum(u) <= dW``: projected
gradient with Armijo backtracking, projecting by a one-dimensional threshold
search. For ``s < 1`` the single-point extreme allocations are probed first
and the local search starts from the best of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .design import TOL_MIN, WorkModelParams

logger = logging.getLogger(__name__)

V_MAX = TOL_MIN**-2.0


@dataclass(eq=False)
class BudgetProblem:
    """Tolerance-allocation problem in precision variables.

    ``objective`` provides ``value(v, vg)`` and ``value_and_grad(v, vg)``
    returning ``E^q`` and its partial derivatives.
    """

    objective: object
    v: np.ndarray
    vg: np.ndarray
    tied: np.ndarray
    budget: float
    wm: WorkModelParams
    switchable: np.ndarray | None = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).copy()
        self.vg = np.asarray(self.vg, dtype=float).copy()
        self.tied = np.asarray(self.tied, dtype=bool).copy()
        if not (self.v.shape == self.vg.shape == self.tied.shape):
            raise ValueError("v, vg and tied must have the same shape")
        if np.any(self.vg > self.v * (1 + 1e-12)):
            raise ValueError("gradient precision exceeds value precision (tau' < tau)")
        if np.any(self.tied & (np.abs(self.vg - self.v) > 1e-12 * np.maximum(self.v, 1.0))):
            raise ValueError("tied points need equal value and gradient precision")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        sw = np.zeros(self.n, dtype=bool) if self.switchable is None else np.asarray(self.switchable, dtype=bool)
        if sw.shape != self.v.shape:
            raise ValueError("switchable must match v in shape")
        self.switchable = sw & ~self.tied

    @property
    def n(self) -> int:
        return self.v.size

    @property
    def weights(self) -> np.ndarray:
        return np.where(self.tied, 1.0 + self.wm.c, 1.0)

    def grad_precisions(self, v_new) -> np.ndarray:
        return np.where(self.tied, v_new, self.vg)

    def work(self, v, vg) -> float:
        s = self.wm.s
        return float(np.sum(np.asarray(v) ** s) + self.wm.c * np.sum(np.asarray(vg) ** s))

    @property
    def work_limit(self) -> float:
        return self.work(self.v, self.vg) + self.budget

    def f(self, v_new) -> float:
        return self.objective.value(v_new, self.grad_precisions(v_new))

    def f_grad(self, v_new) -> tuple[float, np.ndarray]:
        """Objective and total derivative in the per-point precision."""
        val, gv, gvg = self.objective.value_and_grad(v_new, self.grad_precisions(v_new))
        return val, gv + np.where(self.tied, gvg, 0.0)

    def switched(self, i: int) -> "BudgetProblem | None":
        """The problem after tying point ``i``, its switch cost paid; None if unaffordable."""
        s = self.wm.s
        cost = self.wm.c * (self.v[i] ** s - self.vg[i] ** s)
        if not self.switchable[i] or cost > self.budget:
            return None
        vg, tied, sw = self.vg.copy(), self.tied.copy(), self.switchable.copy()
        vg[i], tied[i], sw[i] = self.v[i], True, False
        return BudgetProblem(self.objective, self.v, vg, tied, self.budget - cost, self.wm, sw)

    # work-increment coordinates
    def v_of_u(self, u) -> np.ndarray:
        s = self.wm.s
        return (self.v**s + np.asarray(u) / self.weights) ** (1.0 / s)

    def dv_du(self, u) -> np.ndarray:
        s = self.wm.s
        base = self.v**s + np.asarray(u) / self.weights
        with np.errstate(divide="ignore", invalid="ignore"):
            out = base ** (1.0 / s - 1.0) / (s * self.weights)
        return np.where(np.isfinite(out), out, 0.0)

    def u_cap(self) -> np.ndarray:
        """Per-point work increment reaching the tolerance floor."""
        return np.maximum(self.weights * (V_MAX**self.wm.s - self.v**self.wm.s), 0.0)


@dataclass
class KKTReport:
    ok: bool
    max_residual: float
    multiplier: float
    budget_active: bool
    residuals: np.ndarray = field(repr=False, default=None)


@dataclass
class TolOptResult:
    v: np.ndarray
    vg: np.ndarray
    objective: float
    initial_objective: float
    method: str
    no_progress: bool = False
    floor_hit: bool = False
    iterations: int = 0
    kkt: KKTReport | None = None


def project_budget(y, budget: float, cap=None) -> np.ndarray:
    """Euclidean projection onto ``{0 <= u <= cap, sum(u) <= budget}``.

    The clipped point is returned if it already fits; otherwise the shift
    ``theta`` with ``sum(clip(y - theta, 0, cap)) = budget`` is found by
    bisection.
    """
    y = np.asarray(y, dtype=float)
    cap = np.full_like(y, np.inf) if cap is None else np.asarray(cap, dtype=float)
    u = np.clip(y, 0.0, cap)
    if u.sum() <= budget:
        return u
    lo, hi = 0.0, float(np.max(y))
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        if np.clip(y - theta, 0.0, cap).sum() > budget:
            lo = theta
        else:
            hi = theta
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return np.clip(y - hi, 0.0, cap)


def _projected_gradient(problem: BudgetProblem, u0, max_iter: int, rtol: float):
    budget = problem.budget
    cap = problem.u_cap()
    u = project_budget(u0, budget, cap)

    def fg(u):
        v = problem.v_of_u(u)
        val, gv = problem.f_grad(v)
        return val, gv * problem.dv_du(u)

    f, g = fg(u)
    gmax = np.max(np.abs(g))
    if gmax == 0:
        return u, f, 0
    t = 0.1 * budget / gmax
    it = 0
    for it in range(1, max_iter + 1):
        accepted = False
        while t * np.max(np.abs(g)) > 1e-14 * budget:
            u_new = project_budget(u - t * g, budget, cap)
            step = u_new - u
            if np.max(np.abs(step)) <= 1e-12 * budget:
                return u, f, it
            f_new = problem.f(problem.v_of_u(u_new))
            if f_new <= f + 1e-4 * float(g @ step):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        decrease = f - f_new
        u = u_new
        f, g = fg(u)
        t *= 2.0
        if decrease <= rtol * abs(f):
            break
    return u, f, it


def _probes(problem: BudgetProblem) -> list:
    """Single-point extreme allocations: ``(E^q, index, kind, problem, u)``.

    ``kind`` 0 spends the whole budget on point ``index`` as it is, kind 1
    first switches its gradient on.
    """
    out = []
    for i in range(problem.n):
        for kind, prob in ((0, problem), (1, problem.switched(i) if problem.switchable[i] else None)):
            if prob is None:
                continue
            u = np.zeros(prob.n)
            u[i] = min(prob.budget, prob.u_cap()[i])
            out.append((prob.f(prob.v_of_u(u)), i, kind, prob, u))
    return out


def solve_tolerances(
    problem: BudgetProblem,
    max_iter: int = 100,
    rtol: float = 1e-9,
    kkt_tol: float = 1e-2,
) -> TolOptResult:
    """Allocate the work increment ``problem.budget`` over the points."""
    f0 = problem.f(problem.v)
    if problem.n == 0 or problem.budget <= 0:
        return TolOptResult(problem.v.copy(), problem.vg.copy(), f0, f0, "none", no_progress=True)
    single = np.minimum(problem.budget, problem.u_cap())
    v_single = problem.v_of_u(single)
    if np.all(v_single - problem.v <= 1e-12) and not np.any(problem.switchable):
        return TolOptResult(problem.v.copy(), problem.vg.copy(), f0, f0, "none", no_progress=True)

    kkt = None
    probes = _probes(problem)
    f, i_best, kind, prob, u = min(probes, key=lambda t: (t[0], t[1], t[2]))
    switched = " (gradient switched on)" if kind else ""
    if problem.wm.s >= 1:
        # convex in the continuous variables; only the switch decision comes from the probes
        if kind == 0:
            prob = problem
        u0 = np.full(prob.n, prob.budget / prob.n)
        u, f, its = _projected_gradient(prob, u0, max_iter, rtol)
        method = "projected-gradient" + switched
    else:
        its = 0
        method = "single-point" + switched
        kkt = verify_kkt(prob, prob.v_of_u(u), tol=kkt_tol, gradient="analytic")
        if not kkt.ok:
            u_loc, f_loc, its = _projected_gradient(prob, u, max_iter, rtol)
            if f_loc < f:
                u, f = u_loc, f_loc
                method = "single-point+local" + switched
                kkt = None
    v_new = np.maximum(prob.v_of_u(u), prob.v)
    vg_new = prob.grad_precisions(v_new)
    floor_hit = bool(np.any(u >= prob.u_cap() * (1 - 1e-12)))
    if floor_hit:
        logger.warning("tolerance floor %.1e reached during allocation", TOL_MIN)
    f = prob.f(v_new)
    if f > f0:
        v_new, vg_new, f, method = problem.v.copy(), problem.vg.copy(), f0, method + "(rejected)"
    no_progress = bool(np.all(v_new - problem.v <= 1e-12) and np.all(vg_new - problem.vg <= 1e-12))
    return TolOptResult(
        v_new, vg_new, f, f0, method,
        no_progress=no_progress, floor_hit=floor_hit, iterations=its, kkt=kkt,
    )


def _fd_gradient(problem: BudgetProblem, x, rel_step: float = 1e-3) -> np.ndarray:
    g = np.empty_like(x)
    scale = max(float(np.max(x)), 1.0) * 1e-3
    for i in range(x.size):
        h = rel_step * max(x[i], scale)
        xp = x.copy()
        xp[i] += h
        if x[i] - h >= problem.v[i]:
            xm = x.copy()
            xm[i] -= h
            g[i] = (problem.f(xp) - problem.f(xm)) / (2 * h)
        else:
            g[i] = (problem.f(xp) - problem.f(x)) / h
    return g


def verify_kkt(problem: BudgetProblem, v_new, vg_new=None, tol: float = 1e-2, gradient: str = "fd") -> KKTReport:
    """First-order optimality check with budget and lower-bound multipliers.

    Residuals are relative: ``|g_i + mu dW_i| / (|g_i| + mu |dW_i|)`` on free
    coordinates and the negative part of the bound multiplier on the others.
    """
    x = np.asarray(v_new, dtype=float)
    if gradient == "fd":
        g = _fd_gradient(problem, x)
    else:
        _, g = problem.f_grad(x)
    s = problem.wm.s
    w = problem.weights
    with np.errstate(divide="ignore"):
        dW = s * w * x ** (s - 1.0)
    W = problem.work(x, problem.grad_precisions(x))
    active = W >= problem.work_limit - 1e-8 * max(problem.budget, 1.0)
    free = x > problem.v + 1e-9 * np.maximum(problem.v, 1.0)
    res = np.zeros_like(x)
    mu = 0.0
    if active and np.any(free):
        mu = float(np.mean(-g[free] / dW[free]))
    gscale = max(float(np.max(np.abs(g))), 1e-300)
    for i in range(x.size):
        if active:
            if np.isinf(dW[i]):
                res[i] = 0.0 if not free[i] else 1.0
                continue
            lam = g[i] + mu * dW[i]
            denom = abs(g[i]) + mu * abs(dW[i]) or gscale
            res[i] = abs(lam) / denom if free[i] else max(0.0, -lam) / denom
        else:
            res[i] = abs(g[i]) / gscale if free[i] else max(0.0, -g[i]) / gscale
    if mu < 0:
        res = np.maximum(res, 1.0)
    max_res = float(np.max(res)) if res.size else 0.0
    return KKTReport(max_res <= tol, max_res, mu, bool(active), res)
