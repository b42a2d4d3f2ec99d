"""The greedy design loop.

Each iteration refits the surrogate, estimates the global error on the MC
nodes, stops if it is below ``tol``, otherwise picks a candidate point by the
acquisition score, allocates the work increment over old and new points,
runs the corresponding (continued) evaluations, and records a trace row.
State is checkpointed after every iteration so a run can be resumed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .acquisition import select_candidates
from .design import Design, WorkModelParams, incremental_work, work
from .error_model import (
    DesignErrorFunctional,
    ErrorModelConfig,
    NoiseModel,
    global_error,
    make_error_field,
    sobol_points,
    transport_factors_batch,
    write_error_field_csv,
)
from .forward import Evaluator, get_model
from .gegpr import (
    GegprModel,
    HyperparameterBounds,
    KernelParams,
    TrainingSet,
    fit,
    optimize_hyperparameters,
)
from .tolopt import BudgetProblem, solve_tolerances

logger = logging.getLogger(__name__)

CONVERGED = "converged"
STAGNATION = "stagnation"
TOLERANCE_FLOOR = "tolerance_floor_reached"
WORK_CEILING = "work_ceiling"
MAX_ITERATIONS = "max_iterations"
RUNNING = "running"

EXIT_CODES = {CONVERGED: 0, STAGNATION: 2, TOLERANCE_FLOOR: 2, WORK_CEILING: 3, MAX_ITERATIONS: 3}


@dataclass(frozen=True)
class LoopConfig:
    budget_increment: float = 1e4
    tol: float = 1e-2
    max_iterations: int = 200
    max_work: float = 1e9
    n_add: int = 1
    n_candidates: int | None = None
    stagnation_window: int = 10
    stagnation_rtol: float = 1e-3
    refit_hyperparameters: bool = True
    gradients: bool = True
    uniform_tol: float | None = None
    hyper_starts: int = 2
    sigma_bounds: tuple[float, float] = (1.0, 1e2)
    scale_bounds: tuple[float, float] = (1e-6, 1e6)

    def __post_init__(self):
        if not self.budget_increment > 0:
            raise ValueError("budget increment must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.uniform_tol is not None and not (0 < self.uniform_tol < math.inf):
            raise ValueError("uniform tolerance must be positive and finite")
        if self.n_add < 1:
            raise ValueError("n_add must be >= 1")

    @property
    def bounds(self) -> HyperparameterBounds:
        return HyperparameterBounds(tuple(self.sigma_bounds), tuple(self.scale_bounds))


@dataclass
class IterationRecord:
    iteration: int
    work: float
    error: float
    n_points: int
    n_grad: int
    sigma: float
    output_scales: list
    degraded_fit: bool
    candidate: list | None = None
    beta: int | None = None
    score: float | None = None
    method: str = ""
    n_refined: int = 0
    added: bool = False
    work_after: float | None = None


TRACE_COLUMNS = [
    "iteration", "work", "error", "n_points", "n_grad", "sigma", "output_scales", "degraded_fit",
    "candidate", "beta", "score", "method", "n_refined", "added", "work_after",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(_fmt(float(v)) for v in value)
    return str(value)


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    status: str = RUNNING
    label: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# gedoe-trace v1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for rec in self.records:
                row = asdict(rec)
                w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])

    @property
    def errors(self) -> list[float]:
        return [r.error for r in self.records]

    @property
    def final_work(self) -> float:
        return self.records[-1].work if self.records else 0.0

    @property
    def final_error(self) -> float:
        return self.records[-1].error if self.records else math.inf

    def to_dict(self) -> dict:
        return {"status": self.status, "label": self.label, "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, data: dict) -> "RunTrace":
        return cls([IterationRecord(**r) for r in data["records"]], data["status"], data.get("label", ""))


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(rows))


class Journal:
    """Append-only JSON-lines run journal (single writer)."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(type(obj))


@dataclass
class RunState:
    """Everything needed to continue a run deterministically.

    ``params`` seeds the next hyperparameter fit; ``model_params`` are those of
    the last fitted model (set once the run stops).
    """

    iteration: int
    training: TrainingSet
    counter: int
    total_work: float
    params: KernelParams | None
    trace: RunTrace
    model_params: KernelParams | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "training": self.training.to_dict(),
            "counter": self.counter,
            "total_work": self.total_work,
            "params": None if self.params is None else self.params.to_dict(),
            "trace": self.trace.to_dict(),
            "model_params": None if self.model_params is None else self.model_params.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict, d: int, m: int) -> "RunState":
        return cls(
            data["iteration"],
            TrainingSet.from_dict(data["training"], d=d, m=m),
            data["counter"],
            data["total_work"],
            None if data["params"] is None else KernelParams.from_dict(data["params"]),
            RunTrace.from_dict(data["trace"]),
            None if data.get("model_params") is None else KernelParams.from_dict(data["model_params"]),
        )


@dataclass
class RunResult:
    model: GegprModel
    trace: RunTrace
    state: RunState
    field: object = None

    @property
    def status(self) -> str:
        return self.trace.status

    @property
    def design(self) -> Design:
        return self.state.training.design


def initial_design(spec, n_points: int = 7, tol: float = math.sqrt(0.1), seed=0, gradients: bool = False) -> Design:
    """``n_points`` scrambled-Sobol points over the domain at a common tolerance."""
    lower, upper = spec.box
    P = sobol_points(n_points, lower, upper, seed)
    return Design(P, np.full(n_points, tol), np.full(n_points, tol if gradients else math.inf))


def _evaluate_design(evaluator: Evaluator, design: Design, m: int, d: int, journal: Journal) -> TrainingSet:
    values = np.empty((len(design), m))
    grads = np.full((len(design), m, d), np.nan)
    for i, (p, tv, tg) in enumerate(zip(design.points, design.tol_value, design.tol_grad)):
        ev = evaluator(p, tv, tg)
        values[i] = ev.value
        if ev.gradient is not None:
            grads[i] = ev.gradient
    return TrainingSet(design, values, grads)


def _stagnated(errors: list[float], window: int, rtol: float) -> bool:
    if window <= 0 or len(errors) <= window:
        return False
    before = min(errors[:-window])
    recent = min(errors[-window:])
    return recent > (1.0 - rtol) * before


class AdaptiveRun:
    """Stateful driver for :func:`run_adaptive` / :func:`run_baseline_uniform`."""

    def __init__(
        self,
        forward_id: str,
        loop_config: LoopConfig,
        error_config: ErrorModelConfig,
        wm: WorkModelParams,
        noise: NoiseModel,
        seed: int = 0,
        out_dir=None,
        label: str = "",
    ):
        self.forward_id = forward_id
        self.forward = get_model(forward_id)
        self.spec = self.forward.spec
        self.cfg = loop_config
        self.ecfg = error_config
        self.wm = wm
        self.noise = noise
        self.seed = int(seed)
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.label = label
        self.journal = Journal(None if self.out_dir is None else self.out_dir / "journal.jsonl")
        self.nodes = sobol_points(error_config.mc_samples, *self.spec.box, [error_config.mc_seed, self.seed])
        n_cand = loop_config.n_candidates or 256 * self.spec.d
        self.n_candidates = n_cand

    # -- helpers --------------------------------------------------------
    def _factors(self, model):
        return lambda X: transport_factors_batch(model, X, self.noise.likelihood_cov, self.noise.prior_cov)

    def _fit(self, training: TrainingSet, prev: KernelParams | None, iteration: int):
        if prev is None or self.cfg.refit_hyperparameters:
            hf = optimize_hyperparameters(training, self.cfg.bounds, init=prev, n_starts=self.cfg.hyper_starts)
            params, degraded = hf.params, hf.degraded
        else:
            params, degraded = prev, False
        return fit(training, params, box=self.spec.box), degraded

    def start_state(self, design: Design) -> RunState:
        if self.cfg.uniform_tol is not None:
            tu = self.cfg.uniform_tol
            tg = tu if self.cfg.gradients else math.inf
            design = Design(design.points, np.minimum(design.tol_value, tu),
                            np.full(len(design), tg) if self.cfg.gradients else design.tol_grad)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "journal.jsonl").write_text("")
        evaluator = Evaluator(self.forward, self.wm, seed=self.seed, journal=self.journal)
        training = _evaluate_design(evaluator, design, self.spec.m, self.spec.d, self.journal)
        return RunState(0, training, evaluator.counter, evaluator.total_work, None,
                        RunTrace(label=self.label))

    def checkpoint(self, state: RunState) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "checkpoint.json"
        tmp = path.with_suffix(".tmp")
        payload = {"forward": self.forward_id, "seed": self.seed, "state": state.to_dict()}
        tmp.write_text(json.dumps(payload))
        tmp.replace(path)
        state.trace.write_csv(self.out_dir / "trace.csv")

    def load_checkpoint(self) -> RunState:
        data = json.loads((self.out_dir / "checkpoint.json").read_text())
        return RunState.from_dict(data["state"], self.spec.d, self.spec.m)

    # -- main loop ------------------------------------------------------
    def run(self, state: RunState) -> RunResult:
        cfg = self.cfg
        evaluator = Evaluator(self.forward, self.wm, seed=self.seed, counter=state.counter, journal=self.journal)
        evaluator.total_work = state.total_work
        training = state.training
        init_params = state.params
        trace = state.trace
        k = state.iteration
        if trace.status != RUNNING:
            # resuming a stopped run: drop the terminal record and continue
            if trace.records and trace.records[-1].iteration == k:
                trace.records.pop()
            trace.status = RUNNING
        while True:
            model, degraded = self._fit(training, init_params, k)
            params = model.params
            field_ = make_error_field(model, self.spec.box, self.noise, self.ecfg, nodes=self.nodes)
            E = global_error(model, field_, self.ecfg)
            design = training.design
            rec = IterationRecord(
                iteration=k, work=float(evaluator.total_work), error=float(E), n_points=len(design),
                n_grad=design.n_grad, sigma=float(params.sigma),
                output_scales=[float(s) for s in params.output_scales], degraded_fit=bool(degraded),
            )
            trace.records.append(rec)
            status = self._stop_status(trace, evaluator.total_work, k)
            if status is not None:
                trace.status = status
                rec.work_after = rec.work
                break
            try:
                new_training, info = self._step(model, field_, training, evaluator, k)
            except _Stagnation:
                trace.status = TOLERANCE_FLOOR if cfg.uniform_tol is not None else STAGNATION
                rec.work_after = rec.work
                break
            for key, value in info.items():
                setattr(rec, key, value)
            rec.work_after = float(evaluator.total_work)
            self.journal.write({"event": "iteration", **asdict(rec)})
            training = new_training
            init_params = params
            k += 1
            state = RunState(k, training, evaluator.counter, evaluator.total_work, init_params, trace)
            self.checkpoint(state)
        state = RunState(k, training, evaluator.counter, evaluator.total_work, init_params, trace, params)
        self.checkpoint(state)
        self.journal.write({"event": "finished", "status": trace.status, "work": evaluator.total_work,
                            "error": trace.final_error})
        if self.out_dir is not None:
            (self.out_dir / "design.json").write_text(json.dumps(training.design.to_dict(), indent=1))
            write_error_field_csv(self.out_dir / "error_field.csv", model, field_, self.ecfg)
        return RunResult(model, trace, state, field_)

    def _stop_status(self, trace: RunTrace, total_work: float, k: int) -> str | None:
        cfg = self.cfg
        if trace.records[-1].error <= cfg.tol:
            return CONVERGED
        if total_work >= cfg.max_work:
            return WORK_CEILING
        if k >= cfg.max_iterations:
            return MAX_ITERATIONS
        if _stagnated(trace.errors, cfg.stagnation_window, cfg.stagnation_rtol):
            return TOLERANCE_FLOOR if cfg.uniform_tol is not None else STAGNATION
        return None

    def _step(self, model, field_, training: TrainingSet, evaluator: Evaluator, k: int):
        cfg = self.cfg
        design = training.design
        candidates, diag = select_candidates(
            model, design, self._factors(model), self.wm, self.ecfg, self.spec.box,
            self.n_candidates, cfg.n_add, seed=[self.seed, 1000003, k], allow_gradients=cfg.gradients,
        )
        if self.out_dir is not None:
            diag.write_csv(self.out_dir / "candidates_last.csv")
        if not candidates:
            raise _Stagnation
        info = {
            "candidate": [float(x) for x in candidates[0].point],
            "beta": candidates[0].beta,
            "score": candidates[0].score,
        }
        if cfg.uniform_tol is not None:
            tu = cfg.uniform_tol
            tg = tu if cfg.gradients else math.inf
            new_design = design.with_points(np.array([c.point for c in candidates]),
                                            np.full(len(candidates), tu), np.full(len(candidates), tg))
            info.update(method="uniform", added=True)
        else:
            new_design, method = self._allocate(model, field_, design, candidates)
            info.update(method=method, added=len(new_design) > len(design))
        return self._realize(training, new_design, evaluator, info), info

    def _allocate(self, model, field_, design: Design, candidates):
        new_pts = np.array([c.point for c in candidates])
        points = np.vstack([design.points, new_pts])
        v = np.concatenate([design.tol_value**-2.0, np.zeros(len(candidates))])
        vg_old = np.where(design.has_grad, design.tol_grad**-2.0, 0.0)
        vg = np.concatenate([vg_old, np.zeros(len(candidates))])
        tied = np.concatenate([design.has_grad, [bool(c.beta) and self.cfg.gradients for c in candidates]])
        functional = DesignErrorFunctional(model, points, field_, self.ecfg)
        switchable = ~tied if self.cfg.gradients else None
        problem = BudgetProblem(functional, v, vg, tied, self.cfg.budget_increment, self.wm, switchable)
        result = solve_tolerances(problem)
        self.journal.write({
            "event": "allocation", "method": result.method, "objective": result.objective,
            "initial_objective": result.initial_objective, "no_progress": result.no_progress,
            "floor_hit": result.floor_hit, "v": result.v, "vg": result.vg,
        })
        n = len(design)
        with np.errstate(divide="ignore"):
            tv_all = np.where(result.v > 0, result.v**-0.5, math.inf)
            tg_all = np.where(result.vg > 0, result.vg**-0.5, math.inf)
        # old points: keep the exact previous tolerance unless tightened
        tv_old = np.where(result.v[:n] > v[:n], tv_all[:n], design.tol_value)
        tg_old = np.where(result.vg[:n] > vg[:n], tg_all[:n], design.tol_grad)
        tg_old = np.maximum(tg_old, tv_old)
        new_design = Design(design.points, tv_old, tg_old)
        keep = np.flatnonzero(result.v[n:] > 0)
        if keep.size:
            tv_new = tv_all[n:][keep]
            tg_new = np.maximum(tg_all[n:][keep], tv_new)
            new_design = new_design.with_points(new_pts[keep], tv_new, tg_new)
        return new_design, result.method

    def _realize(self, training: TrainingSet, new_design: Design, evaluator: Evaluator, info: dict) -> TrainingSet:
        """Run the evaluations turning ``training`` into data for ``new_design``."""
        old = training.design
        n = len(old)
        values = np.vstack([training.values, np.empty((len(new_design) - n, self.spec.m))])
        grads = np.concatenate([training.gradients,
                                np.full((len(new_design) - n, self.spec.m, self.spec.d), np.nan)])
        refined = 0
        for i in range(len(new_design)):
            tv, tg = new_design.tol_value[i], new_design.tol_grad[i]
            if i < n:
                if tv == old.tol_value[i] and tg == old.tol_grad[i]:
                    continue
                charge = float(self.wm.point_work(tv, tg) - self.wm.point_work(old.tol_value[i], old.tol_grad[i]))
                refined += 1
            else:
                charge = None
            ev = evaluator(new_design.points[i], tv, tg, charge=charge)
            values[i] = ev.value
            grads[i] = ev.gradient if ev.gradient is not None else np.nan
        info["n_refined"] = refined
        expected = incremental_work(new_design, old, self.wm)
        logger.debug("iteration work %.6g", expected)
        return TrainingSet(new_design, values, grads)


class _Stagnation(Exception):
    pass


def run_adaptive(
    forward_id: str,
    loop_config: LoopConfig,
    error_config: ErrorModelConfig,
    wm: WorkModelParams,
    initial: Design,
    noise: NoiseModel,
    seed: int = 0,
    out_dir=None,
    resume: bool = False,
    label: str = "",
) -> RunResult:
    """Run the fully adaptive design loop (positions and tolerances)."""
    if len(initial) == 0:
        raise ValueError("initial design must be nonempty")
    runner = AdaptiveRun(forward_id, loop_config, error_config, wm, noise, seed, out_dir, label)
    if resume:
        state = runner.load_checkpoint()
    else:
        state = runner.start_state(initial)
    return runner.run(state)


def run_baseline_uniform(
    forward_id: str,
    tol_uniform: float,
    loop_config: LoopConfig,
    error_config: ErrorModelConfig,
    wm: WorkModelParams,
    initial: Design,
    noise: NoiseModel,
    seed: int = 0,
    out_dir=None,
    resume: bool = False,
    label: str = "",
) -> RunResult:
    """Position-adaptive loop with every evaluation at the fixed tolerance ``tol_uniform``."""
    if not (0 < tol_uniform < math.inf):
        raise ValueError("uniform tolerance must be positive and finite")
    cfg = replace(loop_config, uniform_tol=float(tol_uniform))
    return run_adaptive(forward_id, cfg, error_config, wm, initial, noise, seed, out_dir, resume, label)


def work_conserved(result: RunResult, wm: WorkModelParams, rtol: float = 1e-6) -> bool:
    """Charged work equals the modelled work of the final design."""
    w = work(result.design, wm)
    return abs(w - result.state.total_work) <= rtol * max(w, 1.0)
