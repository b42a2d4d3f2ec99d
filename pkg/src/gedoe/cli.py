"""Command-line interface: ``gedoe run | compare | histogram | reconstruct``.

Exit codes: 0 success (``run``: TOL reached), 1 configuration or usage
error, 2 stagnation / GN non-convergence, 3 work ceiling or iteration limit.
The thread count of the linear-algebra backend is taken from
``GEDOE_NUM_THREADS`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .forward import UnknownModelError, get_model
from .gegpr import fit
from .harness import error_ratio_sample, log_histogram, reconstruct_report
from .loop import EXIT_CODES, AdaptiveRun, RunState, initial_design, read_trace_csv

logger = logging.getLogger("gedoe")

THREADS_ENV = "GEDOE_NUM_THREADS"


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "no_gradients", False):
        overrides["gradients"] = False
    if getattr(args, "uniform_tol", None) is not None:
        overrides["uniform_tol"] = args.uniform_tol
    return cfg.with_overrides(**overrides) if overrides else cfg


def _check_dimensions(cfg: ExperimentConfig):
    fm = get_model(cfg.forward)
    noise = cfg.noise_model()
    if noise.likelihood_cov.shape != (fm.spec.m, fm.spec.m):
        raise ConfigError(f"noise.likelihood_cov must be {fm.spec.m}x{fm.spec.m} for '{cfg.forward}'")
    if noise.prior_cov is not None and noise.prior_cov.shape != (fm.spec.d, fm.spec.d):
        raise ConfigError(f"noise.prior_cov must be {fm.spec.d}x{fm.spec.d}")
    if cfg.prior_mean.shape != (fm.spec.d,):
        raise ConfigError(f"noise.prior_mean must have length {fm.spec.d}")
    return fm


def _runner(cfg: ExperimentConfig, out_dir) -> AdaptiveRun:
    return AdaptiveRun(cfg.forward, cfg.loop_config(), cfg.error_config(), cfg.work_model(),
                       cfg.noise_model(), cfg.seed, out_dir, cfg.label)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    fm = _check_dimensions(cfg)
    out = Path(cfg.output_dir)
    runner = _runner(cfg, out)
    if args.resume:
        if not (out / "checkpoint.json").exists():
            print(f"error: no checkpoint in {out}", file=sys.stderr)
            return 1
        state = runner.load_checkpoint()
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.dump())
        init = cfg.data["initial_design"]
        design = initial_design(fm.spec, init["n_points"], init["tol"], seed=cfg.seed,
                                gradients=init["gradients"])
        state = runner.start_state(design)
    result = runner.run(state)
    summary = {
        "label": cfg.label,
        "status": result.status,
        "iterations": len(result.trace.records) - 1,
        "work": result.state.total_work,
        "error": result.trace.final_error,
        "n_points": len(result.design),
        "n_grad": result.design.n_grad,
        "gradients": cfg.loop_config().gradients,
        "uniform_tol": cfg.loop_config().uniform_tol,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_CODES.get(result.status, 3)


def _run_dir(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return p
    return Path(ExperimentConfig.load(p).output_dir)


def cmd_compare(args) -> int:
    rows, summaries = [], []
    for spec in args.runs:
        run_dir = _run_dir(spec)
        trace_path = run_dir / "trace.csv"
        if not trace_path.exists():
            print(f"error: missing run artifacts in {run_dir}", file=sys.stderr)
            return 1
        summary = json.loads((run_dir / "summary.json").read_text()) if (run_dir / "summary.json").exists() else {}
        label = summary.get("label") or run_dir.name
        trace = read_trace_csv(trace_path)
        for r in trace:
            rows.append((label, int(r["iteration"]), float(r["work"]), float(r["error"])))
        summaries.append({
            "label": label,
            "status": summary.get("status", ""),
            "work": float(trace[-1]["work"]),
            "error": float(trace[-1]["error"]),
            "gradients": summary.get("gradients", True) and summary.get("uniform_tol") is None,
        })
    ref = next((s for s in summaries if s["gradients"]), summaries[0])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write("# gedoe-compare v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "iteration", "work", "error"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3])])
    table = out.with_name(out.stem + "_summary.csv")
    with open(table, "w", newline="") as fh:
        fh.write("# gedoe-compare-summary v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "status", "final_work", "final_error", "work_ratio_to_gradient_run"])
        for s in summaries:
            w.writerow([s["label"], s["status"], repr(s["work"]), repr(s["error"]), repr(s["work"] / ref["work"])])
    print(f"{'label':<24}{'status':<26}{'work':>14}{'E':>12}{'W/W_g':>10}")
    for s in summaries:
        print(f"{s['label']:<24}{s['status']:<26}{s['work']:>14.6g}{s['error']:>12.4g}{s['work'] / ref['work']:>10.3g}")
    return 0


def _load_run(args):
    run_dir = Path(args.run) if args.run else Path(_load_config(args).output_dir)
    cfg_path = run_dir / "config.yaml"
    if not (run_dir / "checkpoint.json").exists() or not cfg_path.exists():
        raise FileNotFoundError(f"missing run artifacts in {run_dir}")
    cfg = ExperimentConfig.load(cfg_path)
    fm = get_model(cfg.forward)
    data = json.loads((run_dir / "checkpoint.json").read_text())
    state = RunState.from_dict(data["state"], fm.spec.d, fm.spec.m)
    model = fit(state.training, state.model_params or state.params, box=fm.spec.box)
    return run_dir, cfg, fm, model


def cmd_histogram(args) -> int:
    run_dir, cfg, fm, model = _load_run(args)
    surrogate = fm if args.exact_surrogate else model
    sample = error_ratio_sample(surrogate, fm, cfg.noise_model(), cfg.prior_mean, cfg.error_config(),
                                n_points=args.n_points, n_k=args.n_k, seed=cfg.seed, estimator=model)
    hist = log_histogram(sample.ratios)
    out = Path(args.out) if args.out else run_dir / "histogram.csv"
    hist.write_csv(out)
    with open(out.with_name(out.stem + "_ratios.csv"), "w", newline="") as fh:
        fh.write("# gedoe-ratios v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p{j + 1}" for j in range(fm.spec.d)] + ["estimated", "actual", "dropped"])
        for p, e, a, dr in zip(sample.points, sample.estimated, sample.actual, sample.dropped):
            w.writerow([repr(float(x)) for x in p] + [repr(float(e)), repr(float(a)), int(dr)])
    report = {
        "n_points": args.n_points,
        "n_k": args.n_k,
        "mass_0.1_10": hist.mass_between(0.1, 10.0),
        "below_0.1": int(np.sum(sample.ratios < 0.1)),
        "above_10": int(np.sum(sample.ratios > 10.0)),
        "overflow": hist.overflow,
        "underflow": hist.underflow,
        "undefined": hist.undefined,
        "dropped_replicates": int(sample.dropped.sum()),
    }
    print(json.dumps(report))
    return 0


def cmd_reconstruct(args) -> int:
    _, cfg, fm, model = _load_run(args)
    report = reconstruct_report(model, fm, cfg.noise_model(), cfg.prior_mean, args.p_true,
                                noise_scale=args.noise_scale, seed=cfg.seed)
    print(json.dumps(report, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return 0 if report["converged"] else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gedoe", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the adaptive design loop")
    run.add_argument("--config", help="YAML experiment configuration")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    run.add_argument("--no-gradients", action="store_true", help="force beta = 0")
    run.add_argument("--uniform-tol", type=float, help="position-adaptive baseline with this fixed tolerance")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="merge traces of finished runs")
    cmp_.add_argument("runs", nargs="+", help="run directories or their config files")
    cmp_.add_argument("--out", required=True, help="merged CSV path")
    cmp_.set_defaults(func=cmd_compare)

    hist = sub.add_parser("histogram", help="estimated / sampled error ratio histogram")
    hist.add_argument("--config")
    hist.add_argument("--run", help="run directory (default: output_dir of the config)")
    hist.add_argument("--n-points", type=int, default=1600)
    hist.add_argument("--n-k", type=int, default=10)
    hist.add_argument("--out")
    hist.add_argument("--exact-surrogate", action="store_true", help="use the exact model as surrogate (sanity check)")
    hist.set_defaults(func=cmd_histogram)

    rec = sub.add_parser("reconstruct", help="reconstruct a parameter through the surrogate")
    rec.add_argument("--config")
    rec.add_argument("--run")
    rec.add_argument("--p-true", type=float, nargs="+", required=True)
    rec.add_argument("--noise-scale", type=float, default=0.0)
    rec.add_argument("--out")
    rec.set_defaults(func=cmd_reconstruct)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(int(threads)):
            return _dispatch(args)
    return _dispatch(args)


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (UnknownModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
