"""Experiment configuration: a YAML file with a fixed, documented schema.

Unknown keys are rejected with the line they appear on. Numbers written as
``1e4`` (a string under YAML 1.1) are accepted for numeric fields.

Schema (defaults shown)::

    forward: parabolic_cylinder
    seed: 0
    label: ""
    output_dir: runs/run
    noise:
      likelihood_cov: [0.01, 0.001, 0.01]   # diagonal entries or full matrix
      prior_cov: [1.0, 1.0]                 # diagonal, full matrix, or null (flat prior)
      prior_mean: [1.0, 1.0]
    work: {s: 0.5, c: 1.0}
    error: {q: 2.0, alpha: 1.0, mc_samples: 1024, mc_seed: 0}
    initial_design: {n_points: 7, tol: 0.31622776601683794, gradients: false}
    loop:
      budget_increment: 1.0e+4
      tol: 1.0e-2
      max_iterations: 200
      max_work: 1.0e+9
      n_add: 1
      n_candidates: null                    # 256 * d
      stagnation_window: 10
      stagnation_rtol: 1.0e-3
      refit_hyperparameters: true
      gradients: true
      uniform_tol: null
      hyper_starts: 2
      sigma_bounds: [1.0, 100.0]
      scale_bounds: [1.0e-6, 1.0e+6]
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .design import WorkModelParams
from .error_model import ErrorModelConfig, NoiseModel
from .loop import LoopConfig


class ConfigError(ValueError):
    pass


_FLOAT, _INT, _BOOL, _STR, _LIST, _ANY = "float", "int", "bool", "str", "list", "any"

SCHEMA = {
    "forward": _STR,
    "seed": _INT,
    "label": _STR,
    "output_dir": _STR,
    "noise": {"likelihood_cov": _LIST, "prior_cov": _ANY, "prior_mean": _LIST},
    "work": {"s": _FLOAT, "c": _FLOAT},
    "error": {"q": _FLOAT, "alpha": _FLOAT, "mc_samples": _INT, "mc_seed": _INT},
    "initial_design": {"n_points": _INT, "tol": _FLOAT, "gradients": _BOOL},
    "loop": {
        "budget_increment": _FLOAT,
        "tol": _FLOAT,
        "max_iterations": _INT,
        "max_work": _FLOAT,
        "n_add": _INT,
        "n_candidates": _INT,
        "stagnation_window": _INT,
        "stagnation_rtol": _FLOAT,
        "refit_hyperparameters": _BOOL,
        "gradients": _BOOL,
        "uniform_tol": _FLOAT,
        "hyper_starts": _INT,
        "sigma_bounds": _LIST,
        "scale_bounds": _LIST,
    },
}

NULLABLE = {("loop", "n_candidates"), ("loop", "uniform_tol"), ("noise", "prior_cov")}


def _default_loop() -> dict:
    cfg = LoopConfig()
    out = {}
    for f in fields(LoopConfig):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "forward": "parabolic_cylinder",
        "seed": 0,
        "label": "",
        "output_dir": "runs/run",
        "noise": {"likelihood_cov": [0.01, 0.001, 0.01], "prior_cov": [1.0, 1.0], "prior_mean": [1.0, 1.0]},
        "work": {"s": 0.5, "c": 1.0},
        "error": {"q": 2.0, "alpha": 1.0, "mc_samples": 1024, "mc_seed": 0},
        "initial_design": {"n_points": 7, "tol": math.sqrt(0.1), "gradients": False},
        "loop": _default_loop(),
    }


def _check_keys(node, schema, path, source):
    if not isinstance(node, yaml.MappingNode):
        where = "top level" if not path else ".".join(path)
        raise ConfigError(f"{source}:{node.start_mark.line + 1}: {where} must be a mapping")
    for key_node, value_node in node.value:
        key = key_node.value
        if key not in schema:
            dotted = ".".join(path + [key])
            raise ConfigError(f"{source}:{key_node.start_mark.line + 1}: unknown key '{dotted}'")
        if isinstance(schema[key], dict):
            _check_keys(value_node, schema[key], path + [key], source)


def _coerce(value, kind, name):
    if value is None:
        return None
    try:
        if kind == _FLOAT:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == _INT:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if kind == _BOOL:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == _STR:
            return str(value)
        if kind == _LIST:
            if not isinstance(value, list):
                raise TypeError
            return [[float(x) for x in row] if isinstance(row, list) else float(row) for row in value]
        if kind == _ANY:
            return _coerce(value, _LIST, name)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' has invalid value {value!r} (expected {kind})") from None
    raise AssertionError(kind)


def _merge(base: dict, data: dict, schema: dict, path: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in data.items():
        dotted = ".".join(path + [key])
        kind = schema[key]
        if isinstance(kind, dict):
            if value is None:
                continue
            out[key] = _merge(base[key], value, kind, path + [key])
        else:
            if value is None and tuple(path + [key]) not in NULLABLE:
                raise ConfigError(f"'{dotted}' must not be null")
            out[key] = _coerce(value, kind, dotted)
    return out


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration (plain nested dict plus typed views)."""

    data: dict = field(default_factory=default_config)
    source: str = "<config>"

    @classmethod
    def from_yaml(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f":{mark.line + 1}" if mark is not None else ""
            raise ConfigError(f"{source}{line}: {getattr(exc, 'problem', exc)}") from None
        if node is None:
            return cls(default_config(), source)
        _check_keys(node, SCHEMA, [], source)
        raw = yaml.safe_load(text)
        try:
            cfg = cls(_merge(default_config(), raw, SCHEMA, []), source)
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read(), str(path))

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def validate(self) -> None:
        try:
            self.loop_config()
            self.work_model()
            self.error_config()
            self.noise_model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data["initial_design"]["n_points"] < 1:
            raise ConfigError("initial_design.n_points must be >= 1")

    def with_overrides(self, **loop_overrides) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        for key, value in loop_overrides.items():
            if key in ("seed", "label", "output_dir"):
                data[key] = value
            else:
                data["loop"][key] = value
        cfg = ExperimentConfig(data, self.source)
        cfg.validate()
        return cfg

    @property
    def forward(self) -> str:
        return self.data["forward"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def label(self) -> str:
        return self.data["label"]

    @property
    def output_dir(self) -> str:
        return self.data["output_dir"]

    def loop_config(self) -> LoopConfig:
        kw = dict(self.data["loop"])
        kw["sigma_bounds"] = tuple(kw["sigma_bounds"])
        kw["scale_bounds"] = tuple(kw["scale_bounds"])
        return LoopConfig(**kw)

    def work_model(self) -> WorkModelParams:
        return WorkModelParams(**self.data["work"])

    def error_config(self) -> ErrorModelConfig:
        return ErrorModelConfig(**self.data["error"])

    def noise_model(self) -> NoiseModel:
        n = self.data["noise"]
        Sl = _matrix(n["likelihood_cov"])
        Sp = None if n["prior_cov"] is None else _matrix(n["prior_cov"])
        for M, name in ((Sl, "likelihood_cov"), (Sp, "prior_cov")):
            if M is None:
                continue
            if not np.allclose(M, M.T) or np.any(np.linalg.eigvalsh(M) <= 0):
                raise ValueError(f"noise.{name} must be symmetric positive definite")
        return NoiseModel(Sl, Sp)

    @property
    def prior_mean(self) -> np.ndarray:
        return np.asarray(self.data["noise"]["prior_mean"], dtype=float)


def _matrix(spec) -> np.ndarray:
    M = np.asarray(spec, dtype=float)
    return np.diag(M) if M.ndim == 1 else M
