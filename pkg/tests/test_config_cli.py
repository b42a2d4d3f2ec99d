from __future__ import annotations

import json

import numpy as np
import pytest

from gedoe.cli import main
from gedoe.config import ConfigError, ExperimentConfig, default_config

FAST = """\
seed: 0
label: {label}
output_dir: {out}
error: {{mc_samples: 128}}
loop:
  budget_increment: 1e3
  max_iterations: 2
  n_candidates: 64
  hyper_starts: 1
"""


def write(tmp_path, name="c.yaml", label="g", out=None, extra=""):
    out = out or tmp_path / f"run_{label}"
    path = tmp_path / name
    path.write_text(FAST.format(label=label, out=out) + extra)
    return path


def test_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.data == default_config()
    assert cfg.loop_config().sigma_bounds == (1.0, 100.0)
    text = cfg.with_overrides(seed=4, tol=0.5).dump()
    back = ExperimentConfig.from_yaml(text)
    assert back.seed == 4 and back.loop_config().tol == 0.5
    assert back.data == ExperimentConfig.from_yaml(back.dump()).data


def test_numeric_strings_are_accepted():
    cfg = ExperimentConfig.from_yaml("loop:\n  budget_increment: 1e4\n  tol: 1e-2\n")
    assert cfg.loop_config().budget_increment == 1e4


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"x.yaml:3: unknown key 'loop.budjet'"):
        ExperimentConfig.from_yaml("seed: 1\nloop:\n  budjet: 3\n", "x.yaml")


@pytest.mark.parametrize("text", [
    "loop: {tol: -1}\n",
    "loop: {max_iterations: 1.5}\n",
    "noise: {likelihood_cov: [1.0, -1.0, 1.0]}\n",
    "work: {s: 0}\n",
    "loop: {gradients: 1}\n",
    "seed: null\n",
    "error: {q: 0.5}\n",
])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(text)


def test_builders():
    cfg = ExperimentConfig.from_yaml("noise: {prior_cov: null, likelihood_cov: [[1.0, 0.1], [0.1, 1.0]]}\n")
    noise = cfg.noise_model()
    assert noise.prior_cov is None
    np.testing.assert_array_equal(noise.likelihood_cov, [[1.0, 0.1], [0.1, 1.0]])
    np.testing.assert_array_equal(cfg.prior_mean, [1.0, 1.0])


def test_cli_unknown_key_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 0\nloops: {}\n")
    assert main(["run", "--config", str(path)]) == 1
    assert f"{path}:2" in capsys.readouterr().err


def test_cli_dimension_mismatch_exit_1(tmp_path):
    path = write(tmp_path, extra="noise: {likelihood_cov: [1.0, 1.0]}\n")
    assert main(["run", "--config", str(path)]) == 1


def test_cli_run_compare_histogram_reconstruct(tmp_path, capsys):
    path = write(tmp_path)
    out = tmp_path / "run_g"
    assert main(["run", "--config", str(path)]) == 3  # iteration limit
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 2 and summary["label"] == "g"
    assert ExperimentConfig.load(out / "config.yaml").data == ExperimentConfig.load(path).data

    assert main(["compare", str(out), "--out", str(tmp_path / "cmp.csv")]) == 0
    rows = (tmp_path / "cmp_summary.csv").read_text().splitlines()
    assert len(rows) == 3  # version line, header, one run
    assert rows[2].split(",")[-1] == "1.0"

    capsys.readouterr()
    assert main(["histogram", "--run", str(out), "--n-points", "4", "--n-k", "2", "--exact-surrogate"]) == 0
    report = json.loads(capsys.readouterr().out)
    # an exact surrogate reproduces the exact reconstruction: ratios est / 0 overflow
    assert report["overflow"] + report["undefined"] == 4
    assert (out / "histogram.csv").read_text().startswith("# gedoe-histogram v1")

    assert main(["reconstruct", "--run", str(out), "--p-true", "1.0", "1.5",
                 "--out", str(tmp_path / "rec.json")]) in (0, 2)
    rec = json.loads((tmp_path / "rec.json").read_text())
    assert rec["p_true"] == [1.0, 1.5] and len(rec["starts"]) == 5


def test_cli_resume_matches_full_run(tmp_path):
    full = write(tmp_path, "full.yaml", label="full")
    assert main(["run", "--config", str(full)]) == 3
    part = write(tmp_path, "part.yaml", label="part")
    text = part.read_text().replace("max_iterations: 2", "max_iterations: 1")
    part.write_text(text)
    assert main(["run", "--config", str(part)]) == 3
    # resuming with the longer limit continues the same run
    resumed = write(tmp_path, "resume.yaml", label="part")
    assert main(["run", "--config", str(resumed), "--resume"]) == 3
    a = (tmp_path / "run_full" / "trace.csv").read_bytes()
    b = (tmp_path / "run_part" / "trace.csv").read_bytes()
    assert a == b


def test_cli_resume_without_checkpoint(tmp_path):
    assert main(["run", "--config", str(write(tmp_path)), "--resume"]) == 1


def test_cli_no_gradients_and_uniform(tmp_path, capsys):
    path = write(tmp_path)
    assert main(["run", "--config", str(path), "--no-gradients", "--out", str(tmp_path / "v")]) == 3
    assert json.loads((tmp_path / "v" / "summary.json").read_text())["n_grad"] == 0
    assert main(["run", "--config", str(path), "--uniform-tol", "0.1", "--out", str(tmp_path / "u")]) == 3
    design = json.loads((tmp_path / "u" / "design.json").read_text())
    assert all(e["tol_value"] == pytest.approx(0.1) for e in design)


def test_cli_missing_run_dir(tmp_path):
    assert main(["histogram", "--run", str(tmp_path / "none")]) == 1


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GEDOE_NUM_THREADS", "1")
    path = tmp_path / "c.yaml"
    path.write_text(f"output_dir: {tmp_path / 'r'}\nloop: {{tol: .inf}}\n")
    assert main(["run", "--config", str(path)]) == 0
