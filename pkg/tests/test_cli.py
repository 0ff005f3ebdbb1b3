import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from degenmfg.cli import TASKS, config_hash, load_config, main, run, validate
from degenmfg.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

LQ_MODEL = {"kind": "lq", "n": 1, "d": 1, "T": 1.0, "b2": [[1.0]], "sigma0": [[0.3]],
            "F1": [[1.0]], "F2": [[1.0]]}
COUPLED = {**LQ_MODEL, "coupling": {"F1m": [[0.5]], "B0m": [[0.2]]}}


def small(task, model=LQ_MODEL, **extra):
    cfg = {"schema_version": 1, "seed": 5, "task": task, "model": model, "grid": {"K": 20},
           "solver": {"N": 2000}, "problem": {"t": 0.0, "x": [[1.0]], "mu": [[1.0]]}}
    cfg.update(extra)
    return cfg


def write(tmp_path, cfg, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def summary(out):
    return json.loads((Path(out) / "summary.json").read_text())


def test_compare_passes_and_writes_outputs(tmp_path):
    cfg = small("compare", problem={"x": [[0.0], [1.0]], "mu": [[1.0]]},
                tolerances={"compare_rel": 0.05})
    out = tmp_path / "out"
    assert main(["--config", str(write(tmp_path, cfg)), "--out", str(out)]) == 0
    s = summary(out)
    assert s["status"] == "ok" and all(r["passes"] for r in s["compare"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_sha256"] == config_hash(validate(cfg))
    assert manifest["seed"] == 5 and manifest["task"] == "compare"
    assert "value" in json.loads((out / "timings.json").read_text())


@pytest.mark.parametrize("cfg,key", [
    ({"seed": 1, "task": "value", "model": LQ_MODEL}, "schema_version"),
    ({"schema_version": 1, "task": "value", "model": LQ_MODEL}, "seed"),
    ({"schema_version": 1, "seed": -1, "task": "value", "model": LQ_MODEL}, "seed"),
    ({"schema_version": 1, "seed": 1, "task": "fly", "model": LQ_MODEL}, "task"),
    ({"schema_version": 2, "seed": 1, "task": "value", "model": LQ_MODEL}, "schema_version"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": LQ_MODEL, "extra": 1}, "extra"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": LQ_MODEL,
      "solver": {"particles": 10}}, "solver.particles"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": LQ_MODEL,
      "grid": {"K": 0}}, "grid.K"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": {**LQ_MODEL, "F9": 1}},
     "model.F9"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": {"kind": "nope"}},
     "model.kind"),
    ({"schema_version": 1, "seed": 1, "task": "value", "model": LQ_MODEL,
      "problem": {"t": 2.0}}, "problem.t"),
    ({"schema_version": 1, "seed": 1, "task": "lq-oracle",
      "model": {"kind": "moment_coupled", "f": [[0.5, 0, 2, 0, 0]], "g": [[0.0, 0, 0, 0]]}},
     "model.kind"),
])
def test_config_errors_name_the_key(tmp_path, cfg, key):
    out = tmp_path / "out"
    assert run(cfg, out) == 2
    s = summary(out)
    assert s["status"] == "config_error" and s["key"] == key


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    out = tmp_path / "out"
    assert main(["--config", str(bad), "--out", str(out)]) == 2
    assert summary(out)["key"] == "config"
    missing = tmp_path / "m.yaml"
    missing.write_text(yaml.safe_dump({**small("value"), "model_file": "nowhere.yaml"}))
    assert main(["--config", str(missing), "--out", str(out)]) == 2
    assert summary(out)["key"] == "model_file"


def test_model_file_is_relative_to_config():
    cfg = load_config(CONFIGS / "tanh_lq.yaml")
    assert cfg["model"]["kind"] == "lq" and "model_file" not in cfg


def test_bundled_configs_validate():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = validate(load_config(path))
        assert cfg["task"] in TASKS


def test_failed_check_exits_4(tmp_path):
    out = tmp_path / "out"
    assert main(["--config", str(CONFIGS / "concave_v.yaml"), "--out", str(out)]) == 4
    s = summary(out)
    assert s["status"] == "check_failed"
    assert not s["convexity"]["passes"] and s["convexity"]["witness"] is not None
    assert s["monotonicity"] == "skipped"


def test_divergence_exits_3(tmp_path):
    cfg = small("solve-mfg", model=COUPLED, grid={"K": 10},
                solver={"N": 300, "max_sweeps": 2, "tol": 1e-15, "flow_tol": 1e-15,
                        "continuation_steps": 1},
                problem={"mu": [[0.5], [1.5]]})
    out = tmp_path / "out"
    assert run(cfg, out) == 3
    text = (out / "summary.json").read_text()
    s = json.loads(text, parse_constant=lambda c: pytest.fail(f"non-JSON constant {c}"))
    assert s["status"] == "diverged" and s["kind"] == "FlowDivergence"
    assert 1 <= len(s["trace"]) <= 20


def test_runs_are_deterministic(tmp_path):
    cfg = write(tmp_path, small("solve-mfg", model=COUPLED, problem={"mu": [[0.5], [1.5]]}))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["--config", str(cfg), "--out", str(out)]) == 0
    for name in ("summary.json", "manifest.json", "solution.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_and_task_overrides(tmp_path):
    cfg = write(tmp_path, small("value"))
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--seed", "9",
                 "--task", "lq-oracle"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["task"] == "lq-oracle"
    assert (out / "oracle.csv").exists()
    assert summary(out)["oracle"][0]["D_x2V"][0][0] == pytest.approx(0.7615941559557649,
                                                                   rel=1e-6)


def test_solve_control_and_value_tasks(tmp_path):
    out = tmp_path / "ctl"
    assert run(small("solve-control", export={"csv": False}), out) == 0
    s = summary(out)
    assert s["players"][0]["optimality_residual"] <= 1e-8
    assert not (out / "control_0.csv").exists()
    out = tmp_path / "val"
    assert run(small("value"), out) == 0
    assert summary(out)["values"][0]["V"] == pytest.approx(0.4003, rel=0.02)


def test_check_master_with_points(tmp_path):
    cfg = small("check-master", checks={"points": [[0.3, [1.0]]], "dpp_eps": 0.1},
                solver={"N": 4000})
    out = tmp_path / "out"
    assert run(cfg, out) == 0
    s = summary(out)
    assert s["master"][0]["passes"] and s["dpp"]["passes"]


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, small("lq-oracle"))
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "degenmfg", "--config", str(cfg),
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert summary(out)["status"] == "ok"


def test_validate_rejects_non_mapping_sections():
    with pytest.raises(ConfigError) as err:
        validate({"schema_version": 1, "seed": 1, "task": "value", "model": LQ_MODEL,
                  "grid": [1]})
    assert err.value.key == "grid"
