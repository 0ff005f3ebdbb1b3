"""Config-driven runner: ``degenmfg --config run.yaml --out results/ --task compare``.

Exit codes: 0 success, 2 configuration error, 3 solver divergence, 4 failed check.
Every run writes ``summary.json`` (canonical, numbers only), ``timings.json``
and ``manifest.json`` (config hash, seed, task) into the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DivergenceError
from .fbsde import SolverParams, TimeGrid, bsde_residual, solve_control, solve_mfg
from .measure import ParticleMeasure

SCHEMA_VERSION = 1
TASKS = ("solve-mfg", "solve-control", "value", "derivatives", "check-master",
         "check-assumptions", "lq-oracle", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4

DEFAULT_TOLERANCES = {
    "compare_rel": 0.02,
    "compare_floor": 0.1,
    "master_abs": 0.05,
    "dpp_abs": 0.01,
    "convexity": 1e-10,
    "monotonicity": 1e-9,
    "derivative": 1e-6,
}


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be a mapping")
    base = Path(path).parent
    if "model_file" in cfg:
        model_path = base / cfg.pop("model_file")
        try:
            cfg["model"] = yaml.safe_load(model_path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError("model_file", f"cannot load {model_path}: {exc}") from exc
    return cfg


def _require(cfg, key, kind=None):
    if key not in cfg:
        raise ConfigError(key, "missing required field")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(key, f"expected {kind.__name__}")
    return val


def _section(cfg, key) -> dict:
    val = cfg.get(key) or {}
    if not isinstance(val, dict):
        raise ConfigError(key, "must be a mapping")
    return val


def validate(cfg: dict) -> dict:
    """Normalise a raw config; raises ConfigError naming the offending key."""
    allowed = {"schema_version", "seed", "task", "model", "grid", "solver", "problem",
               "tolerances", "validators", "checks", "probes", "export"}
    for key in cfg:
        if key not in allowed:
            raise ConfigError(key, "unknown top-level field")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    seed = cfg.get("seed")
    if seed is None:
        raise ConfigError("seed", "a seed is mandatory")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a nonnegative integer")
    task = _require(cfg, "task", str)
    if task not in TASKS:
        raise ConfigError("task", f"unknown task {task!r}; choose one of {', '.join(TASKS)}")
    _require(cfg, "model", dict)
    for sec in ("grid", "solver", "problem", "tolerances", "validators", "checks", "export"):
        _section(cfg, sec)
    grid = _section(cfg, "grid")
    for key in grid:
        if key != "K":
            raise ConfigError(f"grid.{key}", "unknown field")
    K = grid.get("K", 50)
    if not isinstance(K, int) or K < 1:
        raise ConfigError("grid.K", "must be a positive integer")
    solver = _section(cfg, "solver")
    known = set(SolverParams.__dataclass_fields__) - {"seed"}
    for key in solver:
        if key not in known:
            raise ConfigError(f"solver.{key}", "unknown field")
    try:
        SolverParams(seed=seed, **solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from exc
    tol = _section(cfg, "tolerances")
    for key in tol:
        if key not in DEFAULT_TOLERANCES:
            raise ConfigError(f"tolerances.{key}", "unknown tolerance")
    problem = _section(cfg, "problem")
    for key in problem:
        if key not in ("t", "x", "mu"):
            raise ConfigError(f"problem.{key}", "unknown field")
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": "), allow_nan=False)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _to_plain(obj):
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_plain(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        # strict JSON has no inf/nan
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, out: Path):
        from .model import model_from_config

        self.cfg = cfg
        self.out = out
        self.model = model_from_config(cfg["model"])
        self.seed = cfg["seed"]
        self.params = SolverParams(seed=self.seed, **_section(cfg, "solver"))
        self.K = _section(cfg, "grid").get("K", 50)
        self.tol = {**DEFAULT_TOLERANCES, **_section(cfg, "tolerances")}
        problem = _section(cfg, "problem")
        n = self.model.n
        self.t = float(problem.get("t", 0.0))
        if not 0.0 <= self.t <= self.model.T:
            raise ConfigError("problem.t", "must lie in [0, T]")
        try:
            xs = np.asarray(problem.get("x", [[0.0] * n]), dtype=float).reshape(-1, n)
            self.mu = ParticleMeasure(np.asarray(problem.get("mu", [[0.0] * n]), dtype=float)
                                      .reshape(-1, n))
        except (ValueError, TypeError) as exc:
            raise ConfigError("problem", f"bad x or mu: {exc}") from exc
        self.xs = xs
        self.summary: dict = {"task": cfg["task"], "model": self.model.name}
        self.timings: dict = {}

    def grid(self, t=None) -> TimeGrid:
        return TimeGrid(self.t if t is None else t, self.model.T, self.K)

    def timed(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    def _export(self) -> bool:
        return bool(_section(self.cfg, "export").get("csv", True))

    def _equilibrium(self):
        from .value import Equilibrium

        return self.timed("equilibrium", Equilibrium, self.model, self.t, self.mu, self.grid(),
                          self.params)

    # ---- individual tasks ----------------------------------------------
    def solve_mfg(self):
        sol, flow = self.timed("solve_mfg", solve_mfg, self.model, self.t, self.mu, self.grid(),
                               self.params)
        self.summary.update(_solution_summary(self.model, sol, flow))
        self.summary["mean_path"] = sol.Y.mean(axis=1)
        if self._export():
            sol.to_csv(self.out / "solution.csv")

    def solve_control(self):
        eq = self._equilibrium()
        rows = []
        for i, x in enumerate(self.xs):
            sol = self.timed("solve_control", eq.player, x)
            row = {"x": x, **_solution_summary(self.model, sol, eq.flow)}
            rows.append(row)
            if self._export():
                sol.to_csv(self.out / f"control_{i}.csv")
        self.summary["players"] = rows

    def value(self):
        from .value import value

        eq = self._equilibrium()
        self.summary["values"] = [{"x": x, "V": self.timed("value", value, self.model, self.t, x,
                                                            self.mu, equilibrium=eq)}
                                  for x in self.xs]

    def derivatives(self):
        from .value import value_report

        probes = self.cfg.get("probes")
        rows = []
        for i, x in enumerate(self.xs):
            rep = self.timed("derivatives", value_report, self.model, self.t, x, self.mu, probes,
                             self.grid(), self.params)
            rows.append({"x": x, **rep.as_dict()})
        self.summary["reports"] = rows
        if self._export():
            from .value import Equilibrium
            from .flows import solve_jacobian_x

            eq = Equilibrium(self.model, self.t, self.mu, self.grid(), self.params)
            solve_jacobian_x(self.model, eq.player(self.xs[0])).to_csv(self.out / "jacobian.csv")

    def check_master(self):
        from .value import dpp_check, master_residual

        checks = _section(self.cfg, "checks")
        points = checks.get("points")
        if points is None:
            rng = np.random.default_rng(self.seed)
            count = int(checks.get("count", 10))
            points = [[float(rng.uniform(0.0, 0.9 * self.model.T)),
                       rng.uniform(-2.0, 2.0, self.model.n).tolist()] for _ in range(count)]
        rows, ok = [], True
        for t, x in points:
            x = np.atleast_1d(np.asarray(x, dtype=float))
            res = self.timed("master", master_residual, self.model, float(t), x, self.mu,
                             self.params, self.K)
            bound = self.tol["master_abs"] * (1 + float(x @ x))
            passed = abs(res) <= bound
            ok &= passed
            rows.append({"t": t, "x": x, "residual": res, "bound": bound, "passes": passed})
        self.summary["master"] = rows
        eps = checks.get("dpp_eps", 0.1)
        eq = self._equilibrium()
        dpp = self.timed("dpp", dpp_check, self.model, self.t, self.xs[0], self.mu, eps,
                         equilibrium=eq)
        self.summary["dpp"] = {"eps": eps, "residual": dpp, "bound": self.tol["dpp_abs"],
                               "passes": dpp <= self.tol["dpp_abs"]}
        ok &= dpp <= self.tol["dpp_abs"]
        if not ok:
            raise CheckFailed("master-equation or DPP residual above tolerance")

    def check_assumptions(self):
        from .model import (check_convexity, check_derivative_consistency, check_monotonicity,
                            check_small_mf_effect)

        v = _section(self.cfg, "validators")
        samples = int(v.get("samples", 1000))
        box = float(v.get("box", 3.0))
        cloud = int(v.get("cloud_size", 16))
        rng = np.random.default_rng(self.seed)
        conv = self.timed("convexity", check_convexity, self.model, rng, samples, box, cloud,
                          self.tol["convexity"])
        mono = None
        if conv.passes:
            # the control map is only defined under strict convexity in v
            mono = self.timed("monotonicity", check_monotonicity, self.model, rng,
                              max(1, samples // 10), box, cloud, self.tol["monotonicity"])
        deriv = self.timed("derivatives", check_derivative_consistency, self.model, rng,
                           max(1, samples // 50), 1e-4, self.tol["derivative"], box, cloud)
        small = check_small_mf_effect(self.model.constants)
        self.summary["convexity"] = conv.as_dict()
        self.summary["monotonicity"] = mono.as_dict() if mono is not None else "skipped"
        self.summary["derivative_consistency"] = deriv.as_dict()
        self.summary["small_mean_field_effect"] = small
        failed = [name for name, rep in (("convexity", conv), ("monotonicity", mono),
                                         ("derivative_consistency", deriv))
                  if rep is not None and not rep.passes]
        if failed:
            raise CheckFailed(f"assumption checks failed: {', '.join(failed)}")

    def _lq(self):
        from .model import LQSpec

        if not isinstance(self.model, LQSpec):
            raise ConfigError("model.kind", "this task needs an LQ model")
        return self.model.lq

    def lq_oracle(self):
        from .lq import lq_oracle, lq_value_and_feedback

        lq = self._lq()
        orc = self.timed("oracle", lq_oracle, lq, self.t, self.mu, max(self.K, 400))
        rows = []
        for x in self.xs:
            V, D, v = lq_value_and_feedback(lq, self.t, x, self.mu)
            rows.append({"x": x, "V": V, "D_xV": D, "D_x2V": orc.V2[0], "v_hat": v})
        self.summary["oracle"] = rows
        if self._export():
            import csv

            with open(self.out / "oracle.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                n = lq.n
                w.writerow(["node", "s"] + [f"V2_{a}{b}" for a in range(n) for b in range(n)]
                           + [f"V1_{a}" for a in range(n)] + ["V0"])
                for k, s in enumerate(orc.grid.nodes):
                    w.writerow([k, repr(float(s))] + [repr(float(z)) for z in orc.V2[k].ravel()]
                               + [repr(float(z)) for z in orc.V1[k]] + [repr(float(orc.V0[k]))])

    def compare(self):
        from .lq import lq_value_and_feedback, lq_oracle
        from .value import grad_value, value

        lq = self._lq()
        eq = self._equilibrium()
        orc = lq_oracle(lq, self.t, self.mu)
        rows, ok = [], True
        floor = self.tol["compare_floor"]
        for x in self.xs:
            V_ref, D_ref, _ = lq_value_and_feedback(lq, self.t, x, self.mu)
            V = self.timed("value", value, self.model, self.t, x, self.mu, equilibrium=eq)
            D, D2 = self.timed("grad", grad_value, self.model, self.t, x, self.mu, equilibrium=eq)
            errs = {"V": abs(V - V_ref) / max(abs(V_ref), floor),
                    "D_xV": float(np.max(np.abs(D - D_ref)) / max(np.max(np.abs(D_ref)), floor)),
                    "D_x2V": float(np.max(np.abs(D2 - orc.V2[0]))
                                   / max(np.max(np.abs(orc.V2[0])), floor))}
            passed = all(e <= self.tol["compare_rel"] for e in errs.values())
            ok &= passed
            rows.append({"x": x, "V": V, "V_ref": V_ref, "D_xV": D, "D_xV_ref": D_ref,
                         "D_x2V": D2, "D_x2V_ref": orc.V2[0], "rel_err": errs, "passes": passed})
        self.summary["compare"] = rows
        if not ok:
            raise CheckFailed("solver differs from the LQ oracle beyond tolerance")


def _solution_summary(model, sol, flow) -> dict:
    from .hamiltonian import v_gradient

    worst = 0.0
    for k, s in enumerate(sol.grid.nodes):
        g = v_gradient(model, s, sol.Y[k], sol.F[k], sol.v[k], sol.p[k], sol.q[k])
        worst = max(worst, float(np.linalg.norm(g, axis=1).max()))
    return {"sweeps": sol.sweeps, "particles": sol.N, "steps": sol.grid.K,
            "p0_mean": sol.p[0].mean(axis=0), "optimality_residual": worst,
            "bsde_residual": bsde_residual(model, sol, flow),
            "flow_distance": sol.flow_distance}


_DISPATCH = {
    "solve-mfg": Run.solve_mfg, "solve-control": Run.solve_control, "value": Run.value,
    "derivatives": Run.derivatives, "check-master": Run.check_master,
    "check-assumptions": Run.check_assumptions, "lq-oracle": Run.lq_oracle,
    "compare": Run.compare,
}


def _write(out: Path, name: str, obj) -> None:
    (out / name).write_text(canonical_json(_to_plain(obj)) + "\n")


def run(cfg: dict, out) -> int:
    """Execute one validated config; returns the process exit code."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = validate(cfg)
        manifest = {"config_sha256": config_hash(cfg), "seed": cfg["seed"], "task": cfg["task"],
                    "schema_version": SCHEMA_VERSION, "version": __version__}
        _write(out, "manifest.json", manifest)
        runner = Run(cfg, out)
    except ConfigError as exc:
        _write(out, "summary.json", {"status": "config_error", "key": exc.key, "error": str(exc)})
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, status = EXIT_OK, "ok"
    try:
        _DISPATCH[cfg["task"]](runner)
    except ConfigError as exc:
        runner.summary.update({"key": exc.key, "error": str(exc)})
        code, status = EXIT_CONFIG, "config_error"
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
    except DivergenceError as exc:
        runner.summary.update({"error": str(exc), "kind": type(exc).__name__,
                               "trace": exc.trace[-20:]})
        code, status = EXIT_DIVERGED, "diverged"
        print(f"solver diverged: {exc}", file=sys.stderr)
    except CheckFailed as exc:
        runner.summary["error"] = str(exc)
        code, status = EXIT_CHECK, "check_failed"
        print(f"check failed: {exc}", file=sys.stderr)
    runner.summary["status"] = status
    _write(out, "summary.json", runner.summary)
    _write(out, "timings.json", runner.timings)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="degenmfg", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="YAML or JSON run configuration")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--task", choices=TASKS, help="override the config task")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out, "summary.json", {"status": "config_error", "key": exc.key, "error": str(exc)})
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.task is not None:
        cfg["task"] = args.task
    return run(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
