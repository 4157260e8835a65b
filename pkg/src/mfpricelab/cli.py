"""Batch front end: config parsing, experiment orchestration, artifacts.

Config files are flat UTF-8 INI-style sections ([grid], [informed],
[standard], [factor], [run]) with `key = value` lines.  Coefficients are
selected from the registered catalog by name, with parameters given as
dotted keys (`running_cost = constant`, `running_cost.value = 0.25`).
The [run] section may instead name a preset via `model = <name>`.  Command
line flags override config values.  Every run writes its artifacts plus a
manifest echoing the exact configuration and seed; the exit status reflects
the command's declared checks only.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, PriceLabError
from .models import (AFFINE, GENERAL_CONVEX, AgentSpec, MarketModel, ModelBounds,
                     PRESET_NAMES, SolverDefaults, make_coefficient, preset, validate)
from .sampling import InformedFactorSpec, sample_batch
from .tree import FULL_PREFIX, MARKOV, GridSpec

COMMANDS = ("validate", "solve", "refine", "clearing", "informed")

_RUN_KEYS = {
    "command", "model", "seed", "samples", "damping", "tol", "max_iter", "mode",
    "out_dir", "min_bucket", "levels", "n_values", "seeds", "n_scenarios",
    "N_S", "penalty_scaling", "probe_budget",
}
_GRID_KEYS = {"n", "l", "m", "T", "L"}
_FACTOR_KEYS = {"kind", "rho"}
_AGENT_KEYS = {"lambda", "weight", "cost_mode", "reads_factor",
               "drift", "vol_common", "vol_idio", "running_cost", "terminal_cost"}


@dataclass
class RunSpec:
    command: str
    model: MarketModel
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.run.get("samples", 1) < 1:
            raise ConfigError("samples must be >= 1")
        if not self.run.get("tol", 1.0) > 0:
            raise ConfigError("tol must be > 0")
        if not 0.0 < self.run.get("damping", 0.5) <= 1.0:
            raise ConfigError("damping must lie in (0, 1]")


def _parse_sections(path) -> dict:
    sections: dict[str, dict] = {}
    current = None
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file is not valid UTF-8: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        sections[current][key] = value
    return sections


def _as_bool(value: str, key: str) -> bool:
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def _check_keys(section: str, entries: dict, allowed: set, dotted_roots: set = frozenset()):
    for key in entries:
        base = key.split(".", 1)[0]
        if key in allowed or (base in dotted_roots and "." in key):
            continue
        raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _coefficient_from(entries: dict, slot_key: str, slot: str, default_name: str):
    name = entries.get(slot_key, default_name)
    params = {}
    prefix = slot_key + "."
    for key, value in entries.items():
        if key.startswith(prefix):
            params[key[len(prefix):]] = float(value)
    return make_coefficient(name, params, slot)


def _agent_from(section: str, entries: dict, population: str, grid_T: float) -> AgentSpec:
    _check_keys(section, entries, _AGENT_KEYS,
                dotted_roots={"drift", "vol_common", "vol_idio", "running_cost", "terminal_cost"})
    cost_mode = entries.get("cost_mode", AFFINE)
    if cost_mode not in (AFFINE, GENERAL_CONVEX):
        raise ConfigError(f"[{section}] cost_mode must be affine or general-convex")
    kwargs = dict(
        population=population,
        lam=float(entries.get("lambda", 1.0)),
        weight=float(entries.get("weight", 0.5)),
        drift=_coefficient_from(entries, "drift", "drift", "zero"),
        vol_common=_coefficient_from(entries, "vol_common", "vol_common", "zero"),
        vol_idio=_coefficient_from(entries, "vol_idio", "vol_idio", "zero"),
        cost_mode=cost_mode,
        reads_factor=_as_bool(entries.get("reads_factor", "false"), "reads_factor"),
    )
    if cost_mode == AFFINE:
        kwargs["running_cost"] = _coefficient_from(entries, "running_cost", "running_cost_affine", "zero")
        kwargs["terminal_cost"] = _coefficient_from(entries, "terminal_cost", "terminal_cost_affine", "zero")
    else:
        f, df = _coefficient_from(entries, "running_cost", "running_cost_convex", "tanh-state")
        g, dg = _coefficient_from(entries, "terminal_cost", "terminal_cost_convex", "tanh-state")
        kwargs.update(running_cost=f, running_cost_dx=df, terminal_cost=g, terminal_cost_dx=dg)
    try:
        return AgentSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}")


def parse_config(path, command: str = None) -> RunSpec:
    """Fully resolved RunSpec with defaults applied; unknown keys rejected."""
    sections = _parse_sections(path)
    known = {"grid", "informed", "standard", "factor", "run"}
    for name in sections:
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    run_raw = sections.get("run", {})
    _check_keys("run", run_raw, _RUN_KEYS)
    grid_raw = sections.get("grid", {})
    _check_keys("grid", grid_raw, _GRID_KEYS)
    factor_raw = sections.get("factor", {})
    _check_keys("factor", factor_raw, _FACTOR_KEYS)

    preset_name = run_raw.get("model")
    if preset_name:
        if preset_name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {preset_name!r} (known: {PRESET_NAMES})")
        model = preset(preset_name)
        if grid_raw:
            g = model.grid
            grid = GridSpec(n=int(grid_raw.get("n", g.n)), l=int(grid_raw.get("l", g.l)),
                            m=int(grid_raw.get("m", g.m)), T=float(grid_raw.get("T", g.T)))
            model = model.with_grid(grid)
            if "L" in grid_raw:
                model = replace(model, bounds=ModelBounds(L=float(grid_raw["L"]), T=grid.T))
    else:
        if "informed" not in sections or "standard" not in sections:
            raise ConfigError("config must name a preset or define [informed] and [standard]")
        try:
            grid = GridSpec(n=int(grid_raw.get("n", 2)), l=int(grid_raw.get("l", 1)),
                            m=int(grid_raw.get("m", 8)), T=float(grid_raw.get("T", 1.0)))
        except ValueError as exc:
            raise ConfigError(f"[grid] {exc}")
        factor = InformedFactorSpec(kind=factor_raw.get("kind", "correlated-bm"),
                                    rho=float(factor_raw.get("rho", 0.5)))
        try:
            model = MarketModel(
                name=Path(path).stem,
                informed=_agent_from("informed", sections["informed"], "I", grid.T),
                standard=_agent_from("standard", sections["standard"], "S", grid.T),
                grid=grid, factor=factor,
                bounds=ModelBounds(L=float(grid_raw.get("L", 1.0)), T=grid.T))
        except ValueError as exc:
            raise ConfigError(str(exc))

    run = {
        "seed": int(run_raw.get("seed", model.solver.seed)),
        "samples": int(run_raw.get("samples", model.solver.samples)),
        "damping": float(run_raw.get("damping", model.solver.damping)),
        "tol": float(run_raw.get("tol", model.solver.tol)),
        "max_iter": int(run_raw.get("max_iter", model.solver.max_iter)),
        "mode": run_raw.get("mode", model.solver.mode),
        "min_bucket": int(run_raw.get("min_bucket", model.solver.min_bucket)),
        "out_dir": run_raw.get("out_dir", "out"),
        "levels": [int(v) for v in run_raw.get("levels", "1,2,3").split(",")],
        "n_values": [int(v) for v in run_raw.get("n_values", "8,16,32,64,128,256,512").split(",")],
        "seeds": int(run_raw.get("seeds", 5)),
        "n_scenarios": int(run_raw.get("n_scenarios", 48)),
        "N_S": int(run_raw.get("N_S", 100)),
        "penalty_scaling": run_raw.get("penalty_scaling", "mean-field"),
        "probe_budget": int(run_raw.get("probe_budget", 2000)),
    }
    if run["mode"] not in (FULL_PREFIX, MARKOV):
        raise ConfigError(f"mode must be {FULL_PREFIX} or {MARKOV}")
    cmd = command or run_raw.get("command", "solve")
    return RunSpec(command=cmd, model=model, run=run)


def _echo_config(spec: RunSpec) -> dict:
    run = dict(spec.run)
    g = spec.model.grid
    return {
        "command": spec.command,
        "model": spec.model.name,
        "grid": {"n": g.n, "l": g.l, "m": g.m, "T": g.T, "L": spec.model.bounds.L},
        "run": run,
    }


def run(spec: RunSpec) -> tuple[int, dict]:
    """Execute the command; returns (exit status, manifest)."""
    out_dir = Path(spec.run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    checks = []
    artifacts = []
    model = spec.model
    opts = {k: spec.run[k] for k in ("damping", "tol", "max_iter", "mode", "min_bucket")}

    def emit(name: str, writer):
        path = out_dir / name
        writer(path)
        artifacts.append(name)

    if spec.command == "validate":
        lines = []
        for agent in model.agents():
            rep = validate(agent, model.bounds, probe_budget=spec.run["probe_budget"])
            lines.append(rep.summary())
            checks.append({"name": f"assumptions[{agent.population}]", "passed": rep.passed,
                           "detail": f"worst slack {max(c.worst for c in rep.checks):+.3e}"})
        emit("validation.txt", lambda p: p.write_text("\n".join(lines) + "\n", encoding="utf-8"))
    elif spec.command == "solve":
        from .equilibrium import solve_fixed_point
        from .price import price_to_csv
        batch = sample_batch(model.grid, spec.run["seed"], spec.run["samples"], model.factor)
        report = solve_fixed_point(batch, model, opts=opts)
        emit("equilibrium.csv", lambda p: price_to_csv(p, report.price))
        emit("report.txt", lambda p: p.write_text(
            report.summary(bounds=model.bounds) + "\n", encoding="utf-8"))
        C_B = model.bounds.C_B
        sup_ok = (max(report.iterate_sup_price) <= C_B
                  and all(max(d.values()) <= C_B for d in report.iterate_sup_Y))
        checks.append({"name": "converged", "passed": bool(report.converged),
                       "detail": f"residual {report.residual_trace[-1]:.3e} <= tol {report.tol:g}"})
        checks.append({"name": "boundedness C_B", "passed": bool(sup_ok),
                       "detail": f"C_B = {C_B:g}"})
    elif spec.command == "refine":
        from .equilibrium import refinement_study
        levels = spec.run["levels"]
        rows_all = []
        ok_seeds = 0
        for k in range(spec.run["seeds"]):
            batch = sample_batch(model.grid, spec.run["seed"] + k, spec.run["samples"], model.factor)
            table = refinement_study(model, levels, batch,
                                     opts={"damping": spec.run["damping"], "tol": spec.run["tol"],
                                           "max_iter": spec.run["max_iter"]})
            med = table.medians()
            ok_seeds += int(all(b < a for a, b in zip(med[:-1], med[1:])))
            for row in table.rows:
                rows_all.append((spec.run["seed"] + k, row.pair[0], row.pair[1],
                                 row.median_dm, row.mean_dm))

        def write_refine(p):
            with open(p, "w", encoding="utf-8") as fh:
                fh.write("seed,level_a,level_b,median_dm,mean_dm\n")
                for r in rows_all:
                    fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]:.17g},{r[4]:.17g}\n")

        emit("refinement.csv", write_refine)
        need = max(1, int(0.8 * spec.run["seeds"]))
        checks.append({"name": "median d_M decreasing", "passed": ok_seeds >= need,
                       "detail": f"{ok_seeds}/{spec.run['seeds']} seeds decreasing (need {need})"})
    elif spec.command == "clearing":
        from .equilibrium import solve_fixed_point
        from .market import clearing_report_csv, rate_study
        if len(spec.run["n_values"]) < 4:
            raise ConfigError("clearing needs >= 4 market sizes for a slope")
        batch = sample_batch(model.grid, spec.run["seed"], spec.run["samples"], model.factor)
        eq = solve_fixed_point(batch, model, opts=opts)
        seeds = [spec.run["seed"] + 1000 + k for k in range(spec.run["seeds"])]
        report = rate_study(eq.price, model, spec.run["n_values"], seeds,
                            n_scenarios=spec.run["n_scenarios"])
        emit("clearing.csv", lambda p: clearing_report_csv(p, report))
        emit("report.txt", lambda p: p.write_text(report.summary() + "\n", encoding="utf-8"))
        checks.append({"name": "residual under 8*T*C_B^2*sum(1/L^2)/N", "passed": bool(report.bound_ok.all()),
                       "detail": f"{int(report.bound_ok.sum())}/{len(report.N_values)} sizes"})
        if report.exact_clearing:
            checks.append({"name": "clearing rate", "passed": True, "detail": "exact clearing"})
        else:
            ok = -1.25 <= report.slope <= -0.75
            checks.append({"name": "clearing rate", "passed": bool(ok),
                           "detail": f"slope {report.slope:.3f}"})
    elif spec.command == "informed":
        from .market import InformedScenario, informed_check_csv, informed_inference_check
        scenario = InformedScenario(N_S=spec.run["N_S"], rho=model.factor.rho,
                                    penalty_scaling=spec.run["penalty_scaling"])
        batch = sample_batch(model.grid, spec.run["seed"], spec.run["samples"], model.factor)
        result = informed_inference_check(scenario, model, batch, opts=opts)
        emit("informed.csv", lambda p: informed_check_csv(p, result))
        emit("report.txt", lambda p: p.write_text(result.summary() + "\n", encoding="utf-8"))
        checks.append({"name": "inference identity within 3 bucket SE", "passed": bool(result.passed),
                       "detail": f"max gap {result.max_gap:.3e}"})
    else:  # pragma: no cover - guarded by RunSpec
        raise ConfigError(f"unknown command {spec.command!r}")

    status = 0 if all(c["passed"] for c in checks) else 1
    manifest = {
        "command": spec.command,
        "status": status,
        "seed": spec.run["seed"],
        "checks": checks,
        "artifacts": sorted(artifacts),
        "config": _echo_config(spec),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return status, manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfpricelab",
                                     description="equilibrium price formation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=str, default=None)
        p.add_argument("--mode", type=str, choices=(FULL_PREFIX, MARKOV), default=None)
        p.add_argument("--damping", type=float, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--max-iter", type=int, default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--model", type=str, default=None,
                       help="preset name when no config file is given")
    args = parser.parse_args(argv)
    try:
        if args.config:
            spec = parse_config(args.config, command=args.command)
        else:
            name = args.model or "zero"
            if name not in PRESET_NAMES:
                raise ConfigError(f"unknown preset {name!r}")
            model = preset(name)
            spec = RunSpec(command=args.command, model=model, run={
                "seed": model.solver.seed, "samples": model.solver.samples,
                "damping": model.solver.damping, "tol": model.solver.tol,
                "max_iter": model.solver.max_iter, "mode": model.solver.mode,
                "min_bucket": model.solver.min_bucket, "out_dir": "out",
                "levels": [1, 2], "n_values": [8, 16, 32, 64], "seeds": 3,
                "n_scenarios": 32, "N_S": 100, "penalty_scaling": "mean-field",
                "probe_budget": 2000,
            })
        overrides = {"seed": args.seed, "out_dir": args.out_dir, "mode": args.mode,
                     "damping": args.damping, "tol": args.tol,
                     "max_iter": args.max_iter, "samples": args.samples}
        for key, val in overrides.items():
            if val is not None:
                spec.run[key] = val
        spec = RunSpec(command=spec.command, model=spec.model, run=spec.run)
        status, manifest = run(spec)
        for check in manifest["checks"]:
            mark = "PASS" if check["passed"] else "FAIL"
            print(f"[{mark}] {check['name']}: {check['detail']}")
        return status
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except PriceLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
