"""Command-line entry point ``klq``.

Exit codes: 0 success, 1 domain error (invalid model, solver failure,
non-convergence under --strict, unwritable output), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import primal_value, tracking_error
from .dual import KlqProblem, SolverOptions, solve
from .fleet import coupling_experiment, init_fleet, mpc_run, simulate_fleet
from .io import (
    ConfigError,
    atomic_write_text,
    config_hash,
    load_json,
    load_model,
    read_series,
    save_model,
    write_csv,
)
from .mdp import KlqError, output_means, stationary_marginal, total_variation, validate_model
from .relaxation import parse_basis
from .tcl import (
    TclParams,
    build_tcl_model,
    coupling_initial_marginals,
    nominal_headroom,
    nominal_power,
    sinusoid_reference,
)

log = logging.getLogger("klq")

SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverOptions)}


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Run:
    cfg: dict
    model: object
    tcl: TclParams | None
    reference: np.ndarray  # absolute reference handed to the solver
    baseline: np.ndarray  # nominal power the deviations are measured from
    kappa: float
    basis: object
    opts: SolverOptions
    seed: int
    out_dir: Path

    def problem(self, model=None) -> KlqProblem:
        return KlqProblem(model or self.model, self.reference, self.kappa, self.basis)


def _merge_flags(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy
    solver = cfg.setdefault("solver", {})
    for flag, key in (("max_iters", "max_iters"), ("grad_tol", "grad_tol"), ("direction", "direction")):
        v = getattr(args, flag, None)
        if v is not None:
            solver[key] = v
    for flag in ("kappa", "basis", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[flag] = v
    if getattr(args, "out_dir", None) is not None:
        cfg["out_dir"] = args.out_dir
    if getattr(args, "agents", None) is not None:
        for section in ("simulate", "mpc"):
            cfg.setdefault(section, {})["agents"] = args.agents
    return cfg


def _load_model(cfg: dict, base: Path):
    sources = [k for k in ("tcl", "model_file") if k in cfg]
    if len(sources) != 1:
        raise ConfigError("config needs exactly one model source: 'tcl' or 'model_file'")
    if "tcl" in cfg:
        try:
            params = TclParams(**cfg["tcl"])
        except TypeError as exc:
            raise ConfigError(f"bad 'tcl' section: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"bad 'tcl' section: {exc}") from None
        return build_tcl_model(params), params
    return load_model(base / cfg["model_file"]), None


def _reference(cfg: dict, model, tcl, base: Path) -> np.ndarray:
    spec = cfg.get("reference")
    K = model.horizon
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError("config needs exactly one reference spec: constant, sinusoid or file")
    (kind, val), = spec.items()
    if kind == "constant":
        r = np.full(K, float(val))
    elif kind == "sinusoid":
        if not isinstance(val, dict) or "period" not in val:
            raise ConfigError("sinusoid reference needs 'period' and 'amplitude' or 'headroom_fraction'")
        if "headroom_fraction" in val:
            if tcl is None:
                raise ConfigError("headroom_fraction is only defined for tcl models")
            amp = float(val["headroom_fraction"]) * nominal_headroom(model)
        elif "amplitude" in val:
            amp = float(val["amplitude"])
        else:
            raise ConfigError("sinusoid reference needs 'amplitude' or 'headroom_fraction'")
        r = sinusoid_reference(K, amp, float(val["period"]), float(val.get("phase", 0.0)))
    elif kind == "file":
        r = read_series(base / val)
    else:
        raise ConfigError(f"unknown reference kind {kind!r}")
    if r.shape != (K,):
        raise ConfigError(f"reference has {r.size} values, horizon is {K}")
    return r


def resolve(cfg: dict, base: Path, *, need_problem: bool = True) -> Run:
    model, tcl = _load_model(cfg, base)
    solver = cfg.get("solver", {})
    unknown = set(solver) - SOLVER_KEYS
    if unknown:
        raise ConfigError(f"unknown solver option(s): {', '.join(sorted(unknown))}")
    opts = SolverOptions(**solver)
    if opts.direction not in ("gradient", "cg", "lbfgs"):
        raise ConfigError(f"unknown direction {opts.direction!r}")
    seed = int(cfg.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    out_dir = Path(cfg.get("out_dir", "out"))
    if not need_problem:
        return Run(cfg, model, tcl, None, None, 0.0, None, opts, seed, out_dir)
    report = validate_model(model)
    if not report.ok:
        raise KlqError("invalid model:\n  " + "\n  ".join(report.violations))
    kappa = cfg.get("kappa")
    if kappa is None or not float(kappa) > 0:
        raise ConfigError("kappa must be given and positive")
    try:
        basis = parse_basis(cfg.get("basis", "degenerate"), model.horizon)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    r = _reference(cfg, model, tcl, base)
    if tcl is not None:
        # deviation request: positive r lowers power below the common baseline
        baseline = np.full(model.horizon, float(np.sum(stationary_marginal(model) * model.output)))
        if cfg.get("baseline", "stationary") == "nominal":
            baseline = nominal_power(model)
        reference = baseline - r
    else:
        baseline = nominal_power(model)
        reference = r
    return Run(cfg, model, tcl, reference, baseline, float(kappa), basis, opts, seed, out_dir)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


class Emitter:
    def __init__(self, run: Run, command: str):
        self.run = run
        self.command = command
        self.files: list[str] = []
        run.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.run.out_dir / name

    def csv(self, name, header, rows):
        write_csv(self.path(name), header, rows)

    def json(self, name, doc):
        atomic_write_text(self.path(name), json.dumps(doc, indent=1) + "\n")

    def tracking(self, achieved):
        r = self.run.reference
        self.csv("tracking.csv", ["k", "r", "achieved", "error"], ((k + 1, r[k], achieved[k], achieved[k] - r[k]) for k in range(len(r))))

    def marginals(self, marginals, prefix="marginals"):
        K = marginals.shape[0] - 1
        snaps = self.run.cfg.get("snapshots", [0, K // 2, K])
        for k in snaps:
            if not 0 <= int(k) <= K:
                raise ConfigError(f"snapshot time {k} outside 0..{K}")
            nu = marginals[int(k)]
            rows = ((s, u, nu[s, u]) for s in range(nu.shape[0]) for u in range(nu.shape[1]))
            self.csv(f"{prefix}_k{int(k)}.csv", ["state", "input", "probability"], rows)

    def manifest(self, extra: dict):
        run = self.run
        doc = {
            "artifact_version": __version__,
            "command": self.command,
            "seed": run.seed,
            "config_hash": config_hash(run.cfg),
            "config": run.cfg,
            "solver": dataclasses.asdict(run.opts),
            "tcl": dataclasses.asdict(run.tcl) if run.tcl else None,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "files": sorted(set(self.files)),
        }
        doc.update(extra)
        atomic_write_text(run.out_dir / "manifest.json", json.dumps(doc, indent=1) + "\n")


def solution_document(sol) -> dict:
    problem = sol.problem
    pv = primal_value(problem, sol.lam)
    te = tracking_error(sol, problem.reference)
    return {
        "lambda": sol.lam.tolist(),
        "gamma": sol.gamma.tolist(),
        "dual_value": sol.dual_value,
        "primal_value": sol.primal_value,
        "relative_entropy": sol.relative_entropy,
        "gap": sol.duality_gap,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "message": sol.message,
        "output_means": sol.output_trajectory.tolist(),
        "policies": {str(k): sol.policies[k].tolist() for k in range(1, problem.model.horizon + 1)},
        "diagnostics": {
            "relative_entropy": pv.relative_entropy,
            "primal_full": pv.full,
            "primal_relaxed": pv.relaxed,
            "gap": sol.duality_gap,
            "rms_tracking_error": te.rms,
        },
    }


def _summary(sol, rms):
    return f"dual={sol.dual_value:.10g} rms={rms:.6g} iterations={sol.iterations} converged={sol.converged}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(run: Run, args) -> int:
    report = validate_model(run.model)
    if args.export_model:
        save_model(run.model, args.export_model)
    if report.ok:
        print("ok")
        return 0
    for v in report.violations:
        print(v)
    return 1


def _solve(run: Run, args):
    sol = solve(run.problem(), run.opts)
    if not sol.converged:
        log.warning("solver did not converge: %s", sol.message)
    return sol


def _strict_code(args, sol) -> int:
    return 1 if args.strict and not sol.converged else 0


def cmd_solve(run: Run, args) -> int:
    sol = _solve(run, args)
    out = Emitter(run, "solve")
    out.json("solution.json", solution_document(sol))
    out.tracking(sol.output_trajectory)
    out.marginals(sol.marginals)
    out.manifest({"converged": sol.converged, "iterations": sol.iterations})
    print(_summary(sol, tracking_error(sol, run.reference).rms))
    return _strict_code(args, sol)


def cmd_simulate(run: Run, args) -> int:
    sol = _solve(run, args)
    n = int(run.cfg.get("simulate", {}).get("agents", 10000))
    fleet = simulate_fleet(run.model, sol.policies, n, run.seed, record_paths=False)
    power = output_means(run.model, fleet.marginals)[1:]
    out = Emitter(run, "simulate")
    out.json("solution.json", solution_document(sol))
    out.tracking(power)
    out.marginals(fleet.marginals, prefix="marginals")
    rows = []
    for k in range(1, run.model.horizon + 1):
        tv = total_variation(fleet.marginals[k], sol.marginals[k])
        rows.append((k, run.reference[k - 1], power[k - 1], run.baseline[k - 1] - power[k - 1], tv))
    out.csv("trace.csv", ["k", "r_k", "mean_power", "deviation", "tv_max"], rows)
    out.manifest({"agents": n, "converged": sol.converged})
    print(_summary(sol, tracking_error(power, run.reference).rms))
    return _strict_code(args, sol)


def cmd_coupling(run: Run, args) -> int:
    section = run.cfg.get("coupling", {})
    kappas = [float(k) for k in section.get("kappas", [run.kappa])]
    threshold = float(section.get("threshold", 0.05))
    if run.tcl is not None and "initial_marginals" not in section:
        count = int(section.get("count", 6))
        inits = coupling_initial_marginals(run.tcl, count)
        init_desc = f"{count} point masses at evenly spaced interior deadband temperatures, modes alternating off/on"
    elif "initial_marginals" in section:
        inits = [np.array(nu, dtype=float) for nu in section["initial_marginals"]]
        init_desc = "from config"
    else:
        raise ConfigError("coupling needs 'coupling.initial_marginals' for non-tcl models")
    res = coupling_experiment(run.problem(), inits, kappas, opts=run.opts, threshold=threshold, baseline=run.baseline)
    out = Emitter(run, "coupling")
    pair_cols = [f"tv_{a}_{b}" for a, b in res.pairs]
    rows, prows = [], []
    for cr in res.runs:
        for k in range(cr.tv_max.size):
            rows.append((cr.kappa, k, cr.tv_max[k], *cr.pair_tv[k]))
        for k in range(cr.power.shape[1]):
            prows.append((cr.kappa, k + 1, run.reference[k], *cr.deviation[:, k]))
    out.csv("coupling.csv", ["kappa", "k", "tv_max"] + pair_cols, rows)
    out.csv("coupling_power.csv", ["kappa", "k", "r_k"] + [f"dev_{i}" for i in range(len(inits))], prows)
    converged = all(s.converged for cr in res.runs for s in cr.solutions)
    crossings = {repr(cr.kappa): cr.first_below for cr in res.runs}
    out.manifest({"initial_marginals": init_desc, "threshold": threshold, "first_below": crossings, "converged": converged})
    print(f"coupling: first k with max TV <= {threshold:g}: {crossings}; converged={converged}")
    return 1 if args.strict and not converged else 0


def cmd_mpc(run: Run, args) -> int:
    section = run.cfg.get("mpc", {})
    K = run.model.horizon
    window = int(section.get("window", K))
    step = int(section.get("step", window))
    agents = section.get("agents", 10000)
    if not 1 <= step <= window <= K:
        raise ConfigError(f"need 1 <= step <= window <= K, got step={step}, window={window}")
    fleet = None if agents in (None, 0) else init_fleet(run.model, int(agents), run.seed)
    problem = run.problem()
    tr = mpc_run(problem, window, step, fleet, opts=run.opts)
    out = Emitter(run, "mpc")
    out.tracking(tr.achieved)
    rows = [(k + 1, tr.reference[k], tr.achieved[k], run.baseline[k] - tr.achieved[k], tr.tv_to_plan[k]) for k in range(K)]
    out.csv("trace.csv", ["k", "r_k", "mean_power", "deviation", "tv_max"], rows)
    wrows = [(w.start, w.length, int(w.converged), w.iterations, w.solve_seconds, w.message) for w in tr.windows]
    out.csv("windows.csv", ["start", "length", "converged", "iterations", "solve_seconds", "message"], wrows)
    ok = all(w.converged for w in tr.windows)
    out.manifest({"window": window, "step": step, "agents": agents, "all_windows_converged": ok})
    print(f"mpc: rms={tr.rms:.6g} windows={len(tr.windows)} all_converged={ok}")
    return 1 if args.strict and not ok else 0


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "simulate": cmd_simulate, "coupling": cmd_coupling, "mpc": cmd_mpc}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="klq", description="KL-quadratic control solver and demand-dispatch experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "validate":
            p.add_argument("--export-model", metavar="PATH", help="write the resolved model document")
            continue
        p.add_argument("--out-dir")
        p.add_argument("--kappa", type=float)
        p.add_argument("--basis", help="'degenerate' or 'fourier:N[:omega]'")
        p.add_argument("--max-iters", type=int)
        p.add_argument("--grad-tol", type=float)
        p.add_argument("--direction", choices=["gradient", "cg", "lbfgs"])
        p.add_argument("--seed", type=int)
        p.add_argument("--strict", action="store_true", help="exit 1 when the solver does not converge")
        if name in ("simulate", "mpc"):
            p.add_argument("--agents", type=int)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t = time.perf_counter()
    try:
        cfg_path = Path(args.config)
        cfg = _merge_flags(load_json(cfg_path), args)
        r = resolve(cfg, cfg_path.parent, need_problem=args.command != "validate")
        code = COMMANDS[args.command](r, args)
    except ConfigError as exc:
        print(f"klq: config error: {exc}", file=sys.stderr)
        return 2
    except (KlqError, ValueError) as exc:
        print(f"klq: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"klq: cannot write output: {exc}", file=sys.stderr)
        return 1
    log.debug("done in %.2fs", time.perf_counter() - t)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
