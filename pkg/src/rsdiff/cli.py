"""Command-line entry point.

Exit codes: 0 when every condition and tolerance holds, 2 when a
well-formed run finds a condition violated, 1 on operational errors.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conditions import IntegrabilityWeights, check_conditions
from .errors import RSDiffError
from .families import (
    _parse_z,
    _state_list,
    default_reference,
    example_model,
    load_model,
    model_hash,
    with_z,
    ZField,
)
from .fp_oracle import Grid1D, bin_masses, compare_mc_vs_oracle, solve_stationary
from .girsanov import mean_weight, weighted_expectation
from .invariant import (
    DensityEstimate,
    convergence_diagnostic,
    density_vs_reference,
    l1_to_reference,
    occupation_measure,
    positivity_diagnostic,
    reference_bin_masses,
    relative_entropy,
)
from .io import (
    compare_density_tables,
    fmt,
    grid_from_spec,
    read_json,
    read_path_csv,
    write_density_csv,
    write_json,
    write_path_csv,
)
from .jumps import write_jump_log
from .simulator import SimConfig, ensemble_summary, simulate_batch, transience_diagnostic

log = logging.getLogger("rsdiff")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2
L1_TOL = 0.05

OBSERVABLES = {
    "state0_xpos": lambda x, k: float(k == 0 and x[0] > 0),
    "state0": lambda x, k: float(k == 0),
    "x": lambda x, k: float(x[0]),
    "x2": lambda x, k: float(x @ x),
}


@dataclass
class RunManifest:
    model_hash: str
    seed: int
    tool_version: str
    command_line: list
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)

    def write(self, out_dir):
        self.finished = _now()
        write_json(Path(out_dir) / "manifest.json", asdict(self))


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _x0(text, dim):
    if text is None:
        return np.zeros(dim)
    vals = np.array([float(v) for v in str(text).split(",")])
    return np.broadcast_to(vals, (dim,)).copy()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_check(model, weights=None, method="quadrature", variant="log", sigma_inv=False):
    w = None if weights is None else IntegrabilityWeights(weights)
    return check_conditions(model, weights=w, method=method, variant=variant, sigma_inv=sigma_inv)


def stage_simulate(model, cfg, x0, k0, threads, out, stride_out=1, jump_log=False):
    paths = simulate_batch(model, x0, k0, cfg, threads=threads)
    files = []
    meta = []
    for i, p in enumerate(paths):
        name = f"path_{i:04d}.csv"
        write_path_csv(out / name, p, every=stride_out)
        files.append(name)
        if jump_log:
            jname = f"jumps_{i:04d}.csv"
            write_jump_log(out / jname, p.jumps)
            files.append(jname)
        meta.append({"file": name, "exploded_at": p.exploded_at, "n_jumps": len(p.accepted_jumps)})
    summary = ensemble_summary(paths)
    summary["config"] = asdict(cfg)
    summary["paths"] = meta
    write_json(out / "simulation.json", summary)
    files.append("simulation.json")
    return paths, summary, files


def stage_estimate(model, paths, grid, burn_in, out, ref=None, box=(-2.0, 2.0), windows=10):
    ref = ref or default_reference(model)
    em = occupation_measure(paths, burn_in, grid, model.n_states)
    de = density_vs_reference(em, ref)
    write_density_csv(out / "density.csv", de)
    total_l1, per_state_l1 = l1_to_reference(de)
    entropy = {
        "relative_entropy": relative_entropy(de),
        "relative_entropy_renormalized": relative_entropy(de, renormalize=True),
    }
    write_json(out / "entropy.json", entropy)
    live = [p for p in paths if not p.exploded]
    diag = {
        "state_fractions": em.state_fractions,
        "reference_pi": ref.pi,
        "out_of_box_fraction": em.out_of_box_fraction,
        "n_exploded_excluded": em.n_exploded_excluded,
        "l1_to_reference": total_l1,
        "l1_to_reference_per_state": per_state_l1,
    }
    if grid.dim == 1:
        lo = max(box[0], grid.edges[0][0])
        hi = min(box[1], grid.edges[0][-1])
        diag["positivity"] = positivity_diagnostic(de, lo, hi).to_dict()
        diag["positivity"]["box"] = [lo, hi]
    if live:
        dists, trend = convergence_diagnostic(live[0], windows, grid, model.n_states, burn_in)
        diag["convergence"] = {"distances": dists, "trend": trend}
    if em.n_exploded_excluded:
        diag["warning"] = "exploded paths excluded; rerun with a smaller dt to rule out a discretisation artefact"
    write_json(out / "diagnostics.json", diag)
    return de, entropy, diag, ["density.csv", "entropy.json", "diagnostics.json"]


def stage_oracle(model, grid, n, x_min, x_max, out, ref=None):
    ref = ref or default_reference(model)
    sol = solve_stationary(model, Grid1D(x_min, x_max, n))
    mass = bin_masses(sol, grid.edges[0])
    ref_mass = reference_bin_masses(ref, grid)
    excluded = ref_mass < 1e-30
    rho = np.where(excluded, 0.0, mass / np.where(excluded, 1.0, ref_mass))
    de = DensityEstimate(grid, rho, mass, ref_mass, excluded, note="finite-difference stationary solution")
    write_density_csv(out / "oracle_density.csv", de)
    with open(out / "oracle_nodes.csv", "w", encoding="utf-8") as fh:
        fh.write("x," + ",".join(f"h_{k}" for k in range(sol.n_states)) + "\n")
        for i, x in enumerate(sol.grid.nodes):
            fh.write(fmt(x) + "," + ",".join(fmt(v) for v in sol.h_hat[:, i]) + "\n")
    info = {"residual_norm": sol.residual_norm, "singular_values": list(sol.singular_values),
            "state_masses": sol.state_masses, "min_value": float(sol.h_hat.min()), "n": n,
            "x_min": x_min, "x_max": x_max}
    write_json(out / "oracle.json", info)
    return sol, info, ["oracle_density.csv", "oracle_nodes.csv", "oracle.json"]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_check(args):
    model = load_model(args.model)
    weights = None if args.weights is None else [float(v) for v in args.weights.split(",")]
    passed, report = stage_check(model, weights, args.method, args.bound_variant, args.sigma_inv == "on")
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    print(text)
    if args.out:
        write_json(_out_dir(args) / "check.json", report)
    return EXIT_OK if passed else EXIT_VIOLATED


def _jsonable(obj):
    from .io import to_jsonable

    return to_jsonable(obj)


def _sim_config(args, seed):
    return SimConfig(dt=args.dt, t_end=args.t_end, burn_in=getattr(args, "burn_in", 0.0), seed=seed,
                     n_paths=args.paths, scheme=args.scheme, record_stride=args.stride,
                     explosion_radius=args.radius)


def cmd_simulate(args):
    model = load_model(args.model)
    out = _out_dir(args)
    cfg = _sim_config(args, args.seed)
    _, summary, _ = stage_simulate(model, cfg, _x0(args.x0, model.dim), args.k0, args.threads, out,
                                   jump_log=args.jump_log)
    print(json.dumps(_jsonable({k: v for k, v in summary.items() if k != "paths"}), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_estimate(args):
    model = load_model(args.model)
    src = Path(args.input)
    meta = read_json(src / "simulation.json")
    paths = [read_path_csv(src / m["file"], m.get("exploded_at")) for m in meta["paths"]]
    out = _out_dir(args)
    grid = grid_from_spec(args.grid, model.potential)
    _, entropy, diag, _ = stage_estimate(model, paths, grid, args.burn_in, out)
    print(json.dumps(_jsonable({**entropy, **diag}), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args):
    model = load_model(args.model)
    out = _out_dir(args)
    grid = grid_from_spec(args.grid, model.potential)
    _, info, _ = stage_oracle(model, grid, args.n, args.xmin, args.xmax, out)
    print(json.dumps(_jsonable(info), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args):
    total, per_state = compare_density_tables(args.estimate, args.oracle)
    result = {"l1_distance": total, "per_state_l1": per_state, "tolerance": args.tol, "passed": total < args.tol}
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    if args.out:
        write_json(_out_dir(args) / "compare.json", result)
    return EXIT_OK if total < args.tol else EXIT_VIOLATED


def _perturbation(text, model):
    p = Path(text)
    spec = read_json(p) if p.exists() else json.loads(text)
    entries = [_parse_z(e, model.dim) for e in _state_list(spec, model.n_states, "perturbation")]
    return ZField(tuple(e[0] for e in entries), np.array([e[1] for e in entries]), np.array([e[2] for e in entries]))


def cmd_reweight(args):
    model = load_model(args.model)
    zf = _perturbation(args.perturbation, model)
    if args.observable not in OBSERVABLES:
        raise RSDiffError(f"unknown observable {args.observable!r}; choose from {sorted(OBSERVABLES)}")
    f = OBSERVABLES[args.observable]
    reference = with_z(model, "affine", 0.0)
    cfg = SimConfig(dt=args.dt, t_end=args.t, seed=args.seed, n_paths=args.paths)
    x0 = _x0(args.x0, model.dim)
    paths = simulate_batch(reference, x0, args.k0, cfg, threads=args.threads, weight_z=zf)
    est = weighted_expectation(f, paths, args.t)
    mw, mw_se = mean_weight(paths, args.t)
    result = {**est.to_dict(), "mean_weight_se": mw_se, "observable": args.observable, "t": args.t}
    if args.direct:
        target = with_z(model, zf.kind, zf.matrix, zf.offset)
        direct = simulate_batch(target, x0, args.k0, SimConfig(dt=args.dt, t_end=args.t, seed=args.seed + 1,
                                                                n_paths=args.paths), threads=args.threads)
        d = weighted_expectation(f, direct, args.t)
        result["direct"] = {"estimate": d.estimate, "se": d.se}
        result["z_score"] = (est.estimate - d.estimate) / math.hypot(est.se, d.se)
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    if args.out:
        write_json(_out_dir(args) / "reweight.json", result)
    return EXIT_OK


def run_example(a, b, theta, delta, t_end, dt, seed, out, threads=1, n=401, x_range=8.0, plot_every=1000):
    """Check, simulate, estimate, solve and compare for the two-state example; returns ``(exit, summary)``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = example_model(a, b, theta, delta)
    ref = default_reference(model)
    passed, report = stage_check(model)
    write_json(out / "check.json", report)
    cfg = SimConfig(dt=dt, t_end=t_end, seed=seed)
    paths = simulate_batch(model, np.zeros(1), 0, cfg, threads=threads)
    write_path_csv(out / "trajectory.csv", paths[0], every=plot_every)
    summary = {"conditions_passed": passed, "entropy_bound": report["entropy_bound"],
               "example_region": report.get("example_region"), "simulation": ensemble_summary(paths)}
    grid = grid_from_spec(None, model.potential)
    try:
        de, entropy, diag, _ = stage_estimate(model, paths, grid, 0.0, out, ref)
        sol, info, _ = stage_oracle(model, grid, n, -x_range, x_range, out, ref)
        l1, per_state = compare_mc_vs_oracle(de, sol)
        summary.update(relative_entropy=entropy["relative_entropy"], positivity=diag["positivity"],
                       oracle=info, mc_vs_oracle={"l1": l1, "per_state": per_state, "tolerance": L1_TOL})
        bound = report["entropy_bound"]
        summary["entropy_within_bound"] = bound is not None and entropy["relative_entropy"] <= bound
    except RSDiffError as exc:
        summary["estimate_error"] = f"{type(exc).__name__}: {exc}"
        l1 = math.inf
    if math.sqrt(2.0) * delta - 1.0 >= 0:
        summary["transience"] = transience_diagnostic(model, 1, seed=seed, threads=threads)
    write_json(out / "summary.json", summary)
    ok = passed and l1 < L1_TOL
    return (EXIT_OK if ok else EXIT_VIOLATED), summary


def cmd_example(args):
    manifest = RunManifest(model_hash=model_hash(example_model(args.a, args.b, args.theta, args.delta)),
                           seed=args.seed, tool_version=__version__, command_line=sys.argv, started=_now())
    code, summary = run_example(args.a, args.b, args.theta, args.delta, args.t_end, args.dt, args.seed,
                                _out_dir(args), args.threads, args.n)
    manifest.outputs = sorted(p.name for p in Path(args.out).iterdir() if p.name != "manifest.json")
    manifest.write(args.out)
    print(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return code


PIPELINE_DEFAULTS = {
    "dt": 1e-3, "t_end": 1000.0, "n_paths": 2, "burn_in": 10.0, "x0": None, "k0": 0, "stride": 10,
    "grid": None, "xmin": -8.0, "xmax": 8.0, "n": 401, "tol": L1_TOL, "radius": 1e6,
}


def run_pipeline(model_path, out, seed, threads=1, config=None):
    cfg = {**PIPELINE_DEFAULTS, **(config or {})}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(model_path)
    manifest = RunManifest(model_hash=model_hash(model), seed=seed, tool_version=__version__,
                           command_line=list(sys.argv), started=_now())
    files = []
    try:
        passed, report = stage_check(model)
        write_json(out / "check.json", report)
        files.append("check.json")
        sim_cfg = SimConfig(dt=cfg["dt"], t_end=cfg["t_end"], burn_in=cfg["burn_in"], seed=seed,
                            n_paths=cfg["n_paths"], record_stride=cfg["stride"], explosion_radius=cfg["radius"])
        paths, _, f = stage_simulate(model, sim_cfg, _x0(cfg["x0"], model.dim), cfg["k0"], threads, out)
        files += f
        grid = grid_from_spec(cfg["grid"], model.potential)
        de, entropy, diag, f = stage_estimate(model, paths, grid, cfg["burn_in"], out)
        files += f
        result = {"conditions_passed": passed, "relative_entropy": entropy["relative_entropy"],
                  "entropy_bound": report["entropy_bound"]}
        ok = passed
        if model.dim == 1:
            sol, _, f = stage_oracle(model, grid, cfg["n"], cfg["xmin"], cfg["xmax"], out)
            files += f
            l1, per_state = compare_mc_vs_oracle(de, sol)
            result["mc_vs_oracle"] = {"l1": l1, "per_state": per_state, "tolerance": cfg["tol"]}
            ok = ok and l1 < cfg["tol"]
        write_json(out / "pipeline.json", result)
        files.append("pipeline.json")
    finally:
        manifest.outputs = files
        manifest.write(out)
    return (EXIT_OK if ok else EXIT_VIOLATED), result


def cmd_pipeline(args):
    config = None
    if args.config:
        p = Path(args.config)
        config = read_json(p) if p.exists() else json.loads(args.config)
    code, result = run_pipeline(args.model, args.out, args.seed, args.threads, config)
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return code


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _sim_flags(p):
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--scheme", choices=["euler", "euler_with_bernoulli_switch"], default="euler")
    p.add_argument("--radius", type=float, default=1e6)
    p.add_argument("--x0", default=None, help="comma separated initial point (default origin)")
    p.add_argument("--k0", type=int, default=0, help="initial state, 0-based")


def build_parser():
    parser = argparse.ArgumentParser(prog="rsdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="check the sufficient conditions")
    p.add_argument("--model", required=True)
    p.add_argument("--weights", default=None, help="comma separated w_k (searched when omitted)")
    p.add_argument("--method", choices=["quadrature", "monte_carlo"], default="quadrature")
    p.add_argument("--bound-variant", choices=["log", "raw"], default="log")
    p.add_argument("--sigma-inv", choices=["on", "off"], default="off")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", help="simulate paths")
    p.add_argument("--model", required=True)
    _sim_flags(p)
    p.add_argument("--jump-log", action="store_true")
    p.set_defaults(func=cmd_simulate, needs_out=True)

    p = sub.add_parser("estimate", help="estimate the invariant density from simulated paths")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--grid", default=None, help="lo:hi:bins (default 200 bins on +-6 sd)")
    p.add_argument("--burn-in", type=float, default=0.0)
    p.set_defaults(func=cmd_estimate, needs_out=True)

    p = sub.add_parser("oracle", help="solve the stationary equations on a grid (d = 1)")
    p.add_argument("--model", required=True)
    p.add_argument("--xmin", type=float, default=-8.0)
    p.add_argument("--xmax", type=float, default=8.0)
    p.add_argument("--n", type=int, default=401)
    p.add_argument("--grid", default=None)
    p.set_defaults(func=cmd_oracle, needs_out=True)

    p = sub.add_parser("compare", help="L1 distance between two density tables")
    p.add_argument("--estimate", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--tol", type=float, default=L1_TOL)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reweight", help="importance-sampling estimate under a drift perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--perturbation", required=True, help="Z spec as JSON text or file")
    p.add_argument("--observable", default="state0_xpos", choices=sorted(OBSERVABLES))
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--x0", default=None)
    p.add_argument("--k0", type=int, default=0)
    p.add_argument("--direct", action="store_true", help="also simulate the perturbed model directly")
    p.set_defaults(func=cmd_reweight)

    p = sub.add_parser("example", help="run the two-state example end to end")
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--t-end", type=float, default=1e4)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=401)
    p.set_defaults(func=cmd_example, needs_out=True)

    p = sub.add_parser("pipeline", help="check, simulate, estimate, oracle and compare with a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None, help="JSON text or file overriding pipeline settings")
    p.set_defaults(func=cmd_pipeline, needs_out=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_out", False) and args.out is None:
        args.out = "rsdiff_out"
    try:
        return args.func(args)
    except (RSDiffError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
