"""Command-line entry point: ``spatial-sir {sim,meanfield,converge,validate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config_io import config_to_dict, load_config, load_study
from .grid import SpatialGrid
from .kernels import estimate_c_hat
from .measures import default_library
from .meanfield import (check_apriori_bounds, classical_sir, homogeneous_oracle, solve_picard, solve_stepping)
from .model import ConfigError, sample_population, validate_config
from .simulation import simulate
from .study import run_study

OUT_ENV = "SPATIAL_SIR_OUT"
log = logging.getLogger("spatial_sir")


def _out_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUT_ENV) or "out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _load_valid(path):
    config = load_config(path)
    problems = validate_config(config)
    if problems:
        raise ConfigError(problems)
    return config


# --------------------------------------------------------------------------
# subcommands


def cmd_sim(args) -> int:
    config = _load_valid(args.config)
    if args.seed is not None:
        config = config.with_(master_seed=args.seed)
    if args.population is not None:
        config = config.with_(population_size=args.population)
    out = _out_dir(args.out)
    pop = sample_population(config)
    res = simulate(config, pop, mode=args.mode)
    library = default_library(config.domain.dim)
    res.events.to_csv(out / "events.csv", pop.positions)
    res.trajectory.to_csv(out / "snapshots.csv", library)
    _write_json(out / "manifest.json", {
        "command": "sim",
        "version": __version__,
        "config": config_to_dict(config),
        "seed": config.master_seed,
        "mode": res.mode,
        "c_hat": res.c_hat,
        "omega_n": res.omega_n,
        "counts": dict(zip("SIR", pop.counts())),
        "events": len(res.events),
        "candidates": res.candidates,
        "accepted": res.accepted,
        "max_bound_ratio": res.max_bound_ratio,
        "test_functions": [phi.name for phi in library],
    })
    print(f"{len(res.events)} events, omega_N={'holds' if res.omega_n else 'fails'}, "
          f"c_hat={res.c_hat:.6g}; wrote {out}")
    return 0


def _solve(config, grid, dt, mode, picard: bool, tol: float):
    if picard:
        return solve_picard(config, grid=grid, dt=dt, mode=mode, tol=tol, store_every=1)
    steps = int(round(config.horizon / (dt or config.dt)))
    return solve_stepping(config, grid=grid, dt=dt, mode=mode, store_every=steps)


def _sup_diff(a, b, times) -> float:
    worst = 0.0
    for t in times:
        ka, kb = a.index(t), b.index(t)
        for c in ("S", "F", "I", "R"):
            worst = max(worst, float(np.max(np.abs(a.density(c)[ka] - b.density(c)[kb]))))
    return worst


def cmd_meanfield(args) -> int:
    config = _load_valid(args.config)
    out = _out_dir(args.out)
    grid = SpatialGrid.uniform(args.grid or config.grid, config.domain.dim)
    dt = args.dt or config.dt
    sol = _solve(config, grid, dt, args.mode, args.picard, args.tol)
    library = default_library(config.domain.dim)
    times = config.snapshots
    sol.to_csv(out / "solution.csv", times)
    sol.observables_to_csv(out / "observables.csv", library, times)
    report = check_apriori_bounds(sol, config)
    with open(out / "apriori.csv", "w") as fh:
        fh.write("# schema: apriori v1\n")
        fh.write("check,observed,bound,passed\n")
        fh.write(f"sup_S,{report.sup_S!r},{report.sup_mu_bar!r},{int(report.checks['S bounded by mu_bar'])}\n")
        fh.write(f"inf_denominator,{report.inf_denominator!r},0.0,{int(report.checks['denominator bounded below'])}\n")
        fh.write(f"sup_F,{report.sup_F!r},{report.F_bound!r},{int(report.checks['force bounded'])}\n")
        fh.write(f"monotone_violations,{report.monotone_violations},0,{int(report.checks['S nonincreasing from t=0'])}\n")
    manifest = {
        "command": "meanfield",
        "version": __version__,
        "config": config_to_dict(config),
        "grid": list(grid.shape),
        "dt": dt,
        "mode": sol.mode,
        "c_hat": sol.c_hat,
        "solver": "picard" if args.picard else "stepping",
        "apriori_passed": report.passed,
        "conservation_residual": sol.conservation_residual(),
    }
    if args.picard:
        manifest["picard_iterations"] = sol.iterations
        manifest["picard_residuals"] = sol.residuals
        manifest["picard_contraction"] = sol.contraction

    if args.step_halving:
        with open(out / "halving.csv", "w") as fh:
            fh.write("# schema: halving v1\n")
            fh.write("dt,sup_diff,ratio\n")
            prev, prev_diff = sol, None
            h = dt
            for _ in range(args.step_halving):
                h = h / 2
                nxt = _solve(config, grid, h, args.mode, False, args.tol)
                diff = _sup_diff(prev, nxt, times)
                ratio = prev_diff / diff if prev_diff and diff > 0 else float("nan")
                fh.write(f"{h!r},{diff!r},{ratio!r}\n")
                prev, prev_diff = nxt, diff

    if args.homogeneous:
        oracle = homogeneous_oracle(config)
        at = oracle.at(times)
        with open(out / "oracle.csv", "w") as fh:
            fh.write("# schema: oracle v1\n")
            fh.write("t,S,I,R,F\n")
            for k, t in enumerate(times):
                fh.write(",".join(repr(float(v)) for v in (t, at["S"][k], at["I"][k], at["R"][k], at["F"][k])) + "\n")
        one = library[0]
        errs = {c: max(abs(sol.pair(t, c, one) - at[c][k]) for k, t in enumerate(times)) for c in "SIR"}
        if config.infectivity_new.family == "markov" and config.infectivity_initial == config.infectivity_new:
            p = config.infectivity_new.params
            k1g = config.kernel.p[0] ** (1 - config.gamma)
            ic = config.initial
            ode = classical_sir(k1g * float(p["a"]), float(p["rho"]), ic.frac_S, ic.frac_I, ic.frac_R, times)
            for c in "SIR":
                errs[f"{c}_vs_ode"] = max(abs(sol.pair(t, c, one) - getattr(ode, c)[k]) for k, t in enumerate(times))
        manifest["oracle_sup_error"] = errs
    _write_json(out / "manifest.json", manifest)
    for line in report.lines():
        print(line)
    print(f"wrote {out}")
    return 0 if report.passed else 1


def cmd_converge(args) -> int:
    spec = load_study(args.config)
    problems = validate_config(spec.config)
    if problems:
        raise ConfigError(problems)
    if args.seed is not None:
        spec = dataclasses.replace(spec, config=spec.config.with_(master_seed=args.seed))
    out = _out_dir(args.out)
    reports = run_study(spec, threads=args.threads or 1)
    summary = []
    telemetry = {}
    for rep in reports:
        sub = out if len(reports) == 1 else out / f"gamma_{rep.gamma:g}"
        sub.mkdir(parents=True, exist_ok=True)
        rep.study_csv(sub / "study.csv")
        rep.summary_csv(sub / "summary.csv")
        telemetry[f"{rep.gamma:g}"] = rep.telemetry
        f = rep.fit
        summary.append({"gamma": rep.gamma, "slope": f.slope, "slope_ci": list(f.ci), "c_hat": rep.reference_c_hat,
                        "mean_aggregate": rep.mean, "omega_fraction": rep.omega_fraction,
                        "failures": [r.failure for r in rep.failures()]})
        print(f"gamma={rep.gamma:g}: slope {f.slope:.3f} (95% CI {f.ci[0]:.3f}..{f.ci[1]:.3f}); "
              f"mean distance {', '.join(f'{n}:{m:.4g}' for n, m in zip(rep.ns, rep.mean))}")
    _write_json(out / "manifest.json", {
        "command": "converge",
        "version": __version__,
        "config": config_to_dict(spec.config),
        "study": {"n_ladder": spec.n_ladder, "replicates": spec.replicates, "phi": spec.phi,
                  "components": spec.components, "reference_grid": spec.reference_grid,
                  "reference_dt": spec.reference_dt, "gammas": spec.gammas},
        "results": summary,
    })
    _write_json(out / "telemetry.json", telemetry)
    return 0


def cmd_validate(args) -> int:
    config = load_config(args.config)
    problems = validate_config(config)
    for p in problems:
        print(f"violation: {p}")
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args.out)
        grid = SpatialGrid.uniform(args.grid or config.grid, config.domain.dim)
        if not problems:
            estimate_c_hat(config.kernel, config.initial.mu_bar, grid).to_csv(out / "denominator.csv")
    if problems:
        return 1
    print("ok")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-sir", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="TOML configuration file")
        if out:
            p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")

    p = sub.add_parser("sim", help="simulate one realisation of the particle system")
    common(p)
    p.add_argument("--seed", type=int, help="override run.master_seed")
    p.add_argument("--population", "-N", type=int, help="override run.population_size")
    p.add_argument("--mode", choices=("raw", "truncated"))
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("meanfield", help="solve the deterministic limit on a grid")
    common(p)
    p.add_argument("--grid", type=int, help="nodes per axis")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--mode", choices=("raw", "truncated"))
    p.add_argument("--picard", action="store_true", help="solve by Picard iteration instead of time stepping")
    p.add_argument("--tol", type=float, default=1e-8, help="Picard tolerance")
    p.add_argument("--step-halving", type=int, default=0, metavar="K", help="also solve with K successive halvings of dt")
    p.add_argument("--homogeneous", action="store_true", help="compare with the scalar homogeneous oracle")
    p.set_defaults(func=cmd_meanfield)

    p = sub.add_parser("converge", help="run an N-ladder convergence study")
    common(p)
    p.add_argument("--seed", type=int, help="override run.master_seed")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("validate", help="check a configuration")
    common(p)
    p.add_argument("--grid", type=int, help="nodes per axis for the denominator export")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
