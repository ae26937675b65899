"""N-ladder convergence studies: replicates, distances to the limit, rate fits."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config_io import StudySpec
from .grid import SpatialGrid
from .measures import COMPONENTS, default_library, library_by_names, trajectory_distance
from .meanfield import MeanFieldSolution, solve_stepping
from .model import ExperimentConfig, sample_population
from .rng import replicate_seed
from .simulation import reference_c_hat, simulate

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.10


class StudyError(RuntimeError):
    pass


@dataclass
class ReplicateResult:
    n: int
    replicate: int
    errors: dict | None
    aggregate: float
    omega_n: bool
    candidates: int
    accepted: int
    events: int
    engine_seconds: float
    seconds: float
    failure: str | None = None


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci: tuple[float, float]
    points: int


def fit_slope(ns, means, level: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log(mean)`` against ``log(N)`` with a t-based interval."""
    ns = np.asarray(ns, float)
    means = np.asarray(means, float)
    if ns.size < 3:
        raise ValueError("slope fit needs >= 3 points")
    res = stats.linregress(np.log(ns), np.log(means))
    q = stats.t.ppf(0.5 + level / 2, ns.size - 2)
    return SlopeFit(res.slope, res.intercept, res.stderr, (res.slope - q * res.stderr, res.slope + q * res.stderr), ns.size)


@dataclass
class StudyReport:
    ns: list[int]
    mean: np.ndarray
    stderr: np.ndarray
    omega_fraction: np.ndarray
    fit: SlopeFit | None
    rows: list[ReplicateResult]
    gamma: float
    reference_c_hat: float
    telemetry: dict = field(default_factory=dict)

    def failures(self) -> list[ReplicateResult]:
        return [r for r in self.rows if r.failure]

    def study_csv(self, path, components=COMPONENTS) -> None:
        with open(path, "w") as fh:
            fh.write("# schema: study v1\n")
            fh.write("N,replicate,phi,component,sup_err,aggregate\n")
            for r in self.rows:
                if r.failure:
                    continue
                for (phi, comp), err in r.errors.items():
                    fh.write(f"{r.n},{r.replicate},{phi},{comp},{err!r},{r.aggregate!r}\n")

    def summary_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# schema: study_summary v1\n")
            fh.write("N,mean_aggregate,stderr,omega_fraction,replicates\n")
            for k, n in enumerate(self.ns):
                ok = sum(1 for r in self.rows if r.n == n and not r.failure)
                fh.write(f"{n},{float(self.mean[k])!r},{float(self.stderr[k])!r},{float(self.omega_fraction[k])!r},{ok}\n")
            if self.fit is not None:
                f = self.fit
                fh.write(f"# slope={f.slope!r} ci=({f.ci[0]!r},{f.ci[1]!r}) points={f.points}\n")


def reference_solution(config: ExperimentConfig, grid: int | None = None, dt: float | None = None) -> MeanFieldSolution:
    """The shared limit solution; only snapshot times (and t = 0, T) are stored."""
    g = SpatialGrid.uniform(grid or config.grid, config.domain.dim)
    steps = int(round(config.horizon / (dt or config.dt)))
    return solve_stepping(config, grid=g, dt=dt, store_every=steps)


def run_replicate(config: ExperimentConfig, n: int, replicate: int, reference: MeanFieldSolution, library,
                  components=COMPONENTS, c_hat: float | None = None) -> ReplicateResult:
    """Simulate replicate ``replicate`` at size ``n`` and measure its distance to ``reference``.

    Depends only on its arguments, so any row of a study can be recomputed alone.
    """
    start = time.perf_counter()
    cfg = config.with_(population_size=n)
    try:
        pop = sample_population(cfg, seed=replicate_seed(config.master_seed, n, replicate))
        res = simulate(cfg, pop, c_hat=c_hat)
        dist = trajectory_distance(res.trajectory, reference, library, components)
    except Exception as exc:  # recorded and excluded by the caller
        log.warning("replicate N=%d r=%d failed: %s", n, replicate, exc)
        return ReplicateResult(n, replicate, None, np.nan, False, 0, 0, 0, 0.0, time.perf_counter() - start,
                               failure=f"{type(exc).__name__}: {exc}")
    return ReplicateResult(n, replicate, dist.errors, dist.aggregate, res.omega_n, res.candidates, res.accepted,
                           len(res.events), res.engine_seconds, time.perf_counter() - start)


def run_convergence(config: ExperimentConfig, n_ladder, replicates: int, library=None, components=COMPONENTS,
                    reference: MeanFieldSolution | None = None, threads: int = 1,
                    reference_grid: int | None = None, reference_dt: float | None = None) -> StudyReport:
    """Distances of ``replicates`` runs per ladder size to one shared limit solution."""
    library = list(library or default_library(config.domain.dim))
    t0 = time.perf_counter()
    if reference is None:
        reference = reference_solution(config, reference_grid, reference_dt)
    ref_seconds = time.perf_counter() - t0
    c_hat = reference_c_hat(config)
    jobs = [(n, r) for n in n_ladder for r in range(replicates)]

    def work(job):
        return run_replicate(config, job[0], job[1], reference, library, components, c_hat)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, jobs))  # map preserves job order
    else:
        rows = [work(j) for j in jobs]

    failed = [r for r in rows if r.failure]
    if len(failed) > MAX_FAILURE_FRACTION * len(rows):
        raise StudyError(f"{len(failed)} of {len(rows)} replicates failed; first: {failed[0].failure}")

    ns = list(n_ladder)
    mean, se, omega = [], [], []
    telemetry = {"reference_seconds": ref_seconds, "per_n": {}}
    for n in ns:
        good = [r for r in rows if r.n == n and not r.failure]
        agg = np.array([r.aggregate for r in good])
        mean.append(agg.mean())
        se.append(agg.std(ddof=1) / np.sqrt(agg.size) if agg.size > 1 else np.nan)
        omega.append(np.mean([r.omega_n for r in good]))
        cand = sum(r.candidates for r in good)
        eng = sum(r.engine_seconds for r in good)
        telemetry["per_n"][n] = {
            "candidates": cand,
            "accepted": sum(r.accepted for r in good),
            "events": sum(r.events for r in good),
            "engine_seconds": eng,
            "wall_seconds": sum(r.seconds for r in good),
            "candidates_per_second": cand / eng if eng > 0 else float("inf"),
            "failures": sum(1 for r in rows if r.n == n and r.failure),
        }
    fit = fit_slope(ns, mean) if len(ns) >= 3 else None
    return StudyReport(ns, np.array(mean), np.array(se), np.array(omega), fit, rows, config.gamma, c_hat, telemetry)


def run_study(spec: StudySpec, threads: int = 1) -> list[StudyReport]:
    """One report per gamma value (just the config's own gamma unless the study lists several)."""
    if len(spec.n_ladder) < 3:
        raise ValueError("slope fit needs >= 3 points")
    dim = spec.config.domain.dim
    library = library_by_names(spec.phi, dim) if spec.phi else default_library(dim)
    gammas = spec.gammas or (spec.config.gamma,)
    out = []
    for g in gammas:
        cfg = spec.config.with_(gamma=g)
        out.append(run_convergence(cfg, spec.n_ladder, spec.replicates, library, spec.components, threads=threads,
                                   reference_grid=spec.reference_grid, reference_dt=spec.reference_dt))
    return out


@dataclass
class TruncationCheck:
    n: int
    replicate: int
    omega_n: bool
    identical: bool


def truncation_check(config: ExperimentConfig, n: int, replicate: int, c_hat: float | None = None) -> TruncationCheck:
    """Run raw and truncated modes on the same population and streams; compare the event logs."""
    cfg = config.with_(population_size=n)
    c_hat = reference_c_hat(config) if c_hat is None else c_hat
    pop = sample_population(cfg, seed=replicate_seed(config.master_seed, n, replicate))
    raw = simulate(cfg, pop, mode="raw", c_hat=c_hat)
    trunc = simulate(cfg, pop, mode="truncated", c_hat=c_hat)
    return TruncationCheck(n, replicate, raw.omega_n, raw.events.equals(trunc.events))
