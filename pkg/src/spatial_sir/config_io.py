"""TOML configuration files: strict parsing into ``ExperimentConfig`` and back.

Layout::

    [domain]             dim
    [kernel]             family + family parameters (+ allow_discontinuous)
    [infectivity.initial], [infectivity.new]
                         family + family parameters
    [initial_condition]  frac_S, frac_I, frac_R
    [initial_condition.density_S|density_I|density_R]
                         family + parameters (default uniform)
    [run]                gamma, horizon, population_size, master_seed,
                         snapshot_times or snapshot_every, truncation,
                         c_hat, grid, dt
    [study]              (study files only) see ``StudySpec``

Unknown sections or keys are errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .densities import DensityError, density_from_dict
from .infectivity import InfectivityError, model_from_dict
from .kernels import KernelError, kernel_from_dict
from .model import ConfigError, Domain, ExperimentConfig, InitialCondition

RUN_KEYS = {"gamma", "horizon", "population_size", "master_seed", "snapshot_times", "snapshot_every",
            "truncation", "c_hat", "grid", "dt"}
STUDY_KEYS = {"n_ladder", "replicates", "phi", "components", "reference_grid", "reference_dt", "gammas"}
TOP_KEYS = {"domain", "kernel", "infectivity", "initial_condition", "run"}


def _unknown(where: str, got, allowed) -> list[str]:
    extra = sorted(set(got) - set(allowed))
    return [f"unknown key{'s' if len(extra) > 1 else ''} in [{where}]: {', '.join(extra)}"] if extra else []


def _snapshot_grid(horizon: float, every: float) -> tuple[float, ...]:
    n = int(math.floor(horizon / every + 1e-9))
    times = [round(k * every, 12) for k in range(n + 1)]
    if times[-1] < horizon - 1e-12:
        times.append(horizon)
    return tuple(times)


def config_from_dict(doc: dict, allow=frozenset()) -> ExperimentConfig:
    """Build a config from parsed TOML; ``allow`` names extra top-level sections to ignore."""
    errors = _unknown("top level", doc, TOP_KEYS | set(allow))
    for sec in ("kernel", "infectivity", "initial_condition", "run"):
        if sec not in doc:
            errors.append(f"missing section [{sec}]")
    if errors:
        raise ConfigError(errors)

    domain = doc.get("domain", {})
    errors += _unknown("domain", domain, {"dim"})
    dim = int(domain.get("dim", 2))

    inf = doc["infectivity"]
    errors += _unknown("infectivity", inf, {"initial", "new"})
    ic = doc["initial_condition"]
    errors += _unknown("initial_condition", ic, {"frac_S", "frac_I", "frac_R", "density_S", "density_I", "density_R"})
    run = doc["run"]
    errors += _unknown("run", run, RUN_KEYS)
    if "snapshot_times" in run and "snapshot_every" in run:
        errors.append("[run] sets both snapshot_times and snapshot_every")
    if errors:
        raise ConfigError(errors)

    try:
        kernel = kernel_from_dict(doc["kernel"])
        new = model_from_dict(inf.get("new", inf.get("initial", {})))
        initial_law = model_from_dict(inf.get("initial", inf.get("new", {})))
        dens = {k: density_from_dict(ic.get(f"density_{k}", {"family": "uniform"}), dim) for k in "SIR"}
    except (KernelError, InfectivityError, DensityError) as exc:
        raise ConfigError(str(exc)) from None

    for key in ("frac_S", "frac_I"):
        if key not in ic:
            errors.append(f"[initial_condition] needs {key}")
    if errors:
        raise ConfigError(errors)
    frac_S, frac_I = float(ic["frac_S"]), float(ic["frac_I"])
    frac_R = float(ic.get("frac_R", 0.0))
    initial = InitialCondition(frac_S, frac_I, frac_R, dens["S"], dens["I"], dens["R"])

    horizon = float(run.get("horizon", 10.0))
    if "snapshot_every" in run:
        every = float(run["snapshot_every"])
        if every <= 0:
            raise ConfigError("[run] snapshot_every must be positive")
        snaps = _snapshot_grid(horizon, every)
    else:
        snaps = tuple(float(t) for t in run.get("snapshot_times", ()))
    c_hat = run.get("c_hat")
    return ExperimentConfig(
        kernel=kernel,
        infectivity_initial=initial_law,
        infectivity_new=new,
        initial=initial,
        gamma=float(run.get("gamma", 1.0)),
        horizon=horizon,
        population_size=int(run.get("population_size", 1000)),
        master_seed=int(run.get("master_seed", 0)),
        snapshot_times=snaps,
        truncation=str(run.get("truncation", "raw")),
        c_hat=None if c_hat is None else float(c_hat),
        domain=Domain(dim),
        grid=int(run.get("grid", 32)),
        dt=float(run.get("dt", 0.01)),
    )


def _read(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    return config_from_dict(_read(path))


def config_to_dict(config: ExperimentConfig) -> dict:
    ic = config.initial
    run = {
        "gamma": config.gamma,
        "horizon": config.horizon,
        "population_size": config.population_size,
        "master_seed": config.master_seed,
        "snapshot_times": [float(t) for t in config.snapshot_times],
        "truncation": config.truncation,
        "grid": config.grid,
        "dt": config.dt,
    }
    if config.c_hat is not None:
        run["c_hat"] = config.c_hat
    doc = {
        "domain": {"dim": config.domain.dim},
        "kernel": config.kernel.to_dict(),
        "infectivity": {"initial": _plain(config.infectivity_initial.to_dict()),
                        "new": _plain(config.infectivity_new.to_dict())},
        "initial_condition": {"frac_S": ic.frac_S, "frac_I": ic.frac_I, "frac_R": ic.frac_R},
        "run": run,
    }
    for name, d in ic.densities().items():
        doc["initial_condition"][f"density_{name}"] = d.to_dict()
    return doc


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(_plain(config_to_dict(config)))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(config))


@dataclass(frozen=True)
class StudySpec:
    """An N-ladder convergence study around one base configuration."""

    config: ExperimentConfig
    n_ladder: tuple[int, ...] = (250, 500, 1000, 2000, 4000, 8000)
    replicates: int = 20
    phi: tuple[str, ...] | None = None
    components: tuple[str, ...] = ("S", "F", "I", "R")
    reference_grid: int | None = None
    reference_dt: float | None = None
    gammas: tuple[float, ...] | None = None

    def violations(self) -> list[str]:
        out = []
        ladder = list(self.n_ladder)
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            out.append("n_ladder must be strictly increasing")
        if ladder and ladder[0] < 1:
            out.append("n_ladder entries must be positive")
        if self.replicates < 2:
            out.append("replicates must be at least 2")
        bad = [c for c in self.components if c not in ("S", "F", "I", "R")]
        if bad:
            out.append(f"unknown components {bad}")
        return out


def study_from_dict(doc: dict) -> StudySpec:
    config = config_from_dict(doc, allow={"study"})
    st = doc.get("study", {})
    errors = _unknown("study", st, STUDY_KEYS)
    if errors:
        raise ConfigError(errors)
    spec = StudySpec(
        config=config,
        n_ladder=tuple(int(n) for n in st.get("n_ladder", StudySpec.n_ladder)),
        replicates=int(st.get("replicates", 20)),
        phi=tuple(st["phi"]) if "phi" in st else None,
        components=tuple(st.get("components", ("S", "F", "I", "R"))),
        reference_grid=st.get("reference_grid"),
        reference_dt=st.get("reference_dt"),
        gammas=tuple(float(g) for g in st["gammas"]) if "gammas" in st else None,
    )
    problems = spec.violations()
    if problems:
        raise ConfigError(problems)
    return spec


def load_study(path) -> StudySpec:
    return study_from_dict(_read(path))

