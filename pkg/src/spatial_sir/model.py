"""Domain types shared across the package and the initial-population sampler."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .densities import UniformDensity
from .grid import SpatialGrid, lattice
from .infectivity import InfectivityModel
from .kernels import Kernel, limit_denominator


class ConfigError(ValueError):
    """Raised for configurations that cannot be run."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class Compartment(enum.IntEnum):
    SUSCEPTIBLE = 0
    INFECTIOUS = 1
    RECOVERED = 2


@dataclass(frozen=True)
class Domain:
    """The unit box ``[0, 1]^dim``."""

    dim: int = 2

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.all((x >= 0) & (x <= 1), axis=-1)

    @property
    def volume(self) -> float:
        return 1.0


@dataclass(frozen=True)
class InitialCondition:
    frac_S: float
    frac_I: float
    frac_R: float = 0.0
    density_S: object = field(default_factory=UniformDensity)
    density_I: object = field(default_factory=UniformDensity)
    density_R: object = field(default_factory=UniformDensity)

    def mu_bar(self, x) -> np.ndarray:
        """Density of the whole population, the fraction-weighted mixture."""
        return (
            self.frac_S * self.density_S.pdf(x)
            + self.frac_I * self.density_I.pdf(x)
            + self.frac_R * self.density_R.pdf(x)
        )

    def densities(self):
        return {"S": self.density_S, "I": self.density_I, "R": self.density_R}

    def fractions(self):
        return {"S": self.frac_S, "I": self.frac_I, "R": self.frac_R}


@dataclass(frozen=True)
class ExperimentConfig:
    kernel: Kernel
    infectivity_initial: InfectivityModel
    infectivity_new: InfectivityModel
    initial: InitialCondition
    gamma: float = 1.0
    horizon: float = 10.0
    population_size: int = 1000
    master_seed: int = 0
    snapshot_times: tuple[float, ...] = ()
    truncation: str = "raw"
    c_hat: float | None = None
    domain: Domain = field(default_factory=Domain)
    grid: int = 32
    dt: float = 0.01

    @property
    def lambda_star(self) -> float:
        return max(self.infectivity_initial.lambda_star, self.infectivity_new.lambda_star)

    @property
    def snapshots(self) -> np.ndarray:
        if self.snapshot_times:
            return np.asarray(self.snapshot_times, float)
        return np.array([0.0, self.horizon])

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def subgroup_counts(n: int, initial: InitialCondition) -> tuple[int, int, int]:
    """Deterministic initial compartment sizes; round-half-even, remainder to R."""
    s = round(n * initial.frac_S)
    i = round(n * initial.frac_I)
    r = n - s - i
    if min(s, i, r) < 0:
        raise ConfigError(f"rounding N={n} fractions gives negative counts (S={s}, I={i}, R={r})")
    return s, i, r


@dataclass(frozen=True)
class Individual:
    id: int
    position: np.ndarray
    initial_compartment: Compartment
    infection_time: float
    recovery_time: float | None
    trajectory_seed: tuple[int, int]


@dataclass(frozen=True)
class Population:
    """Static positions and initial states; ids are ordered S block, I block, R block."""

    positions: np.ndarray
    compartments: np.ndarray
    stream_key: int

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def ids(self, compartment: Compartment) -> np.ndarray:
        return np.flatnonzero(self.compartments == compartment)

    def counts(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.compartments == c)) for c in Compartment)

    def individual(self, i: int) -> Individual:
        comp = Compartment(int(self.compartments[i]))
        return Individual(
            id=i,
            position=self.positions[i],
            initial_compartment=comp,
            infection_time=0.0 if comp == Compartment.INFECTIOUS else np.inf,
            recovery_time=None,
            trajectory_seed=(self.stream_key, i),
        )

    def stream(self, i: int) -> np.random.Generator:
        return rngmod.individual_stream(self.stream_key, i)


def sample_population(config: ExperimentConfig, seed=None) -> Population:
    """Draw the N static positions; a pure function of ``(config, seed)``.

    ``seed`` defaults to ``config.master_seed`` and may be an int or a
    ``numpy.random.SeedSequence``.
    """
    seed = config.master_seed if seed is None else seed
    s, i, r = subgroup_counts(config.population_size, config.initial)
    dens = config.initial.densities()
    blocks, comps = [], []
    for group, (name, count) in enumerate(zip("SIR", (s, i, r))):
        g = rngmod.stream(seed, rngmod.POSITIONS, group)
        blocks.append(dens[name].sample(count, g) if count else np.empty((0, config.domain.dim)))
        comps.append(np.full(count, group, dtype=np.int8))
    return Population(
        positions=np.ascontiguousarray(np.concatenate(blocks)),
        compartments=np.concatenate(comps),
        stream_key=rngmod.individual_key(seed),
    )


VALIDATION_NODES = 64
DENSITY_TOL = 5e-3
NEAR_DIAGONAL_RADIUS = 0.05


def validate_config(config: ExperimentConfig) -> list[str]:
    """All violated invariants; empty when the configuration is runnable."""
    out = []
    ic = config.initial
    fr = (ic.frac_S, ic.frac_I, ic.frac_R)
    if any(not 0 <= f <= 1 for f in fr):
        out.append("fractions must lie in [0, 1]")
    if abs(sum(fr) - 1.0) > 1e-12:
        out.append("fractions do not sum to 1")
    if not 0 <= config.gamma <= 1:
        out.append(f"gamma must lie in [0, 1] (got {config.gamma})")
    if config.population_size < 1:
        out.append("population size N must be at least 1")
    if not config.horizon > 0:
        out.append("horizon T must be positive")
    snaps = np.asarray(config.snapshot_times, float)
    if snaps.size and (np.any(np.diff(snaps) < 0) or snaps[0] < 0 or snaps[-1] > config.horizon):
        out.append("snapshot times must be sorted and lie in [0, T]")
    if config.truncation not in ("raw", "phi"):
        out.append("truncation must be 'raw' or 'phi'")
    if config.dt <= 0 or config.grid < 1:
        out.append("run.dt must be positive and run.grid at least 1")
    if config.population_size >= 1:
        try:
            subgroup_counts(config.population_size, ic)
        except ConfigError as exc:
            out.extend(exc.violations)

    dim = config.domain.dim
    grid = SpatialGrid.uniform(VALIDATION_NODES, dim)
    nodes = grid.nodes
    for name, dens in ic.densities().items():
        if getattr(dens, "dim", dim) != dim:
            out.append(f"density_{name} has dimension {dens.dim}, domain has {dim}")
            continue
        vals = dens.pdf(nodes)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            out.append(f"density_{name} must be finite and nonnegative")
        elif abs(grid.integrate(vals) - 1.0) > DENSITY_TOL:
            out.append(f"density_{name} does not integrate to 1 over D")
    mu = ic.mu_bar(nodes)
    if not np.all(np.isfinite(mu)):
        out.append("sup of mu_bar is not finite")
    if np.min(mu) <= 0:
        out.append("inf mu_bar = 0")

    k = config.kernel
    if not k.continuous and not k.allow_discontinuous:
        out.append(f"kernel {k.family} is discontinuous; set allow_discontinuous = true to override")
    probe = lattice(9, dim)
    kv = k.matrix(probe, probe)
    if np.any(kv < 0) or np.any(kv > 1):
        out.append("kernel values must lie in [0, 1]")
    r = NEAR_DIAGONAL_RADIUS
    offsets = lattice(5, dim, -r / np.sqrt(dim), r / np.sqrt(dim))
    near = np.clip(probe[:, None, :] + offsets[None, :, :], 0, 1).reshape(-1, dim)
    base = np.repeat(probe, len(offsets), axis=0)
    if np.min(k(base, near)) <= 0:
        out.append(f"kernel has no positive lower bound within distance {r} of the diagonal")
    if np.all(np.isfinite(mu)):
        d = limit_denominator(k, mu, grid, lattice(11, dim))
        if np.min(d) <= 0:
            out.append("limiting denominator vanishes somewhere in D")
    return out
