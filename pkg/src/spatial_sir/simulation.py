"""Exact event-driven simulation of the finite population by Poisson thinning.

Every susceptible ``i`` owns a homogeneous Poisson stream of candidate times
with rate ``B_i`` (a static majorant of its infection hazard) and uniform
marks, drawn from its own substream before the run starts. Candidates of all
individuals are merged in ``(time, id)`` order; a candidate at time ``t`` is
accepted when ``mark * B_i < Gamma_N(t, X_i)``. Positions never move, so the
kernel denominators and the majorants are computed once per population.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from fractions import Fraction

import numba as nb
import numpy as np

from .grid import SpatialGrid, lattice
from .infectivity import InfectivityTrajectory
from .kernels import Kernel, _kernel_r2, estimate_c_hat, omega_n_holds, phi_trunc
from .model import Compartment, ConfigError, ExperimentConfig, Population

INFECTION, RECOVERY = 0, 1
KIND_NAMES = {INFECTION: "infection", RECOVERY: "recovery"}
MEASURES = ("S", "I", "R", "F")
OMEGA_PROBES_PER_AXIS = 21


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True)
def _lam(offsets, starts, values, slopes, eta, j, age):
    if age < 0.0 or age >= eta[j]:
        return 0.0
    k = offsets[j]
    end = offsets[j + 1]
    while k + 1 < end and starts[k + 1] <= age:
        k += 1
    return values[k] + slopes[k] * (age - starts[k])


@nb.njit(cache=True)
def _force_at(code, p0, p1, pos, x, weights, active, n_active, tau, offsets, starts, values, slopes, eta, t):
    """Sum over the active set of ``K(x, X_j) * weights[j] * lambda_j(t - tau_j)``."""
    acc = 0.0
    for a in range(n_active):
        j = active[a]
        # _lam inlined by hand: a call here costs more than the whole body
        age = t - tau[j]
        if age < 0.0 or age >= eta[j]:
            continue
        k = offsets[j]
        end = offsets[j + 1]
        while k + 1 < end and starts[k + 1] <= age:
            k += 1
        lam = values[k] + slopes[k] * (age - starts[k])
        if lam > 0.0:
            if code == 0:
                kv = p0
            else:
                r2 = 0.0
                for q in range(pos.shape[1]):
                    d = x[q] - pos[j, q]
                    r2 += d * d
                kv = _kernel_r2(code, p0, p1, r2)
            acc += kv * weights[j] * lam
    return acc


@nb.njit(cache=True, parallel=True)
def _denominators(code, p0, p1, pos):
    n = pos.shape[0]
    out = np.empty(n)
    for j in nb.prange(n):
        acc = 0.0
        for l in range(n):
            r2 = 0.0
            for k in range(pos.shape[1]):
                d = pos[l, k] - pos[j, k]
                r2 += d * d
            acc += _kernel_r2(code, p0, p1, r2)
        out[j] = acc / n
    return out


@nb.njit(cache=True, parallel=True)
def _bounds(code, p0, p1, pos, weights, lam_star, targets):
    out = np.zeros(pos.shape[0])
    for a in nb.prange(targets.shape[0]):
        i = targets[a]
        acc = 0.0
        for j in range(pos.shape[0]):
            r2 = 0.0
            for k in range(pos.shape[1]):
                d = pos[i, k] - pos[j, k]
                r2 += d * d
            acc += _kernel_r2(code, p0, p1, r2) * weights[j]
        out[i] = lam_star * acc
    return out


@nb.njit(cache=True, nogil=True)
def _run(code, p0, p1, pos, weights, bounds, tau, initially_active,
         offsets, starts, values, slopes, eta, cand_t, cand_id, cand_mark):
    n, dim = pos.shape
    # Active set, field by field and contiguous, in infection order. Each entry
    # caches its current linear piece; candidates arrive in time order, so the
    # piece index only moves forward.
    a_tau = np.empty(n)
    a_eta = np.empty(n)
    a_w = np.empty(n)
    a_k = np.empty(n, dtype=np.int64)
    a_last = np.empty(n, dtype=np.int64)
    a_start = np.empty(n)
    a_next = np.empty(n)
    a_val = np.empty(n)
    a_slope = np.empty(n)
    a_pos = np.empty((n, dim))
    n_active = 0
    expiry = np.inf  # earliest tau + eta over the active set
    infected = np.zeros(n, dtype=np.bool_)
    for j in range(n):
        if tau[j] < np.inf:
            infected[j] = True
    evaluated = 0
    accepted = 0
    worst = 0.0
    xi = np.empty(dim)
    n_init = initially_active.shape[0]
    for c in range(-n_init, cand_t.shape[0]):
        if c < 0:
            # seed the active set with the initially infectious individuals
            i = initially_active[c + n_init]
            t = tau[i]
        else:
            i = cand_id[c]
            if infected[i]:
                continue
            t = cand_t[c]
            if t >= expiry:
                kept = 0
                expiry = np.inf
                for a in range(n_active):
                    if t - a_tau[a] >= a_eta[a]:
                        continue
                    if kept != a:
                        a_tau[kept] = a_tau[a]
                        a_eta[kept] = a_eta[a]
                        a_w[kept] = a_w[a]
                        a_k[kept] = a_k[a]
                        a_last[kept] = a_last[a]
                        a_start[kept] = a_start[a]
                        a_next[kept] = a_next[a]
                        a_val[kept] = a_val[a]
                        a_slope[kept] = a_slope[a]
                        for q in range(dim):
                            a_pos[kept, q] = a_pos[a, q]
                    end = a_tau[kept] + a_eta[kept]
                    if end < expiry:
                        expiry = end
                    kept += 1
                n_active = kept
            for q in range(dim):
                xi[q] = pos[i, q]
            g = 0.0
            for a in range(n_active):
                age = t - a_tau[a]
                if age >= a_eta[a]:
                    continue
                if age >= a_next[a]:
                    k = a_k[a]
                    while k + 1 < a_last[a] and starts[k + 1] <= age:
                        k += 1
                    a_k[a] = k
                    a_start[a] = starts[k]
                    a_next[a] = starts[k + 1] if k + 1 < a_last[a] else np.inf
                    a_val[a] = values[k]
                    a_slope[a] = slopes[k]
                lam = a_val[a] + a_slope[a] * (age - a_start[a])
                if code == 0:
                    g += p0 * a_w[a] * lam
                elif lam > 0.0:
                    r2 = 0.0
                    for q in range(dim):
                        d = xi[q] - a_pos[a, q]
                        r2 += d * d
                    g += _kernel_r2(code, p0, p1, r2) * a_w[a] * lam
            evaluated += 1
            b = bounds[i]
            if g > worst * b:
                worst = g / b if b > 0 else np.inf
            if not cand_mark[c] * b < g:
                continue
            tau[i] = t
            infected[i] = True
            accepted += 1
        k = offsets[i]
        a_tau[n_active] = t
        a_eta[n_active] = eta[i]
        a_w[n_active] = weights[i]
        a_k[n_active] = k
        a_last[n_active] = offsets[i + 1]
        a_start[n_active] = starts[k]
        a_next[n_active] = starts[k + 1] if k + 1 < offsets[i + 1] else np.inf
        a_val[n_active] = values[k]
        a_slope[n_active] = slopes[k]
        for q in range(dim):
            a_pos[n_active, q] = pos[i, q]
        if t + eta[i] < expiry:
            expiry = t + eta[i]
        n_active += 1
    return evaluated, accepted, worst


@nb.njit(cache=True)
def _force_weights(offsets, starts, values, slopes, eta, tau, t, out):
    for j in range(tau.shape[0]):
        out[j] = _lam(offsets, starts, values, slopes, eta, j, t - tau[j]) if tau[j] < np.inf else 0.0


# --------------------------------------------------------------------------
# state and results


@dataclass
class Trajectories:
    """All individuals' infectivity paths, flattened for the compiled kernels."""

    offsets: np.ndarray
    starts: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    eta: np.ndarray

    @classmethod
    def from_list(cls, trajs: list[InfectivityTrajectory | None]) -> "Trajectories":
        lens = [0 if tr is None else len(tr.starts) for tr in trajs]
        offsets = np.zeros(len(trajs) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(lens)

        def cat(attr):
            parts = [getattr(tr, attr) for tr in trajs if tr is not None]
            return np.concatenate(parts).astype(float) if parts else np.zeros(0)

        eta = np.array([0.0 if tr is None else tr.eta for tr in trajs])
        return cls(offsets, cat("starts"), cat("values"), cat("slopes"), eta)

    def args(self):
        return self.offsets, self.starts, self.values, self.slopes, self.eta

    def evaluate(self, j: int, age: float) -> float:
        return _lam(*self.args(), j, age)

    def trajectory(self, j: int) -> InfectivityTrajectory:
        sl = slice(self.offsets[j], self.offsets[j + 1])
        return InfectivityTrajectory(self.starts[sl], self.values[sl], self.slopes[sl], float(self.eta[j]))


class SimState:
    """Positions, infection times and trajectories at some moment of a run.

    ``tau[j]`` is ``inf`` for individuals not (yet) infected; initially
    infectious individuals have ``tau = 0``.
    """

    def __init__(self, positions, kernel: Kernel, gamma: float, tau, trajectories: Trajectories,
                 lambda_star: float, c_hat: float | None = None, compartments=None, denominators=None):
        self.positions = np.ascontiguousarray(np.asarray(positions, float))
        self.kernel = kernel
        self.gamma = float(gamma)
        self.tau = np.asarray(tau, float).copy()
        self.trajectories = trajectories
        self.lambda_star = float(lambda_star)
        self.c_hat = c_hat
        n = self.positions.shape[0]
        self.compartments = (np.zeros(n, np.int8) if compartments is None else np.asarray(compartments, np.int8))
        if denominators is None:
            denominators = _denominators(kernel.code, kernel.p[0], kernel.p[1], self.positions)
        self.denominators = denominators

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def denominator_power(self, mode: str = "raw") -> np.ndarray:
        if mode == "raw":
            return self.denominators ** self.gamma
        if mode == "truncated":
            if self.c_hat is None:
                raise ValueError("truncated mode needs c_hat")
            return phi_trunc(self.denominators, self.c_hat, self.gamma)
        raise ValueError(f"unknown mode {mode!r}")

    def weights(self, mode: str = "raw") -> np.ndarray:
        return 1.0 / (self.size * self.denominator_power(mode))

    def gamma_n(self, t: float, x, mode: str = "raw") -> float:
        """Instantaneous infection hazard at position ``x``."""
        active = np.flatnonzero(self.tau <= t).astype(np.int64)
        k = self.kernel
        return _force_at(k.code, k.p[0], k.p[1], self.positions, np.asarray(x, float), self.weights(mode),
                         active, active.size, self.tau, *self.trajectories.args(), float(t))

    def thinning_bound(self, i: int, mode: str = "raw") -> float:
        k = self.kernel
        return float(_bounds(k.code, k.p[0], k.p[1], self.positions, self.weights(mode), self.lambda_star,
                             np.array([i], dtype=np.int64))[i])

    def all_bounds(self, mode: str = "raw") -> np.ndarray:
        k = self.kernel
        targets = np.flatnonzero(self.compartments == Compartment.SUSCEPTIBLE).astype(np.int64)
        return _bounds(k.code, k.p[0], k.p[1], self.positions, self.weights(mode), self.lambda_star, targets)


def gamma_n(state: SimState, t: float, x, mode: str = "raw") -> float:
    return state.gamma_n(t, x, mode)


def thinning_bound(state: SimState, i: int, mode: str = "raw") -> float:
    return state.thinning_bound(i, mode)


@dataclass
class EventLog:
    time: np.ndarray
    id: np.ndarray
    kind: np.ndarray
    tau: np.ndarray
    eta: np.ndarray

    def __len__(self):
        return self.time.size

    def equals(self, other: "EventLog") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("time", "id", "kind", "tau", "eta"))

    def to_csv(self, path, positions) -> None:
        d = positions.shape[1]
        with open(path, "w") as fh:
            fh.write("# schema: events v1\n")
            fh.write(",".join(["time", "id", "kind"] + [f"x{k + 1}" for k in range(d)] + ["eta"]) + "\n")
            for t, i, k in zip(self.time, self.id, self.kind):
                coords = ",".join(repr(float(c)) for c in positions[i])
                fh.write(f"{float(t)!r},{int(i)},{KIND_NAMES[int(k)]},{coords},{float(self.eta[i])!r}\n")


@dataclass
class EpidemicTrajectory:
    """Snapshots of the four empirical measures.

    ``states[k]`` holds every individual's compartment at ``times[k]`` and
    ``force[k]`` its current infectivity (the weight it carries in the
    force-of-infection measure).
    """

    times: np.ndarray
    positions: np.ndarray
    states: np.ndarray
    force: np.ndarray
    _phi_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def _index(self, t: float) -> int:
        hit = np.flatnonzero(self.times == t)
        if hit.size == 0:
            raise KeyError(f"no snapshot at t={t}")
        return int(hit[0])

    def _weights(self, k: int, which: str) -> np.ndarray:
        if which == "F":
            return self.force[k]
        comp = {"S": 0, "I": 1, "R": 2}[which]
        return (self.states[k] == comp).astype(float)

    def _phi(self, phi) -> np.ndarray:
        key = getattr(phi, "name", id(phi))
        if key not in self._phi_cache:
            self._phi_cache[key] = np.asarray(phi(self.positions), float)
        return self._phi_cache[key]

    def pair(self, t: float, which: str, phi) -> float:
        k = self._index(t)
        return float(np.dot(self._weights(k, which), self._phi(phi))) / self.size

    def pair_exact(self, t: float, which: str, phi) -> Fraction:
        """Exact rational value of the pairing for the floating-point inputs."""
        k = self._index(t)
        terms = self._weights(k, which) * self._phi(phi) if which == "F" else self._phi(phi)[self.states[k] == {"S": 0, "I": 1, "R": 2}[which]]
        return exact_sum(terms) / self.size

    def fractions(self, t: float) -> dict[str, float]:
        k = self._index(t)
        out = {c: float(np.mean(self.states[k] == i)) for i, c in enumerate("SIR")}
        out["F"] = float(self.force[k].sum()) / self.size
        return out

    def to_csv(self, path, library) -> None:
        with open(path, "w") as fh:
            fh.write("# schema: snapshots v1\n")
            fh.write("t,measure,phi,value\n")
            for t in self.times:
                for which in MEASURES:
                    for phi in library:
                        fh.write(f"{float(t)!r},{which},{phi.name},{self.pair(t, which, phi)!r}\n")


def pair_snapshot(traj: EpidemicTrajectory, t: float, which: str, phi) -> float:
    return traj.pair(t, which, phi)


def exact_sum(values) -> Fraction:
    """Exact sum of binary floats as a Fraction."""
    shift = 1100
    total = 0
    for v in np.asarray(values, float).ravel():
        num, den = float(v).as_integer_ratio()
        total += num << (shift - (den.bit_length() - 1))
    return Fraction(total, 1 << shift)


@dataclass
class SimulationResult:
    events: EventLog
    trajectory: EpidemicTrajectory
    state: SimState
    mode: str
    c_hat: float
    omega_n: bool
    candidates: int
    accepted: int
    max_bound_ratio: float
    seconds: float
    engine_seconds: float

    @property
    def candidates_per_second(self) -> float:
        """Throughput of the event engine alone (setup and snapshots excluded)."""
        return self.candidates / self.engine_seconds if self.engine_seconds > 0 else np.inf


# --------------------------------------------------------------------------
# driver


def reference_c_hat(config: ExperimentConfig, grid: SpatialGrid | None = None) -> float:
    """Estimated infimum of the limiting denominator (``config.c_hat`` wins if set)."""
    if config.c_hat is not None:
        return float(config.c_hat)
    grid = grid or SpatialGrid.uniform(config.grid, config.domain.dim)
    return estimate_c_hat(config.kernel, config.initial.mu_bar, grid).c_hat


def _draw_streams(population: Population, config: ExperimentConfig, bounds: np.ndarray):
    """Per-individual draws: the infectivity path, then (susceptibles only) the candidate stream."""
    horizon = config.horizon
    trajs, times, ids, marks = [], [], [], []
    for i, comp in enumerate(population.compartments.tolist()):
        if comp == 2:
            trajs.append(None)
            continue
        g = population.stream(i)
        law = config.infectivity_new if comp == 0 else config.infectivity_initial
        trajs.append(law.sample(g))
        if comp == 0:
            n = g.poisson(bounds[i] * horizon)
            if n:
                times.append(np.sort(g.uniform(0.0, horizon, n)))
                ids.append(np.full(n, i, dtype=np.int64))
                marks.append(g.random(n))
    if times:
        t, idx, m = np.concatenate(times), np.concatenate(ids), np.concatenate(marks)
        order = np.lexsort((idx, t))
        cands = (t[order], idx[order], m[order])
    else:
        cands = (np.zeros(0), np.zeros(0, np.int64), np.zeros(0))
    return Trajectories.from_list(trajs), cands


def simulate(config: ExperimentConfig, population: Population, mode: str | None = None,
             c_hat: float | None = None) -> SimulationResult:
    """Run one exact realisation up to ``config.horizon``.

    ``mode`` is ``"raw"`` (denominator power ``d**gamma``) or ``"truncated"``
    (``phi_trunc(d, c_hat, gamma)``); it defaults to the config's truncation
    setting. All randomness comes from the population's per-individual streams.
    """
    if not config.horizon > 0:
        raise ConfigError("horizon T must be positive")
    mode = mode or ("truncated" if config.truncation == "phi" else "raw")
    if mode not in ("raw", "truncated"):
        raise ValueError(f"unknown mode {mode!r}")
    c_hat = reference_c_hat(config) if c_hat is None else float(c_hat)
    start = _time.perf_counter()

    k = config.kernel
    pos = np.ascontiguousarray(population.positions)
    n = pos.shape[0]
    tau = np.full(n, np.inf)
    tau[population.compartments == Compartment.INFECTIOUS] = 0.0
    tau[population.compartments == Compartment.RECOVERED] = np.nan
    placeholder = Trajectories.from_list([None] * n)
    state = SimState(pos, k, config.gamma, np.where(np.isnan(tau), np.inf, tau), placeholder,
                     config.lambda_star, c_hat, population.compartments)
    weights = state.weights(mode)
    bounds = state.all_bounds(mode)
    trajs, (ct, cid, cm) = _draw_streams(population, config, bounds)
    state.trajectories = trajs

    run_tau = state.tau.copy()
    initially_active = np.flatnonzero(population.compartments == Compartment.INFECTIOUS).astype(np.int64)
    engine_start = _time.perf_counter()
    evaluated, accepted, worst = _run(k.code, k.p[0], k.p[1], pos, weights, bounds, run_tau, initially_active,
                                      *trajs.args(), ct, cid, cm)
    engine_seconds = _time.perf_counter() - engine_start
    if worst > 1.0 + 1e-9:
        raise SimulationError(f"thinning bound violated: hazard/bound reached {worst}")
    state.tau = run_tau

    events = _event_log(population, run_tau, trajs.eta, config.horizon)
    snaps = _snapshots(population, run_tau, trajs, config.snapshots)
    omega = omega_n_holds(k, pos, c_hat, lattice(OMEGA_PROBES_PER_AXIS, population.dim), state.denominators)
    return SimulationResult(events, snaps, state, mode, c_hat, omega, int(evaluated), int(accepted),
                            float(worst), _time.perf_counter() - start, engine_seconds)


def _event_log(population: Population, tau: np.ndarray, eta: np.ndarray, horizon: float) -> EventLog:
    comps = population.compartments
    newly = np.flatnonzero((comps == Compartment.SUSCEPTIBLE) & (tau <= horizon))
    ever = np.flatnonzero(((comps == Compartment.SUSCEPTIBLE) & (tau <= horizon)) | (comps == Compartment.INFECTIOUS))
    rec_t = tau[ever] + eta[ever]
    rec = ever[rec_t <= horizon]
    time = np.concatenate([tau[newly], tau[rec] + eta[rec]])
    ids = np.concatenate([newly, rec]).astype(np.int64)
    kind = np.concatenate([np.full(newly.size, INFECTION), np.full(rec.size, RECOVERY)]).astype(np.int8)
    order = np.lexsort((kind, ids, time))
    rec_tau = np.where(comps == Compartment.RECOVERED, np.nan, tau)
    return EventLog(time[order], ids[order], kind[order], rec_tau, eta.copy())


def compartments_at(population: Population, tau: np.ndarray, eta: np.ndarray, t: float) -> np.ndarray:
    comps = population.compartments
    out = np.full(comps.shape, Compartment.RECOVERED, dtype=np.int8)
    live = comps != Compartment.RECOVERED
    out[live & (t < tau)] = Compartment.SUSCEPTIBLE
    out[live & (tau <= t) & (t < tau + eta)] = Compartment.INFECTIOUS
    return out


def _snapshots(population: Population, tau, trajs: Trajectories, times) -> EpidemicTrajectory:
    times = np.asarray(times, float)
    n = population.size
    states = np.empty((times.size, n), dtype=np.int8)
    force = np.empty((times.size, n))
    for k, t in enumerate(times):
        states[k] = compartments_at(population, tau, trajs.eta, t)
        _force_weights(*trajs.args(), tau, t, force[k])
    return EpidemicTrajectory(times, population.positions, states, force)
