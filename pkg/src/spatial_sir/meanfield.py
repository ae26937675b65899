"""Deterministic large-population limit on a spatial grid.

Unknowns are the densities of susceptibles ``S``, force of infection ``F``,
infectious ``I`` and recovered ``R`` over ``[0, T] x D``, plus the hazard
field ``Gamma = M F`` where ``M[x, y] = w_y K(x, y) / d(y)**gamma``.

Time stepping is explicit. The infection flux over ``[t_k, t_k + dt)`` is the
exact drop of ``S`` under a frozen hazard, ``dA_k = S_k (1 - exp(-Gamma_k dt))``,
and every convolution (``F`` with the mean infectivity, ``I`` and ``R`` with
the duration survival/cdf) is taken against these same increments, so
``S + I + R`` equals the initial total density up to rounding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.signal import fftconvolve

from .grid import SpatialGrid
from .kernels import denominator_power, estimate_c_hat, limit_denominator
from .model import ConfigError, ExperimentConfig

TAIL_CUT = 1e-12
COMPONENTS = ("S", "F", "I", "R")


class NonConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"Picard iteration did not converge in {iterations} steps (residual {residual:.3e})")


@dataclass
class MeanFieldSolution:
    grid: SpatialGrid
    dt: float
    times: np.ndarray
    S: np.ndarray
    F: np.ndarray
    I: np.ndarray
    R: np.ndarray
    Gamma: np.ndarray
    cum_gamma: np.ndarray
    mu_bar: np.ndarray
    denominators: np.ndarray
    c_hat: float
    gamma: float
    mode: str
    lambda_star: float
    horizon: float
    iterations: int = 0
    residuals: list = field(default_factory=list)
    contraction: list = field(default_factory=list)
    _phi_cache: dict = field(default_factory=dict, repr=False)

    def density(self, which: str) -> np.ndarray:
        return {"S": self.S, "F": self.F, "I": self.I, "R": self.R, "Gamma": self.Gamma}[which]

    def index(self, t: float) -> int | None:
        hit = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))
        return int(hit[0]) if hit.size else None

    def is_node(self, t: float) -> bool:
        return self.index(t) is not None

    def _phi(self, phi) -> np.ndarray:
        key = getattr(phi, "name", id(phi))
        if key not in self._phi_cache:
            self._phi_cache[key] = self.grid.weights * np.asarray(phi(self.grid.nodes), float)
        return self._phi_cache[key]

    def pair(self, t: float, which: str, phi) -> float:
        """Quadrature of ``phi`` against a density; linear in time between stored nodes."""
        wphi = self._phi(phi)
        dens = self.density(which)
        k = self.index(t)
        if k is not None:
            return float(dens[k] @ wphi)
        if not self.times[0] <= t <= self.times[-1]:
            raise KeyError(f"t={t} outside the solved horizon")
        warnings.warn(f"t={t} is not a stored solver node; interpolating", stacklevel=2)
        hi = int(np.searchsorted(self.times, t))
        lo = hi - 1
        a = (t - self.times[lo]) / (self.times[hi] - self.times[lo])
        return float((1 - a) * (dens[lo] @ wphi) + a * (dens[hi] @ wphi))

    def conservation_residual(self) -> float:
        return float(np.max(np.abs(self.S + self.I + self.R - self.mu_bar[None, :])))

    def to_csv(self, path, times=None) -> None:
        """Node values at ``times`` (default: every stored time)."""
        nodes = self.grid.nodes
        rows = range(self.times.size) if times is None else [self.index(t) for t in times]
        d = nodes.shape[1]
        with open(path, "w") as fh:
            fh.write("# schema: solution v1\n")
            fh.write(",".join(["t"] + [f"node_x{k + 1}" for k in range(d)] + ["muS", "muF", "muI", "muR", "Gamma"]) + "\n")
            for k in rows:
                t = self.times[k]
                for g in range(nodes.shape[0]):
                    vals = [t, *nodes[g], self.S[k, g], self.F[k, g], self.I[k, g], self.R[k, g], self.Gamma[k, g]]
                    fh.write(",".join(repr(float(v)) for v in vals) + "\n")

    def observables_to_csv(self, path, library, times=None) -> None:
        times = self.times if times is None else times
        with open(path, "w") as fh:
            fh.write("# schema: snapshots v1\n")
            fh.write("t,measure,phi,value\n")
            for t in times:
                for which in COMPONENTS:
                    for phi in library:
                        fh.write(f"{float(t)!r},{which},{phi.name},{self.pair(t, which, phi)!r}\n")


def pair_meanfield(solution: MeanFieldSolution, t: float, which: str, phi) -> float:
    return solution.pair(t, which, phi)


@dataclass
class _Setup:
    grid: SpatialGrid
    dt: float
    steps: int
    S0: np.ndarray
    I0: np.ndarray
    R0: np.ndarray
    mu_bar: np.ndarray
    d: np.ndarray
    c_hat: float
    M: np.ndarray
    lam0: np.ndarray
    lam: np.ndarray
    surv0: np.ndarray
    surv: np.ndarray
    mode: str
    history: int


def _setup(config: ExperimentConfig, grid: SpatialGrid | None, dt: float | None, mode: str | None) -> _Setup:
    grid = grid or SpatialGrid.uniform(config.grid, config.domain.dim)
    dt = float(config.dt if dt is None else dt)
    if dt <= 0:
        raise ConfigError("time step must be positive")
    steps = int(round(config.horizon / dt))
    if steps < 1 or abs(steps * dt - config.horizon) > 1e-9 * config.horizon:
        raise ConfigError(f"horizon {config.horizon} is not a multiple of dt={dt}")
    mode = mode or ("truncated" if config.truncation == "phi" else "raw")
    nodes = grid.nodes
    ic = config.initial
    S0 = ic.frac_S * ic.density_S.pdf(nodes)
    I0 = ic.frac_I * ic.density_I.pdf(nodes)
    R0 = ic.frac_R * ic.density_R.pdf(nodes)
    mu_bar = S0 + I0 + R0
    d = limit_denominator(config.kernel, mu_bar, grid, nodes)
    if np.min(d) <= 0:
        raise ConfigError("limiting denominator is not positive on the grid")
    c_hat = float(config.c_hat) if config.c_hat is not None else estimate_c_hat(config.kernel, mu_bar, grid).c_hat
    dpow = denominator_power(d, config.gamma, c_hat if mode == "truncated" else None)
    M = config.kernel.matrix(nodes, nodes) * (grid.weights / dpow)[None, :]
    lags = np.arange(steps + 1) * dt
    lam = np.asarray(config.infectivity_new.mean(lags), float)
    lam0 = np.asarray(config.infectivity_initial.mean(lags), float)
    surv = 1.0 - np.asarray(config.infectivity_new.cdf(lags), float)
    surv0 = 1.0 - np.asarray(config.infectivity_initial.cdf(lags), float)
    # history beyond which the mean infectivity vanishes (or is below the tail cut)
    lam_star = config.infectivity_new.lambda_star
    live = np.flatnonzero(lam > TAIL_CUT * max(lam_star, 1e-300))
    history = int(live[-1]) + 1 if live.size else 1
    lam = np.where(np.arange(steps + 1) < history, lam, 0.0)
    return _Setup(grid, dt, steps, S0, I0, R0, mu_bar, d, c_hat, M, lam0, lam, surv0, surv, mode, max(history, 1))


def _store_indices(steps: int, nodes: int, config: ExperimentConfig, dt: float, store_every: int | None) -> np.ndarray:
    if store_every is None:
        store_every = max(1, int(math.ceil((steps + 1) * nodes / 4e6)))
    idx = set(range(0, steps + 1, store_every)) | {steps}
    for t in config.snapshots:
        k = int(round(t / dt))
        if abs(k * dt - t) <= 1e-9 * max(1.0, t) and 0 <= k <= steps:
            idx.add(k)
    return np.array(sorted(idx))


def solve_stepping(config: ExperimentConfig, grid: SpatialGrid | None = None, dt: float | None = None,
                   mode: str | None = None, store_every: int | None = None) -> MeanFieldSolution:
    """Explicit marching with a left-endpoint Volterra rule and exponential S update."""
    st = _setup(config, grid, dt, mode)
    n_nodes = st.grid.size
    K = st.steps
    store = _store_indices(K, n_nodes, config, st.dt, store_every)
    is_store = np.zeros(K + 1, bool)
    is_store[store] = True
    out = {c: np.empty((store.size, n_nodes)) for c in ("S", "F", "I", "R", "Gamma", "cum")}

    dA = np.empty((K + 1, n_nodes))
    S = st.S0.copy()
    cum = np.zeros(n_nodes)
    lam_rev = st.lam[::-1].copy()  # lam_rev[K - l] = lam[l]
    surv_rev = st.surv[::-1].copy()
    cdf_rev = 1.0 - surv_rev
    slot = 0
    for k in range(K + 1):
        lo = max(0, k - st.history)
        # lags k - m for m in [lo, k): lam[k - lo] ... lam[1]
        F = st.lam0[k] * st.I0
        if k > lo:
            F = F + lam_rev[K - (k - lo):K] @ dA[lo:k]
        G = st.M @ F
        if is_store[k]:
            out["S"][slot] = S
            out["F"][slot] = F
            out["Gamma"][slot] = G
            out["cum"][slot] = cum
            if k:
                out["I"][slot] = st.I0 * st.surv0[k] + surv_rev[K - k:K] @ dA[:k]
                out["R"][slot] = st.R0 + st.I0 * (1.0 - st.surv0[k]) + cdf_rev[K - k:K] @ dA[:k]
            else:
                out["I"][slot] = st.I0 * st.surv0[0]
                out["R"][slot] = st.R0 + st.I0 * (1.0 - st.surv0[0])
            slot += 1
        if k == K:
            break
        dA[k] = S * -np.expm1(-G * st.dt)
        if np.any(dA[k] < 0) or np.any(S - dA[k] < 0):
            raise RuntimeError("negative density produced by the stepping scheme")
        S = S - dA[k]
        cum = cum + G * st.dt
    return _solution(config, st, store * st.dt, out)


def _solution(config, st: _Setup, times, out, **extra) -> MeanFieldSolution:
    return MeanFieldSolution(
        grid=st.grid, dt=st.dt, times=np.asarray(times, float), S=out["S"], F=out["F"], I=out["I"], R=out["R"],
        Gamma=out["Gamma"], cum_gamma=out["cum"], mu_bar=st.mu_bar, denominators=st.d, c_hat=st.c_hat,
        gamma=config.gamma, mode=st.mode, lambda_star=config.lambda_star, horizon=config.horizon, **extra,
    )


def _causal(kernel_lags: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """``out[k] = sum_{m<k} kernel_lags[k - m] * increments[m]`` along axis 0."""
    kz = kernel_lags.copy()
    kz[0] = 0.0
    n = increments.shape[0]
    return fftconvolve(kz[:, None], increments, axes=0)[:n]


def _picard_map(st: _Setup, S, F):
    # S from the exponential formula stays in [0, S0] for any guess; same fixed point as stepping
    G = F @ st.M.T
    cum = np.vstack([np.zeros((1, S.shape[1])), np.cumsum(G[:-1] * st.dt, axis=0)])
    S_new = st.S0[None, :] * np.exp(-cum)
    dA = S_new[:-1] * -np.expm1(-G[:-1] * st.dt)
    dA_full = np.vstack([dA, np.zeros((1, S.shape[1]))])
    F_new = st.lam0[:, None] * st.I0[None, :] + _causal(st.lam, dA_full)
    return S_new, F_new, G, dA_full


def solve_picard(config: ExperimentConfig, grid: SpatialGrid | None = None, dt: float | None = None,
                 tol: float = 1e-8, max_iter: int = 500, initial_guess=None, mode: str | None = None,
                 store_every: int = 1) -> MeanFieldSolution:
    """Successive substitution on the (S, F) trajectories until the sup-norm step is below ``tol``.

    ``initial_guess`` is ``"zero"`` (no force), ``"max"`` (``F = lambda* mu_bar``),
    a ``MeanFieldSolution`` stored at every step, or an ``(S, F)`` array pair.
    Contraction factors are ratios of successive steps in the weighted norm
    ``sup_t exp(-beta t) |.|`` with ``beta`` twice a Lipschitz bound of the map,
    recorded while both steps sit above the roundoff floor.
    """
    st = _setup(config, grid, dt, mode)
    K = st.steps
    n_nodes = st.grid.size
    times = np.arange(K + 1) * st.dt
    if initial_guess is None or (isinstance(initial_guess, str) and initial_guess == "zero"):
        S = np.tile(st.S0, (K + 1, 1))
        F = np.zeros((K + 1, n_nodes))
    elif isinstance(initial_guess, str) and initial_guess == "max":
        S = np.tile(st.S0, (K + 1, 1))
        F = np.tile(config.lambda_star * st.mu_bar, (K + 1, 1))
    elif isinstance(initial_guess, MeanFieldSolution):
        if initial_guess.S.shape[0] != K + 1:
            raise ValueError("initial guess must be stored at every time step")
        S, F = initial_guess.S.copy(), initial_guess.F.copy()
    else:
        S, F = (np.array(a, float) for a in initial_guess)

    m_norm = float(np.max(np.abs(st.M).sum(axis=1)))
    mu_sup = float(np.max(st.mu_bar))
    lam_star = config.lambda_star
    lip = max(1.0, lam_star) * (m_norm * lam_star * mu_sup + mu_sup * m_norm)
    beta = 2.0 * lip
    weight = np.exp(-beta * times)[:, None]

    residuals, weighted, factors = [], [], []
    for it in range(1, max_iter + 1):
        S_new, F_new, G, dA = _picard_map(st, S, F)
        res = max(float(np.max(np.abs(S_new - S))), float(np.max(np.abs(F_new - F))))
        wres = max(float(np.max(weight * np.abs(S_new - S))), float(np.max(weight * np.abs(F_new - F))))
        residuals.append(res)
        # below the FFT roundoff floor the ratio is noise, so stop recording it
        floor = 1e3 * np.finfo(float).eps * max(float(np.max(np.abs(S_new))), float(np.max(np.abs(F_new))), 1.0)
        if weighted and weighted[-1] > floor and wres > floor:
            factors.append(wres / weighted[-1])
        weighted.append(wres)
        S, F = S_new, F_new
        if res < tol:
            break
    else:
        raise NonConvergenceError(max_iter, residuals[-1])

    G = F @ st.M.T
    dA = np.vstack([S[:-1] * -np.expm1(-G[:-1] * st.dt), np.zeros((1, n_nodes))])
    I = st.I0[None, :] * st.surv0[:, None] + _causal(st.surv, dA)
    R = st.R0[None, :] + st.I0[None, :] * (1.0 - st.surv0[:, None]) + _causal(1.0 - st.surv, dA)
    cum = np.vstack([np.zeros((1, n_nodes)), np.cumsum(G[:-1] * st.dt, axis=0)])
    idx = np.arange(0, K + 1, store_every)
    if idx[-1] != K:
        idx = np.append(idx, K)
    out = {"S": S[idx], "F": F[idx], "I": I[idx], "R": R[idx], "Gamma": G[idx], "cum": cum[idx]}
    return _solution(config, st, times[idx], out, iterations=it, residuals=residuals, contraction=factors)


# --------------------------------------------------------------------------
# homogeneous reduction


@dataclass
class HomogeneousSeries:
    times: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    F: np.ndarray

    def at(self, t) -> dict[str, np.ndarray]:
        return {c: np.interp(t, self.times, getattr(self, c)) for c in ("S", "I", "R", "F")}


def _is_uniform(density) -> bool:
    return getattr(density, "family", None) == "uniform"


def homogeneous_oracle(config: ExperimentConfig, dt: float | None = None) -> HomogeneousSeries:
    """Scalar Volterra system for a constant kernel and uniform densities.

    Product-trapezoidal quadrature with an implicit (fixed-point) correction at
    the newest node; step ``dt`` defaults to a tenth of ``config.dt``.
    """
    if config.kernel.family != "constant":
        raise ConfigError("homogeneous oracle needs a constant kernel")
    if not all(_is_uniform(d) for d in config.initial.densities().values()):
        raise ConfigError("homogeneous oracle needs uniform initial densities")
    h = float(config.dt / 10 if dt is None else dt)
    n = int(round(config.horizon / h))
    t = np.arange(n + 1) * h
    kval = config.kernel.p[0]
    c = kval ** (1.0 - config.gamma)
    ic = config.initial
    lam = np.asarray(config.infectivity_new.mean(t), float)
    lam0 = np.asarray(config.infectivity_initial.mean(t), float)
    Fc = 1.0 - np.asarray(config.infectivity_new.cdf(t), float)
    F0c = 1.0 - np.asarray(config.infectivity_initial.cdf(t), float)

    S = np.empty(n + 1)
    F = np.empty(n + 1)
    j = np.empty(n + 1)  # infection rate c F S
    S[0] = ic.frac_S
    F[0] = lam0[0] * ic.frac_I
    j[0] = c * F[0] * S[0]
    for k in range(1, n + 1):
        # trapezoid weights over m = 0..k: 1/2 at both ends
        past = h * (0.5 * lam[k] * j[0] + (lam[k - 1:0:-1] @ j[1:k] if k > 1 else 0.0))
        Fk = F[k - 1]
        for _ in range(4):
            Sk = S[k - 1] * math.exp(-0.5 * c * h * (F[k - 1] + Fk))
            Fk = lam0[k] * ic.frac_I + past + 0.5 * h * lam[0] * c * Fk * Sk
        S[k] = S[k - 1] * math.exp(-0.5 * c * h * (F[k - 1] + Fk))
        F[k] = Fk
        j[k] = c * Fk * S[k]

    # trapezoidal convolutions of the infection rate with the duration survival / cdf
    def trap(kern):
        full = fftconvolve(kern, j)[: n + 1]
        return h * (full - 0.5 * kern * j[0] - 0.5 * kern[0] * j)

    I = ic.frac_I * F0c + trap(Fc)
    R = ic.frac_R + ic.frac_I * (1.0 - F0c) + trap(1.0 - Fc)
    I[0] = ic.frac_I * F0c[0]
    R[0] = ic.frac_R + ic.frac_I * (1.0 - F0c[0])
    return HomogeneousSeries(t, S, I, R, F)


def classical_sir(beta: float, rho: float, s0: float, i0: float, r0: float, times) -> HomogeneousSeries:
    """Reference solution of ``S' = -beta S I, I' = beta S I - rho I`` (tight tolerances)."""
    times = np.asarray(times, float)

    def rhs(_, y):
        s, i, _r = y
        return [-beta * s * i, beta * s * i - rho * i, rho * i]

    sol = solve_ivp(rhs, (times[0], times[-1]), [s0, i0, r0], t_eval=times, method="DOP853", rtol=1e-11, atol=1e-13)
    s, i, r = sol.y
    return HomogeneousSeries(times, s, i, r, beta * i)


def final_size(s0: float, r0: float, r_naught: float, tol: float = 1e-14) -> float:
    """Total ever-removed fraction ``r`` solving ``r = 1 - s0 exp(-R0 (r - r0))`` (largest root)."""
    r = 1.0
    for _ in range(10000):
        nxt = 1.0 - s0 * math.exp(-r_naught * (r - r0))
        if abs(nxt - r) < tol:
            return nxt
        r = nxt
    return r


# --------------------------------------------------------------------------
# a priori bounds


@dataclass
class AprioriReport:
    sup_S: float
    sup_mu_bar: float
    inf_denominator: float
    sup_F: float
    F_bound: float
    constant: float
    monotone_violations: int

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "S bounded by mu_bar": self.sup_S <= self.sup_mu_bar * (1 + 1e-12),
            "denominator bounded below": self.inf_denominator > 0,
            "force bounded": self.sup_F <= self.F_bound,
            "S nonincreasing from t=0": self.monotone_violations == 0,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def lines(self) -> list[str]:
        return [
            f"sup S = {self.sup_S:.6g} <= sup mu_bar = {self.sup_mu_bar:.6g}",
            f"inf d = {self.inf_denominator:.6g} > 0",
            f"sup F = {self.sup_F:.6g} <= {self.F_bound:.6g} (C = {self.constant:.6g})",
            f"pointwise S(t) <= S(0) violations: {self.monotone_violations}",
        ] + [f"{name}: {'pass' if ok else 'FAIL'}" for name, ok in self.checks.items()]


def check_apriori_bounds(solution: MeanFieldSolution, config: ExperimentConfig) -> AprioriReport:
    grid = solution.grid
    nodes = grid.nodes
    mu_sup = float(np.max(solution.mu_bar))
    inf_d = float(min(np.min(solution.denominators), solution.c_hat))
    kernel_mass = float(np.max(config.kernel.matrix(nodes, nodes) @ grid.weights))
    floor = inf_d if solution.mode == "raw" else 0.5 * solution.c_hat
    C = max(mu_sup, mu_sup * kernel_mass / floor ** solution.gamma)
    lam_star = config.lambda_star
    bound = lam_star * C * math.exp(lam_star * C * config.horizon)
    S0 = solution.S[0]
    violations = int(np.sum(solution.S > S0[None, :] * (1 + 1e-12) + 1e-300))
    return AprioriReport(
        sup_S=float(np.max(solution.S)),
        sup_mu_bar=mu_sup,
        inf_denominator=inf_d,
        sup_F=float(np.max(solution.F)),
        F_bound=bound,
        constant=C,
        monotone_violations=violations,
    )
