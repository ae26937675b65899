"""Random infectivity trajectories and their deterministic summaries.

A trajectory is stored as right-continuous linear pieces: piece ``k`` covers
``[starts[k], starts[k+1])`` (the last one ends at ``eta``) and equals
``values[k] + slopes[k] * (t - starts[k])`` there. Outside ``[0, eta)`` the
infectivity is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import integrate


class InfectivityError(ValueError):
    pass


@dataclass(frozen=True)
class InfectivityTrajectory:
    starts: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    eta: float

    def __call__(self, t):
        return evaluate(self, t)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.append(self.starts, self.eta)


def evaluate(traj: InfectivityTrajectory, t):
    """Infectivity ``t`` time units after infection (vectorised in ``t``)."""
    t = np.asarray(t, dtype=float)
    k = np.searchsorted(traj.starts, t, side="right") - 1
    k = np.clip(k, 0, len(traj.starts) - 1)
    out = traj.values[k] + traj.slopes[k] * (t - traj.starts[k])
    out = np.where((t >= 0) & (t < traj.eta), out, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class InfectivityModel:
    """Law of one individual's infectivity path.

    Families and parameters::

        markov          a, rho         level a on [0, eta), eta ~ Exp(rho)
        fixed_duration  a, h           level a on [0, h)
        hump            a, p, h_min, h_max
                                       rises linearly to a at p, falls to 0 at eta,
                                       eta ~ Uniform[h_min, h_max] (p < h_min)
        tabulated       duration_edges, duration_weights, level_values, level_probs
                                       eta from a histogram law; [0, eta) split into
                                       len(level_probs) equal pieces, piece k has a
                                       level drawn from row k of level_probs
    """

    family: str
    params: dict

    def __post_init__(self):
        problems = _check_params(self.family, self.params)
        if problems:
            raise InfectivityError("; ".join(problems))

    def __hash__(self):
        return hash((self.family, repr(sorted(self.params.items()))))

    @property
    def lambda_star(self) -> float:
        p = self.params
        if self.family == "tabulated":
            return float(max(p["level_values"]))
        return float(p["a"])

    def sample(self, rng: np.random.Generator) -> InfectivityTrajectory:
        return sample_trajectory(self, rng)

    def mean(self, t):
        return mean_lambda(self, t)

    def cdf(self, t):
        return duration_cdf(self, t)

    def survival(self, t):
        return 1.0 - duration_cdf(self, t)

    def max_duration(self) -> float:
        """Supremum of the duration law's support (inf for markov)."""
        p = self.params
        if self.family == "markov":
            return np.inf
        if self.family == "fixed_duration":
            return float(p["h"])
        if self.family == "hump":
            return float(p["h_max"])
        return float(p["duration_edges"][-1])

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, **self.params}


def model_from_dict(spec: dict) -> InfectivityModel:
    spec = dict(spec)
    family = spec.pop("family", None)
    return InfectivityModel(family, spec)


_REQUIRED = {
    "markov": ("a", "rho"),
    "fixed_duration": ("a", "h"),
    "hump": ("a", "p", "h_min", "h_max"),
    "tabulated": ("duration_edges", "duration_weights", "level_values", "level_probs"),
}


def _check_params(family: str, p: dict) -> list[str]:
    if family not in _REQUIRED:
        return [f"unknown infectivity family {family!r}"]
    need = _REQUIRED[family]
    missing = [k for k in need if k not in p]
    extra = sorted(set(p) - set(need))
    out = []
    if missing:
        out.append(f"{family}: missing keys {missing}")
    if extra:
        out.append(f"{family}: unknown keys {extra}")
    if out:
        return out
    if family == "tabulated":
        edges = np.asarray(p["duration_edges"], float)
        w = np.asarray(p["duration_weights"], float)
        lv = np.asarray(p["level_values"], float)
        lp = np.asarray(p["level_probs"], float)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
            out.append("tabulated: duration_edges must be increasing and nonnegative")
        elif w.shape != (len(edges) - 1,) or np.any(w < 0) or not np.isclose(w.sum(), 1, atol=1e-12):
            out.append("tabulated: duration_weights must be a probability vector, one per bin")
        if lv.ndim != 1 or np.any(lv <= 0):
            out.append("tabulated: level_values must be positive")
        elif lp.ndim != 2 or lp.shape[1] != len(lv) or np.any(lp < 0) or not np.allclose(lp.sum(axis=1), 1, atol=1e-12):
            out.append("tabulated: level_probs must have one probability row per piece over level_values")
        return out
    a = float(p["a"])
    if a < 0:
        out.append(f"{family}: a must be nonnegative")
    if family == "markov" and float(p["rho"]) <= 0:
        out.append("markov: rho must be positive")
    if family == "fixed_duration" and float(p["h"]) <= 0:
        out.append("fixed_duration: h must be positive")
    if family == "hump":
        if not 0 < float(p["p"]) < float(p["h_min"]) <= float(p["h_max"]):
            out.append("hump: need 0 < p < h_min <= h_max")
    return out


def sample_trajectory(model: InfectivityModel, rng: np.random.Generator) -> InfectivityTrajectory:
    p = model.params
    fam = model.family
    if fam == "markov":
        eta = rng.exponential(1.0 / p["rho"])
        return InfectivityTrajectory(np.zeros(1), np.array([float(p["a"])]), np.zeros(1), float(eta))
    if fam == "fixed_duration":
        return InfectivityTrajectory(np.zeros(1), np.array([float(p["a"])]), np.zeros(1), float(p["h"]))
    if fam == "hump":
        a, peak = float(p["a"]), float(p["p"])
        eta = float(p["h_min"]) if p["h_min"] == p["h_max"] else rng.uniform(p["h_min"], p["h_max"])
        return InfectivityTrajectory(
            np.array([0.0, peak]), np.array([0.0, a]), np.array([a / peak, -a / (eta - peak)]), eta
        )
    # tabulated
    edges = np.asarray(p["duration_edges"], float)
    b = rng.choice(len(edges) - 1, p=np.asarray(p["duration_weights"], float))
    eta = rng.uniform(edges[b], edges[b + 1])
    lv = np.asarray(p["level_values"], float)
    rows = np.asarray(p["level_probs"], float)
    levels = np.array([lv[rng.choice(len(lv), p=row)] for row in rows])
    n = len(rows)
    return InfectivityTrajectory(np.arange(n) * (eta / n), levels, np.zeros(n), float(eta))


def duration_cdf(model: InfectivityModel, t):
    """P(eta <= t)."""
    t = np.asarray(t, dtype=float)
    p = model.params
    fam = model.family
    if fam == "markov":
        out = np.where(t >= 0, -np.expm1(-p["rho"] * np.maximum(t, 0)), 0.0)
    elif fam == "fixed_duration":
        out = (t >= p["h"]).astype(float)
    elif fam == "hump":
        lo, hi = float(p["h_min"]), float(p["h_max"])
        out = (t >= lo).astype(float) if lo == hi else np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    else:
        edges = np.asarray(p["duration_edges"], float)
        cum = np.concatenate([[0.0], np.cumsum(p["duration_weights"])])
        out = np.interp(t, edges, cum, left=0.0, right=1.0)
    return out if out.ndim else float(out)


def mean_lambda(model: InfectivityModel, t):
    """Expected infectivity ``t`` time units after infection."""
    t = np.asarray(t, dtype=float)
    p = model.params
    fam = model.family
    if fam == "markov":
        out = p["a"] * (1.0 - duration_cdf(model, t))
    elif fam == "fixed_duration":
        out = p["a"] * (t < p["h"])
    elif fam == "hump":
        out = _hump_mean(float(p["a"]), float(p["p"]), float(p["h_min"]), float(p["h_max"]), t)
    else:
        out = np.vectorize(lambda s: _tabulated_mean(p, s), otypes=[float])(t)
    out = np.where(t < 0, 0.0, out)
    return out if out.ndim else float(out)


def _hump_mean(a, peak, lo, hi, t):
    t = np.asarray(t, dtype=float)
    rising = a * t / peak
    if lo == hi:
        falling = np.where(t < lo, a * (lo - t) / (lo - peak), 0.0)
    else:
        # E[a (h - t)/(h - p) 1{h > t}], h ~ U[lo, hi]; antiderivative h - (t - p) log(h - p)
        start = np.clip(t, lo, hi)
        tp = t - peak
        with np.errstate(divide="ignore", invalid="ignore"):
            integral = (hi - start) - tp * (np.log(hi - peak) - np.log(start - peak))
        falling = np.where(t < hi, a * integral / (hi - lo), 0.0)
    return np.where(t < peak, rising, falling)


def _tabulated_mean(p: dict, t: float) -> float:
    edges = np.asarray(p["duration_edges"], float)
    weights = np.asarray(p["duration_weights"], float)
    piece_means = np.asarray(p["level_probs"], float) @ np.asarray(p["level_values"], float)
    n = len(piece_means)
    if t < 0:
        return 0.0
    if t == 0:
        return float(piece_means[0] * (1.0 - duration_cdf(InfectivityModel("tabulated", p), 0.0)))
    total = 0.0
    for b in range(len(weights)):
        lo, hi = max(edges[b], t), edges[b + 1]
        if weights[b] == 0 or hi <= lo:
            continue
        # piece index floor(n t / h) is piecewise constant in h; jumps at h = n t / k
        pts = [n * t / k for k in range(1, n + 1) if lo < n * t / k < hi]

        def integrand(h):
            return piece_means[min(int(n * t / h), n - 1)]

        val, _ = integrate.quad(integrand, lo, hi, points=pts or None, epsabs=1e-10, epsrel=1e-10, limit=200)
        total += weights[b] / (edges[b + 1] - edges[b]) * val
    return float(total)
