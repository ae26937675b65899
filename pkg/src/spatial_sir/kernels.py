"""Interaction kernels and kernel-weighted population denominators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numba as nb
import numpy as np

from .grid import SpatialGrid, lattice


class KernelError(ValueError):
    pass


class DomainError(ValueError):
    pass


CONSTANT, TOP_HAT, GAUSSIAN_BUMP, EXP_DECAY = 0, 1, 2, 3
_CODES = {"constant": CONSTANT, "top_hat": TOP_HAT, "gaussian_bump": GAUSSIAN_BUMP, "exp_decay": EXP_DECAY}
_PARAMS = {
    "constant": ("k",),
    "top_hat": ("radius", "k"),
    "gaussian_bump": ("sigma", "floor"),
    "exp_decay": ("sigma", "floor"),
}


@nb.njit(cache=True, inline="always")
def _kernel_r2(code, p0, p1, r2):
    if code == CONSTANT:
        return p0
    if code == TOP_HAT:
        return p1 if r2 <= p0 * p0 else 0.0
    if code == GAUSSIAN_BUMP:
        return p1 + (1.0 - p1) * np.exp(-0.5 * r2 / (p0 * p0))
    return p1 + (1.0 - p1) * np.exp(-np.sqrt(r2) / p0)


@nb.njit(cache=True, inline="always")
def _sqdist(x, i, y, j):
    s = 0.0
    for k in range(x.shape[1]):
        d = x[i, k] - y[j, k]
        s += d * d
    return s


@nb.njit(cache=True, parallel=True)
def _matrix(code, p0, p1, x, y):
    out = np.empty((x.shape[0], y.shape[0]))
    for i in nb.prange(x.shape[0]):
        for j in range(y.shape[0]):
            out[i, j] = _kernel_r2(code, p0, p1, _sqdist(x, i, y, j))
    return out


@nb.njit(cache=True, parallel=True)
def _weighted_sums(code, p0, p1, sources, weights, targets):
    # out[t] = sum_s weights[s] K(sources[s], targets[t]), fixed summation order per target
    out = np.empty(targets.shape[0])
    for t in nb.prange(targets.shape[0]):
        acc = 0.0
        for s in range(sources.shape[0]):
            acc += weights[s] * _kernel_r2(code, p0, p1, _sqdist(sources, s, targets, t))
        out[t] = acc
    return out


@dataclass(frozen=True)
class Kernel:
    """Symmetric isotropic kernel ``K(x, y) = k(|x - y|)`` with values in [0, 1].

    ``gaussian_bump`` is ``floor + (1 - floor) exp(-r^2 / 2 sigma^2)`` and
    ``exp_decay`` is ``floor + (1 - floor) exp(-r / sigma)``.
    """

    family: str
    params: dict
    allow_discontinuous: bool = False
    code: int = field(init=False, repr=False, compare=False)
    p: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in _CODES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        names = _PARAMS[self.family]
        missing = [k for k in names if k not in self.params]
        extra = sorted(set(self.params) - set(names))
        if missing or extra:
            raise KernelError(f"{self.family}: missing {missing}, unknown {extra}")
        vals = [float(self.params[k]) for k in names]
        if self.family == "constant" and not 0 < vals[0] <= 1:
            raise KernelError("constant: k must lie in (0, 1]")
        if self.family == "top_hat" and not (vals[0] > 0 and 0 < vals[1] <= 1):
            raise KernelError("top_hat: need radius > 0 and 0 < k <= 1")
        if self.family in ("gaussian_bump", "exp_decay") and not (vals[0] > 0 and 0 <= vals[1] <= 1):
            raise KernelError(f"{self.family}: need sigma > 0 and 0 <= floor <= 1")
        object.__setattr__(self, "code", _CODES[self.family])
        object.__setattr__(self, "p", (vals + [0.0])[:2])

    def __hash__(self):
        return hash((self.family, tuple(self.p), self.allow_discontinuous))

    @property
    def continuous(self) -> bool:
        return self.family != "top_hat"

    def __call__(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        r2 = np.sum((x - y) ** 2, axis=-1)
        return self.profile(np.sqrt(r2))

    def profile(self, r):
        """Kernel value as a function of distance."""
        r = np.asarray(r, float)
        p0, p1 = self.p
        if self.code == CONSTANT:
            out = np.full(r.shape, p0)
        elif self.code == TOP_HAT:
            out = np.where(r * r <= p0 * p0, p1, 0.0)
        elif self.code == GAUSSIAN_BUMP:
            out = p1 + (1 - p1) * np.exp(-0.5 * r * r / (p0 * p0))
        else:
            out = p1 + (1 - p1) * np.exp(-r / p0)
        return out if out.ndim else float(out)

    def matrix(self, x, y) -> np.ndarray:
        return _matrix(self.code, self.p[0], self.p[1], _points(x), _points(y))

    def to_dict(self) -> dict[str, Any]:
        out = {"family": self.family, **self.params}
        if self.allow_discontinuous:
            out["allow_discontinuous"] = True
        return out


def kernel_from_dict(spec: dict) -> Kernel:
    spec = dict(spec)
    family = spec.pop("family", None)
    allow = bool(spec.pop("allow_discontinuous", False))
    return Kernel(family, spec, allow)


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return np.ascontiguousarray(x)


def _check_in_box(x: np.ndarray) -> None:
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("point outside the domain [0, 1]^d")


def kernel_eval(kernel: Kernel, x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    _check_in_box(x)
    _check_in_box(y)
    return float(kernel(x, y))


def empirical_denominator(kernel: Kernel, positions, y) -> np.ndarray | float:
    """``(1/N) sum_l K(X^l, y)`` for one or many targets ``y``."""
    positions = _points(positions)
    if positions.shape[0] == 0:
        raise ValueError("empty population")
    scalar = np.asarray(y).ndim == 1
    # sum first, divide once: a constant kernel then gives exactly k
    ones = np.ones(positions.shape[0])
    out = _weighted_sums(kernel.code, kernel.p[0], kernel.p[1], positions, ones, _points(y)) / positions.shape[0]
    return float(out[0]) if scalar else out


def limit_denominator(kernel: Kernel, density, grid: SpatialGrid, y) -> np.ndarray | float:
    """Midpoint quadrature of ``int_D K(z, y) mu(z) dz``.

    ``density`` is a density object (with ``pdf``), a callable, or values at the grid nodes.
    """
    nodes = grid.nodes
    if hasattr(density, "pdf"):
        mu = density.pdf(nodes)
    elif callable(density):
        mu = density(nodes)
    else:
        mu = np.asarray(density, float)
    scalar = np.asarray(y).ndim == 1
    out = _weighted_sums(kernel.code, kernel.p[0], kernel.p[1], nodes, grid.weights * mu, _points(y))
    return float(out[0]) if scalar else out


def phi_trunc(x, c: float, gamma: float):
    """``max(x, c/2) ** gamma``."""
    out = np.maximum(np.asarray(x, float), 0.5 * c) ** gamma
    return out if out.ndim else float(out)


def denominator_power(denoms, gamma: float, c_hat: float | None = None):
    """Raw ``d ** gamma``, or the truncated ``phi_trunc(d)`` when ``c_hat`` is given."""
    if c_hat is None:
        return np.asarray(denoms, float) ** gamma
    return phi_trunc(denoms, c_hat, gamma)


@dataclass(frozen=True)
class DenominatorField:
    points: np.ndarray
    values: np.ndarray
    c_hat: float

    def to_csv(self, path) -> None:
        d = self.points.shape[1]
        header = "# schema: denominator v1\n" + ",".join([f"y{k + 1}" for k in range(d)] + ["d"])
        rows = np.column_stack([self.points, self.values])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")


def estimate_c_hat(kernel: Kernel, density, grid: SpatialGrid, probes_per_axis: int = 21) -> DenominatorField:
    """Grid minimisation of the limiting denominator with one local refinement."""
    dim = grid.dim
    pts = lattice(probes_per_axis, dim)
    vals = limit_denominator(kernel, density, grid, pts)
    best = pts[np.argmin(vals)]
    h = 1.0 / (probes_per_axis - 1)
    fine = lattice(probes_per_axis, dim, np.clip(best - h, 0, 1), np.clip(best + h, 0, 1))
    fine_vals = limit_denominator(kernel, density, grid, fine)
    allp = np.concatenate([pts, fine])
    allv = np.concatenate([vals, fine_vals])
    return DenominatorField(allp, allv, float(allv.min()))


def omega_n_holds(kernel: Kernel, positions, c_hat: float, probe_grid, individual_denominators=None) -> bool:
    """Whether the empirical denominator stays above ``c_hat / 2`` on the probe set.

    When the denominators at the individuals' own positions are supplied they
    are added to the probe set, so a ``True`` answer guarantees the raw and
    truncated rates agree for every individual.
    """
    d = empirical_denominator(kernel, positions, _points(probe_grid))
    ok = bool(np.min(d) > 0.5 * c_hat)
    if individual_denominators is not None:
        ok = ok and bool(np.min(individual_denominators) > 0.5 * c_hat)
    return ok
