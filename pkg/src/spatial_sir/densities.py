"""Probability densities on the unit box ``[0, 1]^d``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import ndtr


class DensityError(ValueError):
    pass


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, dim)
    return x


@dataclass(frozen=True)
class UniformDensity:
    dim: int = 2
    family: str = field(default="uniform", init=False)

    def pdf(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        return np.ones(x.shape[0])

    @property
    def sup(self) -> float:
        return 1.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.dim))

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family}


@dataclass(frozen=True)
class GaussianMixtureDensity:
    """Mixture of isotropic Gaussians, each truncated to the box and renormalised."""

    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    sigmas: tuple[float, ...]
    dim: int = 2
    family: str = field(default="gaussian_mixture", init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float).reshape(len(w), -1)
        s = np.asarray(self.sigmas, dtype=float)
        if m.shape[1] != self.dim or s.shape != w.shape:
            raise DensityError("gaussian_mixture: weights, means and sigmas disagree in shape")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise DensityError("gaussian_mixture: weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise DensityError("gaussian_mixture: sigmas must be positive")
        # per-component mass inside the box
        mass = np.prod(ndtr((1.0 - m) / s[:, None]) - ndtr(-m / s[:, None]), axis=1)
        object.__setattr__(self, "_w", w)
        object.__setattr__(self, "_m", m)
        object.__setattr__(self, "_s", s)
        object.__setattr__(self, "_mass", mass)

    def pdf(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        out = np.zeros(x.shape[0])
        for w, m, s, z in zip(self._w, self._m, self._s, self._mass):
            r2 = np.sum((x - m) ** 2, axis=1)
            out += w * np.exp(-0.5 * r2 / s**2) / (z * (2 * np.pi * s**2) ** (self.dim / 2))
        return out

    @property
    def sup(self) -> float:
        return float(np.sum(self._w / (self._mass * (2 * np.pi * self._s**2) ** (self.dim / 2))))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _rejection_sample(self, n, rng)

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "weights": [float(v) for v in self.weights],
            "means": [[float(c) for c in m] for m in self.means],
            "sigmas": [float(v) for v in self.sigmas],
        }


@dataclass(frozen=True)
class PiecewiseConstantDensity:
    """Density constant on the cells of a regular grid; ``values`` are relative weights."""

    values: tuple
    dim: int = 2
    family: str = field(default="piecewise_constant", init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != self.dim:
            raise DensityError("piecewise_constant: values must be a %d-dimensional table" % self.dim)
        if np.any(v < 0) or v.sum() <= 0:
            raise DensityError("piecewise_constant: values must be nonnegative with positive total")
        object.__setattr__(self, "_table", v / v.mean())

    def pdf(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        shape = np.array(self._table.shape)
        idx = np.minimum((x * shape).astype(int), shape - 1)
        idx = np.maximum(idx, 0)
        return self._table[tuple(idx.T)]

    @property
    def sup(self) -> float:
        return float(self._table.max())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _rejection_sample(self, n, rng)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "values": np.asarray(self.values, dtype=float).tolist()}


def _rejection_sample(density, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from uniform proposals against ``density.sup``."""
    bound = density.sup
    out = np.empty((0, density.dim))
    while out.shape[0] < n:
        need = n - out.shape[0]
        batch = max(64, int(1.2 * need * bound) + 16)
        x = rng.random((batch, density.dim))
        keep = rng.random(batch) * bound < density.pdf(x)
        out = np.concatenate([out, x[keep]])
    return out[:n]


def density_from_dict(spec: dict, dim: int):
    spec = dict(spec)
    family = spec.pop("family", None)
    try:
        if family == "uniform":
            _no_extra(spec, family)
            return UniformDensity(dim)
        if family == "gaussian_mixture":
            d = GaussianMixtureDensity(
                weights=tuple(spec.pop("weights")),
                means=tuple(tuple(m) for m in spec.pop("means")),
                sigmas=tuple(spec.pop("sigmas")),
                dim=dim,
            )
            _no_extra(spec, family)
            return d
        if family == "piecewise_constant":
            d = PiecewiseConstantDensity(values=_freeze(spec.pop("values")), dim=dim)
            _no_extra(spec, family)
            return d
    except KeyError as exc:
        raise DensityError(f"{family}: missing key {exc.args[0]!r}") from None
    raise DensityError(f"unknown density family {family!r}")


def _freeze(v):
    if isinstance(v, (list, tuple)):
        return tuple(_freeze(x) for x in v)
    return float(v)


def _no_extra(spec: dict, family: str) -> None:
    if spec:
        raise DensityError(f"{family}: unknown keys {sorted(spec)}")
