"""Test functions, pairings and sup-in-time distances between trajectories."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

COMPONENTS = ("S", "F", "I", "R")


@dataclass(frozen=True)
class TestFunction:
    """A bounded continuous function on the unit box with known sup and Lipschitz constants."""

    __test__ = False  # keep pytest from collecting this class

    name: str
    family: str
    params: dict = field(hash=False)
    sup: float
    lipschitz: float
    scale: float = 1.0

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        p = self.params
        if self.family == "constant":
            out = np.ones(x.shape[0])
        elif self.family == "monomial":
            out = np.prod(x ** np.asarray(p["alpha"], float), axis=1)
        elif self.family == "bump":
            r2 = np.sum((x - np.asarray(p["center"])) ** 2, axis=1)
            out = np.exp(-0.5 * r2 / p["width"] ** 2)
        elif self.family == "hat":
            r = np.sqrt(np.sum((x - np.asarray(p["center"])) ** 2, axis=1))
            out = np.maximum(0.0, 1.0 - r / p["radius"])
        else:
            raise ValueError(f"unknown test-function family {self.family!r}")
        return self.scale * out

    def scaled(self, factor: float) -> "TestFunction":
        return TestFunction(f"{factor:g}*{self.name}", self.family, self.params, abs(factor) * self.sup,
                            abs(factor) * self.lipschitz, self.scale * factor)


def constant() -> TestFunction:
    return TestFunction("one", "constant", {}, 1.0, 0.0)


def monomial(alpha) -> TestFunction:
    alpha = tuple(int(a) for a in alpha)
    deg = sum(alpha)
    name = "x" + "".join(str(a) for a in alpha)
    # on [0,1]^d: sup is 1, gradient components alpha_k x^(alpha - e_k) are at most alpha_k
    return TestFunction(name, "monomial", {"alpha": alpha}, 1.0, math.sqrt(sum(a * a for a in alpha)) if deg else 0.0)


def bump(center, width: float) -> TestFunction:
    c = tuple(float(v) for v in center)
    name = "bump(" + ",".join(f"{v:g}" for v in c) + f";{width:g})"
    # max slope of exp(-r^2 / 2w^2) is exp(-1/2) / w at r = w
    return TestFunction(name, "bump", {"center": c, "width": float(width)}, 1.0, math.exp(-0.5) / width)


def hat(center, radius: float) -> TestFunction:
    c = tuple(float(v) for v in center)
    name = "hat(" + ",".join(f"{v:g}" for v in c) + f";{radius:g})"
    return TestFunction(name, "hat", {"center": c, "radius": float(radius)}, 1.0, 1.0 / radius)


def default_library(dim: int = 2) -> list[TestFunction]:
    """Constant, all monomials of degree 1 and 2, bumps and hats at two scales."""
    lib = [constant()]
    for deg in (1, 2):
        for combo in itertools.combinations_with_replacement(range(dim), deg):
            alpha = [0] * dim
            for k in combo:
                alpha[k] += 1
            lib.append(monomial(alpha))
    mid = (0.5,) * dim
    lo = (0.25,) * dim
    hi = (0.75,) * dim
    lib += [bump(mid, 0.25), bump(lo, 0.1), bump(hi, 0.1)]
    lib += [hat(mid, 0.5), hat(lo, 0.2), hat(hi, 0.2)]
    return lib


def library_by_names(names, dim: int = 2) -> list[TestFunction]:
    lib = {phi.name: phi for phi in default_library(dim)}
    unknown = [n for n in names if n not in lib]
    if unknown:
        raise ValueError(f"unknown test functions {unknown}; available: {sorted(lib)}")
    return [lib[n] for n in names]


@dataclass
class TrajectoryDistance:
    """``errors[(phi, component)]`` is the sup over compared times of the pairing gap."""

    errors: dict
    times: np.ndarray
    interpolated: bool = False

    @property
    def aggregate(self) -> float:
        return max(self.errors.values())

    def component(self, which: str) -> float:
        return max(v for (_, c), v in self.errors.items() if c == which)

    def rows(self):
        agg = self.aggregate
        for (phi, comp), err in self.errors.items():
            yield phi, comp, err, agg


def trajectory_distance(emp, ref, library, components=COMPONENTS, times=None) -> TrajectoryDistance:
    """Per test function and component, the largest ``|(emp, phi) - (ref, phi)|`` over snapshot times.

    Both arguments only need ``times`` and ``pair(t, which, phi)``; times
    default to the snapshot times of ``emp``. Off-node times of a mean-field
    reference are interpolated linearly and flagged.
    """
    library = list(library)
    if not library:
        raise ValueError("empty test-function library")
    times = np.asarray(emp.times if times is None else times, float)
    interpolated = False
    errors = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for phi in library:
            for which in components:
                gaps = [abs(emp.pair(t, which, phi) - ref.pair(t, which, phi)) for t in times]
                errors[(phi.name, which)] = float(max(gaps))
        interpolated = any("interpolating" in str(w.message) for w in caught)
    return TrajectoryDistance(errors, times, interpolated)
