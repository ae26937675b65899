from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpatialGrid:
    """Cell-midpoint quadrature on the unit box."""

    shape: tuple[int, ...]

    def __post_init__(self):
        if any(n < 1 for n in self.shape):
            raise ValueError("grid needs at least one node per axis")

    @classmethod
    def uniform(cls, nodes_per_axis: int, dim: int = 2) -> "SpatialGrid":
        return cls((int(nodes_per_axis),) * dim)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nodes(self) -> np.ndarray:
        axes = [(np.arange(n) + 0.5) / n for n in self.shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def lattice(n: int, dim: int = 2, lo=0.0, hi=1.0) -> np.ndarray:
    """Closed lattice of ``n`` points per axis on ``[lo, hi]^dim`` (corners included)."""
    lo = np.broadcast_to(np.asarray(lo, float), (dim,))
    hi = np.broadcast_to(np.asarray(hi, float), (dim,))
    axes = [np.linspace(lo[k], hi[k], n) for k in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
