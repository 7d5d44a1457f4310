"""Piecewise-constant subspaces of grid functions built from contiguous blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid


@dataclass(frozen=True)
class ProjectionSpec:
    """Partition of the nodes into contiguous blocks.

    For d = 2 the blocks are tensor products of contiguous runs along each axis, and
    ``blocks_per_axis`` counts blocks per axis.  The basis e_i = |block_i|^(-1/2) chi_i
    is orthonormal for the quadrature pairing.
    """

    grid: Grid
    blocks_per_axis: int
    labels: np.ndarray = field(init=False, repr=False, compare=False)
    sizes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n, b = self.grid.n, self.blocks_per_axis
        if not 1 <= b <= n:
            raise ValueError(f"blocks_per_axis must be in [1, {n}], got {b}")
        axis = (np.arange(n) * b) // n
        if self.grid.dim == 1:
            labels = axis
        else:
            labels = (axis[:, None] * b + axis[None, :]).ravel()
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        sizes = np.bincount(labels)
        sizes.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sizes", sizes)

    @property
    def count(self) -> int:
        return int(self.sizes.size)

    def measures(self) -> np.ndarray:
        return self.sizes * self.grid.weight

    def basis(self) -> np.ndarray:
        """Nodal values of the orthonormal basis, one column per block."""
        E = np.zeros((self.grid.node_count, self.count))
        E[np.arange(self.grid.node_count), self.labels] = 1.0
        return E / np.sqrt(self.measures())[None, :]

    def averages(self, x) -> np.ndarray:
        return np.bincount(self.labels, weights=np.asarray(x, dtype=float)) / self.sizes

    def expand(self, coeff_or_avg) -> np.ndarray:
        return np.asarray(coeff_or_avg, dtype=float)[self.labels]

    def project(self, x) -> np.ndarray:
        """Orthogonal projection onto the piecewise-constant subspace."""
        return self.expand(self.averages(x))

    def orthonormality_error(self) -> float:
        E = self.basis()
        G = self.grid.weight * (E.T @ E)
        return float(np.abs(G - np.eye(self.count)).max())
