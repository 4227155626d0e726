"""Finite Fourier index lattices on the torus and coefficient/value conversion.

A lattice is a finite set ``N`` of integer multi-indices inside a box
``lo_k <= n_k <= hi_k``.  Coefficient vectors are plain complex numpy arrays
aligned with ``IndexLattice.indices`` (row-major, ascending in every
dimension, last dimension fastest).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class IndexLattice:
    dims: int
    bounds: tuple[tuple[int, int], ...]
    include_zero: bool = True
    _indices: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dims < 1:
            raise LatticeError(f"dims must be >= 1, got {self.dims}")
        bounds = tuple((int(lo), int(hi)) for lo, hi in self.bounds)
        if len(bounds) != self.dims:
            raise LatticeError(f"expected {self.dims} bound pairs, got {len(bounds)}")
        for k, (lo, hi) in enumerate(bounds):
            if lo > hi:
                raise LatticeError(f"dimension {k}: lower bound {lo} exceeds upper bound {hi}")
            if not lo <= 0 <= hi:
                raise LatticeError(f"dimension {k}: bounds ({lo}, {hi}) must straddle 0")
        object.__setattr__(self, "bounds", bounds)
        ranges = [range(lo, hi + 1) for lo, hi in bounds]
        idx = np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, self.dims)
        if not self.include_zero:
            idx = idx[np.any(idx != 0, axis=1)]
        if idx.shape[0] == 0:
            raise LatticeError("lattice is empty")
        idx.setflags(write=False)
        object.__setattr__(self, "_indices", idx)

    @property
    def indices(self) -> np.ndarray:
        """(|N|, d) integer array of multi-indices in flat order."""
        return self._indices

    @property
    def size(self) -> int:
        return self._indices.shape[0]

    def __len__(self):
        return self.size

    @cached_property
    def _box_shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self.bounds)

    @cached_property
    def _lo(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds], dtype=np.int64)

    @cached_property
    def _hi(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds], dtype=np.int64)

    @cached_property
    def _table(self) -> np.ndarray:
        # dense box -> flat position, -1 for excluded multi-indices
        table = -np.ones(self._box_shape, dtype=np.int64)
        table[tuple((self._indices - self._lo).T)] = np.arange(self.size)
        table.setflags(write=False)
        return table

    def positions(self, multi: np.ndarray) -> np.ndarray:
        """Flat positions of an (m, d) array of multi-indices; -1 where not in N."""
        multi = np.asarray(multi, dtype=np.int64).reshape(-1, self.dims)
        inside = np.all((multi >= self._lo) & (multi <= self._hi), axis=1)
        out = -np.ones(multi.shape[0], dtype=np.int64)
        if np.any(inside):
            out[inside] = self._table[tuple((multi[inside] - self._lo).T)]
        return out

    def position(self, n: Sequence[int]) -> int:
        pos = int(self.positions(np.asarray(n))[0])
        if pos < 0:
            raise LatticeError(f"multi-index {tuple(n)} is not in the lattice")
        return pos

    def multi_index(self, pos: int) -> tuple[int, ...]:
        if not 0 <= pos < self.size:
            raise LatticeError(f"flat position {pos} out of range [0, {self.size})")
        return tuple(int(v) for v in self._indices[pos])

    def __contains__(self, n) -> bool:
        return bool(self.positions(np.asarray(n))[0] >= 0)

    @cached_property
    def max_l1(self) -> int:
        return int(np.abs(self._indices).sum(axis=1).max())

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "bounds": [list(b) for b in self.bounds],
            "include_zero": self.include_zero,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IndexLattice":
        return cls(int(doc["dims"]), tuple(tuple(b) for b in doc["bounds"]), bool(doc["include_zero"]))


def build_lattice(dims: int, bounds, include_zero: bool = True) -> IndexLattice:
    """Build a box lattice.

    ``bounds`` is either one ``(lo, hi)`` pair used for every dimension, a
    single int ``b`` meaning ``(-b, b)``, or a sequence of ``dims`` pairs.
    """
    if isinstance(bounds, (int, np.integer)):
        bounds = [(-int(bounds), int(bounds))] * dims
    else:
        bounds = list(bounds)
        if len(bounds) == 2 and all(isinstance(b, (int, np.integer)) for b in bounds):
            bounds = [tuple(bounds)] * dims
    return IndexLattice(dims, tuple(tuple(b) for b in bounds), include_zero)


def reduce_to_torus(points: np.ndarray) -> np.ndarray:
    """Map points into [-pi, pi) componentwise."""
    return np.mod(np.asarray(points, dtype=float) + np.pi, TWO_PI) - np.pi


def _check_coeffs(coeffs, lattice: IndexLattice) -> np.ndarray:
    c = np.asarray(coeffs, dtype=complex)
    if c.shape != (lattice.size,):
        raise LatticeError(f"coefficient vector has shape {c.shape}, lattice expects ({lattice.size},)")
    if not np.all(np.isfinite(c)):
        raise LatticeError("coefficient vector has non-finite entries")
    return c


def _check_points(points, lattice: IndexLattice) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == lattice.dims else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != lattice.dims:
        raise LatticeError(f"points must have shape (m, {lattice.dims}), got {np.shape(points)}")
    return reduce_to_torus(x)


def fourier_features(lattice: IndexLattice, points) -> np.ndarray:
    """Matrix with entries exp(i n.x), shape (m points, |N|)."""
    x = _check_points(points, lattice)
    return np.exp(1j * (x @ lattice.indices.T.astype(float)))


def synthesize(coeffs, lattice: IndexLattice, points, chunk: int = 4096) -> np.ndarray:
    """Evaluate sum_n c_n exp(i n.x) at every point by direct summation."""
    c = _check_coeffs(coeffs, lattice)
    x = _check_points(points, lattice)
    out = np.empty(x.shape[0], dtype=complex)
    for start in range(0, x.shape[0], chunk):
        blk = x[start:start + chunk]
        out[start:start + chunk] = np.exp(1j * (blk @ lattice.indices.T.astype(float))) @ c
    return out


def grid_points(shape: Sequence[int]) -> list[np.ndarray]:
    """1-D uniform node arrays on [0, 2pi) for each dimension."""
    return [TWO_PI * np.arange(g) / g for g in shape]


def analyze(f_grid, lattice: IndexLattice) -> np.ndarray:
    """Discrete Fourier coefficients of samples on a uniform grid over [0, 2pi)^d.

    Exact for functions band-limited within the grid's Nyquist range.
    """
    f = np.asarray(f_grid, dtype=complex)
    if f.ndim != lattice.dims:
        raise LatticeError(f"grid has {f.ndim} dimensions, lattice has {lattice.dims}")
    for k, ((lo, hi), g) in enumerate(zip(lattice.bounds, f.shape)):
        need = 2 * max(abs(lo), hi) + 1
        if g < need:
            raise LatticeError(
                f"dimension {k}: grid of {g} points aliases lattice bounds ({lo}, {hi}); need >= {need}"
            )
    spec = np.fft.fftn(f) / f.size
    wrapped = np.mod(lattice.indices, np.array(f.shape))
    return spec[tuple(wrapped.T)]


def frequency_diagonal(lattice: IndexLattice, k: int) -> np.ndarray:
    """Diagonal of D_k, i.e. i*l_k for every l in flat order (``k`` is 1-based)."""
    if not 1 <= k <= lattice.dims:
        raise LatticeError(f"dimension index k={k} out of range [1, {lattice.dims}]")
    return 1j * lattice.indices[:, k - 1].astype(float)
