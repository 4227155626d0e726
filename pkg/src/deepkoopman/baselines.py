"""EDMD with a Fourier dictionary and kernel DMD with a Gaussian kernel on the embedded torus."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .analysis import SPECTRUM_HEADER, generator_spectrum
from .lattice import IndexLattice, fourier_features


class EDMDError(ArithmeticError):
    pass


class KDMDError(ArithmeticError):
    pass


@dataclass(eq=False)
class SnapshotPairs:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if self.inputs.shape != self.outputs.shape:
            raise ValueError(f"inputs {self.inputs.shape} and outputs {self.outputs.shape} differ in shape")
        if self.inputs.shape[0] < 1:
            raise ValueError("snapshot pairs must be nonempty")

    def __len__(self):
        return self.inputs.shape[0]


def window_pairs(states: np.ndarray, j: int, window_len: int) -> SnapshotPairs:
    """Pairs from window j-1 to window j: x_{s,(j-1)w+l} -> x_{s,jw+l} for l < w."""
    states = np.asarray(states, dtype=float)
    if j < 1 or (j + 1) * window_len > states.shape[1]:
        raise ValueError(f"window {j} does not fit series of length {states.shape[1]}")
    a = states[:, (j - 1) * window_len:j * window_len]
    b = states[:, j * window_len:(j + 1) * window_len]
    d = states.shape[2]
    return SnapshotPairs(a.reshape(-1, d), b.reshape(-1, d))


@dataclass
class EDMDResult:
    K: np.ndarray
    eigenvalues: np.ndarray
    rank: int
    rank_deficient: bool


def edmd(pairs: SnapshotPairs, lattice: IndexLattice, ridge: float = 1e-8) -> EDMDResult:
    """K minimizing |Psi0 K - Psi1|_F^2 + ridge |K|_F^2 over the Fourier dictionary."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if pairs.inputs.shape[1] != lattice.dims:
        raise ValueError(f"lattice has {lattice.dims} dims, snapshots have {pairs.inputs.shape[1]}")
    psi0 = fourier_features(lattice, pairs.inputs)
    psi1 = fourier_features(lattice, pairs.outputs)
    n = lattice.size
    gram = psi0.conj().T @ psi0
    rank = int(np.linalg.matrix_rank(gram, hermitian=True))
    if ridge == 0 and rank < n:
        raise EDMDError(f"normal matrix is singular (rank {rank} < {n}); use ridge > 0")
    gram[np.diag_indices(n)] += ridge
    K = np.linalg.solve(gram, psi0.conj().T @ psi1)
    return EDMDResult(K, generator_spectrum(K), rank, rank < n)


def torus_distance_sq(x, y) -> np.ndarray:
    """|e^{ix} - e^{iy}|^2 summed over coordinates, for all pairs of rows."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    diff = x[:, None, :] - y[None, :, :]
    return np.sum(2.0 - 2.0 * np.cos(diff), axis=2)


def gaussian_kernel(x, y, gamma: float = 0.1) -> np.ndarray:
    return np.exp(-gamma * torus_distance_sq(x, y))


def gram_matrix(x, gamma: float = 0.1) -> np.ndarray:
    g = gaussian_kernel(x, x, gamma)
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 1.0)
    return g


@dataclass
class KDMDResult:
    K: np.ndarray
    eigenvalues: np.ndarray
    pca_values: np.ndarray


def kdmd(pairs: SnapshotPairs, gamma: float = 0.1, rank: int | None = None,
         max_rank: int | None = None) -> KDMDResult:
    """Kernel EDMD in the span of the leading kernel principal vectors of the inputs.

    An explicit `rank` above the numerical rank of the Gram matrix raises KDMDError.
    With rank=None the rank is min(samples, numerical rank, max_rank).
    """
    if not gamma > 0:
        raise ValueError("kernel bandwidth must be positive")
    m = len(pairs)
    if rank is not None and not 1 <= rank <= m:
        raise ValueError(f"rank must be in [1, {m}], got {rank}")
    if max_rank is not None and max_rank < 1:
        raise ValueError(f"max_rank must be >= 1, got {max_rank}")
    g = gram_matrix(pairs.inputs, gamma)
    vals, vecs = np.linalg.eigh(g)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    top = vals[0]
    if vals[-1] < -1e-10 * top:
        raise KDMDError(f"Gram matrix is not positive semidefinite (min eigenvalue {vals[-1]:.3g})")
    numerical = int(np.sum(vals > 1e-10 * top))
    if rank is None:
        rank = min(m, numerical, m if max_rank is None else max_rank)
    elif rank > numerical:
        raise KDMDError(f"rank {rank} exceeds the numerical rank {numerical} of the Gram matrix")
    q = vecs[:, :rank]
    sinv = 1.0 / np.sqrt(vals[:rank])
    cross = gaussian_kernel(pairs.outputs, pairs.inputs, gamma)
    K = (sinv[:, None] * q.T) @ cross @ (q * sinv[None, :])
    return KDMDResult(K, generator_spectrum(K), vals[:rank])


def baseline_csv(rows) -> str:
    """``rows`` are (method, window, eigenvalues); exp columns hold the operator eigenvalues
    and the generator columns their principal logarithm."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + SPECTRUM_HEADER)
    for method, window, eig in rows:
        eig = np.asarray(eig, dtype=complex)
        with np.errstate(divide="ignore"):
            lam = np.log(eig)
        for mu, l in zip(eig, lam):
            w.writerow([method, window, repr(float(l.real)), repr(float(l.imag)),
                        repr(float(mu.real)), repr(float(mu.imag))])
    return buf.getvalue()
