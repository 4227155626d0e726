"""Layer spectra, the Rademacher generalization bound and constructive matrix utilities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import generator as gen
from .lattice import IndexLattice
from .model import DeepKoopmanModel


class EigenSolverError(ArithmeticError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


# ---------------------------------------------------------------------------
# eigenvalues: Householder Hessenberg reduction + shifted complex QR


def hessenberg(a) -> np.ndarray:
    """Upper Hessenberg matrix unitarily similar to ``a`` (Householder reflections)."""
    h = np.array(a, dtype=complex)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        nx = np.linalg.norm(x)
        if nx == 0.0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0
        v = x.copy()
        v[0] += phase * nx
        v /= np.linalg.norm(v)
        h[k + 1:, :] -= 2.0 * np.outer(v, v.conj() @ h[k + 1:, :])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v.conj())
        h[k + 2:, k] = 0.0
    return h


def _givens(x: complex, y: complex):
    # (c, s) with [[c, s], [-conj(s), c]] @ [x, y] = [r, 0]
    ax = abs(x)
    r = math.hypot(ax, abs(y))
    if r == 0.0:
        return 1.0, 0.0
    if ax == 0.0:
        return 0.0, 1.0
    return ax / r, (x / ax) * np.conj(y) / r


def _wilkinson(b: np.ndarray) -> complex:
    a, bb, c, d = b[-2, -2], b[-2, -1], b[-1, -2], b[-1, -1]
    half = 0.5 * (a - d)
    disc = np.sqrt(half * half + bb * c)
    mid = 0.5 * (a + d)
    m1, m2 = mid + disc, mid - disc
    return m1 if abs(m1 - d) <= abs(m2 - d) else m2


def _qr_sweep(b: np.ndarray, mu: complex) -> None:
    # one shifted QR step B - mu I = QR, B <- RQ + mu I, in place on a Hessenberg block
    m = b.shape[0]
    idx = np.arange(m)
    b[idx, idx] -= mu
    rots = []
    for k in range(m - 1):
        c, s = _givens(b[k, k], b[k + 1, k])
        rots.append((c, s))
        top = b[k, k:].copy()
        bot = b[k + 1, k:]
        b[k, k:] = c * top + s * bot
        b[k + 1, k:] = -np.conj(s) * top + c * bot
        b[k + 1, k] = 0.0
    for k, (c, s) in enumerate(rots):
        hi = min(k + 2, m - 1) + 1
        left = b[:hi, k].copy()
        right = b[:hi, k + 1]
        b[:hi, k] = c * left + np.conj(s) * right
        b[:hi, k + 1] = -s * left + c * right
    b[idx, idx] += mu


def eigenvalues_with_stats(a, tol: float = 1e-12, max_iter_factor: int = 30):
    """Eigenvalues of a square matrix and the number of QR sweeps used."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigenvalues need a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex), 0
    h = hessenberg(a)
    floor = np.finfo(float).eps * max(np.linalg.norm(h), np.finfo(float).tiny)
    eig = np.empty(n, dtype=complex)
    hi = n - 1
    sweeps = 0
    since = 0
    cap = max_iter_factor * n
    while hi >= 0:
        lo = hi
        while lo > 0:
            scale = abs(h[lo, lo]) + abs(h[lo - 1, lo - 1])
            if abs(h[lo, lo - 1]) <= max(tol * scale, floor):
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            eig[hi] = h[hi, hi]
            hi -= 1
            since = 0
            continue
        if sweeps >= cap:
            raise EigenSolverError(
                f"QR iteration cap {cap} reached with rows {lo}..{hi} undeflated", block=(lo, hi)
            )
        block = h[lo:hi + 1, lo:hi + 1]
        since += 1
        if since % 11 == 0:
            mu = block[-1, -1] + 0.75 * abs(block[-1, -2]) * (1 + 1j)
        else:
            mu = _wilkinson(block)
        _qr_sweep(block, mu)
        sweeps += 1
    return eig, sweeps


def _sorted(values: np.ndarray) -> np.ndarray:
    return values[np.lexsort((values.imag, values.real))]


def generator_spectrum(l_dense) -> np.ndarray:
    """Eigenvalues of a dense matrix, sorted by real then imaginary part."""
    return _sorted(eigenvalues_with_stats(l_dense)[0])


@dataclass
class SpectrumReport:
    layer: int
    eigenvalues: np.ndarray
    exp_eigenvalues: np.ndarray
    iterations: int
    trace_residual: float

    def __post_init__(self):
        if self.eigenvalues.shape != self.exp_eigenvalues.shape:
            raise ValueError("eigenvalue lists differ in length")

    def fraction_in_annulus(self, lo: float = 0.85, hi: float = 1.15) -> float:
        mod = np.abs(self.exp_eigenvalues)
        return float(np.mean((mod >= lo) & (mod <= hi)))


def layer_spectrum(model: DeepKoopmanModel, j: int) -> SpectrumReport:
    """Spectrum of L_j and, by spectral mapping, of exp(L_j)."""
    if not 1 <= j <= model.n_layers:
        raise ValueError(f"layer index must be in [1, {model.n_layers}], got {j}")
    dense = gen.assemble_dense(model.layers[j - 1])
    lam, sweeps = eigenvalues_with_stats(dense)
    lam = _sorted(lam)
    tr = np.trace(dense)
    resid = abs(lam.sum() - tr) / max(1.0, float(np.linalg.norm(dense)))
    return SpectrumReport(j, lam, np.exp(lam), sweeps, float(resid))


def model_spectra(model: DeepKoopmanModel) -> list[SpectrumReport]:
    return [layer_spectrum(model, j) for j in range(1, model.n_layers + 1)]


SPECTRUM_HEADER = ["layer", "lambda_re", "lambda_im", "explambda_re", "explambda_im"]


def spectrum_csv(reports, method: str | None = None) -> str:
    """CSV text for spectrum reports; with ``method`` a leading method column is added."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["method"] if method else []) + SPECTRUM_HEADER)
    for rep in reports:
        for lam, mu in zip(rep.eigenvalues, rep.exp_eigenvalues):
            row = [rep.layer, repr(float(lam.real)), repr(float(lam.imag)),
                   repr(float(mu.real)), repr(float(mu.imag))]
            w.writerow(([method] if method else []) + row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# generalization bound


def alpha_constant(tau: float, d: int) -> float:
    """sum over j in Z^d of exp(-2 tau |j|_1), in closed form."""
    if not tau > 0:
        raise ValueError("tau must be positive; the series diverges otherwise")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    q = math.exp(-2.0 * tau)
    return ((1.0 + q) / (1.0 - q)) ** d


def alpha_partial_sum(tau: float, d: int, radius: int) -> float:
    """Direct summation of the same series over the box |j|_inf <= radius."""
    j = np.arange(-radius, radius + 1)
    one = np.exp(-2.0 * tau * np.abs(j))
    total = one
    for _ in range(d - 1):
        total = np.multiply.outer(total, one)
    return float(np.sum(total))


@dataclass(frozen=True)
class BoundInputs:
    empirical_risk: float
    n_samples: int
    tau: float
    lattice: IndexLattice
    norm_product: float
    v_norm: float
    loss_bound: float
    delta: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("norm_product", "v_norm", "loss_bound"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def generalization_bound(b: BoundInputs) -> float:
    s = b.n_samples
    alpha = alpha_constant(b.tau, b.lattice.dims)
    complexity = alpha / math.sqrt(s) * math.exp(b.tau * b.lattice.max_l1) * b.norm_product * b.v_norm
    confidence = 3.0 * b.loss_bound * math.sqrt(math.log(2.0 / b.delta) / s)
    return b.empirical_risk + complexity + confidence


# ---------------------------------------------------------------------------
# constructive utilities


def _orthonormal_complement(x: np.ndarray) -> np.ndarray:
    """Columns forming an orthonormal basis of the complement of span{x}."""
    n = x.shape[0]
    basis = [x / np.linalg.norm(x)]
    for i in np.argsort(np.abs(x), kind="stable"):
        if len(basis) == n:
            break
        e = np.zeros(n, dtype=complex)
        e[i] = 1.0
        for _ in range(2):
            for q in basis:
                e = e - (q.conj() @ e) * q
        ne = np.linalg.norm(e)
        if ne > 1e-8:
            basis.append(e / ne)
    if len(basis) != n:
        raise ArithmeticError("Gram-Schmidt completion lost rank")
    return np.column_stack(basis[1:]) if n > 1 else np.zeros((1, 0), dtype=complex)


def transition_matrix(u, v) -> np.ndarray:
    """Nonsingular A with A v = u.

    A = C B where B has first row v^*/|v|^2 and remaining rows orthonormal and
    orthogonal to v (so B v = e_1), and C has first column u and remaining
    columns an orthonormal basis of the complement of u (so C e_1 = u).
    """
    u = np.asarray(u, dtype=complex).reshape(-1)
    v = np.asarray(v, dtype=complex).reshape(-1)
    if u.shape != v.shape:
        raise ValueError("u and v must have the same length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("transition_matrix needs nonzero vectors")
    b = np.vstack([v.conj()[None, :] / nv ** 2, _orthonormal_complement(v).conj().T])
    c = np.column_stack([u, _orthonormal_complement(u)])
    return c @ b


def diagonal_decomposition(b, lattice: IndexLattice) -> list[np.ndarray]:
    """Matrices C_1..C_d with sum_k C_k D_k = B, where (D_k)_ll = i l_k."""
    b = np.asarray(b, dtype=complex)
    n = lattice.size
    if b.shape != (n, n):
        raise ValueError(f"matrix shape {b.shape} does not match lattice size {n}")
    idx = lattice.indices
    nonzero = idx != 0
    if not np.all(nonzero.any(axis=1)):
        raise ValueError("lattice contains the zero index; decomposition undefined there")
    owner = np.argmax(nonzero, axis=1)
    out = []
    for k in range(lattice.dims):
        cols = owner == k
        dinv = np.zeros(n, dtype=complex)
        dinv[cols] = 1.0 / (1j * idx[cols, k])
        out.append(b * dinv[None, :])
    return out
