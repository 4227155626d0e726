"""Toeplitz-structured Galerkin generators ``L = t * sum_k A_1^k ... A_R^k D_k``.

Each Toeplitz factor ``A = [a_{n-l}]_{n,l in N}`` is stored by its finite
support ``M`` and coefficients ``a_m``; offsets that leave the lattice are
dropped, so ``A`` is the finite section of the bi-infinite Toeplitz operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .lattice import IndexLattice, LatticeError, build_lattice, frequency_diagonal


class GeneratorError(ValueError):
    pass


def box_offsets(bounds, dims: int | None = None, include_zero: bool = True) -> np.ndarray:
    """Offsets of a box support, e.g. ``box_offsets([(-2, 2), (-2, 2), (-1, 1)], include_zero=False)``."""
    if dims is None:
        dims = len(bounds)
    return build_lattice(dims, bounds, include_zero).indices.copy()


def _lex_sign(offsets: np.ndarray) -> np.ndarray:
    """+1 for lexicographically positive offsets, -1 for negative, 0 for the zero offset."""
    sign = np.zeros(offsets.shape[0], dtype=np.int64)
    undecided = np.ones(offsets.shape[0], dtype=bool)
    for k in range(offsets.shape[1]):
        col = offsets[:, k]
        hit = undecided & (col != 0)
        sign[hit] = np.sign(col[hit])
        undecided &= ~hit
    return sign


@dataclass(frozen=True, eq=False)
class ToeplitzFactor:
    offsets: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        off = np.array(self.offsets, dtype=np.int64)
        if off.ndim == 1:
            off = off.reshape(-1, 1)
        c = np.array(self.coeffs, dtype=complex).reshape(-1)
        if off.shape[0] != c.shape[0]:
            raise GeneratorError(f"{off.shape[0]} offsets but {c.shape[0]} coefficients")
        if off.shape[0] == 0:
            raise GeneratorError("empty support")
        if np.unique(off, axis=0).shape[0] != off.shape[0]:
            raise GeneratorError("support contains duplicate offsets")
        if not np.all(np.isfinite(c)):
            raise GeneratorError("non-finite Toeplitz coefficient")
        off.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "coeffs", c)

    @property
    def size(self) -> int:
        return self.offsets.shape[0]

    def coefficient(self, m) -> complex:
        hit = np.all(self.offsets == np.asarray(m, dtype=np.int64), axis=1)
        return complex(self.coeffs[hit][0]) if hit.any() else 0j

    def is_conjugate_symmetric(self, atol: float = 0.0) -> bool:
        key = {tuple(m): i for i, m in enumerate(self.offsets.tolist())}
        for i, m in enumerate(self.offsets.tolist()):
            j = key.get(tuple(-v for v in m))
            if j is None:
                return False
            if abs(self.coeffs[i] - np.conj(self.coeffs[j])) > atol:
                return False
        return True


@dataclass(frozen=True, eq=False)
class Stencil:
    """Sparsity structure of a Toeplitz factor on a lattice.

    Pair ``p`` links column ``src[p]`` (multi-index l) to row ``dst[p]``
    (multi-index l + m) with ``m = offsets[coef[p]]``.  Pairs are sorted by
    row, so a CSR matrix is ``(data=a[coef], indices=src, indptr)``.
    """

    src: np.ndarray
    dst: np.ndarray
    coef: np.ndarray
    indptr: np.ndarray
    n_offsets: int
    n: int

    def matrix(self, coeffs: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((coeffs[self.coef], self.src, self.indptr), shape=(self.n, self.n))


@lru_cache(maxsize=256)
def _stencil_cached(lattice: IndexLattice, offsets_key: bytes, d: int) -> Stencil:
    offsets = np.frombuffer(offsets_key, dtype=np.int64).reshape(-1, d)
    idx = lattice.indices
    src_all, dst_all, coef_all = [], [], []
    for j, m in enumerate(offsets):
        dst = lattice.positions(idx + m)
        keep = dst >= 0
        src_all.append(np.nonzero(keep)[0])
        dst_all.append(dst[keep])
        coef_all.append(np.full(int(keep.sum()), j, dtype=np.int64))
    src = np.concatenate(src_all)
    dst = np.concatenate(dst_all)
    coef = np.concatenate(coef_all)
    order = np.lexsort((src, dst))
    src, dst, coef = src[order], dst[order], coef[order]
    indptr = np.zeros(lattice.size + 1, dtype=np.int64)
    np.add.at(indptr, dst + 1, 1)
    indptr = np.cumsum(indptr)
    for a in (src, dst, coef, indptr):
        a.setflags(write=False)
    return Stencil(src, dst, coef, indptr, offsets.shape[0], lattice.size)


def stencil(lattice: IndexLattice, offsets: np.ndarray) -> Stencil:
    off = np.ascontiguousarray(offsets, dtype=np.int64)
    return _stencil_cached(lattice, off.tobytes(), lattice.dims)


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """One Koopman layer: ``factors[k][r]`` is the r-th Toeplitz factor of dimension k."""

    lattice: IndexLattice
    factors: tuple[tuple[ToeplitzFactor, ...], ...]
    t_scale: float = 1.0
    real_constrained: bool = False

    def __post_init__(self):
        factors = tuple(tuple(fs) for fs in self.factors)
        if len(factors) != self.lattice.dims:
            raise GeneratorError(f"need one factor list per dimension ({self.lattice.dims}), got {len(factors)}")
        for k, fs in enumerate(factors):
            if len(fs) < 1:
                raise GeneratorError(f"dimension {k + 1} has no Toeplitz factors")
            for f in fs:
                if f.offsets.shape[1] != self.lattice.dims:
                    raise GeneratorError("factor offsets have wrong dimension")
                if self.real_constrained and not f.is_conjugate_symmetric(atol=0.0):
                    raise GeneratorError(
                        f"dimension {k + 1}: real-constrained factor violates a_-m = conj(a_m)"
                    )
        if not np.isfinite(self.t_scale):
            raise GeneratorError("t_scale must be finite")
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "t_scale", float(self.t_scale))

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(len(fs) for fs in self.factors)

    @cached_property
    def operator(self) -> "GeneratorOperator":
        return GeneratorOperator(self)

    def with_coeffs(self, coeffs: Sequence[Sequence[np.ndarray]]) -> "GeneratorParams":
        factors = tuple(
            tuple(ToeplitzFactor(f.offsets, c) for f, c in zip(fs, cs))
            for fs, cs in zip(self.factors, coeffs)
        )
        return GeneratorParams(self.lattice, factors, self.t_scale, self.real_constrained)

    @property
    def free_size(self) -> int:
        return sum(_free_size(f, self.real_constrained) for fs in self.factors for f in fs)


class GeneratorOperator:
    """Sparse matrix-vector actions of L and L^* for fixed parameters."""

    def __init__(self, params: GeneratorParams):
        self.params = params
        lat = params.lattice
        self.n = lat.size
        self.diag = [frequency_diagonal(lat, k + 1) for k in range(lat.dims)]
        self.stencils = [[stencil(lat, f.offsets) for f in fs] for fs in params.factors]
        self.mats = [[st.matrix(f.coeffs) for st, f in zip(sts, fs)]
                     for sts, fs in zip(self.stencils, params.factors)]
        self.toeplitz_madds = sum(int(m.nnz) for ms in self.mats for m in ms)
        t = params.t_scale
        if all(r == 1 for r in params.ranks):
            terms = [ms[0] @ sp.diags(dk) for ms, dk in zip(self.mats, self.diag)]
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            self.merged = sp.csr_matrix(total * t)
            self.merged_h = sp.csr_matrix(self.merged.conj().T)
        else:
            self.merged = None
            self.mats_h = [[sp.csr_matrix(m.conj().T) for m in ms] for ms in self.mats]
        self.diagonal = self._diagonal()

    def _diagonal(self):
        # L is diagonal when every factor is a multiple of the identity
        scal = []
        for fs in self.params.factors:
            prod = 1.0 + 0j
            for f in fs:
                zero = np.all(f.offsets == 0, axis=1)
                if np.any(f.coeffs[~zero] != 0):
                    return None
                prod *= complex(f.coeffs[zero].sum())
            scal.append(prod)
        return self.params.t_scale * sum(a * dk for a, dk in zip(scal, self.diag))

    def matvec(self, v: np.ndarray) -> np.ndarray:
        if self.merged is not None:
            return self.merged @ v
        t = self.params.t_scale
        out = np.zeros(v.shape, dtype=complex)
        for ms, dk in zip(self.mats, self.diag):
            w = dk * v if v.ndim == 1 else dk[:, None] * v
            for m in reversed(ms):
                w = m @ w
            out += w
        return t * out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        if self.merged is not None:
            return self.merged_h @ v
        t = self.params.t_scale
        out = np.zeros(v.shape, dtype=complex)
        for mhs, dk in zip(self.mats_h, self.diag):
            w = v
            for mh in mhs:
                w = mh @ w
            out += np.conj(dk) * w if v.ndim == 1 else np.conj(dk)[:, None] * w
        return t * out


def _check_vec(params: GeneratorParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.shape[0] != params.lattice.size:
        raise LatticeError(f"vector of length {v.shape[0]} does not match lattice size {params.lattice.size}")
    return v


def apply_generator(params: GeneratorParams, v, adjoint: bool = False) -> np.ndarray:
    v = _check_vec(params, v)
    op = params.operator
    return op.rmatvec(v) if adjoint else op.matvec(v)


def entry(params: GeneratorParams, n, l) -> complex:
    """(n, l) entry of L from the path-sum formula with intermediate indices restricted to N."""
    lat = params.lattice
    n = tuple(int(x) for x in n)
    l = tuple(int(x) for x in l)
    if n not in lat or l not in lat:
        raise GeneratorError(f"indices {n}, {l} must both lie in the lattice")
    total = 0j
    for k, fs in enumerate(params.factors):
        if l[k] == 0:
            continue
        tables = [{tuple(m): c for m, c in zip(f.offsets.tolist(), f.coeffs)} for f in fs]
        # partial[x] = sum over paths from l up to the intermediate index x through factors R..r
        partial = {l: 1j * l[k]}
        for table in reversed(tables):
            nxt: dict = {}
            for x, val in partial.items():
                for m, a in table.items():
                    y = tuple(xi + mi for xi, mi in zip(x, m))
                    if y in lat:
                        nxt[y] = nxt.get(y, 0j) + a * val
            partial = nxt
        total += partial.get(n, 0j)
    return params.t_scale * total


def assemble_dense(params: GeneratorParams) -> np.ndarray:
    """Dense |N| x |N| matrix of L, built by applying L to every unit column."""
    eye = np.eye(params.lattice.size, dtype=complex)
    return np.asarray(params.operator.matvec(eye))


def toeplitz_multiply_adds(params: GeneratorParams) -> int:
    """Complex multiply-adds spent in Toeplitz factors by one unmerged application."""
    return params.operator.toeplitz_madds


def check_divergence_free(params: GeneratorParams) -> float:
    """max over offsets m of |sum_k m_k a^k_m| for single-factor generators."""
    if any(r != 1 for r in params.ranks):
        raise GeneratorError("divergence check is defined for single-factor generators only")
    acc: dict = {}
    for k, (f,) in enumerate(params.factors):
        for m, a in zip(f.offsets.tolist(), f.coeffs):
            acc[tuple(m)] = acc.get(tuple(m), 0j) + m[k] * a
    return float(max(abs(v) for v in acc.values()))


# ---------------------------------------------------------------------------
# free real parameterization


def _canonical(f: ToeplitzFactor) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Positions of positive offsets, their negatives, and the zero offset (-1 if absent)."""
    sign = _lex_sign(f.offsets)
    pos = np.nonzero(sign > 0)[0]
    key = {tuple(m): i for i, m in enumerate(f.offsets.tolist())}
    neg = np.array([key.get(tuple(-v for v in f.offsets[i].tolist()), -1) for i in pos], dtype=np.int64)
    if np.any(neg < 0) or 2 * pos.size + int((sign == 0).sum()) != f.size:
        raise GeneratorError("real-constrained support must be centrally symmetric")
    zero = np.nonzero(sign == 0)[0]
    return pos, neg, zero, int(zero[0]) if zero.size else -1


def _free_size(f: ToeplitzFactor, real_constrained: bool) -> int:
    if not real_constrained:
        return 2 * f.size
    pos, _, _, z = _canonical(f)
    return 2 * pos.size + (1 if z >= 0 else 0)


def _factor_to_free(f: ToeplitzFactor, real_constrained: bool) -> np.ndarray:
    if not real_constrained:
        return np.stack([f.coeffs.real, f.coeffs.imag], axis=1).reshape(-1)
    pos, _, _, z = _canonical(f)
    out = np.stack([f.coeffs[pos].real, f.coeffs[pos].imag], axis=1).reshape(-1)
    if z >= 0:
        out = np.append(out, f.coeffs[z].real)
    return out


def _free_to_coeffs(f: ToeplitzFactor, real_constrained: bool, theta: np.ndarray) -> np.ndarray:
    if not real_constrained:
        return theta[0::2] + 1j * theta[1::2]
    pos, neg, _, z = _canonical(f)
    c = np.zeros(f.size, dtype=complex)
    pairs = theta[: 2 * pos.size]
    c[pos] = pairs[0::2] + 1j * pairs[1::2]
    c[neg] = pairs[0::2] - 1j * pairs[1::2]
    if z >= 0:
        c[z] = theta[2 * pos.size]
    return c


def _coeff_grad_to_free(f: ToeplitzFactor, real_constrained: bool, g: np.ndarray) -> np.ndarray:
    """Chain a packed gradient g_m = dloss/dRe(a_m) + i dloss/dIm(a_m) to free parameters."""
    if not real_constrained:
        return np.stack([g.real, g.imag], axis=1).reshape(-1)
    pos, neg, _, z = _canonical(f)
    out = np.stack([g[pos].real + g[neg].real, g[pos].imag - g[neg].imag], axis=1).reshape(-1)
    if z >= 0:
        out = np.append(out, g[z].real)
    return out


def free_from_params(params: GeneratorParams) -> np.ndarray:
    parts = [_factor_to_free(f, params.real_constrained) for fs in params.factors for f in fs]
    return np.concatenate(parts)


def params_from_free(template: GeneratorParams, theta) -> GeneratorParams:
    """Rebuild ``template`` with coefficients taken from the real vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (template.free_size,):
        raise GeneratorError(f"free vector has shape {theta.shape}, expected ({template.free_size},)")
    coeffs, at = [], 0
    for fs in template.factors:
        row = []
        for f in fs:
            size = _free_size(f, template.real_constrained)
            row.append(_free_to_coeffs(f, template.real_constrained, theta[at:at + size]))
            at += size
        coeffs.append(row)
    return template.with_coeffs(coeffs)


def coeff_grads_to_free(params: GeneratorParams, grads) -> np.ndarray:
    """Concatenate per-factor packed coefficient gradients into a free-parameter gradient."""
    parts = [
        _coeff_grad_to_free(f, params.real_constrained, np.asarray(g, dtype=complex))
        for fs, gs in zip(params.factors, grads)
        for f, g in zip(fs, gs)
    ]
    return np.concatenate(parts)


def make_params(
    lattice: IndexLattice,
    offsets,
    coeffs=None,
    t_scale: float = 1.0,
    real_constrained: bool = False,
    ranks: int | Sequence[int] = 1,
) -> GeneratorParams:
    """Convenience constructor sharing one support across all dimensions and factors.

    ``coeffs`` may be None (zeros), or nested ``coeffs[k][r]`` arrays.
    """
    off = np.asarray(offsets, dtype=np.int64).reshape(-1, lattice.dims)
    if isinstance(ranks, (int, np.integer)):
        ranks = [int(ranks)] * lattice.dims
    factors = []
    for k in range(lattice.dims):
        row = []
        for r in range(ranks[k]):
            c = np.zeros(off.shape[0], dtype=complex) if coeffs is None else coeffs[k][r]
            row.append(ToeplitzFactor(off, c))
        factors.append(tuple(row))
    return GeneratorParams(lattice, tuple(factors), t_scale, real_constrained)


def random_params(
    lattice: IndexLattice,
    offsets,
    rng: np.random.Generator,
    std: float = 0.05,
    t_scale: float = 1.0,
    real_constrained: bool = True,
    ranks: int | Sequence[int] = 1,
) -> GeneratorParams:
    """Complex normal coefficients with E|a|^2 = std^2, symmetrized when real-constrained."""
    template = make_params(lattice, offsets, None, t_scale, real_constrained, ranks)
    if not real_constrained:
        theta = rng.normal(scale=std / np.sqrt(2.0), size=template.free_size)
        return params_from_free(template, theta)
    parts = []
    for fs in template.factors:
        for f in fs:
            pos, _, _, z = _canonical(f)
            p = rng.normal(scale=std / np.sqrt(2.0), size=2 * pos.size)
            if z >= 0:
                p = np.append(p, rng.normal(scale=std))
            parts.append(p)
    return params_from_free(template, np.concatenate(parts))


def params_to_dict(params: GeneratorParams) -> dict:
    return {
        "t_scale": params.t_scale,
        "real_constrained": params.real_constrained,
        "factors": [
            [
                {
                    "support": f.offsets.tolist(),
                    "coeffs_re": [float(x) for x in f.coeffs.real],
                    "coeffs_im": [float(x) for x in f.coeffs.imag],
                }
                for f in fs
            ]
            for fs in params.factors
        ],
    }


def params_from_dict(doc: dict, lattice: IndexLattice) -> GeneratorParams:
    factors = []
    for fs in doc["factors"]:
        row = []
        for f in fs:
            re = np.asarray(f["coeffs_re"], dtype=float)
            im = np.asarray(f["coeffs_im"], dtype=float)
            if re.shape != im.shape:
                raise GeneratorError("coeffs_re and coeffs_im differ in length")
            off = np.asarray(f["support"], dtype=np.int64).reshape(-1, lattice.dims)
            row.append(ToeplitzFactor(off, re + 1j * im))
        factors.append(tuple(row))
    return GeneratorParams(lattice, tuple(factors), float(doc["t_scale"]), bool(doc["real_constrained"]))
