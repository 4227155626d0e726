"""Matrix-exponential actions by restarted Arnoldi, plus a dense Pade oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

Action = Callable[[np.ndarray], np.ndarray]


class ExpmvError(ArithmeticError):
    """Krylov exponential failed; carries the furthest iterate reached."""

    def __init__(self, message, best=None, time_reached=0.0, error_estimate=np.inf):
        super().__init__(message)
        self.best = best
        self.time_reached = time_reached
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class ExpmvConfig:
    tolerance: float = 1e-9
    max_subspace: int = 40
    max_restarts: int = 20

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_subspace < 2:
            raise ValueError("max_subspace must be >= 2")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "max_subspace": self.max_subspace,
                "max_restarts": self.max_restarts}


@dataclass
class ExpmvDiagnostics:
    matvec_count: int = 0
    subspace_dims: list = field(default_factory=list)
    final_error_estimate: float = 0.0


# Pade(13) coefficients and the matching scaling threshold (Higham 2005).
_PADE13 = np.array([
    64764752532480000., 32382376266240000., 7771770303897600., 1187353796428800.,
    129060195264000., 10559470521600., 670442572800., 33522128640., 1323241920.,
    40840800., 960960., 16380., 182., 1.,
])
_THETA13 = 5.371920351148152


def dense_expm(a) -> np.ndarray:
    """exp(A) by scaling and squaring with the [13/13] Pade approximant."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"dense_expm needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("dense_expm input has non-finite entries")
    dtype = np.result_type(a.dtype, np.float64)
    a = a.astype(dtype, copy=False)
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0), dtype=dtype)
    norm1 = np.abs(a).sum(axis=0).max()
    s = 0
    if norm1 > _THETA13:
        s = int(np.ceil(np.log2(norm1 / _THETA13)))
        a = a / (2.0 ** s)
    b = _PADE13
    ident = np.eye(n, dtype=dtype)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


def _small_expm(h: np.ndarray) -> np.ndarray:
    # exp of a small Hessenberg block, first column only is needed downstream
    if h.shape[0] == 1:
        return np.exp(h)
    return dense_expm(h)


def expmv(apply: Action, v, cfg: ExpmvConfig | None = None, t: float = 1.0):
    """Approximate ``exp(t A) v`` where ``apply(x) = A x``.

    Arnoldi cycles advance the time variable in sub-steps; within a cycle the
    subspace grows until the a-posteriori term
    ``beta * tau * h_{k+1,k} * |[exp(tau H_k)]_{k,1}|`` meets its share of the
    budget ``tolerance * |v|``, otherwise the sub-step ``tau`` is shortened.

    Returns ``(w, diagnostics)``.
    """
    cfg = cfg or ExpmvConfig()
    v = np.asarray(v, dtype=complex)
    if not np.all(np.isfinite(v)):
        raise ExpmvError("input vector has non-finite entries")
    diag = ExpmvDiagnostics()
    beta0 = float(np.linalg.norm(v))
    t = float(t)
    if beta0 == 0.0 or t == 0.0:
        return v.copy(), diag
    if t < 0:
        raise ValueError("expmv integrates forward in time only (t >= 0)")

    n = v.shape[0]
    m_max = min(cfg.max_subspace, n)
    budget = cfg.tolerance * beta0
    w = v.copy()
    t_done = 0.0
    err_total = 0.0
    cycles = 0
    while t_done < t:
        if cycles > cfg.max_restarts:
            raise ExpmvError(
                f"restart budget exhausted at time {t_done:.3g} of {t:.3g}",
                best=w, time_reached=t_done, error_estimate=err_total,
            )
        remaining = t - t_done
        beta = float(np.linalg.norm(w))
        basis = np.zeros((m_max + 1, n), dtype=complex)
        hess = np.zeros((m_max + 1, m_max), dtype=complex)
        basis[0] = w / beta
        tau = remaining
        accepted = None
        for j in range(m_max):
            z = np.asarray(apply(basis[j]), dtype=complex)
            diag.matvec_count += 1
            if not np.all(np.isfinite(z)):
                raise ExpmvError("operator produced non-finite values", best=w,
                                 time_reached=t_done, error_estimate=err_total)
            znorm = np.linalg.norm(z)
            for _ in range(2):
                proj = basis[: j + 1].conj() @ z
                z = z - proj @ basis[: j + 1]
                hess[: j + 1, j] += proj
            hnext = float(np.linalg.norm(z))
            k = j + 1
            closed = hnext <= 1e-13 * max(znorm, np.finfo(float).tiny) or k == n
            if closed:
                hnext = 0.0
            else:
                hess[k, j] = hnext
            e = _small_expm(tau * hess[:k, :k])
            err = beta * tau * hnext * abs(e[k - 1, 0])
            if closed or err <= budget * tau / t:
                accepted = (k, e, err)
                break
            if k < m_max:
                basis[k] = z / hnext
        if accepted is None:
            k = m_max
            for _ in range(60):
                ratio = budget * tau / t / max(err, np.finfo(float).tiny)
                tau = tau * min(0.9, 0.9 * ratio ** (1.0 / k))
                e = _small_expm(tau * hess[:k, :k])
                err = beta * tau * hnext * abs(e[k - 1, 0])
                if err <= budget * tau / t:
                    break
            else:
                raise ExpmvError("could not find an admissible sub-step", best=w,
                                 time_reached=t_done, error_estimate=err_total)
            accepted = (k, e, err)
        k, e, err = accepted
        w = beta * (e[:k, 0] @ basis[:k])
        err_total += err
        t_done = t if tau >= remaining else t_done + tau
        diag.subspace_dims.append(k)
        cycles += 1
    diag.final_error_estimate = err_total
    return w, diag


class NormEstimate(NamedTuple):
    sigma: float
    left: np.ndarray
    right: np.ndarray
    rel_change: float  # relative change of sigma over the last iteration


def spectral_norm_pair(apply: Action, apply_adjoint: Action, dim: int, iters: int, seed: int) -> NormEstimate:
    """Power iteration on A^*A from a seeded start.

    ``sigma = |A x|`` with ``|x| = 1`` and ``left = A x / sigma``.
    """
    if dim < 1:
        raise ValueError("spectral norm of a zero-dimensional operator")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    x /= np.linalg.norm(x)
    ax = apply(x)
    sigma = prev = float(np.linalg.norm(ax))
    for _ in range(iters):
        y = apply_adjoint(ax)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return NormEstimate(0.0, np.zeros(dim, dtype=complex), x, 0.0)
        x = y / ny
        ax = apply(x)
        prev, sigma = sigma, float(np.linalg.norm(ax))
    u = ax / sigma if sigma > 0 else np.zeros(dim, dtype=complex)
    change = abs(sigma - prev) / sigma if sigma > 0 else 0.0
    return NormEstimate(sigma, u, x, change)


def spectral_norm_estimate(apply: Action, apply_adjoint: Action, dim: int, iters: int = 5,
                           seed: int = 0) -> float:
    """Lower bound on the spectral norm from ``iters`` power iterations."""
    return spectral_norm_pair(apply, apply_adjoint, dim, iters, seed).sigma
