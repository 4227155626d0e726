"""Reference dynamical systems, RK4 trajectories and torus-embedded datasets."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .lattice import IndexLattice, build_lattice

DEFAULT_MARGIN = 0.9


class IntegrationError(ArithmeticError):
    def __init__(self, message, step: int, series: int | None = None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.series = series
        self.trajectory = trajectory


class ExtrapolationWarning(UserWarning):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    """A vector field ``f(t, x)`` acting on arrays of shape (..., d).

    kinds: ``van_der_pol`` (mu, sign), ``stream_flow`` (kappa),
    ``damped_driven`` (alpha, a, b), ``translation`` (velocity), ``custom`` (``field`` callable or a
    single-factor real-constrained ``generator`` whose coefficient tables give
    f_k = sum_m a^k_m e^{i m.x}).
    """

    kind: str
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        if self.kind in ("van_der_pol", "stream_flow", "damped_driven"):
            return 2
        if self.kind == "translation":
            return len(self.params["velocity"])
        if "generator" in self.params:
            return self.params["generator"].lattice.dims
        return int(self.params["dim"])

    @property
    def time_dependent(self) -> bool:
        if self.kind in ("stream_flow", "damped_driven"):
            return True
        return bool(self.params.get("time_dependent", False))

    def field(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "van_der_pol":
            mu = p.get("mu", 3.0)
            pos, vel = x[..., 0], x[..., 1]
            if p.get("sign", "standard") == "reversed":
                acc = -mu * (1 - pos**2) * vel + pos
            else:
                acc = mu * (1 - pos**2) * vel - pos
            return np.stack([vel, acc], axis=-1)
        if self.kind == "stream_flow":
            kappa = p.get("kappa", 1.0)
            x1, x2 = x[..., 0], x[..., 1]
            zeta = np.exp(kappa * (np.cos(x1 - t) + np.cos(x2)))
            # (-d zeta / d x2, d zeta / d x1)
            return np.stack([kappa * np.sin(x2) * zeta, -kappa * np.sin(x1 - t) * zeta], axis=-1)
        if self.kind == "damped_driven":
            alpha, a, b = p.get("alpha", 0.1), p.get("a", 1.0), p.get("b", 1.0)
            pos, vel = x[..., 0], x[..., 1]
            return np.stack([vel, -alpha * vel - pos - a * np.sin(b * t)], axis=-1)
        if self.kind == "translation":
            return np.broadcast_to(np.asarray(p["velocity"], dtype=float), x.shape).copy()
        if self.kind == "custom":
            if "field" in p:
                return np.asarray(p["field"](t, x), dtype=float)
            params = p["generator"]
            flat = x.reshape(-1, x.shape[-1])
            out = np.zeros_like(flat)
            for k, (fac,) in enumerate(params.factors):
                phase = np.exp(1j * flat @ fac.offsets.T.astype(float))
                out[:, k] = (phase @ fac.coeffs).real
            return out.reshape(x.shape)
        raise ValueError(f"unknown system kind {self.kind!r}")

    def to_dict(self) -> dict:
        plain = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()
                 if isinstance(v, (int, float, bool, str, tuple))}
        return {"kind": self.kind, "params": plain}


def van_der_pol(mu: float = 3.0, sign: str = "standard") -> SystemSpec:
    """``standard``: x'' = mu (1 - x^2) x' - x.  ``reversed``: x'' = -mu (1 - x^2) x' + x,
    which blows up in finite time from part of the box [-1, 1]^2."""
    if sign not in ("standard", "reversed"):
        raise ValueError(f"sign must be 'standard' or 'reversed', got {sign!r}")
    return SystemSpec("van_der_pol", {"mu": mu, "sign": sign})


def stream_flow(kappa: float = 1.0) -> SystemSpec:
    return SystemSpec("stream_flow", {"kappa": kappa})


def damped_driven(alpha: float = 0.1, a: float = 1.0, b: float = 1.0) -> SystemSpec:
    return SystemSpec("damped_driven", {"alpha": alpha, "a": a, "b": b})


def translation(velocity=(1.0, 0.0)) -> SystemSpec:
    """Constant field x' = velocity; its Koopman operator shifts observables exactly."""
    vel = tuple(float(v) for v in np.atleast_1d(velocity))
    if not vel:
        raise ValueError("velocity needs at least one component")
    return SystemSpec("translation", {"velocity": vel})


SYSTEMS: dict[str, Callable[..., SystemSpec]] = {
    "vdp": van_der_pol,
    "van_der_pol": van_der_pol,
    "stream": stream_flow,
    "stream_flow": stream_flow,
    "damped": damped_driven,
    "damped_driven": damped_driven,
    "translation": translation,
}


def integrate(system: SystemSpec, x0, t0: float, dt: float, steps: int) -> np.ndarray:
    """Classical RK4; ``x0`` is (d,) or a batch (S, d). Returns (steps+1, ...) states."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=float)
    traj = np.empty((steps + 1,) + x.shape)
    traj[0] = x
    f = system.field
    for i in range(steps):
        t = t0 + i * dt
        with np.errstate(over="ignore", invalid="ignore"):  # blow-up is reported below
            k1 = f(t, x)
            k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
            k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
            k4 = f(t + dt, x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            bad = None
            if x.ndim == 2:
                bad = int(np.nonzero(~np.all(np.isfinite(x), axis=1))[0][0])
            raise IntegrationError(f"non-finite state at step {i + 1}", step=i + 1, series=bad,
                                   trajectory=traj[: i + 1].copy())
        traj[i + 1] = x
    return traj


# ---------------------------------------------------------------------------
# embedding


@dataclass(frozen=True)
class Embedding:
    """Affine map raw -> torus coordinates, ``scale * x + offset`` per dimension."""

    scale: tuple[float, ...]
    offset: tuple[float, ...]
    raw_lo: tuple[float, ...]
    raw_hi: tuple[float, ...]

    @classmethod
    def fit(cls, raw: np.ndarray, margin: float = DEFAULT_MARGIN) -> "Embedding":
        flat = np.asarray(raw, dtype=float).reshape(-1, np.shape(raw)[-1])
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        half = np.where(half > 0, half, 1.0)
        scale = margin * np.pi / half
        return cls(tuple(scale.tolist()), tuple((-center * scale).tolist()),
                   tuple(lo.tolist()), tuple(hi.tolist()))

    @classmethod
    def identity(cls, dim: int) -> "Embedding":
        return cls((1.0,) * dim, (0.0,) * dim, (-np.pi,) * dim, (np.pi,) * dim)

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "offset": list(self.offset),
                "raw_lo": list(self.raw_lo), "raw_hi": list(self.raw_hi)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Embedding":
        return cls(*(tuple(float(v) for v in doc[k]) for k in ("scale", "offset", "raw_lo", "raw_hi")))

    def extrapolating(self, raw: np.ndarray, slack: float = 0.1) -> bool:
        lo, hi = np.array(self.raw_lo), np.array(self.raw_hi)
        width = hi - lo
        raw = np.asarray(raw, dtype=float)
        return bool(np.any(raw < lo - slack * width) or np.any(raw > hi + slack * width))


def torus_embed(points, emb: Embedding) -> np.ndarray:
    raw = np.asarray(points, dtype=float)
    if emb.extrapolating(raw):
        warnings.warn("points lie more than 10% outside the recorded raw range", ExtrapolationWarning,
                      stacklevel=2)
    return raw * np.array(emb.scale) + np.array(emb.offset)


def torus_unembed(points, emb: Embedding) -> np.ndarray:
    raw = (np.asarray(points, dtype=float) - np.array(emb.offset)) / np.array(emb.scale)
    if emb.extrapolating(raw):
        warnings.warn("unembedded points lie more than 10% outside the recorded raw range",
                      ExtrapolationWarning, stacklevel=2)
    return raw


# ---------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class TrajectoryDataset:
    """``states`` holds torus-embedded noisy samples (S, T+1, d); ``raw`` the original units."""

    states: np.ndarray
    dt: float
    noise_std: float
    seed: int
    embedding: Embedding
    system: dict
    init_box: tuple = ()

    @property
    def raw(self) -> np.ndarray:
        return (self.states - np.array(self.embedding.offset)) / np.array(self.embedding.scale)

    @property
    def n_series(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def metadata(self) -> dict:
        return {
            "system": self.system,
            "dt": self.dt,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "n_series": self.n_series,
            "n_steps": self.n_steps,
            "init_box": [list(b) for b in self.init_box],
            "embedding": self.embedding.to_dict(),
            "raw_range": {"lo": list(self.embedding.raw_lo), "hi": list(self.embedding.raw_hi)},
        }


def generate_dataset(
    system: SystemSpec,
    n_series: int,
    steps: int,
    dt: float,
    noise_std: float,
    init_box,
    seed: int,
    embedding: Embedding | None = None,
    margin: float = DEFAULT_MARGIN,
    t0: float = 0.0,
) -> TrajectoryDataset:
    """Uniform initial states in ``init_box``, RK4 trajectories, Gaussian noise on every sample.

    Without an ``embedding`` one is fitted so the noisy states fill
    ``(-margin*pi, margin*pi)`` per dimension; test sets should pass the
    training embedding.
    """
    box = np.asarray(init_box, dtype=float).reshape(-1, 2)
    if box.shape[0] == 1 and system.dim > 1:
        box = np.repeat(box, system.dim, axis=0)
    if box.shape[0] != system.dim or np.any(box[:, 0] > box[:, 1]):
        raise ValueError(f"init_box must give {system.dim} nonempty intervals")
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(box[:, 0], box[:, 1], size=(n_series, system.dim))
    try:
        traj = integrate(system, x0, t0, dt, steps)
    except IntegrationError as exc:
        raise IntegrationError(f"series {exc.series} blew up at step {exc.step}", exc.step, exc.series) from exc
    raw = np.ascontiguousarray(np.transpose(traj, (1, 0, 2)))
    if noise_std > 0:
        raw = raw + rng.normal(scale=noise_std, size=raw.shape)
    emb = embedding or Embedding.fit(raw, margin)
    states = raw * np.array(emb.scale) + np.array(emb.offset)
    return TrajectoryDataset(states, float(dt), float(noise_std), int(seed), emb, system.to_dict(),
                             tuple(tuple(b) for b in box.tolist()))


def metadata_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def dataset_csv(ds: TrajectoryDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "step"] + [f"x{k}" for k in range(ds.dim)])
    emb = ds.states
    for s in range(ds.n_series):
        for i in range(ds.n_steps + 1):
            w.writerow([s, i] + [repr(float(v)) for v in emb[s, i]])
    return buf.getvalue()


def save_dataset(ds: TrajectoryDataset, csv_path) -> Path:
    """Write the embedded CSV plus a ``.meta.json`` sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    csv_path.write_text(dataset_csv(ds))
    meta = metadata_path(csv_path)
    meta.write_text(json.dumps(ds.metadata(), indent=1) + "\n")
    return meta


def load_dataset(csv_path) -> TrajectoryDataset:
    csv_path = Path(csv_path)
    try:
        meta = json.loads(metadata_path(csv_path).read_text())
        emb = Embedding.from_dict(meta["embedding"])
        dt, noise, seed, system = float(meta["dt"]), float(meta["noise_std"]), int(meta["seed"]), meta["system"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{metadata_path(csv_path)}: malformed metadata ({exc})") from exc
    try:
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DatasetFormatError(f"{csv_path}: malformed CSV ({exc})") from exc
    if data.shape[0] == 0:
        raise DatasetFormatError(f"{csv_path}: no samples")
    if data.shape[1] != 2 + len(emb.scale):
        raise DatasetFormatError(f"{csv_path}: expected {len(emb.scale)} state columns, found {data.shape[1] - 2}")
    series = data[:, 0].astype(int)
    steps = data[:, 1].astype(int)
    S, T = series.max() + 1, steps.max() + 1
    if data.shape[0] != S * T or series.min() < 0 or steps.min() < 0:
        raise DatasetFormatError(f"{csv_path}: expected {S}x{T} rows, found {data.shape[0]}")
    states = np.empty((S, T, data.shape[1] - 2))
    states[series, steps] = data[:, 2:]
    return TrajectoryDataset(states, dt, noise, seed, emb, system,
                             tuple(tuple(b) for b in meta.get("init_box", [])))


def lattice_for_dataset(dim: int, bounds, selector_bound: int = 1, include_zero: bool = False) -> IndexLattice:
    """Lattice on T^(d+1) for d-dimensional states plus one selector coordinate."""
    if isinstance(bounds, int):
        bounds = [(-bounds, bounds)] * dim
    return build_lattice(dim + 1, list(bounds) + [(-selector_bound, selector_bound)], include_zero)
