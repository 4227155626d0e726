"""Deep Koopman-layered model ``G = Q_N exp(L_1) ... exp(L_J) Q_N^* v``.

Layer 1 is the outermost exponential: coefficients are propagated from layer
J down to layer 1, and ``forward_coefficients(model, j)`` is the coefficient
vector of ``G_j = Q_N exp(L_j) ... exp(L_J) Q_N^* v``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import generator as gen
from .krylov import ExpmvConfig, ExpmvDiagnostics, ExpmvError, expmv
from .lattice import IndexLattice, LatticeError, analyze, fourier_features, synthesize

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class ObservableError(ValueError):
    pass


# ---------------------------------------------------------------------------
# observables


def sawtooth_coefficient(n: int) -> complex:
    """Fourier coefficient of x on (-pi, pi): i (-1)^n / n, zero at n = 0."""
    return 0j if n == 0 else 1j * (-1) ** (n % 2) / n


def _trig_basis(y: np.ndarray, count: int) -> np.ndarray:
    """Columns cos(y), sin(y), cos(2y), sin(2y), ... (``count`` of them)."""
    cols = []
    for i in range(count):
        freq = i // 2 + 1
        cols.append(np.cos(freq * y) if i % 2 == 0 else np.sin(freq * y))
    return np.stack(cols, axis=-1)


def default_selectors(n_out: int) -> tuple[float, ...]:
    if n_out == 2:
        return (np.pi / 2, 0.0)
    return tuple(float(k * np.pi / n_out) for k in range(n_out))


def selector_weights(selectors: Sequence[float]) -> np.ndarray:
    """Trig-polynomial weights w_k with w_k(selector_j) = delta_kj.

    Row k holds the coefficients of w_k in the basis of ``_trig_basis``.
    For selectors (pi/2, 0) this gives w_1 = sin, w_2 = cos.
    """
    y = np.asarray(selectors, dtype=float)
    basis = _trig_basis(y, y.size)  # basis[j, i] = b_i(y_j)
    if abs(np.linalg.det(basis)) < 1e-10:
        raise ObservableError(f"selectors {tuple(y)} do not separate the output coordinates")
    # want W with sum_i W[k, i] b_i(y_j) = delta_kj  ->  W = inv(basis)^T
    return np.linalg.inv(basis).T


@dataclass(frozen=True)
class ObservableSpec:
    """How to obtain ``Q_N^* v``.

    kind ``selector_sincos``: v(x, y) = sum_k w_k(y) x_k on T^(d'+1), where x_k is
    the sawtooth coordinate and w_k the selector weights (sin/cos for d' = 2).
    kind ``selector_sine``: v(x, y) = sum_k w_k(y) sin(x_k), band-limited, so the
    model predicts sin of each state coordinate (see ``TARGET_MAPS``).
    kind ``grid_samples``: ``values`` sampled on a uniform grid over [0, 2pi)^d.
    kind ``coefficients``: ``values`` is already a coefficient vector.
    """

    kind: str
    selectors: tuple[float, ...] | None = None
    values: np.ndarray | None = None


def _sawtooth_profile(nk: np.ndarray) -> np.ndarray:
    return 1j * np.where(nk % 2 == 0, 1.0, -1.0) / nk


def _sine_profile(nk: np.ndarray) -> np.ndarray:
    # sin(x) = (e^{ix} - e^{-ix}) / (2i)
    return np.where(nk == 1, -0.5j, 0.0) + np.where(nk == -1, 0.5j, 0.0)


def _selector_coeffs(lattice: IndexLattice, selectors, profile=_sawtooth_profile) -> np.ndarray:
    n_out = lattice.dims - 1
    if n_out < 1:
        raise ObservableError("selector observables need a lattice of dimension >= 2")
    sel = default_selectors(n_out) if selectors is None else tuple(selectors)
    if len(sel) != n_out:
        raise ObservableError(f"expected {n_out} selectors, got {len(sel)}")
    weights = selector_weights(sel)
    # Fourier coefficients of each trig basis function at frequency p of y
    idx = lattice.indices
    out = np.zeros(lattice.size, dtype=complex)
    for k in range(n_out):
        for i in range(n_out):
            freq = i // 2 + 1
            # cos(fy) = (e^{ify} + e^{-ify})/2,  sin(fy) = (e^{ify} - e^{-ify})/(2i)
            plus, minus = (0.5, 0.5) if i % 2 == 0 else (-0.5j, 0.5j)
            for f, amp in ((freq, plus), (-freq, minus)):
                others = np.delete(idx[:, :n_out], k, axis=1)
                mask = (idx[:, n_out] == f) & np.all(others == 0, axis=1) & (idx[:, k] != 0)
                out[mask] += weights[k, i] * amp * profile(idx[mask, k])
    return out


def project_observable(spec: ObservableSpec, lattice: IndexLattice) -> np.ndarray:
    if spec.kind == "selector_sincos":
        return _selector_coeffs(lattice, spec.selectors)
    if spec.kind == "selector_sine":
        return _selector_coeffs(lattice, spec.selectors, _sine_profile)
    if spec.kind == "grid_samples":
        if spec.values is None:
            raise ObservableError("grid_samples observable needs values")
        return analyze(spec.values, lattice)
    if spec.kind == "coefficients":
        c = np.asarray(spec.values, dtype=complex)
        if c.shape != (lattice.size,):
            raise ObservableError(f"coefficient observable has shape {c.shape}, lattice size {lattice.size}")
        return c.copy()
    raise ObservableError(f"unknown observable kind {spec.kind!r}")


# target_map -> function applied to state coordinates before comparing with predictions
TARGET_MAPS = {"identity": lambda y: y, "sin": np.sin}
OBSERVABLE_TARGETS = {"selector_sincos": "identity", "selector_sine": "sin"}


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class DeepKoopmanModel:
    lattice: IndexLattice
    layers: tuple[gen.GeneratorParams, ...]
    v_coeffs: np.ndarray
    offset: complex | None = None
    expmv_cfg: ExpmvConfig = field(default_factory=ExpmvConfig)
    selectors: tuple[float, ...] | None = None
    target_map: str = "identity"

    def __post_init__(self):
        if self.target_map not in TARGET_MAPS:
            raise ValueError(f"unknown target_map {self.target_map!r}")
        layers = tuple(self.layers)
        if len(layers) < 1:
            raise ValueError("model needs at least one layer")
        for j, p in enumerate(layers):
            if p.lattice != self.lattice:
                raise LatticeError(f"layer {j + 1} is defined on a different lattice")
        v = np.array(self.v_coeffs, dtype=complex)
        if v.shape != (self.lattice.size,):
            raise LatticeError(f"v_coeffs has shape {v.shape}, lattice size is {self.lattice.size}")
        v.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "v_coeffs", v)
        if self.offset is not None:
            object.__setattr__(self, "offset", complex(self.offset))
        if self.selectors is not None:
            object.__setattr__(self, "selectors", tuple(float(s) for s in self.selectors))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def output_selectors(self) -> tuple[float, ...]:
        if self.selectors is not None:
            return self.selectors
        return default_selectors(self.lattice.dims - 1)

    def map_targets(self, states) -> np.ndarray:
        """Targets comparable with ``predict_vector`` for the given raw state coordinates."""
        return TARGET_MAPS[self.target_map](np.asarray(states, dtype=float))

    def with_layers(self, layers) -> "DeepKoopmanModel":
        return replace(self, layers=tuple(layers))


def layer_action(params: gen.GeneratorParams, cfg: ExpmvConfig, adjoint: bool = False,
                 diag: ExpmvDiagnostics | None = None, t: float = 1.0):
    """Closure ``u -> exp(t L) u`` (or with L^*), accumulating matvecs into ``diag``.

    A diagonal L (every factor supported on the zero offset) is exponentiated exactly.
    """
    op = params.operator
    fn = op.rmatvec if adjoint else op.matvec
    if op.diagonal is not None:
        scale = np.exp(t * (np.conj(op.diagonal) if adjoint else op.diagonal))
        return lambda u: scale * np.asarray(u, dtype=complex)

    def act(u):
        w, d = expmv(fn, u, cfg, t=t)
        if diag is not None:
            diag.matvec_count += d.matvec_count
            diag.subspace_dims.extend(d.subspace_dims)
            diag.final_error_estimate += d.final_error_estimate
        return w

    return act


def forward_states(model: DeepKoopmanModel, diag: ExpmvDiagnostics | None = None,
                   down_to: int = 1) -> list[np.ndarray]:
    """States ``[w_1, ..., w_{J+1}]`` (index j-1 holds w_j); entries below ``down_to`` are None."""
    J = model.n_layers
    states: list = [None] * (J + 1)
    states[J] = model.v_coeffs.copy()
    for j in range(J, down_to - 1, -1):
        try:
            states[j - 1] = layer_action(model.layers[j - 1], model.expmv_cfg, diag=diag)(states[j])
        except ExpmvError as exc:
            raise ExpmvError(f"layer {j}: {exc}", exc.best, exc.time_reached, exc.error_estimate) from exc
    return states


def forward_coefficients(model: DeepKoopmanModel, from_layer: int) -> np.ndarray:
    J = model.n_layers
    if not 1 <= from_layer <= J + 1:
        raise ValueError(f"from_layer must be in [1, {J + 1}], got {from_layer}")
    return forward_states(model, down_to=from_layer)[from_layer - 1]


def predict(model: DeepKoopmanModel, points, from_layer: int = 1) -> np.ndarray:
    w = forward_coefficients(model, from_layer)
    out = synthesize(w, model.lattice, points)
    if model.offset is not None:
        out = out + model.offset
    return out


def lift_points(base_points, selectors: Sequence[float]) -> np.ndarray:
    """Stack (x, selector_k) rows: output shape (m * n_out, d'+1), point-major."""
    x = np.atleast_2d(np.asarray(base_points, dtype=float))
    sel = np.asarray(selectors, dtype=float)
    m, n_out = x.shape[0], sel.size
    rep = np.repeat(x, n_out, axis=0)
    return np.column_stack([rep, np.tile(sel, m)])


def predict_vector(model: DeepKoopmanModel, base_points, selectors: Sequence[float] | None = None,
                   from_layer: int = 1, return_imag: bool = False):
    """Real vector prediction: component k is Re G_j(x, selectors[k])."""
    sel = model.output_selectors if selectors is None else tuple(selectors)
    x = np.atleast_2d(np.asarray(base_points, dtype=float))
    if x.shape[1] + 1 != model.lattice.dims:
        raise LatticeError(
            f"base points have dimension {x.shape[1]}, model lattice needs {model.lattice.dims - 1}"
        )
    vals = predict(model, lift_points(x, sel), from_layer).reshape(x.shape[0], len(sel))
    if return_imag:
        return vals.real, float(np.abs(vals.imag).max(initial=0.0))
    return vals.real


def lifted_features(lattice: IndexLattice, base_points, selectors) -> np.ndarray:
    """Fourier features at lifted points, shape (m, n_out, |N|)."""
    x = np.atleast_2d(np.asarray(base_points, dtype=float))
    feats = fourier_features(lattice, lift_points(x, selectors))
    return feats.reshape(x.shape[0], len(selectors), lattice.size)


# ---------------------------------------------------------------------------
# persistence


def _complex_doc(c: np.ndarray) -> dict:
    return {"re": [float(x) for x in c.real], "im": [float(x) for x in c.imag]}


def model_to_dict(model: DeepKoopmanModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "lattice": model.lattice.to_dict(),
        "layers": [gen.params_to_dict(p) for p in model.layers],
        "v_coeffs": _complex_doc(model.v_coeffs),
        "offset": None if model.offset is None else {"re": model.offset.real, "im": model.offset.imag},
        "selectors": None if model.selectors is None else list(model.selectors),
        "expmv_cfg": model.expmv_cfg.to_dict(),
        "target_map": model.target_map,
    }


def _require(doc, key, path):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"{path}: missing field {key!r}")
    return doc[key]


def model_from_dict(doc: dict) -> DeepKoopmanModel:
    version = _require(doc, "format_version", "$")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"$.format_version: unsupported version {version!r} (expected {FORMAT_VERSION})")
    lat_doc = _require(doc, "lattice", "$")
    for key in ("dims", "bounds", "include_zero"):
        _require(lat_doc, key, "$.lattice")
    try:
        lattice = IndexLattice.from_dict(lat_doc)
    except (LatticeError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"$.lattice: {exc}") from exc
    layers = []
    for j, ldoc in enumerate(_require(doc, "layers", "$")):
        path = f"$.layers[{j}]"
        for key in ("t_scale", "real_constrained", "factors"):
            _require(ldoc, key, path)
        try:
            layers.append(gen.params_from_dict(ldoc, lattice))
        except (gen.GeneratorError, LatticeError, KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: {exc}") from exc
    vdoc = _require(doc, "v_coeffs", "$")
    re = np.asarray(_require(vdoc, "re", "$.v_coeffs"), dtype=float)
    im = np.asarray(_require(vdoc, "im", "$.v_coeffs"), dtype=float)
    if re.shape != (lattice.size,) or im.shape != (lattice.size,):
        raise ModelFormatError(f"$.v_coeffs: expected {lattice.size} entries, got {re.shape}/{im.shape}")
    off = doc.get("offset")
    offset = None if off is None else complex(float(off["re"]), float(off["im"]))
    sel = doc.get("selectors")
    cfg_doc = doc.get("expmv_cfg") or {}
    try:
        cfg = ExpmvConfig(**cfg_doc)
        return DeepKoopmanModel(lattice, tuple(layers), re + 1j * im, offset, cfg,
                                None if sel is None else tuple(sel), doc.get("target_map", "identity"))
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"$: {exc}") from exc


def dumps_model(model: DeepKoopmanModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model: DeepKoopmanModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> DeepKoopmanModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)


def init_model(
    lattice: IndexLattice,
    n_layers: int,
    support,
    seed: int = 0,
    std: float = 0.05,
    observable: ObservableSpec | None = None,
    real_constrained: bool = True,
    ranks: int = 1,
    t_scale: float = 1.0,
    expmv_cfg: ExpmvConfig | None = None,
    offset: complex | None = None,
    selectors=None,
) -> DeepKoopmanModel:
    """Random initial model with complex-normal coefficients of standard deviation ``std``."""
    rng = np.random.default_rng(seed)
    layers = tuple(
        gen.random_params(lattice, support, rng, std, t_scale, real_constrained, ranks)
        for _ in range(n_layers)
    )
    observable = observable or ObservableSpec("selector_sincos", selectors=selectors)
    v = project_observable(observable, lattice)
    return DeepKoopmanModel(lattice, layers, v, offset, expmv_cfg or ExpmvConfig(), selectors,
                            OBSERVABLE_TARGETS.get(observable.kind, "identity"))
