"""Loss, exact gradients through chains of exponentials, regularizers and Adam.

Gradients use the Frechet identity
``D exp(L)[E] = int_0^1 exp((1-s) L) E exp(s L) ds`` evaluated by
Gauss-Legendre quadrature over states propagated with ``expmv``.  For a real
loss and complex coefficient ``a`` the packed gradient is
``dloss/dRe(a) + i dloss/dIm(a)``, which is later chained onto the real free
parameters (see ``generator.coeff_grads_to_free``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import generator as gen
from .dynamics import TrajectoryDataset
from .krylov import ExpmvDiagnostics, ExpmvError, expmv, spectral_norm_pair
from .model import DeepKoopmanModel, forward_states, layer_action, lifted_features


class NonFiniteLossError(ArithmeticError):
    """Training diverged; ``model`` holds the last finite state and ``log`` the records so far."""

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log or []


# ---------------------------------------------------------------------------
# batches


@dataclass(eq=False)
class Batch:
    from_layer: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.from_layer = np.asarray(self.from_layer, dtype=np.int64).reshape(-1)
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        n = self.from_layer.shape[0]
        if self.inputs.shape[0] != n or self.targets.shape[0] != n:
            raise ValueError("from_layer, inputs and targets must have equal length")

    def __len__(self):
        return self.from_layer.shape[0]

    def subset(self, idx) -> "Batch":
        feats = None if self.features is None else self.features[idx]
        return Batch(self.from_layer[idx], self.inputs[idx], self.targets[idx], feats)

    def with_features(self, model: DeepKoopmanModel) -> "Batch":
        if self.features is not None:
            return self
        feats = lifted_features(model.lattice, self.inputs, model.output_selectors)
        return Batch(self.from_layer, self.inputs, self.targets, feats)

    def split(self, batch_size: int | None, rng: np.random.Generator | None = None) -> list["Batch"]:
        n = len(self)
        order = np.arange(n) if rng is None else rng.permutation(n)
        if not batch_size or batch_size >= n:
            return [self.subset(order)]
        return [self.subset(order[i:i + batch_size]) for i in range(0, n, batch_size)]

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        return Batch(np.concatenate([b.from_layer for b in batches]),
                     np.concatenate([b.inputs for b in batches]),
                     np.concatenate([b.targets for b in batches]))


def build_samples(states: np.ndarray, mode: str = "pair_endpoints", n_layers: int | None = None,
                  window_len: int | None = None, end: int | None = None) -> Batch:
    """Training triples from embedded states of shape (S, T+1, d).

    ``pair_endpoints``: (1, x_{s,0}, x_{s,end}) with ``end`` defaulting to T.
    ``windowed``: for j = 1..n_layers and l < window_len,
    (j, x_{s,(j-1)*window_len + l}, x_{s,n_layers*window_len + l}).
    """
    states = np.asarray(states, dtype=float)
    S, T1, _ = states.shape
    if mode == "pair_endpoints":
        end = T1 - 1 if end is None else end
        if not 0 < end < T1:
            raise ValueError(f"series of length {T1} has no sample index {end}")
        return Batch(np.ones(S, dtype=np.int64), states[:, 0], states[:, end])
    if mode == "windowed":
        if not n_layers or not window_len:
            raise ValueError("windowed batching needs n_layers and window_len")
        need = (n_layers + 1) * window_len
        if T1 < need:
            raise ValueError(f"windowed batching needs {need} samples per series, got {T1}")
        layers, inputs, targets = [], [], []
        for j in range(1, n_layers + 1):
            for l in range(window_len):
                layers.append(np.full(S, j))
                inputs.append(states[:, (j - 1) * window_len + l])
                targets.append(states[:, n_layers * window_len + l])
        return Batch(np.concatenate(layers), np.concatenate(inputs), np.concatenate(targets))
    raise ValueError(f"unknown batching mode {mode!r}")


def build_batches(dataset: TrajectoryDataset, mode: str = "pair_endpoints", n_layers: int | None = None,
                  window_len: int | None = None, batch_size: int | None = None,
                  seed: int | None = None) -> list[Batch]:
    samples = build_samples(dataset.states, mode, n_layers, window_len)
    rng = None if seed is None else np.random.default_rng(seed)
    return samples.split(batch_size, rng)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    quadrature_nodes: int = 12
    lambda_norm: float = 0.0
    lambda_cont: float = 0.0
    norm_iters: int = 5
    seed: int = 0
    learn_offset: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.quadrature_nodes < 2:
            raise ValueError("quadrature_nodes must be >= 2")
        if self.norm_iters < 1:
            raise ValueError("norm_iters must be >= 1")
        if self.lambda_norm < 0 or self.lambda_cont < 0:
            raise ValueError("regularizer weights must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.step)
    vhat = state.v / (1 - beta2 ** state.step)
    return theta - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# free parameters of a whole model


def model_free(model: DeepKoopmanModel, learn_offset: bool = False) -> np.ndarray:
    parts = [gen.free_from_params(p) for p in model.layers]
    if learn_offset:
        parts.append(np.array([0.0 if model.offset is None else model.offset.real]))
    return np.concatenate(parts)


def model_from_free(template: DeepKoopmanModel, theta, learn_offset: bool = False) -> DeepKoopmanModel:
    theta = np.asarray(theta, dtype=float)
    layers, at = [], 0
    for p in template.layers:
        size = p.free_size
        layers.append(gen.params_from_free(p, theta[at:at + size]))
        at += size
    offset = template.offset
    if learn_offset:
        im = 0.0 if template.offset is None else template.offset.imag
        offset = complex(theta[at], im)
        at += 1
    if at != theta.shape[0]:
        raise ValueError(f"free vector has {theta.shape[0]} entries, model uses {at}")
    return replace(template, layers=tuple(layers), offset=offset)


# ---------------------------------------------------------------------------
# loss


def _predictions(model: DeepKoopmanModel, batch: Batch, states: list) -> np.ndarray:
    feats = batch.features
    pred = np.empty(batch.targets.shape)
    for j in np.unique(batch.from_layer):
        rows = batch.from_layer == j
        pred[rows] = (feats[rows] @ states[j - 1]).real
    if model.offset is not None:
        pred += model.offset.real
    return pred


def _check_batch(model: DeepKoopmanModel, batch: Batch) -> Batch:
    if len(batch) == 0:
        raise ValueError("empty batch")
    J = model.n_layers
    if batch.from_layer.min() < 1 or batch.from_layer.max() > J:
        raise ValueError(f"from_layer values must lie in [1, {J}]")
    if batch.targets.shape[1] != len(model.output_selectors):
        raise ValueError("target dimension does not match the number of selectors")
    return batch.with_features(model)


def loss(model: DeepKoopmanModel, batch: Batch) -> float:
    """Sum over samples of the squared distance between prediction and target."""
    batch = _check_batch(model, batch)
    states = forward_states(model, down_to=int(batch.from_layer.min()))
    resid = _predictions(model, batch, states) - batch.targets
    return float(np.sum(resid * resid))


def per_layer_mse(model: DeepKoopmanModel, batch: Batch) -> dict[int, tuple[int, float]]:
    """{from_layer: (count, mean squared distance)}."""
    batch = _check_batch(model, batch)
    states = forward_states(model, down_to=int(batch.from_layer.min()))
    sq = np.sum((_predictions(model, batch, states) - batch.targets) ** 2, axis=1)
    return {int(j): (int((batch.from_layer == j).sum()), float(sq[batch.from_layer == j].mean()))
            for j in np.unique(batch.from_layer)}


def mse(model: DeepKoopmanModel, batch: Batch) -> float:
    return loss(model, batch) / len(batch)


# ---------------------------------------------------------------------------
# Frechet-quadrature gradient of one layer


def gauss_legendre_01(q: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


def _propagate(params, cfg, u, gamma, nodes, diag):
    """States exp(s_q L) u and exp((1-s_q) L^*) gamma at every node, plus exp(L^*) gamma."""
    op = params.operator
    n, q = u.shape[0], nodes.shape[0]
    us = np.empty((n, q), dtype=complex)
    gs = np.empty((n, q), dtype=complex)

    def step(fn, x, dt):
        w, d = expmv(fn, x, cfg, t=dt)
        diag.matvec_count += d.matvec_count
        return w

    cur, prev = u, 0.0
    for i in range(q):
        cur = step(op.matvec, cur, nodes[i] - prev)
        us[:, i] = cur
        prev = nodes[i]
    cur, prev = gamma, 1.0
    for i in range(q - 1, -1, -1):
        cur = step(op.rmatvec, cur, prev - nodes[i])
        gs[:, i] = cur
        prev = nodes[i]
    back = step(op.rmatvec, cur, nodes[0])
    return us, gs, back


def layer_coefficient_grads(params: gen.GeneratorParams, cfg, pairs, n_nodes: int,
                            diag: ExpmvDiagnostics | None = None):
    """Packed coefficient gradients of ``sum_p Re <gamma_p, exp(L) u_p>`` for one layer.

    ``pairs`` is a list of (u, gamma).  Returns ``(grads[k][r], backs)`` where
    ``backs[p] = exp(L^*) gamma_p`` is the adjoint handed to the next layer.
    """
    diag = diag if diag is not None else ExpmvDiagnostics()
    nodes, weights = gauss_legendre_01(n_nodes)
    op = params.operator
    us, gs, backs = [], [], []
    for u, gamma in pairs:
        a, b, back = _propagate(params, cfg, np.asarray(u, complex), np.asarray(gamma, complex), nodes, diag)
        us.append(a)
        gs.append(b * weights)  # weights absorbed into the adjoint side (real)
        backs.append(back)
    U = np.concatenate(us, axis=1)
    G = np.concatenate(gs, axis=1)
    t = params.t_scale
    grads = []
    base_cache: dict = {}
    for k, (mats, sts) in enumerate(zip(op.mats, op.stencils)):
        dk = op.diag[k]
        row = []
        R = len(mats)
        for r in range(R):
            st = sts[r]
            if R == 1:
                key = id(st)
                if key not in base_cache:
                    base_cache[key] = np.einsum("pq,pq->p", G[st.dst].conj(), U[st.src])
                z = base_cache[key] * dk[st.src]
            else:
                left = G
                for i in range(r):
                    left = op.mats_h[k][i] @ left
                right = dk[:, None] * U
                for i in range(R - 1, r, -1):
                    right = mats[i] @ right
                z = np.einsum("pq,pq->p", left[st.dst].conj(), right[st.src])
            c = np.bincount(st.coef, z.real, st.n_offsets) + 1j * np.bincount(st.coef, z.imag, st.n_offsets)
            row.append(np.conj(t * c))
        grads.append(row)
    return grads, backs


def _add_grads(acc, extra, sign=1.0):
    return [[a + sign * b for a, b in zip(ra, rb)] for ra, rb in zip(acc, extra)]


# ---------------------------------------------------------------------------
# regularizers


@dataclass
class RegularizerTerms:
    value: float = 0.0
    norm_value: float = 0.0
    cont_value: float = 0.0
    converged: bool = True
    pairs: dict = field(default_factory=dict)  # layer index (1-based) -> list of (u, gamma)


def _reg_seed(seed: int, kind: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, kind, j]).generate_state(1)[0])


def regularizer_terms(model: DeepKoopmanModel, lambda_norm: float, lambda_cont: float, iters: int = 5,
                      seed: int = 0, diag: ExpmvDiagnostics | None = None) -> RegularizerTerms:
    """Spectral-norm regularizers and their Frechet seeds (u = right vector, gamma = weighted left vector)."""
    out = RegularizerTerms()
    n = model.lattice.size
    cfg = model.expmv_cfg
    J = model.n_layers
    fwd = [layer_action(p, cfg, diag=diag) for p in model.layers]
    bwd = [layer_action(p, cfg, adjoint=True, diag=diag) for p in model.layers]

    def note(j, u, g):
        out.pairs.setdefault(j, []).append((u, g))

    if lambda_norm > 0:
        for j in range(1, J + 1):
            est = spectral_norm_pair(fwd[j - 1], bwd[j - 1], n, iters, _reg_seed(seed, 0, j))
            out.norm_value += lambda_norm * est.sigma
            out.converged &= est.rel_change <= 1e-2
            if est.sigma > 0:
                note(j, est.right, lambda_norm * est.left)
    if lambda_cont > 0:
        for j in range(2, J + 1):
            a, b = fwd[j - 1], fwd[j - 2]
            ah, bh = bwd[j - 1], bwd[j - 2]
            est = spectral_norm_pair(lambda x: a(x) - b(x), lambda y: ah(y) - bh(y), n, iters,
                                     _reg_seed(seed, 1, j))
            out.cont_value += lambda_cont * est.sigma
            out.converged &= est.rel_change <= 1e-2
            if est.sigma > 0:
                note(j, est.right, lambda_cont * est.left)
                note(j - 1, est.right, -lambda_cont * est.left)
    out.value = out.norm_value + out.cont_value
    return out


def regularize(model: DeepKoopmanModel, lambda_norm: float, lambda_cont: float, iters: int = 5,
               seed: int = 0, n_nodes: int = 12):
    """Regularizer value, its free-parameter gradient and the estimator convergence flag."""
    terms = regularizer_terms(model, lambda_norm, lambda_cont, iters, seed)
    parts = []
    for j, p in enumerate(model.layers, start=1):
        pairs = terms.pairs.get(j, [])
        if pairs:
            g, _ = layer_coefficient_grads(p, model.expmv_cfg, pairs, n_nodes)
            parts.append(gen.coeff_grads_to_free(p, g))
        else:
            parts.append(np.zeros(p.free_size))
    return terms.value, np.concatenate(parts), terms.converged


def regularizer_value(model: DeepKoopmanModel, lambda_norm: float, lambda_cont: float, iters: int = 5,
                      seed: int = 0) -> float:
    return regularizer_terms(model, lambda_norm, lambda_cont, iters, seed).value


# ---------------------------------------------------------------------------
# full objective


@dataclass
class GradientResult:
    grad: np.ndarray
    loss: float
    data_loss: float
    reg_norm: float
    reg_cont: float
    reg_converged: bool
    matvecs: int


def objective_and_gradient(model: DeepKoopmanModel, batch: Batch, cfg: TrainConfig | None = None) -> GradientResult:
    cfg = cfg or TrainConfig()
    batch = _check_batch(model, batch)
    J = model.n_layers
    diag = ExpmvDiagnostics()
    states = forward_states(model, diag=diag)
    resid = _predictions(model, batch, states) - batch.targets
    data_loss = float(np.sum(resid * resid))

    n = model.lattice.size
    seeds = np.zeros((J + 1, n), dtype=complex)
    for j in np.unique(batch.from_layer):
        rows = batch.from_layer == j
        seeds[j - 1] = 2.0 * np.einsum("sk,skn->n", resid[rows], batch.features[rows].conj())

    reg = RegularizerTerms()
    if cfg.lambda_norm > 0 or cfg.lambda_cont > 0:
        reg = regularizer_terms(model, cfg.lambda_norm, cfg.lambda_cont, cfg.norm_iters, cfg.seed, diag)

    parts = []
    gamma = np.zeros(n, dtype=complex)
    for j in range(1, J + 1):
        gamma = gamma + seeds[j - 1]
        params = model.layers[j - 1]
        pairs = [(states[j], gamma)] + reg.pairs.get(j, [])
        grads, backs = layer_coefficient_grads(params, model.expmv_cfg, pairs, cfg.quadrature_nodes, diag)
        parts.append(gen.coeff_grads_to_free(params, grads))
        gamma = backs[0]
    if cfg.learn_offset:
        parts.append(np.array([2.0 * resid.sum()]))
    grad = np.concatenate(parts)
    return GradientResult(grad, data_loss + reg.value, data_loss, reg.norm_value, reg.cont_value,
                          reg.converged, diag.matvec_count)


def gradient(model: DeepKoopmanModel, batch: Batch, cfg: TrainConfig | None = None):
    """(free-parameter gradient, objective value) including enabled regularizers."""
    res = objective_and_gradient(model, batch, cfg)
    return res.grad, res.loss


def objective(model: DeepKoopmanModel, batch: Batch, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    value = loss(model, batch)
    if cfg.lambda_norm > 0 or cfg.lambda_cont > 0:
        value += regularizer_value(model, cfg.lambda_norm, cfg.lambda_cont, cfg.norm_iters, cfg.seed)
    return value


def central_differences(fun: Callable[[np.ndarray], float], theta, h: float) -> np.ndarray:
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return out


def fd_gradient_oracle(model: DeepKoopmanModel, batch: Batch, h: float = 1e-5,
                       cfg: TrainConfig | None = None) -> np.ndarray:
    """Central differences of the objective over every free parameter."""
    cfg = cfg or TrainConfig()
    batch = batch.with_features(model)
    theta = model_free(model, cfg.learn_offset)
    return central_differences(
        lambda th: objective(model_from_free(model, th, cfg.learn_offset), batch, cfg), theta, h
    )


# ---------------------------------------------------------------------------
# optimizer loop


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def adam_train(train: Batch, model: DeepKoopmanModel, cfg: TrainConfig, test: Batch | None = None,
               log_path=None, callback=None):
    """Adam on the free parameters; returns ``(model, log)``.

    Each log record: epoch, train_loss (mean per sample), test_loss (if a test
    batch is given), reg_norm, reg_cont, grad_norm, matvecs.
    """
    rng = np.random.default_rng(cfg.seed)
    train = train.with_features(model)
    if test is not None:
        test = test.with_features(model)
    theta = model_free(model, cfg.learn_offset)
    state = AdamState.zeros(theta.shape[0])
    log: list[dict] = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            total, matvecs = 0.0, 0
            res = None
            for mb in train.split(cfg.batch_size, rng):
                try:
                    res = objective_and_gradient(model, mb, cfg)
                except ExpmvError as exc:
                    raise NonFiniteLossError(f"epoch {epoch}: {exc}", model, log) from exc
                if not (math.isfinite(res.loss) and _finite(res.grad)):
                    raise NonFiniteLossError(f"epoch {epoch}: non-finite loss or gradient", model, log)
                total += res.data_loss
                matvecs += res.matvecs
                new_theta = adam_step(theta, res.grad, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
                try:
                    candidate = model_from_free(model, new_theta, cfg.learn_offset)
                except gen.GeneratorError as exc:
                    raise NonFiniteLossError(f"epoch {epoch}: {exc}", model, log) from exc
                theta, model = new_theta, candidate
            rec = {"epoch": epoch, "train_loss": total / len(train)}
            if test is not None:
                try:
                    rec["test_loss"] = mse(model, test)
                except ExpmvError as exc:
                    raise NonFiniteLossError(f"epoch {epoch}: {exc}", model, log) from exc
            rec.update(reg_norm=res.reg_norm, reg_cont=res.reg_cont,
                       grad_norm=float(np.linalg.norm(res.grad)), matvecs=matvecs)
            log.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if callback is not None:
                callback(rec, model)
    finally:
        if fh is not None:
            fh.close()
    return model, log


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
