import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman import generator as gen
from deepkoopman.lattice import build_lattice, fourier_features
from deepkoopman.model import DeepKoopmanModel, ObservableSpec, init_model, lift_points, predict_vector
from deepkoopman.training import (
    AdamState,
    Batch,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    adam_train,
    build_samples,
    central_differences,
    fd_gradient_oracle,
    gauss_legendre_01,
    gradient,
    loss,
    model_free,
    model_from_free,
    mse,
    per_layer_mse,
    read_log,
    regularize,
    regularizer_terms,
    regularizer_value,
)

from test_generator import divergence_free_params

SMALL = build_lattice(3, 1)  # 27 modes


def small_model(seed=0, layers=2, std=0.2):
    support = gen.box_offsets([(-1, 1), (0, 0), (0, 0)])
    return init_model(SMALL, layers, support, seed=seed, std=std)


def small_batch(seed=0, count=6, layers=2):
    r = np.random.default_rng(seed)
    return Batch(r.integers(1, layers + 1, size=count), r.uniform(-2, 2, size=(count, 2)),
                 r.uniform(-1, 1, size=(count, 2)))


# ---------------------------------------------------------------------------
# samples


def test_windowed_indices():
    S, d = 3, 2
    t = np.arange(120, dtype=float)
    states = np.broadcast_to(t[None, :, None], (S, 120, d)).copy()
    b = build_samples(states, "windowed", n_layers=5, window_len=20)
    assert len(b) == 5 * 20 * S
    first = (b.from_layer == 1) & (b.inputs[:, 0] == 0)
    assert np.all(b.targets[first, 0] == 100)
    last = (b.from_layer == 5) & (b.inputs[:, 0] == 99)
    assert np.all(b.targets[last, 0] == 119)
    assert first.sum() == last.sum() == S


def test_pair_endpoints_and_errors():
    states = np.arange(2 * 101 * 2, dtype=float).reshape(2, 101, 2)
    b = build_samples(states)
    assert np.array_equal(b.inputs, states[:, 0]) and np.array_equal(b.targets, states[:, 100])
    assert np.all(b.from_layer == 1)
    with pytest.raises(ValueError):
        build_samples(states, "windowed", n_layers=5, window_len=20)
    with pytest.raises(ValueError):
        build_samples(states, "bogus")


def test_split_covers_every_sample_once():
    b = small_batch(count=11)
    parts = b.split(4, np.random.default_rng(0))
    assert [len(p) for p in parts] == [4, 4, 3]
    merged = Batch.concat(parts)
    assert sorted(map(tuple, merged.inputs)) == sorted(map(tuple, b.inputs))


# ---------------------------------------------------------------------------
# loss


def test_perfect_fit_has_zero_loss():
    m = small_model()
    r = np.random.default_rng(1)
    x = r.uniform(-2, 2, size=(5, 2))
    from_layer = np.array([1, 2, 1, 2, 2])
    y = np.stack([predict_vector(m, x[i:i + 1], from_layer=int(j))[0] for i, j in enumerate(from_layer)])
    assert loss(m, Batch(from_layer, x, y)) <= 1e-18
    assert mse(m, Batch(from_layer, x, y)) <= 1e-18


def test_single_sample_loss_by_hand():
    lat = build_lattice(3, [(-2, 2), (-2, 2), (-1, 1)])
    m = init_model(lat, 1, np.zeros((1, 3), int), std=0.0)
    x, y = np.array([[0.5, -1.0]]), np.array([[0.0, 0.0]])
    saw = lambda t: sum(2 * (-1) ** (n + 1) * np.sin(n * t) / n for n in range(1, 3))
    assert loss(m, Batch([1], x, y)) == pytest.approx(saw(0.5) ** 2 + saw(-1.0) ** 2, rel=1e-13)
    stats = per_layer_mse(m, Batch([1], x, y))
    assert stats[1][0] == 1


def test_loss_rejects_bad_batches():
    m = small_model()
    with pytest.raises(ValueError):
        loss(m, Batch([3], [[0, 0]], [[0, 0]]))
    with pytest.raises(ValueError):
        loss(m, Batch([1], [[0, 0]], [[0, 0, 0]]))


# ---------------------------------------------------------------------------
# gradient


def test_gauss_legendre_nodes_integrate_polynomials():
    s, w = gauss_legendre_01(5)
    assert np.all((s > 0) & (s < 1))
    assert abs(w @ s ** 9 - 0.1) < 1e-15


def test_zero_residual_gives_zero_gradient():
    m = small_model()
    x = np.array([[0.1, 0.2], [1.0, -0.3]])
    y = predict_vector(m, x, from_layer=1)
    g, val = gradient(m, Batch([1, 1], x, y))
    assert val <= 1e-18
    assert np.abs(g).max() <= 1e-8


def test_diagonal_layer_gradient_by_hand():
    lat = build_lattice(3, [(-2, 2), (-2, 2), (-1, 1)])
    a = 0.3
    m = init_model(lat, 1, np.zeros((1, 3), int), std=0.0)
    theta = np.array([a, 0.0, 0.0])
    m = model_from_free(m, theta)
    r = np.random.default_rng(0)
    x, y = r.uniform(-2, 2, size=(4, 2)), r.uniform(-1, 1, size=(4, 2))
    feats = fourier_features(lat, lift_points(x, m.output_selectors)).reshape(4, 2, -1)
    n1 = lat.indices[:, 0]
    w = np.exp(1j * a * n1) * m.v_coeffs
    resid = (feats @ w).real - y
    dpred = (feats @ (1j * n1 * w)).real
    expected = 2 * np.sum(resid * dpred)
    g, _ = gradient(m, Batch(np.ones(4), x, y))
    assert abs(g[0] - expected) <= 1e-8 * abs(expected)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_matches_finite_differences(seed):
    m = small_model(seed, layers=2)
    b = small_batch(seed)
    g, _ = gradient(m, b)
    fd = fd_gradient_oracle(m, b, h=1e-5)
    big = np.abs(fd) > 1e-8
    assert big.sum() > 0
    assert np.max(np.abs(g - fd)[big] / np.abs(fd)[big]) <= 1e-4


def test_gradient_with_offset_matches_finite_differences():
    m = small_model(3, layers=1)
    m = DeepKoopmanModel(m.lattice, m.layers, m.v_coeffs, offset=0.3)
    b = small_batch(3, layers=1)
    cfg = TrainConfig(learn_offset=True)
    g, _ = gradient(m, b, cfg)
    fd = fd_gradient_oracle(m, b, h=1e-5, cfg=cfg)
    assert abs(g[-1] - fd[-1]) <= 1e-6 * abs(fd[-1])


def test_quadrature_refinement_is_stable():
    m = small_model(4, layers=2, std=0.3)
    b = small_batch(4)
    g12, _ = gradient(m, b, TrainConfig(quadrature_nodes=12))
    g24, _ = gradient(m, b, TrainConfig(quadrature_nodes=24))
    assert np.linalg.norm(g12 - g24) <= 1e-6 * np.linalg.norm(g24)


def test_finite_difference_step_validated():
    with pytest.raises(ValueError):
        central_differences(lambda th: 0.0, np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        TrainConfig(quadrature_nodes=1)


# ---------------------------------------------------------------------------
# regularizers


def _coefficient_model(lat, layers):
    v = np.zeros(lat.size, complex)
    return DeepKoopmanModel(lat, tuple(layers), v)


def test_regularizers_of_identity_layers():
    lat = build_lattice(2, 2)
    m = _coefficient_model(lat, [gen.make_params(lat, [[0, 0]])] * 3)
    terms = regularizer_terms(m, 1e-5, 0.01)
    assert terms.norm_value == pytest.approx(3e-5, rel=1e-14)
    assert terms.cont_value == 0


def test_regularizers_of_unitary_layers():
    lat = build_lattice(2, 2)
    r = np.random.default_rng(7)
    layers = [divergence_free_params(lat, r) for _ in range(3)]
    m = _coefficient_model(lat, layers)
    assert regularizer_value(m, 1e-5, 0.0) == pytest.approx(3e-5, rel=1e-8)
    same = _coefficient_model(lat, [layers[0]] * 3)
    assert regularizer_terms(same, 0.0, 0.01).cont_value == 0


def test_regularizer_gradient_directional():
    # a layer with a well separated top singular value lets power iteration converge
    lat = build_lattice(2, 1)
    off = np.array([[0, 0], [1, 0], [0, 1]])
    coeffs = [[np.array([0.8, 0.3 + 0.1j, 0.2j])], [np.array([0.1, -0.2, 0.4 + 0.3j])]]
    p = gen.make_params(lat, off, coeffs, ranks=1)
    q = gen.make_params(lat, off, [[0.5 * c[0]] for c in coeffs])
    m = _coefficient_model(lat, [p, q])
    value, grad, converged = regularize(m, 1.0, 1.0, iters=200, n_nodes=16)
    assert converged
    theta = model_free(m)
    d = np.random.default_rng(0).normal(size=theta.shape)
    h = 1e-6
    f = lambda th: regularizer_value(model_from_free(m, th), 1.0, 1.0, iters=200)
    fd = (f(theta + h * d) - f(theta - h * d)) / (2 * h)
    assert abs(grad @ d - fd) <= 1e-5 * abs(fd)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_converges_on_quadratic():
    c = np.array([1.0, -2.0, 0.5])
    theta = np.zeros(3)
    state = AdamState.zeros(3)
    for _ in range(3000):
        theta = adam_step(theta, 2 * (theta - c), state, 0.01)
    assert np.abs(theta - c).max() < 1e-3


@given(st.integers(0, 2 ** 31 - 1))
def test_adam_zero_learning_rate_is_identity(seed):
    r = np.random.default_rng(seed)
    theta = r.normal(size=5)
    out = adam_step(theta, r.normal(size=5), AdamState.zeros(5), 0.0)
    assert np.array_equal(out, theta)


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    m0 = small_model(2, layers=2, std=0.05)
    b = small_batch(5, count=12)
    cfg = TrainConfig(epochs=15, learning_rate=0.01, batch_size=5, seed=3)
    m1, log1 = adam_train(b, m0, cfg, test=b, log_path=tmp_path / "a.jsonl")
    m2, log2 = adam_train(b, m0, cfg, test=b, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert np.array_equal(model_free(m1), model_free(m2))
    assert log1[-1]["train_loss"] < log1[0]["train_loss"]
    assert read_log(tmp_path / "a.jsonl") == json.loads(json.dumps(log1))
    assert set(log1[0]) == {"epoch", "train_loss", "test_loss", "reg_norm", "reg_cont", "grad_norm", "matvecs"}
    for p in m1.layers:
        for fs in p.factors:
            assert all(f.is_conjugate_symmetric(atol=0.0) for f in fs)


def test_zero_learning_rate_training_keeps_parameters():
    m0 = small_model(2)
    m1, _ = adam_train(small_batch(), m0, TrainConfig(epochs=3, learning_rate=0.0))
    assert np.array_equal(model_free(m1), model_free(m0))


def test_divergence_raises_non_finite_loss():
    m0 = small_model(2)
    b = small_batch()
    b.targets[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        adam_train(b, m0, TrainConfig(epochs=2))
    assert info.value.log == []


def test_translation_model_fits_translated_targets_exactly():
    lat = build_lattice(3, 1, include_zero=False)
    m = init_model(lat, 1, np.zeros((1, 3), int), std=0.0, observable=ObservableSpec("selector_sine"))
    c = np.array([0.4, -0.7])
    m = model_from_free(m, np.array([c[0], c[1], 0.0]))
    x = np.random.default_rng(0).uniform(-3, 3, size=(10, 2))
    assert loss(m, Batch(np.ones(10), x, m.map_targets(x + c))) <= 1e-16
