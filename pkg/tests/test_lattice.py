import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman.lattice import (
    IndexLattice,
    LatticeError,
    analyze,
    build_lattice,
    fourier_features,
    frequency_diagonal,
    grid_points,
    synthesize,
)

bounds_st = st.lists(st.tuples(st.integers(-3, 0), st.integers(0, 3)), min_size=1, max_size=3)


def test_sizes_of_experiment_lattices():
    assert build_lattice(3, 5, include_zero=False).size == 11 ** 3 - 1 == 1330
    assert build_lattice(1, [(0, 0)]).size == 1
    assert build_lattice(3, [(-5, 5), (-5, 5), (-2, 2)]).size == 11 * 11 * 5 == 605


def test_invalid_bounds_rejected():
    with pytest.raises(LatticeError):
        build_lattice(2, [(1, 0), (0, 1)])
    with pytest.raises(LatticeError):
        build_lattice(0, 1)


def test_row_major_ascending_order():
    lat = build_lattice(2, [(-1, 1), (0, 1)])
    assert lat.indices.tolist() == [[-1, 0], [-1, 1], [0, 0], [0, 1], [1, 0], [1, 1]]


def _nonempty(bounds, include_zero):
    return include_zero or any(lo < 0 or hi > 0 for lo, hi in bounds)


def test_empty_lattice_rejected():
    with pytest.raises(LatticeError):
        build_lattice(2, [(0, 0), (0, 0)], include_zero=False)


def _mesh(shape):
    return np.meshgrid(*grid_points(shape), indexing="ij")


@given(bounds_st, st.booleans())
def test_flat_multi_round_trip(bounds, include_zero):
    if not _nonempty(bounds, include_zero):
        return
    lat = build_lattice(len(bounds), bounds, include_zero)
    pos = np.arange(lat.size)
    assert np.array_equal(lat.positions(lat.indices), pos)
    for p in pos[:20]:
        assert lat.position(lat.multi_index(p)) == p
    if not include_zero:
        assert not np.any(np.all(lat.indices == 0, axis=1))


@given(bounds_st, st.booleans())
def test_bounds_respected_and_determinism(bounds, include_zero):
    if not _nonempty(bounds, include_zero):
        return
    a = build_lattice(len(bounds), bounds, include_zero)
    b = build_lattice(len(bounds), bounds, include_zero)
    assert np.array_equal(a.indices, b.indices)
    lo = np.array([x for x, _ in bounds])
    hi = np.array([y for _, y in bounds])
    assert np.all(a.indices >= lo) and np.all(a.indices <= hi)


def test_single_mode_synthesis():
    lat = build_lattice(3, 1)
    c = np.zeros(lat.size, complex)
    c[lat.position((1, 0, 0))] = 1.0
    val = synthesize(c, lat, [[0.3, 0.0, 0.0]])[0]
    assert val == pytest.approx(np.cos(0.3) + 1j * np.sin(0.3), abs=1e-15)
    assert np.all(synthesize(np.zeros(lat.size), lat, np.random.default_rng(0).uniform(-3, 3, (5, 3))) == 0)


def test_analyze_band_limited_round_trip(rng):
    lat = build_lattice(2, 3)
    g = _mesh((8, 8))
    c = analyze(np.exp(2j * g[0]), lat)
    x = rng.uniform(-np.pi, np.pi, (50, 2))
    assert np.abs(synthesize(c, lat, x) - np.exp(2j * x[:, 0])).max() < 1e-12


def test_analyze_constant_and_basis():
    lat = build_lattice(2, 2)
    g = _mesh((6, 6))
    c = analyze(np.ones((6, 6)), lat)
    e0 = np.zeros(lat.size)
    e0[lat.position((0, 0))] = 1
    assert np.abs(c - e0).max() < 1e-15
    c = analyze(np.exp(1j * g[0]), lat)
    e1 = np.zeros(lat.size)
    e1[lat.position((1, 0))] = 1
    assert np.abs(c - e1).max() < 1e-15


def test_analyze_rejects_aliasing_grid():
    lat = build_lattice(1, 3)
    with pytest.raises(LatticeError):
        analyze(np.ones(6), lat)


def test_sawtooth_selector_coefficient_by_quadrature():
    # f = sin(z) saw(x) + cos(z) saw(y); saw(x) = x on (-pi, pi)
    lat = build_lattice(3, [(-2, 2), (-2, 2), (-1, 1)])
    G = 4096
    t = 2 * np.pi * np.arange(G) / G
    saw = np.where(t < np.pi, t, t - 2 * np.pi)
    saw[G // 2] = 0.0  # midpoint value at the jump
    # separable: only the x and z factors matter for n = (1, 0, 1)
    cx = np.mean(saw * np.exp(-1j * t))
    cz = np.mean(np.sin(t) * np.exp(-1j * t))
    assert cx * cz == pytest.approx(-0.5, abs=1e-3)
    from deepkoopman.model import ObservableSpec, project_observable
    v = project_observable(ObservableSpec("selector_sincos"), lat)
    assert v[lat.position((1, 0, 1))] == pytest.approx(-0.5, abs=1e-15)


@given(bounds_st, st.integers(0, 2 ** 31 - 1))
def test_analyze_inverts_synthesize(bounds, seed):
    lat = build_lattice(len(bounds), bounds)
    r = np.random.default_rng(seed)
    c = r.normal(size=lat.size) + 1j * r.normal(size=lat.size)
    shape = tuple(2 * max(-lo, hi) + 1 for lo, hi in bounds)
    g = _mesh(shape)
    pts = np.stack([a.ravel() for a in g], axis=1)
    f = synthesize(c, lat, pts).reshape(shape)
    assert np.abs(analyze(f, lat) - c).max() <= 1e-12 * max(1.0, np.abs(c).max())


@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_synthesize_linear(seed, alpha, beta):
    lat = build_lattice(2, 2)
    r = np.random.default_rng(seed)
    a = r.normal(size=lat.size) + 1j * r.normal(size=lat.size)
    b = r.normal(size=lat.size) + 1j * r.normal(size=lat.size)
    x = r.uniform(-np.pi, np.pi, (7, 2))
    lhs = synthesize(alpha * a + beta * b, lat, x)
    rhs = alpha * synthesize(a, lat, x) + beta * synthesize(b, lat, x)
    assert np.abs(lhs - rhs).max() <= 1e-13 * max(1.0, np.abs(rhs).max())


def test_points_reduced_mod_two_pi():
    lat = build_lattice(1, 2)
    c = np.arange(lat.size) + 1j
    x = np.array([[0.7]])
    assert np.abs(synthesize(c, lat, x + 2 * np.pi) - synthesize(c, lat, x)).max() < 1e-12


def test_coefficient_length_checked():
    lat = build_lattice(1, 2)
    with pytest.raises(LatticeError):
        synthesize(np.zeros(3), lat, [[0.0]])


def test_frequency_diagonal():
    assert frequency_diagonal(build_lattice(1, 2), 1)[4] == 2j
    lat = build_lattice(2, 3)
    assert frequency_diagonal(lat, 2)[lat.position((3, -1))] == -1j
    assert frequency_diagonal(lat, 1)[lat.position((0, 0))] == 0
    with pytest.raises(LatticeError):
        frequency_diagonal(lat, 3)
    with pytest.raises(LatticeError):
        frequency_diagonal(lat, 0)


def test_features_match_synthesis(rng):
    lat = build_lattice(2, [(-2, 1), (0, 2)], include_zero=False)
    x = rng.uniform(-np.pi, np.pi, (9, 2))
    c = rng.normal(size=lat.size)
    assert np.abs(fourier_features(lat, x) @ c - synthesize(c, lat, x)).max() < 1e-13


def test_dict_round_trip():
    lat = build_lattice(3, [(-1, 2), (0, 0), (-3, 1)], include_zero=False)
    assert IndexLattice.from_dict(lat.to_dict()) == lat
