import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman.dynamics import (
    DatasetFormatError,
    Embedding,
    ExtrapolationWarning,
    IntegrationError,
    SystemSpec,
    dataset_csv,
    generate_dataset,
    integrate,
    lattice_for_dataset,
    load_dataset,
    metadata_path,
    save_dataset,
    stream_flow,
    translation,
    torus_embed,
    torus_unembed,
    van_der_pol,
)

LINEAR = SystemSpec("custom", {"dim": 1, "field": lambda t, x: x})
ZERO = SystemSpec("custom", {"dim": 2, "field": lambda t, x: np.zeros_like(x)})


def test_rk4_single_step_value():
    traj = integrate(LINEAR, [1.0], 0.0, 0.1, 1)
    assert traj.shape == (2, 1)
    assert traj[1, 0] == pytest.approx(1.1051708333333332, rel=1e-15)


def test_rk4_fourth_order():
    err = [abs(integrate(LINEAR, [1.0], 0.0, 1.0 / n, n)[-1, 0] - np.e) for n in (20, 40)]
    assert 12 <= err[0] / err[1] <= 20


def test_zero_field_is_constant():
    x0 = np.array([[0.5, -0.2], [1.0, 2.0]])
    traj = integrate(ZERO, x0, 0.0, 0.1, 5)
    assert np.array_equal(traj, np.broadcast_to(x0, traj.shape))


def test_integrate_validation():
    with pytest.raises(ValueError):
        integrate(LINEAR, [1.0], 0.0, 0.0, 3)
    with pytest.raises(ValueError):
        integrate(LINEAR, [1.0], 0.0, 0.1, 0)


@given(st.integers(0, 2 ** 31 - 1))
def test_stream_flow_is_divergence_free(seed):
    r = np.random.default_rng(seed)
    t, x = r.uniform(0, 10), r.uniform(-np.pi, np.pi, size=2)
    f, h = stream_flow().field, 1e-5
    e1, e2 = np.array([h, 0.0]), np.array([0.0, h])
    div = (f(t, x + e1)[0] - f(t, x - e1)[0] + f(t, x + e2)[1] - f(t, x - e2)[1]) / (2 * h)
    assert abs(div) <= 1e-6


def test_stream_flow_preserves_area():
    r = np.random.default_rng(0)
    sys, h = stream_flow(), 1e-6
    for x in r.uniform(-np.pi, np.pi, size=(5, 2)):
        cols = []
        for e in np.eye(2) * h:
            plus = integrate(sys, x + e, 0.0, 0.01, 20)[-1]
            minus = integrate(sys, x - e, 0.0, 0.01, 20)[-1]
            cols.append((plus - minus) / (2 * h))
        assert abs(np.linalg.det(np.column_stack(cols)) - 1) <= 1e-3


def test_van_der_pol_sign_variants():
    x = np.array([0.5, 1.0])
    std = van_der_pol(3.0).field(0.0, x)
    rev = van_der_pol(3.0, sign="reversed").field(0.0, x)
    assert np.allclose(std, [1.0, 3 * 0.75 * 1.0 - 0.5])
    assert np.allclose(rev, [1.0, -3 * 0.75 * 1.0 + 0.5])
    with pytest.raises(ValueError):
        van_der_pol(sign="other")


def test_corpus_shape():
    ds = generate_dataset(van_der_pol(3.0), 1000, 100, 0.01, 0.01, [(-1, 1), (-1, 1)], seed=0)
    assert ds.states.shape == (1000, 101, 2)
    assert np.abs(ds.states).max() <= 0.9 * np.pi + 1e-12


def test_reversed_sign_blow_up_names_series():
    with pytest.raises(IntegrationError) as info:
        generate_dataset(van_der_pol(3.0, "reversed"), 1000, 100, 0.01, 0.0, [(-1, 1)], seed=0)
    assert info.value.series is not None and info.value.step >= 1
    assert str(info.value.series) in str(info.value)


def test_noiseless_dataset_matches_integration():
    ds = generate_dataset(van_der_pol(), 4, 10, 0.01, 0.0, [(-1, 1)], seed=5)
    x0 = np.random.default_rng(5).uniform([-1, -1], [1, 1], size=(4, 2))
    ref = np.transpose(integrate(van_der_pol(), x0, 0.0, 0.01, 10), (1, 0, 2))
    assert np.abs(ds.raw - ref).max() < 1e-13


def test_dataset_determinism_and_round_trip(tmp_path):
    make = lambda: generate_dataset(stream_flow(), 3, 12, 0.05, 0.01, [(-3, 3)], seed=9,
                                    embedding=Embedding.identity(2))
    a, b = make(), make()
    assert dataset_csv(a) == dataset_csv(b)
    save_dataset(a, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back.states, a.states)
    assert back.metadata() == a.metadata()
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + 3 * 13


def test_load_dataset_errors(tmp_path):
    ds = generate_dataset(stream_flow(), 2, 3, 0.05, 0.0, [(-1, 1)], seed=0)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    metadata_path(path).write_text("{}")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    save_dataset(ds, path)
    path.write_text("series,step,x0,x1\n0,0,1.0\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_embedding_arithmetic():
    emb = Embedding.fit(np.array([[-2.0], [2.0]]))
    assert emb.scale[0] == pytest.approx(1.413716694115407, rel=1e-15)
    assert torus_embed([[2.0]], emb)[0, 0] == pytest.approx(2.827433388230814, rel=1e-15)
    assert torus_embed([[0.0]], emb)[0, 0] == 0.0


@given(st.integers(0, 2 ** 31 - 1))
def test_embedding_round_trip(seed):
    r = np.random.default_rng(seed)
    raw = r.normal(size=(20, 3)) * r.uniform(0.1, 10, size=3) + r.normal(size=3)
    emb = Embedding.fit(raw)
    back = torus_unembed(torus_embed(raw, emb), emb)
    assert np.abs(back - raw).max() <= 1e-14 * max(1.0, np.abs(raw).max())
    assert np.abs(torus_embed(raw, emb)).max() <= 0.9 * np.pi * (1 + 1e-14)
    assert Embedding.from_dict(emb.to_dict()) == emb


def test_extrapolation_warning():
    emb = Embedding.fit(np.array([[-1.0], [1.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        torus_embed([[1.1]], emb)
    with pytest.warns(ExtrapolationWarning):
        torus_unembed([[5.0]], emb)  # raw 1.77, beyond the 10% slack


def test_lattice_for_dataset():
    lat = lattice_for_dataset(2, 3)
    assert lat.dims == 3 and lat.size == 7 * 7 * 3 - 1


def test_translation_system_moves_at_constant_velocity():
    sys = translation([0.5, -0.3])
    traj = integrate(sys, np.zeros((3, 2)), 0.0, 0.1, 10)
    assert np.abs(traj[-1] - [0.5, -0.3]).max() < 1e-14
    assert sys.dim == 2 and sys.to_dict() == {"kind": "translation", "params": {"velocity": [0.5, -0.3]}}
