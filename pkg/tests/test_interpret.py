import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeptsc.datasets import generate_synthetic
from deeptsc.interpret import (cam, cam_batch, classical_scaling, euclidean_distances,
                               gap_features, mds, read_mds_csv, smooth, stress, write_cam_csv,
                               write_mds_csv)
from deeptsc.models import ModelSpec, build_model
from deeptsc.training import TrainConfig, train

SMALL = dict(depth=3, n_filters=8, bottleneck_size=8, kernel_sizes=(5, 11, 23), use_residual=True)


@pytest.fixture(scope="module")
def fcn():
    return build_model(ModelSpec("fcn"), seed=0)


@pytest.fixture(scope="module")
def trained_synth():
    data = generate_synthetic(16, 64, 2, pattern_positions=[8, 40], seed=2, n_test_per_class=20)
    state = build_model(ModelSpec("inception", **SMALL), seed=0)
    best, _ = train(state, data.train, TrainConfig(epochs=40, batch_size=16))
    return best, data


def test_zero_head_gives_zero_map(fcn):
    state = fcn.copy()
    state.params["head.w"] = np.zeros_like(state.params["head.w"])
    m = cam(state, np.random.default_rng(0).normal(size=40), class_id=1)
    np.testing.assert_array_equal(m.values, 0.0)


@pytest.mark.parametrize("t", [7, 50, 129])
def test_map_length_matches_series(fcn, t):
    assert cam(fcn, np.random.default_rng(t).normal(size=(1, t))).values.shape == (t,)


def test_map_matches_definition(fcn):
    x = np.random.default_rng(1).normal(size=(1, 30))
    from deeptsc.models import forward
    acts = forward(fcn, x[None]).features.data[0]
    expected = fcn.params["head.w"][:, 1] @ acts
    np.testing.assert_allclose(cam(fcn, x, class_id=1).values, expected, rtol=1e-12)


def test_map_is_linear_in_head_weights(fcn):
    x = np.random.default_rng(2).normal(size=(1, 25))
    a, b = fcn.copy(), fcn.copy()
    rng = np.random.default_rng(3)
    a.params["head.w"] = rng.normal(size=a.params["head.w"].shape)
    b.params["head.w"] = rng.normal(size=b.params["head.w"].shape)
    mix = fcn.copy()
    mix.params["head.w"] = 0.3 * a.params["head.w"] + 0.7 * b.params["head.w"]
    np.testing.assert_allclose(cam(mix, x, 0).values,
                               0.3 * cam(a, x, 0).values + 0.7 * cam(b, x, 0).values, atol=1e-12)


def test_gap_average_of_map_equals_class_score(fcn):
    x = np.random.default_rng(4).normal(size=(3, 1, 20))
    maps, classes = cam_batch(fcn, x)
    from deeptsc.models import forward
    logits = forward(fcn, x).logits.data
    bias = fcn.params["head.b"][classes]
    np.testing.assert_allclose(maps.mean(axis=1) + bias, logits[np.arange(3), classes], rtol=1e-10)


def test_normalization_and_smoothing(fcn):
    x = np.random.default_rng(5).normal(size=40)
    m = cam(fcn, x, normalization="minmax")
    assert m.values.min() == 0.0 and m.values.max() == 1.0
    raw = cam(fcn, x).values
    np.testing.assert_allclose(cam(fcn, x, smoothing=True).values, smooth(raw))
    np.testing.assert_allclose(smooth(np.ones(9)), 1.0)
    with pytest.raises(ValueError):
        cam(fcn, x, normalization="zscore")


def test_mlp_has_no_map():
    state = build_model(ModelSpec("mlp", input_length=10))
    with pytest.raises(ValueError, match="global average pooling"):
        cam(state, np.zeros(10))
    with pytest.raises(ValueError):
        gap_features(state, np.zeros((1, 1, 10)))


def test_gap_features(fcn):
    x = np.random.default_rng(6).normal(size=(3, 1, 30))
    x[2] = x[0]
    f = gap_features(fcn, x)
    assert f.shape == (3, 128)
    np.testing.assert_array_equal(f[0], f[2])
    np.testing.assert_array_equal(f, gap_features(fcn, x, batch_size=1))


def test_map_peaks_on_injected_pattern(trained_synth):
    state, data = trained_synth
    x = data.test.as_array()
    maps, classes = cam_batch(state, x)
    ious = []
    for m, c, y in zip(maps, classes, data.test.labels):
        if c != y:
            continue
        lo, hi = data.windows[y]
        top = set(np.flatnonzero(m >= np.quantile(m, 0.9)))
        truth = set(range(lo, hi))
        ious.append(len(top & truth) / len(top | truth))
    assert len(ious) >= 0.9 * len(x)
    assert np.median(ious) > 0


def test_cam_csv(tmp_path, fcn):
    x = np.arange(12, dtype=float)
    m = cam(fcn, x)
    write_cam_csv(tmp_path / "cam.csv", m, x)
    lines = (tmp_path / "cam.csv").read_text().splitlines()
    assert lines[0] == "timestamp,value,series_value" and len(lines) == 13
    assert lines[3].split(",")[2] == "2.0"


# MDS ----------------------------------------------------------------------------------------

def test_equilateral_triangle():
    d = np.ones((3, 3)) - np.eye(3)
    assert mds(d).stress < 1e-6


def test_two_points():
    emb = mds(np.array([[0.0, 3.5], [3.5, 0.0]]))
    assert np.linalg.norm(emb.points[0] - emb.points[1]) == pytest.approx(3.5, abs=1e-6)


def test_recovers_planar_configuration():
    pts = np.array([[0.0, 0.0], [2.0, 0.5], [1.0, 3.0], [-1.5, 1.0]])
    d = euclidean_distances(pts)
    emb = mds(d)
    np.testing.assert_allclose(euclidean_distances(emb.points), d, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_stress_never_increases(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 5))
    emb = mds(euclidean_distances(pts), max_iter=50)
    hist = np.array(emb.history)
    assert np.all(np.diff(hist) <= 1e-12)
    assert emb.stress >= 0
    assert emb.stress == pytest.approx(stress(euclidean_distances(pts), emb.points))


def test_random_start_is_reproducible():
    d = np.zeros((4, 4))  # degenerate classical start
    a, b = mds(d, seed=3), mds(d, seed=3)
    np.testing.assert_array_equal(a.points, b.points)


def test_rejects_bad_matrices():
    with pytest.raises(ValueError, match="symmetric"):
        mds(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError):
        mds(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mds(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_classical_scaling_exact_for_planar_points():
    pts = np.random.default_rng(0).normal(size=(6, 2))
    d = euclidean_distances(pts)
    np.testing.assert_allclose(euclidean_distances(classical_scaling(d)), d, atol=1e-9)


def test_mds_csv_round_trip(tmp_path):
    emb = mds(euclidean_distances(np.random.default_rng(1).normal(size=(5, 3))))
    write_mds_csv(tmp_path / "mds.csv", emb, ids=list("abcde"))
    ids, pts, s = read_mds_csv(tmp_path / "mds.csv")
    assert ids == list("abcde") and s == emb.stress
    np.testing.assert_array_equal(pts, emb.points)
