import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from deeptsc import elastic as el
from deeptsc.datasets import make_dataset


def all_paths(m, n):
    """Every admissible warping path of an m x n grid (brute-force oracle)."""
    out = []

    def walk(path):
        i, j = path[-1]
        if (i, j) == (m - 1, n - 1):
            out.append(list(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < m and j + dj < n:
                path.append((i + di, j + dj))
                walk(path)
                path.pop()
    walk([(0, 0)])
    return out


def brute_dtw(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return min(el.path_cost(a, b, p) for p in all_paths(a.shape[1], b.shape[1]))


class TestDTW:

    def test_self_distance_is_zero_on_diagonal(self):
        x = np.random.default_rng(0).normal(size=7)
        cost, path = el.dtw(x, x)
        assert cost == 0.0
        assert path.points == tuple((i, i) for i in range(7))

    def test_repeat_absorbed(self):
        assert el.dtw([0.0, 0.0, 1.0], [0.0, 1.0])[0] == 0.0
        assert brute_dtw([0.0, 0.0, 1.0], [0.0, 1.0]) == 0.0

    def test_path_invariants(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 9)), rng.normal(size=(2, 5))
        cost, path = el.dtw(a, b)
        pts = np.array(path.points)
        assert tuple(pts[0]) == (0, 0) and tuple(pts[-1]) == (8, 4)
        steps = np.diff(pts, axis=0)
        assert np.all((steps >= 0) & (steps <= 1)) and np.all(steps.sum(axis=1) > 0)
        npt.assert_allclose(el.path_cost(a, b, path.points), cost, rtol=1e-12)
        assert el.dtw_distance(a, b) == cost

    def test_tie_break_prefers_diagonal_then_first_series(self):
        # all-equal grid: every path ties, the diagonal must win
        _, path = el.dtw(np.zeros(3), np.zeros(3))
        assert path.points == ((0, 0), (1, 1), (2, 2))
        _, path = el.dtw(np.zeros(3), np.zeros(2))
        assert path.points == ((0, 0), (1, 0), (2, 1))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            el.dtw(np.zeros(0), np.zeros(3))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            el.dtw(np.zeros((2, 3)), np.zeros((1, 3)))

    @settings(max_examples=60, deadline=None)
    @given(m=st.integers(1, 6), n=st.integers(1, 6), d=st.integers(1, 2), seed=st.integers(0, 2**20))
    def test_matches_brute_force(self, m, n, d, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(d, m)), rng.normal(size=(d, n))
        assert el.dtw(a, b)[0] == pytest.approx(brute_dtw(a, b), rel=1e-12, abs=0)

    @settings(max_examples=50, deadline=None)
    @given(m=st.integers(1, 12), n=st.integers(1, 12), seed=st.integers(0, 2**20))
    def test_symmetry(self, m, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=m), rng.normal(size=n)
        assert abs(el.dtw_distance(a, b) - el.dtw_distance(b, a)) <= 1e-9


class TestDBA:

    def test_singleton_fixed_point(self):
        x = np.random.default_rng(2).normal(size=(1, 8))
        npt.assert_allclose(el.dba([x], iterations=5), x, atol=0)

    def test_identical_copies(self):
        x = np.random.default_rng(3).normal(size=(1, 8))
        npt.assert_allclose(el.dba([x, x.copy(), x.copy()]), x, atol=0)

    def test_loss_non_increasing(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            s = [rng.normal(size=rng.integers(5, 12)) for _ in range(3)]
            _, losses = el.dba(s, iterations=10, return_losses=True)
            assert np.all(np.diff(losses) <= 0)

    def test_losses_match_direct_evaluation(self):
        rng = np.random.default_rng(5)
        s = [rng.normal(size=9) for _ in range(4)]
        init = el.medoid(s)
        avg, losses = el.dba(s, init=init, iterations=3, return_losses=True)
        npt.assert_allclose(losses[0], el.dba_loss(init, s), rtol=1e-12)
        npt.assert_allclose(losses[-1], el.dba_loss(avg, s), rtol=1e-12)

    def test_average_has_init_length(self):
        rng = np.random.default_rng(6)
        s = [rng.normal(size=n) for n in (6, 9, 11)]
        assert el.dba(s, init=s[1]).shape == (1, 9)

    def test_equal_weights_bitwise_plain(self):
        rng = np.random.default_rng(7)
        s = [rng.normal(size=10) for _ in range(5)]
        plain = el.dba(s, init=s[0])
        weighted = el.dba(s, init=s[0], weights=[0.2] * 5)
        assert plain.tobytes() == weighted.tobytes()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            el.dba([])


class TestMedoid:

    def test_singleton(self):
        x = np.arange(4.0)
        npt.assert_array_equal(el.medoid([x]), [x])

    def test_tie_goes_to_first(self):
        x, y = np.zeros(5), np.full(5, 10.0)
        assert el.medoid_index([x, x.copy(), y]) == 0

    def test_brute_force(self):
        rng = np.random.default_rng(8)
        s = [rng.normal(size=rng.integers(4, 9)) for _ in range(4)]
        sums = [sum(brute_dtw(a, b) if len(a) <= 6 and len(b) <= 6 else el.dtw_distance(a, b)
                    for b in s) for a in s]
        assert el.medoid_index(s) == int(np.argmin(sums))


class TestAugmentation:

    def test_weights_for_ten(self):
        rng = np.random.default_rng(9)
        s = [rng.normal(size=8) for _ in range(10)]
        seed_idx, w = el.average_selected_weights(s, np.random.default_rng(1))
        assert w[seed_idx] == pytest.approx(0.5)
        assert sorted(w)[-3:-1] == pytest.approx([0.15, 0.15])
        rest = np.sort(w)[:7]
        npt.assert_allclose(rest, 0.2 / 7)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)

    def test_picks_come_from_five_nearest(self):
        rng = np.random.default_rng(10)
        s = [rng.normal(size=8) for _ in range(12)]
        for k in range(10):
            seed_idx, w = el.average_selected_weights(s, np.random.default_rng(k))
            d = [el.dtw_distance(s[seed_idx], x) if i != seed_idx else np.inf for i, x in enumerate(s)]
            nearest = set(np.argsort(d)[:5])
            assert set(np.flatnonzero(np.isclose(w, 0.15))) <= nearest

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_small_sets_normalised(self, n):
        s = [np.random.default_rng(i).normal(size=6) for i in range(n)]
        _, w = el.average_selected_weights(s, np.random.default_rng(0))
        assert w.sum() == pytest.approx(1.0) and np.all(w > 0)

    def test_singleton_returns_itself(self):
        x = np.arange(5.0)
        npt.assert_array_equal(el.weighted_dba_augment([x], seed=3), [x])

    def test_synthetic_closer_to_seed_than_farthest(self):
        base = np.sin(np.linspace(0, 2 * np.pi, 20))
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            s = [base + rng.normal(scale=0.3, size=20) for _ in range(8)]
            seed_idx, _ = el.average_selected_weights(s, np.random.default_rng(seed))
            new = el.weighted_dba_augment(s, seed=seed)
            far = max(el.dtw_distance(new, x) for x in s)
            assert el.dtw_distance(new, s[seed_idx]) <= far

    def test_augment_sizes(self):
        rng = np.random.default_rng(11)
        d = make_dataset([rng.normal(size=10) for _ in range(8)], [0, 0, 0, 1, 1, 1, 1, 1])
        out = el.augment_dataset(d, seed=0)
        assert np.bincount(out.labels).tolist() == [10, 10]
        assert set(out.lengths) == {10}
        assert np.array_equal(out.as_array()[:8], d.as_array())

    def test_augment_single_class(self):
        rng = np.random.default_rng(12)
        d = make_dataset([rng.normal(size=6) for _ in range(4)], [0] * 4)
        assert len(el.augment_dataset(d, seed=1)) == 8


class TestNLTS:

    def test_identical_pair(self):
        x = np.random.default_rng(13).normal(size=(1, 7))
        avg, sched = el.nlts([x, x.copy()])
        assert sched.target_length == 7
        for c in sched.counts:
            assert c.tolist() == [1] * 7

    def test_one_duplication(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        y = np.array([0.0, 1.0, 1.0, 2.0, 3.0])
        avg, sched = el.nlts([x, y])
        assert sched.target_length == 5
        assert sched.counts[0].tolist() == [1, 2, 1, 1]
        assert sched.counts[1].tolist() == [1, 1, 1, 1, 1]

    def test_too_few(self):
        with pytest.raises(ValueError):
            el.nlts([np.zeros(3)])

    def test_restricted_alignment_when_path_contracts(self):
        # second half of b is slower than the average; the plain DTW path would
        # map one average step to several timestamps of b
        avg = np.array([0.0, 0.0, 0.0, 5.0, 9.0])
        b = np.array([0.0, 5.0, 6.0, 7.0, 9.0])
        counts = el.dilation_counts(avg, b)
        assert counts.sum() == 5 and counts.min() >= 1

    @settings(max_examples=20, deadline=None)
    @given(k=st.integers(2, 5), seed=st.integers(0, 2**20))
    def test_schedule_invariants(self, k, seed):
        rng = np.random.default_rng(seed)
        s = [rng.normal(size=(1, rng.integers(3, 15))) for _ in range(k)]
        avg, sched = el.nlts(s)
        assert avg.shape[1] == sched.target_length == max(x.shape[1] for x in s)
        for x, c in zip(s, sched.counts):
            assert c.min() >= 1 and c.sum() == sched.target_length
            assert el.dilate(x, c).shape[1] == sched.target_length


class TestSimilarity:

    def _datasets(self):
        rng = np.random.default_rng(14)
        out = []
        for name, k in (("A", 2), ("B", 3), ("C", 2)):
            labels = np.repeat(np.arange(k), 3)
            out.append(make_dataset([rng.normal(size=12) + y for y in labels], labels, name=name))
        return out

    def test_matrix_properties_and_recompute(self):
        data = self._datasets()
        m = el.dataset_similarity(data)
        assert np.all(np.diag(m.distances) == 0)
        assert np.array_equal(m.distances, m.distances.T)
        assert np.all(m.distances >= 0)
        for i, a in enumerate(data):
            for j, b in enumerate(data):
                if i != j:
                    brute = min(el.dtw_distance(p, q) for p in el.class_prototypes(a)
                                for q in el.class_prototypes(b))
                    assert m.distances[i, j] == brute

    def test_self_distance_from_prototypes(self):
        d = self._datasets()[0]
        protos = el.class_prototypes(d)
        assert el.prototype_distance(protos, protos) == 0.0

    def test_single_class_pair(self):
        rng = np.random.default_rng(15)
        a = make_dataset([rng.normal(size=8) for _ in range(3)], [0] * 3, name="a")
        b = make_dataset([rng.normal(size=8) for _ in range(3)], [0] * 3, name="b")
        m = el.dataset_similarity([a, b])
        assert m.distances[0, 1] == el.dtw_distance(el.class_prototypes(a)[0], el.class_prototypes(b)[0])

    def test_empty_class(self):
        d = make_dataset([np.zeros(4)], [1], n_classes=2)
        with pytest.raises(ValueError, match="empty"):
            el.class_prototypes(d)

    def test_csv_round_trip(self, tmp_path):
        m = el.dataset_similarity(self._datasets())
        el.write_similarity_csv(m, tmp_path / "similarity.csv")
        back = el.read_similarity_csv(tmp_path / "similarity.csv")
        assert back.names == m.names and np.array_equal(back.distances, m.distances)


class TestTransferSelection:

    def _matrix(self):
        d = np.array([[0.0, 2.0, 1.0, 2.0], [2.0, 0.0, 3.0, 1.0],
                      [1.0, 3.0, 0.0, 4.0], [2.0, 1.0, 4.0, 0.0]])
        return el.SimilarityMatrix(("w", "x", "y", "z"), d)

    def test_self_first(self):
        ranked = el.select_transfer_source("w", ["x", "y", "w", "z"], 2, self._matrix())
        assert ranked == [("w", 0.0), ("y", 1.0)]

    def test_k_larger_than_candidates(self):
        assert len(el.select_transfer_source("w", ["x", "y"], 10, self._matrix())) == 2

    def test_ties_by_name(self):
        ranked = el.select_transfer_source("w", ["z", "x"], 2, self._matrix())
        assert [n for n, _ in ranked] == ["x", "z"]


def test_schedule_csv(tmp_path):
    el.write_schedule_csv(np.array([1, 2, 1]), tmp_path / "schedule.csv")
    assert (tmp_path / "schedule.csv").read_text().splitlines()[0] == "timestamp,count"
    assert el.read_schedule_csv(tmp_path / "schedule.csv").tolist() == [1, 2, 1]
