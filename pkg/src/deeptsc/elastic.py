"""Dynamic time warping, DBA averaging and the tools built on them.

Series are ``(D, T)`` arrays (a 1-D array is treated as univariate). The
local cost is the squared Euclidean distance across dimensions, and the DTW
cost is the plain sum of local costs along the optimal path.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from .datasets import LabeledDataset, make_dataset, resample

DBA_ITERATIONS = 10
SEED_WEIGHT = 0.5
NEIGHBOR_WEIGHT = 0.15
N_NEIGHBORS = 5
N_PICKED = 2


@dataclass(frozen=True)
class WarpingPath:
    points: tuple[tuple[int, int], ...]
    cost: float


@dataclass(frozen=True)
class AlignmentSchedule:
    counts: tuple[np.ndarray, ...]
    target_length: int


@dataclass(frozen=True)
class SimilarityMatrix:
    names: tuple[str, ...]
    distances: np.ndarray


def _tc(x) -> np.ndarray:
    """(D, T) or (T,) input -> contiguous (T, D)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a (D, T) series, got shape {a.shape}")
    if a.shape[1] == 0:
        raise ValueError("empty series")
    return np.ascontiguousarray(a.T)


@nb.njit(cache=True)
def _accumulate(a, b):
    m, n, d = a.shape[0], b.shape[0], a.shape[1]
    acc = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            c = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                c += diff * diff
            if i == 0 and j == 0:
                acc[i, j] = c
            elif i == 0:
                acc[i, j] = c + acc[i, j - 1]
            elif j == 0:
                acc[i, j] = c + acc[i - 1, j]
            else:
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                if acc[i, j - 1] < best:
                    best = acc[i, j - 1]
                acc[i, j] = c + best
    return acc


@nb.njit(cache=True)
def _backtrack(acc):
    # ties: diagonal first, then the step along the first series
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    out = np.empty((i + j + 1, 2), dtype=np.int64)
    s = 0
    out[s, 0], out[s, 1] = i, j
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        s += 1
        out[s, 0], out[s, 1] = i, j
    return out[: s + 1][::-1]


@nb.njit(cache=True)
def _dtw_cost(a, b):
    m, n, d = a.shape[0], b.shape[0], a.shape[1]
    prev = np.empty(n)
    cur = np.empty(n)
    for i in range(m):
        for j in range(n):
            c = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                c += diff * diff
            if i == 0 and j == 0:
                cur[j] = c
            elif i == 0:
                cur[j] = c + cur[j - 1]
            elif j == 0:
                cur[j] = c + prev[j]
            else:
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = c + best
        prev, cur = cur, prev
    return prev[n - 1]


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimensionality mismatch: {a.shape[1]} vs {b.shape[1]}")


def dtw(a, b) -> tuple[float, WarpingPath]:
    """DTW cost and optimal warping path between two series."""
    at, bt = _tc(a), _tc(b)
    _check_dims(at, bt)
    acc = _accumulate(at, bt)
    path = _backtrack(acc)
    cost = float(acc[-1, -1])
    return cost, WarpingPath(tuple((int(i), int(j)) for i, j in path), cost)


def dtw_distance(a, b) -> float:
    """DTW cost only (linear memory)."""
    at, bt = _tc(a), _tc(b)
    _check_dims(at, bt)
    return float(_dtw_cost(at, bt))


def path_cost(a, b, points) -> float:
    at, bt = _tc(a), _tc(b)
    return float(sum(((at[i] - bt[j]) ** 2).sum() for i, j in points))


def pairwise_dtw(series: Sequence) -> np.ndarray:
    mats = [_tc(s) for s in series]
    n = len(mats)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = _dtw_cost(mats[i], mats[j])
    return out


# averaging --------------------------------------------------------------------

@nb.njit(cache=True)
def _dba_pass(avg, members, lengths, weights):
    # avg (L, D); members packed (sum T_i, D); returns (new_avg, weighted loss)
    L, d = avg.shape
    sums = np.zeros((L, d))
    wsum = np.zeros(L)
    loss = 0.0
    start = 0
    for s in range(lengths.shape[0]):
        seq = members[start:start + lengths[s]]
        start += lengths[s]
        acc = _accumulate(avg, seq)
        loss += weights[s] * acc[L - 1, seq.shape[0] - 1]
        path = _backtrack(acc)
        w = weights[s]
        for p in range(path.shape[0]):
            i, j = path[p, 0], path[p, 1]
            for k in range(d):
                sums[i, k] += w * seq[j, k]
            wsum[i] += w
    out = np.empty((L, d))
    for i in range(L):
        for k in range(d):
            out[i, k] = sums[i, k] / wsum[i]
    return out, loss


def _pack(series: Sequence) -> tuple[np.ndarray, np.ndarray]:
    mats = [_tc(s) for s in series]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ValueError("series disagree on dimensionality")
    return np.ascontiguousarray(np.concatenate(mats)), np.array([m.shape[0] for m in mats])


def _norm_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.max() <= 0:
        raise ValueError("weights must be non-negative, one per series, not all zero")
    # scale by the max so equal weights become exactly 1.0
    return w / w.max()


def dba(series: Sequence, init=None, iterations: int = DBA_ITERATIONS,
        weights=None, return_losses: bool = False):
    """DTW barycenter averaging, optionally weighted.

    ``init`` defaults to the medoid. With ``return_losses`` the weighted sum
    of DTW costs is returned for the initial series and after every iteration
    (``iterations + 1`` values).
    """
    if len(series) == 0:
        raise ValueError("cannot average an empty set")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    packed, lengths = _pack(series)
    w = _norm_weights(weights, len(series))
    avg = _tc(medoid(series) if init is None else init)
    if avg.shape[1] != packed.shape[1]:
        raise ValueError("init dimensionality differs from the set")
    losses = []
    for _ in range(iterations):
        new, loss = _dba_pass(avg, packed, lengths, w)
        losses.append(loss)
        avg = new
    result = np.ascontiguousarray(avg.T)
    if return_losses:
        losses.append(_dba_pass(avg, packed, lengths, w)[1])
        return result, np.array(losses)
    return result


def dba_loss(avg, series: Sequence, weights=None) -> float:
    w = _norm_weights(weights, len(series))
    return float(sum(wi * dtw_distance(avg, s) for wi, s in zip(w, series)))


def medoid_index(series: Sequence) -> int:
    if len(series) == 0:
        raise ValueError("empty set has no medoid")
    return int(np.argmin(pairwise_dtw(series).sum(axis=1)))


def medoid(series: Sequence) -> np.ndarray:
    """Member with the smallest summed DTW cost to the rest; ties go to the lowest index."""
    return np.atleast_2d(np.asarray(series[medoid_index(series)], dtype=np.float64))


# weighted-DBA augmentation ----------------------------------------------------

def average_selected_weights(series: Sequence, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Pick a seed series and assign the Average Selected weights.

    The seed gets 0.5, two random picks among its 5 DTW-nearest neighbours get
    0.15 each, and everything else splits 0.2. Small sets use fewer
    neighbours; below three members the non-seed mass is shared equally.
    The returned weights are normalised to sum to 1.
    """
    n = len(series)
    seed_idx = int(rng.integers(n))
    w = np.zeros(n)
    w[seed_idx] = SEED_WEIGHT
    if n == 1:
        return seed_idx, np.ones(1)
    others = [i for i in range(n) if i != seed_idx]
    if n < 3:
        w[others] = (1.0 - SEED_WEIGHT) / len(others)
        return seed_idx, w
    dist = np.array([dtw_distance(series[seed_idx], series[i]) for i in others])
    order = np.argsort(dist, kind="stable")
    neighbors = [others[i] for i in order[: min(N_NEIGHBORS, n - 1)]]
    picked = rng.choice(len(neighbors), size=N_PICKED, replace=False)
    for p in picked:
        w[neighbors[p]] = NEIGHBOR_WEIGHT
    rest = [i for i in others if w[i] == 0.0]
    if rest:
        w[rest] = (1.0 - SEED_WEIGHT - N_PICKED * NEIGHBOR_WEIGHT) / len(rest)
    return seed_idx, w / w.sum()


def weighted_dba_augment(class_set: Sequence, seed, iterations: int = DBA_ITERATIONS) -> np.ndarray:
    """One synthetic series from a class via weighted DBA initialised at the seed series."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(class_set) == 0:
        raise ValueError("empty class")
    seed_idx, w = average_selected_weights(class_set, rng)
    if len(class_set) == 1:
        return np.atleast_2d(np.array(class_set[0], dtype=np.float64))
    return dba(class_set, init=class_set[seed_idx], iterations=iterations, weights=w)


def augment_dataset(dataset: LabeledDataset, seed: int = 0,
                    iterations: int = DBA_ITERATIONS) -> LabeledDataset:
    """Grow every class to twice the size of the largest class with weighted-DBA series."""
    rng = np.random.default_rng(seed)
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    target = 2 * int(counts.max())
    series, labels = list(dataset.series), list(dataset.labels)
    for c in range(dataset.n_classes):
        members = dataset.class_members(c)
        if not members:
            continue
        for _ in range(target - len(members)):
            series.append(weighted_dba_augment(members, rng, iterations))
            labels.append(c)
    return make_dataset(series, labels, dataset.n_classes, dataset.name + "_aug",
                        label_values=dataset.label_values)


# multiple alignment -------------------------------------------------------------

@nb.njit(cache=True)
def _dilation_path(a, b):
    # a (L, D) longer; every step advances a, b advances by 0 or 1
    L, n, d = a.shape[0], b.shape[0], a.shape[1]
    inf = np.inf
    acc = np.full((L, n), inf)
    for i in range(L):
        for j in range(min(i + 1, n)):
            c = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                c += diff * diff
            if i == 0:
                acc[i, j] = c if j == 0 else inf
            elif j == 0:
                acc[i, j] = c + acc[i - 1, 0]
            else:
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                acc[i, j] = c + best
    owner = np.empty(L, dtype=np.int64)
    j = n - 1
    for i in range(L - 1, -1, -1):
        owner[i] = j
        if i > 0 and j > 0 and acc[i - 1, j - 1] <= acc[i - 1, j]:
            j -= 1
    return owner


def dilation_owner(average, series) -> np.ndarray:
    """For every timestamp of ``average``, the index of ``series`` aligned to it.

    The DTW path is used directly when it only ever advances along the
    average; otherwise the alignment is recomputed with that restriction so
    that no timestamp is dropped. The result is non-decreasing with steps of
    0 or 1, starting at 0 and ending at the last index.
    """
    avg_t, s_t = _tc(average), _tc(series)
    _check_dims(avg_t, s_t)
    if s_t.shape[0] > avg_t.shape[0]:
        raise ValueError("series longer than the average cannot be dilated onto it")
    _, path = dtw(average, series)
    pts = np.array(path.points)
    if np.all(np.diff(pts[:, 0]) == 1):
        return pts[:, 1].astype(np.int64)
    return _dilation_path(avg_t, s_t)


def dilation_counts(average, series) -> np.ndarray:
    """Per-timestamp duplication counts that dilate ``series`` onto ``average``."""
    owner = dilation_owner(average, series)
    return np.bincount(owner, minlength=_tc(series).shape[0]).astype(np.int64)


def dilate(series, counts) -> np.ndarray:
    return np.repeat(np.atleast_2d(np.asarray(series, dtype=np.float64)), counts, axis=1)


def nlts(series: Sequence, iterations: int = DBA_ITERATIONS) -> tuple[np.ndarray, AlignmentSchedule]:
    """Align a set onto its DBA average; the average has the longest member's length."""
    average, schedule, _ = nlts_aligned(series, iterations)
    return average, schedule


def nlts_aligned(series: Sequence, iterations: int = DBA_ITERATIONS):
    """Like :func:`nlts`, also returning each series gathered along its alignment."""
    if len(series) < 2:
        raise ValueError("multiple alignment needs at least two series")
    target = max(_tc(s).shape[0] for s in series)
    init = resample(medoid(series), target)
    average = dba(series, init=init, iterations=iterations)
    owners = [dilation_owner(average, s) for s in series]
    counts = tuple(np.bincount(o, minlength=_tc(s).shape[0]).astype(np.int64)
                   for o, s in zip(owners, series))
    aligned = [np.atleast_2d(np.asarray(s, dtype=np.float64))[:, o] for s, o in zip(series, owners)]
    return average, AlignmentSchedule(counts, target), aligned


# dataset similarity ---------------------------------------------------------------

def class_prototypes(dataset: LabeledDataset, iterations: int = DBA_ITERATIONS) -> list[np.ndarray]:
    protos = []
    for c in range(dataset.n_classes):
        members = dataset.class_members(c)
        if not members:
            raise ValueError(f"{dataset.name}: class {c} is empty")
        protos.append(dba(members, init=medoid(members), iterations=iterations))
    return protos


def prototype_distance(pa: Sequence, pb: Sequence) -> float:
    return min(dtw_distance(a, b) for a, b in itertools.product(pa, pb))


def dataset_similarity(datasets: Sequence[LabeledDataset],
                       iterations: int = DBA_ITERATIONS) -> SimilarityMatrix:
    """Pairwise dataset distance: minimum DTW between per-class DBA prototypes."""
    protos = [class_prototypes(d, iterations) for d in datasets]
    n = len(datasets)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = prototype_distance(protos[i], protos[j])
    return SimilarityMatrix(tuple(d.name for d in datasets), dist)


def select_transfer_source(target: str, candidates: Sequence[str], k: int,
                           matrix: SimilarityMatrix) -> list[tuple[str, float]]:
    """The ``k`` candidates nearest to ``target``; equal distances ordered by name."""
    idx = {name: i for i, name in enumerate(matrix.names)}
    t = idx[target]
    ranked = sorted(((c, float(matrix.distances[t, idx[c]])) for c in candidates),
                    key=lambda item: (item[1], item[0]))
    return ranked[:k]


def write_similarity_csv(matrix: SimilarityMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(matrix.names)
        for row in matrix.distances:
            w.writerow([format(v, ".17g") for v in row])


def read_similarity_csv(path) -> SimilarityMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return SimilarityMatrix(tuple(rows[0]), np.array([[float(v) for v in r] for r in rows[1:]]))


def write_schedule_csv(counts, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "count"])
        for t, c in enumerate(counts):
            w.writerow([t, int(c)])


def read_schedule_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([int(c) for _, c in rows], dtype=np.int64)
