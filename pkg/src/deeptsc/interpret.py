"""Class activation maps and a 2-D metric MDS of learned features."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelState, forward, predict

MDS_MAX_ITER = 300
MDS_TOL = 1e-9
SMOOTH_WINDOW = 5


@dataclass
class CamMap:
    values: np.ndarray       # (T,)
    class_id: int
    normalization: str = "raw"


@dataclass
class Embedding2D:
    points: np.ndarray       # (N, 2)
    stress: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _require_gap(state: ModelState) -> None:
    if not state.spec.has_gap:
        raise ValueError(f"{state.spec.architecture} has no global average pooling; "
                         "class activation maps are undefined")


def _batch(series: np.ndarray) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[None]
    return x


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def smooth(values: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred moving average; the window shrinks at the edges."""
    kernel = np.ones(window)
    num = np.convolve(values, kernel, mode="same")
    den = np.convolve(np.ones_like(values), kernel, mode="same")
    return num / den


def cam_batch(state: ModelState, x: np.ndarray, class_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Raw maps (N, T) for a batch, plus the class used for each row.

    ``class_ids`` defaults to the predicted classes.
    """
    _require_gap(state)
    x = _batch(x)
    fw = forward(state, x)
    acts = fw.features.data                      # (N, M, T), post-ReLU
    if class_ids is None:
        class_ids = fw.output.data.argmax(axis=1)
    class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (len(x),))
    w = state.params["head.w"][:, class_ids].T   # (N, M)
    return np.einsum("nm,nmt->nt", w, acts), class_ids


def cam(state: ModelState, series, class_id: int | None = None,
        normalization: str = "raw", smoothing: bool = False) -> CamMap:
    """CAM(t) = sum_m w[m, c] * A_m(t) over the last convolutional activations."""
    if normalization not in ("raw", "minmax"):
        raise ValueError(f"unknown normalization {normalization!r}")
    maps, classes = cam_batch(state, series, None if class_id is None else [class_id])
    values = maps[0]
    if smoothing:
        values = smooth(values)
    if normalization == "minmax":
        values = minmax(values)
    return CamMap(values, int(classes[0]), normalization)


def gap_features(state: ModelState, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled last-layer activations, one row per series."""
    _require_gap(state)
    x = _batch(x)
    rows = [forward(state, x[i:i + batch_size]).features.data.mean(axis=2)
            for i in range(0, len(x), batch_size)]
    return np.concatenate(rows) if rows else np.zeros((0, 0))


def euclidean_distances(features: np.ndarray) -> np.ndarray:
    sq = (features ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * features @ features.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


# MDS ----------------------------------------------------------------------------------------

def _check_distances(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got {d.shape}")
    if np.abs(d - d.T).max(initial=0.0) > 1e-9:
        raise ValueError("distance matrix is not symmetric")
    if (d < 0).any():
        raise ValueError("distance matrix has negative entries")
    if np.abs(np.diag(d)).max(initial=0.0) > 1e-9:
        raise ValueError("distance matrix has a non-zero diagonal")
    return 0.5 * (d + d.T)


def stress(d: np.ndarray, points: np.ndarray) -> float:
    """sqrt(sum (d_ij - |x_i - x_j|)^2 / sum d_ij^2) over pairs i < j."""
    iu = np.triu_indices(len(d), 1)
    emb = euclidean_distances(points)[iu]
    denom = (d[iu] ** 2).sum()
    if denom == 0:
        return float(np.sqrt((emb ** 2).sum()))
    return float(np.sqrt(((d[iu] - emb) ** 2).sum() / denom))


def classical_scaling(d: np.ndarray, dims: int = 2) -> np.ndarray:
    n = len(d)
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (d ** 2) @ j
    vals, vecs = np.linalg.eigh(b)
    order = np.argsort(vals)[::-1][:dims]
    out = np.zeros((n, dims))
    k = len(order)
    out[:, :k] = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    return out


def mds(distances: np.ndarray, seed: int = 0, max_iter: int = MDS_MAX_ITER,
        tol: float = MDS_TOL) -> Embedding2D:
    """Metric 2-D embedding by stress majorization (Guttman transform).

    Starts from classical scaling, or a seeded random layout when that start
    is degenerate. Stops when the relative stress decrease drops below
    ``tol`` or after ``max_iter`` updates.
    """
    d = _check_distances(distances)
    n = len(d)
    x = classical_scaling(d)
    if n > 1 and np.allclose(x, 0.0):
        x = np.random.default_rng(seed).normal(size=(n, 2))
    history = [stress(d, x)]
    it = 0
    while it < max_iter and n > 1 and history[-1] > 0:
        dist = euclidean_distances(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, d / dist, 0.0)
        b = -ratio
        np.fill_diagonal(b, 0.0)
        np.fill_diagonal(b, -b.sum(axis=1))
        x = b @ x / n
        it += 1
        history.append(stress(d, x))
        prev, cur = history[-2], history[-1]
        if prev - cur < tol * prev:
            break
    return Embedding2D(x, history[-1], history, it)


# CSV ----------------------------------------------------------------------------------------

def write_cam_csv(path, cam_map: CamMap, series: np.ndarray) -> None:
    series = np.asarray(series, dtype=np.float64)
    series = series.reshape(-1, series.shape[-1])[0] if series.ndim > 1 else series
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "value", "series_value"])
        for t, (v, s) in enumerate(zip(cam_map.values, series)):
            w.writerow([t, repr(float(v)), repr(float(s))])


def write_mds_csv(path, embedding: Embedding2D, ids=None) -> None:
    ids = range(len(embedding.points)) if ids is None else ids
    with open(path, "w", newline="") as f:
        f.write(f"# stress = {embedding.stress!r}\n")
        w = csv.writer(f)
        w.writerow(["point", "x", "y"])
        for i, (px, py) in zip(ids, embedding.points):
            w.writerow([i, repr(float(px)), repr(float(py))])


def read_mds_csv(path) -> tuple[list[str], np.ndarray, float]:
    lines = Path(path).read_text().splitlines()
    stress_value = float(lines[0].split("=", 1)[1])
    rows = list(csv.reader(lines[2:]))
    return [r[0] for r in rows], np.array([[float(r[1]), float(r[2])] for r in rows]), stress_value


def predicted_classes(state: ModelState, x: np.ndarray) -> np.ndarray:
    return predict(state, _batch(x)).argmax(axis=1)
