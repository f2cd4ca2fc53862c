"""UCR-format ingestion, length equalisation, z-normalisation and a synthetic benchmark."""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8
PATTERN_FRACTION = 0.10
NOISE_HIGH = 0.1
PATTERN_AMPLITUDE = 1.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """A split of labelled series; each series is a ``(D, T)`` float array."""

    series: tuple[np.ndarray, ...]
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"
    label_values: tuple[float, ...] = ()
    variable_length: bool = False

    def __post_init__(self):
        if len(self.series) != len(self.labels):
            raise DataError("labels and series differ in count")
        if len(self.series):
            dims = {s.shape[0] for s in self.series}
            if len(dims) != 1:
                raise DataError(f"series disagree on dimensionality: {sorted(dims)}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.series)

    @property
    def n_dims(self) -> int:
        return self.series[0].shape[0]

    @property
    def lengths(self) -> list[int]:
        return [s.shape[1] for s in self.series]

    def as_array(self) -> np.ndarray:
        """Stack into ``(N, D, T)``; requires equal lengths."""
        if len(set(self.lengths)) != 1:
            raise DataError("series have unequal lengths; run equalize_lengths first")
        return np.stack(self.series)

    def class_members(self, c: int) -> list[np.ndarray]:
        return [s for s, y in zip(self.series, self.labels) if y == c]

    def subset(self, idx) -> "LabeledDataset":
        idx = list(idx)
        return replace(self, series=tuple(self.series[i] for i in idx),
                       labels=self.labels[idx])


def make_dataset(series, labels, n_classes: int | None = None, name: str = "dataset",
                 **kw) -> LabeledDataset:
    out = []
    for s in series:
        a = np.asarray(s, dtype=np.float64)
        out.append(a[None, :] if a.ndim == 1 else a)
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return LabeledDataset(tuple(out), labels, k, name, **kw)


def _detect_delimiter(line: str) -> str | None:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None  # whitespace


def _parse_rows(path: Path, delimiter: str) -> list[list[float]]:
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    sep = {"auto": _detect_delimiter(lines[0]), "tab": "\t", "comma": ","}.get(delimiter, delimiter)
    rows = []
    for r, line in enumerate(lines, 1):
        cells = line.strip().split(sep) if sep else line.split()
        while cells and not cells[-1].strip():
            cells.pop()
        row = []
        for c, cell in enumerate(cells, 1):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value {cell!r} at row {r}, column {c}")
            row.append(v)
        if not row:
            raise DataError(f"{path}: empty row {r}")
        rows.append(row)
    return rows


def _remap(raw: list[float]) -> tuple[np.ndarray, tuple[float, ...]]:
    values = tuple(sorted(set(raw)))
    lookup = {v: i for i, v in enumerate(values)}
    return np.array([lookup[v] for v in raw], dtype=np.int64), values


def load_ucr(path, delimiter: str = "auto", name: str | None = None) -> LabeledDataset:
    """Read a UCR file: one series per line, label first, values after.

    The default name is the file stem without a ``_TRAIN``/``_TEST`` suffix.
    """
    path = Path(path)
    rows = _parse_rows(path, delimiter)
    for r, row in enumerate(rows, 1):
        if len(row) < 2:
            raise DataError(f"{path}: row {r} has a label but no values")
    labels, values = _remap([row[0] for row in rows])
    series = tuple(np.array(row[1:])[None, :] for row in rows)
    variable = len({s.shape[1] for s in series}) > 1
    name = name or re.sub(r"_(TRAIN|TEST)$", "", path.stem)
    return LabeledDataset(series, labels, len(values), name, values, variable)


def load_mts_dir(directory, name: str | None = None) -> LabeledDataset:
    """Read ``dim_<k>.txt`` files plus ``labels.txt`` into a multivariate dataset."""
    directory = Path(directory)
    label_file = directory / "labels.txt"
    if not label_file.exists():
        raise DataError(f"{directory}: missing labels.txt")
    dim_files = sorted(directory.glob("dim_*.txt"), key=lambda p: int(p.stem.split("_", 1)[1]))
    if not dim_files:
        raise DataError(f"{directory}: no dim_<k>.txt files")
    dims = [_parse_rows(p, "auto") for p in dim_files]
    raw = [row[0] for row in _parse_rows(label_file, "auto")]
    for p, rows in zip(dim_files, dims):
        if len(rows) != len(raw):
            raise DataError(f"{p}: {len(rows)} rows but labels.txt has {len(raw)}")
    series = []
    variable = False
    for i in range(len(raw)):
        per_dim = [np.array(d[i]) for d in dims]
        if len({len(v) for v in per_dim}) > 1:
            variable = True
            t = max(len(v) for v in per_dim)
            per_dim = [_interp(v, t) for v in per_dim]
        series.append(np.stack(per_dim))
    variable = variable or len({s.shape[1] for s in series}) > 1
    labels, values = _remap(raw)
    return LabeledDataset(tuple(series), labels, len(values), name or directory.name, values, variable)


def write_ucr(dataset: LabeledDataset, path, delimiter: str = "\t") -> None:
    """Write a univariate dataset in UCR layout with round-trip-exact floats."""
    if dataset.n_dims != 1:
        raise DataError("UCR files hold univariate series only")
    raw = dataset.label_values or tuple(float(k) for k in range(dataset.n_classes))
    lines = []
    for s, y in zip(dataset.series, dataset.labels):
        label = raw[y]
        head = str(int(label)) if float(label).is_integer() else repr(float(label))
        lines.append(delimiter.join([head] + [format(v, ".17g") for v in s[0]]))
    Path(path).write_text("\n".join(lines) + "\n")


def z_normalize(series: np.ndarray) -> np.ndarray:
    """Zero mean, unit population std per dimension; constant dimensions become zeros."""
    x = np.asarray(series, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    out = np.where(sd > STD_FLOOR, (x - mu) / np.maximum(sd, STD_FLOOR), 0.0)
    return out[0] if squeeze else out


def _interp(values: np.ndarray, length: int) -> np.ndarray:
    if len(values) == length:
        return np.asarray(values, dtype=np.float64)
    if len(values) == 1:
        return np.full(length, float(values[0]))
    return np.interp(np.linspace(0.0, 1.0, length), np.linspace(0.0, 1.0, len(values)), values)


def resample(series: np.ndarray, length: int) -> np.ndarray:
    """Linearly interpolate a ``(D, T)`` series onto ``length`` uniform steps."""
    return np.stack([_interp(row, length) for row in np.atleast_2d(series)])


def equalize_lengths(dataset: LabeledDataset, length: int | None = None) -> LabeledDataset:
    if not len(dataset):
        raise DataError("cannot equalize an empty dataset")
    t = max(dataset.lengths) if length is None else length
    series = tuple(s if s.shape[1] == t else resample(s, t) for s in dataset.series)
    return replace(dataset, series=series, variable_length=False)


def normalize_dataset(dataset: LabeledDataset) -> LabeledDataset:
    return replace(dataset, series=tuple(z_normalize(s) for s in dataset.series))


def prepare(dataset: LabeledDataset, length: int | None = None) -> LabeledDataset:
    """Standard ingestion pipeline: equalize lengths, then z-normalise."""
    return normalize_dataset(equalize_lengths(dataset, length))


@dataclass(frozen=True)
class SyntheticDataset:
    train: LabeledDataset
    test: LabeledDataset
    windows: tuple[tuple[int, int], ...] = field(default=())


def pattern_length(length: int) -> int:
    return max(1, int(round(PATTERN_FRACTION * length)))


def default_positions(length: int, n_classes: int) -> list[int]:
    plen = pattern_length(length)
    slots = length - plen
    return [int(round(slots * (c + 0.5) / n_classes)) for c in range(n_classes)]


def generate_synthetic(n_per_class: int, length: int, n_classes: int,
                       pattern_positions=None, seed: int = 0,
                       n_test_per_class: int | None = None,
                       name: str = "Synthetic") -> SyntheticDataset:
    """Noise in [0, 0.1] with a class-specific plateau of value 1.0.

    Class ``c`` gets its plateau at ``pattern_positions[c]`` with length 10%
    of the series. Test series come from the same generator stream after the
    training ones.
    """
    if n_classes < 1 or n_per_class < 1 or length < 1:
        raise ValueError("n_per_class, length and n_classes must be positive")
    plen = pattern_length(length)
    positions = default_positions(length, n_classes) if pattern_positions is None else list(pattern_positions)
    if len(positions) != n_classes:
        raise ValueError(f"need {n_classes} pattern positions, got {len(positions)}")
    for p in positions:
        if p < 0 or p + plen > length:
            raise ValueError(f"pattern window [{p}, {p + plen}) outside series of length {length}")
    if len(set(positions)) != len(positions):
        raise ValueError("two classes share the same pattern window")
    windows = tuple((int(p), int(p) + plen) for p in positions)
    rng = np.random.default_rng(seed)
    n_test = n_per_class if n_test_per_class is None else n_test_per_class

    def split(n, tag):
        labels = np.repeat(np.arange(n_classes), n)
        x = rng.uniform(0.0, NOISE_HIGH, size=(labels.size, length))
        for i, c in enumerate(labels):
            a, b = windows[c]
            x[i, a:b] = PATTERN_AMPLITUDE
        return make_dataset(list(x), labels, n_classes, f"{name}_{tag}",
                            label_values=tuple(float(c + 1) for c in range(n_classes)))

    train = split(n_per_class, "TRAIN")
    test = split(n_test, "TEST")
    return SyntheticDataset(train, test, windows)


def find_split(directory, split: str) -> Path:
    """Locate ``*_TRAIN`` / ``*_TEST`` file (.tsv, .txt or .csv) in a UCR dataset folder."""
    directory = Path(directory)
    for ext in (".tsv", ".txt", ".csv", ""):
        hits = sorted(directory.glob(f"*_{split}{ext}"))
        if hits:
            return hits[0]
    raise DataError(f"{directory}: no *_{split} file")


def load_split_dir(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Load TRAIN and TEST from a UCR folder sharing one label mapping."""
    tr_path, te_path = find_split(directory, "TRAIN"), find_split(directory, "TEST")
    train, test = load_ucr(tr_path), load_ucr(te_path)
    values = tuple(sorted(set(train.label_values) | set(test.label_values)))
    if values != train.label_values or values != test.label_values:
        lookup = {v: i for i, v in enumerate(values)}
        train = replace(train, labels=np.array([lookup[train.label_values[y]] for y in train.labels]),
                        n_classes=len(values), label_values=values)
        test = replace(test, labels=np.array([lookup[test.label_values[y]] for y in test.labels]),
                       n_classes=len(values), label_values=values)
    return train, test


def dataset_name(directory) -> str:
    return os.path.basename(os.path.normpath(str(directory)))
