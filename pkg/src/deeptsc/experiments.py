"""Desk-scale experiment pipelines shared by the acceptance suite and ``scripts/``."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import AttackConfig, attack_dataset
from .datasets import DataError, LabeledDataset, SyntheticDataset, generate_synthetic, load_split_dir, make_dataset, prepare
from .interpret import cam_batch
from .models import ModelSpec, ModelState, build_model, ensemble_predict, predict
from .training import TrainConfig, TrainReport, train

GUNPOINT_ENV = "TSC_GUNPOINT_DIR"
REPO_ROOT = Path(__file__).resolve().parents[2]

# receptive-field study: RF 1 + 6 * 43 = 259 covers the whole series of 256
RF_LENGTH = 256
RF_TRAIN_PER_CLASS = 128
RF_TEST_PER_CLASS = 100
RF_SPEC = ModelSpec("inception", depth=6, kernel_sizes=(11, 22, 44))
SHORT_RF_SPEC = ModelSpec("inception", depth=1, kernel_sizes=(4,), use_residual=False)


def gunpoint_candidates() -> list[Path]:
    env = os.environ.get(GUNPOINT_ENV)
    paths = [Path(env)] if env else []
    return paths + [REPO_ROOT / "data" / "GunPoint", Path.home() / "data" / "GunPoint"]


def find_gunpoint() -> Path | None:
    for p in gunpoint_candidates():
        if p.is_dir() and any(p.glob("*_TRAIN*")) and any(p.glob("*_TEST*")):
            return p
    return None


def load_gunpoint() -> tuple[LabeledDataset, LabeledDataset]:
    path = find_gunpoint()
    if path is None:
        tried = ", ".join(str(p) for p in gunpoint_candidates())
        raise DataError(f"GunPoint dataset not found (set {GUNPOINT_ENV}; tried {tried})")
    train_raw, test_raw = load_split_dir(path)
    return prepare(train_raw), prepare(test_raw, train_raw.lengths[0])


@dataclass
class Run:
    seed: int
    state: ModelState
    accuracy: float
    report: TrainReport
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def accuracy_of(state: ModelState, data: LabeledDataset) -> float:
    return float(np.mean(predict(state, data.as_array()).argmax(axis=1) == data.labels))


def fit_and_score(spec: ModelSpec, train_set: LabeledDataset, test_set: LabeledDataset,
                  config: TrainConfig, seed: int) -> Run:
    start = time.perf_counter()
    state = build_model(spec, seed=seed)
    best, report = train(state, train_set, config)
    return Run(seed, best, accuracy_of(best, test_set), report, time.perf_counter() - start)


def gunpoint_fcn(seeds=(0, 1, 2), epochs: int = 500, data=None) -> list[Run]:
    """FCN with Adam (lr 0.001, batch 16) on GunPoint, one run per seed."""
    train_set, test_set = data if data is not None else load_gunpoint()
    spec = ModelSpec("fcn", n_classes=train_set.n_classes)
    return [fit_and_score(spec, train_set, test_set,
                          TrainConfig.for_architecture("fcn", epochs=epochs, seed=s), s)
            for s in seeds]


def rf_dataset(seed: int = 0) -> SyntheticDataset:
    return generate_synthetic(RF_TRAIN_PER_CLASS, RF_LENGTH, 2, seed=seed,
                              n_test_per_class=RF_TEST_PER_CLASS, name="RFSynthetic")


def receptive_field_runs(seeds=(0, 1, 2), epochs: int = 20) -> list[dict]:
    """Long-RF Inception vs a kernel-4, depth-1 network on the same synthetic sets."""
    out = []
    for s in seeds:
        data = rf_dataset(seed=s)
        cfg = TrainConfig.for_architecture("inception", epochs=epochs, seed=s)
        wide = fit_and_score(RF_SPEC, data.train, data.test, cfg, s)
        narrow = fit_and_score(SHORT_RF_SPEC, data.train, data.test, cfg, s)
        out.append(dict(seed=s, data=data, wide=wide, narrow=narrow))
    return out


def cam_hit_rate(state: ModelState, data: SyntheticDataset) -> tuple[float, int]:
    """Share of correctly classified test series whose CAM peaks inside their class window."""
    x = data.test.as_array()
    maps, classes = cam_batch(state, x)
    correct = classes == data.test.labels
    hits = 0
    for m, y in zip(maps[correct], data.test.labels[correct]):
        lo, hi = data.windows[y]
        hits += lo <= int(m.argmax()) < hi
    n = int(correct.sum())
    return (hits / n if n else 0.0), n


def shape_surrogate(n_train: int = 50, n_test: int = 150, length: int = 150,
                    seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Two-class shape task sized like GunPoint: a smooth bump vs a bump with a notch on top."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)

    def make(n):
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        series = []
        for y in labels:
            centre = rng.uniform(0.35, 0.65) * length
            width = rng.uniform(0.12, 0.18) * length
            s = np.exp(-0.5 * ((t - centre) / width) ** 2)
            if y == 1:
                s -= 0.35 * np.exp(-0.5 * ((t - centre) / (0.04 * length)) ** 2)
            series.append(s + rng.normal(0, 0.03, length))
        return prepare(make_dataset(series, labels, n_classes=2, name="ShapeSurrogate"))

    return make(n_train), make(n_test)


def adversarial_summary(state: ModelState, test_set: LabeledDataset, epsilon: float = 0.1) -> dict:
    fgsm_set, clean, fgsm_acc = attack_dataset(state, test_set, AttackConfig("fgsm", epsilon))
    bim_set, _, bim_acc = attack_dataset(state, test_set, AttackConfig("bim", epsilon))
    x = test_set.as_array()
    max_delta = max(np.abs(fgsm_set.series - x).max(), np.abs(bim_set.series - x).max())
    return dict(clean=clean, fgsm=fgsm_acc, bim=bim_acc, max_delta=float(max_delta))


def gunpoint_ensemble(n_members: int = 5, epochs: int = 150, seed: int = 0,
                      data=None) -> tuple[list[Run], float]:
    """Inception members seeded ``seed .. seed + n - 1`` and their averaged accuracy."""
    train_set, test_set = data if data is not None else load_gunpoint()
    spec = ModelSpec("inception", n_classes=train_set.n_classes)
    runs = [fit_and_score(spec, train_set, test_set,
                          TrainConfig.for_architecture("inception", epochs=epochs, seed=s), s)
            for s in range(seed, seed + n_members)]
    probs = ensemble_predict([r.state for r in runs], test_set.as_array())
    return runs, float(np.mean(probs.argmax(axis=1) == test_set.labels))
