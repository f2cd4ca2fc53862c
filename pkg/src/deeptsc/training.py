"""Adam training loop with best-loss checkpointing and plateau LR decay."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .datasets import LabeledDataset
from .models import ModelState, forward, replace_spec

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        super().__init__(f"loss became non-finite at epoch {epoch} "
                         f"(last finite epoch: {last_finite_epoch})")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 16
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    lr_reduce: bool = True
    lr_factor: float = 0.5
    lr_patience: int = 50
    min_lr: float = 0.0001
    loss: str = "cross_entropy"
    seed: int = 0
    checkpoint: str = "best_train_loss"
    val_fraction: float = 0.0
    max_seconds: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.checkpoint not in ("best_train_loss", "best_val_loss"):
            raise ValueError(f"unknown checkpoint rule {self.checkpoint!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.checkpoint == "best_val_loss" and self.val_fraction == 0.0:
            raise ValueError("best_val_loss checkpointing needs val_fraction > 0")

    @classmethod
    def for_architecture(cls, arch: str, **overrides) -> "TrainConfig":
        base = {"fcn": dict(epochs=2000, batch_size=16),
                "resnet": dict(epochs=1500, batch_size=16),
                "inception": dict(epochs=1500, batch_size=64),
                "mlp": dict(epochs=5000, batch_size=16)}[arch]
        return cls(**{**base, **overrides})


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] | None = None
    lr: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_epoch: int = 0
    stopped_early: bool = False

    @property
    def monitored(self) -> list[float]:
        return self.val_loss if self.val_loss is not None else self.train_loss

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e, tl in enumerate(self.train_loss):
                vl = "" if self.val_loss is None else repr(self.val_loss[e])
                w.writerow([e + 1, repr(tl), vl, repr(self.lr[e])])


# initialisation ----------------------------------------------------------------------

def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _fans(arr: np.ndarray) -> tuple[int, int]:
    if arr.ndim == 3:  # conv (C_out, C_in, L)
        return arr.shape[1] * arr.shape[2], arr.shape[0] * arr.shape[2]
    return arr.shape[0], arr.shape[1]


def glorot_uniform_init(state: ModelState, seed: int, names=None) -> ModelState:
    """Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases 0; BN gamma 1, beta 0.

    With ``names`` only those parameters are re-initialised.
    """
    rng = np.random.default_rng(seed)
    params = dict(state.params)
    for name, arr in state.params.items():
        if names is not None and name not in names:
            continue
        kind = name.split(".")[-1].split("@")[0]
        if kind == "w":
            a = glorot_bound(*_fans(arr))
            params[name] = rng.uniform(-a, a, size=arr.shape)
        elif kind in ("b", "beta"):
            params[name] = np.zeros(arr.shape)
        elif kind == "gamma":
            params[name] = np.ones(arr.shape)
    return ModelState(state.spec, params, dict(state.running), dict(state.meta))


# optimiser -----------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              moments: AdamMoments, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = ADAM_EPS) -> tuple[dict[str, np.ndarray], AdamMoments]:
    """One bias-corrected Adam update; parameters without a gradient are left alone."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    t = moments.t + 1
    new_params = dict(params)
    m, v = dict(moments.m), dict(moments.v)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        m[name] = beta1 * m.get(name, 0.0) + (1.0 - beta1) * g
        v[name] = beta2 * v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_params[name] = params[name] - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return new_params, AdamMoments(m, v, t)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 50,
                 min_lr: float = 0.0001, enabled: bool = True):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.enabled = enabled
        self.best = math.inf
        self.wait = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        elif self.enabled:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


# loop ---------------------------------------------------------------------------------------

StepFn = Callable[[ModelState, np.ndarray, np.ndarray, np.random.Generator],
                  tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]]


def supervised_loss(state: ModelState, x, targets: np.ndarray, loss_kind: str, **fw_kwargs):
    fw = forward(state, x, **fw_kwargs)
    if loss_kind == "cross_entropy":
        return ad.cross_entropy_loss(fw.output, targets), fw
    return ad.mse_loss(fw.output, targets), fw


def make_supervised_step(loss_kind: str) -> StepFn:
    def step(state, xb, yb, rng):
        loss, fw = supervised_loss(state, xb, yb, loss_kind, train=True, rng=rng, grad=True)
        ad.backward(loss)
        grads = {k: t.grad for k, t in fw.params.items()}
        return float(loss.data), grads, fw.running
    return step


def targets_for(state: ModelState, labels: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "cross_entropy":
        return ad.one_hot(labels, state.spec.n_classes)
    t = np.asarray(labels, dtype=np.float64)
    return t.reshape(len(t), -1)


def _split_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 2**31 - 1]).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and (n_val == 0 or n_val == n):
        raise ValueError(f"val_fraction {fraction} leaves an empty split for {n} samples")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def eval_loss(state: ModelState, x: np.ndarray, targets: np.ndarray, loss_kind: str) -> float:
    loss, _ = supervised_loss(state, x, targets, loss_kind)
    return float(loss.data)


def train(state: ModelState, dataset: LabeledDataset | tuple[np.ndarray, np.ndarray],
          config: TrainConfig, step_fn: StepFn | None = None,
          callback: Callable[[int, float, ModelState], None] | None = None) -> tuple[ModelState, TrainReport]:
    """Fit ``state`` and return the snapshot with the lowest monitored loss.

    ``dataset`` is a prepared :class:`LabeledDataset` or an ``(x, labels)``
    pair. Batches are drawn from a per-epoch shuffle seeded by
    ``(config.seed, epoch)``; the last partial batch is kept. ``callback``
    receives ``(epoch, monitored_loss, current_state)`` after every epoch.
    """
    if isinstance(dataset, LabeledDataset):
        x_all, labels = dataset.as_array(), dataset.labels
    else:
        x_all, labels = dataset
    x_all = np.asarray(x_all, dtype=np.float64)
    targets_all = targets_for(state, labels, config.loss)
    tr_idx, va_idx = _split_val(len(x_all), config.val_fraction, config.seed)
    x, y = x_all[tr_idx], targets_all[tr_idx]
    x_val, y_val = x_all[va_idx], targets_all[va_idx]
    step_fn = step_fn or make_supervised_step(config.loss)

    current = state.copy()
    moments = AdamMoments()
    sched = PlateauScheduler(config.lr, config.lr_factor, config.lr_patience,
                             config.min_lr, config.lr_reduce)
    report = TrainReport(val_loss=[] if len(va_idx) else None)
    best, best_state = math.inf, current.copy()
    start = time.perf_counter()
    last_finite = 0
    n = len(x)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(n)
        total = 0.0
        lr = sched.lr
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss, grads, running = step_fn(current, x[idx], y[idx], rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, last_finite)
            params, moments = adam_step(current.params, grads, moments, lr,
                                        config.beta1, config.beta2)
            current = ModelState(current.spec, params, running, current.meta)
            total += loss * len(idx)
        epoch_loss = total / n
        last_finite = epoch
        report.train_loss.append(epoch_loss)
        report.lr.append(lr)
        monitored = epoch_loss
        if report.val_loss is not None:
            monitored = eval_loss(current, x_val, y_val, config.loss)
            report.val_loss.append(monitored)
        if monitored < best:
            best, best_state = monitored, current.copy()
            report.checkpoint_epoch = epoch
        sched.step(monitored)
        if callback is not None:
            callback(epoch, monitored, current)
        if config.max_seconds is not None and time.perf_counter() - start > config.max_seconds:
            log.info("time budget exhausted after epoch %d", epoch)
            report.stopped_early = True
            break
    report.wall_time = time.perf_counter() - start
    best_state.meta = {**best_state.meta, "epochs_seen": str(len(report.train_loss)),
                       "checkpoint": f"{config.checkpoint}@{report.checkpoint_epoch}"}
    return best_state, report


def fine_tune(pretrained: ModelState, target: LabeledDataset, config: TrainConfig,
              seed: int | None = None) -> tuple[ModelState, TrainReport]:
    """Swap in a fresh softmax head sized for ``target`` and retrain every layer."""
    spec = pretrained.spec
    if not spec.has_gap:
        raise ValueError("transfer needs a GAP-terminated network; "
                         f"{spec.architecture} depends on the input length")
    if target.n_dims != spec.input_dims:
        raise ValueError(f"target has {target.n_dims} dimensions, model expects {spec.input_dims}")
    state = replace_spec(pretrained.copy(), n_classes=target.n_classes)
    features = pretrained.params["head.w"].shape[0]
    state.params["head.w"] = np.zeros((features, target.n_classes))
    state.params["head.b"] = np.zeros(target.n_classes)
    state = glorot_uniform_init(state, config.seed if seed is None else seed,
                                names={"head.w", "head.b"})
    return train(state, target, config)


def with_config(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
