"""Gradient-sign attacks (FGSM, BIM) and adversarial training with dual batch norm."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import LabeledDataset, make_dataset, write_ucr
from .models import ADV_SUFFIX, ModelState, forward, predict, replace_spec
from .training import StepFn, TrainConfig, TrainReport, train

ATTACK_BATCH = 256


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.1
    iterations: int = 10
    alpha: float | None = None  # BIM step; defaults to epsilon / iterations

    def __post_init__(self):
        if self.method not in ("fgsm", "bim"):
            raise ValueError(f"unknown attack {self.method!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha is not None and not 0 <= self.alpha <= self.epsilon:
            raise ValueError("alpha must lie in [0, epsilon]")

    @property
    def step(self) -> float:
        if self.method == "fgsm":
            return self.epsilon
        return self.epsilon / self.iterations if self.alpha is None else self.alpha

    @property
    def n_steps(self) -> int:
        return 1 if self.method == "fgsm" else self.iterations


@dataclass
class AdversarialSet:
    series: np.ndarray    # (N, D, T), aligned with the source set
    flipped: np.ndarray   # prediction on x' differs from prediction on x
    method: str
    epsilon: float

    @property
    def suffix(self) -> str:
        return f"_adv_{self.method}_{self.epsilon:g}"


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip ``x_adv`` into the l-inf ball of radius ``epsilon`` around ``x``.

    Rounding can leave ``|x_adv - x|`` a hair above ``epsilon`` after the
    clip; such entries are stepped one ulp at a time towards ``x``.
    """
    out = np.clip(x_adv, x - epsilon, x + epsilon)
    over = np.abs(out - x) > epsilon
    while over.any():
        out[over] = np.nextafter(out[over], x[over])
        over = np.abs(out - x) > epsilon
    return out


def input_gradient(state: ModelState, x: np.ndarray, labels: np.ndarray,
                   **fw_kwargs) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. the input batch."""
    xt = ad.Tensor(x, requires_grad=True)
    fw = forward(state, xt, **fw_kwargs)
    loss = ad.cross_entropy_with_logits(fw.logits, ad.one_hot(labels, state.spec.n_classes))
    ad.backward(loss * float(len(x)))
    return xt.grad


def _craft(state: ModelState, x: np.ndarray, labels: np.ndarray, config: AttackConfig,
           **fw_kwargs) -> np.ndarray:
    x_adv = x.copy()
    if config.epsilon == 0:
        return x_adv
    for _ in range(config.n_steps):
        g = input_gradient(state, x_adv, labels, **fw_kwargs)
        x_adv = project(x_adv + config.step * np.sign(g), x, config.epsilon)
    return x_adv


def attack(state: ModelState, x: np.ndarray, config: AttackConfig,
           labels: np.ndarray | None = None) -> np.ndarray:
    """Perturb ``x`` (N, D, T) with batch norm in eval mode.

    Without ``labels`` the loss targets the model's own clean predictions.
    """
    x = np.asarray(x, dtype=np.float64)
    if labels is None:
        labels = predict(state, x).argmax(axis=1)
    chunks = [_craft(state, x[i:i + ATTACK_BATCH], labels[i:i + ATTACK_BATCH], config)
              for i in range(0, len(x), ATTACK_BATCH)]
    return np.concatenate(chunks) if chunks else x.copy()


def fgsm(state: ModelState, x: np.ndarray, epsilon: float = 0.1,
         labels: np.ndarray | None = None) -> np.ndarray:
    return attack(state, x, AttackConfig("fgsm", epsilon), labels)


def bim(state: ModelState, x: np.ndarray, epsilon: float = 0.1, iterations: int = 10,
        alpha: float | None = None, labels: np.ndarray | None = None) -> np.ndarray:
    return attack(state, x, AttackConfig("bim", epsilon, iterations, alpha), labels)


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, LabeledDataset):
        return data.as_array(), data.labels
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def attack_dataset(state: ModelState, data, config: AttackConfig,
                   source: ModelState | None = None) -> tuple[AdversarialSet, float, float]:
    """Attack every series and score ``state`` on clean and perturbed inputs.

    Perturbations are crafted on ``source`` when given (transfer attack),
    otherwise on ``state`` itself. Accuracies use the true labels.
    """
    x, y = _xy(data)
    x_adv = attack(source or state, x, config)
    clean_pred = predict(state, x).argmax(axis=1)
    adv_pred = predict(state, x_adv).argmax(axis=1)
    adv = AdversarialSet(x_adv, clean_pred != adv_pred, config.method, config.epsilon)
    return adv, float(np.mean(clean_pred == y)), float(np.mean(adv_pred == y))


def export_adversarial(adv: AdversarialSet, reference: LabeledDataset, out_dir, split: str = "TEST") -> Path:
    """Write ``adv`` in UCR layout as ``<name>_adv_<method>_<eps>_<split>.tsv``."""
    out = Path(out_dir) / f"{reference.name}{adv.suffix}_{split}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    data = make_dataset([s for s in adv.series], reference.labels, name=reference.name + adv.suffix,
                        n_classes=reference.n_classes, label_values=reference.label_values)
    write_ucr(data, out)
    return out


# adversarial training ------------------------------------------------------------------------

def with_dual_bn(state: ModelState) -> ModelState:
    """Add an adversarial batch-norm set initialised from the clean one."""
    if state.spec.dual_bn:
        return state
    out = replace_spec(state.copy(), dual_bn=True)
    for table in (out.params, out.running):
        for name in [k for k in table if k.split(".")[-1] in ("gamma", "beta", "mean", "var")]:
            table[name + ADV_SUFFIX] = table[name].copy()
    return out


def _combine(a: dict, b: dict, wa: float, wb: float) -> dict:
    out = {}
    for k in a:
        ga, gb = a[k], b[k]
        if ga is None and gb is None:
            out[k] = None
        else:
            out[k] = wa * (0.0 if ga is None else ga) + wb * (0.0 if gb is None else gb)
    return out


def make_adversarial_step(attack_config: AttackConfig, advprop: bool) -> StepFn:
    """Per batch: craft adversarial twins with the current weights, then fit both halves."""

    def step(state, xb, yb, rng):
        labels = yb.argmax(axis=1)
        bn_set = "adv" if advprop else "clean"
        x_adv = _craft(state, xb, labels, attack_config, train=True, rng=rng,
                       bn_set=bn_set, update_stats=False)
        if not advprop:
            fw = forward(state, np.concatenate([xb, x_adv]), train=True, rng=rng, grad=True)
            loss = ad.cross_entropy_loss(fw.output, np.concatenate([yb, yb]))
            ad.backward(loss)
            return float(loss.data), {k: t.grad for k, t in fw.params.items()}, fw.running
        halves = []
        for x_part, bn in ((xb, "clean"), (x_adv, "adv")):
            fw = forward(state, x_part, train=True, rng=rng, grad=True, bn_set=bn)
            loss = ad.cross_entropy_loss(fw.output, yb)
            ad.backward(loss)
            halves.append((float(loss.data), {k: t.grad for k, t in fw.params.items()}, fw.running))
        (lc, gc, rc), (la, ga, ra) = halves
        running = {**rc, **{k: v for k, v in ra.items() if k.endswith(ADV_SUFFIX)}}
        return 0.5 * (lc + la), _combine(gc, ga, 0.5, 0.5), running

    return step


def adversarial_train(state: ModelState, data, train_config: TrainConfig,
                      attack_config: AttackConfig, advprop: bool = True,
                      callback=None) -> tuple[ModelState, TrainReport]:
    """Train on clean batches plus their adversarial twins.

    With ``advprop`` the twins pass through a separate batch-norm set; the
    returned model predicts through the clean set.
    """
    if advprop:
        state = with_dual_bn(state)
    return train(state, data, train_config, make_adversarial_step(attack_config, advprop), callback)
