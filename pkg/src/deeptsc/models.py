"""Architectures (MLP, FCN, ResNet, Inception), ensembling and the ``.tscm`` file format.

A model is a :class:`ModelState`: the declarative :class:`ModelSpec` plus named
parameter and running-statistic arrays. :func:`forward` interprets the spec
over those arrays using the ops in :mod:`deeptsc.autodiff`.
"""
from __future__ import annotations

import dataclasses
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ConfigError, from_kv, parse_kv, to_kv

ARCHITECTURES = ("mlp", "fcn", "resnet", "inception")
FCN_LAYERS = ((128, 8), (256, 5), (128, 3))
RESNET_FILTERS = (64, 128, 128)
RESNET_KERNELS = (8, 5, 3)
MLP_UNITS = 500
MLP_DROPOUT = (0.1, 0.2, 0.2, 0.3)
POOL_WINDOW = 3
ADV_SUFFIX = "@adv"

MAGIC = b"TSCM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dims: int = 1
    input_length: int | None = None
    n_classes: int = 2
    depth: int = 6
    n_filters: int = 32
    kernel_sizes: tuple[int, ...] = (10, 20, 40)
    bottleneck_size: int = 32
    use_residual: bool = True
    use_bottleneck: bool = True
    head: str = "classification"
    dual_bn: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.head not in ("classification", "regression"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.depth < 1 or self.bottleneck_size < 1 or self.n_filters < 1:
            raise ValueError("depth, n_filters and bottleneck_size must be >= 1")
        if not self.kernel_sizes or list(self.kernel_sizes) != sorted(self.kernel_sizes):
            raise ValueError("kernel_sizes must be non-empty and ascending")
        if self.architecture == "mlp" and self.input_length is None:
            raise ValueError("mlp needs a fixed input_length")
        if self.n_classes < 1 or self.input_dims < 1:
            raise ValueError("n_classes and input_dims must be >= 1")

    def to_text(self) -> str:
        return to_kv(self)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        return from_kv(cls, parse_kv(text))

    @property
    def has_gap(self) -> bool:
        return self.architecture != "mlp"


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.running.items()}, dict(self.meta))

    def n_params(self, include_adv: bool = True) -> int:
        return sum(v.size for k, v in self.params.items() if include_adv or ADV_SUFFIX not in k)


# parameter layout -----------------------------------------------------------------

class _Layout:
    def __init__(self, dual_bn: bool):
        self.params: dict[str, np.ndarray] = {}
        self.running: dict[str, np.ndarray] = {}
        self.dual_bn = dual_bn

    def conv(self, name, c_out, c_in, length, bias=True):
        self.params[f"{name}.w"] = np.zeros((c_out, c_in, length))
        if bias:
            self.params[f"{name}.b"] = np.zeros(c_out)
        return c_out

    def bn(self, name, c):
        for suffix in ("", ADV_SUFFIX) if self.dual_bn else ("",):
            self.params[f"{name}.gamma{suffix}"] = np.ones(c)
            self.params[f"{name}.beta{suffix}"] = np.zeros(c)
            self.running[f"{name}.mean{suffix}"] = np.zeros(c)
            self.running[f"{name}.var{suffix}"] = np.ones(c)

    def dense(self, name, f_in, f_out):
        self.params[f"{name}.w"] = np.zeros((f_in, f_out))
        self.params[f"{name}.b"] = np.zeros(f_out)


def _fcn_layout(spec, lay):
    c = spec.input_dims
    for i, (filters, length) in enumerate(FCN_LAYERS, 1):
        c = lay.conv(f"conv{i}", filters, c, length)
        lay.bn(f"bn{i}", filters)
    return c


def _resnet_layout(spec, lay):
    c = spec.input_dims
    for b, filters in enumerate(RESNET_FILTERS, 1):
        c_in = c
        for i, length in enumerate(RESNET_KERNELS, 1):
            c = lay.conv(f"block{b}.conv{i}", filters, c, length)
            lay.bn(f"block{b}.bn{i}", filters)
        if c_in != filters:
            lay.conv(f"block{b}.short", filters, c_in, 1)
            lay.bn(f"block{b}.short_bn", filters)
    return c


def _inception_out(spec):
    return spec.n_filters * (len(spec.kernel_sizes) + 1)


def _inception_layout(spec, lay):
    c = spec.input_dims
    res_c = c
    for d in range(spec.depth):
        name = f"mod{d}"
        z = c
        if spec.use_bottleneck:
            z = lay.conv(f"{name}.bottleneck", spec.bottleneck_size, c, 1, bias=False)
        for k in spec.kernel_sizes:
            lay.conv(f"{name}.conv{k}", spec.n_filters, z, k, bias=False)
        lay.conv(f"{name}.poolconv", spec.n_filters, c, 1, bias=False)
        c = _inception_out(spec)
        lay.bn(f"{name}.bn", c)
        if spec.use_residual and d % 3 == 2:
            if res_c != c:
                lay.conv(f"res{d}.short", c, res_c, 1, bias=False)
                lay.bn(f"res{d}.short_bn", c)
            res_c = c
    return c


def _layout(spec: ModelSpec) -> _Layout:
    lay = _Layout(spec.dual_bn)
    if spec.architecture == "mlp":
        f = spec.input_dims * spec.input_length
        for i in range(1, 4):
            lay.dense(f"fc{i}", f, MLP_UNITS)
            f = MLP_UNITS
    else:
        f = {"fcn": _fcn_layout, "resnet": _resnet_layout, "inception": _inception_layout}[
            spec.architecture](spec, lay)
    lay.dense("head", f, spec.n_classes)
    return lay


def build_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Allocate the parameters for ``spec`` and Glorot-initialise them."""
    from .training import glorot_uniform_init

    if spec.architecture == "inception" and spec.use_residual and spec.depth % 3:
        warnings.warn(f"inception depth {spec.depth} is not a multiple of 3; "
                      "trailing modules get no residual connection", stacklevel=2)
    lay = _layout(spec)
    return glorot_uniform_init(ModelState(spec, lay.params, lay.running), seed)


def _require(spec: ModelSpec, arch: str) -> None:
    if spec.architecture != arch:
        raise ValueError(f"spec describes {spec.architecture!r}, not {arch!r}")


def build_fcn(spec: ModelSpec, seed: int = 0) -> ModelState:
    _require(spec, "fcn")
    return build_model(spec, seed)


def build_resnet(spec: ModelSpec, seed: int = 0) -> ModelState:
    _require(spec, "resnet")
    return build_model(spec, seed)


def build_inception(spec: ModelSpec, seed: int = 0) -> ModelState:
    _require(spec, "inception")
    return build_model(spec, seed)


def build_mlp(spec: ModelSpec, seed: int = 0) -> ModelState:
    _require(spec, "mlp")
    return build_model(spec, seed)


# forward pass ------------------------------------------------------------------------

@dataclass
class Forward:
    output: ad.Tensor            # class probabilities, or raw outputs for regression
    logits: ad.Tensor
    features: ad.Tensor | None   # last convolutional activations (N, C, T)
    params: dict[str, ad.Tensor]
    running: dict[str, np.ndarray]


class _Ctx:
    def __init__(self, state, params, train, rng, bn_set, update_stats):
        self.spec = state.spec
        self.p = params
        self.running = state.running
        self.new_running = dict(state.running)
        self.train = train
        self.rng = rng
        self.suffix = ADV_SUFFIX if bn_set == "adv" else ""
        self.update_stats = update_stats

    def conv(self, name, x, padding="same"):
        return ad.conv1d(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), padding)

    def bn(self, name, x):
        s = self.suffix
        running = (self.running[f"{name}.mean{s}"], self.running[f"{name}.var{s}"])
        y, new = ad.batch_norm1d(x, self.p[f"{name}.gamma{s}"], self.p[f"{name}.beta{s}"],
                                 running, train=self.train)
        if self.train and self.update_stats:
            self.new_running[f"{name}.mean{s}"], self.new_running[f"{name}.var{s}"] = new
        return y

    def conv_bn_relu(self, conv_name, bn_name, x):
        return ad.relu(self.bn(bn_name, self.conv(conv_name, x)))


def _fcn_body(ctx, x):
    for i in range(1, len(FCN_LAYERS) + 1):
        x = ctx.conv_bn_relu(f"conv{i}", f"bn{i}", x)
    return x


def _resnet_body(ctx, x):
    for b in range(1, len(RESNET_FILTERS) + 1):
        shortcut = x
        y = ctx.conv_bn_relu(f"block{b}.conv1", f"block{b}.bn1", x)
        y = ctx.conv_bn_relu(f"block{b}.conv2", f"block{b}.bn2", y)
        y = ctx.bn(f"block{b}.bn3", ctx.conv(f"block{b}.conv3", y))
        if f"block{b}.short.w" in ctx.p:
            shortcut = ctx.bn(f"block{b}.short_bn", ctx.conv(f"block{b}.short", shortcut))
        x = ad.relu(y + shortcut)
    return x


def _inception_module(ctx, name, x):
    spec = ctx.spec
    z = ctx.conv(f"{name}.bottleneck", x) if spec.use_bottleneck else x
    branches = [ctx.conv(f"{name}.conv{k}", z) for k in spec.kernel_sizes]
    pooled = ad.max_pool1d(x, POOL_WINDOW, 1, padding="same")
    branches.append(ctx.conv(f"{name}.poolconv", pooled))
    return ad.relu(ctx.bn(f"{name}.bn", ad.concat(branches, axis=1)))


def _inception_body(ctx, x):
    spec = ctx.spec
    res = x
    for d in range(spec.depth):
        x = _inception_module(ctx, f"mod{d}", x)
        if spec.use_residual and d % 3 == 2:
            shortcut = res
            if f"res{d}.short.w" in ctx.p:
                shortcut = ctx.bn(f"res{d}.short_bn", ctx.conv(f"res{d}.short", res))
            x = ad.relu(x + shortcut)
            res = x
    return x


def _mlp_body(ctx, x):
    n = x.shape[0]
    h = ad.reshape(x, (n, -1))
    for i in range(1, 4):
        h = ad.dropout(h, MLP_DROPOUT[i - 1], ctx.train, ctx.rng)
        h = ad.relu(ad.dense(h, ctx.p[f"fc{i}.w"], ctx.p[f"fc{i}.b"]))
    return ad.dropout(h, MLP_DROPOUT[3], ctx.train, ctx.rng)


_BODIES = {"fcn": _fcn_body, "resnet": _resnet_body, "inception": _inception_body}


def check_input(spec: ModelSpec, x: np.ndarray) -> None:
    if x.ndim != 3:
        raise ValueError(f"expected input (N, D, T), got shape {x.shape}")
    if x.shape[1] != spec.input_dims:
        raise ValueError(f"model expects {spec.input_dims} dimensions, got {x.shape[1]}")
    if spec.architecture == "mlp" and x.shape[2] != spec.input_length:
        raise ValueError(f"mlp expects length {spec.input_length}, got {x.shape[2]}")


def forward(state: ModelState, x, *, train: bool = False, rng: np.random.Generator | None = None,
            bn_set: str = "clean", grad: bool = False, update_stats: bool = True) -> Forward:
    """Run the network on a batch ``x`` of shape (N, D, T).

    ``x`` may be a :class:`Tensor` (e.g. with ``requires_grad`` for input
    gradients). With ``grad`` the parameters are tracked for backward.
    ``bn_set="adv"`` routes through the second batch-norm set of a dual-BN model.
    """
    spec = state.spec
    xt = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    check_input(spec, xt.data)
    if bn_set == "adv" and not spec.dual_bn:
        raise ValueError("model has no adversarial batch-norm set")
    params = {k: ad.Tensor(v, requires_grad=grad) for k, v in state.params.items()}
    ctx = _Ctx(state, params, train, rng, bn_set, update_stats)
    if spec.architecture == "mlp":
        h, features = _mlp_body(ctx, xt), None
    else:
        features = _BODIES[spec.architecture](ctx, xt)
        h = ad.global_avg_pool(features)
    logits = ad.dense(h, params["head.w"], params["head.b"])
    out = ad.softmax(logits) if spec.head == "classification" else logits
    return Forward(out, logits, features, params, ctx.new_running)


def predict(state: ModelState, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode outputs for ``x`` (N, D, T), processed in chunks."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    outs = [forward(state, x[i:i + batch_size]).output.data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, state.spec.n_classes))


def predict_labels(state: ModelState, x: np.ndarray) -> np.ndarray:
    return predict(state, x).argmax(axis=1)


def ensemble_predict(models: Sequence[ModelState], x: np.ndarray) -> np.ndarray:
    """Equal-weight average of member probabilities.

    Member outputs are sorted per entry before summing so the result does not
    depend on the order of ``models``.
    """
    if not models:
        raise ValueError("empty ensemble")
    ks = {m.spec.n_classes for m in models}
    if len(ks) != 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(ks)}")
    probs = np.stack([predict(m, x) for m in models])
    return np.sort(probs, axis=0).sum(axis=0) / len(models)


# receptive field ------------------------------------------------------------------------

def receptive_field(spec: ModelSpec) -> int:
    """Input span seen by one output unit of the stride-1 convolution stack."""
    if spec.architecture == "fcn":
        kernels = [k for _, k in FCN_LAYERS]
    elif spec.architecture == "resnet":
        kernels = list(RESNET_KERNELS) * len(RESNET_FILTERS)
    elif spec.architecture == "inception":
        kernels = [max(max(spec.kernel_sizes), POOL_WINDOW)] * spec.depth
    else:
        return int(spec.input_length)
    return 1 + sum(k - 1 for k in kernels)


def count_conv_layers(state: ModelState, include_shortcuts: bool = False) -> int:
    names = [k for k, v in state.params.items() if k.endswith(".w") and v.ndim == 3]
    if not include_shortcuts:
        names = [k for k in names if ".short" not in k]
    return len(names)


# serialisation -----------------------------------------------------------------------------

def _write_arrays(buf, tag: bytes, arrays: dict[str, np.ndarray]) -> None:
    buf.write(tag)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dumps_model(state: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    spec = state.spec.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(spec)))
    buf.write(spec)
    _write_arrays(buf, b"PARM", state.params)
    _write_arrays(buf, b"STAT", state.running)
    meta = "".join(f"{k} = {v}\n" for k, v in state.meta.items()).encode("utf-8")
    buf.write(b"META")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated model file at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self, tag: bytes) -> dict[str, np.ndarray]:
        if self.take(4) != tag:
            raise ModelFormatError(f"expected section {tag.decode()}")
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        return out


def loads_model(data: bytes) -> ModelState:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelFormatError("not a .tscm model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    (n,) = r.unpack("<I")
    try:
        spec = ModelSpec.from_text(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError, ValueError, TypeError) as err:
        raise ModelFormatError(f"corrupt spec block: {err}") from None
    params = r.arrays(b"PARM")
    running = r.arrays(b"STAT")
    if r.take(4) != b"META":
        raise ModelFormatError("expected section META")
    (n,) = r.unpack("<I")
    meta = parse_kv(r.take(n).decode("utf-8"))
    if r.pos != len(data):
        raise ModelFormatError("trailing bytes after model")
    state = ModelState(spec, params, running, meta)
    expected = _layout(spec)
    for name, arr in expected.params.items():
        if name not in params or params[name].shape != arr.shape:
            raise ModelFormatError(f"parameter {name} missing or misshapen")
    return state


def save_model(state: ModelState, path) -> None:
    Path(path).write_bytes(dumps_model(state))


def load_model(path) -> ModelState:
    return loads_model(Path(path).read_bytes())


def replace_spec(state: ModelState, **changes) -> ModelState:
    return dataclasses.replace(state, spec=dataclasses.replace(state.spec, **changes))
