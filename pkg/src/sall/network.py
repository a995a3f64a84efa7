"""Hard-shared multi-task convolutional network.

A trunk of conv/relu/pool/dense layers feeds one dense head per task. Parameter
names are ``trunk.<layer>.weight|bias`` for shared weights and
``head.<task>.weight|bias`` for per-task weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    name: str
    units: int


Layer = Union[Conv, ReLU, MaxPool, GlobalAvgPool, Flatten, Dense]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, ReLU, MaxPool, GlobalAvgPool, Flatten, Dense)}


def _shapes(input_shape, trunk):
    """Yield the activation shape after every trunk layer (per example)."""
    shape = tuple(input_shape)
    for layer in trunk:
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise DimensionError(f"conv {layer.name} needs a c x h x w input, got {shape}")
            _, h, w = shape
            hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
            if layer.kernel > hp or layer.kernel > wp:
                raise DimensionError(f"conv {layer.name}: kernel larger than padded input {hp}x{wp}")
            shape = (layer.out_channels, (hp - layer.kernel) // layer.stride + 1, (wp - layer.kernel) // layer.stride + 1)
        elif isinstance(layer, MaxPool):
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            if shape[1] == 0 or shape[2] == 0:
                raise DimensionError("pooling collapsed the feature map")
        elif isinstance(layer, GlobalAvgPool):
            shape = (shape[0],)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise DimensionError(f"dense {layer.name} needs a flat input, got {shape}")
            shape = (layer.units,)
        yield shape


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: input shape, shared trunk layers, and ``(task_id, K)`` heads."""

    input_shape: tuple
    trunk: tuple
    heads: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "heads", tuple((str(t), int(k)) for t, k in self.heads))
        if not self.heads:
            raise ValueError("a network needs at least one head")
        ids = [t for t, _ in self.heads]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate head ids: {ids}")
        for t, k in self.heads:
            if k < 2:
                raise ValueError(f"head {t!r} needs at least 2 classes, got {k}")
        names = [l.name for l in self.trunk if isinstance(l, (Conv, Dense))]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate trunk layer names: {names}")
        if len(self.feature_shape) != 1:
            raise DimensionError(f"trunk must end in a flat feature vector, got {self.feature_shape}")

    @property
    def feature_shape(self) -> tuple:
        shape = self.input_shape
        for shape in _shapes(self.input_shape, self.trunk):
            pass
        return shape

    @property
    def feature_dim(self) -> int:
        return self.feature_shape[0]

    @property
    def task_ids(self) -> list:
        return [t for t, _ in self.heads]

    def n_classes(self, task_id) -> int:
        for t, k in self.heads:
            if t == task_id:
                return k
        raise KeyError(f"unknown task {task_id!r}; heads are {self.task_ids}")

    def with_heads(self, heads) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, self.trunk, tuple(heads))

    def conv_layers(self) -> list:
        return [l.name for l in self.trunk if isinstance(l, Conv)]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "trunk": [{"type": type(l).__name__, **asdict(l)} for l in self.trunk],
            "heads": [[t, k] for t, k in self.heads],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        trunk = []
        for entry in d["trunk"]:
            entry = dict(entry)
            trunk.append(_LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(d["input_shape"]), tuple(trunk), tuple(tuple(h) for h in d["heads"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_spec(heads, input_shape=(3, 64, 64), width: int = 8, feature_dim: int = 32) -> NetworkSpec:
    """Desk-scale trunk: two conv/relu/pool stages, a conv/relu/global-average-pool
    stage, and a dense shared feature layer."""
    trunk = (
        Conv("conv1", width), ReLU(), MaxPool(2),
        Conv("conv2", width), ReLU(), MaxPool(2),
        Conv("conv3", 2 * width), ReLU(), GlobalAvgPool(),
        Dense("fc", feature_dim), ReLU(),
    )
    return NetworkSpec(tuple(input_shape), trunk, tuple(heads))


# ------------------------------------------------------------- parameters


@dataclass
class ParameterSet:
    """Named parameter arrays plus Adam moment estimates and the shared step counter."""

    values: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, w in self.values.items():
            self.m.setdefault(name, np.zeros_like(w))
            self.v.setdefault(name, np.zeros_like(w))

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name) -> bool:
        return name in self.values

    def names(self) -> list:
        return list(self.values)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: w.copy() for k, w in self.values.items()},
            {k: w.copy() for k, w in self.m.items()},
            {k: w.copy() for k, w in self.v.items()},
            self.step,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.values):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.values[name]).tobytes())
        return h.hexdigest()[:16]

    def trunk_names(self) -> list:
        return [n for n in self.values if n.startswith("trunk.")]

    def head_names(self, task_id) -> list:
        prefix = f"head.{task_id}."
        return [n for n in self.values if n.startswith(prefix)]


def init_params(spec: NetworkSpec, seed: int) -> ParameterSet:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    values = {}
    shape = spec.input_shape
    for layer, out_shape in zip(spec.trunk, _shapes(spec.input_shape, spec.trunk)):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel ** 2
            values[f"trunk.{layer.name}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (layer.out_channels, shape[0], layer.kernel, layer.kernel))
            values[f"trunk.{layer.name}.bias"] = np.zeros(layer.out_channels)
        elif isinstance(layer, Dense):
            values[f"trunk.{layer.name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), (shape[0], layer.units))
            values[f"trunk.{layer.name}.bias"] = np.zeros(layer.units)
        shape = out_shape
    for task_id, k in spec.heads:
        values[f"head.{task_id}.weight"] = rng.normal(0.0, np.sqrt(2.0 / spec.feature_dim), (spec.feature_dim, k))
        values[f"head.{task_id}.bias"] = np.zeros(k)
    return ParameterSet(values)


def bind(params: ParameterSet) -> dict:
    """Wrap every parameter array in a gradient-tracking Tensor."""
    return {name: Tensor(w, requires_grad=True, name=name) for name, w in params.values.items()}


def _tensors(params) -> dict:
    if isinstance(params, ParameterSet):
        return {name: Tensor(w, name=name) for name, w in params.values.items()}
    return params


def run_trunk(params, spec: NetworkSpec, batch, keep: bool = False):
    """Evaluate the shared trunk on ``batch`` ([B, c, h, w]).

    Returns the feature Tensor ``f_M`` and, when ``keep`` is set, a dict of
    conv/dense layer outputs keyed by layer name (taken after the ReLU when one
    directly follows the layer).
    """
    p = _tensors(params)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    acts = {}
    prev = None
    for layer in spec.trunk:
        if isinstance(layer, Conv):
            x = ad.conv2d(x, p[f"trunk.{layer.name}.weight"], layer.stride, layer.padding)
            x = ad.channel_bias(x, p[f"trunk.{layer.name}.bias"])
            if keep:
                acts[layer.name] = x
        elif isinstance(layer, ReLU):
            x = ad.relu(x)
            if keep and isinstance(prev, (Conv, Dense)):
                acts[prev.name] = x
        elif isinstance(layer, MaxPool):
            x = ad.maxpool2d(x, layer.size)
        elif isinstance(layer, GlobalAvgPool):
            x = ad.global_avg_pool(x)
        elif isinstance(layer, Flatten):
            x = ad.reshape(x, (x.shape[0], -1))
        elif isinstance(layer, Dense):
            x = ad.add(ad.matmul(x, p[f"trunk.{layer.name}.weight"]), p[f"trunk.{layer.name}.bias"])
            if keep:
                acts[layer.name] = x
        prev = layer
    return (x, acts) if keep else x


def head_logits(params, task_id, features: Tensor) -> Tensor:
    p = _tensors(params)
    return ad.add(ad.matmul(features, p[f"head.{task_id}.weight"]), p[f"head.{task_id}.bias"])


def forward(params, spec: NetworkSpec, batch, tasks=None) -> dict:
    """Logits per task: the trunk runs once and every head reads its output."""
    p = _tensors(params)
    feats = run_trunk(p, spec, batch)
    wanted = spec.task_ids if tasks is None else list(tasks)
    return {t: head_logits(p, t, feats) for t in wanted}


# --------------------------------------------------------------- optimizer


def adam_step(params: ParameterSet, grads: Mapping, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterSet:
    """One bias-corrected Adam update (in place) for the parameters named in
    ``grads``; the step counter advances for the whole set."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params.values:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params.values[name].shape:
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, parameter {params.values[name].shape}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * g * g
        params.values[name] = params.values[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# --------------------------------------------------------------- prediction


@dataclass(frozen=True)
class TaskPrediction:
    task_id: str
    probabilities: np.ndarray
    predicted_class: int


def predict_proba(params, spec: NetworkSpec, images, task_id, T: float = 1.0, batch_size: int = 128) -> np.ndarray:
    """Softmax probabilities ``[N, K]`` for a stack of images."""
    spec.n_classes(task_id)
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), batch_size):
        logits = forward(params, spec, images[i:i + batch_size], tasks=[task_id])[task_id]
        out.append(ad.softmax_array(logits.data, T))
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes(task_id)))


def predict(params, spec: NetworkSpec, image, task_id, T: float = 1.0) -> TaskPrediction:
    """Class probabilities and argmax (lowest index wins ties) for one image."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    probs = predict_proba(params, spec, image[None], task_id, T)[0]
    return TaskPrediction(task_id, probs, int(np.argmax(probs)))


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ParameterSet, spec: NetworkSpec, seed: Optional[int] = None, **extra) -> Path:
    """Write parameters and Adam state to an ``.npz`` archive with a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "spec": spec.to_dict(),
        "spec_hash": spec.fingerprint(),
        "seed": seed,
        "step": params.step,
        "params_hash": params.fingerprint(),
        **extra,
    }
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for name in params.values:
        arrays[f"value/{name}"] = params.values[name]
        arrays[f"m/{name}"] = params.m[name]
        arrays[f"v/{name}"] = params.v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, spec, header)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        values, m, v = {}, {}, {}
        for key in z.files:
            if key == "__header__":
                continue
            kind, name = key.split("/", 1)
            {"value": values, "m": m, "v": v}[kind][name] = z[key]
    spec = NetworkSpec.from_dict(header["spec"])
    if spec.fingerprint() != header["spec_hash"]:
        raise ValueError(f"checkpoint {path} spec hash mismatch")
    return ParameterSet(values, m, v, header["step"]), spec, header
