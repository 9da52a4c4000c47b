"""Classifier architectures, temperature softmax inference and input Jacobians."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, DimensionError

LAYER_KINDS = ("conv-relu", "maxpool", "dense-relu", "dense-linear", "softmax")

MAGIC = b"DDNNMDL\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    units: int = 0
    padding: str = "same"
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dropout and not self.kind.startswith("dense"):
            raise ValueError(f"dropout is only allowed on dense layers, not {self.kind}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "conv-relu":
            out.update(filters=self.filters, kernel=self.kernel, padding=self.padding)
        elif self.kind.startswith("dense"):
            out.update(units=self.units, dropout=self.dropout)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple = (1, 28, 28)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        kinds = [layer.kind for layer in self.layers]
        if not kinds or kinds[-1] != "softmax" or kinds.count("softmax") != 1:
            raise ValueError("a model needs exactly one softmax layer, in final position")
        if len(kinds) < 2 or kinds[-2] != "dense-linear":
            raise ValueError("the softmax must follow a dense-linear logit layer")

    @property
    def class_count(self) -> int:
        return self.layers[-2].units

    @property
    def input_dimension(self) -> int:
        return math.prod(self.input_shape)

    def with_dropout(self, rate: float) -> "ModelSpec":
        """Same architecture with ``rate`` on every dense-relu layer."""
        layers = [replace(l, dropout=rate) if l.kind == "dense-relu" else l for l in self.layers]
        return replace(self, layers=tuple(layers))


def architecture(name: str, input_shape=(1, 28, 28), class_count: int = 10,
                 dropout: float = 0.0) -> ModelSpec:
    """Desk-scale architectures: ``mnist-small`` (conv) and ``mlp-tiny``."""
    if name == "mnist-small":
        layers = [
            LayerSpec("conv-relu", filters=8, kernel=3),
            LayerSpec("maxpool"),
            LayerSpec("conv-relu", filters=16, kernel=3),
            LayerSpec("maxpool"),
            LayerSpec("dense-relu", units=64, dropout=dropout),
            LayerSpec("dense-relu", units=64, dropout=dropout),
        ]
    elif name == "mlp-tiny":
        layers = [
            LayerSpec("dense-relu", units=128, dropout=dropout),
            LayerSpec("dense-relu", units=128, dropout=dropout),
        ]
    else:
        raise ValueError(f"unknown architecture {name!r} (expected mnist-small or mlp-tiny)")
    layers += [LayerSpec("dense-linear", units=class_count), LayerSpec("softmax")]
    return ModelSpec(tuple(layers), tuple(input_shape))


def parameter_shapes(spec: ModelSpec) -> list[tuple[str, tuple]]:
    """Trainable tensors in declaration order, with their fan-in/fan-out."""
    shapes = []
    c, h, w = spec.input_shape
    flat = None
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv-relu":
            if flat is not None:
                raise ValueError("conv layers cannot follow dense layers")
            k = layer.kernel
            shapes.append((f"layer{i}.weight", (layer.filters, c, k, k)))
            shapes.append((f"layer{i}.bias", (layer.filters,)))
            c = layer.filters
            if layer.padding == "valid":
                h, w = h - k + 1, w - k + 1
        elif layer.kind == "maxpool":
            if h % 2 or w % 2:
                raise DimensionError(f"maxpool at layer {i} (odd spatial extent)", (c, h, w))
            h, w = h // 2, w // 2
        elif layer.kind.startswith("dense"):
            fan_in = flat if flat is not None else c * h * w
            shapes.append((f"layer{i}.weight", (fan_in, layer.units)))
            shapes.append((f"layer{i}.bias", (layer.units,)))
            flat = layer.units
    return shapes


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(repr=False)
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def layers(self):
        return self.spec.layers

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def copy(self) -> "Model":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def init_model(spec: ModelSpec, seed: int, temperature: float = 1.0) -> Model:
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)); biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(DTYPE)
    return Model(spec, params, float(temperature), int(seed))


def _as_batch(spec: ModelSpec, X) -> tuple[np.ndarray, bool]:
    X = ad.as_tensor(X)
    if X.shape == spec.input_shape:
        return X[None], True
    if X.ndim == len(spec.input_shape) + 1 and X.shape[1:] == spec.input_shape:
        return X, False
    raise DimensionError("model input", spec.input_shape, X.shape)


def forward(model: Model, graph: ad.Graph, x: ad.Node, *, dropout_rng=None,
            param_nodes: Optional[dict] = None) -> ad.Node:
    """Appends the model to ``graph`` and returns the logit node.

    Dropout masks are drawn from ``dropout_rng`` when given (training), and
    skipped otherwise.
    """
    if param_nodes is None:
        param_nodes = {name: graph.input(v, name=name) for name, v in model.params.items()}
    h = x
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "conv-relu":
            h = ad.conv2d(h, param_nodes[f"layer{i}.weight"], layer.padding)
            h = ad.relu(ad.add_bias(h, param_nodes[f"layer{i}.bias"]))
        elif kind == "maxpool":
            h = ad.maxpool2x2(h)
        elif kind in ("dense-relu", "dense-linear"):
            if h.value.ndim != 2:
                h = ad.reshape(h, (h.shape[0], -1))
            h = ad.add_bias(ad.matmul(h, param_nodes[f"layer{i}.weight"]),
                            param_nodes[f"layer{i}.bias"])
            if kind == "dense-relu":
                h = ad.relu(h)
                if layer.dropout and dropout_rng is not None:
                    keep = 1.0 - layer.dropout
                    m = (dropout_rng.random(h.shape) < keep) / keep
                    h = ad.mask(h, m, "dropout")
        elif kind == "softmax":
            break
    return h


def logits(model: Model, X) -> np.ndarray:
    """Pre-softmax outputs Z(X); independent of the model temperature."""
    batch, single = _as_batch(model.spec, X)
    g = ad.Graph()
    z = forward(model, g, g.input(batch)).value
    return z[0] if single else z


def predict(model: Model, X, temperature: Optional[float] = None) -> np.ndarray:
    """Softmax of ``Z(X) / T``; ``temperature`` overrides the model's own T."""
    t = model.temperature if temperature is None else temperature
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    return ad.stable_softmax(logits(model, X), t)


def classify(model: Model, X) -> np.ndarray:
    """Argmax class; lowest index wins ties. Temperature cannot change it."""
    return np.argmax(logits(model, X), axis=-1)


def input_jacobians(model: Model, X, temperature: float = 1.0, chunk: int = 64) -> np.ndarray:
    """Jacobians dF_i/dX_j for a batch, shape (S, N, M).

    One backward pass per output component; the N passes for a sample are
    vectorized by replicating it N times and seeding row i with e_i.
    """
    batch, _ = _as_batch(model.spec, X)
    n = model.class_count
    out = np.empty((batch.shape[0], n, model.spec.input_dimension), dtype=DTYPE)
    eye = np.eye(n, dtype=DTYPE)
    for start in range(0, batch.shape[0], chunk):
        part = batch[start:start + chunk]
        s = part.shape[0]
        g = ad.Graph()
        x = g.input(np.repeat(part, n, axis=0), requires_grad=True)
        p = ad.softmax(forward(model, g, x), temperature)
        grads = ad.backward(g, p, np.tile(eye, (s, 1)))
        jac = grads[x].reshape(s, n, -1)
        out[start:start + s] = ad.check_finite(jac, "input Jacobian")
    return out


def input_jacobian(model: Model, X, temperature: float = 1.0) -> np.ndarray:
    """N x M Jacobian of the softmax output at ``temperature`` for one sample."""
    X = ad.as_tensor(X)
    if X.shape != model.spec.input_shape:
        raise DimensionError("input_jacobian", model.spec.input_shape, X.shape)
    return input_jacobians(model, X, temperature)[0]


def mean_abs_input_gradient(model: Model, X) -> float:
    """Mean |dF_i/dX_j| at test temperature 1."""
    return float(np.mean(np.abs(input_jacobian(model, X, 1.0))))


def mean_abs_input_gradients(model: Model, X, chunk: int = 64) -> np.ndarray:
    """Per-sample mean |J| at temperature 1 for a batch."""
    jac = input_jacobians(model, X, 1.0, chunk=chunk)
    return np.abs(jac).mean(axis=(1, 2), dtype=np.float64)


# ---------------------------------------------------------------------------
# serialization
#
# MAGIC (8 bytes) | version u32 LE | header length u32 LE | header JSON (utf-8)
# | parameters as float32 LE, declaration order, row-major


def _header(model: Model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.spec.input_shape),
        "layers": [layer.to_dict() for layer in model.layers],
        "temperature": model.temperature,
        "seed": model.seed,
        "parameters": [{"name": n, "shape": list(s)} for n, s in parameter_shapes(model.spec)],
    }


def model_to_bytes(model: Model) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for name, shape in parameter_shapes(model.spec):
        arr = model.params[name]
        if arr.shape != tuple(shape):
            raise DimensionError(f"serialize {name}", shape, arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def model_from_bytes(blob: bytes) -> Model:
    if blob[:8] != MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    header = json.loads(blob[16:16 + hlen].decode())
    spec = ModelSpec(tuple(LayerSpec.from_dict(d) for d in header["layers"]),
                     tuple(header["input_shape"]))
    offset = 16 + hlen
    params = {}
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        if offset + 4 * count > len(blob):
            raise ValueError(f"model file truncated in parameter {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.astype(DTYPE).reshape(shape)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{len(blob) - offset} trailing bytes after parameters")
    return Model(spec, params, float(header["temperature"]), int(header["seed"]))


def save_model(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())

