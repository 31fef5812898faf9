"""Small teacher/student architectures and their checkpoint format.

Three kinds are available, ordered by capacity:

* ``tiny_cnn``  -- conv3x3 -> relu -> maxpool4 -> fc -> relu -> fc   (~10k params at 1x28x28)
* ``mlp``       -- flatten -> [fc -> relu]* -> fc                     (~100k params)
* ``small_cnn`` -- conv5x5 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> fc -> relu -> fc (~300k)

Weights use a fan-in scaled uniform initialisation, ``U(-b, b)`` with
``b = 1 / sqrt(fan_in)``; biases start at zero.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)
from .tensor import Tensor

KINDS = ("tiny_cnn", "mlp", "small_cnn")

DEFAULT_WIDTHS = {
    "tiny_cnn": (8, 24),
    "mlp": (128,),
    "small_cnn": (8, 16, 384),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    widths: tuple[int, ...] = ()
    num_classes: int = 10
    input_shape: tuple[int, ...] = (1, 28, 28)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in (self.widths or DEFAULT_WIDTHS.get(self.kind, ()))))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}", field="kind")
        if int(self.num_classes) < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}", field="num_classes")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}", field="widths")
        if len(self.input_shape) != 3 or any(d <= 0 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}",
                              field="input_shape")
        expected = {"tiny_cnn": 2, "small_cnn": 3}.get(self.kind)
        if expected is not None and len(self.widths) != expected:
            raise ConfigError(f"{self.kind} takes {expected} widths, got {self.widths}", field="widths")
        c, h, w = self.input_shape
        if self.kind == "tiny_cnn" and (h < 4 or w < 4):
            raise ConfigError("tiny_cnn needs spatial extent >= 4", field="input_shape")
        if self.kind == "small_cnn" and (h < 4 or w < 4):
            raise ConfigError("small_cnn needs spatial extent >= 4", field="input_shape")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"kind", "widths", "num_classes", "input_shape"}
        if unknown:
            raise ConfigError(f"unknown model spec keys {sorted(unknown)}", field=sorted(unknown)[0])
        if "kind" not in d:
            raise ConfigError("model spec needs a 'kind'", field="kind")
        return cls(kind=d["kind"], widths=tuple(d.get("widths") or ()),
                   num_classes=int(d.get("num_classes", 10)),
                   input_shape=tuple(d.get("input_shape", (1, 28, 28))))


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in creation order."""
    c, h, w = spec.input_shape
    k = spec.num_classes
    shapes = []
    if spec.kind == "mlp":
        prev = c * h * w
        for i, width in enumerate(spec.widths):
            shapes += [(f"fc{i}.weight", (prev, width), prev), (f"fc{i}.bias", (width,), prev)]
            prev = width
        shapes += [("out.weight", (prev, k), prev), ("out.bias", (k,), prev)]
    elif spec.kind == "tiny_cnn":
        ch, hidden = spec.widths
        flat = ch * (h // 4) * (w // 4)
        shapes += [("conv0.weight", (ch, c, 3, 3), c * 9), ("conv0.bias", (ch,), c * 9),
                   ("fc0.weight", (flat, hidden), flat), ("fc0.bias", (hidden,), flat),
                   ("out.weight", (hidden, k), hidden), ("out.bias", (k,), hidden)]
    else:
        c1, c2, hidden = spec.widths
        flat = c2 * ((h // 2) // 2) * ((w // 2) // 2)
        shapes += [("conv0.weight", (c1, c, 5, 5), c * 25), ("conv0.bias", (c1,), c * 25),
                   ("conv1.weight", (c2, c1, 3, 3), c1 * 9), ("conv1.bias", (c2,), c1 * 9),
                   ("fc0.weight", (flat, hidden), flat), ("fc0.bias", (hidden,), flat),
                   ("out.weight", (hidden, k), hidden), ("out.bias", (k,), hidden)]
    return shapes


def count_parameters(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _layer_shapes(spec))


class Model:
    """A parameterised map from an input batch to class logits."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = dict(params)
        self.training = True

    # -------------------------------------------------------------- plumbing
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def freeze(self) -> "Model":
        """Stop gradients into every parameter and switch to eval mode."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self.eval()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError(f"state keys {sorted(state)} do not match parameters {sorted(self.params)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # --------------------------------------------------------------- forward
    def _check_input(self, x) -> Tensor:
        x = T.as_tensor(x, self.dtype)
        expected = self.spec.input_shape
        if x.ndim != 1 + len(expected) or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects input of shape (batch, {', '.join(map(str, expected))}), got {x.shape}")
        return x

    def features(self, x) -> Tensor:
        """Penultimate-layer embedding (input to the output layer)."""
        x = self._check_input(x)
        p = self.params
        kind = self.spec.kind
        if kind == "mlp":
            h = x.flatten()
            for i in range(len(self.spec.widths)):
                h = T.relu(h @ p[f"fc{i}.weight"] + p[f"fc{i}.bias"])
            return h
        if kind == "tiny_cnn":
            h = T.relu(T.conv2d(x, p["conv0.weight"], p["conv0.bias"], stride=1, pad=1))
            h = T.max_pool2d(h, 4).flatten()
            return T.relu(h @ p["fc0.weight"] + p["fc0.bias"])
        h = T.relu(T.conv2d(x, p["conv0.weight"], p["conv0.bias"], stride=1, pad=2))
        h = T.max_pool2d(h, 2)
        h = T.relu(T.conv2d(h, p["conv1.weight"], p["conv1.bias"], stride=1, pad=1))
        h = T.max_pool2d(h, 2).flatten()
        return T.relu(h @ p["fc0.weight"] + p["fc0.bias"])

    def head(self, features: Tensor) -> Tensor:
        return features @ self.params["out.weight"] + self.params["out.bias"]

    def forward(self, x) -> Tensor:
        """Class logits of shape ``(batch, num_classes)``."""
        return self.head(self.features(x))

    __call__ = forward

    def predict_logits(self, x, batch_size: int = 512) -> np.ndarray:
        """Logits for a whole array, computed without building a graph."""
        x = np.asarray(x)
        chunks = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                chunks.append(self.forward(x[i:i + batch_size]).data)
        return np.concatenate(chunks, axis=0)

    def __repr__(self) -> str:
        return f"Model({self.spec.kind}, widths={self.spec.widths}, params={self.num_parameters})"


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Instantiate ``spec`` with seeded fan-in uniform initialisation."""
    if not isinstance(spec, ModelSpec):
        raise ConfigError(f"build() needs a ModelSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in _layer_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return Model(spec, params)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic      8 bytes  b"KDLABCKP"
#   version    uint32
#   spec_len   uint32, then spec_len bytes of UTF-8 JSON (ModelSpec.to_dict)
#   n_params   uint32
#   per param: name_len uint16, name, dtype code uint8, ndim uint8,
#              ndim x uint32 extents, raw values
#
# all integers and values little-endian.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"KDLABCKP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save(model: Model, path) -> None:
    spec_blob = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(spec_blob)), spec_blob,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        code = _CODE_FOR[np.dtype(p.dtype)]
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype=_DTYPE_CODES[code]).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = blob[:len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a kdlab checkpoint: magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    r.take(len(CHECKPOINT_MAGIC))
    version, spec_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(spec_len).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(f"corrupt model spec in checkpoint: {exc}") from exc
    (n_params,) = r.unpack("<I")
    params = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"parameter {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPE_CODES[code]
        raw = r.take(int(np.prod(shape)) * dt.itemsize)
        data = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(data, requires_grad=True, dtype=data.dtype)
    if r.pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - r.pos} trailing bytes after last parameter")
    expected = [n for n, _, _ in _layer_shapes(spec)]
    if list(params) != expected:
        raise CheckpointFormatError(f"parameter names {list(params)} do not match spec {expected}")
    return Model(spec, params)
