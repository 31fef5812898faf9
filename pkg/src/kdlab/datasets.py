"""Dataset containers, IDX parsing, synthetic corpora and subsampling."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    IDXCountMismatchError,
    IDXMagicError,
    IDXParseError,
    IDXTruncatedError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("="): code for code, dt in _IDX_TYPES.items()}


@dataclass
class Dataset:
    """Inputs ``(n, c, h, w)`` with integer labels in ``[0, num_classes)``.

    ``mean``/``std`` record the normalisation already applied to ``inputs``
    (0 and 1 for raw data); ``data_range`` is the raw [0, 1] pixel range
    expressed in the normalised space.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise DataError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def data_range(self) -> tuple[float, float]:
        return ((0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, index) -> "Dataset":
        return replace(self, inputs=self.inputs[index], labels=self.labels[index])


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def parse_idx(blob: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX byte string into an array (native byte order)."""
    if len(blob) < 4:
        raise IDXTruncatedError(f"IDX header truncated: {len(blob)} bytes")
    (magic,) = struct.unpack(">I", blob[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IDXMagicError(f"bad IDX magic: expected 0x{expected_magic:08X}, got 0x{magic:08X}")
    if magic >> 16 != 0:
        raise IDXMagicError(f"bad IDX magic 0x{magic:08X}: leading bytes must be zero")
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_TYPES:
        raise IDXMagicError(f"bad IDX magic 0x{magic:08X}: unknown type code 0x{code:02X}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IDXTruncatedError(f"IDX header truncated: need {header} bytes, have {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    dt = _IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = blob[header:]
    if len(payload) < need:
        raise IDXTruncatedError(f"IDX payload truncated: need {need} bytes, have {len(payload)}")
    if len(payload) > need:
        raise IDXParseError(f"IDX payload has {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise DataError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[native]
    head = struct.pack(">I", (code << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_IDX_TYPES[code]).tobytes()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


def write_idx(path, array: np.ndarray) -> None:
    blob = serialize_idx(array)
    if str(path).endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixel bytes are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    inputs = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(inputs, labels.astype(np.int64), k, split=split)


def save_idx_pair(dataset_images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    write_idx(images_path, np.asarray(dataset_images_u8, dtype=np.uint8))
    write_idx(labels_path, np.asarray(labels, dtype=np.uint8))


# ---------------------------------------------------------------------------
# tensor files (synthetic sets): magic, version, array count, then per array
# name, dtype code, ndim, extents and the little-endian payload
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"KDLABTSR"
TENSOR_VERSION = 1
_TF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TF_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def save_tensor_file(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [TENSOR_MAGIC, struct.pack("<II", TENSOR_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _TF_CODES[arr.dtype.newbyteorder("=")]
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=_TF_DTYPES[code]).tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_tensor_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != TENSOR_MAGIC:
        raise DataError(f"not a tensor file: magic {blob[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError("tensor file truncated")
        out = struct.unpack(fmt, blob[pos:pos + size])
        pos += size
        return out

    version, count = take("<II")
    if version != TENSOR_VERSION:
        raise DataError(f"tensor file version {version}, expected {TENSOR_VERSION}")
    out = {}
    for _ in range(count):
        (n,) = take("<H")
        name = blob[pos:pos + n].decode()
        pos += n
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dt = _TF_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(blob):
            raise DataError("tensor file truncated")
        out[name] = np.frombuffer(blob[pos:pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size
    return out


def save_dataset(path, d: Dataset) -> None:
    save_tensor_file(path, {
        "inputs": d.inputs.astype(np.float32),
        "labels": d.labels.astype(np.int64),
        "meta": np.array([d.num_classes, d.mean, d.std, 0.0 if d.split == "train" else 1.0]),
    })


def load_dataset(path) -> Dataset:
    arrays = load_tensor_file(path)
    k, mean, std, split = arrays["meta"]
    return Dataset(arrays["inputs"], arrays["labels"], int(k), "train" if split == 0 else "test",
                   float(mean), float(std))


# ---------------------------------------------------------------------------
# normalisation and subsampling
# ---------------------------------------------------------------------------

def normalize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardise with the train split's scalar mean/std; apply to every split."""
    mean = float(np.mean(train.inputs, dtype=np.float64))
    std = float(np.std(train.inputs, dtype=np.float64)) or 1.0

    def apply(d):
        x = ((d.inputs.astype(np.float64) * d.std + d.mean - mean) / std).astype(np.float32)
        return replace(d, inputs=x, mean=mean, std=std)

    return tuple(apply(d) for d in (train, *others))


def subsample(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified, seed-stable subset keeping ``round(fraction * n_class)`` per class.

    For one seed, smaller fractions give subsets of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return d
    keep = []
    for cls in range(d.num_classes):
        idx = np.flatnonzero(d.labels == cls)
        if len(idx) == 0:
            continue
        k = int(np.floor(fraction * len(idx) + 0.5))
        if k == 0:
            raise DataError(f"fraction {fraction} leaves no samples of class {cls} ({len(idx)} available)")
        order = np.random.default_rng([seed, cls]).permutation(len(idx))
        keep.append(idx[order[:k]])
    return d.take(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synth_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int,
                split: str = "train") -> Dataset:
    """Unit-variance Gaussian clusters whose closest pair of centres is
    ``separation`` apart.  Inputs have shape ``(n, 1, 1, dim)``."""
    if separation <= 0:
        raise DataError(f"separation must be > 0, got {separation}")
    if classes < 2 or per_class < 1 or dim < 1:
        raise DataError("need classes >= 2, per_class >= 1, dim >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    gaps[np.diag_indices(classes)] = np.inf
    centers *= separation / gaps.min()
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + rng.standard_normal((len(labels), dim))
    return Dataset(x.astype(np.float32).reshape(len(labels), 1, 1, dim), labels, classes, split=split)


def blob_splits(classes: int, train_per_class: int, test_per_class: int, dim: int, separation: float,
                seed: int) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn around the same blob centres."""
    full = synth_blobs(classes, train_per_class + test_per_class, dim, separation, seed)
    rank = np.arange(len(full)) % (train_per_class + test_per_class)
    train = full.take(rank < train_per_class)
    test = replace(full.take(rank >= train_per_class), split="test")
    return train, test


# Stroke templates in a unit box (x to the right, y downward).
def _arc(cx, cy, rx, ry, t0, t1, n=12):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


_PI = np.pi
DIGIT_STROKES: dict[int, list[np.ndarray]] = {
    0: [_arc(0.5, 0.5, 0.28, 0.42, 0, 2 * _PI, 20)],
    1: [np.array([[0.35, 0.25], [0.55, 0.08], [0.55, 0.92]])],
    2: [np.vstack([_arc(0.5, 0.3, 0.28, 0.22, -_PI, 0.35 * _PI, 10), [[0.2, 0.92], [0.82, 0.92]]])],
    3: [_arc(0.48, 0.29, 0.27, 0.21, -0.9 * _PI, 0.5 * _PI, 10),
        _arc(0.48, 0.71, 0.3, 0.21, -0.5 * _PI, 0.9 * _PI, 10)],
    4: [np.array([[0.62, 0.08], [0.18, 0.65], [0.85, 0.65]]), np.array([[0.65, 0.35], [0.65, 0.95]])],
    5: [np.array([[0.8, 0.08], [0.28, 0.08], [0.24, 0.45]]),
        _arc(0.5, 0.66, 0.3, 0.26, -0.75 * _PI, 0.8 * _PI, 12)],
    6: [np.vstack([[[0.72, 0.1], [0.42, 0.3]], _arc(0.5, 0.7, 0.25, 0.22, _PI, 3 * _PI, 16)])],
    7: [np.array([[0.18, 0.1], [0.82, 0.1], [0.4, 0.92]])],
    8: [_arc(0.5, 0.28, 0.22, 0.2, 0, 2 * _PI, 14), _arc(0.5, 0.7, 0.27, 0.23, 0, 2 * _PI, 16)],
    9: [_arc(0.5, 0.32, 0.26, 0.24, 0, 2 * _PI, 16), np.array([[0.76, 0.32], [0.7, 0.92]])],
}


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``px (p, 2)`` to segments ``a -> b (s, 2)``; returns (p,)."""
    ab = b - a
    ap = px[:, None, :] - a[None]
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    t = np.clip(np.sum(ap * ab[None], axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.min(np.linalg.norm(px[:, None, :] - closest, axis=2), axis=1)


def render_digit(digit: int, rng: np.random.Generator, size: int = 28, jitter: float = 0.05,
                 noise: float = 0.15, clutter: int = 2) -> np.ndarray:
    """Rasterise one distorted digit as a float image in [0, 1]."""
    strokes = [s + rng.normal(0.0, jitter, s.shape) for s in DIGIT_STROKES[digit]]
    angle = rng.uniform(-0.3, 0.3)
    shear = rng.uniform(-0.35, 0.35)
    sx, sy = rng.uniform(0.7, 1.1), rng.uniform(0.8, 1.1)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    lin = rot @ np.array([[sx, shear], [0.0, sy]])
    shift = rng.uniform(-0.08, 0.08, 2)
    pts = [((s - 0.5) @ lin.T) + 0.5 + shift for s in strokes]
    a = np.concatenate([p[:-1] for p in pts])
    b = np.concatenate([p[1:] for p in pts])
    # clutter: short random strokes unrelated to the class
    for _ in range(rng.integers(0, clutter + 1)):
        start = rng.uniform(0.0, 1.0, 2)
        a = np.vstack([a, start])
        b = np.vstack([b, start + rng.normal(0.0, 0.15, 2)])

    margin = 4.0
    coords = (np.arange(size) + 0.5 - margin) / (size - 2 * margin)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    thick = rng.uniform(0.045, 0.09)
    d = _segment_distance(grid, a, b)
    soft = 0.6 / (size - 2 * margin)
    img = np.clip((thick - d) / soft + 0.5, 0.0, 1.0).reshape(size, size)
    img = img * rng.uniform(0.7, 1.0) + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_digits_u8(per_class: int, seed: int, size: int = 28, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Procedural handwritten-digit-style images as uint8 ``(n, size, size)`` plus labels.

    Sample order is shuffled; class counts are exactly ``per_class``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(10), per_class))
    images = np.empty((len(labels), size, size), dtype=np.uint8)
    for i, y in enumerate(labels):
        images[i] = np.round(render_digit(int(y), rng, size, **kwargs) * 255.0).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_digit_corpus(root, train_per_class: int = 400, test_per_class: int = 200, seed: int = 0,
                       **kwargs) -> dict[str, Path]:
    """Generate the desk corpus and store it as four IDX files under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, per_class, offset in (("train", train_per_class, 0), ("test", test_per_class, 1)):
        images, labels = synth_digits_u8(per_class, seed * 2 + offset, **kwargs)
        img_path = root / f"{split}-images-idx3-ubyte"
        lbl_path = root / f"{split}-labels-idx1-ubyte"
        save_idx_pair(images, labels, img_path, lbl_path)
        paths[f"{split}_images"] = img_path
        paths[f"{split}_labels"] = lbl_path
    return paths


def load_digit_corpus(root, normalize_inputs: bool = True) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", "train", 10)
    test = load_idx(root / "test-images-idx3-ubyte", root / "test-labels-idx1-ubyte", "test", 10)
    if normalize_inputs:
        train, test = normalize(train, test)
    return train, test


def ensure_digit_corpus(root, **kwargs) -> tuple[Dataset, Dataset]:
    """Load the corpus from ``root``, generating it first if absent."""
    root = Path(root)
    if not (root / "test-labels-idx1-ubyte").exists():
        write_digit_corpus(root, **kwargs)
    return load_digit_corpus(root)


def default_data_root() -> Path:
    return Path(os.environ.get("KDLAB_DATA", Path.home() / ".cache" / "kdlab" / "digits"))
