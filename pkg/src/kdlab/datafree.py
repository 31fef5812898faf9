"""Data-free distillation by inverting a frozen teacher.

Synthetic inputs start as uniform noise over the pixel range and are pushed
by Adam towards a target class under the teacher, with total-variation and
L2 penalties.  After every step they are clamped back into the pixel range.
The teacher is frozen, so gradient reaches only the inputs.

Inputs live in the teacher's normalised space.  ``InversionSpec.mean`` and
``std`` say how raw pixels in [0, 1] map into that space; they are the only
facts about the training data the inversion needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .distill import DistillRun, ModelRef, RunResult, TrainingSetup, resolve_model, train_student
from .errors import ConfigError, ContractError
from .models import Model, ModelSpec
from .objectives import KDParams, cross_entropy
from .optim import Adam, OptimizerSpec

MAX_ATTEMPTS = 3


@dataclass(frozen=True)
class InversionSpec:
    per_class: int = 200
    steps: int = 50
    lr: float = 0.1
    tv_weight: float = 1e-3
    l2_weight: float = 1e-4
    temperature: float = 1.0
    seed: int = 0
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.per_class < 1:
            raise ConfigError(f"per_class must be >= 1, got {self.per_class}", field="per_class")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}", field="steps")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}", field="lr")
        if self.tv_weight < 0 or self.l2_weight < 0:
            raise ConfigError("regulariser weights must be >= 0", field="tv_weight" if self.tv_weight < 0 else "l2_weight")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}", field="temperature")
        if not self.std > 0:
            raise ConfigError(f"std must be > 0, got {self.std}", field="std")

    @property
    def data_range(self) -> tuple[float, float]:
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std

    def to_dict(self) -> dict:
        return asdict(self)


def total_variation(x) -> T.Tensor:
    """Squared-difference total variation, summed per image and averaged over the batch."""
    x = T.as_tensor(x)
    dh = x[:, :, 1:, :] - x[:, :, :-1, :]
    dw = x[:, :, :, 1:] - x[:, :, :, :-1]
    return ((dh * dh).sum() + (dw * dw).sum()) / float(x.shape[0])


def mean_total_variation(images: np.ndarray) -> float:
    with T.no_grad():
        return total_variation(T.Tensor(np.asarray(images), dtype=np.float64)).item()


def _objective(teacher: Model, x: T.Tensor, labels: np.ndarray, spec: InversionSpec) -> T.Tensor:
    logits = teacher(x)
    if spec.temperature != 1.0:
        logits = logits / spec.temperature
    loss = cross_entropy(logits, labels)
    if spec.tv_weight:
        loss = loss + total_variation(x) * spec.tv_weight
    if spec.l2_weight:
        loss = loss + (x * x).sum() * (spec.l2_weight / x.shape[0])
    return loss


def _invert_batch(teacher: Model, labels: np.ndarray, spec: InversionSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.data_range
    shape = (len(labels), *teacher.spec.input_shape)
    x = T.Tensor(rng.uniform(lo, hi, size=shape), dtype=teacher.dtype, requires_grad=True)
    opt = Adam([x], OptimizerSpec("adam", lr=spec.lr, weight_decay=0.0))
    for _ in range(spec.steps):
        opt.zero_grad()
        _objective(teacher, x, labels, spec).backward()
        opt.step()
        np.clip(x.data, lo, hi, out=x.data)
        if not np.all(np.isfinite(x.grad)):
            break
    return x.data


def invert(teacher: ModelRef, spec: InversionSpec) -> Dataset:
    """Synthesise ``spec.per_class`` labelled inputs per class from ``teacher``.

    Rows that come out non-finite are redrawn from a fresh seed; after
    ``MAX_ATTEMPTS`` failures for one class a ContractError is raised.
    """
    teacher = resolve_model(teacher)
    teacher.freeze()
    before = teacher.checksum()
    k = teacher.spec.num_classes
    chunks = []
    for cls in range(k):
        labels = np.full(spec.per_class, cls, dtype=np.int64)
        out = _invert_batch(teacher, labels, spec, np.random.default_rng([spec.seed, cls, 0]))
        for attempt in range(1, MAX_ATTEMPTS + 1):
            bad = ~np.all(np.isfinite(out.reshape(len(out), -1)), axis=1)
            if not bad.any():
                break
            if attempt == MAX_ATTEMPTS:
                raise ContractError(f"inversion for class {cls} diverged {MAX_ATTEMPTS} times")
            out[bad] = _invert_batch(teacher, labels[bad], spec, np.random.default_rng([spec.seed, cls, attempt]))
        chunks.append(out)
    if teacher.checksum() != before or any(p.grad is not None for p in teacher.parameters()):
        raise ContractError("teacher changed or received gradient during inversion")
    inputs = np.concatenate(chunks).astype(np.float32)
    labels = np.repeat(np.arange(k, dtype=np.int64), spec.per_class)
    return Dataset(inputs, labels, k, "train", spec.mean, spec.std)


def teacher_confidence(teacher: ModelRef, synthetic: Dataset) -> float:
    """Mean softmax probability the teacher assigns to each synthetic sample's target."""
    teacher = resolve_model(teacher)
    logits = teacher.predict_logits(synthetic.inputs).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(np.mean(p[np.arange(len(synthetic)), synthetic.labels]))


def dataset_checksum(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(d.inputs).tobytes())
    h.update(d.labels.tobytes())
    return h.hexdigest()


DATAFREE_SETUP = TrainingSetup(eval_every=0)


@dataclass
class DataFreeRun:
    teacher: ModelRef
    student: ModelSpec
    inversion: InversionSpec = field(default_factory=InversionSpec)
    kd: KDParams = field(default_factory=KDParams)
    seed: int = 0
    setup: TrainingSetup = field(default_factory=lambda: DATAFREE_SETUP)


def datafree_distill(run: DataFreeRun, test_data: Dataset | None = None) -> tuple[RunResult, Dataset]:
    """Invert the teacher, then distil ``run.student`` on the synthetic set only.

    ``test_data`` is used for evaluation and never for training.
    """
    teacher = resolve_model(run.teacher)
    synthetic = invert(teacher, run.inversion)
    result = train_student(DistillRun(teacher, run.student, run.kd, seed=run.seed, setup=run.setup),
                           synthetic, test_data)
    result.summary.update({
        "teacher_confidence": teacher_confidence(teacher, synthetic),
        "mean_tv": mean_total_variation(synthetic.inputs),
        "synthetic_checksum": dataset_checksum(synthetic),
    })
    return result, synthetic


__all__ = ["InversionSpec", "DataFreeRun", "invert", "datafree_distill", "total_variation",
           "mean_total_variation", "teacher_confidence", "dataset_checksum"]
