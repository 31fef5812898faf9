"""Teacher training, knowledge distillation and self-undermining teachers.

Reference networks (the teacher during distillation, the adversary during
self-undermining training) are frozen before use and their logits on the
training set are computed once up front.  Because they are frozen and have no
stochastic layers those logits are exactly what a per-batch forward pass
would give, and they never enter the gradient graph.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from . import models as M
from . import tensor as T
from .datasets import Dataset, subsample
from .errors import ConfigError, ContractError
from .models import Model, ModelSpec
from .objectives import KDParams, NastyParams, cross_entropy, kd_loss, nasty_loss, softmax_temperature
from .optim import OptimizerSpec, ScheduleSpec, TrainReport, evaluate, train

ModelRef = Union[Model, str, os.PathLike]

DEFAULT_OPTIMIZER = OptimizerSpec("sgd_momentum", lr=0.05, momentum=0.9, weight_decay=5e-4, grad_clip=5.0)
DEFAULT_SCHEDULE = ScheduleSpec(total_epochs=30, milestones=(15, 23), decay_factor=0.1)
DEFAULT_BATCH_SIZE = 128


def resolve_model(ref: ModelRef) -> Model:
    if isinstance(ref, Model):
        return ref
    return M.load(ref)


def frozen_logits(model: Model, data: Dataset) -> np.ndarray:
    """Logits of a frozen reference network over a whole dataset."""
    model.freeze()
    return model.predict_logits(data.inputs)


@dataclass
class TrainingSetup:
    """Optimiser, schedule and batching shared by every procedure."""

    optimizer: OptimizerSpec = DEFAULT_OPTIMIZER
    schedule: ScheduleSpec = DEFAULT_SCHEDULE
    batch_size: int = DEFAULT_BATCH_SIZE
    eval_every: int = 1
    record_steps: bool = False


@dataclass
class DistillRun:
    teacher: ModelRef
    student: ModelSpec
    kd: KDParams = field(default_factory=KDParams)
    fraction: float = 1.0
    seed: int = 0
    baseline_acc: float | None = None
    setup: TrainingSetup = field(default_factory=TrainingSetup)


@dataclass
class NastyRun:
    adversary: ModelRef
    teacher: ModelSpec | None = None
    nasty: NastyParams = field(default_factory=NastyParams)
    seed: int = 0
    init_from_adversary: bool = False
    setup: TrainingSetup = field(default_factory=TrainingSetup)


@dataclass
class RunResult:
    model: Model
    report: TrainReport
    summary: dict = field(default_factory=dict)


def _fit(model: Model, train_data: Dataset, test_data: Dataset | None, objective, seed: int,
         setup: TrainingSetup, on_epoch=None) -> TrainReport:
    return train(model, train_data, objective, setup.optimizer, setup.schedule, seed,
                 batch_size=setup.batch_size, test_data=test_data, eval_every=setup.eval_every,
                 record_steps=setup.record_steps, on_epoch=on_epoch)


def train_supervised(spec: ModelSpec, train_data: Dataset, test_data: Dataset | None = None, seed: int = 0,
                     setup: TrainingSetup | None = None, fraction: float = 1.0, on_epoch=None) -> RunResult:
    """Plain cross-entropy training: normal teachers, adversaries and student baselines."""
    setup = setup or TrainingSetup()
    _check_compatible(spec, train_data)
    data = subsample(train_data, fraction, seed) if fraction < 1.0 else train_data
    model = M.build(spec, seed)

    def objective(logits, labels, index):
        return cross_entropy(logits, labels)

    report = _fit(model, data, test_data, objective, seed, setup, on_epoch)
    return RunResult(model, report, {"accuracy": report.final_test_acc})


def _check_compatible(spec: ModelSpec, data: Dataset) -> None:
    if spec.num_classes != data.num_classes:
        raise ConfigError(f"model has {spec.num_classes} classes, data has {data.num_classes}",
                          field="num_classes")
    if tuple(spec.input_shape) != tuple(data.input_shape):
        raise ConfigError(f"model input {spec.input_shape} does not match data {data.input_shape}",
                          field="input_shape")


def train_student(run: DistillRun, train_data: Dataset, test_data: Dataset | None = None,
                  on_epoch=None) -> RunResult:
    """Distil ``run.teacher`` into a fresh ``run.student`` with :func:`kd_loss`."""
    teacher = resolve_model(run.teacher)
    if teacher.spec.num_classes != run.student.num_classes:
        raise ConfigError(f"teacher predicts {teacher.spec.num_classes} classes, student "
                          f"{run.student.num_classes}", field="student.num_classes")
    _check_compatible(run.student, train_data)
    _check_compatible(teacher.spec, train_data)
    data = subsample(train_data, run.fraction, run.seed) if run.fraction < 1.0 else train_data
    before = teacher.checksum()
    targets = frozen_logits(teacher, data)
    student = M.build(run.student, run.seed)
    kd = run.kd

    def objective(logits, labels, index):
        return kd_loss(logits, T.Tensor(targets[index], dtype=logits.dtype), labels, kd)

    report = _fit(student, data, test_data, objective, run.seed, run.setup, on_epoch)
    if teacher.checksum() != before or any(p.grad is not None for p in teacher.parameters()):
        raise ContractError("teacher parameters changed or received gradient during distillation")
    summary = {"accuracy": report.final_test_acc, "train_size": len(data)}
    if run.baseline_acc is not None and report.final_test_acc is not None:
        summary["delta_vs_baseline"] = report.final_test_acc - run.baseline_acc
    return RunResult(student, report, summary)


def teacher_self(run: DistillRun, train_data: Dataset, test_data: Dataset | None = None,
                 on_epoch=None) -> RunResult:
    """Distillation into a student with the teacher's exact architecture."""
    teacher = resolve_model(run.teacher)
    if run.student != teacher.spec:
        raise ConfigError(f"teacher-self needs student spec == teacher spec; got {run.student} vs {teacher.spec}",
                          field="student")
    return train_student(replace(run, teacher=teacher), train_data, test_data, on_epoch)


def train_nasty_teacher(run: NastyRun, train_data: Dataset, test_data: Dataset | None = None,
                        on_epoch=None) -> RunResult:
    """Self-undermining training against a frozen, pre-trained adversary."""
    adversary = resolve_model(run.adversary)
    spec = run.teacher or adversary.spec
    if tuple(adversary.spec.input_shape) != tuple(spec.input_shape):
        raise ConfigError(f"adversary input {adversary.spec.input_shape} incompatible with teacher "
                          f"{spec.input_shape}", field="adversary")
    if adversary.spec.num_classes != spec.num_classes:
        raise ConfigError("adversary and teacher disagree on class count", field="adversary")
    _check_compatible(spec, train_data)
    before = adversary.checksum()
    reference = frozen_logits(adversary, train_data)
    teacher = M.build(spec, run.seed)
    if run.init_from_adversary:
        if spec != adversary.spec:
            raise ConfigError("init_from_adversary needs the adversary's architecture", field="init_from_adversary")
        teacher.load_state_dict(adversary.state_dict())
    params = run.nasty

    def objective(logits, labels, index):
        return nasty_loss(logits, T.Tensor(reference[index], dtype=logits.dtype), labels, params)

    report = _fit(teacher, train_data, test_data, objective, run.seed, run.setup, on_epoch)
    if adversary.checksum() != before:
        raise ContractError("adversary parameters changed during self-undermining training")
    summary = {"accuracy": report.final_test_acc, "init_from_adversary": run.init_from_adversary}
    if test_data is not None:
        adv_acc, _ = evaluate(adversary, test_data)
        summary["adversary_accuracy"] = adv_acc
        if report.final_test_acc is not None:
            summary["gap_vs_adversary"] = report.final_test_acc - adv_acc
    return RunResult(teacher, report, summary)


def multi_peak_statistic(source, data: Dataset | np.ndarray | None = None, tau: float = 4.0,
                         threshold: float = 0.1) -> float:
    """Mean number of classes whose tempered probability exceeds ``threshold``.

    ``source`` is either a model (evaluated on ``data``) or a logit array.
    """
    if not 0.0 < threshold < 0.5:
        raise ConfigError(f"threshold must lie in (0, 0.5), got {threshold}", field="threshold")
    if isinstance(source, Model):
        inputs = data.inputs if isinstance(data, Dataset) else np.asarray(data)
        logits = source.eval().predict_logits(inputs)
    else:
        logits = np.asarray(source)
    with T.no_grad():
        probs = softmax_temperature(T.Tensor(logits, dtype=np.float64), tau).data
    return float(np.mean(np.sum(probs > threshold, axis=1)))
