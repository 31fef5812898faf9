"""Optimizers, step-decay schedules and the generic train/evaluate loops."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .errors import ConfigError, ContractError, DataError
from .models import Model
from .tensor import Tensor

# objective(logits, labels, batch_index) -> scalar loss Tensor.  ``batch_index``
# indexes the training set so closures can look up precomputed reference logits.
Objective = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}", field="kind")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}", field="lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}", field="momentum")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}", field="weight_decay")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.betas}", field="betas")
        object.__setattr__(self, "betas", (float(b1), float(b2)))
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be > 0 or null, got {self.grad_clip}", field="grad_clip")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class ScheduleSpec:
    """Step decay: the rate is multiplied by ``decay_factor`` after each milestone epoch."""

    total_epochs: int = 30
    milestones: tuple[int, ...] = (15, 23)
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be >= 0", field="total_epochs")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}", field="milestones")
        if self.milestones and (self.milestones[0] < 1 or self.milestones[-1] >= max(self.total_epochs, 1)):
            if self.total_epochs > 0:
                raise ConfigError(f"milestones {self.milestones} must lie in [1, {self.total_epochs})",
                                  field="milestones")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}", field="decay_factor")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        k = sum(1 for m in self.milestones if epoch > m)
        return base_lr * self.decay_factor ** k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


class SGDMomentum:
    """Classic coupled weight decay: ``v <- mu v + g + wd theta``; ``theta <- theta - lr v``."""

    def __init__(self, params: Sequence[Tensor], spec: OptimizerSpec):
        self.params = list(params)
        self.spec = spec
        self.lr = spec.lr
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        mu, wd, lr = self.spec.momentum, self.spec.weight_decay, self.lr
        if self.spec.grad_clip is not None:
            clip_grad_norm(self.params, self.spec.grad_clip)
        for i, p in enumerate(self.params):
            g = _grad_of(p, i)
            if wd:
                g = g + wd * p.data
            v = self.velocity[i]
            v *= mu
            v += g
            p.data -= lr * v


class Adam:
    """Adam with bias correction; weight decay is added to the gradient."""

    def __init__(self, params: Sequence[Tensor], spec: OptimizerSpec):
        self.params = list(params)
        self.spec = spec
        self.lr = spec.lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.spec.betas
        wd, eps = self.spec.weight_decay, self.spec.eps
        if self.spec.grad_clip is not None:
            clip_grad_norm(self.params, self.spec.grad_clip)
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = _grad_of(p, i)
            if wd:
                g = g + wd * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            p.data -= (self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + eps)).astype(p.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [_grad_of(p, i) for i, p in enumerate(params)]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def _grad_of(p: Tensor, i: int) -> np.ndarray:
    if p.grad is None:
        raise ContractError(f"trainable parameter #{i} {p.shape} has no gradient; call backward() first")
    return p.grad


def make_optimizer(params: Sequence[Tensor], spec: OptimizerSpec):
    trainable = [p for p in params if p.requires_grad]
    return SGDMomentum(trainable, spec) if spec.kind == "sgd_momentum" else Adam(trainable, spec)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None
    test_loss: float | None
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    diverged: bool = False
    step_losses: list[float] = field(default_factory=list)

    @property
    def final_test_acc(self) -> float | None:
        for e in reversed(self.epochs):
            if e.test_acc is not None:
                return e.test_acc
        return None

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def predict(model: Model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(model.predict_logits(x, batch_size), axis=1)


def evaluate(model: Model, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of ``model`` on ``data``; never updates parameters."""
    was_training = model.training
    model.eval()
    correct = 0
    total_loss = 0.0
    for i in range(0, len(data), batch_size):
        logits = model.predict_logits(data.inputs[i:i + batch_size], batch_size).astype(np.float64)
        y = data.labels[i:i + batch_size]
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss += float(-logp[np.arange(len(y)), y].sum())
    model.training = was_training
    return correct / len(data), total_loss / len(data)


def train(model: Model, data: Dataset, objective: Objective, opt_spec: OptimizerSpec,
          schedule: ScheduleSpec, seed: int, batch_size: int = 128, test_data: Dataset | None = None,
          eval_every: int = 1, record_steps: bool = False,
          on_epoch: Callable[[EpochStats], None] | None = None) -> TrainReport:
    """Minibatch training of ``model`` against ``objective``.

    Shuffling is driven by ``seed`` alone, so two calls with equal inputs
    produce identical trajectories.  ``eval_every=0`` evaluates the test split
    only after the last epoch.  The report's ``diverged`` flag is raised when
    the loss turns non-finite (training stops) or when train accuracy is still
    at most 1.5x chance once a quarter of the epochs have run (training goes on,
    so the run still gets a final evaluation).
    """
    if data is None or len(data) == 0:
        raise DataError("training data is empty")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", field="batch_size")
    report = TrainReport()
    if schedule.total_epochs == 0:
        return report
    rng = np.random.default_rng(seed)
    opt = make_optimizer(model.parameters(), opt_spec)
    n = len(data)
    chance = 1.0 / data.num_classes
    check_after = max(1, math.ceil(0.25 * schedule.total_epochs))
    model.train()
    for epoch in range(1, schedule.total_epochs + 1):
        start = time.perf_counter()
        opt.lr = schedule.lr_at(opt_spec.lr, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        nonfinite = False
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb = T.Tensor(data.inputs[idx], dtype=model.dtype)
            yb = data.labels[idx]
            opt.zero_grad()
            logits = model.forward(xb)
            loss = objective(logits, yb, idx)
            value = loss.item()
            if not math.isfinite(value):
                report.diverged = nonfinite = True
                break
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            if record_steps:
                report.step_losses.append(value)
        if nonfinite:
            break
        train_acc = correct / n
        test_acc = test_loss = None
        if test_data is not None and ((eval_every and epoch % eval_every == 0) or epoch == schedule.total_epochs):
            test_acc, test_loss = evaluate(model, test_data)
            model.train()
        stats = EpochStats(epoch, opt.lr, loss_sum / n, train_acc, test_acc, test_loss,
                           time.perf_counter() - start)
        report.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if epoch >= check_after and train_acc <= 1.5 * chance:
            report.diverged = True
    model.eval()
    return report


def supervised_objective() -> Objective:
    from .objectives import cross_entropy

    def objective(logits, labels, index):
        return cross_entropy(logits, labels)

    return objective
