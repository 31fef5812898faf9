"""Loss functions for distillation and self-undermining teacher training.

All batch reductions are arithmetic means over the batch, so ``alpha`` and
``omega`` do not scale with batch size.  The KL argument order is
``KL(teacher || other)`` in both objectives: the first distribution is the
one produced by the network listed first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KDParams:
    """Distillation weights: ``alpha`` mixes soft-target KL and label XE."""

    alpha: float = 0.9
    tau_s: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}", field="alpha")
        if self.tau_s < 1.0:
            raise ConfigError(f"tau_s must be >= 1, got {self.tau_s}", field="tau_s")


@dataclass(frozen=True)
class NastyParams:
    """Self-undermining weights: ``omega`` scales the subtracted KL term."""

    omega: float = 0.004
    tau_a: float = 4.0

    def __post_init__(self):
        if self.omega < 0.0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}", field="omega")
        if self.tau_a < 1.0:
            raise ConfigError(f"tau_a must be >= 1, got {self.tau_a}", field="tau_a")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}", field="tau")


def log_softmax_temperature(logits, tau: float) -> Tensor:
    _check_tau(tau)
    logits = T.as_tensor(logits)
    return T.log_softmax(logits / float(tau) if tau != 1 else logits, axis=-1)


def softmax_temperature(logits, tau: float) -> Tensor:
    """Row-wise ``softmax(logits / tau)``; ``tau == 1`` is the plain softmax."""
    return log_softmax_temperature(logits, tau).exp()


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DataError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DataError(f"labels shape {labels.shape} does not match batch of {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DataError("labels must be integers")
        labels = labels.astype(np.intp)
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(b), labels]
    return -picked.mean()


def kl_divergence(p, q) -> Tensor:
    """Batch-mean ``sum_c p * log(p / q)`` over probability rows.

    ``0 * log 0`` counts as zero; ``q`` is floored at ``1e-12`` inside the log
    so a zero where ``p > 0`` gives a large finite value instead of ``inf``.
    """
    p = T.as_tensor(p)
    q = T.as_tensor(q, p.dtype)
    if p.shape != q.shape or p.ndim != 2:
        raise DataError(f"kl_divergence needs matching (batch, classes) inputs, got {p.shape} and {q.shape}")
    for name, t in (("p", p), ("q", q)):
        rows = t.data.sum(axis=1, dtype=np.float64)
        if np.any(np.abs(rows - 1.0) > 1e-5):
            raise DataError(f"rows of {name} must sum to 1 (max deviation {np.max(np.abs(rows - 1.0)):.2e})")
    terms = p * (p.clamp_min(PROB_FLOOR).log() - q.clamp_min(PROB_FLOOR).log())
    return terms.sum(axis=1).mean()


def kl_from_logits(first_logits, second_logits, tau: float) -> Tensor:
    """``KL(softmax(first / tau) || softmax(second / tau))`` computed in log space.

    Same value as :func:`kl_divergence` on the tempered probabilities, but the
    log-probabilities come straight from ``log_softmax`` so no floor is needed.
    """
    logp = log_softmax_temperature(first_logits, tau)
    logq = log_softmax_temperature(second_logits, tau)
    return (logp.exp() * (logp - logq)).sum(axis=1).mean()


def _as_frozen(logits, role: str) -> Tensor:
    logits = T.as_tensor(logits)
    if logits.requires_grad:
        if T.is_debug():
            raise ContractError(f"{role} logits carry gradient; they must be detached")
        logits = T.detach(logits)
    return logits


def kd_loss(student_logits, teacher_logits, labels, kd: KDParams = KDParams()) -> Tensor:
    """``alpha * tau^2 * KL(teacher_tau || student_tau) + (1 - alpha) * XE(student, labels)``."""
    teacher_logits = _as_frozen(teacher_logits, "teacher")
    student_logits = T.as_tensor(student_logits)
    if student_logits.shape != teacher_logits.shape:
        raise DataError(f"student logits {student_logits.shape} vs teacher logits {teacher_logits.shape}")
    soft = kl_from_logits(teacher_logits, student_logits, kd.tau_s)
    hard = cross_entropy(student_logits, labels)
    return soft * (kd.alpha * kd.tau_s ** 2) + hard * (1.0 - kd.alpha)


def nasty_loss(teacher_logits, adversary_logits, labels, params: NastyParams = NastyParams()) -> Tensor:
    """``XE(teacher, labels) - omega * tau^2 * KL(teacher_tau || adversary_tau)``.

    The adversary is a fixed reference; pushing the teacher's tempered output
    away from it while keeping the label loss low is what makes the teacher a
    poor source of soft targets.  The value can be negative.
    """
    adversary_logits = _as_frozen(adversary_logits, "adversary")
    teacher_logits = T.as_tensor(teacher_logits)
    if teacher_logits.shape != adversary_logits.shape:
        raise DataError(f"teacher logits {teacher_logits.shape} vs adversary logits {adversary_logits.shape}")
    hard = cross_entropy(teacher_logits, labels)
    divergence = kl_from_logits(teacher_logits, adversary_logits, params.tau_a)
    return hard - divergence * (params.omega * params.tau_a ** 2)
