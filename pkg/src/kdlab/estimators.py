"""scikit-learn style wrapper around the training procedures.

>>> clf = KDClassifier(arch="mlp", epochs=5).fit(X, y)
>>> nasty = KDClassifier(mode="nasty", adversary=clf, omega=0.01).fit(X, y)
>>> student = KDClassifier(arch="tiny_cnn", mode="distill", teacher=nasty).fit(X, y)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import distill as D
from . import tensor as T
from .datasets import Dataset
from .errors import ConfigError
from .models import Model, ModelSpec
from .objectives import KDParams, NastyParams
from .optim import OptimizerSpec, ScheduleSpec

MODES = ("supervised", "distill", "nasty")


class KDClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Train a small network normally, by distillation, or as a nasty teacher.

    ``X`` is ``(n, features)`` or ``(n, channels, height, width)``.  Inputs
    are standardised with a scalar mean/std learnt in ``fit``.  ``transform``
    returns the penultimate-layer embedding.
    """

    def __init__(self, arch="small_cnn", widths=None, mode="supervised", teacher=None, adversary=None,
                 alpha=0.9, tau_s=4.0, omega=0.004, tau_a=4.0, epochs=30, lr=0.05, batch_size=128,
                 grad_clip=5.0, random_state=0):
        self.arch = arch
        self.widths = widths
        self.mode = mode
        self.teacher = teacher
        self.adversary = adversary
        self.alpha = alpha
        self.tau_s = tau_s
        self.omega = omega
        self.tau_a = tau_a
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.random_state = random_state

    # ------------------------------------------------------------ helpers
    def _shape(self, X: np.ndarray) -> np.ndarray:
        if X.ndim == 2:
            return X.reshape(len(X), 1, 1, X.shape[1])
        if X.ndim == 4:
            return X
        raise ValueError(f"X must be 2-D or 4-D, got shape {X.shape}")

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._shape(check_array(X, allow_nd=True, dtype=np.float64))
        if X.shape[1:] != tuple(self.model_.spec.input_shape):
            raise ValueError(f"X has sample shape {X.shape[1:]}, estimator was fitted on "
                             f"{tuple(self.model_.spec.input_shape)}")
        return ((X - self.mean_) / self.std_).astype(np.float32)

    def _setup(self) -> D.TrainingSetup:
        e = int(self.epochs)
        milestones = tuple(m for m in (e // 2, (3 * e) // 4) if 0 < m < e)
        milestones = tuple(sorted(set(milestones)))
        return D.TrainingSetup(OptimizerSpec("sgd_momentum", lr=self.lr, grad_clip=self.grad_clip),
                               ScheduleSpec(e, milestones, 0.1), int(self.batch_size), eval_every=0)

    @staticmethod
    def _reference(ref, name: str) -> Model:
        if isinstance(ref, KDClassifier):
            check_is_fitted(ref, "model_")
            return ref.model_
        if ref is None:
            raise ConfigError(f"{name} is required for this mode", field=name)
        return D.resolve_model(ref)

    # ---------------------------------------------------------------- API
    def fit(self, X, y):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", field="mode")
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._shape(X)
        self.classes_ = unique_labels(y)
        labels = np.searchsorted(self.classes_, y)
        self.mean_ = float(X.mean())
        self.std_ = float(X.std()) or 1.0
        data = Dataset(((X - self.mean_) / self.std_).astype(np.float32), labels, len(self.classes_),
                       mean=self.mean_, std=self.std_)
        spec = ModelSpec(self.arch, tuple(self.widths or ()), len(self.classes_), data.input_shape)
        seed = int(self.random_state)
        if self.mode == "supervised":
            result = D.train_supervised(spec, data, None, seed, self._setup())
        elif self.mode == "distill":
            teacher = self._reference(self.teacher, "teacher")
            run = D.DistillRun(teacher, spec, KDParams(self.alpha, self.tau_s), seed=seed, setup=self._setup())
            result = D.train_student(run, data)
        else:
            adversary = self._reference(self.adversary, "adversary")
            run = D.NastyRun(adversary, spec, NastyParams(self.omega, self.tau_a), seed, setup=self._setup())
            result = D.train_nasty_teacher(run, data)
        self.model_ = result.model
        self.report_ = result.report
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        x = self._prepare(X)
        return self.model_.predict_logits(x).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X) -> np.ndarray:
        x = self._prepare(X)
        with T.no_grad():
            return np.concatenate([self.model_.features(T.Tensor(x[i:i + 512])).data
                                   for i in range(0, len(x), 512)]).astype(np.float64)
