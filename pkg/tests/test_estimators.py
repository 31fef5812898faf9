import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_blobs
from sklearn.exceptions import NotFittedError

from kdlab.errors import ConfigError
from kdlab.estimators import KDClassifier


@pytest.fixture(scope="module")
def data():
    X, y = make_blobs(n_samples=240, centers=3, n_features=6, cluster_std=2.0, random_state=0)
    return X[:180], y[:180] + 5, X[180:], y[180:] + 5  # labels need not start at 0


@pytest.fixture(scope="module")
def teacher(data):
    X, y, _, _ = data
    return KDClassifier(arch="mlp", widths=(32,), epochs=10).fit(X, y)


def test_supervised_fit_predict(data, teacher):
    _, _, Xt, yt = data
    assert set(teacher.classes_) == {5, 6, 7}
    assert teacher.score(Xt, yt) > 0.8
    proba = teacher.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(teacher.classes_[proba.argmax(1)], teacher.predict(Xt))


def test_transform_gives_embedding(data, teacher):
    _, _, Xt, _ = data
    assert teacher.transform(Xt).shape == (len(Xt), 32)


def test_distill_and_nasty_modes(data, teacher):
    X, y, Xt, yt = data
    student = KDClassifier(arch="mlp", widths=(8,), mode="distill", teacher=teacher, epochs=10).fit(X, y)
    assert student.score(Xt, yt) > 0.7
    nasty = KDClassifier(arch="mlp", widths=(32,), mode="nasty", adversary=teacher, omega=0.05, epochs=10).fit(X, y)
    assert nasty.score(Xt, yt) > 0.7


def test_deterministic_and_clonable(data):
    X, y, Xt, _ = data
    est = KDClassifier(arch="mlp", widths=(8,), epochs=3, random_state=4)
    a = est.fit(X, y).decision_function(Xt)
    b = clone(est).fit(X, y).decision_function(Xt)
    np.testing.assert_array_equal(a, b)
    assert clone(est).get_params()["random_state"] == 4


def test_errors(data, teacher):
    X, y, Xt, _ = data
    with pytest.raises(NotFittedError):
        KDClassifier().predict(Xt)
    with pytest.raises(ConfigError):
        KDClassifier(mode="distill").fit(X, y)
    with pytest.raises(ConfigError):
        KDClassifier(mode="bake").fit(X, y)
    with pytest.raises(ValueError):
        teacher.predict(Xt[:, :4])


def test_image_input(rng):
    X = rng.random((60, 1, 8, 8))
    y = (X[:, 0, :4].mean(axis=(1, 2)) > X[:, 0, 4:].mean(axis=(1, 2))).astype(int)
    est = KDClassifier(arch="tiny_cnn", widths=(4, 8), epochs=2).fit(X, y)
    assert est.predict(X).shape == (60,)
