from dataclasses import replace

import numpy as np
import pytest

from kdlab import datafree as DF
from kdlab import distill as D
from kdlab import tensor as T
from kdlab.datasets import blob_splits, load_dataset, normalize, save_dataset
from kdlab.errors import ConfigError
from kdlab.models import ModelSpec
from kdlab.optim import OptimizerSpec, ScheduleSpec

from conftest import gradcheck


@pytest.fixture(scope="module")
def teacher_and_data():
    train, test = blob_splits(3, 60, 30, 6, 6.0, seed=0)
    # squeeze into [0, 1] so the inversion's pixel range covers the data
    lo, hi = train.inputs.min(), train.inputs.max()
    train, test = (replace(d, inputs=np.clip((d.inputs - lo) / (hi - lo), 0, 1)) for d in (train, test))
    train, test = normalize(train, test)
    setup = D.TrainingSetup(OptimizerSpec(lr=0.05), ScheduleSpec(8, (6,)), batch_size=32)
    spec = ModelSpec("mlp", (16,), 3, train.input_shape)
    return D.train_supervised(spec, train, test, seed=0, setup=setup).model, train, test


def inv(train, **kw):
    base = dict(per_class=6, steps=40, lr=0.1, tv_weight=1e-3, l2_weight=1e-4, mean=train.mean, std=train.std)
    base.update(kw)
    return DF.InversionSpec(**base)


def test_zero_steps_returns_initial_noise(teacher_and_data):
    teacher, train, _ = teacher_and_data
    spec = inv(train, steps=0, tv_weight=0.0, l2_weight=0.0, seed=4)
    synthetic = DF.invert(teacher, spec)
    lo, hi = spec.data_range
    rng = np.random.default_rng([4, 0, 0])
    expected = rng.uniform(lo, hi, size=(6, *train.input_shape)).astype(np.float32)
    np.testing.assert_array_equal(synthetic.inputs[:6], expected)


def test_confident_and_in_range(teacher_and_data):
    teacher, train, _ = teacher_and_data
    spec = inv(train)
    synthetic = DF.invert(teacher, spec)
    lo, hi = spec.data_range
    assert synthetic.inputs.min() >= lo - 1e-6 and synthetic.inputs.max() <= hi + 1e-6
    assert DF.teacher_confidence(teacher, synthetic) >= 0.9
    np.testing.assert_array_equal(synthetic.class_counts(), [6, 6, 6])


def test_teacher_untouched_and_reproducible(teacher_and_data):
    teacher, train, _ = teacher_and_data
    before = teacher.checksum()
    a = DF.invert(teacher, inv(train, seed=2))
    b = DF.invert(teacher, inv(train, seed=2))
    assert teacher.checksum() == before
    assert all(p.grad is None for p in teacher.parameters())
    assert DF.dataset_checksum(a) == DF.dataset_checksum(b)


def test_datafree_distill_end_to_end(teacher_and_data, tmp_path):
    teacher, train, test = teacher_and_data
    setup = D.TrainingSetup(OptimizerSpec(lr=0.05), ScheduleSpec(10, (8,)), batch_size=16, eval_every=0)
    run = DF.DataFreeRun(teacher, ModelSpec("mlp", (8,), 3, train.input_shape), inv(train, per_class=20), setup=setup)
    result, synthetic = DF.datafree_distill(run, test)
    assert result.summary["accuracy"] >= 0.8
    save_dataset(tmp_path / "syn.kdt", synthetic)
    assert DF.dataset_checksum(load_dataset(tmp_path / "syn.kdt")) == result.summary["synthetic_checksum"]


def test_total_variation_value_and_gradient(rng):
    x = np.array([[[[0.0, 1.0], [3.0, 1.0]]]])
    # horizontal diffs 1, -2; vertical diffs 3, 0
    assert DF.total_variation(x).item() == pytest.approx(1 + 4 + 9 + 0)
    assert gradcheck(lambda t: DF.total_variation(t), rng.standard_normal((2, 1, 3, 4))) <= 1e-4


@pytest.mark.parametrize("bad", [dict(per_class=0), dict(steps=-1), dict(tv_weight=-1.0), dict(l2_weight=-1e-3),
                                 dict(temperature=0.0), dict(lr=0.0)])
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        DF.InversionSpec(**bad)


def test_gradient_reaches_only_inputs(teacher_and_data):
    teacher, train, _ = teacher_and_data
    teacher.freeze()
    x = T.Tensor(np.zeros((2, *train.input_shape)), requires_grad=True)
    DF._objective(teacher, x, np.array([0, 1]), inv(train)).backward()
    assert x.grad is not None and all(p.grad is None for p in teacher.parameters())
