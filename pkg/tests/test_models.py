import struct

import numpy as np
import pytest

from kdlab import models as M
from kdlab import tensor as T
from kdlab.errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)
from kdlab.models import ModelSpec

from conftest import gradcheck


# parameter counts by hand for 1x28x28 inputs and 10 classes
HAND_COUNTS = {
    "tiny_cnn": (8 * 9 + 8) + (8 * 7 * 7 * 24 + 24) + (24 * 10 + 10),
    "mlp": (784 * 128 + 128) + (128 * 10 + 10),
    "small_cnn": (8 * 25 + 8) + (16 * 8 * 9 + 16) + (16 * 7 * 7 * 384 + 384) + (384 * 10 + 10),
}


@pytest.mark.parametrize("kind", M.KINDS)
def test_parameter_count(kind):
    spec = ModelSpec(kind)
    assert M.count_parameters(spec) == HAND_COUNTS[kind]
    assert M.build(spec, 0).num_parameters == HAND_COUNTS[kind]


def test_capacity_order():
    counts = [M.count_parameters(ModelSpec(k)) for k in M.KINDS]
    assert counts == sorted(counts)


@pytest.mark.parametrize("kind", M.KINDS)
def test_forward_shapes(kind, rng):
    model = M.build(ModelSpec(kind), 0)
    x = rng.standard_normal((3, 1, 28, 28)).astype(np.float32)
    assert model(x).shape == (3, 10)
    assert model.features(x).shape[0] == 3


def test_wrong_input_shape(rng):
    model = M.build(ModelSpec("mlp"), 0)
    with pytest.raises(ShapeError, match="28, 28"):
        model(rng.standard_normal((2, 1, 27, 28)))


def test_seeded_init_is_reproducible():
    a, b = M.build(ModelSpec("tiny_cnn"), 7), M.build(ModelSpec("tiny_cnn"), 7)
    assert a.checksum() == b.checksum()
    assert a.checksum() != M.build(ModelSpec("tiny_cnn"), 8).checksum()


def test_init_bounds():
    model = M.build(ModelSpec("mlp"), 0)
    w = model.params["fc0.weight"].data
    assert np.abs(w).max() <= 1 / np.sqrt(784)
    assert not model.params["fc0.bias"].data.any()


@pytest.mark.parametrize("bad", [
    dict(kind="resnet"),
    dict(kind="mlp", num_classes=1),
    dict(kind="tiny_cnn", widths=(8,)),
    dict(kind="small_cnn", input_shape=(1, 3, 3)),
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        ModelSpec(**bad)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"kind": "mlp", "depth": 3})


def test_freeze():
    model = M.build(ModelSpec("mlp"), 0).freeze()
    assert not model.training
    assert all(not p.requires_grad for p in model.parameters())
    out = model(np.zeros((1, 1, 28, 28), dtype=np.float32))
    assert not out.requires_grad


@pytest.mark.parametrize("kind,widths", [("tiny_cnn", (2, 4)), ("small_cnn", (2, 3, 4)), ("mlp", (5,))])
def test_gradient_through_network(kind, widths, rng):
    spec = ModelSpec(kind, widths, input_shape=(1, 8, 8), num_classes=3)
    model = M.build(spec, 0, dtype=np.float64)
    x = rng.standard_normal((2, 1, 8, 8))
    names = [n for n, _ in model.named_parameters()]

    def loss(*params):
        saved = {n: model.params[n] for n in names}
        model.params.update(dict(zip(names, params)))
        try:
            return (model(T.Tensor(x, dtype=np.float64)) ** 2).mean()
        finally:
            model.params.update(saved)

    arrays = [model.params[n].data for n in names]
    arrays = [a + 0.01 * rng.standard_normal(a.shape) for a in arrays]
    assert gradcheck(loss, *arrays) <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = M.build(ModelSpec("tiny_cnn"), 3)
        M.save(model, tmp_path / "m.ckpt")
        loaded = M.load(tmp_path / "m.ckpt")
        assert loaded.spec == model.spec
        assert loaded.checksum() == model.checksum()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(CheckpointFormatError, match="magic"):
            M.load(tmp_path / "x.ckpt")

    def test_version(self, tmp_path):
        M.save(M.build(ModelSpec("mlp"), 0), tmp_path / "m.ckpt")
        blob = bytearray((tmp_path / "m.ckpt").read_bytes())
        blob[8:12] = struct.pack("<I", 99)
        (tmp_path / "m.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            M.load(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path):
        M.save(M.build(ModelSpec("mlp"), 0), tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(blob[:-5])
        with pytest.raises(CheckpointTruncatedError):
            M.load(tmp_path / "m.ckpt")

    def test_trailing_bytes(self, tmp_path):
        M.save(M.build(ModelSpec("mlp"), 0), tmp_path / "m.ckpt")
        with open(tmp_path / "m.ckpt", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            M.load(tmp_path / "m.ckpt")


def test_zero_output_layer_gives_zero_logits(rng):
    model = M.build(ModelSpec("small_cnn"), 0)
    model.params["out.weight"].data[:] = 0
    assert not model(rng.standard_normal((2, 1, 28, 28))).data.any()


@pytest.mark.parametrize("kind", M.KINDS)
def test_batch_independence(kind, rng):
    model = M.build(ModelSpec(kind), 0)
    x = rng.standard_normal((32, 1, 28, 28)).astype(np.float32)
    np.testing.assert_allclose(model.predict_logits(x[5:6]), model.predict_logits(x)[5:6], atol=1e-6)


def test_finite_logits_over_random_draws(rng):
    model = M.build(ModelSpec("tiny_cnn"), 0)
    x = (rng.standard_normal((1000, 1, 28, 28)) * 5).astype(np.float32)
    assert np.all(np.isfinite(model.predict_logits(x)))


def test_resume_after_round_trip_matches_uninterrupted(tmp_path):
    from kdlab.datasets import blob_splits
    from kdlab.optim import OptimizerSpec, ScheduleSpec, supervised_objective, train

    train_data, _ = blob_splits(3, 20, 5, 4, 6.0, seed=0)
    spec = ModelSpec("mlp", (8,), 3, (1, 1, 4))
    opt, sched = OptimizerSpec(lr=0.05), ScheduleSpec(1, ())
    first = M.build(spec, 0)
    train(first, train_data, supervised_objective(), opt, sched, seed=0)
    M.save(first, tmp_path / "m.ckpt")
    resumed = M.load(tmp_path / "m.ckpt")
    a = train(first, train_data, supervised_objective(), opt, sched, seed=1, record_steps=True)
    b = train(resumed, train_data, supervised_objective(), opt, sched, seed=1, record_steps=True)
    assert a.step_losses == b.step_losses
