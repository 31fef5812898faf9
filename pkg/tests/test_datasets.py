import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab import datasets as DS
from kdlab.datasets import Dataset
from kdlab.errors import DataError, IDXCountMismatchError, IDXMagicError, IDXParseError, IDXTruncatedError


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.arange(1568, dtype=np.uint8)  # wraps at 256
    pixels[0] = 255
    images = tmp_path / "img"
    labels = tmp_path / "lbl"
    images.write_bytes(idx_bytes(0x00000803, (2, 28, 28), pixels.tobytes()))
    labels.write_bytes(idx_bytes(0x00000801, (2,), bytes([3, 7])))
    return images, labels


class TestIDX:
    def test_constructed_fixture(self, idx_pair):
        d = DS.load_idx(*idx_pair, num_classes=10)
        assert len(d) == 2 and d.input_shape == (1, 28, 28)
        np.testing.assert_array_equal(d.labels, [3, 7])

    def test_byte_255_is_exactly_one(self, idx_pair):
        assert DS.load_idx(*idx_pair).inputs[0, 0, 0, 0] == 1.0

    def test_wrong_magic_names_both(self, tmp_path, idx_pair):
        bad = tmp_path / "bad"
        bad.write_bytes(idx_bytes(0x00000802, (2, 28, 28), bytes(1568)))
        with pytest.raises(IDXMagicError, match="0x00000803.*0x00000802"):
            DS.load_idx(bad, idx_pair[1])

    def test_truncated_payload(self, tmp_path, idx_pair):
        short = tmp_path / "short"
        short.write_bytes(idx_pair[0].read_bytes()[:-1])
        with pytest.raises(IDXTruncatedError):
            DS.load_idx(short, idx_pair[1])

    def test_trailing_bytes(self):
        with pytest.raises(IDXParseError):
            DS.parse_idx(idx_bytes(0x801, (2,), bytes(3)))

    def test_count_mismatch(self, tmp_path, idx_pair):
        lbl = tmp_path / "three"
        lbl.write_bytes(idx_bytes(0x801, (3,), bytes(3)))
        with pytest.raises(IDXCountMismatchError):
            DS.load_idx(idx_pair[0], lbl)

    def test_errors_are_distinct(self):
        kinds = {IDXMagicError, IDXTruncatedError, IDXCountMismatchError}
        assert len(kinds) == 3 and all(issubclass(k, IDXParseError) for k in kinds)

    def test_bit_exact_round_trip(self, idx_pair):
        blob = idx_pair[0].read_bytes()
        assert DS.serialize_idx(DS.parse_idx(blob)) == blob

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["u1", "i1", ">i2", ">i4", ">f4", ">f8"]),
           st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31))
    def test_round_trip_property(self, dtype, dims, seed):
        rng = np.random.default_rng(seed)
        arr = (rng.standard_normal(dims) * 50).astype(dtype)
        blob = DS.serialize_idx(arr)
        assert DS.serialize_idx(DS.parse_idx(blob)) == blob
        np.testing.assert_array_equal(DS.parse_idx(blob), arr)

    def test_gzip(self, tmp_path):
        arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
        DS.write_idx(tmp_path / "a.gz", arr)
        np.testing.assert_array_equal(DS.read_idx(tmp_path / "a.gz"), arr)


class TestBlobs:
    def test_linear_probe(self):
        from sklearn.linear_model import LogisticRegression

        train, test = DS.blob_splits(5, 100, 100, 8, 10.0, seed=0)
        probe = LogisticRegression(max_iter=500).fit(train.inputs.reshape(len(train), -1), train.labels)
        assert probe.score(test.inputs.reshape(len(test), -1), test.labels) >= 0.99

    def test_same_seed_same_bytes(self):
        a, b = DS.synth_blobs(3, 10, 4, 5.0, 9), DS.synth_blobs(3, 10, 4, 5.0, 9)
        assert a.inputs.tobytes() == b.inputs.tobytes()

    def test_exact_class_counts(self):
        np.testing.assert_array_equal(DS.synth_blobs(4, 13, 2, 3.0, 0).class_counts(), [13] * 4)

    def test_separation(self):
        d = DS.synth_blobs(6, 4000, 5, 7.0, 2)
        means = np.stack([d.inputs[d.labels == c].reshape(-1, 5).mean(axis=0) for c in range(6)])
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
        gaps[np.diag_indices(6)] = np.inf
        assert gaps.min() == pytest.approx(7.0, abs=0.15)

    def test_nonpositive_separation(self):
        with pytest.raises(DataError):
            DS.synth_blobs(3, 10, 4, 0.0, 0)


def hundred_per_class():
    labels = np.repeat(np.arange(4), 100)
    return Dataset(np.arange(400, dtype=np.float32).reshape(400, 1, 1, 1), labels, 4)


class TestSubsample:
    def test_identity(self):
        d = hundred_per_class()
        assert DS.subsample(d, 1.0, 0) is d

    def test_half(self):
        counts = DS.subsample(hundred_per_class(), 0.5, 0).class_counts()
        assert np.all(np.abs(counts - 50) <= 1)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 1.0), st.integers(0, 1000))
    def test_counts_within_one(self, f, seed):
        counts = DS.subsample(hundred_per_class(), f, seed).class_counts()
        assert np.all(np.abs(counts - f * 100) <= 1)

    def test_nested(self):
        d = hundred_per_class()
        small = set(DS.subsample(d, 0.2, 5).inputs.ravel())
        large = set(DS.subsample(d, 0.4, 5).inputs.ravel())
        assert small < large

    def test_zero_samples_is_an_error(self):
        d = Dataset(np.zeros((4, 1, 1, 1), np.float32), [0, 0, 1, 1], 2)
        with pytest.raises(DataError):
            DS.subsample(d, 0.1, 0)

    @pytest.mark.parametrize("f", [0.0, 1.5])
    def test_range(self, f):
        with pytest.raises(DataError):
            DS.subsample(hundred_per_class(), f, 0)


class TestDataset:
    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1, 1, 1), np.float32), [0, 3], 3)

    def test_empty(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((0, 1, 1, 1), np.float32), [], 3)

    def test_normalize_uses_train_statistics(self):
        train = Dataset(np.array([0.0, 1.0, 2.0, 3.0], np.float32).reshape(4, 1, 1, 1), [0, 1, 0, 1], 2)
        test = Dataset(np.array([3.0, 3.0], np.float32).reshape(2, 1, 1, 1), [0, 1], 2, split="test")
        ntrain, ntest = DS.normalize(train, test)
        assert ntrain.mean == ntest.mean == 1.5
        np.testing.assert_allclose(ntest.inputs.ravel(), (3.0 - 1.5) / np.std([0, 1, 2, 3]), rtol=1e-6)
        assert ntest.data_range == pytest.approx(((0 - 1.5) / ntest.std, (1 - 1.5) / ntest.std))

    def test_tensor_file_round_trip(self, tmp_path):
        d = DS.synth_blobs(3, 4, 2, 3.0, 0)
        DS.save_dataset(tmp_path / "d.kdt", d)
        back = DS.load_dataset(tmp_path / "d.kdt")
        assert back.inputs.tobytes() == d.inputs.tobytes()
        np.testing.assert_array_equal(back.labels, d.labels)

    def test_tensor_file_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"garbage!" + bytes(8))
        with pytest.raises(DataError):
            DS.load_tensor_file(tmp_path / "x")


class TestDigitCorpus:
    def test_generation_is_deterministic_and_balanced(self, tmp_path):
        DS.write_digit_corpus(tmp_path / "a", 3, 2, seed=4)
        DS.write_digit_corpus(tmp_path / "b", 3, 2, seed=4)
        for name in ("train-images-idx3-ubyte", "test-labels-idx1-ubyte"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        train, test = DS.load_digit_corpus(tmp_path / "a")
        np.testing.assert_array_equal(train.class_counts(), [3] * 10)
        assert test.split == "test" and test.mean == train.mean
