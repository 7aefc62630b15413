import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tvae.datasets import (
    DATA_ROOT_ENV,
    DatasetError,
    ImageSet,
    decode_idx,
    encode_idx,
    load_dataset,
    load_idx,
    read_idx_raw,
    resize_images,
    save_idx,
    subsample,
    to_uint8,
)


def idx_bytes(arr):
    """Independent IDX writer: big-endian header, then the payload."""
    codes = {np.uint8: 0x08, np.int8: 0x09, np.int16: 0x0B, np.int32: 0x0C, np.float32: 0x0D, np.float64: 0x0E}
    code = codes[arr.dtype.type]
    head = bytes([0, 0, code, arr.ndim]) + b"".join(struct.pack(">I", d) for d in arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder(">")).tobytes()


class TestIdx:
    @settings(max_examples=50)
    @given(arrays(st.sampled_from([np.uint8, np.int16, np.int32, np.float32, np.float64]),
                  st.lists(st.integers(1, 5), min_size=1, max_size=3).map(tuple)))
    def test_round_trip(self, arr):
        assert encode_idx(arr) == idx_bytes(arr)
        back = decode_idx(idx_bytes(arr))
        assert back.dtype == arr.dtype.newbyteorder("=") and back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_known_header(self):
        buf = idx_bytes(np.arange(6, dtype=np.uint8).reshape(2, 3))
        assert buf[:12] == b"\x00\x00\x08\x02\x00\x00\x00\x02\x00\x00\x00\x03"

    def test_truncated_payload_names_offset(self):
        buf = idx_bytes(np.zeros((2, 3), np.uint8))[:-2]
        with pytest.raises(DatasetError, match=r"truncated payload at byte offset 16"):
            decode_idx(buf)

    def test_malformed_magic(self):
        with pytest.raises(DatasetError, match="malformed magic"):
            decode_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")
        with pytest.raises(DatasetError, match="malformed magic"):
            decode_idx(b"\x00\x00\x07\x01\x00\x00\x00\x01\x00")

    def test_dimension_overflow(self):
        buf = b"\x00\x00\x08\x03" + struct.pack(">3I", 2**20, 2**20, 2**20)
        with pytest.raises(DatasetError, match="dimension overflow at byte offset 4"):
            decode_idx(buf)

    def test_trailing_bytes(self):
        with pytest.raises(DatasetError, match="trailing"):
            decode_idx(idx_bytes(np.zeros(3, np.uint8)) + b"\x00")

    def test_gzip_and_scaling(self, tmp_path):
        arr = np.array([[0, 255], [51, 102]], dtype=np.uint8)
        save_idx(tmp_path / "a.gz", arr)
        with gzip.open(tmp_path / "a.gz", "rb") as fh:
            assert fh.read() == idx_bytes(arr)
        np.testing.assert_array_equal(read_idx_raw(tmp_path / "a.gz"), arr)
        np.testing.assert_allclose(load_idx(tmp_path / "a.gz"), arr / 255.0, rtol=1e-6)

    def test_error_names_file(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"\x00\x00")
        with pytest.raises(DatasetError, match="bad"):
            read_idx_raw(tmp_path / "bad")


def write_split(root, name, prefix, imgs, labels=None):
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    save_idx(d / f"{prefix}-images-idx3-ubyte", imgs)
    if labels is not None:
        save_idx(d / f"{prefix}-labels-idx1-ubyte", labels)


class TestLoad:
    def test_layout_and_env(self, tmp_path, monkeypatch):
        imgs = np.random.default_rng(0).integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
        write_split(tmp_path, "mnist", "t10k", imgs, np.arange(4, dtype=np.uint8))
        monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
        data = load_dataset("mnist", "test")
        assert data.images.shape == (4, 28, 28) and data.images.dtype == np.float32
        assert data.labels.tolist() == [0, 1, 2, 3]
        assert data.tensor().shape == (4, 1, 28, 28)

    def test_missing_files_listed(self, tmp_path):
        with pytest.raises(DatasetError, match="train-images-idx3-ubyte.*train-labels-idx1-ubyte"):
            load_dataset("fmnist", "train", tmp_path)

    def test_no_root(self, monkeypatch):
        monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
        with pytest.raises(DatasetError, match=DATA_ROOT_ENV):
            load_dataset("mnist", "train")

    def test_label_count_mismatch(self, tmp_path):
        write_split(tmp_path, "mnist", "train", np.zeros((3, 28, 28), np.uint8), np.zeros(2, np.uint8))
        with pytest.raises(DatasetError, match="2 labels for 3 images"):
            load_dataset("mnist", "train", tmp_path)

    def test_omniglot_polarity_and_resize(self, tmp_path):
        imgs = np.full((2, 105, 105), 255, np.uint8)
        imgs[:, 40:60, 50:55] = 0  # dark stroke on white
        write_split(tmp_path, "omniglot", "train", imgs)
        data = load_dataset("omniglot", "train", tmp_path)
        assert data.images.shape == (2, 28, 28)
        assert data.images.mean() < 0.5 and data.images.max() > 0.5
        assert (data.labels == -1).all()

    def test_affnist_resized(self, tmp_path):
        write_split(tmp_path, "affnist", "train", np.zeros((2, 40, 40), np.uint8), np.zeros(2, np.uint8))
        assert load_dataset("affnist", "train", tmp_path).images.shape == (2, 28, 28)

    def test_unknown_name(self, tmp_path):
        with pytest.raises(ValueError, match="unknown dataset"):
            load_dataset("cifar", "train", tmp_path)


class TestHelpers:
    def test_subsample(self):
        data = ImageSet(np.zeros((10, 2, 2), np.float32), np.arange(10), "mnist", "train")
        a = subsample(data, 4, np.random.default_rng(0))
        b = subsample(data, 4, np.random.default_rng(0))
        assert len(a) == 4 and len(set(a.labels.tolist())) == 4
        assert a.labels.tolist() == b.labels.tolist()
        with pytest.raises(ValueError):
            subsample(data, 11, np.random.default_rng(0))

    def test_resize_constant_image(self):
        out = resize_images(np.full((1, 40, 40), 0.5, np.float32))
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_to_uint8(self):
        assert to_uint8(np.array([0.0, 0.5, 1.2, -1.0])).tolist() == [0, 128, 255, 0]

    def test_imageset_validation(self):
        with pytest.raises(ValueError):
            ImageSet(np.zeros((2, 3)), np.zeros(2), "mnist", "train")
