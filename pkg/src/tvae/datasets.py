"""IDX decoding and the canonical 28x28 image sets (MNIST, F-MNIST, Omniglot, AffNIST).

Every set is stored under ``<root>/<name>/`` using the MNIST file naming::

    train-images-idx3-ubyte   train-labels-idx1-ubyte
    t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte

Files may additionally be gzip-compressed (``.gz`` suffix). AffNIST and
Omniglot have to be converted to this layout once (see ``tvae convert-idx``).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_SIZE = 28
DATA_ROOT_ENV = "TVAE_DATA_ROOT"
DATASET_NAMES = ("mnist", "fmnist", "omniglot", "affnist")
NUM_CLASSES = {"mnist": 10, "fmnist": 10, "affnist": 10, "omniglot": 1623}

# IDX type code -> numpy big-endian dtype
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
_MAX_ELEMENTS = 2**34


class DatasetError(Exception):
    """Raised for missing or malformed dataset files."""


@dataclass(frozen=True)
class ImageSet:
    images: np.ndarray  # [N, 28, 28] float32 in [0, 1]
    labels: np.ndarray  # [N] int64, -1 when unlabelled
    name: str
    split: str

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be [N, H, W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    def tensor(self, idx=None) -> torch.Tensor:
        """Images as a float32 ``[N, 1, H, W]`` tensor."""
        imgs = self.images if idx is None else self.images[idx]
        return torch.from_numpy(np.ascontiguousarray(imgs)).unsqueeze(1)

    def take(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.labels[idx], self.name, self.split)


def _open(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def decode_idx(buf: bytes) -> np.ndarray:
    """Decode an in-memory IDX container into an array of its declared shape."""
    if len(buf) < 4:
        raise DatasetError("malformed magic at byte offset 0: file shorter than 4 bytes")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise DatasetError(f"malformed magic 0x{buf[:4].hex()} at byte offset 0")
    if ndim == 0:
        raise DatasetError("malformed magic at byte offset 3: zero dimensions")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise DatasetError(f"truncated header at byte offset {len(buf)}: expected {header_end} header bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DatasetError(f"dimension overflow at byte offset 4: dims {dims}")
    dtype = _IDX_DTYPES[code]
    need = count * dtype.itemsize
    have = len(buf) - header_end
    if have < need:
        raise DatasetError(
            f"truncated payload at byte offset {len(buf)}: expected {need} payload bytes, found {have}"
        )
    if have > need:
        raise DatasetError(f"trailing data at byte offset {header_end + need}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=header_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx_raw(path) -> np.ndarray:
    """Raw IDX payload with its native element type (uint8 for image files)."""
    path = Path(path)
    with _open(path) as fh:
        buf = fh.read()
    try:
        return decode_idx(buf)
    except DatasetError as err:
        raise DatasetError(f"{path}: {err}") from None


def load_idx(path) -> np.ndarray:
    """Load an IDX file; uint8 payloads are rescaled to float32 in [0, 1]."""
    arr = read_idx_raw(path)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_DTYPES[code]).tobytes(order="C")


def save_idx(path, arr: np.ndarray):
    path = Path(path)
    data = encode_idx(arr)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(data)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def resize_images(images: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of a ``[N, H, W]`` stack to ``size x size``."""
    if images.shape[1:] == (size, size):
        return images
    out = []
    for start in range(0, len(images), 4096):
        chunk = torch.from_numpy(np.ascontiguousarray(images[start:start + 4096], dtype=np.float32))
        chunk = F.interpolate(chunk.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False)
        out.append(chunk.squeeze(1).clamp_(0.0, 1.0).numpy())
    return np.concatenate(out) if out else np.zeros((0, size, size), np.float32)


def _split_prefix(split: str) -> str:
    if split == "train":
        return "train"
    if split == "test":
        return "t10k"
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def expected_files(name: str, split: str) -> list[str]:
    prefix = _split_prefix(split)
    return [f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"]


def _find(directory: Path, stem: str) -> Path | None:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise DatasetError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(env)


def load_dataset(name: str, split: str, root=None) -> ImageSet:
    """Load ``name``/``split`` from ``root`` as a canonical 28x28 image set."""
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    directory = data_root(root) / name
    img_stem, lbl_stem = expected_files(name, split)
    img_path = _find(directory, img_stem)
    if img_path is None:
        raise DatasetError(
            f"missing {name}/{split} files under {directory}: expected {img_stem}[.gz] and {lbl_stem}[.gz]"
        )
    images = load_idx(img_path).astype(np.float32, copy=False)
    if images.ndim != 3:
        raise DatasetError(f"{img_path}: expected a 3-d image tensor, got shape {images.shape}")
    lbl_path = _find(directory, lbl_stem)
    if lbl_path is not None:
        labels = read_idx_raw(lbl_path).astype(np.int64).reshape(-1)
        if len(labels) != len(images):
            raise DatasetError(f"{lbl_path}: {len(labels)} labels for {len(images)} images")
    else:
        labels = np.full(len(images), -1, dtype=np.int64)

    # Omniglot sources draw ink dark on white; flip to MNIST polarity.
    if name == "omniglot" and images.size and float(images.mean()) > 0.5:
        images = 1.0 - images
    images = resize_images(images)
    return ImageSet(images, labels, name, split)


def subsample(images: ImageSet, n: int, rng: np.random.Generator) -> ImageSet:
    """Uniform sample of ``n`` items without replacement."""
    if not 0 < n <= len(images):
        raise ValueError(f"cannot subsample {n} items from a set of {len(images)}")
    idx = rng.choice(len(images), size=n, replace=False)
    return images.take(idx)
