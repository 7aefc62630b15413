import os

import numpy as np
import pytest
import torch

from tvae.datasets import ImageSet, save_idx
from tvae.networks import TINY_ARCH, ModelSpec, build_model


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale training tests (needs $TVAE_DATA_ROOT)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="desk-scale run; pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_model(kind="tvae", variant="A", z_dim=2, residual=False, neural_form="skip", dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    model = build_model(ModelSpec(kind, z_dim, variant, residual, neural_form, TINY_ARCH))
    return model.to(dtype)


def blob_images(n, size=28, seed=0):
    """Labelled synthetic images: a Gaussian blob whose position encodes the class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(10, size=n)
    yy, xx = np.mgrid[:size, :size] / (size - 1)
    cx = 0.25 + 0.05 * labels[:, None, None] + 0.01 * rng.normal(size=(n, 1, 1))
    cy = 0.5 + 0.05 * rng.normal(size=(n, 1, 1))
    imgs = np.exp(-((xx - cx) ** 2 / 0.01 + (yy - cy) ** 2 / 0.04))
    return imgs.astype(np.float32), labels.astype(np.int64)


def blob_set(n, size=28, seed=0, name="mnist", split="train"):
    imgs, labels = blob_images(n, size, seed)
    return ImageSet(imgs, labels, name, split)


def write_dataset(root, name, n_train=300, n_test=100, seed=0):
    """Write a synthetic IDX dataset in the canonical layout."""
    d = os.path.join(root, name)
    os.makedirs(d, exist_ok=True)
    for prefix, n, s in (("train", n_train, seed), ("t10k", n_test, seed + 1)):
        imgs, labels = blob_images(n, 28, s)
        save_idx(os.path.join(d, f"{prefix}-images-idx3-ubyte"), np.round(imgs * 255).astype(np.uint8))
        save_idx(os.path.join(d, f"{prefix}-labels-idx1-ubyte"), labels.astype(np.uint8))
    return d


@pytest.fixture
def data_root(tmp_path):
    root = tmp_path / "data"
    for name in ("mnist", "affnist"):
        write_dataset(str(root), name)
    return root


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(key, title, ok, detail=""):
    """``ok`` is True, False or None (not run)."""
    status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[ok]
    ACCEPTANCE[key] = f"criterion {key} [{status}] {title}" + (f": {detail}" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
