import gzip
import os
from pathlib import Path

import numpy as np
import pytest

from noisytail import data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _mnist_from_env():
    root = os.environ.get("NOISYTAIL_MNIST_DIR")
    if not root:
        return None
    root = Path(root)
    for images, labels in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
    ):
        if (root / images).exists() and (root / labels).exists():
            return root / images, root / labels
    pytest.fail(f"NOISYTAIL_MNIST_DIR={root} holds no IDX image/label pair")


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """Paths of an MNIST image/label IDX pair.

    Uses $NOISYTAIL_MNIST_DIR when set; otherwise writes the 5,000-digit MNIST
    sample bundled with mlxtend to IDX files.
    """
    found = _mnist_from_env()
    if found:
        return found
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    out = tmp_path_factory.mktemp("mnist")
    images, labels = out / "images-idx3-ubyte", out / "labels-idx1-ubyte"
    data.write_idx(images, X.reshape(-1, 28, 28).astype(np.uint8))
    data.write_idx(labels, y.astype(np.uint8))
    return images, labels
