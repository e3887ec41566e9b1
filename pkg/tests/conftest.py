import os
from pathlib import Path

import numpy as np
import pytest

from tiltnet.net import LayerSpec, NetworkConfig, build_network

_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist():
    """Locate the four IDX files (raw or .gz); None when unavailable."""
    roots = []
    if os.environ.get("TILTNET_MNIST_DIR"):
        roots.append(Path(os.environ["TILTNET_MNIST_DIR"]))
    roots.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for root in roots:
        if not root.is_dir():
            continue
        found = {}
        for key, stem in _MNIST_FILES.items():
            for cand in (root / stem, root / (stem + ".gz")):
                if cand.is_file():
                    found[key] = cand
                    break
        if len(found) == len(_MNIST_FILES):
            return found
    return None


MNIST = find_mnist()
needs_mnist = pytest.mark.skipif(
    MNIST is None,
    reason="MNIST IDX files not found under $TILTNET_MNIST_DIR or ./data/mnist "
           "(this sandbox has no way to download them); place the four "
           "ubyte[.gz] files there to run this criterion")
long_runs_enabled = os.environ.get("TILTNET_RUN_LONG") == "1"
needs_long = pytest.mark.skipif(
    not long_runs_enabled,
    reason="multi-hour reproduction; set TILTNET_RUN_LONG=1 to run")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(seed=0, classes=3):
    return NetworkConfig(
        input_shape=(1, 6, 6),
        layers=(
            LayerSpec("conv", channels=2, kernel=3),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("flatten"),
            LayerSpec("dense", width=classes),
        ),
        num_classes=classes,
        seed=seed,
    )


@pytest.fixture
def tiny_net():
    """A small conv-pool-dense stack with symmetry-broken parameters."""
    net = build_network(tiny_config())
    gen = np.random.default_rng(42)
    for p in net.params.values():
        p += gen.normal(0.0, 0.1, p.shape)
    net.bump_version()
    return net
