import os
from pathlib import Path

import pytest


def data_root():
    """``$GSAN_DATA_DIR`` if set, else ``~/data``."""
    return Path(os.environ.get("GSAN_DATA_DIR") or Path.home() / "data")


def _dir_or_skip(*candidates):
    for c in candidates:
        if c.is_dir() and any(c.iterdir()):
            return c
    pytest.skip(f"dataset not found under {data_root()}")


@pytest.fixture(scope="session")
def mnist_dir():
    root = data_root()
    return _dir_or_skip(root / "mnist", root)


@pytest.fixture(scope="session")
def cifar_dir():
    root = data_root()
    return _dir_or_skip(root / "cifar-10-batches-bin", root / "cifar10")
