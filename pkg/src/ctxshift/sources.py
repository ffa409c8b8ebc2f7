"""Loading of the balanced source datasets (MNIST, Fashion-MNIST, CIFAR).

Sources are read from ``<data_root>/raw/<name>/`` in their standard
distribution formats: IDX files for the MNIST family and the pickled python
batches for CIFAR.  Nothing is downloaded here; a missing source raises
:class:`SourceMissingError` describing where the files are expected.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "CTXSHIFT_DATA"

_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

SOURCES = {
    "mnist": "mnist",
    "fashion-mnist": "fashion-mnist",
    "cifar10": "cifar-10-batches-py",
    "cifar100": "cifar-100-python",
}

FETCH_HINTS = {
    "mnist": (
        "Copy the four MNIST IDX files (optionally .gz) into {dir}. They ship in the "
        "npm package 'mnist-data' (npm pack mnist-data) or on the official mirrors; "
        "scripts/stage_sources.py stages them automatically."
    ),
    "fashion-mnist": (
        "Copy the four Fashion-MNIST IDX files (optionally .gz) into {dir}, or run "
        "scripts/stage_sources.py, which converts the npm package 'fashion-mnist'."
    ),
    "cifar10": "Extract cifar-10-python.tar.gz so that {dir} holds data_batch_1..5 and test_batch.",
    "cifar100": "Extract cifar-100-python.tar.gz so that {dir} holds 'train' and 'test'.",
}


class SourceMissingError(FileNotFoundError):
    pass


@dataclass
class ImageSet:
    """Images (N, H, W, C) as float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ctxshift"


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Parse an IDX file (gzip transparently) into a numpy array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    return data.reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def _find(directory: Path, stem: str) -> Path | None:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def _load_idx_pair(directory: Path, split: str, name: str) -> ImageSet:
    img_stem, lbl_stem = _IDX_FILES[split]
    img_path, lbl_path = _find(directory, img_stem), _find(directory, lbl_stem)
    if img_path is None or lbl_path is None:
        raise SourceMissingError(
            f"source '{name}' ({split}) not found in {directory}. "
            + FETCH_HINTS[name].format(dir=directory)
        )
    images = read_idx(img_path).astype(np.float32) / 255.0
    labels = read_idx(lbl_path).astype(np.int64)
    return ImageSet(images[..., None], labels, name)


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _load_cifar(directory: Path, split: str, name: str) -> ImageSet:
    if name == "cifar10":
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        key = "labels"
    else:
        files = [split]
        key = "fine_labels"
    paths = [directory / f for f in files]
    if not all(p.exists() for p in paths):
        raise SourceMissingError(
            f"source '{name}' ({split}) not found in {directory}. "
            + FETCH_HINTS[name].format(dir=directory)
        )
    images, labels = [], []
    for p in paths:
        batch = _unpickle(p)
        images.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.extend(batch[key])
    data = np.concatenate(images).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageSet(data, np.asarray(labels, dtype=np.int64), name)


def load_source(name: str, split: str = "train", root=None) -> ImageSet:
    """Load a balanced source split (``train`` or ``test``) from the data root."""
    if name not in SOURCES:
        raise ValueError(f"unknown source {name!r}; expected one of {sorted(SOURCES)}")
    if split not in _IDX_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    directory = data_root(root) / "raw" / SOURCES[name]
    if name.startswith("cifar"):
        return _load_cifar(directory, split, name)
    return _load_idx_pair(directory, split, name)
