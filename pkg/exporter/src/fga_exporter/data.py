"""Minimal IDX read/write used by the exporter.

Kept independent of the analyzer package on purpose: the two sides meet only
at the byte format (big-endian magic 2051/2049, dimension sizes, ubyte
payload)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

TRAIN_IMAGES = "train-images.idx"
TRAIN_LABELS = "train-labels.idx"
TEST_IMAGES = "test-images.idx"
TEST_LABELS = "test-labels.idx"


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Path,
              labels_path: Path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    if labels.shape != (n,):
        raise ValueError(f"{n} images but {labels.shape} labels")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, n))
        f.write(labels.tobytes())


def read_idx(images_path: Path, labels_path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">iiii", f.read(16))
        if magic != IMAGE_MAGIC:
            raise ValueError(f"{images_path}: bad image magic {magic}")
        images = np.frombuffer(f.read(n * h * w), dtype=np.uint8).reshape(n, h, w)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", f.read(8))
        if magic != LABEL_MAGIC:
            raise ValueError(f"{labels_path}: bad label magic {magic}")
        labels = np.frombuffer(f.read(n_labels), dtype=np.uint8)
    if n != n_labels:
        raise ValueError(f"{n} images vs {n_labels} labels")
    return images, labels


def load_split(data_dir: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    data_dir = Path(data_dir)
    xtr, ytr = read_idx(data_dir / TRAIN_IMAGES, data_dir / TRAIN_LABELS)
    xte, yte = read_idx(data_dir / TEST_IMAGES, data_dir / TEST_LABELS)
    return xtr, ytr, xte, yte
