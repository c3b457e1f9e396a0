"""Shared fixture builders: model files, IDX files, and the planted
activation matrix whose greedy tree is known by construction."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from fga.inference import ActivationMatrix


class ModelFileBuilder:
    """Assemble an FGA-MF v1 manifest + weight blob pair for tests."""

    def __init__(self, name="test-net", input_shape=(2,), scale=1.0, offset=0.0,
                 class_count=2):
        self.name = name
        self.input_shape = list(input_shape)
        self.scale = scale
        self.offset = offset
        self.class_count = class_count
        self.layers = []
        self.blob = []
        self.n_floats = 0

    def _push(self, array) -> dict:
        flat = np.asarray(array, dtype="<f4").ravel()
        ref = {"offset": self.n_floats, "count": int(flat.size)}
        self.blob.append(flat)
        self.n_floats += flat.size
        return ref

    def add(self, name, kind, params=None, weights=None, bias=None,
            weights_ref=None, bias_ref=None):
        entry = {"name": name, "kind": kind}
        if params:
            entry["params"] = params
        if weights is not None:
            entry["weights"] = self._push(weights)
            entry["bias"] = self._push(bias)
        if weights_ref is not None:  # deliberately inconsistent refs, for error tests
            entry["weights"] = weights_ref
        if bias_ref is not None:
            entry["bias"] = bias_ref
        self.layers.append(entry)
        return self

    def write(self, path: Path) -> Path:
        path = Path(path)
        manifest = {
            "format": "fga-mf",
            "version": 1,
            "name": self.name,
            "input_shape": self.input_shape,
            "preprocessing": {"scale": self.scale, "offset": self.offset},
            "class_count": self.class_count,
            "layers": self.layers,
        }
        path.write_text(json.dumps(manifest, indent=1))
        blob = np.concatenate(self.blob) if self.blob else np.zeros(0, dtype="<f4")
        blob.astype("<f4").tofile(path.with_suffix(".bin"))
        return path


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Path,
              labels_path: Path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", 2051, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", 2049, labels.size))
        f.write(labels.tobytes())


def identity_dense_model(path: Path, size: int = 2) -> Path:
    """One dense layer with identity weights and zero bias; raw inputs."""
    builder = ModelFileBuilder("identity", (size,), scale=1.0, class_count=size)
    builder.add("d1", "dense", {"out_features": size}, np.eye(size), np.zeros(size))
    return builder.write(path)


def planted_model(path: Path) -> Path:
    """Two-class net over 1x2 pixel images: flatten, two identity dense
    layers, softmax; predicts argmax(x0, x1). Activations at 'd1' equal the
    normalized pixels, so trees over 'd1' are fully predictable."""
    builder = ModelFileBuilder("planted", (1, 1, 2), scale=1 / 255, class_count=2)
    builder.add("flat", "flatten")
    builder.add("d1", "dense", {"out_features": 2}, np.eye(2), np.zeros(2))
    builder.add("out", "dense", {"out_features": 2}, np.eye(2), np.zeros(2))
    builder.add("probs", "softmax")
    return builder.write(path)


# Byte-valued (x0, x1) pixels; label = argmax. Column d1:1 separates the
# classes with a clean gap, column d1:0 overlaps across classes.
PLANTED_TRAIN = [
    ((200, 30), 0), ((150, 60), 0), ((120, 10), 0), ((90, 40), 0), ((250, 80), 0),
    ((100, 180), 1), ((40, 220), 1), ((160, 200), 1), ((10, 130), 1), ((60, 240), 1),
]
PLANTED_TEST = [
    ((180, 20), 0), ((140, 70), 0), ((220, 50), 0),
    ((30, 190), 1), ((80, 210), 1), ((120, 230), 1),
]


def write_planted_idx(entries, images_path: Path, labels_path: Path) -> None:
    images = np.array([[[list(px)]] for px, _ in entries], dtype=np.uint8).reshape(
        len(entries), 1, 2
    )
    labels = np.array([label for _, label in entries], dtype=np.uint8)
    write_idx(images, labels, images_path, labels_path)


def constant_model(path: Path) -> Path:
    """Predicts class 0 with identical activations for every input."""
    builder = ModelFileBuilder("constant", (1, 1, 2), scale=1 / 255, class_count=2)
    builder.add("flat", "flatten")
    builder.add("d1", "dense", {"out_features": 2}, np.zeros((2, 2)),
                np.array([0.5, 0.25]))
    builder.add("probs", "softmax")
    return builder.write(path)


def three_class_model(path: Path) -> Path:
    """Three-class analogue of the planted model over 1x3 pixel images."""
    builder = ModelFileBuilder("planted3", (1, 1, 3), scale=1 / 255, class_count=3)
    builder.add("flat", "flatten")
    builder.add("d1", "dense", {"out_features": 3}, np.eye(3), np.zeros(3))
    builder.add("probs", "softmax")
    return builder.write(path)


def ten_class_model(path: Path) -> Path:
    """Ten-class identity model over 1x10 pixel images; class = brightest pixel."""
    builder = ModelFileBuilder("planted10", (1, 1, 10), scale=1 / 255, class_count=10)
    builder.add("flat", "flatten")
    builder.add("d1", "dense", {"out_features": 10}, np.eye(10), np.zeros(10))
    builder.add("probs", "softmax")
    return builder.write(path)


def write_ten_class_idx(n: int, seed: int, images_path: Path, labels_path: Path) -> None:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = rng.integers(10, 61, size=(n, 1, 10)).astype(np.uint8)
    images[np.arange(n), 0, labels] = rng.integers(180, 256, size=n)
    write_idx(images, labels, images_path, labels_path)


def three_class_entries(n_per_class: int, rng: np.random.Generator):
    """Byte triples whose argmax equals the class; one hot column per class."""
    entries = []
    for label in range(3):
        for _ in range(n_per_class):
            pixels = rng.integers(10, 61, size=3)
            pixels[label] = int(rng.integers(180, 256))
            entries.append((tuple(int(v) for v in pixels), label))
    return entries


def write_three_class_idx(entries, images_path: Path, labels_path: Path) -> None:
    images = np.array([list(px) for px, _ in entries], dtype=np.uint8).reshape(
        len(entries), 1, 3
    )
    labels = np.array([label for _, label in entries], dtype=np.uint8)
    write_idx(images, labels, images_path, labels_path)


def pair_splitting_seed(pairs, n: int, k: int = 2, limit: int = 50_000) -> int:
    """Smallest seed whose shuffled round-robin k-fold split puts the two
    members of every (a, b) position pair into different folds."""
    for seed in range(limit):
        perm = np.random.default_rng(seed).permutation(n)
        fold_of = np.empty(n, dtype=int)
        fold_of[perm] = np.arange(n) % k
        if all(fold_of[a] != fold_of[b] for a, b in pairs):
            return seed
    raise AssertionError(f"no pair-splitting seed below {limit}")


def planted_tree_fixture() -> tuple[ActivationMatrix, np.ndarray]:
    """Activation matrix over a layer named "2" whose greedy Gini tree is,
    by construction:

        split 2:15 @ 0.68
          <=: split 2:9 @ 0.34   -> leaves (212 present, 0) / (0, 87 absent)
          >:  split 2:18 @ 0.70  -> leaves (66, 3) / (0, 192)

    The (66,3) rows are bit-identical with conflicting labels, so they
    terminate as an impure leaf.
    """
    groups = [
        # (rows, n15, n9, n18, n_present, n_absent)
        (212, 0.555, 0.215, 0.8, 212, 0),   # left-left, pure present
        (87, 0.555, 0.465, 0.6, 0, 87),     # left-right, pure absent
        (69, 0.805, 0.465, 0.6, 66, 3),     # right-left, conflicting duplicates
        (96, 0.805, 0.215, 0.8, 0, 96),     # right-right (part 1)
        (96, 0.805, 0.465, 0.8, 0, 96),     # right-right (part 2)
    ]
    width = 19
    rows, labels = [], []
    for count, n15, n9, n18, n_present, n_absent in groups:
        assert n_present + n_absent == count
        row = np.zeros(width)
        row[15], row[9], row[18] = n15, n9, n18
        rows.extend([row.copy() for _ in range(count)])
        labels.extend([True] * n_present + [False] * n_absent)
    values = np.array(rows)
    ids = tuple(str(i) for i in range(values.shape[0]))
    return ActivationMatrix("2", ids, values), np.array(labels)


@pytest.fixture
def planted_tree():
    return planted_tree_fixture()
