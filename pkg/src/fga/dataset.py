"""Dataset ingestion and labeling: IDX files, patch directories, sliding-window
patch extraction, confidence-based labeling, per-feature presence columns,
k-fold splits, and class-combination enumeration."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolation,
    DataFormatError,
    TruncationError,
)
from .inference import Model, Preprocessing, forward

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass
class LabeledSample:
    id: str
    pixels: np.ndarray  # float64, (H, W) or (C, H, W), already preprocessed
    class_label: int | None  # None only for unlabeled patches


@dataclass
class LabeledDataset:
    samples: list[LabeledSample]
    class_domain: tuple[int, ...]
    role: str  # "train" | "test"

    def __post_init__(self):
        if not self.samples:
            raise DataFormatError(f"{self.role} dataset is empty")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataFormatError(f"{self.role} dataset has duplicate sample ids")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.class_label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class FeatureSpec:
    """A named feature, formalized as the set of class labels that exhibit it."""

    name: str
    classes: tuple[int, ...]

    def __post_init__(self):
        if not self.classes:
            raise ConfigurationError(f"feature {self.name!r} has an empty class set")
        object.__setattr__(self, "classes", tuple(sorted(set(self.classes))))


@dataclass
class FeatureLabeling:
    """Per-sample presence flags, one boolean column per feature."""

    feature_names: tuple[str, ...]
    sample_ids: tuple[str, ...]
    present: np.ndarray  # bool [n_samples, n_features]

    def column(self, feature_name: str) -> np.ndarray:
        return self.present[:, self.feature_names.index(feature_name)]


@dataclass
class FoldAssignment:
    k: int
    assignment: dict[str, int]  # sample id -> fold in [0, k)

    def fold_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]


def _read_be32(f, path: Path, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise TruncationError(f"{path}: truncated {what}")
    return struct.unpack(">i", data)[0]


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    preprocessing: Preprocessing = Preprocessing(1.0 / 255.0, 0.0),
    role: str = "train",
    id_prefix: str = "",
) -> LabeledDataset:
    """Load a big-endian IDX image/label file pair.

    Pixels are normalized exactly once here, by the given preprocessing
    (default x/255); the model consuming the dataset must declare the same
    preprocessing in its manifest.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: image magic {magic}, expected {IDX_IMAGE_MAGIC}"
            )
        n = _read_be32(f, images_path, "count")
        h = _read_be32(f, images_path, "row count")
        w = _read_be32(f, images_path, "column count")
        payload = f.read(n * h * w)
        if len(payload) < n * h * w:
            raise TruncationError(
                f"{images_path}: payload holds {len(payload)} bytes, "
                f"header promises {n * h * w}"
            )
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: label magic {magic}, expected {IDX_LABEL_MAGIC}"
            )
        n_labels = _read_be32(f, labels_path, "count")
        label_payload = f.read(n_labels)
        if len(label_payload) < n_labels:
            raise TruncationError(
                f"{labels_path}: payload holds {len(label_payload)} labels, "
                f"header promises {n_labels}"
            )
    if n != n_labels:
        raise DataFormatError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
    pixels = preprocessing.apply(pixels)
    labels = np.frombuffer(label_payload, dtype=np.uint8)
    samples = [
        LabeledSample(f"{id_prefix}{i}", pixels[i], int(labels[i])) for i in range(n)
    ]
    return LabeledDataset(samples, tuple(sorted(set(labels.tolist()))), role)


def load_patch_dir(
    path: str | Path,
    preprocessing: Preprocessing = Preprocessing(1.0 / 255.0, 0.0),
    role: str = "train",
) -> list[LabeledSample]:
    """Load a patch directory: manifest.csv with (id, class_label) rows plus
    one image file per row named after the id (':' replaced by '_').

    An empty class_label yields an unlabeled sample, valid only as
    confidence-filter input.
    """
    from PIL import Image

    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise DataFormatError(f"{path}: no manifest.csv")
    samples = []
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(reader.fieldnames) != {"id", "class_label"}:
            raise DataFormatError(
                f"{manifest}: expected columns (id, class_label), got {reader.fieldnames}"
            )
        for row in reader:
            sid = row["id"]
            img_path = path / (sid.replace(":", "_") + ".png")
            if not img_path.exists():
                raise DataFormatError(f"{path}: missing image file for sample {sid!r}")
            img = np.asarray(Image.open(img_path))
            if img.ndim == 3:  # HWC -> CHW
                img = np.ascontiguousarray(img.transpose(2, 0, 1))
            label = int(row["class_label"]) if row["class_label"].strip() else None
            samples.append(LabeledSample(sid, preprocessing.apply(img), label))
    if not samples:
        raise DataFormatError(f"{manifest}: no rows")
    return samples


def iter_patches(
    image: np.ndarray, patch_size: int, stride: int
) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield (row, col, patch) for every patch, row-major from the top-left.

    row/col are pixel offsets of the patch's top-left corner. Accepts (H, W)
    or (C, H, W) images; patches keep the channel axis.
    """
    if image.ndim not in (2, 3):
        raise ContractViolation(f"expected (H,W) or (C,H,W) image, got {image.shape}")
    h, w = image.shape[-2], image.shape[-1]
    if patch_size > h or patch_size > w:
        raise ContractViolation(
            f"patch size {patch_size} exceeds image extent {h}x{w}"
        )
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    for r in range(0, h - patch_size + 1, stride):
        for c in range(0, w - patch_size + 1, stride):
            yield r, c, image[..., r : r + patch_size, c : c + patch_size].copy()


def extract_patches(image: np.ndarray, patch_size: int, stride: int) -> list[np.ndarray]:
    return [p for _, _, p in iter_patches(image, patch_size, stride)]


def patch_count(h: int, w: int, patch_size: int, stride: int) -> int:
    return ((w - patch_size) // stride + 1) * ((h - patch_size) // stride + 1)


def confidence_filter(
    model: Model,
    samples: Sequence[LabeledSample],
    threshold: float,
    role: str = "train",
) -> LabeledDataset:
    """Keep the samples whose top class probability exceeds the threshold and
    label them with the model's argmax class, preserving input order."""
    if not model.layers or model.layers[-1].kind != "softmax":
        raise ConfigurationError(
            f"model {model.name!r} does not end in a softmax layer; "
            "confidence filtering needs class probabilities"
        )
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must be in (0, 1), got {threshold}")
    kept = []
    for sample in samples:
        scores, _ = forward(model, sample.pixels)
        top = int(np.argmax(scores))
        if scores[top] > threshold:
            kept.append(LabeledSample(sample.id, sample.pixels, top))
    if not kept:
        raise DataFormatError(
            f"confidence filter at {threshold} kept none of {len(samples)} samples"
        )
    return LabeledDataset(kept, tuple(range(model.class_count)), role)


def label_features(
    dataset: LabeledDataset, features: Sequence[FeatureSpec]
) -> FeatureLabeling:
    """One presence column per feature; a sample is present for every feature
    whose class set contains its label, so multi-feature tagging is free."""
    domain = set(dataset.class_domain)
    for feat in features:
        unknown = set(feat.classes) - domain
        if unknown:
            raise ConfigurationError(
                f"feature {feat.name!r} references classes {sorted(unknown)} "
                f"outside the dataset domain {sorted(domain)}"
            )
    labels = dataset.labels()
    present = np.stack(
        [np.isin(labels, np.array(f.classes)) for f in features], axis=1
    )
    return FeatureLabeling(
        tuple(f.name for f in features),
        tuple(s.id for s in dataset.samples),
        present,
    )


def kfold(dataset: LabeledDataset, k: int, seed: int) -> FoldAssignment:
    """Deterministic k-fold split: shuffle sample positions with the seeded
    generator, then assign round-robin, so fold sizes differ by at most 1."""
    n = len(dataset)
    if k < 2 or k > n:
        raise ContractViolation(f"k must be in [2, {n}], got {k}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = {
        dataset.samples[int(perm[j])].id: j % k for j in range(n)
    }
    return FoldAssignment(k, assignment)


def enumerate_feature_combos(
    class_domain: Iterable[int], min_size: int, max_size: int
) -> list[FeatureSpec]:
    """Every class subset with size in [min_size, max_size], canonically named
    by its sorted members and ordered lexicographically."""
    domain = sorted(set(class_domain))
    if not domain:
        raise ContractViolation("class domain is empty")
    if not 1 <= min_size <= max_size <= len(domain):
        raise ContractViolation(
            f"need 1 <= min_size <= max_size <= {len(domain)}, "
            f"got [{min_size}, {max_size}]"
        )
    combos = []
    for r in range(min_size, max_size + 1):
        combos.extend(combinations(domain, r))
    combos.sort()
    return [FeatureSpec(",".join(str(c) for c in members), members) for members in combos]


def load_feature_file(path: str | Path) -> list[FeatureSpec]:
    """Read a JSON feature file: a list of {"name": ..., "classes": [...]}."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise DataFormatError(f"{path}: expected a non-empty JSON list of features")
    features = []
    for entry in entries:
        if not isinstance(entry, dict) or set(entry) != {"name", "classes"}:
            raise DataFormatError(
                f"{path}: each feature needs exactly the keys name and classes, "
                f"got {entry!r}"
            )
        features.append(FeatureSpec(str(entry["name"]), tuple(int(c) for c in entry["classes"])))
    return features
