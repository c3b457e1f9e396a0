"""Synthetic handwritten-style digit rendering.

Each sample is a Hershey-font glyph pushed through randomized affine and
elastic deformations, stroke fragmentation, intensity jitter, and sensor
noise, downsampled to 28x28. The elastic field and fragmentation are what
keep within-class styles heterogeneous; without them a LeNet encodes digit
groups so compactly that activation rules become unrealistically easy.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .data import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, write_idx

FONTS = (
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
    cv2.FONT_HERSHEY_SCRIPT_SIMPLEX,
    cv2.FONT_HERSHEY_COMPLEX_SMALL,
)

# The fourteen reference features: ten single digits, two confusable pairs,
# the straight-line digits, and the circle digits.
REFERENCE_FEATURES = (
    *[{"name": f"Digit {d}", "classes": [d]} for d in range(10)],
    {"name": "2 and 7", "classes": [2, 7]},
    {"name": "9 and 6", "classes": [9, 6]},
    {"name": "Line", "classes": [1, 4, 7]},
    {"name": "Circle", "classes": [0, 6, 8, 9]},
)


def render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    big = size * 2
    canvas = np.zeros((big, big), dtype=np.uint8)
    font = FONTS[rng.integers(0, len(FONTS))]
    scale = float(rng.uniform(1.3, 2.2)) * (big / 56.0)
    thickness = int(rng.integers(2, 6))
    (tw, th), _ = cv2.getTextSize(str(digit), font, scale, thickness)
    dx, dy = int(rng.integers(-4, 5)), int(rng.integers(-4, 5))
    org = (big // 2 - tw // 2 + dx, big // 2 + th // 2 + dy)
    cv2.putText(canvas, str(digit), org, font, scale, 255, thickness, cv2.LINE_AA)

    angle = float(rng.uniform(-25, 25))
    zoom = float(rng.uniform(0.85, 1.1))
    affine = cv2.getRotationMatrix2D((big / 2, big / 2), angle, zoom)
    canvas = cv2.warpAffine(canvas, affine, (big, big), flags=cv2.INTER_LINEAR)

    # smooth random displacement field: handwriting-style stroke bending
    alpha = float(rng.uniform(4.0, 14.0))
    sigma = float(rng.uniform(6.0, 9.0))
    field_x = cv2.GaussianBlur(
        rng.uniform(-1, 1, (big, big)).astype(np.float32), (0, 0), sigma) * alpha
    field_y = cv2.GaussianBlur(
        rng.uniform(-1, 1, (big, big)).astype(np.float32), (0, 0), sigma) * alpha
    grid_x, grid_y = np.meshgrid(
        np.arange(big, dtype=np.float32), np.arange(big, dtype=np.float32))
    canvas = cv2.remap(canvas, grid_x + field_x, grid_y + field_y, cv2.INTER_LINEAR)

    if rng.uniform() < 0.5:  # fragment strokes: thin them or bar them out
        if rng.uniform() < 0.5:
            canvas = cv2.erode(canvas, np.ones((2, int(rng.integers(2, 4))), np.uint8))
        else:
            x0 = int(rng.integers(8, big - 16))
            y0 = int(rng.integers(8, big - 16))
            if rng.uniform() < 0.5:
                canvas[y0:y0 + int(rng.integers(2, 5)),
                       x0:x0 + int(rng.integers(10, 22))] = 0
            else:
                canvas[y0:y0 + int(rng.integers(10, 22)),
                       x0:x0 + int(rng.integers(2, 5))] = 0

    img = cv2.resize(canvas, (size, size), interpolation=cv2.INTER_AREA).astype(np.float64)
    img *= rng.uniform(0.7, 1.0)  # stroke intensity
    img += rng.normal(0.0, rng.uniform(2, 14), size=img.shape)  # sensor noise
    return np.clip(img, 0, 255).astype(np.uint8)


def generate(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.stack([render_digit(int(d), rng, size) for d in labels])
    return images, labels


def write_dataset(out_dir: Path, n_train: int, n_test: int, seed: int,
                  size: int = 28) -> dict:
    """Write train/test IDX pairs, the reference feature file, and a
    generation record. Train and test use disjoint seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xtr, ytr = generate(n_train, seed, size)
    xte, yte = generate(n_test, seed + 1, size)
    write_idx(xtr, ytr, out_dir / TRAIN_IMAGES, out_dir / TRAIN_LABELS)
    write_idx(xte, yte, out_dir / TEST_IMAGES, out_dir / TEST_LABELS)
    (out_dir / "features.json").write_text(
        json.dumps(list(REFERENCE_FEATURES), indent=1))
    meta = {
        "generator": "fga-exporter synth-digits",
        "n_train": n_train,
        "n_test": n_test,
        "seed": seed,
        "image_size": size,
    }
    (out_dir / "generation_meta.json").write_text(json.dumps(meta, indent=1))
    return meta
