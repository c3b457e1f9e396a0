"""FGA-MF v1 bundle writer and self-check.

A bundle is: model.json (manifest), model.bin (little-endian float32 blob;
dense weights row-major [out][in], conv weights [out_ch][in_ch][kh][kw]),
transcript.csv with (sample_id, argmax, max_probability) over a fixed
100-sample probe set, and training_meta.json.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .arch import build, export_plan
from .data import load_split

PROBE_SIZE = 100
PROBE_MARGIN = 1e-3  # min top1-top2 probability gap: keep argmax off knife edges


def _probe_transcript(model: torch.nn.Module, images: np.ndarray) -> list[tuple]:
    """(sample_id, argmax, max_probability) for the first PROBE_SIZE test
    samples whose top-two probability gap exceeds PROBE_MARGIN."""
    model.eval()
    with torch.no_grad():
        x = torch.tensor(images[:, None].astype(np.float32) / 255.0)
        probabilities = torch.softmax(model(x), dim=1).numpy()
    rows = []
    for i, probs in enumerate(probabilities):
        order = np.argsort(probs)
        if probs[order[-1]] - probs[order[-2]] <= PROBE_MARGIN:
            continue
        rows.append((str(i), int(order[-1]), float(probs[order[-1]])))
        if len(rows) == PROBE_SIZE:
            break
    if len(rows) < PROBE_SIZE:
        raise RuntimeError(
            f"only {len(rows)} samples had a probability margin above "
            f"{PROBE_MARGIN}; need {PROBE_SIZE}"
        )
    return rows


def export_bundle(
    checkpoint_path: str | Path,
    out_dir: str | Path,
    data_dir: str | Path | None = None,
    name: str | None = None,
) -> dict:
    checkpoint_path, out_dir = Path(checkpoint_path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    arch_id = checkpoint["arch"]
    model = build(arch_id)
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()

    plan = export_plan(arch_id, model)
    blob_parts: list[np.ndarray] = []
    offset = 0
    layers = []
    for entry in plan:
        record = {"name": entry["name"], "kind": entry["kind"]}
        if entry.get("params"):
            record["params"] = entry["params"]
        if entry["weights"] is not None:
            for key in ("weights", "bias"):
                flat = np.ascontiguousarray(entry[key], dtype="<f4").ravel()
                record[key] = {"offset": offset, "count": int(flat.size)}
                blob_parts.append(flat)
                offset += flat.size
        layers.append(record)

    manifest = {
        "format": "fga-mf",
        "version": 1,
        "name": name or arch_id,
        "input_shape": [1, 28, 28],
        "preprocessing": {"scale": 1.0 / 255.0, "offset": 0.0},
        "class_count": 10,
        "layers": layers,
    }
    (out_dir / "model.json").write_text(json.dumps(manifest, indent=1))
    np.concatenate(blob_parts).astype("<f4").tofile(out_dir / "model.bin")

    data_dir = Path(data_dir if data_dir is not None else checkpoint["data_dir"])
    _, _, test_images, _ = load_split(data_dir)
    transcript = _probe_transcript(model, test_images)
    with open(out_dir / "transcript.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "argmax", "max_probability"])
        for sample_id, argmax, probability in transcript:
            writer.writerow([sample_id, argmax, f"{probability:.8f}"])

    meta = {
        "arch": arch_id,
        "seed": checkpoint["seed"],
        "epochs": checkpoint["epochs"],
        "test_accuracy": checkpoint["test_accuracy"],
        "fold": checkpoint.get("fold"),
        "torch_version": checkpoint.get("torch_version"),
        "data_dir": str(data_dir),
        "blob_floats": offset,
    }
    (out_dir / "training_meta.json").write_text(json.dumps(meta, indent=1))
    return meta


def read_transcript(path: str | Path) -> list[tuple[str, int, float]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            (row["sample_id"], int(row["argmax"]), float(row["max_probability"]))
            for row in reader
        ]


def verify_bundle(bundle_dir: str | Path) -> dict:
    """Self-check of blob extents and transcript shape; raises on problems."""
    bundle_dir = Path(bundle_dir)
    manifest = json.loads((bundle_dir / "model.json").read_text())
    if manifest.get("format") != "fga-mf" or manifest.get("version") != 1:
        raise ValueError("manifest is not FGA-MF v1")
    blob = np.fromfile(bundle_dir / "model.bin", dtype="<f4")
    declared = 0
    for layer in manifest["layers"]:
        if layer["kind"] == "dropout":
            raise ValueError(f"layer {layer['name']} was not folded out")
        for key in ("weights", "bias"):
            if key in layer:
                ref = layer[key]
                if ref["offset"] + ref["count"] > blob.size:
                    raise ValueError(
                        f"layer {layer['name']} {key} overruns the blob"
                    )
                declared += ref["count"]
    if declared != blob.size:
        raise ValueError(
            f"blob holds {blob.size} floats but the manifest references {declared}"
        )
    transcript = read_transcript(bundle_dir / "transcript.csv")
    if len(transcript) != PROBE_SIZE:
        raise ValueError(f"transcript has {len(transcript)} rows, expected {PROBE_SIZE}")
    meta = json.loads((bundle_dir / "training_meta.json").read_text())
    return {
        "layers": len(manifest["layers"]),
        "blob_floats": int(blob.size),
        "probe_rows": len(transcript),
        "test_accuracy": meta.get("test_accuracy"),
    }
