"""Acceptance for the exporter: round-trip agreement with the analyzer engine
and a desk-scale benchmark run over the fourteen reference features.

Both tests exercise the analyzer only through its public surfaces: the
FGA-MF/IDX file formats, the library API, and the installed CLI.
"""

from __future__ import annotations

import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from fga_exporter.data import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS
from fga_exporter.digits import write_dataset
from fga_exporter.export import export_bundle, read_transcript
from fga_exporter.train import fold_assignment, train_reference_model


def _report(name: str, started: float, budget_s: float) -> None:
    elapsed = time.monotonic() - started
    print(f"PASS {name} ({elapsed:.1f}s, budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{name} exceeded its runtime budget"


def test_export_round_trip(tmp_path):
    """The analyzer engine reproduces the trained network's argmax on all 100
    probe samples, with probabilities within 1e-4 absolute."""
    started = time.monotonic()
    import fga

    data_dir = tmp_path / "data"
    write_dataset(data_dir, n_train=8000, n_test=600, seed=7)
    train_reference_model("lenet5", data_dir, seed=7, epochs=10,
                          out_dir=tmp_path / "ckpt", min_accuracy=0.9)
    export_bundle(tmp_path / "ckpt" / "lenet5.pt", tmp_path / "bundle")

    model = fga.load_model(tmp_path / "bundle" / "model.json")
    test = fga.load_idx(data_dir / TEST_IMAGES, data_dir / TEST_LABELS,
                        model.preprocessing, role="test")
    by_id = {sample.id: sample for sample in test.samples}
    transcript = read_transcript(tmp_path / "bundle" / "transcript.csv")
    assert len(transcript) == 100
    worst_gap = 0.0
    for sample_id, expected_argmax, expected_probability in transcript:
        scores, _ = fga.forward(model, by_id[sample_id].pixels)
        assert int(np.argmax(scores)) == expected_argmax, f"sample {sample_id}"
        gap = abs(float(scores[expected_argmax]) - expected_probability)
        worst_gap = max(worst_gap, gap)
        assert gap <= 1e-4, f"sample {sample_id}: probability off by {gap}"
    print(f"probe agreement 100/100, worst probability gap {worst_gap:.2e}")
    _report("export round-trip", started, 600)


def test_fold_protocol_matches_analyzer(tmp_path):
    """The exporter's fold assignment and the analyzer's kfold agree on the
    pooled (train order, then test order) dataset for the same seed."""
    started = time.monotonic()
    import fga

    data_dir = tmp_path / "data"
    write_dataset(data_dir, n_train=130, n_test=44, seed=3)
    train = fga.load_idx(data_dir / TRAIN_IMAGES, data_dir / TRAIN_LABELS,
                         role="train", id_prefix="train:")
    test = fga.load_idx(data_dir / TEST_IMAGES, data_dir / TEST_LABELS,
                        role="test", id_prefix="test:")
    pool = fga.LabeledDataset(train.samples + test.samples,
                              tuple(range(10)), "train")
    for k, seed in ((5, 0), (7, 11)):
        theirs = fga.kfold(pool, k, seed)
        ours = fold_assignment(len(pool.samples), k, seed)
        for position, sample in enumerate(pool.samples):
            assert theirs.assignment[sample.id] == ours[position]
    _report("fold protocol agreement", started, 60)


@pytest.mark.slow
def test_desk_scale_benchmark(tmp_path):
    """A freshly trained LeNet-class model at >= 98.5% test accuracy, run
    through the analyze pipeline with the fourteen reference features, must
    reach average test precision >= 98.5% and average test recall >= 65%,
    with single-digit features outperforming the circle feature on recall."""
    started = time.monotonic()
    data_dir = tmp_path / "data"
    write_dataset(data_dir, n_train=20000, n_test=4000, seed=0)
    results = train_reference_model("lenet5", data_dir, seed=0, epochs=8,
                                    out_dir=tmp_path / "ckpt",
                                    min_accuracy=0.985)
    accuracy = results[0]["test_accuracy"]
    assert accuracy >= 0.985
    export_bundle(tmp_path / "ckpt" / "lenet5.pt", tmp_path / "bundle")

    out_dir = tmp_path / "out"
    config = {
        "model": str(tmp_path / "bundle" / "model.json"),
        "train": {"kind": "idx", "images": str(data_dir / TRAIN_IMAGES),
                  "labels": str(data_dir / TRAIN_LABELS)},
        "test": {"kind": "idx", "images": str(data_dir / TEST_IMAGES),
                 "labels": str(data_dir / TEST_LABELS)},
        "capture_layers": ["dense1", "dense2"],
        "features": str(data_dir / "features.json"),
        "output_dir": str(out_dir),
        "seed": 0,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    proc = subprocess.run(
        [sys.executable, "-m", "fga.cli", "analyze", "--config", str(config_path)],
        capture_output=True, text=True, timeout=1500,
    )
    assert proc.returncode == 0, proc.stderr

    with open(out_dir / "analyze.csv", newline="") as f:
        rows = {row["feature"]: row for row in csv.DictReader(f)}
    average = rows["Average"]
    avg_precision = float(average["P_te"])
    avg_recall = float(average["R_te"])
    single_recalls = [float(rows[f"Digit {d}"]["R_te"]) for d in range(10)]
    circle_recall = float(rows["Circle"]["R_te"])
    print(
        f"accuracy={accuracy:.4f} avg P_te={avg_precision:.2f} "
        f"avg R_te={avg_recall:.2f} single-digit mean R_te="
        f"{np.mean(single_recalls):.2f} circle R_te={circle_recall:.2f}"
    )
    assert avg_precision >= 98.5
    assert avg_recall >= 65.0
    assert float(np.mean(single_recalls)) > circle_recall
    _report("desk-scale benchmark", started, 1800)
