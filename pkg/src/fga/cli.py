"""Command-line front end: analyze / kfold / sweep / patchify / inspect-model.

Configuration is a single JSON document; ``--set dotted.key=value`` overrides
are applied after the file. Progress goes to stderr, machine-readable
summaries to stdout. Exit codes: 0 success, 1 configuration error, 2
data/format error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import FeatureSpec, iter_patches, load_feature_file
from .errors import ConfigurationError, DataFormatError, FgaError
from .inference import load_model
from .pipeline import (
    STATUS_OK,
    DatasetSource,
    ExperimentConfig,
    FeatureReport,
    KFoldReport,
    run_fga,
    run_kfold,
    run_sweep,
    summarize,
)
from .rules import render_rule, rule_to_dict
from .tree import TreeParams

log = logging.getLogger("fga")

REPORT_COLUMNS = ("feature", "layer", "R_tr", "P_te", "R_te", "Len", "rule")

_CONFIG_KEYS = {
    "model": True,
    "train": True,
    "test": True,
    "capture_layers": True,
    "features": True,
    "labeling_model": False,
    "tree": False,
    "seed": False,
    "output_dir": False,
    "include_test_misclassified": False,
    "jobs": False,
}
_TREE_KEYS = {"max_depth", "min_samples_split"}


def _reject_unknown(keys, allowed, where: str) -> None:
    for key in keys:
        if key not in allowed:
            hint = difflib.get_close_matches(key, allowed, n=1)
            suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigurationError(f"{where}: unknown key {key!r}{suggestion}")


def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    dotted, text = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    target = raw
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigurationError(f"override {dotted!r} descends into a non-object")
    target[parts[-1]] = value


def parse_config(path: str | Path, overrides: list[str] = ()) -> tuple[ExperimentConfig, dict]:
    """Validate a config file into an ExperimentConfig; returns the raw
    (override-applied) document too, for the run manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    for assignment in overrides:
        _apply_override(raw, assignment)

    _reject_unknown(raw, _CONFIG_KEYS, str(path))
    missing = [k for k, required in _CONFIG_KEYS.items() if required and k not in raw]
    if missing:
        raise ConfigurationError(f"{path}: missing required keys {missing}")

    features = raw["features"]
    if isinstance(features, str):
        feature_specs = load_feature_file(Path(path).parent / features)
    elif isinstance(features, list):
        feature_specs = []
        for entry in features:
            if not isinstance(entry, dict) or set(entry) != {"name", "classes"}:
                raise ConfigurationError(
                    f"{path}: each feature needs exactly name and classes, got {entry!r}"
                )
            feature_specs.append(
                FeatureSpec(str(entry["name"]), tuple(int(c) for c in entry["classes"]))
            )
    else:
        raise ConfigurationError(f"{path}: features must be a list or a file path")

    tree_raw = raw.get("tree", {})
    _reject_unknown(tree_raw, _TREE_KEYS, f"{path}: tree")
    tree_params = TreeParams(
        max_depth=tree_raw.get("max_depth"),
        min_samples_split=int(tree_raw.get("min_samples_split", 2)),
    )

    config = ExperimentConfig(
        model_path=str(raw["model"]),
        labeling_model_path=raw.get("labeling_model"),
        train=DatasetSource.from_dict(raw["train"], f"{path}: train"),
        test=DatasetSource.from_dict(raw["test"], f"{path}: test"),
        capture_layers=[str(l) for l in raw["capture_layers"]],
        features=feature_specs,
        tree_params=tree_params,
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "out")),
        include_test_misclassified=bool(raw.get("include_test_misclassified", True)),
        jobs=int(raw.get("jobs", 0)) or (os.cpu_count() or 1),
    )
    return config, raw


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _fmt(value, decimals: int = 2) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, int):
        return str(value)
    return f"{value:.{decimals}f}"


def _feature_row(report: FeatureReport, full_precision: bool) -> list[str]:
    if report.status != STATUS_OK:
        return [report.feature.name, "", "", "", "", "", report.status]
    m = report.metrics
    rule_text = render_rule(
        report.rule, report.feature.classes, decimals=17 if full_precision else 2
    )
    return [
        report.feature.name,
        report.layer,
        _fmt(m.train_recall),
        _fmt(m.test_precision),
        _fmt(m.test_recall),
        str(m.length),
        rule_text,
    ]


def _average_row(reports: list[FeatureReport]) -> list[str]:
    s = summarize(reports)
    note = (
        f"precision averaged over {s['n_ok'] - s['n_precision_undefined']} features "
        "(undefined excluded)"
        if s["n_precision_undefined"]
        else ""
    )
    return [
        "Average",
        "",
        _fmt(s["R_tr"]),
        _fmt(s["P_te"]),
        _fmt(s["R_te"]),
        _fmt(s["Len"], 1),
        note,
    ]


def _csv_text(rows: list[list[str]]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _md_table(rows: list[list[str]]) -> str:
    header, body = rows[0], rows[1:]
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in body:
        lines.append("| " + " | ".join(cell.replace("|", "\\|") for cell in row) + " |")
    return "\n".join(lines) + "\n"


def emit_reports(
    reports: list[FeatureReport],
    output_dir: str | Path,
    formats: tuple[str, ...] = ("csv", "md"),
    basename: str = "analyze",
    manifest: dict | None = None,
) -> list[Path]:
    """Write the feature table as CSV (machine, full-precision rules) and
    Markdown (human, 2-decimal rules), atomically, plus a rules JSON file and
    the run manifest."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_rows = [list(REPORT_COLUMNS)]
    md_rows = [list(REPORT_COLUMNS)]
    for report in reports:
        csv_rows.append(_feature_row(report, full_precision=True))
        md_rows.append(_feature_row(report, full_precision=False))
    csv_rows.append(_average_row(reports))
    md_rows.append(_average_row(reports))

    if "csv" in formats:
        path = output_dir / f"{basename}.csv"
        _atomic_write(path, _csv_text(csv_rows))
        written.append(path)
    if "md" in formats:
        path = output_dir / f"{basename}.md"
        _atomic_write(path, _md_table(md_rows))
        written.append(path)

    # machine-readable rules: one spec-shaped entry per feature that produced
    # a rule, carrying the runner-up layers under "candidates"
    rules_doc = []
    for report in reports:
        if report.status != STATUS_OK:
            continue
        entry = rule_to_dict(report.rule, report.metrics)
        entry["candidates"] = [
            rule_to_dict(c.rule, c.metrics) for c in report.per_layer
        ]
        rules_doc.append(entry)
    rules_path = output_dir / f"{basename}_rules.json"
    _atomic_write(rules_path, json.dumps(rules_doc, indent=1, sort_keys=True))
    written.append(rules_path)

    if manifest is not None:
        manifest_path = output_dir / f"{basename}_manifest.json"
        _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True))
        written.append(manifest_path)
    return written


def _emit_plot(reports: list[FeatureReport], output_dir: Path, basename: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in reports if r.status == STATUS_OK]
    names = [r.feature.name for r in ok]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(ok) + 2), 4))
    x = range(len(ok))
    width = 0.27
    series = [
        ("train recall", [r.metrics.train_recall for r in ok]),
        ("test precision", [r.metrics.test_precision for r in ok]),
        ("test recall", [r.metrics.test_recall for r in ok]),
    ]
    for i, (label, values) in enumerate(series):
        offsets = [xi + (i - 1) * width for xi in x]
        ax.bar(offsets, [v if v is not None else 0.0 for v in values], width, label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend()
    fig.tight_layout()
    path = output_dir / f"{basename}_metrics.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def _check_output_dir(output_dir: str | Path) -> None:
    """Fail on unwritable output locations before any heavy computation."""
    path = Path(output_dir)
    path.mkdir(parents=True, exist_ok=True)
    probe = tempfile.NamedTemporaryFile(dir=path, prefix=".fga-write-check", delete=True)
    probe.close()


def _manifest(command: str, raw_config: dict, extra: dict | None = None) -> dict:
    doc = {"tool": "fga", "version": __version__, "command": command, "config": raw_config}
    if extra:
        doc.update(extra)
    return doc


def _print_summary(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _cmd_analyze(args) -> int:
    config, raw = parse_config(args.config, args.set or [])
    if args.jobs:
        config.jobs = args.jobs
    _check_output_dir(config.output_dir)
    log.info("running analyze with %d features", len(config.features))
    reports = run_fga(config)
    written = emit_reports(
        reports, config.output_dir, manifest=_manifest("analyze", raw)
    )
    if args.plots:
        written.append(_emit_plot(reports, Path(config.output_dir), "analyze"))
    _print_summary(
        {
            "command": "analyze",
            "outputs": [str(p) for p in written],
            "summary": summarize(reports),
        }
    )
    return 0


def _kfold_rows(report: KFoldReport) -> list[list[str]]:
    rows = [["experiment", "R_tr", "P_te", "R_te", "Len"]]
    for fold, s in enumerate(report.fold_summaries):
        rows.append(
            [str(fold), _fmt(s["R_tr"]), _fmt(s["P_te"]), _fmt(s["R_te"]), _fmt(s["Len"], 1)]
        )
    a, m = report.average, report.max2min
    rows.append(
        ["Average", _fmt(a["R_tr"]), _fmt(a["P_te"]), _fmt(a["R_te"]), _fmt(a["Len"], 1)]
    )
    rows.append(
        ["max2min", _fmt(m["R_tr"]), _fmt(m["P_te"]), _fmt(m["R_te"]), _fmt(m["Len"], 1)]
    )
    return rows


def _cmd_kfold(args) -> int:
    config, raw = parse_config(args.config, args.set or [])
    if args.jobs:
        config.jobs = args.jobs
    _check_output_dir(config.output_dir)
    report = run_kfold(config, args.k)
    output_dir = Path(config.output_dir)
    written = []
    for fold, fold_reports in enumerate(report.fold_reports):
        written.extend(
            emit_reports(fold_reports, output_dir / f"fold_{fold}", basename="analyze")
        )
    rows = _kfold_rows(report)
    csv_path = output_dir / "kfold.csv"
    _atomic_write(csv_path, _csv_text(rows))
    md_path = output_dir / "kfold.md"
    _atomic_write(md_path, _md_table(rows))
    manifest_path = output_dir / "kfold_manifest.json"
    _atomic_write(
        manifest_path,
        json.dumps(_manifest("kfold", raw, {"k": args.k}), indent=1, sort_keys=True),
    )
    written.extend([csv_path, md_path, manifest_path])
    _print_summary(
        {
            "command": "kfold",
            "k": args.k,
            "outputs": [str(p) for p in written],
            "average": report.average,
            "max2min": report.max2min,
        }
    )
    return 0


def _cmd_sweep(args) -> int:
    config, raw = parse_config(args.config, args.set or [])
    if args.jobs:
        config.jobs = args.jobs
    _check_output_dir(config.output_dir)
    report = run_sweep(config, args.min, args.max)
    written = emit_reports(
        report.rows,
        config.output_dir,
        basename="sweep",
        manifest=_manifest(
            "sweep",
            raw,
            {
                "min_size": args.min,
                "max_size": args.max,
                "note": "each combination runs the full multi-layer pipeline",
            },
        ),
    )
    _print_summary(
        {
            "command": "sweep",
            "combinations": len(report.rows),
            "outputs": [str(p) for p in written],
        }
    )
    return 0


def _cmd_patchify(args) -> int:
    from PIL import Image

    image_dir = Path(args.image_dir)
    if not image_dir.is_dir():
        raise ConfigurationError(f"--image-dir {image_dir} is not a directory")
    paths = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise DataFormatError(f"{image_dir}: no .png/.jpg images found")
    out_dir = Path(args.out)
    _check_output_dir(out_dir)
    manifest_rows = [["id", "class_label"]]
    total = 0
    for path in paths:
        image = np.asarray(Image.open(path))
        if image.ndim == 3:  # patch over spatial dims, keep channels
            image = np.ascontiguousarray(image.transpose(2, 0, 1))
        for row, col, patch in iter_patches(image, args.size, args.stride):
            sid = f"{path.stem}:{row}:{col}"
            if patch.ndim == 3:
                patch = patch.transpose(1, 2, 0)
            Image.fromarray(patch).save(out_dir / (sid.replace(":", "_") + ".png"))
            manifest_rows.append([sid, ""])
            total += 1
    _atomic_write(out_dir / "manifest.csv", _csv_text(manifest_rows))
    _print_summary(
        {
            "command": "patchify",
            "images": len(paths),
            "patches": total,
            "out": str(out_dir),
        }
    )
    return 0


def _cmd_inspect_model(args) -> int:
    model = load_model(args.model)
    rows = [["layer", "kind", "params", "output_shape", "flattened"]]
    for spec in model.layers:
        shape = model.output_shapes[spec.name]
        rows.append(
            [
                spec.name,
                spec.kind,
                json.dumps(spec.params, sort_keys=True) if spec.params else "",
                "x".join(str(d) for d in shape),
                str(int(np.prod(shape))),
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    print(
        f"model={model.name} input={'x'.join(str(d) for d in model.input_shape)} "
        f"classes={model.class_count} "
        f"preprocessing=x*{model.preprocessing.scale:g}+{model.preprocessing.offset:g}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fga",
        description="Extract and evaluate feature rules from neuron activations.",
    )
    parser.add_argument("--version", action="version", version=f"fga {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config entry by dotted path (repeatable)",
        )
        p.add_argument("--jobs", type=int, default=0, help="worker threads")
        p.add_argument("--plots", action="store_true", help="also write PNG charts")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("analyze", help="run the rule-extraction pipeline")
    common(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("kfold", help="k-fold study over retrained models")
    common(p)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=_cmd_kfold)

    p = sub.add_parser("sweep", help="exhaustive feature-combination sweep")
    common(p)
    p.add_argument("--min", type=int, required=True, help="smallest combination size")
    p.add_argument("--max", type=int, required=True, help="largest combination size")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("patchify", help="cut images into overlapping patches")
    p.add_argument("--image-dir", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=_cmd_patchify)

    p = sub.add_parser("inspect-model", help="print the layer table of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=_cmd_inspect_model)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except FgaError as exc:
        print(f"fga: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fga: i/o error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violations and bugs
        print(f"fga: internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
