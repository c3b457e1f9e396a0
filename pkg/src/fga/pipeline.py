"""Experiment orchestration: the analysis pipeline (predict, filter
misclassified training inputs, per-feature per-layer trees, rule selection,
metrics), the k-fold retraining study, and the exhaustive feature-combination
sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    FeatureSpec,
    LabeledDataset,
    confidence_filter,
    enumerate_feature_combos,
    kfold,
    load_idx,
    load_patch_dir,
)
from .errors import ConfigurationError, FgaError, InvariantViolation
from .inference import ActivationMatrix, Model, load_model, predict_dataset
from .rules import (
    Rule,
    RuleMetrics,
    evaluate_rule,
    extract_pure_rules,
    select_across_layers,
    select_top_rule,
)
from .tree import TreeParams, build_tree

METRIC_KEYS = ("R_tr", "P_te", "R_te", "Len")

STATUS_OK = "ok"
STATUS_NO_POSITIVES = "skipped: no positives"
STATUS_NO_RULE = "no rule"


@dataclass
class DatasetSource:
    """Where a dataset comes from: an IDX pair or a patch directory whose
    samples get (re)labeled by a model's confident predictions."""

    kind: str  # "idx" | "patch_dir"
    images: str | None = None
    labels: str | None = None
    path: str | None = None
    confidence_threshold: float | None = None

    @staticmethod
    def from_dict(data: dict, what: str) -> "DatasetSource":
        if not isinstance(data, dict) or "kind" not in data:
            raise ConfigurationError(f"{what}: dataset source needs a 'kind'")
        kind = data["kind"]
        if kind == "idx":
            allowed = {"kind", "images", "labels"}
            missing = {"images", "labels"} - set(data)
            if missing:
                raise ConfigurationError(f"{what}: idx source missing {sorted(missing)}")
        elif kind == "patch_dir":
            allowed = {"kind", "path", "confidence_threshold"}
            if "path" not in data:
                raise ConfigurationError(f"{what}: patch_dir source missing 'path'")
        else:
            raise ConfigurationError(f"{what}: unknown dataset kind {kind!r}")
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"{what}: unknown dataset keys {sorted(unknown)}")
        return DatasetSource(
            kind=kind,
            images=data.get("images"),
            labels=data.get("labels"),
            path=data.get("path"),
            confidence_threshold=data.get("confidence_threshold"),
        )


@dataclass
class ExperimentConfig:
    model_path: str
    train: DatasetSource
    test: DatasetSource
    capture_layers: list[str]
    features: list[FeatureSpec]
    labeling_model_path: str | None = None
    tree_params: TreeParams = field(default_factory=TreeParams)
    seed: int = 0
    output_dir: str = "out"
    include_test_misclassified: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.capture_layers:
            raise ConfigurationError("capture_layers must not be empty")
        if not self.features:
            raise ConfigurationError("features must not be empty")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigurationError("feature names must be unique")


@dataclass
class LayerCandidate:
    layer: str
    rule: Rule
    metrics: RuleMetrics


@dataclass
class FeatureReport:
    feature: FeatureSpec
    status: str
    layer: str | None = None
    metrics: RuleMetrics | None = None
    rule: Rule | None = None
    per_layer: list[LayerCandidate] = field(default_factory=list)


@dataclass
class KFoldReport:
    k: int
    fold_reports: list[list[FeatureReport]]
    fold_summaries: list[dict]
    average: dict
    max2min: dict


@dataclass
class SweepReport:
    min_size: int
    max_size: int
    rows: list[FeatureReport]  # sorted by train recall, descending


@dataclass
class PreparedAnalysis:
    """Predictions and activations computed once, reused across features."""

    model: Model
    capture_layers: list[str]
    tree_params: TreeParams
    train_class_domain: tuple[int, ...]
    train_labels: np.ndarray  # misclassification-filtered
    train_acts: dict[str, ActivationMatrix]  # misclassification-filtered
    test_labels: np.ndarray  # full test set
    test_acts: dict[str, ActivationMatrix]
    n_train_total: int
    n_train_removed: int


def _filter_matrix(matrix: ActivationMatrix, keep: np.ndarray) -> ActivationMatrix:
    ids = tuple(sid for sid, k in zip(matrix.sample_ids, keep) if k)
    return ActivationMatrix(matrix.layer_name, ids, matrix.values[keep])


def prepare_analysis(
    model: Model,
    train: LabeledDataset,
    test: LabeledDataset,
    capture_layers: list[str],
    tree_params: TreeParams,
    jobs: int = 1,
    include_test_misclassified: bool = True,
) -> PreparedAnalysis:
    unknown = set(capture_layers) - set(model.output_shapes)
    if unknown:
        raise ConfigurationError(
            f"capture layers {sorted(unknown)} not present in model "
            f"{model.name!r} (has {model.layer_names()})"
        )
    pred_train, acts_train = predict_dataset(model, train, capture_layers, jobs)
    pred_test, acts_test = predict_dataset(model, test, capture_layers, jobs)
    keep = pred_train.correct
    if not include_test_misclassified:
        keep_test = pred_test.correct
        acts_test = {n: _filter_matrix(m, keep_test) for n, m in acts_test.items()}
        test_labels = test.labels()[keep_test]
    else:
        test_labels = test.labels()
    return PreparedAnalysis(
        model=model,
        capture_layers=list(capture_layers),
        tree_params=tree_params,
        train_class_domain=train.class_domain,
        train_labels=train.labels()[keep],
        train_acts={name: _filter_matrix(m, keep) for name, m in acts_train.items()},
        test_labels=test_labels,
        test_acts=acts_test,
        n_train_total=len(train),
        n_train_removed=int(np.count_nonzero(~keep)),
    )


def analyze_feature(prep: PreparedAnalysis, feature: FeatureSpec) -> FeatureReport:
    """Trees on every capture layer for one feature, top rule per layer by
    support, metrics on filtered train and full test, best layer by train
    recall."""
    classes = np.array(feature.classes)
    presence_train = np.isin(prep.train_labels, classes)
    if not presence_train.any():
        return FeatureReport(feature, STATUS_NO_POSITIVES)
    presence_test = np.isin(prep.test_labels, classes)

    candidates: dict[str, tuple[Rule, RuleMetrics]] = {}
    per_layer: list[LayerCandidate] = []
    for layer in prep.capture_layers:
        tree = build_tree(
            prep.train_acts[layer], presence_train, prep.tree_params, feature.name
        )
        top = select_top_rule(extract_pure_rules(tree))
        if top is None:
            continue
        train_counts, train_precision, train_recall = evaluate_rule(
            top, prep.train_acts[layer], presence_train
        )
        if train_counts.fp != 0 or train_counts.tp != top.support_present:
            raise InvariantViolation(
                f"rule for {feature.name!r} at layer {layer!r} is not sound on its "
                f"own training rows: tp={train_counts.tp} fp={train_counts.fp} "
                f"support={top.support_present}"
            )
        test_counts, test_precision, test_recall = evaluate_rule(
            top, prep.test_acts[layer], presence_test
        )
        metrics = RuleMetrics(train_recall, test_precision, test_recall, len(top))
        candidates[layer] = (top, metrics)
        per_layer.append(LayerCandidate(layer, top, metrics))

    if not candidates:
        return FeatureReport(feature, STATUS_NO_RULE, per_layer=per_layer)
    layer, rule, metrics = select_across_layers(candidates)
    return FeatureReport(feature, STATUS_OK, layer, metrics, rule, per_layer)


def analyze(
    model: Model,
    train: LabeledDataset,
    test: LabeledDataset,
    capture_layers: list[str],
    features: list[FeatureSpec],
    tree_params: TreeParams = TreeParams(),
    jobs: int = 1,
    include_test_misclassified: bool = True,
) -> list[FeatureReport]:
    prep = prepare_analysis(
        model, train, test, capture_layers, tree_params, jobs,
        include_test_misclassified,
    )
    return [analyze_feature(prep, feature) for feature in features]


def summarize(reports: list[FeatureReport]) -> dict:
    """Average metric row over the features that produced a rule.

    Features with undefined test precision contribute to every column except
    P_te; their count is reported so tables can footnote them.
    """
    ok = [r for r in reports if r.status == STATUS_OK]
    defined_p = [r for r in ok if r.metrics.test_precision is not None]
    out = {
        "n_features": len(reports),
        "n_ok": len(ok),
        "n_skipped": sum(1 for r in reports if r.status == STATUS_NO_POSITIVES),
        "n_no_rule": sum(1 for r in reports if r.status == STATUS_NO_RULE),
        "n_precision_undefined": len(ok) - len(defined_p),
    }
    out["R_tr"] = (
        float(np.mean([r.metrics.train_recall for r in ok])) if ok else None
    )
    out["R_te"] = (
        float(np.mean([r.metrics.test_recall for r in ok])) if ok else None
    )
    out["P_te"] = (
        float(np.mean([r.metrics.test_precision for r in defined_p]))
        if defined_p
        else None
    )
    out["Len"] = float(np.mean([r.metrics.length for r in ok])) if ok else None
    return out


def _load_dataset(
    source: DatasetSource, model: Model, labeling_model: Model | None, role: str
) -> LabeledDataset:
    if source.kind == "idx":
        return load_idx(
            source.images, source.labels, model.preprocessing, role, id_prefix=f"{role}:"
        )
    samples = load_patch_dir(source.path, model.preprocessing, role)
    if source.confidence_threshold is not None:
        labeler = labeling_model if labeling_model is not None else model
        return confidence_filter(samples=samples, model=labeler,
                                 threshold=source.confidence_threshold, role=role)
    if any(s.class_label is None for s in samples):
        raise ConfigurationError(
            f"{role} patch directory has unlabeled samples; set a "
            "confidence_threshold so a model can label them"
        )
    domain = tuple(sorted({s.class_label for s in samples}))
    return LabeledDataset(samples, domain, role)


def run_fga(config: ExperimentConfig) -> list[FeatureReport]:
    """The full analysis pipeline for one model and one feature list."""
    model = load_model(config.model_path)
    labeling_model = (
        load_model(config.labeling_model_path) if config.labeling_model_path else None
    )
    train = _load_dataset(config.train, model, labeling_model, "train")
    test = _load_dataset(config.test, model, labeling_model, "test")
    return analyze(
        model,
        train,
        test,
        config.capture_layers,
        config.features,
        config.tree_params,
        config.jobs,
        config.include_test_misclassified,
    )


def aggregate_folds(fold_summaries: list[dict]) -> tuple[dict, dict]:
    """Overall average and max2min (max minus min) across per-fold averages.

    Metrics undefined in any fold stay undefined in both aggregates.
    """
    average: dict = {}
    max2min: dict = {}
    for key in METRIC_KEYS:
        values = [s[key] for s in fold_summaries]
        if any(v is None for v in values):
            average[key], max2min[key] = None, None
        else:
            average[key] = float(np.mean(values))
            max2min[key] = float(np.max(values) - np.min(values))
    return average, max2min


def run_kfold(config: ExperimentConfig, k: int) -> KFoldReport:
    """K experiments over a pooled train+test dataset: experiment i tests on
    fold i and trains on the rest, with a retrained model per fold supplied
    via a '{fold}' placeholder in the configured model path."""
    first_model = load_model(_fold_model_path(config.model_path, 0))
    labeling_model = (
        load_model(config.labeling_model_path) if config.labeling_model_path else None
    )
    train = _load_dataset(config.train, first_model, labeling_model, "train")
    test = _load_dataset(config.test, first_model, labeling_model, "test")
    pool = LabeledDataset(
        train.samples + test.samples,
        tuple(sorted(set(train.class_domain) | set(test.class_domain))),
        "train",
    )
    assignment = kfold(pool, k, config.seed)

    fold_reports, fold_summaries = [], []
    for fold in range(k):
        model_path = _fold_model_path(config.model_path, fold)
        if not Path(model_path).exists():
            raise ConfigurationError(
                f"fold {fold}: model file {model_path} does not exist"
            )
        model = load_model(model_path)
        test_ids = set(assignment.fold_ids(fold))
        fold_train = [s for s in pool.samples if s.id not in test_ids]
        fold_test = [s for s in pool.samples if s.id in test_ids]
        reports = analyze(
            model,
            LabeledDataset(fold_train, pool.class_domain, "train"),
            LabeledDataset(fold_test, pool.class_domain, "test"),
            config.capture_layers,
            config.features,
            config.tree_params,
            config.jobs,
            config.include_test_misclassified,
        )
        fold_reports.append(reports)
        fold_summaries.append(summarize(reports))
    average, max2min = aggregate_folds(fold_summaries)
    return KFoldReport(k, fold_reports, fold_summaries, average, max2min)


def _fold_model_path(template: str, fold: int) -> str:
    if "{fold}" not in template:
        raise ConfigurationError(
            "k-fold runs need a '{fold}' placeholder in the model path, "
            f"got {template!r}"
        )
    return template.format(fold=fold)


def _sweep_sort_key(report: FeatureReport):
    if report.status == STATUS_OK:
        return (0, -report.metrics.train_recall, report.feature.name)
    return (1, 0.0, report.feature.name)


def run_sweep(config: ExperimentConfig, min_size: int, max_size: int) -> SweepReport:
    """Replace the configured features with every class combination of the
    given sizes and rank the resulting top rules by train recall."""
    model = load_model(config.model_path)
    labeling_model = (
        load_model(config.labeling_model_path) if config.labeling_model_path else None
    )
    train = _load_dataset(config.train, model, labeling_model, "train")
    test = _load_dataset(config.test, model, labeling_model, "test")
    combos = enumerate_feature_combos(train.class_domain, min_size, max_size)
    prep = prepare_analysis(
        model, train, test, config.capture_layers, config.tree_params, config.jobs,
        config.include_test_misclassified,
    )
    rows = []
    for combo in combos:
        try:
            rows.append(analyze_feature(prep, combo))
        except FgaError as exc:  # one bad combination must not kill the sweep
            rows.append(FeatureReport(combo, f"error: {exc}"))
    rows.sort(key=_sweep_sort_key)
    return SweepReport(min_size, max_size, rows)
