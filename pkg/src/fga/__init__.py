"""Feature-guided analysis: learn decision rules over neuron activations of a
trained feedforward network, one tree per human-defined feature, and report
rule precision, recall, and length."""

__version__ = "0.1.0"

from .dataset import (
    FeatureLabeling,
    FeatureSpec,
    FoldAssignment,
    LabeledDataset,
    LabeledSample,
    confidence_filter,
    enumerate_feature_combos,
    extract_patches,
    kfold,
    label_features,
    load_feature_file,
    load_idx,
    load_patch_dir,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataFormatError,
    DegenerateRuleError,
    FgaError,
    InvariantViolation,
    ModelValidationError,
    TruncationError,
)
from .inference import (
    ActivationMatrix,
    LayerSpec,
    Model,
    NeuronRef,
    Preprocessing,
    eval_layer,
    forward,
    load_model,
    predict_dataset,
)
from .pipeline import (
    DatasetSource,
    ExperimentConfig,
    FeatureReport,
    KFoldReport,
    SweepReport,
    analyze,
    run_fga,
    run_kfold,
    run_sweep,
    summarize,
)
from .rules import (
    ConfusionCounts,
    Rule,
    RuleAtom,
    RuleMetrics,
    canonicalize,
    evaluate_rule,
    extract_pure_rules,
    render_rule,
    select_across_layers,
    select_top_rule,
)
from .tree import (
    DecisionTree,
    Leaf,
    Split,
    TreeParams,
    build_tree,
    find_best_split,
    load_tree,
    route,
    save_tree,
)
