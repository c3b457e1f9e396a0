"""Rule extraction from pure tree leaves, rule selection, and rule evaluation.

A rule is a conjunction of neuron-threshold atoms (the root-to-leaf path of a
pure present leaf) implying feature presence. Reported rule length is always
the raw atom count; canonicalize() offers a merged-interval view without
changing satisfaction semantics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateRuleError
from .inference import ActivationMatrix, NeuronRef
from .tree import DecisionTree, Leaf, Split


class RuleAtom(NamedTuple):
    neuron: NeuronRef
    cmp: str  # "<=" | ">"
    threshold: float


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class Rule:
    atoms: tuple[RuleAtom, ...]  # root-to-leaf order
    feature_name: str
    layer_name: str
    support_present: int
    support_absent: int = 0

    def __post_init__(self):
        if not self.atoms:
            raise ContractViolation("a rule needs at least one atom")
        if self.support_absent != 0:
            raise ContractViolation("rules come from pure leaves: support_absent must be 0")

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass
class RuleMetrics:
    train_recall: float | None
    test_precision: float | None  # None renders as "n/a": no test row satisfied the rule
    test_recall: float | None
    length: int


def _atom_sort_key(atom: RuleAtom):
    return (atom.neuron.layer, atom.neuron.index, atom.cmp, atom.threshold)


def extract_pure_rules(tree: DecisionTree) -> list[Rule]:
    """One rule per pure present leaf (count_present > 0, count_absent == 0),
    in left-to-right leaf order. Impure and absent-only leaves yield nothing."""
    rules: list[Rule] = []
    stack: list[tuple[object, tuple[RuleAtom, ...]]] = [(tree.root, ())]
    while stack:
        node, path = stack.pop()
        if isinstance(node, Leaf):
            # a depth-0 tree has no path, hence no precondition to assert
            if node.count_present > 0 and node.count_absent == 0 and path:
                rules.append(
                    Rule(path, tree.feature_name, tree.layer_name, node.count_present)
                )
            continue
        assert isinstance(node, Split)
        # push right first so the left subtree pops (and reports) first
        stack.append(
            (node.right, path + (RuleAtom(node.neuron, ">", node.threshold),))
        )
        stack.append(
            (node.left, path + (RuleAtom(node.neuron, "<=", node.threshold),))
        )
    return rules


def select_top_rule(rules: Sequence[Rule]) -> Optional[Rule]:
    """The rule with the most supporting training rows; ties go to the
    shorter rule, then the lexicographically smaller atom sequence."""
    if not rules:
        return None
    features = {r.feature_name for r in rules}
    if len(features) > 1:
        raise ContractViolation(
            f"rules for multiple features passed to selection: {sorted(features)}"
        )
    return min(
        rules,
        key=lambda r: (
            -r.support_present,
            len(r.atoms),
            tuple(_atom_sort_key(a) for a in r.atoms),
        ),
    )


def satisfies(rule: Rule, activations: ActivationMatrix) -> np.ndarray:
    """Boolean satisfaction per row: every atom must hold."""
    if activations.layer_name != rule.layer_name:
        raise ContractViolation(
            f"rule over layer {rule.layer_name!r} evaluated on activations of "
            f"layer {activations.layer_name!r}"
        )
    values = activations.values
    sat = np.ones(values.shape[0], dtype=bool)
    for atom in rule.atoms:
        if atom.neuron.index >= values.shape[1]:
            raise ContractViolation(
                f"atom references neuron {atom.neuron.index}, matrix has "
                f"{values.shape[1]} columns"
            )
        col = values[:, atom.neuron.index]
        sat &= (col <= atom.threshold) if atom.cmp == "<=" else (col > atom.threshold)
    return sat


def evaluate_rule(
    rule: Rule, activations: ActivationMatrix, presence: np.ndarray
) -> tuple[ConfusionCounts, float | None, float | None]:
    """Confusion counts plus precision/recall percentages.

    Precision is None (undefined, distinct from 0) when no row satisfies the
    rule; recall is None when no row shows the feature.
    """
    presence = np.asarray(presence, dtype=bool)
    if presence.size != activations.values.shape[0]:
        raise ContractViolation(
            f"{activations.values.shape[0]} rows vs {presence.size} presence flags"
        )
    sat = satisfies(rule, activations)
    tp = int(np.count_nonzero(sat & presence))
    fp = int(np.count_nonzero(sat & ~presence))
    fn = int(np.count_nonzero(~sat & presence))
    tn = int(presence.size - tp - fp - fn)
    counts = ConfusionCounts(tp, fp, fn, tn)
    precision = None if tp + fp == 0 else 100.0 * tp / (tp + fp)
    recall = None if tp + fn == 0 else 100.0 * tp / (tp + fn)
    return counts, precision, recall


def select_across_layers(
    per_layer_best: dict[str, tuple[Rule, RuleMetrics]]
) -> tuple[str, Rule, RuleMetrics]:
    """Entry with the highest train recall; ties go to the layer listed
    earlier in the capture order (dict insertion order)."""
    if not per_layer_best:
        raise ContractViolation("no per-layer rules to select from")
    best = None
    for layer, (rule, metrics) in per_layer_best.items():
        if metrics.train_recall is None:
            raise ContractViolation(f"layer {layer!r} candidate has no train recall")
        if best is None or metrics.train_recall > best[2].train_recall:
            best = (layer, rule, metrics)
    return best


def canonicalize(rule: Rule) -> Rule:
    """Merge atoms on the same neuron into their tightest interval bounds.

    The satisfying set is unchanged. Raises DegenerateRuleError when atoms
    contradict (empty interval). Reported lengths elsewhere always use the
    raw rule, never this view.
    """
    lower: dict[NeuronRef, float] = {}  # value > lower
    upper: dict[NeuronRef, float] = {}  # value <= upper
    order: list[NeuronRef] = []
    for atom in rule.atoms:
        if atom.neuron not in order:
            order.append(atom.neuron)
        if atom.cmp == ">":
            if atom.neuron not in lower or atom.threshold > lower[atom.neuron]:
                lower[atom.neuron] = atom.threshold
        else:
            if atom.neuron not in upper or atom.threshold < upper[atom.neuron]:
                upper[atom.neuron] = atom.threshold
    atoms: list[RuleAtom] = []
    for neuron in order:
        lo, up = lower.get(neuron), upper.get(neuron)
        if lo is not None and up is not None and lo >= up:
            raise DegenerateRuleError(
                f"rule for {rule.feature_name!r} contradicts itself on neuron "
                f"{neuron}: > {lo} and <= {up}"
            )
        if lo is not None:
            atoms.append(RuleAtom(neuron, ">", lo))
        if up is not None:
            atoms.append(RuleAtom(neuron, "<=", up))
    return Rule(
        tuple(atoms),
        rule.feature_name,
        rule.layer_name,
        rule.support_present,
        rule.support_absent,
    )


def render_rule(rule: Rule, classes: Sequence[int] | None = None, decimals: int = 2) -> str:
    """Human-readable rendering: (N_{layer,idx} ≤ v ∧ …) ⇒ {classes}."""
    parts = [
        f"N_{{{a.neuron.layer},{a.neuron.index}}} "
        f"{'≤' if a.cmp == '<=' else '>'} {a.threshold:.{decimals}f}"
        for a in rule.atoms
    ]
    post = (
        "{" + ",".join(str(c) for c in classes) + "}"
        if classes is not None
        else rule.feature_name
    )
    return "(" + " ∧ ".join(parts) + ") ⇒ " + post


def rule_to_dict(rule: Rule, metrics: RuleMetrics | None = None) -> dict:
    out = {
        "feature": rule.feature_name,
        "layer": rule.layer_name,
        "atoms": [
            {
                "layer": a.neuron.layer,
                "index": a.neuron.index,
                "cmp": a.cmp,
                "threshold": a.threshold,
            }
            for a in rule.atoms
        ],
        "support": rule.support_present,
    }
    if metrics is not None:
        out["metrics"] = {
            "train_recall": metrics.train_recall,
            "test_precision": metrics.test_precision,
            "test_recall": metrics.test_recall,
            "length": metrics.length,
        }
    return out


def rule_from_dict(data: dict) -> Rule:
    atoms = tuple(
        RuleAtom(NeuronRef(a["layer"], int(a["index"])), a["cmp"], float(a["threshold"]))
        for a in data["atoms"]
    )
    return Rule(atoms, data["feature"], data["layer"], int(data["support"]))


def save_rules(entries: Sequence[tuple[Rule, RuleMetrics | None]], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([rule_to_dict(rule, metrics) for rule, metrics in entries], indent=1)
    )


def load_rules(path: str | Path) -> list[Rule]:
    return [rule_from_dict(entry) for entry in json.loads(Path(path).read_text())]
