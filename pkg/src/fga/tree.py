"""Binary decision trees over activation matrices with binary presence labels.

Splits minimize weighted Gini impurity over midpoint thresholds between
consecutive distinct column values; ties break on lowest neuron index, then
lowest threshold, so identical inputs always grow identical trees. Trees are
grown to purity by default (no depth cap), and rows that are identical but
carry conflicting labels terminate as impure leaves.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError, ContractViolation, InvariantViolation
from .inference import ActivationMatrix, NeuronRef


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_split: int = 2

    def __post_init__(self):
        if self.min_samples_split < 2:
            raise ConfigurationError(
                f"min_samples_split must be >= 2, got {self.min_samples_split}"
            )
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigurationError(f"max_depth must be positive, got {self.max_depth}")


@dataclass
class Leaf:
    count_present: int
    count_absent: int


@dataclass
class Split:
    neuron: NeuronRef
    threshold: float
    left: TreeNode  # rows with value <= threshold
    right: TreeNode  # rows with value > threshold


TreeNode = Union[Leaf, Split]


@dataclass
class DecisionTree:
    root: TreeNode
    feature_name: str
    layer_name: str
    n_train_rows: int
    width: int
    params: TreeParams

    def leaves(self) -> list[Leaf]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(node)
            else:
                stack.extend([node.right, node.left])
        return out


def find_best_split(
    column: np.ndarray, labels: np.ndarray
) -> Optional[tuple[float, float]]:
    """Best (threshold, weighted Gini) for one column, or None if the column
    is constant.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values; among equal-impurity candidates the lowest threshold wins.
    """
    column = np.asarray(column, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    m = column.size
    if m < 2:
        raise ContractViolation(f"need at least 2 rows to split, got {m}")
    if labels.size != m:
        raise ContractViolation(f"{m} values vs {labels.size} labels")

    order = np.argsort(column, kind="stable")
    v = column[order]
    y = labels[order]
    boundaries = np.nonzero(v[1:] != v[:-1])[0] + 1
    if boundaries.size == 0:
        return None

    present_prefix = np.cumsum(y)
    total_present = float(present_prefix[-1])
    n_left = boundaries.astype(np.float64)
    p_left = present_prefix[boundaries - 1].astype(np.float64)
    n_right = m - n_left
    p_right = total_present - p_left
    gini_left = 1.0 - (p_left / n_left) ** 2 - ((n_left - p_left) / n_left) ** 2
    gini_right = 1.0 - (p_right / n_right) ** 2 - ((n_right - p_right) / n_right) ** 2
    weighted = (n_left / m) * gini_left + (n_right / m) * gini_right

    best = int(np.argmin(weighted))  # thresholds ascend, so first min = lowest
    b = boundaries[best]
    threshold = (v[b - 1] + v[b]) / 2.0
    return float(threshold), float(weighted[best])


def _best_split_all_columns(x: np.ndarray, y: np.ndarray):
    """Lowest (gini, column, threshold) over all columns, or None."""
    best = None
    for j in range(x.shape[1]):
        found = find_best_split(x[:, j], y)
        if found is None:
            continue
        threshold, gini = found
        key = (gini, j, threshold)
        if best is None or key < best:
            best = key
    return best


def build_tree(
    activations: ActivationMatrix,
    labels: np.ndarray,
    params: TreeParams = TreeParams(),
    feature_name: str = "",
) -> DecisionTree:
    """Grow a tree greedily until nodes are pure, too small, at the depth
    limit, or unsplittable (all columns constant)."""
    x = np.asarray(activations.values, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n, width = x.shape
    if y.size != n:
        raise ContractViolation(f"{n} activation rows vs {y.size} labels")
    if n == 0:
        raise ContractViolation("cannot build a tree from zero rows")

    tree = DecisionTree(
        root=Leaf(0, 0),
        feature_name=feature_name,
        layer_name=activations.layer_name,
        n_train_rows=n,
        width=width,
        params=params,
    )

    def attach(parent, side, node):
        if parent is None:
            tree.root = node
        elif side == "left":
            parent.left = node
        else:
            parent.right = node

    # Explicit stack: fully grown trees can be deeper than the recursion limit.
    stack: list[tuple[np.ndarray, int, Split | None, str | None]] = [
        (np.arange(n), 0, None, None)
    ]
    while stack:
        idx, depth, parent, side = stack.pop()
        node_y = y[idx]
        n_present = int(node_y.sum())
        n_absent = idx.size - n_present
        splittable = (
            n_present > 0
            and n_absent > 0
            and idx.size >= params.min_samples_split
            and (params.max_depth is None or depth < params.max_depth)
        )
        best = _best_split_all_columns(x[idx], node_y) if splittable else None
        if best is None:
            attach(parent, side, Leaf(n_present, n_absent))
            continue
        gini, col, threshold = best
        node = Split(
            NeuronRef(activations.layer_name, col), threshold, Leaf(0, 0), Leaf(0, 0)
        )
        attach(parent, side, node)
        goes_left = x[idx, col] <= threshold
        left_idx, right_idx = idx[goes_left], idx[~goes_left]
        if left_idx.size == 0 or right_idx.size == 0:
            raise InvariantViolation(
                "split produced an empty child; thresholds must separate values"
            )
        stack.append((right_idx, depth + 1, node, "right"))
        stack.append((left_idx, depth + 1, node, "left"))
    return tree


def route(
    tree: DecisionTree, row: np.ndarray
) -> tuple[Leaf, list[tuple[NeuronRef, str, float]]]:
    """Send one activation row down the tree.

    Returns the leaf and the root-to-leaf path as (neuron, comparator,
    threshold) steps, comparator "<=" for left and ">" for right.
    """
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.size != tree.width:
        raise ContractViolation(
            f"row has {row.size} values, tree was built over {tree.width} neurons"
        )
    node = tree.root
    path: list[tuple[NeuronRef, str, float]] = []
    while isinstance(node, Split):
        if row[node.neuron.index] <= node.threshold:
            path.append((node.neuron, "<=", node.threshold))
            node = node.left
        else:
            path.append((node.neuron, ">", node.threshold))
            node = node.right
    return node, path


def _node_to_dict(node: TreeNode) -> dict:
    # Iterative: fully grown trees can be deeper than the recursion limit.
    out: dict = {}
    stack = [(node, out)]
    while stack:
        current, slot = stack.pop()
        if isinstance(current, Leaf):
            slot.update(
                kind="leaf", present=current.count_present, absent=current.count_absent
            )
        else:
            slot.update(
                kind="split",
                neuron={"layer": current.neuron.layer, "index": current.neuron.index},
                threshold=current.threshold,
                left={},
                right={},
            )
            stack.append((current.right, slot["right"]))
            stack.append((current.left, slot["left"]))
    return out


def _node_from_dict(data: dict) -> TreeNode:
    root: TreeNode = Leaf(0, 0)
    stack: list[tuple[dict, Split | None, str]] = [(data, None, "")]
    while stack:
        entry, parent, side = stack.pop()
        if entry["kind"] == "leaf":
            node: TreeNode = Leaf(int(entry["present"]), int(entry["absent"]))
        else:
            node = Split(
                NeuronRef(entry["neuron"]["layer"], int(entry["neuron"]["index"])),
                float(entry["threshold"]),
                Leaf(0, 0),
                Leaf(0, 0),
            )
            stack.append((entry["right"], node, "right"))
            stack.append((entry["left"], node, "left"))
        if parent is None:
            root = node
        else:
            setattr(parent, side, node)
    return root


def tree_depth(tree: DecisionTree) -> int:
    deepest, stack = 0, [(tree.root, 0)]
    while stack:
        node, depth = stack.pop()
        if isinstance(node, Leaf):
            deepest = max(deepest, depth)
        else:
            stack.append((node.left, depth + 1))
            stack.append((node.right, depth + 1))
    return deepest


def tree_to_dict(tree: DecisionTree) -> dict:
    return {
        "feature": tree.feature_name,
        "layer": tree.layer_name,
        "n_train_rows": tree.n_train_rows,
        "width": tree.width,
        "params": {
            "max_depth": tree.params.max_depth,
            "min_samples_split": tree.params.min_samples_split,
        },
        "root": _node_to_dict(tree.root),
    }


def tree_from_dict(data: dict) -> DecisionTree:
    return DecisionTree(
        root=_node_from_dict(data["root"]),
        feature_name=data["feature"],
        layer_name=data["layer"],
        n_train_rows=int(data["n_train_rows"]),
        width=int(data["width"]),
        params=TreeParams(
            max_depth=data["params"]["max_depth"],
            min_samples_split=int(data["params"]["min_samples_split"]),
        ),
    )


def save_tree(tree: DecisionTree, path: str | Path) -> None:
    # json.dumps recurses over nesting; give deep trees enough headroom.
    with _recursion_headroom(tree_depth(tree)):
        Path(path).write_text(json.dumps(tree_to_dict(tree)))


def load_tree(path: str | Path) -> DecisionTree:
    text = Path(path).read_text()
    with _recursion_headroom(text.count('"split"')):
        return tree_from_dict(json.loads(text))


class _recursion_headroom:
    def __init__(self, depth: int):
        self.wanted = depth * 2 + 200

    def __enter__(self):
        self.previous = sys.getrecursionlimit()
        sys.setrecursionlimit(max(self.previous, self.wanted))

    def __exit__(self, *exc):
        sys.setrecursionlimit(self.previous)
