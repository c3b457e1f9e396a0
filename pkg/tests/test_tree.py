from __future__ import annotations

import numpy as np
import pytest

from fga.errors import ConfigurationError, ContractViolation
from fga.inference import ActivationMatrix, NeuronRef
from fga.tree import (
    Leaf,
    Split,
    TreeParams,
    build_tree,
    find_best_split,
    load_tree,
    route,
    save_tree,
    tree_depth,
    tree_from_dict,
    tree_to_dict,
)

from .oracles import brute_force_best_split


def matrix(values, layer="L"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    ids = tuple(str(i) for i in range(values.shape[0]))
    return ActivationMatrix(layer, ids, values)


class TestFindBestSplit:
    def test_perfect_two_sided_split(self):
        threshold, gini = find_best_split(np.array([1.0, 2.0, 3.0, 4.0]),
                                          np.array([True, True, False, False]))
        assert threshold == 2.5
        assert gini == 0.0
        # brute force over the 3 midpoints agrees
        best = brute_force_best_split(np.array([[1.0], [2.0], [3.0], [4.0]]),
                                      np.array([True, True, False, False]))
        assert best[0] == 0.0 and best[2] == 2.5

    def test_constant_column(self):
        assert find_best_split(np.array([5.0, 5.0, 5.0]),
                               np.array([True, False, True])) is None

    def test_two_point_split(self):
        threshold, gini = find_best_split(np.array([0.0, 1.0]),
                                          np.array([True, False]))
        assert threshold == 0.5 and gini == 0.0

    def test_tie_takes_lowest_threshold(self):
        # symmetric labels: splitting after the first or last value is equal
        column = np.array([0.0, 1.0, 2.0, 3.0])
        labels = np.array([True, False, False, True])
        threshold, _ = find_best_split(column, labels)
        oracle = brute_force_best_split(column[:, None], labels)
        assert threshold == oracle[2] == 0.5

    def test_empty_input_rejected(self):
        with pytest.raises(ContractViolation):
            find_best_split(np.array([]), np.array([], dtype=bool))


class TestBuildTree:
    def test_all_present_is_single_leaf(self):
        tree = build_tree(matrix([[0.1], [0.2], [0.9]]),
                          np.array([True, True, True]))
        assert isinstance(tree.root, Leaf)
        assert (tree.root.count_present, tree.root.count_absent) == (3, 0)
        assert tree_depth(tree) == 0

    def test_planted_two_column_structure(self, planted_tree):
        activations, labels = planted_tree
        tree = build_tree(activations, labels)
        root = tree.root
        assert isinstance(root, Split)
        assert root.neuron == NeuronRef("2", 15) and root.threshold == 0.68
        left, right = root.left, root.right
        assert left.neuron == NeuronRef("2", 9) and left.threshold == 0.34
        assert right.neuron == NeuronRef("2", 18) and right.threshold == 0.70
        assert (left.left.count_present, left.left.count_absent) == (212, 0)
        assert (left.right.count_present, left.right.count_absent) == (0, 87)
        assert (right.left.count_present, right.left.count_absent) == (66, 3)
        assert (right.right.count_present, right.right.count_absent) == (0, 192)

    def test_alternating_labels_purify(self):
        tree = build_tree(matrix([0.0, 1.0, 2.0, 3.0]),
                          np.array([True, False, True, False]))
        assert tree_depth(tree) >= 2
        for leaf in tree.leaves():
            assert leaf.count_present == 0 or leaf.count_absent == 0

    def test_label_length_mismatch(self):
        with pytest.raises(ContractViolation):
            build_tree(matrix([[0.0], [1.0]]), np.array([True]))

    def test_max_depth_stops_growth(self):
        tree = build_tree(matrix([0.0, 1.0, 2.0, 3.0]),
                          np.array([True, False, True, False]),
                          TreeParams(max_depth=1))
        assert tree_depth(tree) == 1

    def test_min_samples_split_stops_growth(self):
        tree = build_tree(matrix([0.0, 1.0, 2.0]),
                          np.array([True, False, True]),
                          TreeParams(min_samples_split=4))
        assert isinstance(tree.root, Leaf)

    def test_bad_params_rejected(self):
        with pytest.raises(ConfigurationError):
            TreeParams(min_samples_split=1)
        with pytest.raises(ConfigurationError):
            TreeParams(max_depth=0)

    def test_conflicting_duplicates_stay_impure(self):
        tree = build_tree(matrix([[1.0, 2.0]] * 5),
                          np.array([True, True, False, True, False]))
        assert isinstance(tree.root, Leaf)
        assert (tree.root.count_present, tree.root.count_absent) == (3, 2)


def random_instance(rng, max_rows=200, max_cols=8, structured=False):
    n = int(rng.integers(5, max_rows + 1))
    d = int(rng.integers(1, max_cols + 1))
    # duplicate-heavy columns exercise the distinct-value midpoints
    x = rng.choice(rng.uniform(-2, 2, size=max(2, n // 3)), size=(n, d))
    if structured:
        w = rng.normal(size=d)
        y = (x @ w + 0.3 * rng.normal(size=n)) > 0
    else:
        y = rng.uniform(size=n) < rng.uniform(0.2, 0.8)
    return x, y


class TestGreedyOptimality:
    def test_chosen_split_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for trial in range(40):
            x, y = random_instance(rng, structured=trial % 2 == 0)
            if y.all() or not y.any():
                continue
            tree = build_tree(matrix(x), y)
            if isinstance(tree.root, Leaf):
                assert brute_force_best_split(x, y) is None
                continue
            oracle = brute_force_best_split(x, y)
            got = find_best_split(x[:, tree.root.neuron.index], y)
            assert abs(got[1] - oracle[0]) < 1e-12
            assert tree.root.neuron.index == oracle[1]
            assert tree.root.threshold == oracle[2]

    def test_every_internal_node_is_locally_optimal(self):
        rng = np.random.default_rng(7)
        x, y = random_instance(rng, max_rows=120, max_cols=4)
        tree = build_tree(matrix(x), y)

        def check(node, idx):
            if isinstance(node, Leaf):
                return
            oracle = brute_force_best_split(x[idx], y[idx])
            chosen = find_best_split(x[idx, node.neuron.index], y[idx])
            assert abs(chosen[1] - oracle[0]) < 1e-12
            goes_left = x[idx, node.neuron.index] <= node.threshold
            check(node.left, idx[goes_left])
            check(node.right, idx[~goes_left])

        check(tree.root, np.arange(len(y)))


class TestTreeInvariants:
    def test_leaf_count_conservation_and_routing(self):
        rng = np.random.default_rng(99)
        for trial in range(15):
            x, y = random_instance(rng, max_rows=150, max_cols=5,
                                   structured=trial % 2 == 0)
            tree = build_tree(matrix(x), y)
            leaves = tree.leaves()
            assert sum(l.count_present + l.count_absent for l in leaves) == len(y)
            # routing the training rows reproduces every leaf tally exactly
            tallies = {}
            for i in range(len(y)):
                leaf, _ = route(tree, x[i])
                tallies.setdefault(id(leaf), [leaf, 0, 0])
                tallies[id(leaf)][1 if y[i] else 2] += 1
            assert len(tallies) == len(leaves)
            for leaf, n_present, n_absent in tallies.values():
                assert (leaf.count_present, leaf.count_absent) == (n_present, n_absent)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        x, y = random_instance(rng, max_rows=150, max_cols=6)
        a = build_tree(matrix(x), y)
        b = build_tree(matrix(x), y)
        assert tree_to_dict(a) == tree_to_dict(b)

    def test_purity_at_unlimited_depth(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(size=(200, 3))  # continuous: no conflicting duplicates
        y = rng.uniform(size=200) < 0.4
        tree = build_tree(matrix(x), y)
        for leaf in tree.leaves():
            assert leaf.count_present == 0 or leaf.count_absent == 0


class TestRoute:
    def test_planted_path(self, planted_tree):
        activations, labels = planted_tree
        tree = build_tree(activations, labels)
        row = np.zeros(19)
        row[15], row[9] = 0.5, 0.2
        leaf, path = route(tree, row)
        assert (leaf.count_present, leaf.count_absent) == (212, 0)
        assert path == [
            (NeuronRef("2", 15), "<=", 0.68),
            (NeuronRef("2", 9), "<=", 0.34),
        ]

    def test_depth_zero_empty_path(self):
        tree = build_tree(matrix([[1.0], [2.0]]), np.array([True, True]))
        leaf, path = route(tree, np.array([5.0]))
        assert path == [] and leaf.count_present == 2

    def test_routing_matches_recursive_descent(self):
        rng = np.random.default_rng(31)
        x, y = random_instance(rng, max_rows=200, max_cols=6)
        tree = build_tree(matrix(x), y)

        def descend(node, row):
            while isinstance(node, Split):
                node = node.left if row[node.neuron.index] <= node.threshold else node.right
            return node

        rows = rng.uniform(-3, 3, size=(1000, x.shape[1]))
        for row in rows:
            leaf, _ = route(tree, row)
            assert leaf is descend(tree.root, row)

    def test_width_mismatch(self):
        tree = build_tree(matrix([[1.0, 2.0], [3.0, 4.0]]), np.array([True, False]))
        with pytest.raises(ContractViolation):
            route(tree, np.array([1.0]))


class TestSerialization:
    def test_roundtrip_bitexact(self, tmp_path, planted_tree):
        activations, labels = planted_tree
        tree = build_tree(activations, labels)
        path = tmp_path / "tree.json"
        save_tree(tree, path)
        loaded = load_tree(path)
        assert tree_to_dict(loaded) == tree_to_dict(tree)
        assert loaded.root.threshold == tree.root.threshold

    def test_thresholds_roundtrip_through_json(self):
        # repr-based JSON floats reload to the same bits
        values = np.random.default_rng(0).uniform(-10, 10, size=50)
        labels = np.arange(50) % 2 == 0
        tree = build_tree(matrix(values), labels)
        clone = tree_from_dict(tree_to_dict(tree))
        stack = [(tree.root, clone.root)]
        while stack:
            a, b = stack.pop()
            if isinstance(a, Split):
                assert a.threshold == b.threshold
                stack.append((a.left, b.left))
                stack.append((a.right, b.right))
