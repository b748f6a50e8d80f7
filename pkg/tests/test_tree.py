"""Decision-tree structure, descent with path capture, action selection,
and the document format. Descent is checked against a brute-force region
enumeration oracle; the partition property is checked by tiling."""
import math

import numpy as np
import pytest

from npplab.plant import Action, N_ACTIONS
from npplab.tree import (
    BranchNode,
    DecisionTree,
    Direction,
    LeafNode,
    TreeParseError,
    TreeStructureError,
    deserialize,
    serialize,
    trees_equal,
)

from helpers import (
    FEATURE_RANGES,
    containing_leaf,
    leaf_regions,
    random_state_vec,
    random_tree,
)


class TestDescent:
    def test_single_leaf_empty_path(self):
        tree = DecisionTree.single_leaf()
        res = tree.descend([0.0] * 8)
        assert res.leaf_id == tree.root
        assert res.path == ()

    def test_boundary_value_goes_left(self):
        tree = DecisionTree.single_leaf()
        left, right = tree.split_leaf(0, 2, 25.0)  # sg_water <= 25
        vec = [0.0, 0.0, 25.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        res = tree.descend(vec)
        assert res.leaf_id == left
        assert res.path == ((0, Direction.LESS_EQ),)
        vec[2] = 25.0000001
        assert tree.descend(vec).leaf_id == right

    def test_path_ends_at_leaf_parent(self):
        rng = np.random.default_rng(0)
        tree = random_tree(rng, max_leaves=32)
        vec = random_state_vec(rng)
        res = tree.descend(vec)
        parent_id, _ = res.path[-1]
        parent = tree.nodes[parent_id]
        assert res.leaf_id in (parent.left, parent.right)

    def test_descent_matches_region_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            tree = random_tree(rng, max_leaves=64)
            regions = leaf_regions(tree)
            for _ in range(20):
                vec = random_state_vec(rng)
                assert tree.descend(vec).leaf_id == containing_leaf(regions, vec)

    def test_descent_at_exact_thresholds(self):
        rng = np.random.default_rng(43)
        for _ in range(10):
            tree = random_tree(rng, max_leaves=16)
            regions = leaf_regions(tree)
            # park a coordinate exactly on each branch threshold
            for branch_id in tree.branch_ids():
                node = tree.nodes[branch_id]
                vec = random_state_vec(rng)
                vec[node.feature_index] = node.threshold
                assert tree.descend(vec).leaf_id == containing_leaf(regions, vec)

    def test_missing_child_is_structural_error(self):
        tree = DecisionTree.single_leaf()
        tree.split_leaf(0, 0, 100.0)
        del tree.nodes[1]
        with pytest.raises(TreeStructureError):
            tree.descend([0.0] * 8)


class TestPartition:
    def test_regions_tile_the_box(self):
        # every sampled state lands in exactly one region (asserted inside
        # containing_leaf), and region volumes tile the sampling box
        rng = np.random.default_rng(7)
        for _ in range(10):
            tree = random_tree(rng, max_leaves=16)
            regions = leaf_regions(tree)
            total = 0.0
            for lo, hi in regions.values():
                vol = 1.0
                for f in range(8):
                    flo, fhi = FEATURE_RANGES[f]
                    lo_c, hi_c = max(lo[f], flo), min(hi[f], fhi)
                    vol *= max(0.0, hi_c - lo_c) / (fhi - flo)
                total += vol
            assert math.isclose(total, 1.0, rel_tol=1e-9)


class TestBestAction:
    def test_all_equal_takes_lowest_index(self):
        tree = DecisionTree.single_leaf(np.ones(N_ACTIONS))
        assert tree.best_action([0.0] * 8) == Action.SECURITY_UP

    def test_strict_max_wins(self):
        q = np.zeros(N_ACTIONS)
        q[11] = 0.5
        tree = DecisionTree.single_leaf(q)
        assert tree.best_action([0.0] * 8) == Action.SKIP

    def test_tie_break_lowest_index(self):
        q = np.zeros(N_ACTIONS)
        q[4] = q[9] = 2.0
        tree = DecisionTree.single_leaf(q)
        assert tree.best_action([0.0] * 8) == Action.SUSTAIN_UP


class TestSplitLeaf:
    def test_branch_keeps_id_children_fresh(self):
        tree = DecisionTree.single_leaf(np.arange(12, dtype=float))
        left, right = tree.split_leaf(0, 3, 500.0)
        assert isinstance(tree.nodes[0], BranchNode)
        assert (left, right) == (1, 2)
        assert np.array_equal(tree.nodes[left].q_values, np.arange(12, dtype=float))
        assert tree.nodes[left].depth == 1

    def test_split_non_leaf_rejected(self):
        tree = DecisionTree.single_leaf()
        tree.split_leaf(0, 0, 1.0)
        with pytest.raises(TreeStructureError):
            tree.split_leaf(0, 0, 1.0)


class TestDocumentFormat:
    def test_roundtrip_random_trees(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            tree = random_tree(rng, max_leaves=32)
            again = deserialize(serialize(tree))
            assert trees_equal(tree, again)

    def test_serialization_is_deterministic(self):
        rng = np.random.default_rng(4)
        tree = random_tree(rng, max_leaves=32)
        assert serialize(tree) == serialize(deserialize(serialize(tree)))

    def test_missing_child_names_the_node(self):
        tree = DecisionTree.single_leaf()
        tree.split_leaf(0, 0, 10.0)
        doc = serialize(tree)
        broken = doc.replace('"right": 2', '"right": 9')
        with pytest.raises(TreeParseError, match="9"):
            deserialize(broken)

    def test_wrong_q_length_names_the_leaf(self):
        tree = DecisionTree.single_leaf()
        doc = serialize(tree)
        import json
        parsed = json.loads(doc)
        parsed["nodes"][0]["q_values"] = [0.0] * 11
        with pytest.raises(TreeParseError, match="leaf 0"):
            deserialize(json.dumps(parsed))

    def test_fingerprint_mismatch_fails_loudly(self):
        tree = DecisionTree.single_leaf()
        doc = serialize(tree)
        with pytest.raises(TreeParseError, match="action_order"):
            deserialize(doc.replace("add_water_small", "add_water_tiny"))
        with pytest.raises(TreeParseError, match="feature_order"):
            deserialize(doc.replace('"sg_water"', '"sg_level"'))

    def test_schema_version_checked(self):
        tree = DecisionTree.single_leaf()
        doc = serialize(tree).replace('"schema_version": "1"', '"schema_version": "2"')
        with pytest.raises(TreeParseError, match="schema_version"):
            deserialize(doc)

    def test_unreachable_node_rejected(self):
        tree = DecisionTree.single_leaf()
        tree.split_leaf(0, 0, 10.0)
        tree.nodes[99] = LeafNode(q_values=np.zeros(N_ACTIONS), depth=1)
        with pytest.raises(TreeStructureError, match="unreachable"):
            tree.validate()
