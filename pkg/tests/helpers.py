"""Shared test utilities: random tree generation, brute-force oracles
(region enumeration for descent, path intersection for deepest common
ancestors), and the reconstructed example-figure tree topology.

The oracles deliberately avoid the library's parent maps and descent code
so they stay independent of the paths they check.
"""
from __future__ import annotations

import math

import numpy as np

from npplab.plant import N_ACTIONS, N_FEATURES
from npplab.tree import BranchNode, DecisionTree, LeafNode

# plausible per-feature sampling ranges (gauges then the four rod ordinals)
FEATURE_RANGES = (
    (0.0, 400.0),
    (50.0, 600.0),
    (0.0, 100.0),
    (0.0, 1000.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.0, 2.0),
)


def random_tree(rng: np.random.Generator, max_leaves: int = 64) -> DecisionTree:
    """Grow a tree by splitting uniformly chosen leaves at random features
    and thresholds until a uniformly chosen leaf count is reached."""
    tree = DecisionTree.single_leaf(rng.normal(size=N_ACTIONS))
    target = int(rng.integers(2, max_leaves + 1))
    while len(tree.leaf_ids()) < target:
        leaf_id = int(rng.choice(tree.leaf_ids()))
        feature = int(rng.integers(N_FEATURES))
        lo, hi = FEATURE_RANGES[feature]
        threshold = float(rng.uniform(lo, hi))
        left, right = tree.split_leaf(leaf_id, feature, threshold)
        tree.nodes[left].q_values = rng.normal(size=N_ACTIONS)
        tree.nodes[right].q_values = rng.normal(size=N_ACTIONS)
    tree.validate()
    return tree


def random_state_vec(rng: np.random.Generator) -> list[float]:
    return [float(rng.uniform(lo, hi)) for lo, hi in FEATURE_RANGES]


def leaf_regions(tree: DecisionTree) -> dict:
    """Brute-force region enumeration: leaf id -> (lo, hi) arrays with the
    convention that a state is inside iff lo < x <= hi per feature."""
    regions = {}

    def walk(node_id, lo, hi):
        node = tree.nodes[node_id]
        if isinstance(node, LeafNode):
            regions[node_id] = (lo, hi)
            return
        f, t = node.feature_index, node.threshold
        hi_left = hi.copy()
        hi_left[f] = min(hi[f], t)
        walk(node.left, lo.copy(), hi_left)
        lo_right = lo.copy()
        lo_right[f] = max(lo[f], t)
        walk(node.right, lo_right, hi.copy())

    walk(tree.root, np.full(N_FEATURES, -math.inf), np.full(N_FEATURES, math.inf))
    return regions


def containing_leaf(regions: dict, vec) -> int:
    """The unique leaf whose hyper-rectangle contains the state."""
    v = np.asarray(vec, dtype=float)
    hits = [leaf_id for leaf_id, (lo, hi) in regions.items()
            if bool(np.all(lo < v) and np.all(v <= hi))]
    assert len(hits) == 1, f"state contained in {len(hits)} regions"
    return hits[0]


def root_path(tree: DecisionTree, target: int) -> list[int]:
    """Root-to-node path found by plain DFS (no parent maps)."""
    path: list[int] = []

    def dfs(node_id: int) -> bool:
        path.append(node_id)
        if node_id == target:
            return True
        node = tree.nodes[node_id]
        if isinstance(node, BranchNode) and (dfs(node.left) or dfs(node.right)):
            return True
        path.pop()
        return False

    assert dfs(tree.root), f"node {target} not reachable"
    return path


def lca_oracle(tree: DecisionTree, a: int, b: int) -> int:
    """Deepest common node of the two root paths."""
    common = None
    for x, y in zip(root_path(tree, a), root_path(tree, b)):
        if x != y:
            break
        common = x
    assert common is not None
    return common


def one_hot_q(action: int) -> np.ndarray:
    q = np.zeros(N_ACTIONS)
    q[action] = 1.0
    return q


def fig3_tree() -> DecisionTree:
    """Reconstruction of the worked example topology: root id 1, a branch
    id 7 whose subtrees separate leaf 11 (the advisor's suggestion) from
    leaf 2 (the predicted user action)."""
    from npplab.plant import Action

    nodes = {
        1: BranchNode(feature_index=2, threshold=25.0, left=0, right=4, depth=0),
        0: LeafNode(q_values=one_hot_q(Action.ADD_WATER_LARGE), depth=1),
        4: BranchNode(feature_index=0, threshold=200.0, left=7, right=3, depth=1),
        3: LeafNode(q_values=one_hot_q(Action.SKIP), depth=2),
        7: BranchNode(feature_index=5, threshold=0.5, left=2, right=9, depth=2),
        2: LeafNode(q_values=one_hot_q(Action.FUEL_DOWN), depth=3),
        9: BranchNode(feature_index=3, threshold=500.0, left=11, right=5, depth=3),
        11: LeafNode(q_values=one_hot_q(Action.ADD_WATER_MEDIUM), depth=4),
        5: LeafNode(q_values=one_hot_q(Action.SECURITY_UP), depth=4),
    }
    tree = DecisionTree(nodes=nodes, root=1)
    tree.validate()
    return tree


# routes through nodes 1 -> 4 -> 7 -> 9 to leaf 11
FIG3_STATE = [150.0, 200.0, 80.0, 300.0, 2.0, 2.0, 2.0, 2.0]
