"""Binary decision-tree policy: node arena, descent with path capture,
action selection, and the versioned JSON document format.

Branch nodes split on one feature with the rule `value <= threshold goes
left`; leaf nodes hold a Q-value array over the 12 actions. Node ids are
stable across serialization, so explanations can cite them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .plant import ACTION_ORDER, FEATURE_ORDER, N_ACTIONS, N_FEATURES, Action

TREE_SCHEMA_VERSION = "1"


class TreeStructureError(ValueError):
    """Malformed tree: missing child, cycle, unreachable node, bad arrays."""


class TreeParseError(ValueError):
    """Tree document does not match the schema or the fingerprints."""


class Direction(str, Enum):
    LESS_EQ = "le"   # went left: value <= threshold
    GREATER = "gt"   # went right: value > threshold


@dataclass
class BranchNode:
    feature_index: int
    threshold: float
    left: int
    right: int
    depth: int


@dataclass
class LeafNode:
    q_values: np.ndarray                 # shape (12,)
    visit_count: int = 0
    action_visits: np.ndarray = None     # shape (12,), int
    depth: int = 0

    def __post_init__(self) -> None:
        self.q_values = np.asarray(self.q_values, dtype=float)
        if self.q_values.shape != (N_ACTIONS,):
            raise TreeStructureError(f"leaf q_values must have length {N_ACTIONS}")
        if self.action_visits is None:
            self.action_visits = np.zeros(N_ACTIONS, dtype=np.int64)
        else:
            self.action_visits = np.asarray(self.action_visits, dtype=np.int64)
            if self.action_visits.shape != (N_ACTIONS,):
                raise TreeStructureError(f"leaf action_visits must have length {N_ACTIONS}")


Node = Union[BranchNode, LeafNode]


@dataclass(frozen=True)
class DescentResult:
    """Leaf reached and the ordered (branch id, direction taken) path."""

    leaf_id: int
    path: tuple  # tuple[tuple[int, Direction], ...]


@dataclass
class DecisionTree:
    nodes: dict = field(default_factory=dict)  # id -> Node
    root: int = 0
    _parents: Optional[dict] = field(default=None, repr=False, compare=False)

    @classmethod
    def single_leaf(cls, q_values=None) -> "DecisionTree":
        q = np.zeros(N_ACTIONS) if q_values is None else np.asarray(q_values, dtype=float)
        return cls(nodes={0: LeafNode(q_values=q, depth=0)}, root=0)

    def fresh_id(self) -> int:
        return max(self.nodes) + 1 if self.nodes else 0

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeStructureError(f"node {node_id} not in tree") from None

    def is_leaf(self, node_id: int) -> bool:
        return isinstance(self.node(node_id), LeafNode)

    def leaf_ids(self) -> list[int]:
        return sorted(i for i, n in self.nodes.items() if isinstance(n, LeafNode))

    def branch_ids(self) -> list[int]:
        return sorted(i for i, n in self.nodes.items() if isinstance(n, BranchNode))

    def invalidate_caches(self) -> None:
        self._parents = None

    def parents(self) -> dict:
        """Child id -> parent id map (root absent)."""
        if self._parents is None:
            parents = {}
            for node_id, node in self.nodes.items():
                if isinstance(node, BranchNode):
                    parents[node.left] = node_id
                    parents[node.right] = node_id
            self._parents = parents
        return self._parents

    def depth(self, node_id: int) -> int:
        return self.node(node_id).depth

    def ancestors(self, node_id: int) -> list[int]:
        """Path of node ids from the root down to `node_id` inclusive."""
        parents = self.parents()
        chain = [node_id]
        while chain[-1] != self.root:
            if chain[-1] not in parents:
                raise TreeStructureError(f"node {chain[-1]} unreachable from root")
            chain.append(parents[chain[-1]])
        chain.reverse()
        return chain

    def descend(self, state_vec) -> DescentResult:
        """Walk from the root. Left iff state_vec[feature] <= threshold."""
        if len(state_vec) != N_FEATURES:
            raise ValueError(f"state vector must have {N_FEATURES} entries")
        path = []
        node_id = self.root
        seen = 0
        while True:
            node = self.node(node_id)
            if isinstance(node, LeafNode):
                return DescentResult(leaf_id=node_id, path=tuple(path))
            if state_vec[node.feature_index] <= node.threshold:
                path.append((node_id, Direction.LESS_EQ))
                node_id = node.left
            else:
                path.append((node_id, Direction.GREATER))
                node_id = node.right
            seen += 1
            if seen > len(self.nodes):
                raise TreeStructureError("cycle detected during descent")

    def best_action(self, state_vec) -> Action:
        """Argmax of the reached leaf's q_values, lowest index on ties."""
        leaf = self.node(self.descend(state_vec).leaf_id)
        return Action(int(np.argmax(leaf.q_values)))

    def split_leaf(self, leaf_id: int, feature_index: int, threshold: float,
                   left_q=None, right_q=None) -> tuple[int, int]:
        """Replace a leaf with a branch; the branch keeps the leaf's id and
        the two children get fresh ids (left first). Children default to
        copies of the parent's q_values. Returns (left_id, right_id)."""
        leaf = self.node(leaf_id)
        if not isinstance(leaf, LeafNode):
            raise TreeStructureError(f"node {leaf_id} is not a leaf")
        left_id = self.fresh_id()
        right_id = left_id + 1
        lq = leaf.q_values.copy() if left_q is None else np.asarray(left_q, dtype=float)
        rq = leaf.q_values.copy() if right_q is None else np.asarray(right_q, dtype=float)
        self.nodes[left_id] = LeafNode(q_values=lq, depth=leaf.depth + 1)
        self.nodes[right_id] = LeafNode(q_values=rq, depth=leaf.depth + 1)
        self.nodes[leaf_id] = BranchNode(
            feature_index=feature_index, threshold=float(threshold),
            left=left_id, right=right_id, depth=leaf.depth,
        )
        self.invalidate_caches()
        return left_id, right_id

    def validate(self) -> None:
        """Enforce structural invariants: binary, acyclic, all reachable,
        consistent depths, well-formed arrays."""
        if self.root not in self.nodes:
            raise TreeStructureError(f"root {self.root} not in tree")
        seen = set()
        stack = [(self.root, 0)]
        while stack:
            node_id, depth = stack.pop()
            if node_id in seen:
                raise TreeStructureError(f"node {node_id} reached twice (cycle or shared child)")
            seen.add(node_id)
            node = self.node(node_id)
            if node.depth != depth:
                raise TreeStructureError(f"node {node_id} depth {node.depth}, expected {depth}")
            if isinstance(node, BranchNode):
                if not (0 <= node.feature_index < N_FEATURES):
                    raise TreeStructureError(f"branch {node_id} feature_index out of range")
                for child in (node.left, node.right):
                    if child not in self.nodes:
                        raise TreeStructureError(f"branch {node_id} missing child {child}")
                    stack.append((child, depth + 1))
        unreachable = set(self.nodes) - seen
        if unreachable:
            raise TreeStructureError(f"unreachable nodes: {sorted(unreachable)}")


# ---------------------------------------------------------------------------
# Document format


def serialize(tree: DecisionTree) -> str:
    """Serialize to the versioned JSON document (deterministic bytes)."""
    tree.validate()
    nodes = []
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        if isinstance(node, BranchNode):
            nodes.append({
                "id": node_id, "kind": "branch",
                "feature_index": node.feature_index, "threshold": node.threshold,
                "left": node.left, "right": node.right, "depth": node.depth,
            })
        else:
            nodes.append({
                "id": node_id, "kind": "leaf",
                "q_values": [float(v) for v in node.q_values],
                "visit_count": int(node.visit_count),
                "action_visits": [int(v) for v in node.action_visits],
                "depth": node.depth,
            })
    doc = {
        "schema_version": TREE_SCHEMA_VERSION,
        "action_order": list(ACTION_ORDER),
        "feature_order": list(FEATURE_ORDER),
        "root": tree.root,
        "nodes": nodes,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1)


def deserialize(text: str) -> DecisionTree:
    """Parse a tree document, failing loudly on schema or fingerprint
    mismatches and on structural violations (naming the offending node)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise TreeParseError("document must be a JSON object")
    if str(doc.get("schema_version")) != TREE_SCHEMA_VERSION:
        raise TreeParseError(
            f"schema_version {doc.get('schema_version')!r} unsupported "
            f"(expected {TREE_SCHEMA_VERSION!r})")
    if doc.get("action_order") != list(ACTION_ORDER):
        raise TreeParseError("action_order fingerprint mismatch")
    if doc.get("feature_order") != list(FEATURE_ORDER):
        raise TreeParseError("feature_order fingerprint mismatch")
    if "root" not in doc or "nodes" not in doc:
        raise TreeParseError("document missing root or nodes")

    nodes = {}
    for raw in doc["nodes"]:
        node_id = raw.get("id")
        if not isinstance(node_id, int):
            raise TreeParseError(f"node with invalid id {node_id!r}")
        if node_id in nodes:
            raise TreeParseError(f"duplicate node id {node_id}")
        kind = raw.get("kind")
        if kind == "branch":
            for key in ("feature_index", "threshold", "left", "right", "depth"):
                if key not in raw:
                    raise TreeParseError(f"branch {node_id} missing {key}")
            nodes[node_id] = BranchNode(
                feature_index=int(raw["feature_index"]), threshold=float(raw["threshold"]),
                left=int(raw["left"]), right=int(raw["right"]), depth=int(raw["depth"]),
            )
        elif kind == "leaf":
            q = raw.get("q_values")
            if not isinstance(q, list) or len(q) != N_ACTIONS:
                raise TreeParseError(
                    f"leaf {node_id} q_values must have length {N_ACTIONS}, "
                    f"got {len(q) if isinstance(q, list) else q!r}")
            visits = raw.get("action_visits", [0] * N_ACTIONS)
            if not isinstance(visits, list) or len(visits) != N_ACTIONS:
                raise TreeParseError(f"leaf {node_id} action_visits must have length {N_ACTIONS}")
            nodes[node_id] = LeafNode(
                q_values=np.array(q, dtype=float),
                visit_count=int(raw.get("visit_count", 0)),
                action_visits=np.array(visits, dtype=np.int64),
                depth=int(raw.get("depth", 0)),
            )
        else:
            raise TreeParseError(f"node {node_id} has unknown kind {kind!r}")

    tree = DecisionTree(nodes=nodes, root=int(doc["root"]))
    try:
        tree.validate()
    except TreeStructureError as exc:
        raise TreeParseError(str(exc)) from exc
    return tree


def save_tree(tree: DecisionTree, path: str | Path) -> None:
    Path(path).write_text(serialize(tree))


def load_tree(path: str | Path) -> DecisionTree:
    return deserialize(Path(path).read_text())


def trees_equal(a: DecisionTree, b: DecisionTree) -> bool:
    """Structural equality including ids, depths and exact q_values."""
    if a.root != b.root or set(a.nodes) != set(b.nodes):
        return False
    for node_id, na in a.nodes.items():
        nb = b.nodes[node_id]
        if type(na) is not type(nb):
            return False
        if isinstance(na, BranchNode):
            if (na.feature_index, na.threshold, na.left, na.right, na.depth) != (
                    nb.feature_index, nb.threshold, nb.left, nb.right, nb.depth):
                return False
        else:
            if na.depth != nb.depth or na.visit_count != nb.visit_count:
                return False
            if not np.array_equal(na.q_values, nb.q_values):
                return False
            if not np.array_equal(na.action_visits, nb.action_visits):
                return False
    return True
