"""Explanation selection and rendering for the tree advisor.

Two strategies answer "why would you do that?":

* classical — cite the shallowest split on the descent path that has not
  been used yet this session (a per-session usage tracker walks the
  explanations deeper on repeats);
* contrastive — predict the user's own intended action, map it to a foil
  leaf, and cite the deepest branch separating the advisor's leaf (the
  fact) from the foil.

Both produce a single split condition rendered as a short sentence from a
locale template file.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .plant import FEATURE_ORDER, Action
from .tree import DecisionTree, DescentResult, Direction, LeafNode


class Strategy(str, Enum):
    CLASSICAL = "classical"
    CONTRASTIVE = "contrastive"
    CONTRASTIVE_FALLBACK = "contrastive_fallback"


class NoExplanationAvailable(Exception):
    """The descent path has no branch to cite (single-leaf tree)."""


class FactEqualsFoil(Exception):
    """Contrastive selection is undefined when fact and foil coincide."""


@dataclass(frozen=True)
class Explanation:
    node_id: int
    feature_index: int
    direction: Direction
    threshold: float
    strategy: Strategy
    text: str
    word_count: int


@dataclass
class UsageTracker:
    """Node ids already used for explanations; grows within a session,
    cleared only at session (or phase) start."""

    used: set = field(default_factory=set)

    def clear(self) -> None:
        self.used.clear()


@dataclass(frozen=True)
class StepContext:
    """What the engine knows when a why-question arrives."""

    tree: DecisionTree
    fact_leaf: int
    pre_selected: Optional[Action] = None


def answer_what(tree: DecisionTree, state_vec) -> tuple[Action, DescentResult]:
    """Suggested action plus the descent used (cached by callers so a
    follow-up why-question cites the same path)."""
    descent = tree.descend(state_vec)
    leaf: LeafNode = tree.node(descent.leaf_id)
    return Action(int(np.argmax(leaf.q_values))), descent


def select_classical(path: DescentResult, tracker: UsageTracker) -> int:
    """Shallowest path node not yet used; marks it used. When the whole
    path is exhausted, falls back to the shallowest node without marking."""
    if not path.path:
        raise NoExplanationAvailable("descent path has no branch nodes")
    for node_id, _ in path.path:
        if node_id not in tracker.used:
            tracker.used.add(node_id)
            return node_id
    return path.path[0][0]


def predict_foil(ctx: StepContext) -> Optional[int]:
    """Foil leaf for the user's pre-selected action: among leaves whose
    best action equals it, the one nearest the fact leaf by tree distance
    (ties: lowest leaf id). None when there is no pre-selection or no leaf
    selects that action."""
    if ctx.pre_selected is None:
        return None
    tree = ctx.tree
    fact_chain = tree.ancestors(ctx.fact_leaf)
    fact_index = {node_id: i for i, node_id in enumerate(fact_chain)}
    best: Optional[tuple[int, int]] = None
    for leaf_id in tree.leaf_ids():
        leaf: LeafNode = tree.node(leaf_id)
        if int(np.argmax(leaf.q_values)) != int(ctx.pre_selected):
            continue
        chain = tree.ancestors(leaf_id)
        lca_depth = 0
        for i, node_id in enumerate(chain):
            if node_id in fact_index and fact_index[node_id] == i:
                lca_depth = i
            else:
                break
        dist = (len(fact_chain) - 1 - lca_depth) + (len(chain) - 1 - lca_depth)
        if best is None or (dist, leaf_id) < best:
            best = (dist, leaf_id)
    return best[1] if best is not None else None


def select_contrastive(tree: DecisionTree, fact_leaf: int, foil_leaf: int) -> int:
    """Lowest common ancestor of fact and foil: the unique deepest branch
    whose two subtrees separate them."""
    if fact_leaf == foil_leaf:
        raise FactEqualsFoil(f"fact and foil are both leaf {fact_leaf}")
    fact_ancestors = set(tree.ancestors(fact_leaf))
    node_id = foil_leaf
    parents = tree.parents()
    while node_id not in fact_ancestors:
        node_id = parents[node_id]
    return node_id


def fact_direction(tree: DecisionTree, branch_id: int, fact_leaf: int) -> Direction:
    """Side of `branch_id` containing the fact leaf."""
    branch = tree.node(branch_id)
    chain = tree.ancestors(fact_leaf)
    i = chain.index(branch_id)
    nxt = chain[i + 1]
    return Direction.LESS_EQ if nxt == branch.left else Direction.GREATER


# ---------------------------------------------------------------------------
# Rendering


class Locale:
    def __init__(self, doc: dict):
        if str(doc.get("schema_version")) != "1":
            raise ValueError(f"locale schema_version {doc.get('schema_version')!r} unsupported")
        self.doc = doc

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "Locale":
        if path is None:
            text = resources.files("npplab.data").joinpath("locale_en.yaml").read_text()
        else:
            text = Path(path).read_text()
        return cls(yaml.safe_load(text))

    @property
    def no_reason(self) -> str:
        return self.doc["no_reason"]


_DEFAULT_LOCALE: Optional[Locale] = None


def default_locale() -> Locale:
    global _DEFAULT_LOCALE
    if _DEFAULT_LOCALE is None:
        _DEFAULT_LOCALE = Locale.load(None)
    return _DEFAULT_LOCALE


def _format_threshold(value: float) -> str:
    """At most one decimal: 25.0 -> '25', 25.46 -> '25.5'."""
    text = f"{value:.1f}"
    return text[:-2] if text.endswith(".0") else text


def _rod_phrase(levels: int, direction: Direction, threshold: float, phrases: dict) -> str:
    if levels == 2:
        return phrases["down"] if direction == Direction.LESS_EQ else phrases["up"]
    if direction == Direction.LESS_EQ:
        return phrases["down"] if threshold < 1.0 else phrases["medium_or_down"]
    return phrases["medium_or_up"] if threshold < 1.0 else phrases["up"]


def render(feature_index: int, direction: Direction, threshold: float,
           locale: Optional[Locale] = None) -> str:
    """Deterministic sentence for one split condition."""
    locale = locale or default_locale()
    feature = locale.doc["features"][FEATURE_ORDER[feature_index]]
    if feature["kind"] == "rod":
        levels = _rod_phrase(int(feature["levels"]), direction, threshold,
                             locale.doc["rod_levels"])
        return locale.doc["rod_sentence"].format(subject=feature["subject"], levels=levels)
    op = locale.doc["operators"][direction.value]
    return locale.doc["continuous_sentence"].format(
        subject=feature["subject"], op=op, value=_format_threshold(threshold))


def build_explanation(tree: DecisionTree, node_id: int, fact_leaf: int,
                      strategy: Strategy, locale: Optional[Locale] = None) -> Explanation:
    branch = tree.node(node_id)
    direction = fact_direction(tree, node_id, fact_leaf)
    text = render(branch.feature_index, direction, branch.threshold, locale)
    return Explanation(
        node_id=node_id,
        feature_index=branch.feature_index,
        direction=direction,
        threshold=branch.threshold,
        strategy=strategy,
        text=text,
        word_count=len(text.split()),
    )


def explain_why(ctx: StepContext, path: DescentResult, tracker: UsageTracker,
                contrastive: bool, locale: Optional[Locale] = None) -> Explanation:
    """Full fallback ladder: contrastive -> classical (tagged as fallback)
    -> NoExplanationAvailable for the caller to render `no reason`."""
    if contrastive:
        foil = predict_foil(ctx)
        if foil is not None and foil != ctx.fact_leaf:
            node_id = select_contrastive(ctx.tree, ctx.fact_leaf, foil)
            return build_explanation(ctx.tree, node_id, ctx.fact_leaf,
                                     Strategy.CONTRASTIVE, locale)
        node_id = select_classical(path, tracker)
        return build_explanation(ctx.tree, node_id, ctx.fact_leaf,
                                 Strategy.CONTRASTIVE_FALLBACK, locale)
    node_id = select_classical(path, tracker)
    return build_explanation(ctx.tree, node_id, ctx.fact_leaf, Strategy.CLASSICAL, locale)
