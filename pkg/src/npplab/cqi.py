"""Conservative Q-Improvement: grow a decision-tree policy by tabular
Q-learning on the leaves, splitting a leaf only when the estimated policy
improvement of the best candidate split beats a decaying threshold.

Each leaf keeps per-candidate side statistics (a Q-array and a decayed
visit count per side). A candidate's value is zero unless its two sides
disagree on the best action, so a split can fire only when it would
actually change behavior somewhere — that is the conservatism.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .plant import (
    Action,
    N_ACTIONS,
    PlantConfig,
    PlantState,
    StepOutcome,
    apply_action,
    end_of_step,
    state_vector,
)
from .tree import DecisionTree, LeafNode

CONTINUOUS_FEATURES = (0, 1, 2, 3)          # temperature, pressure, sg_water, power
ROD_FEATURES = (4, 5, 6, 7)
ROD_THRESHOLDS = (0.5, 1.5)                  # mid-level cuts for the ordinal rods
DECILES = tuple(i / 10 for i in range(1, 10))


class TrainingFailedError(RuntimeError):
    """Training finished but the greedy policy failed the safety rollout."""

    def __init__(self, episodes_run: int, tree_nodes: int, anomaly_step: int):
        self.episodes_run = episodes_run
        self.tree_nodes = tree_nodes
        self.anomaly_step = anomaly_step
        super().__init__(
            f"trained policy tripped an anomaly at rollout step {anomaly_step} "
            f"(episodes={episodes_run}, tree nodes={tree_nodes})")


@dataclass(frozen=True)
class RewardWeights:
    energy_weight: float = 1.0
    anomaly_penalty: float = 100.0
    no_effect_penalty: float = 0.1


@dataclass
class TrainConfig:
    gamma: float = 0.95
    alpha: float = 0.1
    alpha_decay: float = 0.999           # per episode
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.6  # linear decay over this share of episodes
    episodes: int = 2000
    steps_per_episode: int = 180
    split_threshold: float = 1.0
    split_threshold_decay: float = 0.9999  # per step; threshold re-arms after a split
    visit_decay: float = 0.999
    candidate_warmup: int = 50           # leaf visits before candidates exist
    weights: RewardWeights = field(default_factory=RewardWeights)
    seed: int = 4

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        for name in ("alpha_decay", "split_threshold_decay", "visit_decay"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if not (0.0 <= self.epsilon_decay_fraction <= 1.0):
            raise ValueError("epsilon_decay_fraction must be in [0, 1]")
        if self.episodes < 0 or self.steps_per_episode <= 0:
            raise ValueError("episodes must be >= 0 and steps_per_episode > 0")
        if self.split_threshold <= 0:
            raise ValueError("split_threshold must be > 0")
        if self.candidate_warmup <= 0:
            raise ValueError("candidate_warmup must be > 0")

    def epsilon(self, episode: int) -> float:
        horizon = self.episodes * self.epsilon_decay_fraction
        if horizon <= 0 or episode >= horizon:
            return self.epsilon_end
        frac = episode / horizon
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def train_config_from_dict(doc: dict) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"train_config: unknown fields {sorted(extra)}")
    kwargs = dict(doc)
    if "weights" in kwargs and isinstance(kwargs["weights"], dict):
        kwargs["weights"] = RewardWeights(**kwargs["weights"])
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def reward(
    prev: PlantState,
    action: Action,
    outcome: StepOutcome,
    weights: RewardWeights,
    config: PlantConfig,
) -> float:
    """energy - anomaly penalty - penalty for actions that changed nothing.

    The no-effect test re-derives apply_action(prev, action), so the plant
    config is needed alongside the outcome.
    """
    r = weights.energy_weight * outcome.energy
    if outcome.anomaly is not None:
        r -= weights.anomaly_penalty
    if apply_action(prev, action, config) == prev:
        r -= weights.no_effect_penalty
    return r


# ---------------------------------------------------------------------------
# Per-leaf candidate-split statistics


class LeafStats:
    """Warmup buffer, then vectorized candidate-split statistics.

    Candidate thresholds: deciles of the warmup observations for each
    continuous feature plus the fixed mid-level cuts for each rod feature.
    Each candidate tracks a Q-array and a decayed visit count per side.
    """

    __slots__ = ("warmup", "buffer", "feat", "thr", "q", "visits", "freq", "freq_step")

    def __init__(self, warmup: int, init_freq: float = 0.0):
        self.warmup = warmup
        self.buffer: list = []
        self.feat: Optional[np.ndarray] = None    # (C,) feature index per candidate
        self.thr: Optional[np.ndarray] = None     # (C,) threshold per candidate
        self.q: Optional[np.ndarray] = None       # (C, 2, N_ACTIONS); 0 = left side
        self.visits: Optional[np.ndarray] = None  # (C, 2) decayed side visit counts
        self.freq = init_freq                     # decayed leaf visit frequency
        self.freq_step = 0                        # step of last freq update

    @property
    def ready(self) -> bool:
        return self.feat is not None

    def bump_freq(self, step_index: int, visit_decay: float) -> None:
        self.freq = self.freq * visit_decay ** (step_index - self.freq_step) + 1.0
        self.freq_step = step_index

    def current_freq(self, step_index: int, visit_decay: float) -> float:
        return self.freq * visit_decay ** (step_index - self.freq_step)

    def observe(self, vec, leaf_q: np.ndarray) -> None:
        """Collect a warmup observation; instantiate candidates when full."""
        self.buffer.append(list(vec))
        if len(self.buffer) < self.warmup:
            return
        data = np.asarray(self.buffer, dtype=float)
        feats, thrs = [], []
        for f in CONTINUOUS_FEATURES:
            values = np.quantile(data[:, f], DECILES)
            for t in dict.fromkeys(float(v) for v in values):  # dedup, keep order
                feats.append(f)
                thrs.append(t)
        for f in ROD_FEATURES:
            for t in ROD_THRESHOLDS:
                feats.append(f)
                thrs.append(t)
        self.feat = np.asarray(feats, dtype=np.int64)
        self.thr = np.asarray(thrs, dtype=float)
        c = len(feats)
        self.q = np.tile(leaf_q, (c, 2, 1))
        self.visits = np.zeros((c, 2), dtype=float)
        self.buffer = []

    def update(self, vec, action: int, target: float, alpha: float, visit_decay: float) -> None:
        """One Q-learning update applied to the matching side of every candidate."""
        values = np.asarray(vec, dtype=float)
        sides = (values[self.feat] > self.thr).astype(np.int64)
        rows = np.arange(len(sides))
        self.visits *= visit_decay
        self.visits[rows, sides] += 1.0
        cell = self.q[rows, sides, action]
        self.q[rows, sides, action] = cell + alpha * (target - cell)


def split_values(q: np.ndarray, visits: np.ndarray, freq_weight: float) -> np.ndarray:
    """Estimated policy-improvement value of each candidate split.

    Value is the visit-probability-weighted gain of letting each side play
    its own best action instead of the other side's: exactly zero whenever
    both sides agree on the best action, so agreeing candidates can never
    beat a positive split threshold.
    """
    rows = np.arange(q.shape[0])
    a_left = np.argmax(q[:, 0, :], axis=1)
    a_right = np.argmax(q[:, 1, :], axis=1)
    total = visits.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(total[:, None] > 0, visits / np.where(total[:, None] == 0, 1, total[:, None]), 0.0)
    gain_left = q[rows, 0, a_left] - q[rows, 0, a_right]
    gain_right = q[rows, 1, a_right] - q[rows, 1, a_left]
    return freq_weight * (p[:, 0] * gain_left + p[:, 1] * gain_right)


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpisodeMetrics:
    episode: int
    steps: int
    ep_return: float
    energy: float
    anomalies: int
    tree_nodes: int
    tree_leaves: int
    epsilon: float
    alpha: float
    split_threshold: float


@dataclass
class TrainResult:
    tree: DecisionTree
    metrics: list  # list[EpisodeMetrics]
    episodes_run: int
    total_splits: int


def greedy_rollout(tree: DecisionTree, config: PlantConfig, steps: int = 180):
    """Greedy policy rollout from the initial state; returns the trace."""
    from .plant import rollout
    return rollout(config, lambda s: tree.best_action(state_vector(s)), steps)


def train(plant_config: PlantConfig, config: TrainConfig) -> TrainResult:
    """Run CQI training. Fully determined by config.seed.

    Raises TrainingFailedError when the greedy policy of the final tree
    trips any anomaly within a 180-step rollout from the initial state.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tree = DecisionTree.single_leaf()
    stats = {tree.root: LeafStats(config.candidate_warmup)}
    threshold = config.split_threshold
    metrics: list[EpisodeMetrics] = []
    total_splits = 0
    global_step = 0

    for episode in range(config.episodes):
        state = plant_config.initial_state
        alpha = config.alpha * config.alpha_decay ** episode
        epsilon = config.epsilon(episode)
        ep_return = 0.0
        ep_energy = 0.0
        ep_anomalies = 0

        for _ in range(config.steps_per_episode):
            vec = state_vector(state)
            leaf_id = tree.descend(vec).leaf_id
            leaf: LeafNode = tree.nodes[leaf_id]

            if rng.random() < epsilon:
                action = Action(int(rng.integers(N_ACTIONS)))
            else:
                action = Action(int(np.argmax(leaf.q_values)))

            acted = apply_action(state, action, plant_config)
            outcome = end_of_step(acted, plant_config)
            r = config.weights.energy_weight * outcome.energy
            if outcome.anomaly is not None:
                r -= config.weights.anomaly_penalty
            if acted == state:
                r -= config.weights.no_effect_penalty

            next_vec = state_vector(outcome.next_state)
            next_leaf: LeafNode = tree.nodes[tree.descend(next_vec).leaf_id]
            target = r + config.gamma * float(np.max(next_leaf.q_values))

            q = leaf.q_values
            q[action] += alpha * (target - q[action])
            leaf.visit_count += 1
            leaf.action_visits[action] += 1

            st = stats[leaf_id]
            st.bump_freq(global_step, config.visit_decay)
            if st.ready:
                st.update(vec, int(action), target, alpha, config.visit_decay)
            else:
                st.observe(vec, q)

            threshold *= config.split_threshold_decay
            if st.ready:
                freq_w = st.freq * (1.0 - config.visit_decay)
                sv = split_values(st.q, st.visits, freq_w)
                best = int(np.argmax(sv))
                if sv[best] > threshold:
                    left_id, right_id = tree.split_leaf(
                        leaf_id, int(st.feat[best]), float(st.thr[best]))
                    side_total = st.visits[best].sum()
                    p_left = st.visits[best, 0] / side_total if side_total > 0 else 0.5
                    del stats[leaf_id]
                    stats[left_id] = LeafStats(config.candidate_warmup, init_freq=st.freq * p_left)
                    stats[right_id] = LeafStats(config.candidate_warmup, init_freq=st.freq * (1 - p_left))
                    stats[left_id].freq_step = global_step
                    stats[right_id].freq_step = global_step
                    threshold = config.split_threshold
                    total_splits += 1

            ep_return += r
            ep_energy += outcome.energy
            ep_anomalies += outcome.anomaly is not None
            state = outcome.next_state
            global_step += 1

        metrics.append(EpisodeMetrics(
            episode=episode, steps=config.steps_per_episode, ep_return=ep_return,
            energy=ep_energy, anomalies=ep_anomalies, tree_nodes=len(tree.nodes),
            tree_leaves=len(tree.leaf_ids()), epsilon=epsilon, alpha=alpha,
            split_threshold=threshold,
        ))

    trace = greedy_rollout(tree, plant_config, steps=180)
    for i, (_, outcome) in enumerate(trace):
        if outcome.anomaly is not None:
            raise TrainingFailedError(
                episodes_run=config.episodes, tree_nodes=len(tree.nodes), anomaly_step=i)

    return TrainResult(tree=tree, metrics=metrics,
                       episodes_run=config.episodes, total_splits=total_splits)


def write_metrics(path: str | Path, metrics: list) -> None:
    """One JSON object per episode (JSONL)."""
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(asdict(m), sort_keys=True) + "\n")
