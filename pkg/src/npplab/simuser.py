"""Scripted user policies that drive sessions headlessly in compressed
virtual time, standing in for human participants so protocol-level
quantities (explanandum distributions, move types, decision-time slices)
can be reproduced at desk scale.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

from .plant import Action, PlantConfig, PlantState, RodLevel
from .session import (
    Condition,
    PhaseExpired,
    Session,
    SessionConfig,
    SessionLog,
    SessionSealed,
    VirtualClock,
)
from .tree import DecisionTree


class PolicyKind(str, Enum):
    RANDOM = "random"
    GREEDY_NOVICE = "greedy_novice"
    ALWAYS_ASK = "always_ask"
    NEVER_ASK = "never_ask"
    FOLLOW_AI_WITH_PROB = "follow_ai_with_prob"
    SELF_ANCHORED = "self_anchored"


@dataclass(frozen=True)
class SimUserPolicy:
    kind: PolicyKind
    seed: int = 0
    p_what: float = 1.0
    p_why: float = 0.5
    follow_prob: float = 0.5          # only FOLLOW_AI_WITH_PROB
    step_seconds: tuple = (2.0, 15.0)  # virtual thinking time per step

    def __post_init__(self):
        for name in ("p_what", "p_why", "follow_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        lo, hi = self.step_seconds
        if lo <= 0 or hi < lo:
            raise ValueError("step_seconds must be (lo, hi) with 0 < lo <= hi")


def novice_heuristic(state: PlantState) -> tuple[Action, bool]:
    """A hand-rolled beginner rule: get fission going, keep water topped up,
    cool down when hot. Returns (action, confident); Skip means indifferent."""
    if state.security_rods != RodLevel.UP:
        return Action.SECURITY_UP, True
    if state.fuel_rods == RodLevel.UP:
        return Action.FUEL_DOWN, True
    if state.sg_water < 40:
        return Action.ADD_WATER_LARGE, True
    if state.temperature > 300:
        return Action.ADD_WATER_MEDIUM, True
    if state.pressure > 420:
        return Action.ADD_WATER_SMALL, True
    return Action.SKIP, False


def run_episode(policy: SimUserPolicy, session: Session, clock: VirtualClock) -> SessionLog:
    """Drive the full protocol until the session seals; returns the sealed
    log. The session must be on the supplied virtual clock."""
    rng = random.Random(policy.seed)
    while True:
        think = rng.uniform(*policy.step_seconds)
        clock.advance(think)

        pre, confident = _pre_selection(policy, session.state, rng)
        has_agent = session.config.condition != Condition.SELF_TAUGHT
        try:
            if pre is not None:
                session.pre_select(pre)
            suggestion: Optional[Action] = None
            if has_agent and _wants(policy, rng, what=True):
                suggestion = session.ask_what()
                if rng.random() < policy.p_why:
                    session.ask_why()
            final = _final_action(policy, pre, confident, suggestion, rng)
            session.commit_action(final)
        except PhaseExpired:
            continue
        except SessionSealed:
            break
    return session.sealed_log()


def _pre_selection(policy: SimUserPolicy, state: PlantState, rng: random.Random):
    if policy.kind in (PolicyKind.GREEDY_NOVICE, PolicyKind.SELF_ANCHORED):
        action, confident = novice_heuristic(state)
        return action, confident
    return Action(rng.randrange(12)), True


def _wants(policy: SimUserPolicy, rng: random.Random, what: bool) -> bool:
    if policy.kind == PolicyKind.NEVER_ASK:
        return False
    if policy.kind in (PolicyKind.ALWAYS_ASK, PolicyKind.FOLLOW_AI_WITH_PROB):
        return True
    return rng.random() < policy.p_what


def _final_action(policy: SimUserPolicy, pre: Action, confident: bool,
                  suggestion: Optional[Action], rng: random.Random) -> Action:
    if suggestion is None:
        return pre
    if policy.kind == PolicyKind.ALWAYS_ASK:
        return suggestion
    if policy.kind == PolicyKind.FOLLOW_AI_WITH_PROB:
        return suggestion if rng.random() < policy.follow_prob else pre
    if policy.kind == PolicyKind.SELF_ANCHORED and not confident:
        return suggestion
    return pre


def make_session(condition: Condition, session_id: str, plant_config: PlantConfig,
                 tree: Optional[DecisionTree], seed: int,
                 training_duration: float = 1800.0, assessment_duration: float = 600.0,
                 log_path: Optional[str | Path] = None) -> tuple[Session, VirtualClock]:
    """A session on a fresh virtual clock, ready for run_episode."""
    clock = VirtualClock()
    config = SessionConfig(
        condition=condition, session_id=session_id, seed=seed,
        training_duration=training_duration, assessment_duration=assessment_duration,
    )
    session = Session(config, plant_config,
                      tree if condition != Condition.SELF_TAUGHT else None,
                      clock=clock, log_path=log_path)
    return session, clock


def run_fleet(n: int, condition: Condition, policy_kind: PolicyKind,
              plant_config: PlantConfig, tree: Optional[DecisionTree],
              base_seed: int = 0, out_dir: Optional[str | Path] = None,
              training_duration: float = 1800.0, assessment_duration: float = 600.0,
              p_what: float = 1.0, p_why: float = 0.5,
              follow_prob: float = 0.5) -> list[SessionLog]:
    """N seeded sessions run to seal, sequentially and deterministically.
    With out_dir set, each sealed log lands in `<out_dir>/<session_id>.jsonl`."""
    logs = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        seed = base_seed + i
        session_id = f"{condition.value}-{policy_kind.value}-{i:03d}"
        log_path = out_dir / f"{session_id}.jsonl" if out_dir is not None else None
        policy = SimUserPolicy(kind=policy_kind, seed=seed, p_what=p_what,
                               p_why=p_why, follow_prob=follow_prob)
        session, clock = make_session(
            condition, session_id, plant_config, tree, seed,
            training_duration, assessment_duration, log_path=log_path)
        logs.append(run_episode(policy, session, clock))
    return logs
