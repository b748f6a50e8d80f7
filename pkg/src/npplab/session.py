"""Session orchestration: the two-phase protocol (training then assessment),
query-gated agent interaction, move classification, timing, and durable
line-delimited logging with deterministic replay validation.

Per step the allowed order is: pre_select? -> ask_what? -> ask_why? ->
commit. The agent never volunteers anything; a why-question requires a
what-question first. Phase clocks are pluggable so fleets can run in
compressed virtual time while human sessions use the wall clock.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .explain import (
    Explanation,
    NoExplanationAvailable,
    StepContext,
    Strategy,
    UsageTracker,
    answer_what,
    default_locale,
    explain_why,
)
from .plant import (
    Action,
    AnomalyKind,
    PlantConfig,
    PlantState,
    StepOutcome,
    state_vector,
    step as plant_step,
)
from .tree import DecisionTree, Direction

LOG_SCHEMA_VERSION = "1"


class Condition(str, Enum):
    CXAI = "cxai"
    AXAI = "axai"
    SELF_TAUGHT = "self"


class Phase(str, Enum):
    TRAINING = "training"
    ASSESSMENT = "assessment"
    SEALED = "sealed"


class MoveType(str, Enum):
    EQUAL = "equal"
    FOLLOW_SELF = "follow_self"
    FOLLOW_AI = "follow_ai"
    OTHER = "other"


class ProtocolError(Exception):
    """Base for per-step protocol order violations."""
    code = "protocol_error"


class DuplicatePreSelect(ProtocolError):
    code = "duplicate_pre_select"


class PreSelectAfterQuery(ProtocolError):
    code = "pre_select_after_query"


class WhyBeforeWhat(ProtocolError):
    code = "why_before_what"


class AgentNotAvailable(ProtocolError):
    code = "agent_not_available"


class PhaseExpired(ProtocolError):
    code = "phase_expired"


class SessionSealed(ProtocolError):
    code = "session_sealed"


class DoubleAdvance(ProtocolError):
    code = "double_advance"


class SessionConfigError(ValueError):
    pass


class ReplayMismatch(AssertionError):
    """Replaying the log did not reproduce the recorded outcomes."""


# ---------------------------------------------------------------------------
# Clocks


class WallClock:
    def now(self) -> float:
        return time.monotonic()


class VirtualClock:
    """Deterministic manual clock for compressed-time fleets and tests."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot advance a clock backwards")
        self._now += seconds
        return self._now


# ---------------------------------------------------------------------------
# Config and records


@dataclass(frozen=True)
class SessionConfig:
    condition: Condition
    session_id: str
    training_duration: float = 1800.0
    assessment_duration: float = 600.0
    seed: int = 0
    plant_config_ref: Optional[str] = None
    tree_ref: Optional[str] = None

    def validate(self, tree: Optional[DecisionTree]) -> None:
        if self.training_duration <= 0 or self.assessment_duration <= 0:
            raise SessionConfigError("phase durations must be > 0")
        if not self.session_id:
            raise SessionConfigError("session_id must be non-empty")
        if self.condition == Condition.SELF_TAUGHT:
            if tree is not None:
                raise SessionConfigError("self-taught sessions take no tree")
        elif tree is None:
            raise SessionConfigError(f"{self.condition.value} sessions need a tree")


@dataclass
class MoveRecord:
    step_index: int
    phase: Phase
    pre_selected: Optional[Action]
    asked_what: bool
    asked_why: bool
    suggestion: Optional[Action]
    explanation: Optional[Explanation]
    final_action: Action
    decision_time_ms: float
    move_type: Optional[MoveType]
    energy: float
    anomaly: Optional[AnomalyKind]
    critic: bool
    state_after: list  # 8-feature vector, lets logs replay exactly


@dataclass
class Totals:
    actions: int = 0
    energy: float = 0.0
    anomalies: int = 0
    critic_steps: int = 0


@dataclass
class SessionLog:
    session_id: str
    schema_version: str
    config: dict
    records: list = field(default_factory=list)       # list[MoveRecord]
    phase_events: list = field(default_factory=list)  # [{phase, at_seconds}]
    totals: Totals = field(default_factory=Totals)
    sealed: bool = False

    def recompute_totals(self) -> Totals:
        t = Totals()
        for r in self.records:
            t.actions += 1
            t.energy += r.energy
            t.anomalies += r.anomaly is not None
            t.critic_steps += r.critic
        return t


def classify_move(pre: Optional[Action], suggestion: Optional[Action],
                  final: Action) -> Optional[MoveType]:
    """Three-way move taxonomy, defined only when both a pre-selection and a
    suggestion exist; a differing final matching neither is `other`."""
    if pre is None or suggestion is None:
        return None
    if pre == suggestion:
        return MoveType.EQUAL
    if final == pre:
        return MoveType.FOLLOW_SELF
    if final == suggestion:
        return MoveType.FOLLOW_AI
    return MoveType.OTHER


# ---------------------------------------------------------------------------
# JSONL persistence


def _explanation_to_dict(e: Optional[Explanation]) -> Optional[dict]:
    if e is None:
        return None
    return {
        "node_id": e.node_id,
        "feature_index": e.feature_index,
        "direction": e.direction.value,
        "threshold": e.threshold,
        "strategy": e.strategy.value,
        "text": e.text,
        "word_count": e.word_count,
    }


def _explanation_from_dict(d: Optional[dict]) -> Optional[Explanation]:
    if d is None:
        return None
    return Explanation(
        node_id=d["node_id"], feature_index=d["feature_index"],
        direction=Direction(d["direction"]), threshold=d["threshold"],
        strategy=Strategy(d["strategy"]), text=d["text"], word_count=d["word_count"],
    )


def record_to_dict(r: MoveRecord) -> dict:
    return {
        "kind": "move",
        "step_index": r.step_index,
        "phase": r.phase.value,
        "pre_selected": int(r.pre_selected) if r.pre_selected is not None else None,
        "asked_what": r.asked_what,
        "asked_why": r.asked_why,
        "suggestion": int(r.suggestion) if r.suggestion is not None else None,
        "explanation": _explanation_to_dict(r.explanation),
        "final_action": int(r.final_action),
        "decision_time_ms": r.decision_time_ms,
        "move_type": r.move_type.value if r.move_type else None,
        "energy": r.energy,
        "anomaly": r.anomaly.value if r.anomaly else None,
        "critic": r.critic,
        "state_after": r.state_after,
    }


def record_from_dict(d: dict) -> MoveRecord:
    return MoveRecord(
        step_index=d["step_index"],
        phase=Phase(d["phase"]),
        pre_selected=Action(d["pre_selected"]) if d["pre_selected"] is not None else None,
        asked_what=d["asked_what"],
        asked_why=d["asked_why"],
        suggestion=Action(d["suggestion"]) if d["suggestion"] is not None else None,
        explanation=_explanation_from_dict(d["explanation"]),
        final_action=Action(d["final_action"]),
        decision_time_ms=d["decision_time_ms"],
        move_type=MoveType(d["move_type"]) if d["move_type"] else None,
        energy=d["energy"],
        anomaly=AnomalyKind(d["anomaly"]) if d["anomaly"] else None,
        critic=d["critic"],
        state_after=d["state_after"],
    )


def log_to_lines(log: SessionLog) -> list[str]:
    lines = [json.dumps({
        "kind": "header", "schema_version": log.schema_version,
        "session_id": log.session_id, "config": log.config,
    }, sort_keys=True)]
    # splice each phase event right before the first move of that phase
    events = list(log.phase_events)
    for r in log.records:
        while events and events[0]["phase"] == r.phase.value:
            lines.append(json.dumps({"kind": "phase", **events.pop(0)}, sort_keys=True))
        lines.append(json.dumps(record_to_dict(r), sort_keys=True))
    for e in events:
        lines.append(json.dumps({"kind": "phase", **e}, sort_keys=True))
    if log.sealed:
        lines.append(json.dumps({
            "kind": "seal",
            "totals": {"actions": log.totals.actions, "energy": log.totals.energy,
                       "anomalies": log.totals.anomalies, "critic_steps": log.totals.critic_steps},
        }, sort_keys=True))
    return lines


def log_from_lines(lines) -> SessionLog:
    log: Optional[SessionLog] = None
    for raw in lines:
        raw = raw.strip()
        if not raw:
            continue
        d = json.loads(raw)
        kind = d.get("kind")
        if kind == "header":
            log = SessionLog(session_id=d["session_id"],
                             schema_version=str(d["schema_version"]), config=d["config"])
        elif log is None:
            raise ValueError("log does not start with a header line")
        elif kind == "move":
            log.records.append(record_from_dict(d))
        elif kind == "phase":
            log.phase_events.append({"phase": d["phase"], "at_seconds": d["at_seconds"]})
        elif kind == "seal":
            t = d["totals"]
            log.totals = Totals(actions=t["actions"], energy=t["energy"],
                                anomalies=t["anomalies"], critic_steps=t["critic_steps"])
            log.sealed = True
        else:
            raise ValueError(f"unknown log line kind {kind!r}")
    if log is None:
        raise ValueError("empty session log")
    return log


def save_log(log: SessionLog, path: str | Path) -> None:
    Path(path).write_text("\n".join(log_to_lines(log)) + "\n")


def load_log(path: str | Path) -> SessionLog:
    with open(path) as fh:
        return log_from_lines(fh)


def replay_log(log: SessionLog, plant_config: PlantConfig) -> None:
    """Re-run every final action from the initial state and require the
    logged energy/anomaly/critic flags and post-states to match exactly.
    Raises ReplayMismatch on the first difference."""
    state = plant_config.initial_state
    current_phase = None
    for r in log.records:
        if r.phase != current_phase:
            state = plant_config.initial_state  # each phase starts fresh
            current_phase = r.phase
        outcome = plant_step(state, r.final_action, plant_config)
        got = (outcome.energy, outcome.anomaly, outcome.is_critic_step,
               state_vector(outcome.next_state))
        want = (r.energy, r.anomaly, r.critic, list(r.state_after))
        if got != want:
            raise ReplayMismatch(
                f"step {r.step_index}: replay produced {got}, log has {want}")
        state = outcome.next_state
    recomputed = log.recompute_totals()
    if log.sealed and recomputed != log.totals:
        raise ReplayMismatch(f"sealed totals {log.totals} != recomputed {recomputed}")


# ---------------------------------------------------------------------------
# The session engine


@dataclass
class _OpenStep:
    index: int
    opened_at: float
    pre_selected: Optional[Action] = None
    asked_what: bool = False
    asked_why: bool = False
    suggestion: Optional[Action] = None
    descent = None
    explanation: Optional[Explanation] = None


class Session:
    """One participant session. Mutators run under a per-session lock and
    check the phase clock first, so expiry transitions happen lazily on the
    next call after the deadline passes."""

    def __init__(self, config: SessionConfig, plant_config: PlantConfig,
                 tree: Optional[DecisionTree], clock=None,
                 log_path: Optional[str | Path] = None):
        config.validate(tree)
        self.config = config
        self.plant_config = plant_config
        self.tree = tree
        self.clock = clock if clock is not None else WallClock()
        self.locale = default_locale()
        self.lock = threading.RLock()

        self.state: PlantState = plant_config.initial_state
        self.phase = Phase.TRAINING
        self.session_started = self.clock.now()
        self.phase_started = self.session_started
        self.deadline = self.phase_started + config.training_duration
        self.tracker = UsageTracker()
        self.step_counter = 0
        self._step = _OpenStep(index=0, opened_at=self.phase_started)
        self._pending_events: list[dict] = []

        self.log = SessionLog(
            session_id=config.session_id,
            schema_version=LOG_SCHEMA_VERSION,
            config={
                "condition": config.condition.value,
                "training_duration": config.training_duration,
                "assessment_duration": config.assessment_duration,
                "seed": config.seed,
                "plant_config_ref": config.plant_config_ref,
                "tree_ref": config.tree_ref,
            },
        )
        self.log.phase_events.append({"phase": Phase.TRAINING.value, "at_seconds": 0.0})
        self._log_file = None
        if log_path is not None:
            self._log_file = open(log_path, "a")
            self._append_line(json.dumps({
                "kind": "header", "schema_version": LOG_SCHEMA_VERSION,
                "session_id": config.session_id, "config": self.log.config,
            }, sort_keys=True))
            self._append_line(json.dumps(
                {"kind": "phase", "phase": Phase.TRAINING.value, "at_seconds": 0.0},
                sort_keys=True))

    # -- plumbing

    def _append_line(self, line: str) -> None:
        if self._log_file is not None:
            self._log_file.write(line + "\n")
            self._log_file.flush()

    def _emit(self, event: dict) -> None:
        self._pending_events.append(event)

    def drain_events(self) -> list[dict]:
        """Events accumulated since the last drain (for server push)."""
        with self.lock:
            events, self._pending_events = self._pending_events, []
            return events

    def remaining_seconds(self) -> float:
        with self.lock:
            if self.phase == Phase.SEALED:
                return 0.0
            return max(0.0, self.deadline - self.clock.now())

    # -- phase machinery

    def check_clock(self) -> int:
        """Apply due phase transitions; returns how many happened. Called by
        every mutator and by the service tick loop."""
        with self.lock:
            transitions = 0
            while self.phase != Phase.SEALED and self.clock.now() >= self.deadline:
                self._advance(auto=True)
                transitions += 1
            return transitions

    def _advance(self, auto: bool) -> None:
        now = self.clock.now()
        at = now - self.session_started
        if self.phase == Phase.TRAINING:
            self.phase = Phase.ASSESSMENT
            self.phase_started = now
            self.deadline = now + self.config.assessment_duration
            self.state = self.plant_config.initial_state
            self.tracker.clear()
            self._step = _OpenStep(index=self.step_counter, opened_at=now)
            self.log.phase_events.append({"phase": Phase.ASSESSMENT.value, "at_seconds": at})
            self._append_line(json.dumps(
                {"kind": "phase", "phase": Phase.ASSESSMENT.value, "at_seconds": at},
                sort_keys=True))
            self._emit({"type": "phase", "phase": Phase.ASSESSMENT.value})
        elif self.phase == Phase.ASSESSMENT:
            self._seal()
        else:
            raise DoubleAdvance("session already sealed")

    def advance_phase(self) -> Phase:
        """Operator override: end the current phase now."""
        with self.lock:
            if self.phase == Phase.SEALED:
                raise DoubleAdvance("session already sealed")
            self._advance(auto=False)
            return self.phase

    def seal(self) -> None:
        """Operator override: seal immediately regardless of phase."""
        with self.lock:
            if self.phase == Phase.SEALED:
                raise DoubleAdvance("session already sealed")
            self._seal()

    def _seal(self) -> None:
        self.phase = Phase.SEALED
        self.log.totals = self.log.recompute_totals()
        self.log.sealed = True
        self._append_line(json.dumps({
            "kind": "seal",
            "totals": {"actions": self.log.totals.actions, "energy": self.log.totals.energy,
                       "anomalies": self.log.totals.anomalies,
                       "critic_steps": self.log.totals.critic_steps},
        }, sort_keys=True))
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        self._emit({"type": "seal", "totals": {
            "actions": self.log.totals.actions, "energy": self.log.totals.energy,
            "anomalies": self.log.totals.anomalies,
            "critic_steps": self.log.totals.critic_steps}})

    def _require_active(self) -> None:
        """Reject mutations once the phase clock has run out: the open step
        is discarded, the due transition applies, and the caller gets a
        PhaseExpired (or SessionSealed) to retry in the new phase."""
        transitions = self.check_clock()
        if self.phase == Phase.SEALED:
            raise SessionSealed("session is sealed")
        if transitions:
            raise PhaseExpired(f"phase clock ran out; now in {self.phase.value}")

    # -- the protocol

    def pre_select(self, action: Action) -> None:
        with self.lock:
            self._require_active()
            step = self._step
            if step.asked_what or step.asked_why:
                raise PreSelectAfterQuery("pre-selection must precede agent queries")
            if step.pre_selected is not None:
                raise DuplicatePreSelect("only one pre-selection per step")
            step.pre_selected = action

    def ask_what(self) -> Action:
        with self.lock:
            self._require_active()
            if self.config.condition == Condition.SELF_TAUGHT:
                raise AgentNotAvailable("self-taught sessions have no agent")
            step = self._step
            if step.asked_what:
                return step.suggestion  # idempotent within the step
            suggestion, descent = answer_what(self.tree, state_vector(self.state))
            step.asked_what = True
            step.suggestion = suggestion
            step.descent = descent
            return suggestion

    def ask_why(self) -> Optional[Explanation]:
        """Explanation for the current suggestion, or None when the tree has
        no branch to cite (callers render the no-reason notice)."""
        with self.lock:
            self._require_active()
            if self.config.condition == Condition.SELF_TAUGHT:
                raise AgentNotAvailable("self-taught sessions have no agent")
            step = self._step
            if not step.asked_what:
                raise WhyBeforeWhat("why-questions must follow a what-question")
            if step.asked_why:
                return step.explanation  # idempotent within the step
            ctx = StepContext(tree=self.tree, fact_leaf=step.descent.leaf_id,
                              pre_selected=step.pre_selected)
            try:
                explanation = explain_why(
                    ctx, step.descent, self.tracker,
                    contrastive=self.config.condition == Condition.AXAI,
                    locale=self.locale)
            except NoExplanationAvailable:
                explanation = None
            step.asked_why = True
            step.explanation = explanation
            return explanation

    def commit_action(self, action: Action) -> StepOutcome:
        with self.lock:
            self._require_active()
            step = self._step
            now = self.clock.now()
            outcome = plant_step(self.state, action, self.plant_config)
            record = MoveRecord(
                step_index=step.index,
                phase=self.phase,
                pre_selected=step.pre_selected,
                asked_what=step.asked_what,
                asked_why=step.asked_why,
                suggestion=step.suggestion,
                explanation=step.explanation,
                final_action=action,
                decision_time_ms=(now - step.opened_at) * 1000.0,
                move_type=classify_move(step.pre_selected, step.suggestion, action)
                if step.asked_what else None,
                energy=outcome.energy,
                anomaly=outcome.anomaly,
                critic=outcome.is_critic_step,
                state_after=state_vector(outcome.next_state),
            )
            self.log.records.append(record)
            self._append_line(json.dumps(record_to_dict(record), sort_keys=True))
            self.state = outcome.next_state
            self.step_counter += 1
            self._step = _OpenStep(index=self.step_counter, opened_at=now)
            self._emit({
                "type": "state",
                "step_index": record.step_index,
                "state": record.state_after,
                "energy": record.energy,
                "anomaly": record.anomaly.value if record.anomaly else None,
                "totals": self._totals_dict(),
            })
            if record.anomaly is not None:
                self._emit({"type": "anomaly", "anomaly": record.anomaly.value})
            return outcome

    # -- views

    def _totals_dict(self) -> dict:
        t = self.log.recompute_totals()
        return {"actions": t.actions, "energy": t.energy,
                "anomalies": t.anomalies, "critic_steps": t.critic_steps}

    def view(self) -> dict:
        """Wire-facing snapshot of the session."""
        with self.lock:
            self.check_clock()
            step = self._step
            return {
                "session_id": self.config.session_id,
                "condition": self.config.condition.value,
                "phase": self.phase.value,
                "step_index": step.index,
                "state": state_vector(self.state),
                "remaining_seconds": self.remaining_seconds(),
                "step_flags": {
                    "pre_selected": int(step.pre_selected) if step.pre_selected is not None else None,
                    "asked_what": step.asked_what,
                    "asked_why": step.asked_why,
                },
                "totals": self._totals_dict(),
            }

    def sealed_log(self) -> SessionLog:
        if not self.log.sealed:
            self.log.totals = self.log.recompute_totals()
        return self.log
