"""HTTP wire API for sessions: request/response endpoints plus a
server-sent-events stream for clock, state, anomaly, phase, and seal
events. Payloads carry explicit action indices and the action/feature
order fingerprints so clients can fail loudly on mismatches.

The UI is deliberately condition-blind: explanation payloads carry the
rendered text (and structured fields for logging), and a session's
strategy never changes what the client is told to render.
"""
from __future__ import annotations

import asyncio
import json
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from .plant import ACTION_ORDER, FEATURE_ORDER, Action, PlantConfig, load_plant_config
from .session import (
    Condition,
    DoubleAdvance,
    PhaseExpired,
    ProtocolError,
    Session,
    SessionConfig,
    SessionConfigError,
    SessionSealed,
    VirtualClock,
    WallClock,
    log_to_lines,
)
from .tree import DecisionTree, TreeParseError, deserialize, load_tree

TICK_SECONDS = 1.0


class CreateSessionRequest(BaseModel):
    session_id: str
    condition: str
    training_duration: float = 1800.0
    assessment_duration: float = 600.0
    seed: int = 0
    clock: str = Field(default="wall", pattern="^(wall|virtual)$")
    tree_document: Optional[str] = None  # JSON text; server default when omitted


class ActionRequest(BaseModel):
    action: int


class AdvanceClockRequest(BaseModel):
    seconds: float


class ServiceState:
    """Registry of live sessions plus per-session event fanout."""

    def __init__(self, plant_config: Optional[PlantConfig] = None,
                 default_tree: Optional[DecisionTree] = None,
                 log_dir: Optional[str | Path] = None):
        self.plant_config = plant_config or load_plant_config()
        self.default_tree = default_tree
        self.log_dir = Path(log_dir) if log_dir else None
        self.sessions: dict[str, Session] = {}
        self.clocks: dict[str, object] = {}
        self.subscribers: dict[str, list[asyncio.Queue]] = {}

    def publish(self, session_id: str) -> None:
        session = self.sessions[session_id]
        events = session.drain_events()
        if not events:
            return
        for q in self.subscribers.get(session_id, []):
            for event in events:
                q.put_nowait(event)


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"error": code, "message": message})


def _protocol_status(exc: ProtocolError) -> int:
    if isinstance(exc, (PhaseExpired, SessionSealed, DoubleAdvance)):
        return 409
    return 409


def create_app(state: Optional[ServiceState] = None) -> FastAPI:
    state = state or ServiceState()
    app = FastAPI(title="npplab session service")
    app.state.service = state

    def session_or_404(session_id: str) -> Session:
        try:
            return state.sessions[session_id]
        except KeyError:
            raise _error(404, "unknown_session", f"no session {session_id!r}") from None

    def parse_action(index: int) -> Action:
        try:
            return Action(index)
        except ValueError:
            raise _error(422, "bad_action", f"action index {index} out of range") from None

    def run(session_id: str, fn):
        """Run a session mutator, mapping protocol errors and pushing events."""
        session = session_or_404(session_id)
        try:
            result = fn(session)
        except ProtocolError as exc:
            state.publish(session_id)
            raise _error(_protocol_status(exc), exc.code, str(exc)) from exc
        state.publish(session_id)
        return result

    @app.get("/meta")
    def meta():
        return {"action_order": list(ACTION_ORDER), "feature_order": list(FEATURE_ORDER)}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        if req.session_id in state.sessions:
            raise _error(409, "duplicate_session", f"session {req.session_id!r} exists")
        try:
            condition = Condition(req.condition)
        except ValueError:
            raise _error(422, "bad_condition", f"unknown condition {req.condition!r}") from None
        tree = None
        if condition == Condition.SELF_TAUGHT:
            if req.tree_document is not None:
                raise _error(422, "self_taught_tree", "self-taught sessions take no tree")
        else:
            if req.tree_document is not None:
                try:
                    tree = deserialize(req.tree_document)
                except TreeParseError as exc:
                    raise _error(422, "bad_tree", str(exc)) from exc
            else:
                tree = state.default_tree
            if tree is None:
                raise _error(422, "missing_tree",
                             "agent conditions need a tree document (none configured)")
        clock = WallClock() if req.clock == "wall" else VirtualClock()
        config = SessionConfig(
            condition=condition, session_id=req.session_id,
            training_duration=req.training_duration,
            assessment_duration=req.assessment_duration, seed=req.seed,
        )
        log_path = None
        if state.log_dir is not None:
            state.log_dir.mkdir(parents=True, exist_ok=True)
            log_path = state.log_dir / f"{req.session_id}.jsonl"
        try:
            session = Session(config, state.plant_config, tree,
                              clock=clock, log_path=log_path)
        except SessionConfigError as exc:
            raise _error(422, "bad_config", str(exc)) from exc
        state.sessions[req.session_id] = session
        state.clocks[req.session_id] = clock
        state.subscribers.setdefault(req.session_id, [])
        view = session.view()
        view["action_order"] = list(ACTION_ORDER)
        view["feature_order"] = list(FEATURE_ORDER)
        return view

    @app.get("/sessions/{session_id}/state")
    def get_state(session_id: str):
        session = session_or_404(session_id)
        view = session.view()
        state.publish(session_id)
        view["action_order"] = list(ACTION_ORDER)
        view["feature_order"] = list(FEATURE_ORDER)
        return view

    @app.post("/sessions/{session_id}/pre-select")
    def pre_select(session_id: str, req: ActionRequest):
        action = parse_action(req.action)
        run(session_id, lambda s: s.pre_select(action))
        return {"ok": True, "pre_selected": int(action)}

    @app.post("/sessions/{session_id}/ask-what")
    def ask_what(session_id: str):
        suggestion = run(session_id, lambda s: s.ask_what())
        return {"action": int(suggestion), "action_name": suggestion.wire_name}

    @app.post("/sessions/{session_id}/ask-why")
    def ask_why(session_id: str):
        session = session_or_404(session_id)
        explanation = run(session_id, lambda s: s.ask_why())
        if explanation is None:
            return {"explanation": None, "notice": session.locale.no_reason}
        return {"explanation": {
            "text": explanation.text,
            "node_id": explanation.node_id,
            "feature_index": explanation.feature_index,
            "feature": FEATURE_ORDER[explanation.feature_index],
            "direction": explanation.direction.value,
            "threshold": explanation.threshold,
            "strategy": explanation.strategy.value,
            "word_count": explanation.word_count,
        }}

    @app.post("/sessions/{session_id}/commit-action")
    def commit_action(session_id: str, req: ActionRequest):
        action = parse_action(req.action)
        outcome = run(session_id, lambda s: s.commit_action(action))
        session = state.sessions[session_id]
        return {
            "energy": outcome.energy,
            "anomaly": outcome.anomaly.value if outcome.anomaly else None,
            "critic": outcome.is_critic_step,
            "fission_active": outcome.fission_active,
            "view": session.view(),
        }

    @app.post("/sessions/{session_id}/advance-phase")
    def advance_phase(session_id: str):
        phase = run(session_id, lambda s: s.advance_phase())
        return {"phase": phase.value}

    @app.post("/sessions/{session_id}/seal")
    def seal(session_id: str):
        run(session_id, lambda s: s.seal())
        return {"sealed": True}

    @app.get("/sessions/{session_id}/log")
    def get_log(session_id: str):
        session = session_or_404(session_id)
        return {"lines": log_to_lines(session.sealed_log())}

    @app.post("/sessions/{session_id}/clock/advance")
    def advance_clock(session_id: str, req: AdvanceClockRequest):
        session = session_or_404(session_id)
        clock = state.clocks[session_id]
        if not isinstance(clock, VirtualClock):
            raise _error(409, "wall_clock", "session runs on the wall clock")
        clock.advance(req.seconds)
        session.check_clock()
        state.publish(session_id)
        return {"now": clock.now(), "phase": session.phase.value}

    @app.get("/sessions/{session_id}/events")
    async def events(session_id: str, request: Request):
        session = session_or_404(session_id)
        queue: asyncio.Queue = asyncio.Queue()
        state.subscribers[session_id].append(queue)

        async def stream():
            try:
                yield _sse({"type": "hello", "session_id": session_id,
                            "phase": session.phase.value})
                while True:
                    event = None
                    try:
                        event = await asyncio.wait_for(queue.get(), timeout=TICK_SECONDS)
                    except asyncio.TimeoutError:
                        session.check_clock()
                        state.publish(session_id)
                    if await request.is_disconnected():
                        return
                    if event is None:
                        event = {"type": "tick", "phase": session.phase.value,
                                 "remaining_seconds": session.remaining_seconds()}
                    yield _sse(event)
            finally:
                state.subscribers[session_id].remove(queue)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def _sse(event: dict) -> str:
    return f"data: {json.dumps(event, sort_keys=True)}\n\n"


def build_service(plant_config_path: Optional[str] = None,
                  tree_path: Optional[str] = None,
                  log_dir: Optional[str] = None) -> FastAPI:
    plant_config = load_plant_config(plant_config_path)
    tree = load_tree(tree_path) if tree_path else None
    return create_app(ServiceState(plant_config, tree, log_dir))
