"""HTTP front end for the monitor: the same decision engine behind
typed request/response models.

Sessions created here are already established (the hello handshake is a
stream concern); each session's requests are serialized by a lock so
replies follow request order, and the loaded method is shared immutable
state exactly as in the line protocol.
"""

from __future__ import annotations

import itertools
import threading
from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .monitor import MonitorMethod, MonitorSession


class TokenPayload(BaseModel):
    kind: str
    vocab_size: int
    probs: List[float]
    logits: List[float]
    chosen_index: int
    tail_mass: Optional[float] = None

    def to_obj(self) -> dict:
        obj = {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "probs": self.probs,
            "logits": self.logits,
            "chosen_index": self.chosen_index,
        }
        if self.tail_mass is not None:
            obj["tail_mass"] = self.tail_mass
        return obj


class StepPayload(BaseModel):
    step_index: int = Field(ge=0)
    tokens: List[TokenPayload] = Field(min_length=1)


class DecisionPayload(BaseModel):
    step_index: int
    help: bool
    score: float
    degraded: bool
    elapsed_us: int


class SessionInfo(BaseModel):
    session_id: str
    method: str
    max_tokens: int
    step_count: int
    trigger_count: int


class HealthInfo(BaseModel):
    status: str
    version: str
    method: str
    max_tokens: int


class ClosedInfo(BaseModel):
    session_id: str
    closed: bool


def _step_message(payload: StepPayload) -> dict:
    return {
        "type": "step",
        "step_index": payload.step_index,
        "tokens": [t.to_obj() for t in payload.tokens],
    }


def _decision_or_400(reply: dict) -> DecisionPayload:
    if reply["type"] == "error":
        raise HTTPException(status_code=400, detail=reply["error"])
    return DecisionPayload(
        step_index=reply["step_index"],
        help=reply["help"],
        score=reply["score"],
        degraded=reply["degraded"],
        elapsed_us=reply["elapsed_us"],
    )


def create_app(method: MonitorMethod) -> FastAPI:
    app = FastAPI(title="tokenwatch", version=__version__)
    sessions: Dict[str, MonitorSession] = {}
    locks: Dict[str, threading.Lock] = {}
    registry_lock = threading.Lock()
    ids = itertools.count(1)

    def _new_session(session_id: str) -> MonitorSession:
        session = MonitorSession(method, session_id=session_id)
        session.state.established = True
        return session

    def _info(session: MonitorSession) -> SessionInfo:
        return SessionInfo(
            session_id=session.state.session_id,
            method=method.name,
            max_tokens=method.max_tokens,
            step_count=session.state.step_count,
            trigger_count=session.state.trigger_count,
        )

    def _get(session_id: str) -> MonitorSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(
                status_code=404, detail=f"unknown session {session_id!r}"
            )
        return session

    @app.get("/health", response_model=HealthInfo)
    def health() -> HealthInfo:
        return HealthInfo(
            status="ok",
            version=__version__,
            method=method.name,
            max_tokens=method.max_tokens,
        )

    @app.post("/sessions", response_model=SessionInfo)
    def create_session() -> SessionInfo:
        with registry_lock:
            session_id = f"s-{next(ids)}"
            session = _new_session(session_id)
            sessions[session_id] = session
            locks[session_id] = threading.Lock()
        return _info(session)

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def session_info(session_id: str) -> SessionInfo:
        return _info(_get(session_id))

    @app.post("/sessions/{session_id}/step", response_model=DecisionPayload)
    def session_step(session_id: str, payload: StepPayload) -> DecisionPayload:
        session = _get(session_id)
        with locks[session_id]:
            reply = session.handle_message(_step_message(payload))
        return _decision_or_400(reply)

    @app.post("/sessions/{session_id}/reset", response_model=SessionInfo)
    def session_reset(session_id: str) -> SessionInfo:
        session = _get(session_id)
        with locks[session_id]:
            session.handle_message({"type": "reset"})
        return _info(session)

    @app.delete("/sessions/{session_id}", response_model=ClosedInfo)
    def close_session(session_id: str) -> ClosedInfo:
        with registry_lock:
            session = sessions.pop(session_id, None)
            locks.pop(session_id, None)
        if session is None:
            raise HTTPException(
                status_code=404, detail=f"unknown session {session_id!r}"
            )
        return ClosedInfo(session_id=session_id, closed=True)

    @app.post("/decide", response_model=DecisionPayload)
    def decide(payload: StepPayload) -> DecisionPayload:
        session = _new_session("stateless")
        return _decision_or_400(session.handle_message(_step_message(payload)))

    return app
