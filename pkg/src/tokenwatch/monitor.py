"""Line-oriented help-trigger service.

Protocol (one JSON object per line, UTF-8):

    -> {"type": "hello", "version": 1}
    <- {"type": "hello_ack", "method": str, "max_tokens": int}
    -> {"type": "step", "step_index": int, "tokens": [token record, ...]}
    <- {"type": "decision", "step_index": int, "help": bool,
        "score": float, "degraded": bool, "elapsed_us": int}
    -> {"type": "reset"}
    <- {"type": "reset_ack"}
    -> {"type": "bye"}            (no reply; the session closes)

Malformed input earns {"type": "error", "error": str} and the session
continues; a hello with the wrong version is refused and the session
closes.  Steps longer than max_tokens are decided on their first
max_tokens tokens and flagged degraded.  max_tokens == 0 means the
method has no length limit and never truncates (conformal thresholds).
Sessions are independent: the loaded method is shared immutable state,
and per-session counters never mix.
"""

from __future__ import annotations

import json
import socketserver
import sys
import time
from dataclasses import dataclass, replace
from typing import Callable, IO, Optional, Tuple

from .checkpoint import load_checkpoint
from .conformal import CpThreshold, cp_decide, step_score, threshold_from_json
from .errors import ValidationError
from .features import step_feature_matrix
from .models import Classifier, forward_step
from .store import HelpDecision, StepRecord, token_from_obj

PROTOCOL_VERSION = 1


@dataclass
class MonitorMethod:
    """A named decision rule plus the truncation width it tolerates."""

    name: str
    max_tokens: int
    decide: Callable[[StepRecord], HelpDecision]


def method_from_classifier(
    model: Classifier, threshold: float = 0.5
) -> MonitorMethod:
    cfg = model.config

    def decide(step: StepRecord) -> HelpDecision:
        fm = step_feature_matrix(step, cfg.max_tokens, norm=model.norm)
        _, score = forward_step(model, fm)
        return HelpDecision(
            help=score >= threshold, score=score, step_index=step.step_index
        )

    return MonitorMethod(
        name=f"transformer-{model.kind}", max_tokens=cfg.max_tokens, decide=decide
    )


def method_from_cp(threshold: CpThreshold) -> MonitorMethod:
    cfg = threshold.config

    def decide(step: StepRecord) -> HelpDecision:
        decision = cp_decide(
            step_score(step, cfg.score, cfg.aggregate), threshold
        )
        decision.step_index = step.step_index
        return decision

    return MonitorMethod(
        name=f"cp-{cfg.score}-{cfg.regime}", max_tokens=0, decide=decide
    )


def load_method(
    checkpoint_path: Optional[str] = None,
    cp_threshold_path: Optional[str] = None,
    threshold: float = 0.5,
) -> MonitorMethod:
    """Build a monitor method from exactly one saved artifact."""
    if (checkpoint_path is None) == (cp_threshold_path is None):
        raise ValidationError(
            "exactly one of checkpoint and cp-threshold must be given"
        )
    if checkpoint_path is not None:
        return method_from_classifier(
            load_checkpoint(checkpoint_path), threshold
        )
    with open(cp_threshold_path, "r", encoding="utf-8") as fh:
        return method_from_cp(threshold_from_json(fh.read()))


def run_step(
    method: MonitorMethod, step: StepRecord
) -> Tuple[HelpDecision, int]:
    """Decide one step, truncating over-length input; returns elapsed us."""
    start = time.perf_counter_ns()
    degraded = False
    if method.max_tokens and len(step.tokens) > method.max_tokens:
        step = replace(step, tokens=step.tokens[: method.max_tokens])
        degraded = True
    decision = method.decide(step)
    decision.degraded = decision.degraded or degraded
    elapsed_us = (time.perf_counter_ns() - start) // 1000
    return decision, elapsed_us


def parse_step_message(obj: dict) -> StepRecord:
    try:
        step_index = obj["step_index"]
        raw_tokens = obj["tokens"]
    except KeyError as exc:
        raise ValidationError(f"step message missing field {exc}") from exc
    if not isinstance(step_index, int) or isinstance(step_index, bool):
        raise ValidationError("step_index must be an integer")
    if not isinstance(raw_tokens, list) or not raw_tokens:
        raise ValidationError("tokens must be a nonempty list")
    tokens = []
    for j, raw in enumerate(raw_tokens):
        if not isinstance(raw, dict):
            raise ValidationError(f"token {j}: not an object")
        tok = token_from_obj(raw, f"token {j}")
        try:
            tok.validate()
        except ValidationError as exc:
            raise ValidationError(f"token {j}: {exc}") from exc
        tokens.append(tok)
    return StepRecord(step_index=step_index, tokens=tokens)


@dataclass
class SessionState:
    session_id: str
    method_name: str
    established: bool = False
    closed: bool = False
    step_count: int = 0
    trigger_count: int = 0


class MonitorSession:
    """One client's message stream; replies strictly in request order."""

    def __init__(self, method: MonitorMethod, session_id: str = "session"):
        self.method = method
        self.state = SessionState(
            session_id=session_id, method_name=method.name
        )

    def handle_line(self, line: str) -> Optional[str]:
        """One reply line per request line; None for bye or blank input."""
        if not line.strip():
            return None
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            return self._encode({"type": "error", "error": f"bad JSON: {exc.msg}"})
        reply = self.handle_message(obj)
        return self._encode(reply) if reply is not None else None

    @staticmethod
    def _encode(obj: dict) -> str:
        return json.dumps(obj, separators=(",", ":"))

    def handle_message(self, obj: object) -> Optional[dict]:
        if not isinstance(obj, dict) or not isinstance(obj.get("type"), str):
            return {"type": "error", "error": "message must have a string type"}
        kind = obj["type"]
        if kind == "hello":
            return self._on_hello(obj)
        if kind == "step":
            return self._on_step(obj)
        if kind == "reset":
            self.state.step_count = 0
            self.state.trigger_count = 0
            return {"type": "reset_ack"}
        if kind == "bye":
            self.state.closed = True
            return None
        return {"type": "error", "error": f"unknown message type {kind!r}"}

    def _on_hello(self, obj: dict) -> dict:
        if obj.get("version") != PROTOCOL_VERSION:
            self.state.closed = True
            return {
                "type": "error",
                "error": f"unsupported protocol version {obj.get('version')!r}; "
                f"want {PROTOCOL_VERSION}",
            }
        self.state.established = True
        return {
            "type": "hello_ack",
            "method": self.method.name,
            "max_tokens": self.method.max_tokens,
        }

    def _on_step(self, obj: dict) -> dict:
        if not self.state.established:
            return {"type": "error", "error": "session not established; send hello"}
        try:
            step = parse_step_message(obj)
            decision, elapsed_us = run_step(self.method, step)
        except ValidationError as exc:
            return {"type": "error", "error": str(exc)}
        self.state.step_count += 1
        self.state.trigger_count += int(decision.help)
        return {
            "type": "decision",
            "step_index": step.step_index,
            "help": bool(decision.help),
            "score": float(decision.score),
            "degraded": bool(decision.degraded),
            "elapsed_us": int(elapsed_us),
        }


def serve_stdio(
    method: MonitorMethod,
    infile: Optional[IO[str]] = None,
    outfile: Optional[IO[str]] = None,
) -> int:
    """Serve one session over text streams; returns steps processed."""
    infile = infile if infile is not None else sys.stdin
    outfile = outfile if outfile is not None else sys.stdout
    session = MonitorSession(method, session_id="stdio")
    for line in infile:
        reply = session.handle_line(line)
        if reply is not None:
            outfile.write(reply + "\n")
            outfile.flush()
        if session.state.closed:
            break
    return session.state.step_count


class MonitorTCPServer(socketserver.ThreadingTCPServer):
    """One thread per connection; sessions share the immutable method."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, method: MonitorMethod):
        self.method = method
        self._session_counter = 0
        super().__init__(address, _MonitorHandler)

    def next_session_id(self) -> str:
        self._session_counter += 1
        return f"tcp-{self._session_counter}"


class _MonitorHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        session = MonitorSession(
            self.server.method, session_id=self.server.next_session_id()
        )
        while not session.state.closed:
            raw = self.rfile.readline()
            if not raw:
                break
            reply = session.handle_line(raw.decode("utf-8"))
            if reply is not None:
                self.wfile.write(reply.encode("utf-8") + b"\n")


def serve_tcp(method: MonitorMethod, host: str = "127.0.0.1", port: int = 0):
    """Bound, unstarted server; callers drive serve_forever and shutdown."""
    return MonitorTCPServer((host, port), method)
