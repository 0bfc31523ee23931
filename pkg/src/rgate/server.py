"""HTTP and MCP-style deployment surfaces for the gate protocol.

Routes:
  POST /gate/sessions                   open a session (rate limited)
  GET  /gate/sessions/{id}/challenge    fetch the next challenge view
  POST /gate/sessions/{id}/answer       submit an answer; final one decides
  GET  /protected/{path}                token-gated demo resource
  GET  /mcp/tools                       tool schema listing
  POST /mcp/call                        invoke a tool by name

Serving bodies never contain solutions or clue answers; sessions live in
memory with TTL eviction while tokens are self-authenticating, so resource
fetches need no session lookup. Any internal error on the decision path
resolves to denial.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .bank import ChallengeBank
from .errors import (
    BankExhaustedError,
    ConfigurationError,
    PolicyError,
    ProtocolOrderError,
    RgateError,
    SessionDecidedError,
    SessionExpiredError,
)
from .protocol import Gate, GatePolicy, GateSession, SessionState, TokenSigner

log = logging.getLogger(__name__)

DEFAULT_KEY_ENV = "RGATE_MAC_KEY"

DEMO_RESOURCES = {
    "demo.txt": "The gated resource. If you can read this, your session passed the gate.\n",
}


@dataclass
class ServerConfig:
    policy: GatePolicy = field(default_factory=GatePolicy)
    key_env: str = DEFAULT_KEY_ENV
    rate_limit_per_minute: int = 10
    resource_dir: Optional[str] = None
    static_dir: Optional[str] = None  # widget assets, served under /widget
    epoch_id: Optional[str] = None


def key_from_env(key_env: str = DEFAULT_KEY_ENV) -> bytes:
    value = os.environ.get(key_env)
    if not value:
        raise ConfigurationError(f"mac key env var {key_env!r} is not set")
    key = value.encode("utf-8")
    if len(key) < 32:
        raise ConfigurationError("mac key must be at least 32 bytes")
    return key


class TokenBucket:
    """Per-client token bucket for session-open rate limiting."""

    def __init__(self, per_minute: int, clock: Callable[[], float]):
        self.capacity = float(per_minute)
        self.refill_per_s = per_minute / 60.0
        self.clock = clock
        self._state: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def allow(self, client: str) -> bool:
        now = self.clock()
        with self._lock:
            tokens, last = self._state.get(client, (self.capacity, now))
            tokens = min(self.capacity, tokens + (now - last) * self.refill_per_s)
            if tokens < 1.0:
                self._state[client] = (tokens, now)
                return False
            self._state[client] = (tokens - 1.0, now)
            return True


class SessionStore:
    """In-memory session map with lazy TTL eviction."""

    def __init__(self, clock: Callable[[], float]):
        self.clock = clock
        self._sessions: dict[str, GateSession] = {}
        self._lock = threading.Lock()
        self._ops = 0

    def add(self, session: GateSession) -> None:
        with self._lock:
            self._sessions[session.session_id] = session
            self._ops += 1
            if self._ops % 128 == 0:
                self._sweep()

    def get(self, session_id: str) -> Optional[GateSession]:
        with self._lock:
            return self._sessions.get(session_id)

    def _sweep(self) -> None:
        now = self.clock()
        # Decided sessions linger one TTL so late polls get 410, not 404.
        dead = [
            sid
            for sid, s in self._sessions.items()
            if now - s.created_at > 2 * s.policy.session_ttl
        ]
        for sid in dead:
            del self._sessions[sid]


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(
    bank: ChallengeBank,
    key: bytes,
    config: Optional[ServerConfig] = None,
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    config = config or ServerConfig()
    if config.epoch_id:
        bank.reset_serving(config.epoch_id)
    signer = TokenSigner(key)
    gate = Gate(bank, signer, clock=clock)
    sessions = SessionStore(clock)
    bucket = TokenBucket(config.rate_limit_per_minute, clock)
    app = FastAPI(title="rgate", version="0.1.0")
    app.state.gate = gate
    app.state.sessions = sessions

    if config.static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/widget", StaticFiles(directory=config.static_dir, html=True), name="widget")

    policy = config.policy

    # -- gate protocol over HTTP --------------------------------------------

    @app.post("/gate/sessions")
    async def open_session(request: Request):
        client = request.client.host if request.client else "unknown"
        if not bucket.allow(client):
            return _error(429, "session open rate limit exceeded")
        body = await request.body()
        if body:
            import json as _json

            try:
                parsed = _json.loads(body)
            except _json.JSONDecodeError:
                return _error(400, "request body must be a JSON object")
            if not isinstance(parsed, dict):
                return _error(400, "request body must be a JSON object")
        try:
            session = gate.open_session(policy)
        except BankExhaustedError:
            return _error(503, "challenge bank exhausted")
        except PolicyError as exc:
            return _error(400, str(exc))
        sessions.add(session)
        return JSONResponse(
            status_code=201,
            content={
                "session_id": session.session_id,
                "t_num": policy.t_num,
                "level": policy.level,
                "feedback_mode": policy.feedback_mode,
                "per_challenge_deadline": policy.per_challenge_deadline,
            },
        )

    @app.get("/gate/sessions/{session_id}/challenge")
    async def get_challenge(session_id: str):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        try:
            view = gate.next_challenge(session)
        except (SessionDecidedError, SessionExpiredError) as exc:
            return _error(410, str(exc))
        except ProtocolOrderError as exc:
            return _error(409, str(exc))
        except BankExhaustedError:
            return _error(503, "challenge bank exhausted")
        body = view.to_wire()
        body["number"] = session.sent_count
        body["remaining_after_this"] = session.policy.t_num - session.sent_count
        return JSONResponse(status_code=200, content=body)

    @app.post("/gate/sessions/{session_id}/answer")
    async def submit_answer(session_id: str, request: Request):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        import json as _json

        try:
            payload = _json.loads(await request.body())
        except _json.JSONDecodeError:
            return _error(400, "request body must be JSON")
        if not isinstance(payload, dict) or not isinstance(payload.get("response"), str):
            return _error(400, 'body must carry a string "response" field')
        try:
            outcome = gate.submit_answer(session, payload["response"])
        except (SessionDecidedError, SessionExpiredError) as exc:
            return _error(410, str(exc))
        except ProtocolOrderError as exc:
            return _error(409, str(exc))
        except Exception:  # fail closed: ambiguity on the decision path denies
            log.exception("internal error while scoring an answer; denying")
            with session.lock:
                from .protocol import AccessDecision

                session.decision = AccessDecision(
                    granted=False,
                    correct_count=session.correct_count,
                    sent_count=session.sent_count,
                    token=None,
                )
                session.state = SessionState.DECIDED
            return JSONResponse(
                status_code=500,
                content={"error": "internal error", "decision": {"granted": False}},
            )
        body: dict = {
            "sent_count": outcome.sent_count,
            "remaining": outcome.remaining,
        }
        if outcome.correct is not None:
            body["correct"] = outcome.correct
        if outcome.decision is not None:
            decision = {
                "granted": outcome.decision.granted,
                "correct_count": outcome.decision.correct_count,
                "sent_count": outcome.decision.sent_count,
            }
            if outcome.decision.token:
                decision["token"] = outcome.decision.token
            body["decision"] = decision
        return JSONResponse(status_code=200, content=body)

    # -- protected resource ---------------------------------------------------

    def _fetch_resource(path: str, token: Optional[str]):
        if not token:
            return 401, "missing bearer token"
        data = signer.inspect(token, clock())
        if data is None:
            return 403, "invalid or expired token"
        scope = data.get("scope", "")
        if not ("/protected/" + path).startswith(scope.rstrip("/") + "/"):
            return 403, "token scope does not cover this resource"
        if config.resource_dir is not None:
            full = os.path.realpath(os.path.join(config.resource_dir, path))
            root = os.path.realpath(config.resource_dir)
            if not full.startswith(root + os.sep) or not os.path.isfile(full):
                return 404, "no such resource"
            with open(full, "r", encoding="utf-8") as fh:
                return 200, fh.read()
        if path in DEMO_RESOURCES:
            return 200, DEMO_RESOURCES[path]
        return 404, "no such resource"

    @app.get("/protected/{path:path}")
    async def protected(path: str, authorization: Optional[str] = Header(default=None)):
        token = None
        if authorization and authorization.lower().startswith("bearer "):
            token = authorization[7:].strip()
        status, payload = _fetch_resource(path, token)
        if status == 200:
            return PlainTextResponse(payload)
        return _error(status, payload)

    # -- MCP-style tool surface -------------------------------------------

    tool_schemas = [
        {
            "name": "gate.open",
            "description": "Open a gate session; returns the session descriptor.",
            "input_schema": {"type": "object", "properties": {}, "required": []},
        },
        {
            "name": "gate.challenge",
            "description": "Fetch the next challenge for an open session.",
            "input_schema": {
                "type": "object",
                "properties": {"session_id": {"type": "string"}},
                "required": ["session_id"],
            },
        },
        {
            "name": "gate.answer",
            "description": "Submit an answer; the final answer returns the access decision.",
            "input_schema": {
                "type": "object",
                "properties": {
                    "session_id": {"type": "string"},
                    "response": {"type": "string"},
                },
                "required": ["session_id", "response"],
            },
        },
        {
            "name": "resource.fetch",
            "description": "Fetch a protected resource using the token from gate.answer.",
            "input_schema": {
                "type": "object",
                "properties": {
                    "path": {"type": "string"},
                    "token": {"type": "string"},
                },
                "required": ["path", "token"],
            },
        },
    ]

    @app.get("/mcp/tools")
    async def mcp_tools():
        return {"tools": tool_schemas}

    def _tool_error(code: str, message: str) -> dict:
        return {"error": {"code": code, "message": message}}

    @app.post("/mcp/call")
    async def mcp_call(request: Request):
        import json as _json

        try:
            payload = _json.loads(await request.body())
        except _json.JSONDecodeError:
            return _tool_error("invalid_arguments", "body must be JSON")
        name = payload.get("name")
        args = payload.get("arguments") or {}
        if not isinstance(args, dict):
            return _tool_error("invalid_arguments", "arguments must be an object")

        if name == "gate.open":
            try:
                session = gate.open_session(policy)
            except BankExhaustedError:
                return _tool_error("unavailable", "challenge bank exhausted")
            sessions.add(session)
            return {
                "result": {
                    "session_id": session.session_id,
                    "t_num": policy.t_num,
                    "level": policy.level,
                    "feedback_mode": policy.feedback_mode,
                }
            }

        if name == "gate.challenge":
            session = sessions.get(str(args.get("session_id")))
            if session is None:
                return _tool_error("unknown_session", "unknown session")
            try:
                view = gate.next_challenge(session)
            except (SessionDecidedError, SessionExpiredError) as exc:
                return _tool_error("gone", str(exc))
            except ProtocolOrderError as exc:
                return _tool_error("conflict", str(exc))
            except BankExhaustedError:
                return _tool_error("unavailable", "challenge bank exhausted")
            return {"result": view.to_wire()}

        if name == "gate.answer":
            session = sessions.get(str(args.get("session_id")))
            if session is None:
                return _tool_error("unknown_session", "unknown session")
            if not isinstance(args.get("response"), str):
                return _tool_error("invalid_arguments", 'missing string "response"')
            try:
                outcome = gate.submit_answer(session, args["response"])
            except (SessionDecidedError, SessionExpiredError) as exc:
                return _tool_error("gone", str(exc))
            except ProtocolOrderError as exc:
                return _tool_error("conflict", str(exc))
            except Exception:
                log.exception("internal error while scoring an answer; denying")
                return _tool_error("internal", "internal error; access denied")
            result: dict = {
                "sent_count": outcome.sent_count,
                "remaining": outcome.remaining,
            }
            if outcome.correct is not None:
                result["correct"] = outcome.correct
            if outcome.decision is not None:
                result["decision"] = {
                    "granted": outcome.decision.granted,
                    "correct_count": outcome.decision.correct_count,
                    "sent_count": outcome.decision.sent_count,
                }
                if outcome.decision.token:
                    result["decision"]["token"] = outcome.decision.token
            return {"result": result}

        if name == "resource.fetch":
            status, payload_text = _fetch_resource(
                str(args.get("path", "")), args.get("token")
            )
            if status == 200:
                return {"result": {"body": payload_text}}
            code = {401: "unauthorized", 403: "unauthorized", 404: "not_found"}.get(
                status, "error"
            )
            return _tool_error(code, payload_text)

        return _tool_error("unknown_tool", f"no tool named {name!r}")

    return app
