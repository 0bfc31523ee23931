"""Online gate sessions: issue challenges, count correct answers, decide.

A session issues ``t_num`` challenges at one difficulty and grants access
iff at least ``t_min`` responses verify against their commitments. Granted
sessions mint a MAC-authenticated bearer token scoped to a resource path
prefix; token verification is self-contained (no session lookup).
"""

from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import hmac
import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .bank import ChallengeBank, ChallengeView
from .core import SolutionCommitment, verify_response
from .errors import (
    BankExhaustedError,
    ConfigurationError,
    PolicyError,
    ProtocolOrderError,
    SessionDecidedError,
    SessionExpiredError,
)

FEEDBACK_MODES = ("silent", "per_answer")
EXHAUSTION_MODES = ("fail_closed", "adjacent")


@dataclass(frozen=True)
class GatePolicy:
    level: str = "easy"
    t_num: int = 5
    t_min: int = 3
    per_challenge_deadline: Optional[float] = None
    session_ttl: float = 600.0
    feedback_mode: str = "silent"
    token_ttl: float = 300.0
    scope: str = "/protected"
    early_decision: bool = False
    exhaustion_fallback: str = "fail_closed"

    def __post_init__(self):
        if not (1 <= self.t_min <= self.t_num):
            raise PolicyError(f"need 1 <= t_min <= t_num, got t_min={self.t_min}, t_num={self.t_num}")
        if self.per_challenge_deadline is not None and self.per_challenge_deadline <= 0:
            raise PolicyError("per-challenge deadline must be positive")
        if self.session_ttl <= 0 or self.token_ttl <= 0:
            raise PolicyError("durations must be positive")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise PolicyError(f"unknown feedback mode {self.feedback_mode!r}")
        if self.exhaustion_fallback not in EXHAUSTION_MODES:
            raise PolicyError(f"unknown exhaustion fallback {self.exhaustion_fallback!r}")


class SessionState(enum.Enum):
    OPEN = "open"
    AWAITING_ANSWER = "awaiting_answer"
    DECIDED = "decided"


@dataclass(frozen=True)
class AccessDecision:
    granted: bool
    correct_count: int
    sent_count: int
    token: Optional[str] = None


@dataclass
class IssuedChallenge:
    challenge_id: str
    commitment: SolutionCommitment
    issued_at: float


@dataclass
class GateSession:
    session_id: str
    policy: GatePolicy
    created_at: float
    state: SessionState = SessionState.OPEN
    issued: list[IssuedChallenge] = field(default_factory=list)
    correct_count: int = 0
    sent_count: int = 0
    decision: Optional[AccessDecision] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def expired(self, now: float) -> bool:
        return now - self.created_at > self.policy.session_ttl


@dataclass(frozen=True)
class SubmitOutcome:
    sent_count: int
    remaining: int
    correct: Optional[bool] = None  # revealed only in per_answer mode
    decision: Optional[AccessDecision] = None


# ---------------------------------------------------------------------------
# Access tokens
# ---------------------------------------------------------------------------

_MAC_LEN = 32


class TokenSigner:
    """Mints and verifies bearer tokens: base64url(payload JSON || MAC)."""

    def __init__(self, key: bytes):
        if len(key) < 32:
            raise ConfigurationError("token mac key must be at least 32 bytes")
        self._key = key

    def mint(self, session_id: str, scope: str, now: float, ttl: float) -> str:
        payload = json.dumps(
            {
                "session_id": session_id,
                "scope": scope,
                "issued_at": now,
                "expires_at": now + ttl,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        mac = hmac.new(self._key, payload, hashlib.sha256).digest()
        return base64.urlsafe_b64encode(payload + mac).decode("ascii")

    def verify(self, token: str, now: float) -> bool:
        return self.inspect(token, now) is not None

    def inspect(self, token: str, now: float) -> Optional[dict]:
        """Payload of a valid unexpired token, else None. Never raises."""
        try:
            blob = base64.urlsafe_b64decode(token.encode("ascii"))
        except (binascii.Error, ValueError, UnicodeEncodeError, AttributeError):
            return None
        if len(blob) <= _MAC_LEN:
            return None
        payload, mac = blob[:-_MAC_LEN], blob[-_MAC_LEN:]
        expected = hmac.new(self._key, payload, hashlib.sha256).digest()
        if not hmac.compare_digest(mac, expected):
            return None
        try:
            data = json.loads(payload.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            return None
        expires = data.get("expires_at")
        if not isinstance(expires, (int, float)) or now >= expires:
            return None
        return data


def verify_token(token: str, key: bytes, now: float) -> bool:
    """Constant-time MAC check plus expiry; malformed input is simply false."""
    return TokenSigner(key).verify(token, now)


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------

class Gate:
    """Runs gate sessions over a challenge bank."""

    def __init__(
        self,
        bank: ChallengeBank,
        signer: TokenSigner,
        clock: Callable[[], float] = time.time,
    ):
        self.bank = bank
        self.signer = signer
        self.clock = clock

    # -- session lifecycle ---------------------------------------------------

    def open_session(self, policy: GatePolicy) -> GateSession:
        if policy.level not in self.bank.header.scale_names:
            raise PolicyError(f"bank has no level {policy.level!r}")
        if not self._level_available(policy):
            raise BankExhaustedError(f"no unserved challenges for level {policy.level!r}")
        return GateSession(
            session_id=secrets.token_hex(16),
            policy=policy,
            created_at=self.clock(),
        )

    def _level_available(self, policy: GatePolicy) -> bool:
        if self.bank.has_unserved(policy.level):
            return True
        if policy.exhaustion_fallback == "adjacent":
            return any(self.bank.has_unserved(n) for n in self._adjacent_levels(policy.level))
        return False

    def _adjacent_levels(self, level_name: str) -> list[str]:
        names = self.bank.header.scale_names
        i = names.index(level_name)
        ordered = []
        if i > 0:
            ordered.append(names[i - 1])
        if i + 1 < len(names):
            ordered.append(names[i + 1])
        return ordered

    def next_challenge(self, session: GateSession) -> ChallengeView:
        with session.lock:
            now = self.clock()
            if session.state is SessionState.DECIDED:
                raise SessionDecidedError("session already decided")
            if session.expired(now):
                raise SessionExpiredError("session ttl elapsed")
            if session.state is SessionState.AWAITING_ANSWER:
                raise ProtocolOrderError("a challenge is already outstanding")
            if session.sent_count >= session.policy.t_num:
                raise ProtocolOrderError("no more challenges in this session")
            view = self._sample(session)
            session.issued.append(
                IssuedChallenge(
                    challenge_id=view.id,
                    commitment=view.commitment,
                    issued_at=now,
                )
            )
            session.sent_count += 1
            session.state = SessionState.AWAITING_ANSWER
            return view

    def _sample(self, session: GateSession) -> ChallengeView:
        policy = session.policy
        try:
            return self.bank.sample(policy.level, session.session_id, self.clock())
        except BankExhaustedError:
            if policy.exhaustion_fallback != "adjacent":
                raise
            for name in self._adjacent_levels(policy.level):
                try:
                    return self.bank.sample(name, session.session_id, self.clock())
                except BankExhaustedError:
                    continue
            raise

    def submit_answer(self, session: GateSession, response: str) -> SubmitOutcome:
        with session.lock:
            now = self.clock()
            if session.state is SessionState.DECIDED:
                raise SessionDecidedError("session already decided")
            if session.expired(now):
                raise SessionExpiredError("session ttl elapsed")
            if session.state is not SessionState.AWAITING_ANSWER:
                raise ProtocolOrderError("no outstanding challenge to answer")

            outstanding = session.issued[-1]
            deadline = session.policy.per_challenge_deadline
            if deadline is not None and now - outstanding.issued_at > deadline:
                correct = False  # late answers count as wrong regardless of content
            else:
                correct = verify_response(outstanding.commitment, response)
            if correct:
                session.correct_count += 1
            session.state = SessionState.OPEN

            policy = session.policy
            if session.sent_count == policy.t_num:
                self._decide(session, now)
            elif policy.early_decision:
                remaining = policy.t_num - session.sent_count
                if (
                    session.correct_count >= policy.t_min
                    or session.correct_count + remaining < policy.t_min
                ):
                    self._decide(session, now)

            return SubmitOutcome(
                sent_count=session.sent_count,
                remaining=policy.t_num - session.sent_count,
                correct=correct if policy.feedback_mode == "per_answer" else None,
                decision=session.decision,
            )

    def _decide(self, session: GateSession, now: float) -> None:
        granted = session.correct_count >= session.policy.t_min
        token = None
        if granted:
            token = self.signer.mint(
                session.session_id,
                session.policy.scope,
                now,
                session.policy.token_ttl,
            )
        session.decision = AccessDecision(
            granted=granted,
            correct_count=session.correct_count,
            sent_count=session.sent_count,
            token=token,
        )
        session.state = SessionState.DECIDED
