"""Uniform chat-completion gateway with pluggable backends.

Every call flows through :class:`LmGateway`, which tags it with a purpose
(generation / solvability / response) and appends a usage record to an
append-only ledger; the asymmetry metrics are computed from that ledger and
nowhere else.

The mock backend is a pure function of (config, request): it parses the same
prompts a live model would see and emits text through the same output
formats, so the whole pipeline runs deterministically offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .core import (
    Challenge,
    Clue,
    DifficultyLevel,
    Provenance,
    commit_solution,
)
from .errors import (
    BudgetExceededError,
    ConfigurationError,
    InvalidInputError,
    TransportError,
    UnknownModelError,
)

EPOCH_TIMESTAMP = "1970-01-01T00:00:00+00:00"

PURPOSES = ("generation", "solvability", "response")


# ---------------------------------------------------------------------------
# Request / completion / usage types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatMessage:
    role: str  # "user" | "assistant"
    text: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    reasoning_budget: Optional[int] = None
    purpose: str = "response"

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise InvalidInputError(f"unknown purpose {self.purpose!r}")
        if self.purpose == "response" and not self.messages:
            raise InvalidInputError("responder calls need at least one message")

    def user_text(self) -> str:
        return "\n".join(m.text for m in self.messages if m.role == "user")


@dataclass(frozen=True)
class UsageRecord:
    input_tokens: int
    output_tokens: int
    reasoning_tokens: int
    model_id: str
    purpose: str
    timestamp: float

    def __post_init__(self):
        if min(self.input_tokens, self.output_tokens, self.reasoning_tokens) < 0:
            raise InvalidInputError("token counts must be non-negative")


@dataclass(frozen=True)
class Completion:
    text: str
    usage: UsageRecord


@dataclass(frozen=True)
class BackendResult:
    text: str
    output_tokens: int
    reasoning_tokens: int = 0


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

def _estimate_tokens(text: str) -> int:
    return len(text.split())


class LmGateway:
    """Backend registry plus usage ledger; safe for concurrent calls."""

    def __init__(self, retries: int = 3, backoff_s: float = 0.1, clock: Callable[[], float] = time.time):
        self._backends: dict[str, object] = {}
        self._budgets: dict[str, Optional[int]] = {}
        self._spent: dict[str, int] = {}
        self._ledger: list[UsageRecord] = []
        self._lock = threading.Lock()
        self.retries = retries
        self.backoff_s = backoff_s
        self.clock = clock

    def register(self, model_id: str, backend, budget: Optional[int] = None) -> None:
        self._backends[model_id] = backend
        self._budgets[model_id] = budget
        self._spent.setdefault(model_id, 0)

    def models(self) -> tuple[str, ...]:
        return tuple(self._backends)

    def complete(self, request: ChatRequest) -> Completion:
        backend = self._backends.get(request.model_id)
        if backend is None:
            raise UnknownModelError(f"no backend registered for {request.model_id!r}")
        budget = self._budgets[request.model_id]
        if budget is not None and self._spent[request.model_id] >= budget:
            raise BudgetExceededError(
                f"{request.model_id!r} spent {self._spent[request.model_id]} of {budget} output tokens"
            )

        last_error: Optional[TransportError] = None
        for attempt in range(self.retries + 1):
            try:
                result = backend.complete(request)
                break
            except TransportError as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2**attempt))
        else:
            raise last_error

        usage = UsageRecord(
            input_tokens=_estimate_tokens(request.system_prompt) + _estimate_tokens(request.user_text()),
            output_tokens=result.output_tokens,
            reasoning_tokens=result.reasoning_tokens,
            model_id=request.model_id,
            purpose=request.purpose,
            timestamp=self.clock(),
        )
        with self._lock:
            self._ledger.append(usage)
            self._spent[request.model_id] += result.output_tokens
        return Completion(text=result.text, usage=usage)

    def usage_ledger(
        self,
        purpose: Optional[str] = None,
        model_id: Optional[str] = None,
        since: Optional[float] = None,
        until: Optional[float] = None,
    ) -> list[UsageRecord]:
        with self._lock:
            records = list(self._ledger)
        out = []
        for rec in records:
            if purpose is not None and rec.purpose != purpose:
                continue
            if model_id is not None and rec.model_id != model_id:
                continue
            if since is not None and rec.timestamp < since:
                continue
            if until is not None and rec.timestamp > until:
                continue
            out.append(rec)
        return out

    def ledger_size(self) -> int:
        with self._lock:
            return len(self._ledger)


# ---------------------------------------------------------------------------
# Mock backend: lexicon and word pools
# ---------------------------------------------------------------------------

# Clue answers available to the mock generator, keyed by initial letter.
CLUE_LEXICON: dict[str, tuple[str, ...]] = {
    "a": ("anchor", "atlas", "amber", "acorn"),
    "b": ("basalt", "beacon", "briar", "bugle"),
    "c": ("cedar", "cobalt", "crater", "cipher"),
    "d": ("delta", "dune", "dynamo", "damsel"),
    "e": ("ember", "echo", "epoch", "easel"),
    "f": ("falcon", "fjord", "fresco", "fathom"),
    "g": ("granite", "gale", "gyro", "garnet"),
    "h": ("harbor", "helix", "hollow", "hymn"),
    "i": ("ingot", "iris", "isthmus", "ivory"),
    "j": ("jasper", "junction", "jetty", "jargon"),
    "k": ("kelp", "kiln", "keystone", "kudzu"),
    "l": ("lagoon", "lichen", "lumen", "ledger"),
    "m": ("marble", "meridian", "mosaic", "mantle"),
    "n": ("nectar", "nimbus", "noble", "nugget"),
    "o": ("obsidian", "orchid", "oasis", "onyx"),
    "p": ("pylon", "prism", "pumice", "parchment"),
    "q": ("quartz", "quill", "quorum", "quince"),
    "r": ("raven", "rampart", "resin", "rhombus"),
    "s": ("sable", "sonnet", "summit", "sextant"),
    "t": ("talon", "tundra", "trellis", "tempest"),
    "u": ("umber", "upland", "urchin", "usher"),
    "v": ("vellum", "vertex", "violet", "vortex"),
    "w": ("walnut", "wharf", "willow", "warden"),
    "x": ("xenon", "xylem", "xebec", "xerus"),
    "y": ("yarrow", "yonder", "yucca", "yeoman"),
    "z": ("zephyr", "zenith", "zircon", "zither"),
}

# Hidden-word pools per difficulty tier, used when the prompt does not pin a
# word (example-bank generation samples freely).
MOCK_WORDS: tuple[tuple[str, ...], ...] = (
    ("isles", "amber", "stone", "tulip", "frost", "grove", "onyx", "prism", "cedar", "quill"),
    (
        "majordomos",
        "alchemist",
        "blueprint",
        "cathedral",
        "chronicle",
        "fieldwork",
        "gargoyle",
        "harmonics",
        "keystones",
        "labyrinth",
    ),
    (
        "thunderstorm",
        "constellation",
        "metamorphosis",
        "encyclopedias",
        "photosynthesis",
        "interleaving",
        "quarterfinals",
        "workmanship",
        "watercolours",
        "grandmothers",
    ),
)

MOCK_DOMAINS: tuple[str, ...] = (
    "Humanities",
    "Social Science",
    "Mathematics",
    "Physics",
    "Chemistry",
    "Astronomy",
    "Earth Science",
    "Computer Science",
    "Biology",
    "Medicine",
)

DEFAULT_THRESHOLDS = {"easy": 0.15, "medium": 0.5, "hard": 0.85}
DEFAULT_LENGTH_RANGES = ((4, 6), (8, 10), (11, 14))

_TIER_RE = re.compile(r"tier (\d+)")
_SPELLED_RE = re.compile(r"spelled ([a-z](?:-[a-z])*)")
_CLUE_LINE_RE = re.compile(r"^\s*[-•*]\s*([^:]+):\s*(.+)$")


def _tier_preamble(rank: int, n_levels: int) -> str:
    return (
        f"Gate puzzle, tier {rank + 1} of {n_levels}. Solve every clue below and "
        "read the first letters of the answers, in order, to reveal the hidden word."
    )


def _clue_text(domain: str, answer: str) -> str:
    spelled = "-".join(answer)
    return f"Recall the {domain} term spelled {spelled}, then note its first letter."


def mock_generate_challenge(
    word: str,
    domains: Sequence[str],
    difficulty: DifficultyLevel,
    seed: int,
    n_levels: int = 3,
    generator_id: str = "mock",
    created_at: str = EPOCH_TIMESTAMP,
) -> Challenge:
    """Deterministically build a structurally valid challenge for a word.

    Stand-in for a live generator model: clue answers come from the built-in
    per-letter lexicon, so the acrostic property holds by construction.
    """
    word = word.strip().lower()
    if not word.isalpha():
        raise InvalidInputError(f"target word must be alphabetic, got {word!r}")
    if len(domains) != len(word):
        raise InvalidInputError(
            f"need one domain per letter: word has {len(word)}, got {len(domains)} domains"
        )
    rng = random.Random(seed)
    clues = []
    for i, (letter, domain) in enumerate(zip(word, domains)):
        pool = CLUE_LEXICON.get(letter, ())
        if not pool:
            raise ConfigurationError(f"no clue lexicon entries for letter {letter!r}")
        answer = rng.choice(pool)
        clues.append(
            Clue(index=i, domain_label=domain, clue_text=_clue_text(domain, answer), clue_answer=answer)
        )
    salt = rng.randbytes(16)
    return Challenge(
        id=f"mock-{rng.getrandbits(64):016x}",
        difficulty=difficulty,
        preamble=_tier_preamble(difficulty.rank, n_levels),
        clues=tuple(clues),
        solution=word,
        commitment=commit_solution(word, salt),
        provenance=Provenance(
            generator_id=generator_id,
            sampled_word=word,
            sampled_domains=tuple(domains),
            word_bank_id="builtin-mock",
            domain_bank_id="builtin-mock",
        ),
        created_at=created_at,
    )


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MockBackendConfig:
    """Knobs for a deterministic simulated model.

    ``skill`` against ``difficulty_thresholds`` decides responder
    correctness exactly: the mock answers a tier correctly iff
    ``skill >= threshold``. The synthetic token model is
    ``base_output_tokens[level] + per_clue_output_tokens * n_clues``.
    """

    seed: int = 0
    skill: float = 0.5
    scale_names: tuple[str, ...] = ("easy", "medium", "hard")
    difficulty_thresholds: Optional[dict[str, float]] = None
    base_output_tokens: Optional[dict[str, int]] = None
    per_clue_output_tokens: int = 40
    icl_skill_bonus_per_10_shots: float = 0.0
    length_ranges: tuple[tuple[int, int], ...] = DEFAULT_LENGTH_RANGES

    def __post_init__(self):
        if not 0.0 <= self.skill <= 1.0:
            raise InvalidInputError("skill must lie in [0, 1]")
        ths = self.thresholds_by_rank()
        if any(b < a for a, b in zip(ths, ths[1:])):
            raise InvalidInputError("difficulty thresholds must be non-decreasing")

    def thresholds_by_rank(self) -> tuple[float, ...]:
        ths = self.difficulty_thresholds or DEFAULT_THRESHOLDS
        return tuple(ths.get(name, 1.0) for name in self.scale_names)

    def base_tokens_by_rank(self) -> tuple[int, ...]:
        bases = self.base_output_tokens or {"easy": 120, "medium": 200, "hard": 280}
        default = max(bases.values())
        return tuple(bases.get(name, default) for name in self.scale_names)


class MockLmBackend:
    """Deterministic backend covering all three call purposes.

    Stateless between calls: randomness re-derives from (seed, request
    digest), so identical requests yield byte-identical completions.
    """

    def __init__(self, config: MockBackendConfig):
        self.config = config

    # -- helpers -----------------------------------------------------------

    def _rng(self, request: ChatRequest) -> random.Random:
        digest = hashlib.sha256(
            (request.system_prompt + "\x00" + request.user_text()).encode("utf-8")
        ).digest()
        return random.Random(self.config.seed ^ int.from_bytes(digest[:8], "big"))

    def _clamp_rank(self, rank: int) -> int:
        return max(0, min(rank, len(self.config.scale_names) - 1))

    # -- entry point -------------------------------------------------------

    def complete(self, request: ChatRequest) -> BackendResult:
        if request.purpose == "generation":
            return self._generate(request)
        if request.purpose == "solvability":
            return self._check_solvability(request)
        return self._respond(request)

    # -- generation --------------------------------------------------------

    def _generate(self, request: ChatRequest) -> BackendResult:
        user = request.user_text()
        rng = self._rng(request)
        word_m = re.search(r"Words = \[([^\]]*)\]", user)
        if word_m:
            word = word_m.group(1).strip().lower()
            domains_m = re.search(r"Domains = \[([^\]]*)\]", user)
            domains = [d.strip() for d in domains_m.group(1).split(",")] if domains_m else []
            level_m = re.search(r"Level = (\S+)", user)
            rank = 0
            if level_m and level_m.group(1) in self.config.scale_names:
                rank = self.config.scale_names.index(level_m.group(1))
        else:
            rank = self._rank_from_history(user)
            word = self._sample_word(rng, rank, user)
            domains = [rng.choice(MOCK_DOMAINS) for _ in word]
        return self._render_gate(rng, word, domains, rank)

    def _rank_from_history(self, user: str) -> int:
        tail = user.split("new difficulty request", 1)
        tiers = _TIER_RE.findall(tail[0])
        command = tail[1].lower() if len(tail) > 1 else ""
        if not tiers or "first" in command:
            base = 0
        else:
            base = int(tiers[-1]) - 1
        if "increase" in command:
            base += 1
        elif "reduc" in command:
            base -= 1
        return self._clamp_rank(base)

    def _sample_word(self, rng: random.Random, rank: int, user: str) -> str:
        lo, hi = self.config.length_ranges[min(rank, len(self.config.length_ranges) - 1)]
        used = set(re.findall(r"Solution - (\w+)", user))
        tier_pool = MOCK_WORDS[min(rank, len(MOCK_WORDS) - 1)]
        pool = [w for w in tier_pool if lo <= len(w) <= hi and w not in used]
        if not pool:
            pool = [w for w in tier_pool if lo <= len(w) <= hi] or list(tier_pool)
        return rng.choice(pool)

    def _render_gate(self, rng: random.Random, word: str, domains: Sequence[str], rank: int) -> BackendResult:
        if len(domains) != len(word):
            # Mirrors a hallucinating generator; the caller's validation
            # rejects it and retries.
            text = f"Gate = malformed\nSolution = {word}\n"
            return BackendResult(text=text, output_tokens=10)
        answers = []
        lines = [f"Gate = {_tier_preamble(rank, len(self.config.scale_names))}"]
        for letter, domain in zip(word, domains):
            answer = rng.choice(CLUE_LEXICON[letter])
            answers.append(answer)
            lines.append(f"- {domain}: {_clue_text(domain, answer)}")
        lines.append(f"Solution = {word}")
        lines.append("Answers = " + ", ".join(answers))
        base = self.config.base_tokens_by_rank()[rank]
        return BackendResult(
            text="\n".join(lines),
            output_tokens=base + self.config.per_clue_output_tokens * len(word),
        )

    # -- responding --------------------------------------------------------

    def _respond(self, request: ChatRequest) -> BackendResult:
        user = request.user_text()
        rng = self._rng(request)
        head, _, gate_block = user.rpartition("PROVIDED GATE -")
        if not gate_block:
            gate_block = user
        shots = head.count("The solution:")

        number_m = re.search(r"Gate (\d+) =", gate_block)
        number = number_m.group(1) if number_m else "1"
        tier_m = _TIER_RE.search(gate_block)
        rank = self._clamp_rank(int(tier_m.group(1)) - 1) if tier_m else 0

        letters, trail = [], []
        for line in gate_block.splitlines():
            clue_m = _CLUE_LINE_RE.match(line)
            if not clue_m:
                continue
            domain, text = clue_m.groups()
            spelled = _SPELLED_RE.search(text)
            answer = spelled.group(1).replace("-", "") if spelled else "unknown"
            letters.append(answer[0])
            trail.append(f"{len(letters)}. {domain.strip()}: {answer} -> {answer[0].upper()}")
        solution = "".join(letters)

        effective_skill = self.config.skill + (shots // 10) * self.config.icl_skill_bonus_per_10_shots
        threshold = self.config.thresholds_by_rank()[rank]
        if solution and effective_skill >= threshold:
            answer_text = solution.upper() if rng.random() < 0.5 else solution
        elif solution:
            # Seeded corruption: shift the first letter so the answer can
            # never normalize back to the solution.
            shift = rng.randrange(1, 26)
            first = chr((ord(solution[0]) - 97 + shift) % 26 + 97)
            answer_text = first + solution[1:]
        else:
            answer_text = "unknown"

        body = "\n".join(trail) if trail else "No clues found."
        text = (
            f"Working through gate {number} clue by clue:\n{body}\n"
            f"Chaining the first letters gives the candidate word.\n"
            f'The solution: {{"Gate {number}": "{answer_text}"}}'
        )
        base = self.config.base_tokens_by_rank()[rank]
        output_tokens = base + self.config.per_clue_output_tokens * max(len(letters), 1)
        reasoning = 0
        if request.reasoning_budget is not None:
            reasoning = min(request.reasoning_budget, output_tokens // 2)
        return BackendResult(text=text, output_tokens=output_tokens, reasoning_tokens=reasoning)

    # -- solvability -------------------------------------------------------

    def _check_solvability(self, request: ChatRequest) -> BackendResult:
        user = request.user_text()
        sol_m = re.search(r"Claimed solution - (\S+)", user)
        ans_m = re.search(r"Claimed answers - (.+)", user)
        verdict = False
        if sol_m and ans_m:
            solution = sol_m.group(1).strip().lower()
            answers = [a.strip().lower() for a in ans_m.group(1).split(",") if a.strip()]
            verdict = (
                len(answers) == len(solution)
                and "".join(a[0] for a in answers if a) == solution
            )
        return BackendResult(text="True" if verdict else "False", output_tokens=4)


class ScriptedBackend:
    """Replays a fixed sequence of outputs; raises TransportError entries."""

    def __init__(self, outputs: Sequence[object], output_tokens: int = 10, cycle: bool = False):
        self.outputs = list(outputs)
        self.output_tokens = output_tokens
        self.cycle = cycle
        self._i = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> BackendResult:
        with self._lock:
            if self._i >= len(self.outputs):
                if not self.cycle:
                    raise TransportError("scripted backend exhausted")
                self._i = 0
            out = self.outputs[self._i]
            self._i += 1
        if isinstance(out, Exception):
            raise out
        return BackendResult(text=str(out), output_tokens=self.output_tokens)


# ---------------------------------------------------------------------------
# Live HTTP backend and registry loading
# ---------------------------------------------------------------------------

class HttpApiBackend:
    """Generic JSON-over-HTTP chat backend.

    POSTs {model, system, messages, temperature, reasoning_budget} and
    expects {text, usage: {output_tokens, reasoning_tokens}} back. The
    credential is read from an environment variable, never from config.
    """

    def __init__(self, endpoint: str, credential_env: Optional[str] = None, timeout_s: float = 60.0):
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout_s = timeout_s

    def complete(self, request: ChatRequest) -> BackendResult:
        import httpx

        headers = {}
        if self.credential_env:
            credential = os.environ.get(self.credential_env)
            if not credential:
                raise ConfigurationError(
                    f"credential env var {self.credential_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {credential}"
        payload = {
            "model": request.model_id,
            "system": request.system_prompt,
            "messages": [{"role": m.role, "text": m.text} for m in request.messages],
            "temperature": request.temperature,
            "reasoning_budget": request.reasoning_budget,
        }
        try:
            resp = httpx.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout_s)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransportError(f"backend returned {resp.status_code}")
        if resp.status_code != 200:
            raise ConfigurationError(f"backend returned {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        usage = body.get("usage", {})
        return BackendResult(
            text=body["text"],
            output_tokens=int(usage.get("output_tokens", 0)),
            reasoning_tokens=int(usage.get("reasoning_tokens", 0)),
        )


def build_gateway(registry: dict, **gateway_kwargs) -> LmGateway:
    """Build a gateway from a registry mapping: model_id -> backend spec."""
    gateway = LmGateway(**gateway_kwargs)
    for model_id, spec in registry.get("models", registry).items():
        kind = spec.get("kind", "mock")
        budget = spec.get("budget")
        if kind == "mock":
            config = MockBackendConfig(
                seed=spec.get("seed", 0),
                skill=spec.get("skill", 0.5),
                scale_names=tuple(spec.get("scale", ("easy", "medium", "hard"))),
                difficulty_thresholds=spec.get("thresholds"),
                base_output_tokens=spec.get("base_output_tokens"),
                per_clue_output_tokens=spec.get("per_clue_output_tokens", 40),
                icl_skill_bonus_per_10_shots=spec.get("icl_skill_bonus_per_10_shots", 0.0),
            )
            gateway.register(model_id, MockLmBackend(config), budget)
        elif kind == "http-api":
            gateway.register(
                model_id,
                HttpApiBackend(
                    endpoint=spec["endpoint"],
                    credential_env=spec.get("credential_env"),
                    timeout_s=spec.get("timeout_s", 60.0),
                ),
                budget,
            )
        else:
            raise ConfigurationError(f"unknown backend kind {kind!r} for {model_id!r}")
    return gateway


def load_registry(path: str, **gateway_kwargs) -> LmGateway:
    with open(path, "r", encoding="utf-8") as fh:
        return build_gateway(json.load(fh), **gateway_kwargs)


def default_mock_gateway(seed: int = 0, **gateway_kwargs) -> LmGateway:
    """Registry used by the CLI demo: one cheap generator, three responders."""
    return build_gateway(
        {
            "models": {
                "mock-gen": {
                    "kind": "mock",
                    "seed": seed,
                    "base_output_tokens": {"easy": 60, "medium": 90, "hard": 120},
                    "per_clue_output_tokens": 10,
                },
                "mock-solver-strong": {"kind": "mock", "seed": seed + 1, "skill": 0.9},
                "mock-solver-mid": {"kind": "mock", "seed": seed + 2, "skill": 0.6},
                "mock-solver-weak": {"kind": "mock", "seed": seed + 3, "skill": 0.2},
            }
        },
        **gateway_kwargs,
    )
