"""Core domain types for reasoning-gate challenges.

Covers answer normalization, salted solution commitments with constant-time
verification, structural (acrostic) validation, and extraction of the final
answer from a solver's free-form output.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .errors import ExtractionError, InvalidInputError

SALT_LEN = 16

# Hash functions usable for commitments; the tag travels with the commitment
# so banks built under one algorithm keep verifying after a default change.
HASH_REGISTRY = {
    "sha256": (hashlib.sha256, 32),
    "sha3-256": (hashlib.sha3_256, 32),
}
DEFAULT_HASH = "sha256"


def normalize_answer(raw: str) -> str:
    """Fold an answer to canonical form: lowercase, no whitespace anywhere."""
    return "".join(raw.split()).lower()


# ---------------------------------------------------------------------------
# Difficulty levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DifficultyLevel:
    """One rung of a difficulty scale; ordered by rank."""

    name: str
    rank: int

    def __lt__(self, other: "DifficultyLevel") -> bool:
        return self.rank < other.rank

    def __le__(self, other: "DifficultyLevel") -> bool:
        return self.rank <= other.rank


class DifficultyScale:
    """An ordered set of difficulty level names.

    ``resolve`` accepts level names plus the alias ``extreme`` for the
    hardest configured level.
    """

    ALIASES = {"extreme": -1, "extremely-difficult": -1}

    def __init__(self, names: Sequence[str] = ("easy", "medium", "hard")):
        if not names:
            raise InvalidInputError("difficulty scale needs at least one level")
        if len(set(names)) != len(names):
            raise InvalidInputError("difficulty level names must be unique")
        self.names = tuple(names)
        self._levels = tuple(DifficultyLevel(n, i) for i, n in enumerate(names))

    def levels(self) -> tuple[DifficultyLevel, ...]:
        return self._levels

    def resolve(self, name: str) -> DifficultyLevel:
        if name in self.ALIASES:
            return self._levels[self.ALIASES[name]]
        for lvl in self._levels:
            if lvl.name == name:
                return lvl
        raise InvalidInputError(f"unknown difficulty level {name!r}")

    def __len__(self) -> int:
        return len(self._levels)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DifficultyScale) and self.names == other.names


DEFAULT_SCALE = DifficultyScale()


# ---------------------------------------------------------------------------
# Challenge structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Clue:
    """A single riddle; its answer's first letter contributes to the solution."""

    index: int
    domain_label: str
    clue_text: str
    clue_answer: str

    def __post_init__(self):
        if not self.domain_label:
            raise InvalidInputError("clue domain label must be non-empty")
        if not self.clue_answer or not self.clue_answer[0].isalpha():
            raise InvalidInputError(
                f"clue answer must start with a letter, got {self.clue_answer!r}"
            )


@dataclass(frozen=True)
class SolutionCommitment:
    """Salted digest of a solution, verifiable without the plaintext."""

    salt: bytes
    digest: bytes
    algorithm_tag: str = DEFAULT_HASH

    def __post_init__(self):
        if self.algorithm_tag not in HASH_REGISTRY:
            raise InvalidInputError(f"unknown hash algorithm {self.algorithm_tag!r}")
        if len(self.salt) != SALT_LEN:
            raise InvalidInputError(f"salt must be {SALT_LEN} bytes, got {len(self.salt)}")
        expected = HASH_REGISTRY[self.algorithm_tag][1]
        if len(self.digest) != expected:
            raise InvalidInputError(
                f"digest length {len(self.digest)} does not match {self.algorithm_tag}"
            )


@dataclass(frozen=True)
class Provenance:
    """Record of what produced a challenge: generator, samples, bank digests."""

    generator_id: str
    sampled_word: str
    sampled_domains: tuple[str, ...]
    icl_example_ids: tuple[str, ...] = ()
    word_bank_id: str = "unbound"
    domain_bank_id: str = "unbound"


@dataclass(frozen=True)
class Challenge:
    """One rebus gate: clues whose answer initials spell the hidden word.

    Construction is permissive about the acrostic property so that raw
    generator output can be represented and then judged by
    ``validate_challenge``; only field-shape constraints are enforced here.
    """

    id: str
    difficulty: DifficultyLevel
    preamble: str
    clues: tuple[Clue, ...]
    solution: str
    commitment: SolutionCommitment
    provenance: Provenance
    created_at: str

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("challenge id must be non-empty")
        if not self.clues:
            raise InvalidInputError("challenge needs at least one clue")
        if not self.solution:
            raise InvalidInputError("challenge solution must be non-empty")

    def acrostic(self) -> str:
        """Lowercased first letters of the clue answers, in order."""
        return "".join(c.clue_answer[0].lower() for c in self.clues)

    def with_clue_answer(self, index: int, answer: str) -> "Challenge":
        clues = list(self.clues)
        clues[index] = replace(clues[index], clue_answer=answer)
        return replace(self, clues=tuple(clues))


@dataclass(frozen=True)
class ValidationReport:
    structural_ok: bool
    acrostic_ok: bool
    word_in_bank: bool
    domain_hallucinations: tuple[str, ...] = ()
    word_hallucination: bool = False

    @property
    def bankable(self) -> bool:
        return (
            self.structural_ok
            and self.acrostic_ok
            and self.word_in_bank
            and not self.word_hallucination
            and not self.domain_hallucinations
        )


# ---------------------------------------------------------------------------
# Commitments
# ---------------------------------------------------------------------------

def commit_solution(
    solution: str, salt: bytes, algorithm_tag: str = DEFAULT_HASH
) -> SolutionCommitment:
    """Commit to a solution as H(salt || normalized solution)."""
    normalized = normalize_answer(solution)
    if not normalized:
        raise InvalidInputError("cannot commit to an empty solution")
    if algorithm_tag not in HASH_REGISTRY:
        raise InvalidInputError(f"unknown hash algorithm {algorithm_tag!r}")
    if len(salt) != SALT_LEN:
        raise InvalidInputError(f"salt must be {SALT_LEN} bytes, got {len(salt)}")
    hasher = HASH_REGISTRY[algorithm_tag][0]
    digest = hasher(salt + normalized.encode("utf-8")).digest()
    return SolutionCommitment(salt=salt, digest=digest, algorithm_tag=algorithm_tag)


def verify_response(commitment: SolutionCommitment, response: str) -> bool:
    """Check a response against a commitment in constant time.

    Cost is one hash plus a constant-time byte comparison; it does not
    depend on bank size or on whether the response is correct.
    """
    hasher = HASH_REGISTRY[commitment.algorithm_tag][0]
    candidate = hasher(
        commitment.salt + normalize_answer(response).encode("utf-8")
    ).digest()
    return hmac.compare_digest(candidate, commitment.digest)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_challenge(challenge: Challenge, words, domains) -> ValidationReport:
    """Judge a challenge against its structural invariants and the banks.

    ``words`` and ``domains`` are bank objects exposing ``__contains__``
    over their entries. All failures land in the report; nothing raises.
    """
    prov = challenge.provenance
    structural_ok = (
        len(challenge.clues) == len(challenge.solution)
        and prov.sampled_word == challenge.solution
        and len(prov.sampled_domains) == len(challenge.clues)
    )
    acrostic_ok = challenge.acrostic() == challenge.solution.lower()
    word_in_bank = challenge.solution in words
    word_hallucination = prov.sampled_word not in words
    domain_hallucinations = tuple(
        label for label in prov.sampled_domains if label not in domains
    )
    return ValidationReport(
        structural_ok=structural_ok,
        acrostic_ok=acrostic_ok,
        word_in_bank=word_in_bank,
        domain_hallucinations=domain_hallucinations,
        word_hallucination=word_hallucination,
    )


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------

# A single-entry mapping literal whose key starts with "Gate" (any suffix,
# e.g. "Gate 3"), with straight or curly quotes, single or double.
_QUOTE = "\"'“”‘’"
_ANSWER_RE = re.compile(
    r"\{\s*[%(q)s]Gate[^%(q)s]*[%(q)s]\s*:\s*[%(q)s]([^%(q)s{}]*)[%(q)s]\s*\}"
    % {"q": _QUOTE}
)


def extract_answer(responder_output: str) -> str:
    """Pull the final answer out of a solver transcript.

    Solvers are instructed to end with a one-entry mapping like
    ``{"Gate": "word"}``; reasoning text may revise earlier candidates, so
    the last well-formed mapping wins. Code fences and quote styles vary
    across models and are tolerated.
    """
    matches = _ANSWER_RE.findall(responder_output)
    if not matches:
        raise ExtractionError("no answer mapping found in responder output")
    return matches[-1]
