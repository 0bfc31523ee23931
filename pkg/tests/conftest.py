from __future__ import annotations

import dataclasses
import secrets
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rgate.bank import build_bank
from rgate.core import DifficultyScale
from rgate.gateway import default_mock_gateway, mock_generate_challenge
from rgate.generation import DomainBank, PanelSpec, RuleBasedChecker, WordBank

SCALE = DifficultyScale()
EPOCH = "1970-01-01T00:00:00+00:00"

# Standard three-responder panel: skills 0.9 / 0.6 / 0.2 against thresholds
# 0.15 / 0.5 / 0.85.
STRONG, MID, WEAK = "mock-solver-strong", "mock-solver-mid", "mock-solver-weak"
PANEL = PanelSpec(
    responders=(STRONG, MID, WEAK),
    per_level_subset={
        "easy": frozenset({STRONG, MID, WEAK}),
        "medium": frozenset({STRONG, MID}),
        "hard": frozenset({STRONG}),
    },
)

WORDS_BY_LEVEL = {
    "easy": ["isles", "amber", "stone", "tulip", "frost", "grove", "prism", "cedar"],
    "medium": ["alchemist", "blueprint", "cathedral", "chronicle"],
    "hard": ["thunderstorm", "constellation", "metamorphosis"],
}


def make_challenge(word: str, level_name: str = "easy", seed: int = 0, ident: str | None = None):
    level = SCALE.resolve(level_name)
    ch = mock_generate_challenge(word, [f"Domain{j}" for j in range(len(word))], level, seed)
    if ident is not None:
        ch = dataclasses.replace(ch, id=ident)
    return ch


def make_bank(n: int, level_name: str = "easy", word: str = "isles", seed0: int = 0):
    challenges = [
        make_challenge(word, level_name, seed=seed0 + i, ident=f"ch-{level_name}-{i:06d}")
        for i in range(n)
    ]
    return build_bank(challenges, "test-words", "test-domains", created_at=EPOCH)


@pytest.fixture
def gateway():
    return default_mock_gateway(seed=0)


@pytest.fixture
def checker():
    return RuleBasedChecker()


@pytest.fixture
def small_banks():
    words = WordBank.from_entries(
        WORDS_BY_LEVEL["easy"] + WORDS_BY_LEVEL["medium"] + WORDS_BY_LEVEL["hard"]
    )
    domains = DomainBank.from_entries(
        ["Physics", "Chemistry", "Humanities", "Mathematics", "Astronomy"]
    )
    return words, domains


@pytest.fixture
def mac_key():
    return secrets.token_bytes(32)
