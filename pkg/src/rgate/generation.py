"""Offline challenge generation: difficulty calibration and bank building.

Step A calibrates an example bank per difficulty level against a responder
panel of graded skill: a candidate is accepted only when every designated
responder solves it and no other panel member does; otherwise the next
generation request raises or lowers difficulty. Step B mass-produces the
serving bank from those examples with random word/domain sampling, length
filtering, solvability checking, and hallucination auditing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from . import prompting
from .bank import ChallengeBank, build_bank, record_from_challenge
from .core import (
    Challenge,
    Clue,
    DifficultyLevel,
    DifficultyScale,
    Provenance,
    commit_solution,
    extract_answer,
    normalize_answer,
    validate_challenge,
)
from .errors import (
    CalibrationExhaustedError,
    ConfigurationError,
    ExtractionError,
    GenerationExhaustedError,
    InvalidInputError,
    ParseError,
)
from .gateway import CLUE_LEXICON, EPOCH_TIMESTAMP, ChatMessage, ChatRequest, LmGateway
from .prompting import HistoryEntry, TuningCommand

log = logging.getLogger(__name__)

DEFAULT_LENGTH_RANGES = {"easy": (4, 6), "medium": (8, 10), "hard": (11, 14)}


# ---------------------------------------------------------------------------
# Word and domain banks
# ---------------------------------------------------------------------------

def _content_digest(entries: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(entries).encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class WordBank:
    id: str
    entries: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", frozenset(self.entries))

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WordBank) and self.id == other.id

    @classmethod
    def from_entries(cls, entries: Sequence[str]) -> "WordBank":
        cleaned = [w.strip().lower() for w in entries if w.strip()]
        if not cleaned:
            raise ConfigurationError("word bank is empty")
        if len(set(cleaned)) != len(cleaned):
            raise ConfigurationError("word bank entries must be unique")
        for w in cleaned:
            if not w.isalpha():
                raise ConfigurationError(f"word bank entry {w!r} is not purely alphabetic")
        return cls(id=_content_digest(cleaned), entries=tuple(cleaned))


@dataclass(frozen=True, eq=False)
class DomainBank:
    id: str
    entries: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", frozenset(self.entries))

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DomainBank) and self.id == other.id

    @classmethod
    def from_entries(cls, entries: Sequence[str]) -> "DomainBank":
        cleaned = [d.strip() for d in entries if d.strip()]
        if not cleaned:
            raise ConfigurationError("domain bank is empty")
        if len(set(cleaned)) != len(cleaned):
            raise ConfigurationError("domain bank entries must be unique")
        for d in cleaned:
            if "," in d or "\n" in d:
                raise ConfigurationError(f"domain label {d!r} contains a reserved separator")
        return cls(id=_content_digest(cleaned), entries=tuple(cleaned))


def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def load_word_bank(path: str) -> WordBank:
    return WordBank.from_entries(_read_lines(path))


def load_domain_bank(path: str) -> DomainBank:
    return DomainBank.from_entries(_read_lines(path))


# ---------------------------------------------------------------------------
# Generator output parsing
# ---------------------------------------------------------------------------

_GATE_RE = re.compile(r"^\s*(?:\d+\.\s*)?Gate\s*=\s*(.*)$")
_SOLUTION_RE = re.compile(r"^\s*Solution\s*=\s*(\S+)\s*$")
_ANSWERS_RE = re.compile(r"^\s*Answers\s*=\s*(.+)$")
_CLUE_RE = re.compile(r"^\s*[-•*]\s*([^:]+):\s*(.+)$")


@dataclass(frozen=True)
class GateDraft:
    """Parsed generator output, before commitment and provenance binding."""

    preamble: str
    clues: tuple[tuple[str, str], ...]  # (domain, clue text)
    answers: tuple[str, ...]
    solution: str


def parse_generator_output(text: str) -> GateDraft:
    """Parse the Gate/Solution/Answers layout emitted by generator models."""
    preamble_parts: list[str] = []
    clues: list[tuple[str, str]] = []
    answers: tuple[str, ...] = ()
    solution = ""
    in_gate = False
    for line in text.splitlines():
        gate_m = _GATE_RE.match(line)
        if gate_m:
            in_gate = True
            preamble_parts = [gate_m.group(1).strip()]
            clues = []
            continue
        sol_m = _SOLUTION_RE.match(line)
        if sol_m:
            solution = sol_m.group(1).strip().lower()
            continue
        ans_m = _ANSWERS_RE.match(line)
        if ans_m:
            answers = tuple(a.strip() for a in ans_m.group(1).split(",") if a.strip())
            continue
        clue_m = _CLUE_RE.match(line)
        if clue_m and in_gate:
            clues.append((clue_m.group(1).strip(), clue_m.group(2).strip()))
            continue
        if in_gate and not clues and line.strip():
            preamble_parts.append(line.strip())

    if not in_gate:
        raise ParseError("no Gate block in generator output")
    if not solution:
        raise ParseError("no Solution line in generator output")
    if not clues:
        raise ParseError("no clue lines in generator output")
    if len(answers) != len(clues):
        raise ParseError(
            f"answer count {len(answers)} does not match clue count {len(clues)}"
        )
    for a in answers:
        if not a or not a[0].isalpha():
            raise ParseError(f"unusable clue answer {a!r}")
    return GateDraft(
        preamble=" ".join(preamble_parts).strip(),
        clues=tuple(clues),
        answers=answers,
        solution=solution,
    )


_TIER_RE = re.compile(r"tier (\d+)")


def assemble_challenge(
    draft: GateDraft,
    difficulty: DifficultyLevel,
    rng: random.Random,
    generator_id: str,
    icl_example_ids: Sequence[str] = (),
    word_bank_id: str = "freeform",
    domain_bank_id: str = "freeform",
    created_at: str = EPOCH_TIMESTAMP,
) -> Challenge:
    """Bind a parsed draft into a full challenge with commitment and provenance."""
    clues = tuple(
        Clue(index=i, domain_label=domain, clue_text=text, clue_answer=draft.answers[i])
        for i, (domain, text) in enumerate(draft.clues)
    )
    return Challenge(
        id=f"gate-{rng.getrandbits(64):016x}",
        difficulty=difficulty,
        preamble=draft.preamble,
        clues=clues,
        solution=draft.solution,
        commitment=commit_solution(draft.solution, rng.randbytes(16)),
        provenance=Provenance(
            generator_id=generator_id,
            sampled_word=draft.solution,
            sampled_domains=tuple(domain for domain, _ in draft.clues),
            icl_example_ids=tuple(icl_example_ids),
            word_bank_id=word_bank_id,
            domain_bank_id=domain_bank_id,
        ),
        created_at=created_at,
    )


# ---------------------------------------------------------------------------
# Solvability checkers
# ---------------------------------------------------------------------------

class RuleBasedChecker:
    """LM-free solvability check: structure, acrostic, and lexicon membership.

    Clue answers must be known words (drawn from the clue lexicon), which is
    the deterministic stand-in for "each clue admits its answer".
    """

    name = "rule-based"

    def __init__(self, lexicon: Optional[dict[str, tuple[str, ...]]] = None):
        self.lexicon = lexicon if lexicon is not None else CLUE_LEXICON

    def check(self, challenge: Challenge) -> bool:
        if len(challenge.clues) != len(challenge.solution):
            return False
        if challenge.acrostic() != challenge.solution.lower():
            return False
        for clue in challenge.clues:
            answer = clue.clue_answer.lower()
            if answer not in self.lexicon.get(answer[0], ()):
                return False
        return True


class LmChecker:
    """Solvability check delegated to a model (live deployments)."""

    name = "lm"

    def __init__(self, gateway: LmGateway, model_id: str):
        self.gateway = gateway
        self.model_id = model_id

    def check(self, challenge: Challenge) -> bool:
        system, user = prompting.solvability_prompt(challenge)
        completion = self.gateway.complete(
            ChatRequest(
                model_id=self.model_id,
                system_prompt=system,
                messages=(ChatMessage("user", user),),
                purpose="solvability",
            )
        )
        return completion.text.strip().lower().startswith("true")


# ---------------------------------------------------------------------------
# Panel evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelSpec:
    """Responder models of graded capability plus the per-level must-solve sets."""

    responders: tuple[str, ...]
    per_level_subset: dict[str, frozenset[str]]

    def __post_init__(self):
        members = set(self.responders)
        for level_name, subset in self.per_level_subset.items():
            if not subset:
                raise InvalidInputError(f"designated subset for {level_name!r} is empty")
            if not subset <= members:
                raise InvalidInputError(
                    f"designated subset for {level_name!r} is not drawn from the panel"
                )


def evaluate_panel(
    challenge: Challenge,
    responders: Sequence[str],
    gateway: LmGateway,
) -> dict[str, Optional[str]]:
    """Every responder attempts the challenge; None marks extraction failure."""
    transcript: dict[str, Optional[str]] = {}
    system, user = prompting.prover_prompt(challenge)
    for model_id in responders:
        completion = gateway.complete(
            ChatRequest(
                model_id=model_id,
                system_prompt=system,
                messages=(ChatMessage("user", user),),
                purpose="response",
            )
        )
        try:
            transcript[model_id] = normalize_answer(extract_answer(completion.text))
        except ExtractionError:
            transcript[model_id] = None
    return transcript


def acceptance_predicate(
    challenge: Challenge,
    designated: frozenset[str],
    transcript: dict[str, Optional[str]],
) -> bool:
    """True iff exactly the designated responders solved the challenge."""
    target = normalize_answer(challenge.solution)
    solved = {m for m, answer in transcript.items() if answer == target}
    return designated <= solved and not (solved - designated)


# ---------------------------------------------------------------------------
# Step A: calibrated example bank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IclExample:
    challenge: Challenge
    level: DifficultyLevel
    panel_transcript: dict[str, Optional[str]]
    tuning_history: tuple[TuningCommand, ...]


def challenge_gen(
    history: Sequence[HistoryEntry],
    tuning: TuningCommand,
    generator_id: str,
    checker,
    gateway: LmGateway,
    rng: random.Random,
    scale: Optional[DifficultyScale] = None,
    max_attempts: int = 10,
) -> tuple[Challenge, int]:
    """Generate one checker-approved challenge, retrying up to the bound.

    Returns the challenge and the number of attempts consumed. The assigned
    difficulty is read from the generated preamble's tier marker when
    present; calibration relabels accepted examples with the target level.
    """
    scale = scale or DifficultyScale()
    if not history and tuning is not TuningCommand.FIRST:
        raise InvalidInputError("empty history requires the first-gate command")
    for attempt in range(1, max_attempts + 1):
        system, user = prompting.icl_generation_prompt(history, tuning, attempt)
        completion = gateway.complete(
            ChatRequest(
                model_id=generator_id,
                system_prompt=system,
                messages=(ChatMessage("user", user),),
                purpose="generation",
            )
        )
        try:
            draft = parse_generator_output(completion.text)
        except ParseError:
            continue
        tier_m = _TIER_RE.search(draft.preamble)
        rank = min(int(tier_m.group(1)) - 1, len(scale) - 1) if tier_m else 0
        difficulty = scale.levels()[max(rank, 0)]
        challenge = assemble_challenge(draft, difficulty, rng, generator_id)
        if checker.check(challenge):
            return challenge, attempt
    raise GenerationExhaustedError(
        f"no checker-approved challenge within {max_attempts} attempts"
    )


def generate_icl_bank(
    panel: PanelSpec,
    levels: Sequence[DifficultyLevel],
    k: int,
    generator_id: str,
    checker,
    gateway: LmGateway,
    rng: Optional[random.Random] = None,
    scale: Optional[DifficultyScale] = None,
    trial_budget: int = 50_000,
) -> list[IclExample]:
    """Calibrate k examples per level against the responder panel.

    One candidate is evaluated per tuning iteration; the command sequence
    follows the accept/too-easy/too-hard outcomes. The budget counts
    individual responder evaluations per level.
    """
    if k < 0:
        raise InvalidInputError("k must be non-negative")
    rng = rng or random.Random()
    scale = scale or DifficultyScale()
    for level in levels:
        if level.name not in panel.per_level_subset:
            raise InvalidInputError(f"panel has no designated subset for {level.name!r}")

    examples: list[IclExample] = []
    for level in levels:
        designated = panel.per_level_subset[level.name]
        trail: list[HistoryEntry] = []
        commands: list[TuningCommand] = []
        evaluations = 0
        accepted = 0
        tuning = TuningCommand.FIRST
        while accepted < k:
            if evaluations >= trial_budget:
                raise CalibrationExhaustedError(level.name, evaluations)
            candidate, _ = challenge_gen(
                trail, tuning, generator_id, checker, gateway, rng, scale
            )
            transcript = evaluate_panel(candidate, panel.responders, gateway)
            evaluations += len(panel.responders)
            commands.append(tuning)
            trail.append(HistoryEntry(candidate, tuning))

            target = normalize_answer(candidate.solution)
            solved = {m for m, a in transcript.items() if a == target}
            if designated <= solved and not (solved - designated):
                examples.append(
                    IclExample(
                        challenge=replace(candidate, difficulty=level),
                        level=level,
                        panel_transcript=transcript,
                        tuning_history=tuple(commands),
                    )
                )
                accepted += 1
                tuning = TuningCommand.MAINTAIN
            elif designated <= solved:
                tuning = TuningCommand.INCREASE
            else:
                tuning = TuningCommand.REDUCE
    return examples


# ---------------------------------------------------------------------------
# Step B: large-scale bank generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenBatchSpec:
    target_count: int
    level_mix: dict[str, float]
    clue_count_range: Optional[dict[str, tuple[int, int]]] = None
    seed: int = 0
    icl_shots_per_prompt: Optional[int] = None  # None = all examples of the level
    max_attempts_per_slot: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.target_count < 0:
            raise InvalidInputError("target count must be non-negative")
        total = sum(self.level_mix.values())
        if self.level_mix and abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"level mix fractions sum to {total}, expected 1")

    def ranges(self) -> dict[str, tuple[int, int]]:
        return self.clue_count_range or DEFAULT_LENGTH_RANGES


def _level_counts(spec: GenBatchSpec, scale: DifficultyScale) -> dict[str, int]:
    # Largest-remainder rounding keeps every level within 1 of its target.
    names = [n for n in scale.names if spec.level_mix.get(n, 0) > 0]
    floors = {n: int(spec.level_mix[n] * spec.target_count) for n in names}
    remainder = spec.target_count - sum(floors.values())
    by_frac = sorted(
        names,
        key=lambda n: (spec.level_mix[n] * spec.target_count) - floors[n],
        reverse=True,
    )
    for n in by_frac[:remainder]:
        floors[n] += 1
    return floors


def generate_bank(
    spec: GenBatchSpec,
    icl: Sequence[IclExample],
    words: WordBank,
    domains: DomainBank,
    generator_id: str,
    checker,
    gateway: LmGateway,
    scale: Optional[DifficultyScale] = None,
    created_at: Optional[str] = None,
    stats: Optional[dict] = None,
) -> ChallengeBank:
    """Populate a serving bank per the batch spec.

    Deterministic for a fixed (spec, seed, backend configs): slot plans are
    pre-drawn from the seed, and seeded runs stamp the fixed epoch timestamp
    so repeated runs serialize byte-identically.
    """
    scale = scale or DifficultyScale()
    created_at = created_at or EPOCH_TIMESTAMP
    rng = random.Random(spec.seed)
    ranges = spec.ranges()

    icl_by_level: dict[str, list[IclExample]] = {}
    for example in icl:
        icl_by_level.setdefault(example.level.name, []).append(example)

    counts = _level_counts(spec, scale)
    for name, count in counts.items():
        if count > 0 and not icl_by_level.get(name):
            raise ConfigurationError(f"no calibrated examples for level {name!r}")

    # Pre-draw every slot's inputs so worker scheduling cannot perturb output.
    plans = []
    for name in scale.names:
        for _ in range(counts.get(name, 0)):
            lo, hi = ranges[name]
            eligible = [w for w in words.entries if lo <= len(w) <= hi]
            if not eligible:
                raise ConfigurationError(
                    f"word bank has no entries of length {lo}..{hi} for level {name!r}"
                )
            word = rng.choice(eligible)
            sampled_domains = tuple(rng.choice(domains.entries) for _ in word)
            plans.append((name, word, sampled_domains, rng.getrandbits(64)))

    skipped: list[tuple[str, str, str]] = []

    def run_slot(plan):
        name, word, sampled_domains, slot_seed = plan
        level = scale.resolve(name)
        slot_rng = random.Random(slot_seed)
        shots = icl_by_level.get(name, [])
        if spec.icl_shots_per_prompt is not None:
            shots = shots[: spec.icl_shots_per_prompt]
        shot_ids = tuple(e.challenge.id for e in shots)
        shot_gates = [e.challenge for e in shots]
        for attempt in range(1, spec.max_attempts_per_slot + 1):
            system, user = prompting.bank_generation_prompt(
                word, sampled_domains, name, shot_gates, attempt
            )
            completion = gateway.complete(
                ChatRequest(
                    model_id=generator_id,
                    system_prompt=system,
                    messages=(ChatMessage("user", user),),
                    purpose="generation",
                )
            )
            try:
                draft = parse_generator_output(completion.text)
            except ParseError:
                continue
            challenge = assemble_challenge(
                draft,
                level,
                slot_rng,
                generator_id,
                icl_example_ids=shot_ids,
                word_bank_id=words.id,
                domain_bank_id=domains.id,
                created_at=created_at,
            )
            report = validate_challenge(challenge, words, domains)
            if report.bankable and checker.check(challenge):
                return challenge
        return (name, word, "attempts exhausted")

    results = []
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(run_slot, plans))
    else:
        results = [run_slot(p) for p in plans]

    entries: list[Challenge] = []
    for res in results:
        if isinstance(res, Challenge):
            entries.append(res)
        else:
            skipped.append(res)
            log.warning("bank slot skipped (%s, word=%s): %s", *res)

    if stats is not None:
        stats["skipped_slots"] = skipped
        stats["generated"] = len(entries)

    return build_bank(
        entries,
        word_bank_id=words.id,
        domain_bank_id=domains.id,
        created_at=created_at,
        scale=scale,
    )


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HallucinationReport:
    words_used: int
    words_hallucinated: int
    domains_used: int
    domains_hallucinated: int

    @property
    def rate(self) -> float:
        denominator = self.words_used + self.domains_used
        if denominator == 0:
            return 0.0
        return (self.words_hallucinated + self.domains_hallucinated) / denominator

    @property
    def footnote(self) -> str:
        # Guard against a tempting mis-derivation: raw counts of 4/4000
        # words and 2/2000 domains give (4+2)/(4000+2000) = 0.1%, not 0.01%.
        return (
            "rate = (hallucinated words + hallucinated domains) / "
            "(words used + domains used); e.g. counts of 4/4000 and 2/2000 "
            "give 0.1%, not 0.01%."
        )


def audit_hallucinations(
    bank: ChallengeBank, words: WordBank, domains: DomainBank
) -> HallucinationReport:
    """Count provenance samples that fall outside the supplied banks."""
    words_used = 0
    words_hallucinated = 0
    domains_used = 0
    domains_hallucinated = 0
    for rec in bank.records:
        if rec.audit is None:
            continue
        prov = rec.audit.provenance
        words_used += 1
        if prov.sampled_word not in words:
            words_hallucinated += 1
        for label in prov.sampled_domains:
            domains_used += 1
            if label not in domains:
                domains_hallucinated += 1
    return HallucinationReport(
        words_used=words_used,
        words_hallucinated=words_hallucinated,
        domains_used=domains_used,
        domains_hallucinated=domains_hallucinated,
    )


def measure_unsolvable_rate(
    generator_id: str,
    checker,
    gateway: LmGateway,
    sample_size: int,
    words: WordBank,
    domains: DomainBank,
    icl: Sequence[IclExample] = (),
    scale: Optional[DifficultyScale] = None,
    seed: int = 0,
) -> float:
    """Raw candidates failing validation or the checker, per 100 generated.

    Candidates are produced with a single attempt each (no retry loop), so
    the figure reflects the generator's raw failure rate.
    """
    if sample_size < 1:
        raise InvalidInputError("sample size must be at least 1")
    scale = scale or DifficultyScale()
    rng = random.Random(seed)
    ranges = DEFAULT_LENGTH_RANGES
    icl_by_level: dict[str, list[Challenge]] = {}
    for example in icl:
        icl_by_level.setdefault(example.level.name, []).append(example.challenge)

    level_names = [n for n in scale.names if n in ranges] or list(scale.names)
    failures = 0
    for i in range(sample_size):
        name = level_names[i % len(level_names)]
        lo, hi = ranges.get(name, (4, 6))
        eligible = [w for w in words.entries if lo <= len(w) <= hi] or list(words.entries)
        word = rng.choice(eligible)
        sampled_domains = tuple(rng.choice(domains.entries) for _ in word)
        system, user = prompting.bank_generation_prompt(
            word, sampled_domains, name, icl_by_level.get(name, []), attempt=i + 1
        )
        completion = gateway.complete(
            ChatRequest(
                model_id=generator_id,
                system_prompt=system,
                messages=(ChatMessage("user", user),),
                purpose="generation",
            )
        )
        try:
            draft = parse_generator_output(completion.text)
        except ParseError:
            failures += 1
            continue
        try:
            challenge = assemble_challenge(
                draft, scale.resolve(name), rng, generator_id,
                word_bank_id=words.id, domain_bank_id=domains.id,
            )
        except InvalidInputError:
            failures += 1
            continue
        report = validate_challenge(challenge, words, domains)
        if not (report.structural_ok and report.acrostic_ok and checker.check(challenge)):
            failures += 1
    return failures / sample_size * 100.0


# ---------------------------------------------------------------------------
# ICL example file round-trip (JSONL)
# ---------------------------------------------------------------------------

def save_icl_examples(examples: Sequence[IclExample], path: str) -> None:
    from .bank import _audit_line, _serving_line  # reuse canonical forms

    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = record_from_challenge(ex.challenge)
            fh.write(
                json.dumps(
                    {
                        "level": ex.level.name,
                        "serving": json.loads(_serving_line(rec)),
                        "audit": json.loads(_audit_line(rec)),
                        "transcript": ex.panel_transcript,
                        "tuning": [c.name for c in ex.tuning_history],
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_icl_examples(path: str, scale: Optional[DifficultyScale] = None) -> list[IclExample]:
    from .bank import BankRecord, _parse_audit, _parse_serving

    scale = scale or DifficultyScale()
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            serving = _parse_serving(obj["serving"])
            audit = _parse_audit(obj["audit"])
            rec = BankRecord(
                id=serving.id,
                level_name=serving.level_name,
                preamble=serving.preamble,
                clues=serving.clues,
                commitment=serving.commitment,
                audit=audit,
            )
            level = scale.resolve(obj["level"])
            examples.append(
                IclExample(
                    challenge=rec.to_challenge(scale),
                    level=level,
                    panel_transcript=dict(obj["transcript"]),
                    tuning_history=tuple(TuningCommand[n] for n in obj["tuning"]),
                )
            )
    return examples
