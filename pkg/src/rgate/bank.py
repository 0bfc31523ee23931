"""Challenge bank persistence and serve-once sampling.

Bank files are line-delimited JSON, split into a ``serving`` section
(prompt text, clue text, commitments; no plaintext solutions) and an
``audit`` section (solutions, per-clue answers, provenance), so a
deployment can ship the serving section alone. A header line carries a
digest over all entry lines; loads verify it. Sampling is serve-once per
epoch and linearizable under one lock.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import (
    Challenge,
    Clue,
    DifficultyScale,
    Provenance,
    SolutionCommitment,
)
from .errors import (
    BankCorruptionError,
    BankExhaustedError,
    InvalidInputError,
    UnsupportedFormatError,
)

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Records and views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClueView:
    domain_label: str
    clue_text: str


@dataclass(frozen=True)
class ChallengeView:
    """The solver-facing slice of a challenge. Never carries solutions."""

    id: str
    level_name: str
    preamble: str
    clues: tuple[ClueView, ...]
    commitment: SolutionCommitment

    def to_wire(self) -> dict:
        # The commitment stays server-side: shipping salt+digest would let a
        # client dictionary-attack the solution offline.
        return {
            "challenge_id": self.id,
            "preamble": self.preamble,
            "clues": [{"domain": c.domain_label, "text": c.clue_text} for c in self.clues],
        }


@dataclass(frozen=True)
class AuditData:
    solution: str
    clue_answers: tuple[str, ...]
    provenance: Provenance
    created_at: str


@dataclass(frozen=True)
class BankRecord:
    """One banked challenge; ``audit`` is absent in serving-only files."""

    id: str
    level_name: str
    preamble: str
    clues: tuple[ClueView, ...]
    commitment: SolutionCommitment
    audit: Optional[AuditData] = None

    def view(self) -> ChallengeView:
        return ChallengeView(
            id=self.id,
            level_name=self.level_name,
            preamble=self.preamble,
            clues=self.clues,
            commitment=self.commitment,
        )

    def to_challenge(self, scale: DifficultyScale) -> Challenge:
        if self.audit is None:
            raise InvalidInputError(f"record {self.id} has no audit section")
        clues = tuple(
            Clue(
                index=i,
                domain_label=cv.domain_label,
                clue_text=cv.clue_text,
                clue_answer=self.audit.clue_answers[i],
            )
            for i, cv in enumerate(self.clues)
        )
        return Challenge(
            id=self.id,
            difficulty=scale.resolve(self.level_name),
            preamble=self.preamble,
            clues=clues,
            solution=self.audit.solution,
            commitment=self.commitment,
            provenance=self.audit.provenance,
            created_at=self.audit.created_at,
        )


def record_from_challenge(challenge: Challenge) -> BankRecord:
    return BankRecord(
        id=challenge.id,
        level_name=challenge.difficulty.name,
        preamble=challenge.preamble,
        clues=tuple(ClueView(c.domain_label, c.clue_text) for c in challenge.clues),
        commitment=challenge.commitment,
        audit=AuditData(
            solution=challenge.solution,
            clue_answers=tuple(c.clue_answer for c in challenge.clues),
            provenance=challenge.provenance,
            created_at=challenge.created_at,
        ),
    )


@dataclass(frozen=True)
class ServedMark:
    challenge_id: str
    session_id: str
    timestamp: float
    epoch_id: str


@dataclass(frozen=True)
class BankHeader:
    format_version: int
    bank_id: str
    word_bank_id: str
    domain_bank_id: str
    created_at: str
    epoch_id: str
    scale_names: tuple[str, ...]
    level_counts: dict[str, int]
    entry_count: int
    entries_digest: str

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BankHeader) and self.__dict__ == other.__dict__


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def _canon(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _serving_line(rec: BankRecord) -> str:
    return _canon(
        {
            "record": "serving",
            "id": rec.id,
            "level": rec.level_name,
            "preamble": rec.preamble,
            "clues": [{"domain": c.domain_label, "text": c.clue_text} for c in rec.clues],
            "commitment": {
                "algorithm": rec.commitment.algorithm_tag,
                "salt": rec.commitment.salt.hex(),
                "digest": rec.commitment.digest.hex(),
            },
        }
    )


def _audit_line(rec: BankRecord) -> str:
    a = rec.audit
    return _canon(
        {
            "record": "audit",
            "id": rec.id,
            "solution": a.solution,
            "clue_answers": list(a.clue_answers),
            "created_at": a.created_at,
            "provenance": {
                "generator_id": a.provenance.generator_id,
                "sampled_word": a.provenance.sampled_word,
                "sampled_domains": list(a.provenance.sampled_domains),
                "icl_example_ids": list(a.provenance.icl_example_ids),
                "word_bank_id": a.provenance.word_bank_id,
                "domain_bank_id": a.provenance.domain_bank_id,
            },
        }
    )


def _parse_serving(obj: dict) -> BankRecord:
    com = obj["commitment"]
    return BankRecord(
        id=obj["id"],
        level_name=obj["level"],
        preamble=obj["preamble"],
        clues=tuple(ClueView(c["domain"], c["text"]) for c in obj["clues"]),
        commitment=SolutionCommitment(
            salt=bytes.fromhex(com["salt"]),
            digest=bytes.fromhex(com["digest"]),
            algorithm_tag=com["algorithm"],
        ),
    )


def _parse_audit(obj: dict) -> AuditData:
    p = obj["provenance"]
    return AuditData(
        solution=obj["solution"],
        clue_answers=tuple(obj["clue_answers"]),
        provenance=Provenance(
            generator_id=p["generator_id"],
            sampled_word=p["sampled_word"],
            sampled_domains=tuple(p["sampled_domains"]),
            icl_example_ids=tuple(p["icl_example_ids"]),
            word_bank_id=p["word_bank_id"],
            domain_bank_id=p["domain_bank_id"],
        ),
        created_at=obj["created_at"],
    )


# ---------------------------------------------------------------------------
# ChallengeBank
# ---------------------------------------------------------------------------

class ChallengeBank:
    """Difficulty-indexed challenge pool with serve-once issuance.

    The mark-and-return transition in :meth:`sample` happens under one lock,
    so no two sessions can draw the same entry within an epoch.
    """

    def __init__(
        self,
        header: BankHeader,
        records: Sequence[BankRecord],
        served_log: Sequence[ServedMark] = (),
        rng: Optional[random.Random] = None,
    ):
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("bank challenge ids must be unique")
        self.header = header
        self.records = list(records)
        self.served_log = list(served_log)
        self._by_id = {r.id: i for i, r in enumerate(self.records)}
        self._rng = rng if rng is not None else random.Random()
        self._lock = threading.Lock()
        self._rebuild_unserved()

    def _rebuild_unserved(self) -> None:
        served_here = {
            m.challenge_id for m in self.served_log if m.epoch_id == self.header.epoch_id
        }
        self._unserved: dict[str, list[int]] = {}
        for i, rec in enumerate(self.records):
            if rec.id in served_here:
                continue
            self._unserved.setdefault(rec.level_name, []).append(i)

    # -- queries -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ChallengeBank)
            and self.header == other.header
            and self.records == other.records
            and self.served_log == other.served_log
        )

    def get(self, challenge_id: str) -> BankRecord:
        return self.records[self._by_id[challenge_id]]

    def challenges(self, scale: Optional[DifficultyScale] = None) -> list[Challenge]:
        scale = scale or DifficultyScale(self.header.scale_names)
        return [r.to_challenge(scale) for r in self.records]

    def unserved_count(self, level_name: str) -> int:
        with self._lock:
            return len(self._unserved.get(level_name, ()))

    def has_unserved(self, level_name: str) -> bool:
        return self.unserved_count(level_name) > 0

    # -- serving -----------------------------------------------------------

    def sample(self, level_name: str, session_id: str, timestamp: float = 0.0) -> ChallengeView:
        """Uniformly draw an unserved entry at a level and mark it served."""
        with self._lock:
            pool = self._unserved.get(level_name)
            if not pool:
                raise BankExhaustedError(f"no unserved challenges at level {level_name!r}")
            pos = self._rng.randrange(len(pool))
            pool[pos], pool[-1] = pool[-1], pool[pos]
            index = pool.pop()
            rec = self.records[index]
            self.served_log.append(
                ServedMark(rec.id, session_id, timestamp, self.header.epoch_id)
            )
            return rec.view()

    def reset_serving(self, epoch_id: str) -> None:
        """Start a new serving epoch; prior marks stay in the log."""
        with self._lock:
            self.header = BankHeader(**{**self.header.__dict__, "epoch_id": epoch_id})
            self._rebuild_unserved()


def build_bank(
    challenges: Sequence[Challenge],
    word_bank_id: str,
    domain_bank_id: str,
    created_at: str,
    epoch_id: str = "epoch-0",
    scale: Optional[DifficultyScale] = None,
    rng: Optional[random.Random] = None,
) -> ChallengeBank:
    records = [record_from_challenge(c) for c in challenges]
    scale_names = (scale or DifficultyScale()).names
    level_counts: dict[str, int] = {}
    for rec in records:
        level_counts[rec.level_name] = level_counts.get(rec.level_name, 0) + 1
    digest = _entries_digest(records, include_audit=True)
    header = BankHeader(
        format_version=FORMAT_VERSION,
        bank_id="bank-" + digest[:16],
        word_bank_id=word_bank_id,
        domain_bank_id=domain_bank_id,
        created_at=created_at,
        epoch_id=epoch_id,
        scale_names=tuple(scale_names),
        level_counts=level_counts,
        entry_count=len(records),
        entries_digest=digest,
    )
    return ChallengeBank(header, records, rng=rng)


def _entries_digest(records: Sequence[BankRecord], include_audit: bool) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(_serving_line(rec).encode("utf-8"))
        h.update(b"\n")
    if include_audit:
        for rec in records:
            if rec.audit is not None:
                h.update(_audit_line(rec).encode("utf-8"))
                h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Save / load
# ---------------------------------------------------------------------------

def save_bank(bank: ChallengeBank, path: str, include_audit: bool = True) -> None:
    """Write the bank atomically (temp file + rename)."""
    has_audit = include_audit and all(r.audit is not None for r in bank.records)
    digest = _entries_digest(bank.records, include_audit=has_audit)
    header = {
        "record": "header",
        "format_version": bank.header.format_version,
        "bank_id": bank.header.bank_id,
        "word_bank_id": bank.header.word_bank_id,
        "domain_bank_id": bank.header.domain_bank_id,
        "created_at": bank.header.created_at,
        "epoch_id": bank.header.epoch_id,
        "scale": list(bank.header.scale_names),
        "level_counts": bank.header.level_counts,
        "entry_count": len(bank.records),
        "entries_digest": digest,
    }
    lines = [_canon(header)]
    lines += [_serving_line(r) for r in bank.records]
    if has_audit:
        lines += [_audit_line(r) for r in bank.records]
    for mark in bank.served_log:
        lines.append(
            _canon(
                {
                    "record": "served",
                    "challenge_id": mark.challenge_id,
                    "session_id": mark.session_id,
                    "timestamp": mark.timestamp,
                    "epoch_id": mark.epoch_id,
                }
            )
        )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".bank-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_bank(path: str, rng: Optional[random.Random] = None) -> ChallengeBank:
    """Read a bank file, verifying version, counts, and the entry digest."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise BankCorruptionError(f"{path}: empty bank file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise BankCorruptionError(f"{path}: unreadable header: {exc}") from exc
    if head.get("record") != "header":
        raise BankCorruptionError(f"{path}: first line is not a header record")
    if head.get("format_version") != FORMAT_VERSION:
        raise UnsupportedFormatError(
            f"{path}: format version {head.get('format_version')!r}, expected {FORMAT_VERSION}"
        )

    serving: list[BankRecord] = []
    audits: dict[str, AuditData] = {}
    served: list[ServedMark] = []
    h = hashlib.sha256()
    for ln in lines[1:]:
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise BankCorruptionError(f"{path}: bad record line: {exc}") from exc
        kind = obj.get("record")
        if kind == "serving":
            serving.append(_parse_serving(obj))
            h.update(ln.encode("utf-8"))
            h.update(b"\n")
        elif kind == "audit":
            audits[obj["id"]] = _parse_audit(obj)
            h.update(ln.encode("utf-8"))
            h.update(b"\n")
        elif kind == "served":
            served.append(
                ServedMark(
                    challenge_id=obj["challenge_id"],
                    session_id=obj["session_id"],
                    timestamp=obj["timestamp"],
                    epoch_id=obj["epoch_id"],
                )
            )
        else:
            raise BankCorruptionError(f"{path}: unknown record kind {kind!r}")

    if len(serving) != head.get("entry_count"):
        raise BankCorruptionError(
            f"{path}: header claims {head.get('entry_count')} entries, found {len(serving)}"
        )
    if h.hexdigest() != head.get("entries_digest"):
        raise BankCorruptionError(f"{path}: entry digest mismatch")

    records = []
    for rec in serving:
        audit = audits.pop(rec.id, None)
        records.append(
            BankRecord(
                id=rec.id,
                level_name=rec.level_name,
                preamble=rec.preamble,
                clues=rec.clues,
                commitment=rec.commitment,
                audit=audit,
            )
        )
    if audits:
        raise BankCorruptionError(f"{path}: audit records without serving entries: {sorted(audits)}")

    header = BankHeader(
        format_version=head["format_version"],
        bank_id=head["bank_id"],
        word_bank_id=head["word_bank_id"],
        domain_bank_id=head["domain_bank_id"],
        created_at=head["created_at"],
        epoch_id=head["epoch_id"],
        scale_names=tuple(head["scale"]),
        level_counts=dict(head["level_counts"]),
        entry_count=head["entry_count"],
        entries_digest=head["entries_digest"],
    )
    return ChallengeBank(header, records, served_log=served, rng=rng)


# ---------------------------------------------------------------------------
# Invariant re-check (backs the validate-bank CLI mode)
# ---------------------------------------------------------------------------

def check_bank(bank: ChallengeBank, words=None, domains=None) -> list[str]:
    """Re-check every bank invariant; returns human-readable problems."""
    from .core import validate_challenge

    problems: list[str] = []
    counts: dict[str, int] = {}
    for rec in bank.records:
        counts[rec.level_name] = counts.get(rec.level_name, 0) + 1
    if counts != bank.header.level_counts:
        problems.append(f"level counts {counts} disagree with header {bank.header.level_counts}")
    if bank.header.entry_count != len(bank.records):
        problems.append("header entry count disagrees with record count")

    seen_epoch: set[tuple[str, str]] = set()
    for mark in bank.served_log:
        key = (mark.epoch_id, mark.challenge_id)
        if key in seen_epoch:
            problems.append(f"challenge {mark.challenge_id} served twice in epoch {mark.epoch_id}")
        seen_epoch.add(key)

    salts: dict[bytes, str] = {}
    for rec in bank.records:
        owner = salts.setdefault(rec.commitment.salt, rec.id)
        if owner != rec.id:
            problems.append(f"{rec.id}: commitment salt reused from {owner}")

    scale = DifficultyScale(bank.header.scale_names)
    for rec in bank.records:
        if rec.level_name not in bank.header.scale_names:
            problems.append(f"{rec.id}: unknown level {rec.level_name!r}")
            continue
        if rec.audit is None:
            continue
        if len(rec.audit.clue_answers) != len(rec.clues):
            problems.append(f"{rec.id}: clue answer count disagrees with clue count")
            continue
        challenge = rec.to_challenge(scale)
        if words is not None and domains is not None:
            report = validate_challenge(challenge, words, domains)
            if not report.bankable:
                problems.append(f"{rec.id}: fails validation: {report}")
        else:
            if len(challenge.clues) != len(challenge.solution):
                problems.append(f"{rec.id}: clue count differs from solution length")
            if challenge.acrostic() != challenge.solution.lower():
                problems.append(f"{rec.id}: acrostic does not spell the solution")
    return problems
