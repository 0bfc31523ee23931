"""Measurement harness: accuracy by difficulty, token asymmetry, audits.

Every token figure in a report is summed from the gateway's usage ledger;
nothing is hand-entered. Under mock backends and a fixed seed the whole
run, and therefore the rendered report, is deterministic.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from math import sqrt
from typing import Optional, Sequence

from . import prompting
from .bank import ChallengeBank
from .core import DifficultyScale, extract_answer, normalize_answer
from .errors import (
    ConfigurationError,
    ExtractionError,
    InvalidInputError,
    RgateError,
    UndefinedRatioError,
)
from .gateway import ChatMessage, ChatRequest, LmGateway
from .generation import (
    GenBatchSpec,
    HallucinationReport,
    IclExample,
    audit_hallucinations,
    generate_bank,
    measure_unsolvable_rate,
)
from .protocol import Gate, GatePolicy, TokenSigner

log = logging.getLogger(__name__)

ADVERSARY_MODES = ("none", "many_shot_icl")

_HARNESS_KEY = b"harness-internal-key-not-for-deployment!"


def asymmetry_ratio(gen_tokens: int, solve_tokens: int) -> float:
    """Solver-to-generator output-token ratio, reported to 2 decimals."""
    if gen_tokens <= 0:
        raise UndefinedRatioError("generation token count must be positive")
    return round(solve_tokens / gen_tokens, 2)


@dataclass(frozen=True)
class ExperimentSpec:
    generator: str
    responders: tuple[str, ...]
    sessions_per_cell: int
    policy: GatePolicy = field(default_factory=GatePolicy)
    levels: tuple[str, ...] = ("easy", "medium", "hard")
    bank_path: Optional[str] = None
    gen: Optional[GenBatchSpec] = None
    adversary_mode: str = "none"
    icl_shot_count: int = 0
    unsolvable_sample: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.sessions_per_cell < 1:
            raise InvalidInputError("sessions per cell must be at least 1")
        if self.icl_shot_count < 0:
            raise InvalidInputError("shot count must be non-negative")
        if self.adversary_mode not in ADVERSARY_MODES:
            raise InvalidInputError(f"unknown adversary mode {self.adversary_mode!r}")
        if not self.responders:
            raise InvalidInputError("need at least one responder")


@dataclass(frozen=True)
class MetricsReport:
    levels: tuple[str, ...]
    responders: tuple[str, ...]
    accuracy: dict[str, dict[str, float]]  # responder -> level -> fraction
    half_width: dict[str, dict[str, float]]  # 95% normal-approximation half-widths
    challenges_per_cell: int
    sessions_per_cell: int
    mean_gen_tokens_per_challenge: float
    mean_solve_tokens_per_session: dict[str, float]
    asymmetry: dict[str, float]  # responder -> solve/gen ratio per session
    unsolvable_per_100: Optional[float] = None
    hallucination: Optional[HallucinationReport] = None
    failed_cells: tuple[str, ...] = ()


def _half_width(p: float, n: int) -> float:
    if n <= 0:
        return 0.0
    return round(1.96 * sqrt(p * (1.0 - p) / n), 4)


def run_experiment(
    spec: ExperimentSpec,
    gateway: LmGateway,
    words=None,
    domains=None,
    icl: Sequence[IclExample] = (),
    bank: Optional[ChallengeBank] = None,
    checker=None,
    scale: Optional[DifficultyScale] = None,
) -> MetricsReport:
    """Run the (responder x level) grid and assemble a report from the ledger."""
    scale = scale or DifficultyScale()
    gen_tokens_total = 0
    gen_challenge_count = 0

    if bank is None and spec.bank_path is not None:
        from .bank import load_bank

        bank = load_bank(spec.bank_path)
    if bank is None:
        if spec.gen is None or words is None or domains is None or checker is None:
            raise ConfigurationError("need either a bank or a generation spec with banks")
        before = gateway.ledger_size()
        bank = generate_bank(
            spec.gen, icl, words, domains, spec.generator, checker, gateway, scale=scale
        )
        new_records = gateway.usage_ledger()[before:]
        gen_tokens_total = sum(
            r.output_tokens for r in new_records if r.purpose == "generation"
        )
        gen_challenge_count = len(bank)
    else:
        gen_records = gateway.usage_ledger(purpose="generation", model_id=spec.generator)
        gen_tokens_total = sum(r.output_tokens for r in gen_records)
        gen_challenge_count = len(bank) if gen_records else 0

    mean_gen = (
        gen_tokens_total / gen_challenge_count if gen_challenge_count else 0.0
    )

    t_num = spec.policy.t_num
    challenges_per_cell = spec.sessions_per_cell * t_num
    for level in spec.levels:
        have = sum(1 for r in bank.records if r.level_name == level)
        if have < challenges_per_cell:
            raise ConfigurationError(
                f"bank has {have} challenges at {level!r}, cell needs {challenges_per_cell}"
            )

    shots: list[str] = []
    if spec.adversary_mode == "many_shot_icl" and spec.icl_shot_count > 0:
        shots = _shot_transcripts(bank, scale, spec.icl_shot_count)

    signer = TokenSigner(_HARNESS_KEY)
    accuracy: dict[str, dict[str, float]] = {r: {} for r in spec.responders}
    half_width: dict[str, dict[str, float]] = {r: {} for r in spec.responders}
    solve_tokens: dict[str, float] = {}
    failed: list[str] = []

    for responder in spec.responders:
        responder_records = 0
        responder_solve_total = 0
        cells_done = 0
        for level in spec.levels:
            cell = f"{responder}/{level}"
            bank.reset_serving(f"cell-{cell}")
            policy = replace(spec.policy, level=level)
            gate = Gate(bank, signer)
            before = gateway.ledger_size()
            try:
                correct, sent = _run_cell(
                    gate, policy, gateway, responder, spec.sessions_per_cell, shots
                )
            except RgateError as exc:
                log.warning("cell %s failed: %s", cell, exc)
                failed.append(cell)
                continue
            records = gateway.usage_ledger()[before:]
            cell_tokens = sum(
                r.output_tokens
                for r in records
                if r.purpose == "response" and r.model_id == responder
            )
            responder_solve_total += cell_tokens
            responder_records += 1
            cells_done += 1
            p = correct / sent if sent else 0.0
            accuracy[responder][level] = round(p, 4)
            half_width[responder][level] = _half_width(p, sent)
        if cells_done:
            solve_tokens[responder] = round(
                responder_solve_total / (cells_done * spec.sessions_per_cell), 2
            )

    asymmetry: dict[str, float] = {}
    if mean_gen > 0:
        gen_per_session = mean_gen * t_num
        for responder, per_session in solve_tokens.items():
            asymmetry[responder] = asymmetry_ratio(int(gen_per_session), int(per_session))

    unsolvable = None
    if spec.unsolvable_sample > 0 and words is not None and domains is not None and checker is not None:
        unsolvable = measure_unsolvable_rate(
            spec.generator,
            checker,
            gateway,
            spec.unsolvable_sample,
            words,
            domains,
            icl=icl,
            scale=scale,
            seed=spec.seed,
        )

    hallucination = None
    if words is not None and domains is not None:
        hallucination = audit_hallucinations(bank, words, domains)

    return MetricsReport(
        levels=tuple(spec.levels),
        responders=tuple(spec.responders),
        accuracy=accuracy,
        half_width=half_width,
        challenges_per_cell=challenges_per_cell,
        sessions_per_cell=spec.sessions_per_cell,
        mean_gen_tokens_per_challenge=round(mean_gen, 2),
        mean_solve_tokens_per_session=solve_tokens,
        asymmetry=asymmetry,
        unsolvable_per_100=unsolvable,
        hallucination=hallucination,
        failed_cells=tuple(failed),
    )


def _shot_transcripts(bank: ChallengeBank, scale: DifficultyScale, count: int) -> list[str]:
    shots = []
    for rec in bank.records:
        if rec.audit is None:
            continue
        shots.append(prompting.solved_transcript(rec.to_challenge(scale), number=len(shots) + 1))
        if len(shots) >= count:
            break
    return shots


def _run_cell(
    gate: Gate,
    policy: GatePolicy,
    gateway: LmGateway,
    responder: str,
    sessions: int,
    shots: Sequence[str],
) -> tuple[int, int]:
    correct = 0
    sent = 0
    for _ in range(sessions):
        session = gate.open_session(policy)
        for _ in range(policy.t_num):
            view = gate.next_challenge(session)
            # ChallengeView quacks like a Challenge for prompt rendering.
            system, user = prompting.prover_prompt(view, shots=shots)
            completion = gateway.complete(
                ChatRequest(
                    model_id=responder,
                    system_prompt=system,
                    messages=(ChatMessage("user", user),),
                    purpose="response",
                )
            )
            try:
                answer = extract_answer(completion.text)
            except ExtractionError:
                answer = ""
            gate.submit_answer(session, answer)
        correct += session.correct_count
        sent += session.sent_count
    return correct, sent


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_report(report: MetricsReport, fmt: str = "table-text") -> str:
    if fmt == "table-text":
        return _render_table(report)
    if fmt == "delimited-values":
        return _render_delimited(report)
    raise InvalidInputError(f"unknown report format {fmt!r}")


def _render_table(report: MetricsReport) -> str:
    out = io.StringIO()
    width = max([len(r) for r in report.responders] + [9])
    header = "responder".ljust(width) + "".join(f"  {lvl:>10}" for lvl in report.levels)
    out.write("Accuracy by difficulty (fraction correct)\n")
    out.write(header + "\n")
    for responder in report.responders:
        row = responder.ljust(width)
        for level in report.levels:
            acc = report.accuracy.get(responder, {}).get(level)
            row += f"  {acc:>10.3f}" if acc is not None else f"  {'-':>10}"
        out.write(row + "\n")
    out.write("\n")
    out.write(
        f"challenges per cell: {report.challenges_per_cell} "
        f"({report.sessions_per_cell} sessions)\n"
    )
    out.write(f"mean generation tokens per challenge: {report.mean_gen_tokens_per_challenge}\n")
    for responder in report.responders:
        if responder in report.mean_solve_tokens_per_session:
            line = (
                f"mean solve tokens per session [{responder}]: "
                f"{report.mean_solve_tokens_per_session[responder]}"
            )
            if responder in report.asymmetry:
                line += f"  (asymmetry {report.asymmetry[responder]:.2f}x)"
            out.write(line + "\n")
    if report.unsolvable_per_100 is not None:
        out.write(f"unsolvable per 100 generated: {report.unsolvable_per_100}\n")
    if report.hallucination is not None:
        h = report.hallucination
        out.write(
            f"hallucinations: words {h.words_hallucinated}/{h.words_used}, "
            f"domains {h.domains_hallucinated}/{h.domains_used}, "
            f"rate {h.rate:.6f}\n"
        )
        out.write(f"note: {h.footnote}\n")
    if report.failed_cells:
        out.write("failed cells: " + ", ".join(report.failed_cells) + "\n")
    return out.getvalue()


def _render_delimited(report: MetricsReport) -> str:
    """Flat comma-separated rows; parse_delimited_report inverts this."""
    rows: list[tuple[str, str, str, str]] = []
    rows.append(("meta", "levels", "", "|".join(report.levels)))
    rows.append(("meta", "responders", "", "|".join(report.responders)))
    rows.append(("meta", "challenges_per_cell", "", repr(report.challenges_per_cell)))
    rows.append(("meta", "sessions_per_cell", "", repr(report.sessions_per_cell)))
    rows.append(("tokens", "gen_per_challenge", "", repr(report.mean_gen_tokens_per_challenge)))
    for responder in report.responders:
        for level in report.levels:
            if level in report.accuracy.get(responder, {}):
                rows.append(("accuracy", responder, level, repr(report.accuracy[responder][level])))
                rows.append(("half_width", responder, level, repr(report.half_width[responder][level])))
        if responder in report.mean_solve_tokens_per_session:
            rows.append(
                ("tokens", "solve_per_session", responder, repr(report.mean_solve_tokens_per_session[responder]))
            )
        if responder in report.asymmetry:
            rows.append(("tokens", "asymmetry", responder, repr(report.asymmetry[responder])))
    if report.unsolvable_per_100 is not None:
        rows.append(("audit", "unsolvable_per_100", "", repr(report.unsolvable_per_100)))
    if report.hallucination is not None:
        h = report.hallucination
        rows.append(("audit", "words_used", "", repr(h.words_used)))
        rows.append(("audit", "words_hallucinated", "", repr(h.words_hallucinated)))
        rows.append(("audit", "domains_used", "", repr(h.domains_used)))
        rows.append(("audit", "domains_hallucinated", "", repr(h.domains_hallucinated)))
    for cell in report.failed_cells:
        rows.append(("meta", "failed_cell", "", cell))
    return "section,key,subkey,value\n" + "\n".join(",".join(r) for r in rows) + "\n"


def parse_delimited_report(text: str) -> MetricsReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "section,key,subkey,value":
        raise InvalidInputError("not a delimited report")
    levels: tuple[str, ...] = ()
    responders: tuple[str, ...] = ()
    accuracy: dict[str, dict[str, float]] = {}
    half_width: dict[str, dict[str, float]] = {}
    solve: dict[str, float] = {}
    asym: dict[str, float] = {}
    challenges_per_cell = 0
    sessions_per_cell = 0
    gen_per_challenge = 0.0
    unsolvable = None
    failed: list[str] = []
    halluc_counts: dict[str, int] = {}
    for ln in lines[1:]:
        section, key, subkey, value = ln.split(",", 3)
        if (section, key) == ("meta", "levels"):
            levels = tuple(v for v in value.split("|") if v)
        elif (section, key) == ("meta", "responders"):
            responders = tuple(v for v in value.split("|") if v)
        elif (section, key) == ("meta", "challenges_per_cell"):
            challenges_per_cell = int(value)
        elif (section, key) == ("meta", "sessions_per_cell"):
            sessions_per_cell = int(value)
        elif (section, key) == ("meta", "failed_cell"):
            failed.append(value)
        elif (section, key) == ("tokens", "gen_per_challenge"):
            gen_per_challenge = float(value)
        elif (section, key) == ("tokens", "solve_per_session"):
            solve[subkey] = float(value)
        elif (section, key) == ("tokens", "asymmetry"):
            asym[subkey] = float(value)
        elif section == "accuracy":
            accuracy.setdefault(key, {})[subkey] = float(value)
        elif section == "half_width":
            half_width.setdefault(key, {})[subkey] = float(value)
        elif (section, key) == ("audit", "unsolvable_per_100"):
            unsolvable = float(value)
        elif section == "audit":
            halluc_counts[key] = int(value)
    hallucination = None
    if halluc_counts:
        hallucination = HallucinationReport(
            words_used=halluc_counts.get("words_used", 0),
            words_hallucinated=halluc_counts.get("words_hallucinated", 0),
            domains_used=halluc_counts.get("domains_used", 0),
            domains_hallucinated=halluc_counts.get("domains_hallucinated", 0),
        )
    for responder in responders:
        accuracy.setdefault(responder, {})
        half_width.setdefault(responder, {})
    return MetricsReport(
        levels=levels,
        responders=responders,
        accuracy=accuracy,
        half_width=half_width,
        challenges_per_cell=challenges_per_cell,
        sessions_per_cell=sessions_per_cell,
        mean_gen_tokens_per_challenge=gen_per_challenge,
        mean_solve_tokens_per_session=solve,
        asymmetry=asym,
        unsolvable_per_100=unsolvable,
        hallucination=hallucination,
        failed_cells=tuple(failed),
    )
