"""Prompt templates and rendering for the generation and solving roles.

Templates live as text assets under ``rgate/prompts``; placeholders use
``{name}`` and are filled with plain ``str.format``-style substitution
(implemented manually so literal braces in prompt text survive).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

from .core import Challenge


class TuningCommand(enum.Enum):
    """Difficulty steering commands for the example-bank generation loop.

    The prompt strings are part of the generation contract and must not be
    reworded.
    """

    FIRST = "Generate first gate"
    INCREASE = "Generate another gate and increase difficulty"
    MAINTAIN = "Good, maintain difficulty and ambiguity generate another gate"
    REDUCE = "generate new problems with reduced difficulty"

    @property
    def prompt_text(self) -> str:
        return self.value


def load_template(name: str) -> str:
    return resources.files("rgate.prompts").joinpath(f"{name}.txt").read_text("utf-8")


def fill(template: str, **values: object) -> str:
    out = template
    for key, val in values.items():
        out = out.replace("{%s}" % key, str(val))
    return out


def render_gate(challenge: Challenge) -> str:
    """The solver-facing text of a gate: preamble plus clue bullets."""
    lines = [challenge.preamble]
    for clue in challenge.clues:
        lines.append(f"- {clue.domain_label}: {clue.clue_text}")
    return "\n".join(lines)


@dataclass(frozen=True)
class HistoryEntry:
    """One prior generation (accepted or not) and the command that drove it."""

    challenge: Challenge
    command: TuningCommand


def render_history(entries: Sequence[HistoryEntry], keep_last: int = 8) -> str:
    if not entries:
        return "None"
    blocks = []
    for entry in entries[-keep_last:]:
        blocks.append(
            "\nGate - {gate}\nSolution - {solution}\ndifficulty request - {cmd}".format(
                gate=render_gate(entry.challenge),
                solution=entry.challenge.solution,
                cmd=entry.command.prompt_text,
            )
        )
    return "\n".join(blocks)


def icl_generation_prompt(
    history: Sequence[HistoryEntry], tuning: TuningCommand, attempt: int
) -> tuple[str, str]:
    """(system, user) pair for one example-bank generation call."""
    system = load_template("icl_generator_system")
    user = fill(
        load_template("icl_generator_user"),
        history=render_history(history),
        tuning=tuning.prompt_text,
        attempt=attempt,
    )
    return system, user


def bank_generation_prompt(
    word: str,
    domains: Sequence[str],
    level_name: str,
    icl_gates: Sequence[Challenge],
    attempt: int,
) -> tuple[str, str]:
    """(system, user) pair for one large-scale generation call."""
    system = load_template("stepb_generator_system")
    examples = "\n\n".join(render_gate(c) + f"\nSolution = {c.solution}" for c in icl_gates)
    user = fill(
        load_template("stepb_generator_user"),
        icl_examples=examples or "None",
        level=level_name,
        domains=", ".join(domains),
        word=word,
        attempt=attempt,
    )
    return system, user


def prover_prompt(
    challenge: Challenge, number: int = 1, shots: Sequence[str] = ()
) -> tuple[str, str]:
    """(system, user) pair asking a responder to solve one gate.

    ``shots`` are solved example transcripts prepended for many-shot
    adversary runs; each already ends with its answer dictionary.
    """
    system = load_template("prover_system")
    shot_block = ""
    if shots:
        shot_block = "\n\n".join(shots) + "\n\n"
    user = fill(
        load_template("prover_user"),
        shots=shot_block,
        number=number,
        gate=render_gate(challenge),
    )
    return system, user


def solvability_prompt(challenge: Challenge) -> tuple[str, str]:
    """(system, user) pair for the LM-backed solvability audit."""
    system = load_template("solvability_checker_system")
    user = fill(
        load_template("solvability_checker_user"),
        gate=render_gate(challenge),
        solution=challenge.solution,
        answers=", ".join(c.clue_answer for c in challenge.clues),
    )
    return system, user


def solved_transcript(challenge: Challenge, number: int = 1) -> str:
    """A worked example block used as a many-shot ICL shot."""
    lines = [f"Gate {number} =", render_gate(challenge), ""]
    for clue in challenge.clues:
        lines.append(
            f"{clue.index + 1}. {clue.domain_label}: {clue.clue_answer} "
            f"-> {clue.clue_answer[0].upper()}"
        )
    lines.append("")
    lines.append('The solution: {"Gate %d": "%s"}' % (number, challenge.solution))
    return "\n".join(lines)
