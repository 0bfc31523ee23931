"""Command-line entry point.

Subcommands cover the whole pipeline: calibrate examples (gen-icl), build a
bank (gen-bank), check it (validate-bank, audit-bank), serve the gate
(serve), run measurements (harness), check tokens (verify-token), and run
the scripted demo agent against a live server (solve).

Exit codes: 0 success, 1 validation/denial, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources

from . import bank as bank_mod
from . import generation, harness, prompting
from .core import DifficultyScale, extract_answer
from .errors import ExtractionError, RgateError
from .gateway import ChatMessage, ChatRequest, default_mock_gateway, load_registry
from .generation import (
    GenBatchSpec,
    PanelSpec,
    RuleBasedChecker,
    load_domain_bank,
    load_icl_examples,
    load_word_bank,
    save_icl_examples,
)
from .protocol import GatePolicy, verify_token
from .server import DEFAULT_KEY_ENV, ServerConfig, create_app, key_from_env

DEFAULT_PANEL = PanelSpec(
    responders=("mock-solver-strong", "mock-solver-mid", "mock-solver-weak"),
    per_level_subset={
        "easy": frozenset({"mock-solver-strong", "mock-solver-mid", "mock-solver-weak"}),
        "medium": frozenset({"mock-solver-strong", "mock-solver-mid"}),
        "hard": frozenset({"mock-solver-strong"}),
    },
)


def _gateway(args):
    registry = args.registry or os.environ.get("RGATE_REGISTRY")
    if registry:
        return load_registry(registry)
    return default_mock_gateway(seed=args.seed or 0)


def _packaged(name: str) -> str:
    return str(resources.files("rgate.data").joinpath(name))


def _load_banks(args):
    words = load_word_bank(args.words or _packaged("words.txt"))
    domains = load_domain_bank(args.domains or _packaged("domains.txt"))
    return words, domains


def _policy(path: str | None) -> GatePolicy:
    if not path:
        return GatePolicy()
    with open(path, "r", encoding="utf-8") as fh:
        return GatePolicy(**json.load(fh))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_icl(args) -> int:
    gateway = _gateway(args)
    scale = DifficultyScale()
    panel = DEFAULT_PANEL
    if args.panel:
        with open(args.panel, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        panel = PanelSpec(
            responders=tuple(raw["responders"]),
            per_level_subset={k: frozenset(v) for k, v in raw["per_level_subset"].items()},
        )
    levels = [scale.resolve(n) for n in args.levels.split(",")]
    import random

    examples = generation.generate_icl_bank(
        panel,
        levels,
        args.k,
        args.generator,
        RuleBasedChecker(),
        gateway,
        rng=random.Random(args.seed or 0),
        scale=scale,
        trial_budget=args.trial_budget,
    )
    save_icl_examples(examples, args.out)
    print(f"wrote {len(examples)} calibrated examples to {args.out}")
    return 0


def cmd_gen_bank(args) -> int:
    gateway = _gateway(args)
    scale = DifficultyScale()
    words, domains = _load_banks(args)
    icl = load_icl_examples(args.icl, scale)
    mix = {}
    for part in args.mix.split(","):
        name, frac = part.split("=")
        mix[name.strip()] = float(frac)
    spec = GenBatchSpec(
        target_count=args.count,
        level_mix=mix,
        seed=args.seed or 0,
        workers=args.workers,
    )
    stats: dict = {}
    new_bank = generation.generate_bank(
        spec, icl, words, domains, args.generator, RuleBasedChecker(), gateway,
        scale=scale, stats=stats,
    )
    bank_mod.save_bank(new_bank, args.out, include_audit=not args.serving_only)
    skipped = stats.get("skipped_slots", [])
    print(f"wrote {len(new_bank)} challenges to {args.out} ({len(skipped)} slots skipped)")
    return 0


def cmd_validate_bank(args) -> int:
    try:
        loaded = bank_mod.load_bank(args.bank)
    except RgateError as exc:
        print(f"FAIL: {exc}")
        return 1
    words = domains = None
    if args.words and args.domains:
        words = load_word_bank(args.words)
        domains = load_domain_bank(args.domains)
    problems = bank_mod.check_bank(loaded, words, domains)
    if args.format == "delimited":
        for p in problems:
            print(f"problem,{p}")
    else:
        for p in problems:
            print(f"PROBLEM: {p}")
    if problems:
        print(f"FAIL: {len(problems)} problem(s) in {args.bank}")
        return 1
    print(f"OK: {len(loaded)} entries, all invariants hold")
    return 0


def cmd_audit_bank(args) -> int:
    loaded = bank_mod.load_bank(args.bank)
    words, domains = _load_banks(args)
    report = generation.audit_hallucinations(loaded, words, domains)
    if args.format == "delimited":
        print("key,value")
        print(f"words_used,{report.words_used}")
        print(f"words_hallucinated,{report.words_hallucinated}")
        print(f"domains_used,{report.domains_used}")
        print(f"domains_hallucinated,{report.domains_hallucinated}")
        print(f"rate,{report.rate!r}")
    else:
        print(
            f"words {report.words_hallucinated}/{report.words_used} hallucinated, "
            f"domains {report.domains_hallucinated}/{report.domains_used} hallucinated"
        )
        print(f"rate: {report.rate:.6f} ({report.rate * 100:.4f}%)")
        print(f"note: {report.footnote}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    loaded = bank_mod.load_bank(args.bank)
    key = key_from_env(args.key_env)
    config = ServerConfig(
        policy=_policy(args.policy),
        key_env=args.key_env,
        rate_limit_per_minute=args.rate_limit,
        resource_dir=args.resource_dir,
        static_dir=args.widget_dir,
        epoch_id=args.epoch,
    )
    app = create_app(loaded, key, config)
    host, _, port = args.listen.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def cmd_harness(args) -> int:
    gateway = _gateway(args)
    with open(args.spec, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    policy = GatePolicy(**raw.get("policy", {}))
    gen_spec = None
    if "gen" in raw:
        gen_raw = dict(raw["gen"])
        gen_spec = GenBatchSpec(
            target_count=gen_raw["target_count"],
            level_mix=gen_raw["level_mix"],
            seed=gen_raw.get("seed", raw.get("seed", 0)),
            workers=gen_raw.get("workers", 1),
        )
    spec = harness.ExperimentSpec(
        generator=raw["generator"],
        responders=tuple(raw["responders"]),
        sessions_per_cell=raw.get("sessions_per_cell", 5),
        policy=policy,
        levels=tuple(raw.get("levels", ("easy", "medium", "hard"))),
        bank_path=raw.get("bank"),
        gen=gen_spec,
        adversary_mode=raw.get("adversary_mode", "none"),
        icl_shot_count=raw.get("icl_shot_count", 0),
        unsolvable_sample=raw.get("unsolvable_sample", 0),
        seed=raw.get("seed", 0),
    )
    words = domains = None
    icl = ()
    if spec.gen is not None:
        words = load_word_bank(raw.get("words") or _packaged("words.txt"))
        domains = load_domain_bank(raw.get("domains") or _packaged("domains.txt"))
        icl = load_icl_examples(raw["icl"]) if "icl" in raw else ()
    report = harness.run_experiment(
        spec, gateway, words=words, domains=domains, icl=icl, checker=RuleBasedChecker()
    )
    fmt = "delimited-values" if args.format == "delimited" else "table-text"
    rendered = harness.render_report(report, fmt)
    if args.out and args.out != "-":
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(rendered)
    else:
        print(rendered, end="")
    return 1 if report.failed_cells else 0


def cmd_verify_token(args) -> int:
    key = key_from_env(args.key_env)
    import time

    if verify_token(args.token, key, time.time()):
        print("valid")
        return 0
    print("invalid")
    return 1


@dataclass
class _WireView:
    preamble: str
    clues: list


@dataclass
class _WireClue:
    domain_label: str
    clue_text: str


def cmd_solve(args) -> int:
    """Scripted agent: open -> challenge -> answer x t_num -> fetch resource."""
    import httpx

    gateway = _gateway(args)
    base = args.server.rstrip("/")
    with httpx.Client(base_url=base, timeout=30.0) as client:
        opened = client.post("/gate/sessions")
        if opened.status_code != 201:
            print(f"could not open session: {opened.status_code} {opened.text}")
            return 1
        descriptor = opened.json()
        session_id = descriptor["session_id"]
        t_num = descriptor["t_num"]
        print(f"session {session_id}: {t_num} challenges at level {descriptor['level']}")
        decision = None
        for i in range(t_num):
            fetched = client.get(f"/gate/sessions/{session_id}/challenge")
            if fetched.status_code != 200:
                print(f"challenge fetch failed: {fetched.status_code} {fetched.text}")
                return 1
            challenge = fetched.json()
            view = _WireView(
                preamble=challenge["preamble"],
                clues=[_WireClue(c["domain"], c["text"]) for c in challenge["clues"]],
            )
            system, user = prompting.prover_prompt(view, number=i + 1)
            completion = gateway.complete(
                ChatRequest(
                    model_id=args.responder,
                    system_prompt=system,
                    messages=(ChatMessage("user", user),),
                    purpose="response",
                )
            )
            try:
                answer = extract_answer(completion.text)
            except ExtractionError:
                answer = ""
            outcome = client.post(
                f"/gate/sessions/{session_id}/answer", json={"response": answer}
            ).json()
            print(f"  answered challenge {i + 1}/{t_num}")
            decision = outcome.get("decision")
        if not decision:
            print("session ended without a decision")
            return 1
        if not decision.get("granted"):
            print(f"access denied ({decision.get('correct_count')} correct)")
            return 1
        print(f"access granted ({decision.get('correct_count')} correct)")
        token = decision.get("token")
        fetched = client.get(
            f"/protected/{args.fetch}", headers={"Authorization": f"Bearer {token}"}
        )
        if fetched.status_code != 200:
            print(f"resource fetch failed: {fetched.status_code}")
            return 1
        print("fetched protected resource:")
        print(fetched.text)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgate", description=__doc__)
    parser.add_argument("--registry", help="backend registry JSON (env RGATE_REGISTRY)")
    parser.add_argument("--seed", type=int, default=None, help="seed for generation commands")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--format", choices=("text", "delimited"), default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-icl", help="calibrate difficulty-labeled example gates")
    p.add_argument("--levels", default="easy,medium,hard")
    p.add_argument("-k", type=int, default=3, help="examples per level")
    p.add_argument("--generator", default="mock-gen")
    p.add_argument("--panel", help="panel spec JSON")
    p.add_argument("--trial-budget", type=int, default=50_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_icl)

    p = sub.add_parser("gen-bank", help="large-scale bank generation")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--icl", required=True, help="calibrated examples (gen-icl output)")
    p.add_argument("--words", help="word bank file (default: packaged)")
    p.add_argument("--domains", help="domain bank file (default: packaged)")
    p.add_argument("--mix", default="easy=0.34,medium=0.33,hard=0.33")
    p.add_argument("--generator", default="mock-gen")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--serving-only", action="store_true", help="omit the audit section")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_bank)

    p = sub.add_parser("validate-bank", help="re-check all bank invariants")
    p.add_argument("bank")
    p.add_argument("--words")
    p.add_argument("--domains")
    p.set_defaults(func=cmd_validate_bank)

    p = sub.add_parser("audit-bank", help="hallucination audit over provenance")
    p.add_argument("bank")
    p.add_argument("--words")
    p.add_argument("--domains")
    p.set_defaults(func=cmd_audit_bank)

    p = sub.add_parser("serve", help="serve the gate over HTTP (+ MCP tools)")
    p.add_argument("--bank", required=True)
    p.add_argument("--listen", default="127.0.0.1:8301")
    p.add_argument("--policy", help="gate policy JSON")
    p.add_argument("--key-env", default=DEFAULT_KEY_ENV)
    p.add_argument("--rate-limit", type=int, default=10, help="session opens per minute per client")
    p.add_argument("--resource-dir", help="directory served under /protected")
    p.add_argument("--widget-dir", help="static widget assets, served under /widget")
    p.add_argument("--epoch", help="serving epoch id override")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("harness", help="run the measurement grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_harness)

    p = sub.add_parser("verify-token", help="check a bearer token")
    p.add_argument("--token", required=True)
    p.add_argument("--key-env", default=DEFAULT_KEY_ENV)
    p.set_defaults(func=cmd_verify_token)

    p = sub.add_parser("solve", help="scripted demo agent against a running server")
    p.add_argument("--server", default="http://127.0.0.1:8301")
    p.add_argument("--responder", default="mock-solver-strong")
    p.add_argument("--fetch", default="demo.txt")
    p.set_defaults(func=cmd_solve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO)
    try:
        return args.func(args)
    except RgateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
