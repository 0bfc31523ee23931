from __future__ import annotations

import pytest

from rgate import prompting
from rgate.core import DifficultyScale, extract_answer, normalize_answer
from rgate.errors import (
    BudgetExceededError,
    InvalidInputError,
    TransportError,
    UnknownModelError,
)
from rgate.gateway import (
    ChatMessage,
    ChatRequest,
    LmGateway,
    MockBackendConfig,
    MockLmBackend,
    ScriptedBackend,
    build_gateway,
    mock_generate_challenge,
)

from conftest import SCALE, make_challenge


def request_for(challenge, model_id, shots=(), purpose="response"):
    system, user = prompting.prover_prompt(challenge, shots=shots)
    return ChatRequest(
        model_id=model_id,
        system_prompt=system,
        messages=(ChatMessage("user", user),),
        purpose=purpose,
    )


class TestMockGenerateChallenge:
    def test_acrostic_by_construction(self):
        ch = make_challenge("isles", "easy", seed=1)
        assert len(ch.clues) == 5
        assert ch.acrostic() == "isles"

    def test_deterministic(self):
        a = make_challenge("isles", "easy", seed=1)
        b = make_challenge("isles", "easy", seed=1)
        assert a == b

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            mock_generate_challenge("ab", ["D1", "D2", "D3"], SCALE.resolve("easy"), seed=0)


class TestMockResponder:
    def gw(self, skill, **kwargs):
        gateway = LmGateway()
        gateway.register(
            "m", MockLmBackend(MockBackendConfig(seed=5, skill=skill, **kwargs))
        )
        return gateway

    def test_determinism(self):
        gateway = self.gw(0.9)
        ch = make_challenge("isles", "easy", seed=7)
        first = gateway.complete(request_for(ch, "m"))
        second = gateway.complete(request_for(ch, "m"))
        assert first.text == second.text
        assert first.usage.output_tokens == second.usage.output_tokens

    def test_high_skill_solves_easy(self):
        gateway = self.gw(0.9, difficulty_thresholds={"easy": 0.3, "medium": 0.5, "hard": 0.8})
        ch = make_challenge("isles", "easy", seed=7)
        completion = gateway.complete(request_for(ch, "m"))
        assert normalize_answer(extract_answer(completion.text)) == "isles"

    def test_low_skill_fails_hard(self):
        gateway = self.gw(0.2, difficulty_thresholds={"easy": 0.3, "medium": 0.5, "hard": 0.8})
        ch = make_challenge("thunderstorm", "hard", seed=7)
        completion = gateway.complete(request_for(ch, "m"))
        assert normalize_answer(extract_answer(completion.text)) != "thunderstorm"

    def test_correctness_is_exactly_threshold_rule(self):
        # Sweep skill against every level: correct iff skill >= threshold.
        thresholds = {"easy": 0.15, "medium": 0.5, "hard": 0.85}
        for level_name in ("easy", "medium", "hard"):
            word = {"easy": "isles", "medium": "alchemist", "hard": "thunderstorm"}[level_name]
            ch = make_challenge(word, level_name, seed=3)
            for skill in (0.0, 0.14, 0.15, 0.4, 0.5, 0.84, 0.85, 1.0):
                gateway = self.gw(skill, difficulty_thresholds=thresholds)
                completion = gateway.complete(request_for(ch, "m"))
                got = normalize_answer(extract_answer(completion.text))
                assert (got == word) == (skill >= thresholds[level_name])

    def test_many_shot_bonus(self):
        gateway = self.gw(0.45, icl_skill_bonus_per_10_shots=0.05)
        ch = make_challenge("alchemist", "medium", seed=7)
        baseline = gateway.complete(request_for(ch, "m"))
        assert normalize_answer(extract_answer(baseline.text)) != "alchemist"
        shots = [prompting.solved_transcript(make_challenge("amber", "easy", seed=i), i + 1) for i in range(10)]
        boosted = gateway.complete(request_for(ch, "m", shots=shots))
        assert normalize_answer(extract_answer(boosted.text)) == "alchemist"

    def test_synthetic_token_model(self):
        gateway = self.gw(0.9, base_output_tokens={"easy": 100, "medium": 200, "hard": 300},
                          per_clue_output_tokens=40)
        ch = make_challenge("isles", "easy", seed=7)
        completion = gateway.complete(request_for(ch, "m"))
        assert completion.usage.output_tokens == 100 + 40 * 5

    def test_reasoning_budget_knob(self):
        gateway = self.gw(0.9)
        ch = make_challenge("isles", "easy", seed=7)
        system, user = prompting.prover_prompt(ch)
        completion = gateway.complete(
            ChatRequest(
                model_id="m",
                system_prompt=system,
                messages=(ChatMessage("user", user),),
                reasoning_budget=500,
                purpose="response",
            )
        )
        assert 0 < completion.usage.reasoning_tokens <= 500

    def test_thresholds_must_be_monotone(self):
        with pytest.raises(InvalidInputError):
            MockBackendConfig(difficulty_thresholds={"easy": 0.8, "medium": 0.5, "hard": 0.9})


class TestLedger:
    def test_generation_calls_counted(self, gateway):
        ch = make_challenge("isles", "easy", seed=1)
        for i in range(3):
            system, user = prompting.bank_generation_prompt("isles", ["D"] * 5, "easy", [ch], i)
            gateway.complete(
                ChatRequest(
                    model_id="mock-gen",
                    system_prompt=system,
                    messages=(ChatMessage("user", user),),
                    purpose="generation",
                )
            )
        assert len(gateway.usage_ledger(purpose="generation")) == 3

    def test_empty_ledger(self, gateway):
        assert gateway.usage_ledger() == []

    def test_purpose_filter_on_mixed_calls(self, gateway):
        ch = make_challenge("isles", "easy", seed=1)
        purposes = ["generation", "response", "response", "solvability", "response"]
        for purpose in purposes:
            if purpose == "generation":
                system, user = prompting.bank_generation_prompt("isles", ["D"] * 5, "easy", [], 1)
                model = "mock-gen"
            elif purpose == "solvability":
                system, user = prompting.solvability_prompt(ch)
                model = "mock-solver-strong"
            else:
                system, user = prompting.prover_prompt(ch)
                model = "mock-solver-strong"
            gateway.complete(
                ChatRequest(
                    model_id=model,
                    system_prompt=system,
                    messages=(ChatMessage("user", user),),
                    purpose=purpose,
                )
            )
        response_records = gateway.usage_ledger(purpose="response")
        assert len(response_records) == 3
        assert all(r.purpose == "response" for r in response_records)
        assert len(gateway.usage_ledger()) == 5

    def test_ledger_conservation(self, gateway):
        ch = make_challenge("isles", "easy", seed=1)
        for _ in range(4):
            gateway.complete(request_for(ch, "mock-solver-strong"))
        records = gateway.usage_ledger(purpose="response")
        assert sum(r.output_tokens for r in records) == 4 * records[0].output_tokens


class TestGatewayPlumbing:
    def test_unknown_model(self, gateway):
        ch = make_challenge("isles", "easy", seed=1)
        with pytest.raises(UnknownModelError):
            gateway.complete(request_for(ch, "no-such-model"))

    def test_retry_then_success(self):
        gateway = LmGateway(retries=3, backoff_s=0.0)
        gateway.register(
            "flaky",
            ScriptedBackend([TransportError("boom"), TransportError("boom"), "recovered"]),
        )
        completion = gateway.complete(
            ChatRequest(
                model_id="flaky",
                system_prompt="s",
                messages=(ChatMessage("user", "u"),),
                purpose="generation",
            )
        )
        assert completion.text == "recovered"

    def test_retries_exhausted(self):
        gateway = LmGateway(retries=2, backoff_s=0.0)
        gateway.register("dead", ScriptedBackend([TransportError("boom")] * 10))
        with pytest.raises(TransportError):
            gateway.complete(
                ChatRequest(
                    model_id="dead",
                    system_prompt="s",
                    messages=(ChatMessage("user", "u"),),
                    purpose="generation",
                )
            )

    def test_budget_error(self):
        gateway = LmGateway()
        gateway.register("cheap", ScriptedBackend(["a", "b"], output_tokens=100), budget=150)
        req = ChatRequest(
            model_id="cheap",
            system_prompt="s",
            messages=(ChatMessage("user", "u"),),
            purpose="generation",
        )
        gateway.complete(req)
        gateway.complete(req)
        with pytest.raises(BudgetExceededError):
            gateway.complete(req)

    def test_registry_builder(self):
        gateway = build_gateway(
            {
                "models": {
                    "gen": {"kind": "mock", "seed": 1},
                    "solver": {"kind": "mock", "seed": 2, "skill": 0.9, "budget": None},
                }
            }
        )
        assert set(gateway.models()) == {"gen", "solver"}

    def test_responder_requires_messages(self):
        with pytest.raises(InvalidInputError):
            ChatRequest(model_id="m", system_prompt="s", messages=(), purpose="response")


class TestMockSolvability:
    def test_consistent_verdicts(self, gateway):
        from rgate.generation import LmChecker

        checker = LmChecker(gateway, "mock-solver-strong")
        good = make_challenge("isles", "easy", seed=1)
        assert checker.check(good)
        bad = good.with_clue_answer(0, "zebra")
        assert not checker.check(bad)
        assert gateway.usage_ledger(purpose="solvability")
