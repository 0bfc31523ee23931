"""Reasoning-gate throttling framework.

Offline: generate and difficulty-calibrate rebus challenges, bank them with
salted solution commitments. Online: issue challenges per session, verify
responses in constant time, and mint bearer tokens on success. A metrics
harness measures accuracy by difficulty and generation/solve token
asymmetry from the call ledger.
"""

from .core import (
    Challenge,
    Clue,
    DifficultyLevel,
    DifficultyScale,
    Provenance,
    SolutionCommitment,
    ValidationReport,
    commit_solution,
    extract_answer,
    normalize_answer,
    validate_challenge,
    verify_response,
)
from .bank import ChallengeBank, ChallengeView, build_bank, load_bank, save_bank
from .gateway import (
    ChatMessage,
    ChatRequest,
    Completion,
    LmGateway,
    MockBackendConfig,
    MockLmBackend,
    UsageRecord,
    build_gateway,
    default_mock_gateway,
    mock_generate_challenge,
)
from .generation import (
    DomainBank,
    GenBatchSpec,
    IclExample,
    PanelSpec,
    RuleBasedChecker,
    WordBank,
    audit_hallucinations,
    generate_bank,
    generate_icl_bank,
    measure_unsolvable_rate,
)
from .harness import ExperimentSpec, MetricsReport, asymmetry_ratio, render_report, run_experiment
from .protocol import (
    AccessDecision,
    Gate,
    GatePolicy,
    GateSession,
    TokenSigner,
    verify_token,
)
from .prompting import TuningCommand
from .server import create_app

__version__ = "0.1.0"
