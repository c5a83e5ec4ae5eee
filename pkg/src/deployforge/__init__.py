"""deployforge: an autonomous, self-debugging deployment agent.

Guideline-driven execution, a self-adaptive debug loop backed by a
persistent knowledge repository, and packaging of successful deployments
into re-invokable agent manifests.
"""

from .debugger import (
    CandidateFix,
    ErrorFingerprint,
    FailureDiagnosis,
    FixAttemptRecord,
    RetryBudget,
    diagnose,
    fingerprint,
    run_debug_loop,
    search_solutions,
)
from .errors import DeployForgeError
from .guideline import (
    CheckSpec,
    GuidelineDocument,
    Requirement,
    Step,
    parse_guideline,
    render_step,
    serialize_guideline,
)
from .knowledge import (
    CaseRecord,
    EmbeddingVector,
    KnowledgeRepository,
    cosine_similarity,
    embed_text,
    open_repository,
)
from .llm import LlmGateway, ModelResponse, PromptEnvelope, ToolSchema
from .packager import AgentManifest, load_manifest, package_agent, replay_manifest
from .runner import (
    ApprovalBroker,
    ApprovalRequest,
    RunTranscript,
    check_status,
    resume_run,
    run_deployment,
    transcript_from_events,
)
from .sandbox import (
    EnvironmentSnapshot,
    ExecutionEnvironment,
    ExecutionResult,
    create_sandbox,
    execute_step,
    probe_environment,
    snapshot_diff,
)
from .scenario import Scenario, load_scenario, materialize, seed_repository

__version__ = "0.1.0"

__all__ = [
    "AgentManifest",
    "ApprovalBroker",
    "ApprovalRequest",
    "CandidateFix",
    "CaseRecord",
    "CheckSpec",
    "DeployForgeError",
    "EmbeddingVector",
    "EnvironmentSnapshot",
    "ErrorFingerprint",
    "ExecutionEnvironment",
    "ExecutionResult",
    "FailureDiagnosis",
    "FixAttemptRecord",
    "GuidelineDocument",
    "KnowledgeRepository",
    "LlmGateway",
    "ModelResponse",
    "PromptEnvelope",
    "Requirement",
    "RetryBudget",
    "RunTranscript",
    "Scenario",
    "Step",
    "ToolSchema",
    "check_status",
    "cosine_similarity",
    "create_sandbox",
    "diagnose",
    "embed_text",
    "execute_step",
    "fingerprint",
    "load_manifest",
    "load_scenario",
    "materialize",
    "open_repository",
    "package_agent",
    "parse_guideline",
    "probe_environment",
    "render_step",
    "replay_manifest",
    "resume_run",
    "run_debug_loop",
    "run_deployment",
    "search_solutions",
    "seed_repository",
    "serialize_guideline",
    "snapshot_diff",
    "transcript_from_events",
]
