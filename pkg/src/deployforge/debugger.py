"""Self-adaptive debug loop: diagnose, fingerprint, search, fix, retry.

The search cascade prefers the knowledge repository over the model and the
model over online search, so a failure the system has seen before costs no
tokens at all. Every applied fix, successful or not, is merged back into
the repository.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import LlmUnavailable, MalformedToolCall
from .guideline import Step, is_destructive, step_from_dict, step_to_dict
from .llm import LlmGateway, ModelResponse, PromptEnvelope, ToolSchema
from .sandbox import EnvironmentSnapshot, ExecutionResult

ERROR_CLASSES = (
    "missing_dependency",
    "version_conflict",
    "missing_file",
    "permission_denied",
    "network_failure",
    "resource_exhaustion",
    "timeout",
    "unknown",
)

SEMANTIC_THRESHOLD = 0.35
MAX_EVIDENCE_LINES = 20
MAX_SUMMARY_CHARS = 500

_RULES_PATH = Path(__file__).parent / "config" / "error_rules.yaml"
_PROMPTS_DIR = Path(__file__).parent / "prompts"


# --- fingerprinting ----------------------------------------------------------

# Normalization pipeline, applied in this exact order. Quoted identifiers
# survive: nothing here strips quotes or their contents unless the content
# itself is a timestamp, hex run, absolute path, or long number.
_TS_PATTERNS = [
    re.compile(r"\d{4}-\d{2}-\d{2}[T ]\d{1,2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2})?"),
    re.compile(r"\b(?:Mon|Tue|Wed|Thu|Fri|Sat|Sun)?\s*(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec)\s+\d{1,2}\s+\d{1,2}:\d{2}:\d{2}\b"),
    re.compile(r"\d{4}-\d{2}-\d{2}"),
    re.compile(r"\d{1,2}/\d{1,2}/\d{4}"),
    re.compile(r"\b\d{1,2}:\d{2}:\d{2}(?:\.\d+)?\b"),
]
_HEX_RE = re.compile(r"\b0[xX][0-9a-fA-F]+\b")
_PATH_RE = re.compile(r"(?:/[A-Za-z0-9._+~\-]+)+")
_NUM_RE = re.compile(r"\d{4,}")
_WS_RE = re.compile(r"\s+")


def normalize_error_text(text: str) -> str:
    s = text
    for pattern in _TS_PATTERNS:
        s = pattern.sub("<TS>", s)
    s = _HEX_RE.sub("<HEX>", s)
    s = _PATH_RE.sub(lambda m: "<PATH>/" + m.group(0).rsplit("/", 1)[1], s)
    s = _NUM_RE.sub("<NUM>", s)
    s = _WS_RE.sub(" ", s).strip()
    return s.lower()


@dataclass(frozen=True)
class ErrorFingerprint:
    digest: str
    normalized_text: str


def fingerprint(raw_error_text: str) -> ErrorFingerprint:
    """Normalize volatile tokens out of the text, then hash what remains."""
    normalized = normalize_error_text(raw_error_text)
    digest = hashlib.blake2s(normalized.encode("utf-8"), digest_size=16).hexdigest()
    return ErrorFingerprint(digest=digest, normalized_text=normalized)


# --- classification ----------------------------------------------------------

class RuleTable:
    """Ordered regex table mapping output lines to error classes."""

    def __init__(self, rules: list[tuple[str, list[re.Pattern]]]):
        self.rules = rules

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RuleTable":
        data = yaml.safe_load(Path(path or _RULES_PATH).read_text(encoding="utf-8"))
        rules = []
        for entry in data["rules"]:
            patterns = [re.compile(p, re.IGNORECASE) for p in entry["patterns"]]
            rules.append((entry["class"], patterns))
        return cls(rules)

    def classify(self, stderr: str, stdout: str) -> tuple[str | None, str | None]:
        """First rule (in table order) matching stderr then stdout wins."""
        streams = [stderr, stdout]
        for error_class, patterns in self.rules:
            for stream in streams:
                for line in stream.splitlines():
                    if any(p.search(line) for p in patterns):
                        return error_class, line
        return None, None


_default_rules: RuleTable | None = None


def default_rule_table() -> RuleTable:
    global _default_rules
    if _default_rules is None:
        _default_rules = RuleTable.load()
    return _default_rules


def _last_non_empty_line(text: str) -> str | None:
    for line in reversed(text.splitlines()):
        if line.strip():
            return line
    return None


def analyze_failure(
    status: str, stderr: str, stdout: str, rules: RuleTable | None = None
) -> tuple[str, str]:
    """Shared classification core: (error_class, fingerprint basis text).

    The basis is the matched rule line when one exists, else the last
    non-empty output line, else a synthetic status marker. Scenario tooling
    uses the same function so oracle digests line up with live diagnoses.
    """
    rules = rules or default_rule_table()
    if status == "timeout":
        error_class, matched = "timeout", None
    else:
        error_class, matched = rules.classify(stderr, stdout)
        error_class = error_class or "unknown"
    basis = (
        matched
        or _last_non_empty_line(stderr)
        or _last_non_empty_line(stdout)
        or f"status {status}"
    )
    return error_class, basis


@dataclass(frozen=True)
class FailureDiagnosis:
    step_id: str
    error_class: str
    fingerprint: ErrorFingerprint
    evidence_lines: tuple[str, ...]
    env_context: EnvironmentSnapshot
    summary: str


def diagnose(
    result: ExecutionResult,
    before: EnvironmentSnapshot,
    rules: RuleTable | None = None,
) -> FailureDiagnosis:
    """Classify a failed ExecutionResult and fingerprint its identity."""
    if result.status not in ("failure", "timeout"):
        raise ValueError(f"diagnose needs a failed result, got status {result.status!r}")
    error_class, basis = analyze_failure(result.status, result.stderr, result.stdout, rules)

    evidence: list[str] = []
    if basis and (basis in result.stderr or basis in result.stdout):
        evidence.append(basis)
    for stream in (result.stderr, result.stdout):
        for line in stream.splitlines()[-10:]:
            if line.strip() and line not in evidence:
                evidence.append(line)
    evidence = evidence[:MAX_EVIDENCE_LINES]

    summary = f"{error_class}: {basis}"
    if result.failed_check:
        summary += f" [check: {result.failed_check}]"
    return FailureDiagnosis(
        step_id=result.step_id,
        error_class=error_class,
        fingerprint=fingerprint(basis),
        evidence_lines=tuple(evidence),
        env_context=before,
        summary=summary[:MAX_SUMMARY_CHARS],
    )


def diagnosis_query_text(diag: FailureDiagnosis) -> str:
    """Embedding/query text for a diagnosis: summary + normalized text + class."""
    return f"{diag.summary} {diag.fingerprint.normalized_text} {diag.error_class}"


# --- candidate fixes ----------------------------------------------------------

@dataclass(frozen=True)
class CandidateFix:
    fix_id: str
    origin: str  # repo_exact | repo_semantic | llm_generated | online_search
    remedial_steps: tuple[Step, ...]
    rationale: str
    risk: str  # low | high
    source_case: str | None = None


def fix_hash(remedial_steps: tuple[Step, ...] | list[Step]) -> str:
    """Content hash over the canonical remedial steps, ids excluded."""
    canonical = []
    for step in remedial_steps:
        d = step_to_dict(step)
        d.pop("id", None)
        canonical.append(d)
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2s(blob.encode("utf-8"), digest_size=16).hexdigest()


def fix_risk(remedial_steps) -> str:
    return "high" if any(is_destructive(s.run) for s in remedial_steps) else "low"


def make_fix(
    remedial_steps: list[Step],
    origin: str,
    rationale: str,
    source_case: str | None = None,
) -> CandidateFix:
    steps = tuple(remedial_steps)
    return CandidateFix(
        fix_id="fix-" + fix_hash(steps)[:12],
        origin=origin,
        remedial_steps=steps,
        rationale=rationale,
        risk=fix_risk(steps),
        source_case=source_case,
    )


@dataclass
class RetryBudget:
    """Bounds on fix attempts; the debug loop is never allowed to spin."""

    per_step: int = 5
    global_limit: int = 25
    consumed_per_step: dict[str, int] = field(default_factory=dict)
    consumed_global: int = 0

    def can_spend(self, step_id: str) -> bool:
        return (
            self.consumed_per_step.get(step_id, 0) < self.per_step
            and self.consumed_global < self.global_limit
        )

    def spend(self, step_id: str) -> None:
        if not self.can_spend(step_id):
            raise RuntimeError(f"budget exhausted for step {step_id!r}")
        self.consumed_per_step[step_id] = self.consumed_per_step.get(step_id, 0) + 1
        self.consumed_global += 1


# --- LLM fix generation -------------------------------------------------------

PROPOSE_FIX_TOOL = ToolSchema(
    name="propose_fix",
    description="Propose shell steps that remediate the diagnosed deployment failure.",
    parameters={
        "type": "object",
        "properties": {
            "rationale": {"type": "string"},
            "steps": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "title": {"type": "string"},
                        "kind": {"type": "string", "enum": ["command", "file_write"]},
                        "run": {"type": "string"},
                        "path": {"type": "string"},
                        "working_dir": {"type": "string"},
                        "timeout_s": {"type": "integer"},
                    },
                    "required": ["kind", "run"],
                },
                "minItems": 1,
            },
        },
        "required": ["steps"],
    },
)


def _load_prompt(name: str) -> str:
    return (_PROMPTS_DIR / name).read_text(encoding="utf-8")


def build_fix_prompt(diag: FailureDiagnosis, context_cases: list[dict]) -> PromptEnvelope:
    """Deterministic prompt for fix generation; no volatile fields allowed."""
    case_blob = json.dumps(context_cases, sort_keys=True, indent=2) if context_cases else "none"
    user_text = _load_prompt("propose_fix_user.txt").format(
        error_class=diag.error_class,
        summary=diag.summary,
        normalized_text=diag.fingerprint.normalized_text,
        evidence="\n".join(diag.evidence_lines) or "(no captured output)",
        cases=case_blob,
    )
    return PromptEnvelope(
        system_text=_load_prompt("propose_fix_system.txt"),
        user_text=user_text,
        tool_schemas=(PROPOSE_FIX_TOOL,),
        temperature=0.0,
        max_tokens=1024,
    )


def _parse_fix_response(response: ModelResponse, attempt_tag: str) -> CandidateFix:
    if response.kind != "tool_call" or response.tool_call is None:
        raise MalformedToolCall("model did not call propose_fix")
    if response.tool_call.name != "propose_fix":
        raise MalformedToolCall(f"unexpected tool: {response.tool_call.name!r}")
    args = response.tool_call.arguments()
    raw_steps = args.get("steps")
    if not isinstance(raw_steps, list) or not raw_steps:
        raise MalformedToolCall("propose_fix arguments need a non-empty steps list")
    steps = []
    for i, raw in enumerate(raw_steps):
        if not isinstance(raw, dict):
            raise MalformedToolCall(f"step #{i} is not an object")
        raw = dict(raw)
        raw.setdefault("id", f"{attempt_tag}-{i + 1}")
        raw.setdefault("kind", "command")
        try:
            step = step_from_dict(raw, i)
        except Exception as exc:
            raise MalformedToolCall(f"step #{i} invalid: {exc}") from exc
        if re.search(r"\{\{", step.run):
            raise MalformedToolCall(f"step #{i} contains unresolved template markers")
        steps.append(step)
    return make_fix(steps, origin="llm_generated", rationale=args.get("rationale", ""))


def generate_llm_fix(
    llm: LlmGateway, diag: FailureDiagnosis, context_cases: list[dict], attempt_tag: str
) -> CandidateFix | None:
    """One structured propose_fix call; a malformed reply earns one reprompt."""
    envelope = build_fix_prompt(diag, context_cases)
    try:
        response = llm.complete(envelope)
    except LlmUnavailable:
        return None
    try:
        return _parse_fix_response(response, attempt_tag)
    except MalformedToolCall:
        retry_envelope = PromptEnvelope(
            system_text=envelope.system_text,
            user_text=envelope.user_text
            + "\n\nYour previous reply was not a valid propose_fix tool call. "
              "Call propose_fix with a JSON object containing a non-empty steps array.",
            tool_schemas=envelope.tool_schemas,
            temperature=envelope.temperature,
            max_tokens=envelope.max_tokens,
        )
        try:
            response = llm.complete(retry_envelope)
            return _parse_fix_response(response, attempt_tag)
        except (MalformedToolCall, LlmUnavailable):
            return None


# --- solution search ----------------------------------------------------------

def _case_context(case) -> dict:
    return {
        "case_id": case.case_id,
        "error_class": case.error_class,
        "success_ratio": f"{case.successes}/{case.uses}",
        "steps": [step_to_dict(s) for s in case.fix.remedial_steps],
    }


def _fix_from_case(case, origin: str) -> CandidateFix:
    return CandidateFix(
        fix_id=case.fix.fix_id,
        origin=origin,
        remedial_steps=case.fix.remedial_steps,
        rationale=f"worked {case.successes}/{case.uses} times for case {case.case_id}",
        risk=fix_risk(case.fix.remedial_steps),
        source_case=case.case_id,
    )


def search_solutions(
    diag: FailureDiagnosis,
    repo,
    llm: LlmGateway | None,
    k: int = 3,
    *,
    exclude_fix_hashes: frozenset[str] | set[str] = frozenset(),
    online_search=None,
    min_similarity: float = SEMANTIC_THRESHOLD,
) -> list[CandidateFix]:
    """Cascade: exact repo hits, semantic repo hits, LLM, then online search.

    Fixes whose hash already failed for this step (exclude_fix_hashes) are
    dropped at every stage. Model unavailability degrades to repo-only
    results; it never aborts the cascade.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates: list[CandidateFix] = []
    seen_hashes: set[str] = set(exclude_fix_hashes)

    def admit(fix: CandidateFix) -> bool:
        h = fix_hash(fix.remedial_steps)
        if h in seen_hashes:
            return False
        seen_hashes.add(h)
        candidates.append(fix)
        return True

    exact_cases = repo.retrieve_exact(diag.fingerprint, k) if repo is not None else []
    for case in exact_cases:
        if len(candidates) >= k:
            break
        admit(_fix_from_case(case, "repo_exact"))

    semantic_cases: list = []
    if repo is not None and len(candidates) < k:
        semantic = repo.retrieve_semantic(diagnosis_query_text(diag), k, min_similarity)
        for case, _similarity in semantic:
            semantic_cases.append(case)
            if len(candidates) >= k:
                break
            admit(_fix_from_case(case, "repo_semantic"))

    if llm is not None and len(candidates) < k:
        context = [_case_context(c) for c in (exact_cases + semantic_cases)[:3]]
        fix = generate_llm_fix(llm, diag, context, attempt_tag=f"{diag.step_id}-fix")
        if fix is not None:
            admit(fix)

    if online_search is not None and not candidates:
        fix = _online_search_fix(online_search, llm, diag)
        if fix is not None:
            admit(fix)

    return candidates[:k]


def _online_search_fix(provider, llm: LlmGateway | None, diag: FailureDiagnosis) -> CandidateFix | None:
    """Convert online search hits into one llm-summarized candidate."""
    try:
        hits = provider.search(diag.summary)
    except Exception:  # noqa: BLE001 - providers are untrusted plugins
        return None
    if not hits or llm is None:
        return None
    snippets = [
        {"title": h.get("title", ""), "url": h.get("url", ""), "snippet": h.get("snippet", "")}
        for h in hits[:5]
    ]
    fix = generate_llm_fix(llm, diag, snippets, attempt_tag=f"{diag.step_id}-web")
    if fix is None:
        return None
    return CandidateFix(
        fix_id=fix.fix_id,
        origin="online_search",
        remedial_steps=fix.remedial_steps,
        rationale=fix.rationale,
        risk=fix.risk,
        source_case=None,
    )


# --- the debug loop -----------------------------------------------------------

@dataclass(frozen=True)
class FixAttemptRecord:
    attempt: int
    step_id: str
    diagnosis: FailureDiagnosis
    fix: CandidateFix
    remedial_results: tuple[ExecutionResult, ...]
    retry_result: ExecutionResult
    outcome: str  # success | failure
    case_id: str


def run_debug_loop(
    step: Step,
    first_failure: ExecutionResult,
    env,
    repo,
    llm: LlmGateway | None,
    budget: RetryBudget,
    *,
    snapshot_before: EnvironmentSnapshot,
    execute_fn,
    emit=None,
    approve=None,
    online_search=None,
    rules: RuleTable | None = None,
) -> tuple[str, list[FixAttemptRecord]]:
    """Drive bounded fix attempts until the step passes or budget runs out.

    execute_fn(step, remedial) runs steps (the runner wires events through
    it; remedial executions are flagged so the transcript fold can tell
    them apart); approve(fix, reason) gates high-risk fixes and returns
    True/False. Returns ("fixed" | "exhausted" | "aborted", attempt records).
    """
    emit = emit or (lambda kind, payload: None)
    records: list[FixAttemptRecord] = []
    failed_hashes: set[str] = set()
    current_failure = first_failure
    before = snapshot_before

    while True:
        if not budget.can_spend(step.id):
            return "exhausted", records

        diag = diagnose(current_failure, before, rules)
        emit("diagnosis", {
            "step_id": step.id,
            "error_class": diag.error_class,
            "digest": diag.fingerprint.digest,
            "summary": diag.summary,
        })

        candidates = search_solutions(
            diag, repo, llm, k=1,
            exclude_fix_hashes=frozenset(failed_hashes),
            online_search=online_search,
        )
        if not candidates:
            return "exhausted", records

        fix = candidates[0]
        emit("fix_proposed", {
            "step_id": step.id,
            "fix_id": fix.fix_id,
            "origin": fix.origin,
            "risk": fix.risk,
            "rationale": fix.rationale,
            "steps": [step_to_dict(s) for s in fix.remedial_steps],
        })

        if fix.risk == "high":
            approved = approve(fix, "fix_above_risk") if approve else False
            if not approved:
                return "aborted", records

        budget.spend(step.id)
        remedial_results = tuple(execute_fn(rs, True) for rs in fix.remedial_steps)
        retry_result = execute_fn(step, False)
        outcome = "success" if retry_result.status == "success" else "failure"

        case_id = repo.merge_case(diag, fix, retry_result) if repo is not None else ""
        emit("knowledge_merged", {
            "step_id": step.id,
            "case_id": case_id,
            "digest": diag.fingerprint.digest,
            "outcome": outcome,
        })

        record = FixAttemptRecord(
            attempt=len(records) + 1,
            step_id=step.id,
            diagnosis=diag,
            fix=fix,
            remedial_results=remedial_results,
            retry_result=retry_result,
            outcome=outcome,
            case_id=case_id,
        )
        records.append(record)
        emit("fix_applied", fix_attempt_to_dict(record))

        if outcome == "success":
            return "fixed", records
        failed_hashes.add(fix_hash(fix.remedial_steps))
        current_failure = retry_result
        before = retry_result.env_snapshot_after


# --- serialization ------------------------------------------------------------

def fingerprint_to_dict(fp: ErrorFingerprint) -> dict:
    return {"digest": fp.digest, "normalized_text": fp.normalized_text}


def fingerprint_from_dict(raw: dict) -> ErrorFingerprint:
    return ErrorFingerprint(digest=raw["digest"], normalized_text=raw["normalized_text"])


def diagnosis_to_dict(diag: FailureDiagnosis) -> dict:
    from .sandbox import snapshot_to_dict

    return {
        "step_id": diag.step_id,
        "error_class": diag.error_class,
        "fingerprint": fingerprint_to_dict(diag.fingerprint),
        "evidence_lines": list(diag.evidence_lines),
        "env_context": snapshot_to_dict(diag.env_context),
        "summary": diag.summary,
    }


def diagnosis_from_dict(raw: dict) -> FailureDiagnosis:
    from .sandbox import snapshot_from_dict

    return FailureDiagnosis(
        step_id=raw["step_id"],
        error_class=raw["error_class"],
        fingerprint=fingerprint_from_dict(raw["fingerprint"]),
        evidence_lines=tuple(raw["evidence_lines"]),
        env_context=snapshot_from_dict(raw["env_context"]),
        summary=raw["summary"],
    )


def fix_to_dict(fix: CandidateFix) -> dict:
    return {
        "fix_id": fix.fix_id,
        "origin": fix.origin,
        "remedial_steps": [step_to_dict(s) for s in fix.remedial_steps],
        "rationale": fix.rationale,
        "risk": fix.risk,
        "source_case": fix.source_case,
    }


def fix_from_dict(raw: dict) -> CandidateFix:
    return CandidateFix(
        fix_id=raw["fix_id"],
        origin=raw["origin"],
        remedial_steps=tuple(step_from_dict(s, i) for i, s in enumerate(raw["remedial_steps"])),
        rationale=raw["rationale"],
        risk=raw["risk"],
        source_case=raw.get("source_case"),
    )


def fix_attempt_to_dict(record: FixAttemptRecord) -> dict:
    from .sandbox import result_to_dict

    return {
        "attempt": record.attempt,
        "step_id": record.step_id,
        "diagnosis": diagnosis_to_dict(record.diagnosis),
        "fix": fix_to_dict(record.fix),
        "remedial_results": [result_to_dict(r) for r in record.remedial_results],
        "retry_result": result_to_dict(record.retry_result),
        "outcome": record.outcome,
        "case_id": record.case_id,
    }


def fix_attempt_from_dict(raw: dict) -> FixAttemptRecord:
    from .sandbox import result_from_dict

    return FixAttemptRecord(
        attempt=raw["attempt"],
        step_id=raw["step_id"],
        diagnosis=diagnosis_from_dict(raw["diagnosis"]),
        fix=fix_from_dict(raw["fix"]),
        remedial_results=tuple(result_from_dict(r) for r in raw["remedial_results"]),
        retry_result=result_from_dict(raw["retry_result"]),
        outcome=raw["outcome"],
        case_id=raw["case_id"],
    )
