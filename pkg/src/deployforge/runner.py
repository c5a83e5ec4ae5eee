"""Deployment orchestration: sequential steps, debug loop, approvals, resume.

A run is journal-first: every observable fact is an event appended to the
run journal, and the returned transcript is recomputed from that journal,
so transcript/journal divergence is impossible by construction.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from . import debugger as dbg
from .errors import UnknownRun, WorkspaceMissing
from .events import JournalWriter, RunEvent, read_journal
from .guideline import (
    GuidelineDocument,
    Step,
    guideline_to_dict,
    is_destructive,
    parse_guideline_data,
    render_step,
)
from .knowledge import KnowledgeRepository
from .llm import LlmGateway
from .sandbox import (
    EnvironmentSnapshot,
    ExecutionEnvironment,
    ExecutionResult,
    execute_step,
    probe_environment,
    requirement_satisfied,
    result_from_dict,
    result_to_dict,
)

APPROVAL_TIMEOUT_S = 3600


@dataclass(frozen=True)
class RunTranscript:
    run_id: str
    guideline: GuidelineDocument
    results: tuple[ExecutionResult, ...]
    fix_attempts: tuple[dbg.FixAttemptRecord, ...]
    outcome: str | None  # succeeded | failed_exhausted | aborted | None while live
    started_at: str | None
    ended_at: str | None

    def final_result_for(self, step_id: str) -> ExecutionResult | None:
        for result in reversed(self.results):
            if result.step_id == step_id:
                return result
        return None


@dataclass
class ApprovalRequest:
    approval_id: str
    step_id: str
    rendered_command: str
    reason: str  # guideline_flag | destructive_denylist | fix_above_risk
    state: str = "pending"  # pending -> approved | rejected, exactly once


class ApprovalBroker:
    """Blocking bridge between a run and whoever resolves its approvals.

    The run parks on wait(); another thread (HTTP handler, CLI prompt,
    test) calls resolve(). A second resolve on the same id raises.
    """

    def __init__(self, auto: str | None = None):
        self.auto = auto  # "approved"/"rejected" resolves instantly; None waits
        self.pending: dict[str, ApprovalRequest] = {}
        self._events: dict[str, threading.Event] = {}
        self._lock = threading.Lock()

    def submit(self, request: ApprovalRequest) -> None:
        with self._lock:
            self.pending[request.approval_id] = request
            self._events[request.approval_id] = threading.Event()
        if self.auto:
            self.resolve(request.approval_id, self.auto)

    def resolve(self, approval_id: str, decision: str) -> ApprovalRequest:
        if decision not in ("approved", "rejected"):
            raise ValueError(f"bad decision: {decision!r}")
        with self._lock:
            request = self.pending.get(approval_id)
            if request is None:
                raise KeyError(approval_id)
            if request.state != "pending":
                raise ValueError(f"approval {approval_id} already {request.state}")
            request.state = decision
            self._events[approval_id].set()
        return request

    def wait(self, approval_id: str, timeout_s: float) -> str | None:
        event = self._events[approval_id]
        if not event.wait(timeout=timeout_s):
            return None
        return self.pending[approval_id].state


def check_status(result: ExecutionResult, step: Step) -> str:
    """Alg-level step gate: "success" or "failure" (timeouts are failures)."""
    if result.status != "success":
        return "failure"
    if step.check is not None:
        expected = step.check.exit_code if step.check.exit_code is not None else 0
        if result.exit_code is not None and result.exit_code != expected:
            return "failure"
        if step.check.stdout_matches is not None and not re.search(
            step.check.stdout_matches, result.stdout
        ):
            return "failure"
    elif result.exit_code not in (None, 0):
        return "failure"
    return "success"


def run_dir(state_dir: str | Path, run_id: str) -> Path:
    return Path(state_dir) / "runs" / run_id


def journal_path(state_dir: str | Path, run_id: str) -> Path:
    return run_dir(state_dir, run_id) / "journal.ndjson"


class _RunSession:
    """Mutable machinery for one run; shared by fresh starts and resumes."""

    def __init__(
        self,
        *,
        guideline: GuidelineDocument,
        env: ExecutionEnvironment,
        repo: KnowledgeRepository | None,
        budget: dbg.RetryBudget,
        llm: LlmGateway | None,
        state_dir: str | Path,
        run_id: str,
        bindings: dict[str, str],
        approvals: ApprovalBroker,
        approval_timeout_s: float,
        on_event=None,
        online_search=None,
        rules=None,
    ):
        self.guideline = guideline
        self.env = env
        self.repo = repo
        self.budget = budget
        self.llm = llm
        self.state_dir = Path(state_dir)
        self.run_id = run_id
        self.bindings = bindings
        self.approvals = approvals
        self.approval_timeout_s = approval_timeout_s
        self.online_search = online_search
        self.rules = rules
        jpath = journal_path(state_dir, run_id)
        prior_events = list(read_journal(jpath)) if jpath.exists() else []
        self.journal = JournalWriter(jpath, run_id, on_event)
        self._fresh = not prior_events
        self._attempt_counts: dict[str, int] = {}
        self._approval_counter = 0
        for event in prior_events:
            if event.kind == "step_started":
                sid = event.payload["step_id"]
                self._attempt_counts[sid] = max(
                    self._attempt_counts.get(sid, 0), event.payload.get("attempt", 0)
                )
            elif event.kind == "approval_requested":
                self._approval_counter += 1
        self.requirements = list(guideline.env_requirements)

    # -- helpers -----------------------------------------------------------

    def emit(self, kind: str, payload: dict) -> RunEvent:
        return self.journal.emit(kind, payload)

    def execute_and_emit(self, step: Step, remedial: bool = False) -> ExecutionResult:
        n = self._attempt_counts.get(step.id, 0) + 1
        self._attempt_counts[step.id] = n
        self.emit("step_started", {
            "step_id": step.id, "attempt": n, "title": step.title,
            "kind": step.kind, "remedial": remedial,
        })

        def on_output(stream: str, line: str) -> None:
            self.emit("output_chunk", {"step_id": step.id, "stream": stream, "text": line})

        result = execute_step(self.env, step, on_output=on_output,
                              requirements=self.requirements)
        self.emit("step_finished", {
            "step_id": step.id, "attempt": n, "remedial": remedial,
            "result": result_to_dict(result),
        })
        return result

    def request_approval(self, step_id: str, rendered_command: str, reason: str) -> bool:
        """Block until the approval resolves; None (timeout) aborts the run."""
        self._approval_counter += 1
        request = ApprovalRequest(
            approval_id=f"appr-{self._approval_counter:03d}",
            step_id=step_id,
            rendered_command=rendered_command,
            reason=reason,
        )
        self.approvals.submit(request)
        self.emit("approval_requested", {
            "approval_id": request.approval_id, "step_id": step_id,
            "rendered_command": rendered_command, "reason": reason,
        })
        decision = self.approvals.wait(request.approval_id, self.approval_timeout_s)
        self.emit("approval_resolved", {
            "approval_id": request.approval_id,
            "decision": decision or "rejected",
            "timed_out": decision is None,
        })
        return decision == "approved"

    # -- the loop ----------------------------------------------------------

    def run(self, skip_step_ids: set[str] | None = None) -> RunTranscript:
        skip = skip_step_ids or set()
        if self._fresh:
            snapshot = probe_environment(self.env, self.requirements)
            self.emit("run_started", {
                "run_id": self.run_id,
                "guideline": guideline_to_dict(self.guideline),
                "bindings": dict(self.bindings),
                "initial_snapshot": _snapshot_payload(snapshot),
                "requirements": [
                    {
                        "name": r.name,
                        "constraint": r.constraint,
                        "observed": snapshot.tool_versions.get(r.name, ""),
                        "satisfied": requirement_satisfied(r, snapshot),
                    }
                    for r in self.requirements
                ],
            })
            prev_snapshot = snapshot
        else:
            prev_snapshot = probe_environment(self.env, self.requirements)

        outcome = "succeeded"
        for step in self.guideline.steps:
            if step.id in skip:
                continue
            rendered = render_step(step, self.bindings)

            if rendered.needs_approval:
                # The denylist reason dominates: it names why the gate exists
                # even when the author also flagged the step.
                reason = (
                    "destructive_denylist"
                    if rendered.kind == "command" and is_destructive(rendered.run)
                    else "guideline_flag"
                )
                if not self.request_approval(step.id, rendered.run, reason):
                    outcome = "aborted"
                    break

            result = self.execute_and_emit(rendered)
            if check_status(result, rendered) == "success":
                prev_snapshot = result.env_snapshot_after
                continue

            status, records = dbg.run_debug_loop(
                rendered,
                result,
                self.env,
                self.repo,
                self.llm,
                self.budget,
                snapshot_before=prev_snapshot,
                execute_fn=self.execute_and_emit,
                emit=self.emit,
                approve=lambda fix, reason: self.request_approval(
                    step.id, " && ".join(s.run for s in fix.remedial_steps), reason
                ),
                online_search=self.online_search,
                rules=self.rules,
            )
            if status == "fixed":
                prev_snapshot = records[-1].retry_result.env_snapshot_after
                continue
            outcome = "failed_exhausted" if status == "exhausted" else "aborted"
            break

        self.emit("run_finished", {"outcome": outcome})
        self.journal.close()
        return transcript_from_events(read_journal(self.journal.path))


def _snapshot_payload(snapshot: EnvironmentSnapshot) -> dict:
    from .sandbox import snapshot_to_dict

    return snapshot_to_dict(snapshot)


def _merged_bindings(guideline: GuidelineDocument, bindings: dict[str, str] | None) -> dict[str, str]:
    merged = {k: v for k, v in guideline.variables.items() if v is not None}
    merged.update(bindings or {})
    missing = [name for name in guideline.required_at_runtime() if name not in merged]
    if missing:
        from .errors import MissingBinding

        raise MissingBinding(missing)
    return merged


def run_deployment(
    guideline: GuidelineDocument,
    env: ExecutionEnvironment,
    repo: KnowledgeRepository | None,
    budget: dbg.RetryBudget,
    *,
    state_dir: str | Path,
    llm: LlmGateway | None = None,
    bindings: dict[str, str] | None = None,
    approvals: ApprovalBroker | None = None,
    approval_timeout_s: float = APPROVAL_TIMEOUT_S,
    on_event=None,
    online_search=None,
    rules=None,
) -> RunTranscript:
    """Execute a validated guideline inside env, debugging failures as they come.

    The run id is the workspace directory name chosen at sandbox creation.
    """
    run_id = Path(env.workspace_root).name
    _write_meta(state_dir, run_id, env)
    session = _RunSession(
        guideline=guideline,
        env=env,
        repo=repo,
        budget=budget,
        llm=llm,
        state_dir=state_dir,
        run_id=run_id,
        bindings=_merged_bindings(guideline, bindings),
        approvals=approvals or ApprovalBroker(auto="rejected"),
        approval_timeout_s=approval_timeout_s,
        on_event=on_event,
        online_search=online_search,
        rules=rules,
    )
    return session.run()


def _write_meta(state_dir: str | Path, run_id: str, env: ExecutionEnvironment) -> None:
    directory = run_dir(state_dir, run_id)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "run_id": run_id,
        "workspace_root": env.workspace_root,
        "env_vars": env.env_vars,
        "path_entries": env.path_entries,
        "network_allowed": env.network_allowed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def resume_run(
    run_id: str,
    *,
    state_dir: str | Path,
    repo: KnowledgeRepository | None,
    budget: dbg.RetryBudget | None = None,
    llm: LlmGateway | None = None,
    approvals: ApprovalBroker | None = None,
    approval_timeout_s: float = APPROVAL_TIMEOUT_S,
    on_event=None,
    online_search=None,
    rules=None,
) -> RunTranscript:
    """Pick an interrupted run back up at its first unfinished step.

    Completed steps keep their original results; event numbering continues
    where the previous session stopped.
    """
    jpath = journal_path(state_dir, run_id)
    meta_path = run_dir(state_dir, run_id) / "meta.json"
    if not jpath.exists() or not meta_path.exists():
        raise UnknownRun(run_id)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if not Path(meta["workspace_root"]).is_dir():
        raise WorkspaceMissing(meta["workspace_root"])

    events = list(read_journal(jpath))
    started = [e for e in events if e.kind == "run_started"]
    if not started:
        raise UnknownRun(f"{run_id}: journal has no run_started event")
    start_payload = started[0].payload
    guideline = parse_guideline_data(start_payload["guideline"])
    bindings = dict(start_payload.get("bindings", {}))

    prior = transcript_from_events(iter(events))
    if prior.outcome == "succeeded":
        return prior

    env = ExecutionEnvironment(
        workspace_root=meta["workspace_root"],
        env_vars=dict(meta["env_vars"]),
        path_entries=list(meta["path_entries"]),
        network_allowed=meta["network_allowed"],
    )

    budget = budget or dbg.RetryBudget()
    for record in prior.fix_attempts:
        # Budget consumption survives the interruption.
        if budget.can_spend(record.step_id):
            budget.spend(record.step_id)

    completed = {
        step.id
        for step in guideline.steps
        if any(r.step_id == step.id and r.status == "success" for r in prior.results)
    }
    session = _RunSession(
        guideline=guideline,
        env=env,
        repo=repo,
        budget=budget,
        llm=llm,
        state_dir=state_dir,
        run_id=run_id,
        bindings=bindings,
        approvals=approvals or ApprovalBroker(auto="rejected"),
        approval_timeout_s=approval_timeout_s,
        on_event=on_event,
        online_search=online_search,
        rules=rules,
    )
    return session.run(skip_step_ids=completed)


def transcript_from_events(events) -> RunTranscript:
    """Pure fold: rebuild the transcript a journal describes."""
    run_id = ""
    guideline: GuidelineDocument | None = None
    guideline_step_ids: set[str] = set()
    results: list[ExecutionResult] = []
    fix_attempts: list[dbg.FixAttemptRecord] = []
    outcome: str | None = None
    started_at: str | None = None
    ended_at: str | None = None

    for event in events:
        if event.kind == "run_started":
            if guideline is None:
                run_id = event.run_id
                guideline = parse_guideline_data(event.payload["guideline"])
                guideline_step_ids = {s.id for s in guideline.steps}
                started_at = event.at
        elif event.kind == "step_finished":
            if not event.payload.get("remedial") and event.payload["step_id"] in guideline_step_ids:
                results.append(result_from_dict(event.payload["result"]))
        elif event.kind == "fix_applied":
            fix_attempts.append(dbg.fix_attempt_from_dict(event.payload))
        elif event.kind == "run_finished":
            outcome = event.payload["outcome"]
            ended_at = event.at

    if guideline is None:
        raise ValueError("event stream has no run_started event")
    return RunTranscript(
        run_id=run_id,
        guideline=guideline,
        results=tuple(results),
        fix_attempts=tuple(fix_attempts),
        outcome=outcome,
        started_at=started_at,
        ended_at=ended_at,
    )
