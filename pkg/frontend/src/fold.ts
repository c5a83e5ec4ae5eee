/**
 * Pure fold from journal events to a RunView.
 *
 * Rendered state is a function of the event sequence alone: the same
 * events always produce the same view, and replaying a prefix then the
 * rest equals consuming the stream uninterrupted. Events at or below
 * lastSeq are dropped, which is what makes reconnect overlap harmless.
 */

import type {
  ApprovalView,
  FixAttemptView,
  OutputLine,
  RunEvent,
  RunView,
  StepView,
} from "./types.js";

const MAX_OUTPUT_LINES = 2000;

export function emptyView(): RunView {
  return {
    runId: "",
    project: null,
    outcome: null,
    steps: [],
    output: [],
    approvals: [],
    knowledgeMerges: 0,
    lastSeq: 0,
  };
}

interface GuidelineStep {
  id: string;
  title?: string;
  kind?: string;
}

function stepsFromGuideline(payload: Record<string, unknown>): StepView[] {
  const guideline = payload["guideline"] as { steps?: GuidelineStep[] } | undefined;
  return (guideline?.steps ?? []).map((s) => ({
    id: s.id,
    title: s.title ?? "",
    kind: s.kind ?? "command",
    status: "pending" as const,
    attempts: 0,
    fixAttempts: [],
  }));
}

function updateStep(steps: StepView[], stepId: string, patch: (s: StepView) => StepView): StepView[] {
  return steps.map((s) => (s.id === stepId ? patch(s) : s));
}

export function applyEvent(view: RunView, event: RunEvent): RunView {
  if (event.seq <= view.lastSeq) {
    return view; // duplicate delivery (reconnect overlap)
  }
  const p = event.payload;
  const next: RunView = { ...view, lastSeq: event.seq };

  switch (event.kind) {
    case "run_started": {
      const guideline = p["guideline"] as { project_name?: string } | undefined;
      next.runId = event.run_id;
      next.project = guideline?.project_name ?? null;
      next.steps = stepsFromGuideline(p);
      break;
    }
    case "step_started": {
      if (p["remedial"]) break;
      next.steps = updateStep(next.steps, String(p["step_id"]), (s) => ({
        ...s,
        status: "running",
        attempts: s.attempts + 1,
      }));
      break;
    }
    case "step_finished": {
      if (p["remedial"]) break;
      const result = p["result"] as { status?: string } | undefined;
      const ok = result?.status === "success";
      next.steps = updateStep(next.steps, String(p["step_id"]), (s) => ({
        ...s,
        status: ok ? "success" : "failure",
      }));
      break;
    }
    case "output_chunk": {
      const line: OutputLine = {
        seq: event.seq,
        stepId: String(p["step_id"]),
        stream: String(p["stream"]),
        text: String(p["text"]),
      };
      const output = [...next.output, line];
      next.output = output.length > MAX_OUTPUT_LINES ? output.slice(-MAX_OUTPUT_LINES) : output;
      break;
    }
    case "diagnosis": {
      next.steps = updateStep(next.steps, String(p["step_id"]), (s) => ({
        ...s,
        status: "fixing",
      }));
      break;
    }
    case "fix_proposed": {
      const attempt: FixAttemptView = {
        fixId: String(p["fix_id"]),
        origin: String(p["origin"]),
        risk: String(p["risk"]),
        rationale: String(p["rationale"] ?? ""),
        outcome: "pending",
        attempt: null,
      };
      next.steps = updateStep(next.steps, String(p["step_id"]), (s) => ({
        ...s,
        fixAttempts: [...s.fixAttempts, attempt],
      }));
      break;
    }
    case "fix_applied": {
      const fix = p["fix"] as { fix_id?: string } | undefined;
      const fixId = fix?.fix_id ?? "";
      const outcome = p["outcome"] === "success" ? "success" : "failure";
      const attemptNo = typeof p["attempt"] === "number" ? (p["attempt"] as number) : null;
      next.steps = updateStep(next.steps, String(p["step_id"]), (s) => ({
        ...s,
        fixAttempts: s.fixAttempts.map((f) =>
          f.fixId === fixId && f.outcome === "pending"
            ? { ...f, outcome, attempt: attemptNo }
            : f,
        ),
      }));
      break;
    }
    case "approval_requested": {
      const approval: ApprovalView = {
        approvalId: String(p["approval_id"]),
        stepId: String(p["step_id"]),
        command: String(p["rendered_command"]),
        reason: String(p["reason"]),
        state: "pending",
      };
      next.approvals = [...next.approvals, approval];
      break;
    }
    case "approval_resolved": {
      const id = String(p["approval_id"]);
      const decision = p["decision"] === "approved" ? "approved" : "rejected";
      next.approvals = next.approvals.map((a) =>
        a.approvalId === id ? { ...a, state: decision } : a,
      );
      break;
    }
    case "knowledge_merged": {
      next.knowledgeMerges = next.knowledgeMerges + 1;
      break;
    }
    case "run_finished": {
      next.outcome = String(p["outcome"]);
      break;
    }
    default:
      break; // unknown kinds are ignored, not fatal
  }
  return next;
}

export function foldEvents(events: Iterable<RunEvent>, initial?: RunView): RunView {
  let view = initial ?? emptyView();
  for (const event of events) {
    view = applyEvent(view, event);
  }
  return view;
}

export function pendingApprovals(view: RunView): ApprovalView[] {
  return view.approvals.filter((a) => a.state === "pending");
}

export function parseJournalLines(text: string): RunEvent[] {
  return text
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0)
    .map((line) => JSON.parse(line) as RunEvent);
}
