/** Wire types mirrored from the server's journal and HTTP API. */

export interface RunEvent {
  seq: number;
  run_id: string;
  kind: string;
  payload: Record<string, unknown>;
  at: string;
}

export type StepStatus = "pending" | "running" | "success" | "failure" | "fixing";

export interface FixAttemptView {
  fixId: string;
  origin: string;
  risk: string;
  rationale: string;
  outcome: "pending" | "success" | "failure";
  attempt: number | null;
}

export interface StepView {
  id: string;
  title: string;
  kind: string;
  status: StepStatus;
  attempts: number;
  fixAttempts: FixAttemptView[];
}

export interface OutputLine {
  seq: number;
  stepId: string;
  stream: string;
  text: string;
}

export interface ApprovalView {
  approvalId: string;
  stepId: string;
  command: string;
  reason: string;
  state: "pending" | "approved" | "rejected";
}

export interface RunView {
  runId: string;
  project: string | null;
  outcome: string | null;
  steps: StepView[];
  output: OutputLine[];
  approvals: ApprovalView[];
  knowledgeMerges: number;
  lastSeq: number;
}

export interface RunSummary {
  run_id: string;
  outcome: string | null;
  events: number;
  project: string | null;
  live: boolean;
}

export interface KnowledgeHit {
  case_id: string;
  similarity: number;
  error_class: string;
  digest: string;
  normalized_text: string;
  success_ratio: string;
  remedial_steps: string[];
}
