/** Thin client for the control surface's write and query endpoints. */

import type { KnowledgeHit, RunSummary } from "./types.js";

export interface ApprovalResult {
  ok: boolean;
  alreadyResolved: boolean;
  state: string | null;
  error: string | null;
}

export async function resolveApproval(
  baseUrl: string,
  runId: string,
  approvalId: string,
  decision: "approved" | "rejected",
  fetchImpl: typeof fetch = fetch,
): Promise<ApprovalResult> {
  const response = await fetchImpl(`${baseUrl}/runs/${runId}/approvals/${approvalId}`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ decision }),
  });
  const body = (await response.json().catch(() => null)) as
    | { state?: string; error?: string }
    | null;
  if (response.status === 409) {
    return { ok: false, alreadyResolved: true, state: null, error: body?.error ?? "already resolved" };
  }
  if (!response.ok) {
    return { ok: false, alreadyResolved: false, state: null, error: body?.error ?? `HTTP ${response.status}` };
  }
  return { ok: true, alreadyResolved: false, state: body?.state ?? decision, error: null };
}

/**
 * One-shot guard: the returned function performs the POST on first call
 * and returns null on any further call, so a double-clicked button can
 * never fire twice.
 */
export function singleFlight<T extends unknown[], R>(
  fn: (...args: T) => Promise<R>,
): (...args: T) => Promise<R> | null {
  let fired = false;
  return (...args: T) => {
    if (fired) {
      return null;
    }
    fired = true;
    return fn(...args);
  };
}

export async function searchKnowledge(
  baseUrl: string,
  query: string,
  fetchImpl: typeof fetch = fetch,
): Promise<KnowledgeHit[]> {
  const response = await fetchImpl(
    `${baseUrl}/knowledge/search?q=${encodeURIComponent(query)}`,
  );
  if (!response.ok) {
    throw new Error(`search failed: HTTP ${response.status}`);
  }
  const body = (await response.json()) as { results?: unknown };
  if (!Array.isArray(body.results)) {
    throw new Error("malformed search reply: results missing");
  }
  return body.results as KnowledgeHit[];
}

export async function listRuns(
  baseUrl: string,
  fetchImpl: typeof fetch = fetch,
): Promise<RunSummary[]> {
  const response = await fetchImpl(`${baseUrl}/runs`);
  if (!response.ok) {
    throw new Error(`runs listing failed: HTTP ${response.status}`);
  }
  const body = (await response.json()) as { runs?: RunSummary[] };
  return body.runs ?? [];
}
