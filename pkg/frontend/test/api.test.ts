/** API client: approval writes, 409 handling, single-flight guard, search. */

import { describe, expect, it } from "vitest";

import { listRuns, resolveApproval, searchKnowledge, singleFlight } from "../src/api.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

function scriptedFetch(responses: Response[]): { fetchImpl: typeof fetch; calls: Array<{ url: string; init?: RequestInit }> } {
  const calls: Array<{ url: string; init?: RequestInit }> = [];
  const fetchImpl = (async (input: RequestInfo | URL, init?: RequestInit) => {
    calls.push({ url: String(input), init });
    const next = responses.shift();
    if (!next) throw new Error("no scripted response left");
    return next;
  }) as typeof fetch;
  return { fetchImpl, calls };
}


describe("resolveApproval", () => {
  it("posts the decision and reports the new state", async () => {
    const { fetchImpl, calls } = scriptedFetch([
      jsonResponse(200, { approval_id: "appr-001", state: "approved" }),
    ]);
    const result = await resolveApproval("", "run-1", "appr-001", "approved", fetchImpl);
    expect(result.ok).toBe(true);
    expect(result.state).toBe("approved");
    expect(calls).toHaveLength(1);
    expect(calls[0].url).toBe("/runs/run-1/approvals/appr-001");
    expect(calls[0].init?.method).toBe("POST");
    expect(JSON.parse(String(calls[0].init?.body))).toEqual({ decision: "approved" });
  });

  it("maps 409 to alreadyResolved", async () => {
    const { fetchImpl } = scriptedFetch([
      jsonResponse(409, { error: "approval appr-001 already approved" }),
    ]);
    const result = await resolveApproval("", "run-1", "appr-001", "rejected", fetchImpl);
    expect(result.ok).toBe(false);
    expect(result.alreadyResolved).toBe(true);
    expect(result.error).toContain("already");
  });

  it("reports other failures without throwing", async () => {
    const { fetchImpl } = scriptedFetch([jsonResponse(404, { error: "unknown run" })]);
    const result = await resolveApproval("", "nope", "a", "approved", fetchImpl);
    expect(result.ok).toBe(false);
    expect(result.alreadyResolved).toBe(false);
    expect(result.error).toContain("unknown run");
  });
});


describe("singleFlight", () => {
  it("a double-click fires exactly one POST", async () => {
    const { fetchImpl, calls } = scriptedFetch([
      jsonResponse(200, { state: "approved" }),
    ]);
    const fire = singleFlight(() => resolveApproval("", "r", "a", "approved", fetchImpl));
    const first = fire();
    const second = fire(); // double click
    expect(second).toBeNull();
    await first;
    expect(calls).toHaveLength(1);
  });
});


describe("searchKnowledge", () => {
  it("returns ranked hits in server order", async () => {
    const hits = [
      { case_id: "a", similarity: 0.9, error_class: "missing_dependency",
        digest: "d1", normalized_text: "no module named 'torch'",
        success_ratio: "3/3", remedial_steps: ["pip install torch"] },
      { case_id: "b", similarity: 0.4, error_class: "network_failure",
        digest: "d2", normalized_text: "could not resolve host",
        success_ratio: "1/2", remedial_steps: ["use mirror"] },
    ];
    const { fetchImpl, calls } = scriptedFetch([jsonResponse(200, { results: hits })]);
    const results = await searchKnowledge("", "module named torch", fetchImpl);
    expect(results.map((h) => h.case_id)).toEqual(["a", "b"]);
    expect(calls[0].url).toBe("/knowledge/search?q=module%20named%20torch");
  });

  it("throws a descriptive error on a malformed reply", async () => {
    const { fetchImpl } = scriptedFetch([jsonResponse(200, { nope: true })]);
    await expect(searchKnowledge("", "x", fetchImpl)).rejects.toThrow("malformed");
  });

  it("throws on transport-level failure", async () => {
    const { fetchImpl } = scriptedFetch([jsonResponse(500, {})]);
    await expect(searchKnowledge("", "x", fetchImpl)).rejects.toThrow("HTTP 500");
  });
});


describe("listRuns", () => {
  it("unwraps the runs array", async () => {
    const { fetchImpl } = scriptedFetch([
      jsonResponse(200, { runs: [{ run_id: "r1", outcome: "succeeded", events: 9,
                                   project: "demo", live: false }] }),
    ]);
    const runs = await listRuns("", fetchImpl);
    expect(runs).toHaveLength(1);
    expect(runs[0].run_id).toBe("r1");
  });
});
