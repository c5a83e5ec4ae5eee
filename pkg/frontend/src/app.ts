/**
 * DOM wiring for the operator console. Rendering is a projection of the
 * folded RunView; user input only ever issues API writes (approvals) or
 * queries (knowledge search), never mutates the view directly.
 */

import { listRuns, resolveApproval, searchKnowledge, singleFlight } from "./api.js";
import { applyEvent, emptyView, pendingApprovals } from "./fold.js";
import { EventStream } from "./stream.js";
import type { KnowledgeHit, RunSummary, RunView } from "./types.js";

const BADGE_GLYPHS: Record<string, string> = {
  pending: "○",
  running: "◔",
  success: "●",
  failure: "✕",
  fixing: "⚙",
};

export class App {
  private view: RunView = emptyView();
  private stream: EventStream | null = null;
  private streamStatus = "idle";
  private resolvedLocally = new Set<string>();

  constructor(
    private readonly root: HTMLElement,
    private readonly baseUrl: string = "",
  ) {}

  async start(): Promise<void> {
    this.renderShell();
    await this.refreshRunList();
  }

  private renderShell(): void {
    // No polling: per-run data arrives only over the event stream. The run
    // list is fetched on load and on explicit refresh.
    this.root.innerHTML = `
      <header><h1>deployforge</h1><span id="stream-status"></span></header>
      <main>
        <aside>
          <h2>runs <button id="refresh-runs" title="refresh">↻</button></h2>
          <ul id="run-list"></ul>
        </aside>
        <section id="run-panel">
          <div id="run-header"><em>select a run</em></div>
          <div id="approvals"></div>
          <ol id="timeline"></ol>
          <pre id="output"></pre>
        </section>
        <section id="knowledge">
          <h2>knowledge</h2>
          <form id="search-form">
            <input id="search-box" type="text" placeholder="search past cases" />
            <button type="submit">search</button>
          </form>
          <div id="search-results"></div>
        </section>
      </main>`;
    const form = this.root.querySelector<HTMLFormElement>("#search-form")!;
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const box = this.root.querySelector<HTMLInputElement>("#search-box")!;
      void this.runSearch(box.value);
    });
    this.root
      .querySelector<HTMLButtonElement>("#refresh-runs")!
      .addEventListener("click", () => void this.refreshRunList());
  }

  private async refreshRunList(): Promise<void> {
    let runs: RunSummary[] = [];
    try {
      runs = await listRuns(this.baseUrl);
    } catch {
      return; // list refresh is best-effort; the banner covers stream loss
    }
    const list = this.root.querySelector<HTMLUListElement>("#run-list")!;
    list.innerHTML = "";
    for (const run of runs) {
      const item = document.createElement("li");
      const button = document.createElement("button");
      button.textContent = `${run.run_id} ${run.outcome ?? (run.live ? "(live)" : "")}`;
      button.addEventListener("click", () => this.subscribe(run.run_id));
      item.appendChild(button);
      list.appendChild(item);
    }
  }

  subscribe(runId: string): void {
    this.stream?.stop();
    this.view = emptyView();
    this.resolvedLocally.clear();
    this.renderRun();
    this.stream = new EventStream(this.baseUrl, runId, {
      onEvent: (event) => {
        this.view = applyEvent(this.view, event);
        this.renderRun();
      },
      onStatus: (status) => {
        this.streamStatus = status;
        this.renderStatus();
      },
    });
    void this.stream.run();
  }

  private renderStatus(): void {
    const el = this.root.querySelector<HTMLElement>("#stream-status")!;
    el.textContent = this.streamStatus === "streaming" ? "" : this.streamStatus;
    el.className = this.streamStatus === "reconnecting" ? "banner-warn" : "";
  }

  private renderRun(): void {
    const header = this.root.querySelector<HTMLElement>("#run-header")!;
    if (!this.view.runId) {
      header.innerHTML = "<em>waiting for events…</em>";
      return;
    }
    header.textContent =
      `${this.view.runId} — ${this.view.project ?? "?"} ` +
      `— ${this.view.outcome ?? "running"} ` +
      `(${this.view.knowledgeMerges} cases merged)`;

    const timeline = this.root.querySelector<HTMLOListElement>("#timeline")!;
    timeline.innerHTML = "";
    for (const step of this.view.steps) {
      const item = document.createElement("li");
      item.className = `step step-${step.status}`;
      const fixes = step.fixAttempts
        .map((f) => `<li class="fix fix-${f.outcome}">${f.origin} ${f.fixId} → ${f.outcome}</li>`)
        .join("");
      item.innerHTML =
        `<span class="badge">${BADGE_GLYPHS[step.status] ?? "?"}</span> ` +
        `<strong>${step.id}</strong> ${step.title} ` +
        `<span class="muted">[${step.status}${step.attempts > 1 ? `, attempt ${step.attempts}` : ""}]</span>` +
        (fixes ? `<ul class="fixes">${fixes}</ul>` : "");
      timeline.appendChild(item);
    }

    const output = this.root.querySelector<HTMLPreElement>("#output")!;
    output.textContent = this.view.output
      .map((line) => `[${line.stepId}:${line.stream}] ${line.text.replace(/\n$/, "")}`)
      .join("\n");
    output.scrollTop = output.scrollHeight;

    this.renderApprovals();
  }

  private renderApprovals(): void {
    const container = this.root.querySelector<HTMLElement>("#approvals")!;
    container.innerHTML = "";
    for (const approval of pendingApprovals(this.view)) {
      if (this.resolvedLocally.has(approval.approvalId)) {
        continue; // optimistic: the decision is in flight
      }
      const card = document.createElement("div");
      card.className = "approval-card";
      card.innerHTML =
        `<p>approval required for <strong>${approval.stepId}</strong> ` +
        `(${approval.reason})</p><code>${approval.command}</code>`;
      for (const decision of ["approved", "rejected"] as const) {
        const button = document.createElement("button");
        button.textContent = decision === "approved" ? "approve" : "reject";
        const fire = singleFlight(async () => {
          button.disabled = true;
          const result = await resolveApproval(
            this.baseUrl, this.view.runId, approval.approvalId, decision);
          if (result.ok || result.alreadyResolved) {
            this.resolvedLocally.add(approval.approvalId);
            this.renderApprovals();
          } else {
            button.disabled = false;
            card.insertAdjacentHTML(
              "beforeend", `<p class="banner-warn">${result.error}</p>`);
          }
        });
        button.addEventListener("click", () => void fire());
        card.appendChild(button);
      }
      container.appendChild(card);
    }
  }

  private async runSearch(query: string): Promise<void> {
    const results = this.root.querySelector<HTMLElement>("#search-results")!;
    let hits: KnowledgeHit[];
    try {
      hits = await searchKnowledge(this.baseUrl, query);
    } catch (err) {
      results.innerHTML = `<p class="banner-warn">search failed: ${String(err)}</p>`;
      return;
    }
    if (hits.length === 0) {
      results.innerHTML = "<p><em>no cases yet</em></p>";
      return;
    }
    results.innerHTML = hits
      .map(
        (hit) =>
          `<div class="case-card">` +
          `<span class="muted">${hit.similarity.toFixed(3)}</span> ` +
          `<strong>${hit.error_class}</strong> ` +
          `<span class="muted">${hit.success_ratio}</span>` +
          `<br/><code>${hit.normalized_text}</code>` +
          `<ul>${hit.remedial_steps.map((s) => `<li><code>${s}</code></li>`).join("")}</ul>` +
          `</div>`,
      )
      .join("");
  }
}
