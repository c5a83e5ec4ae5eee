/**
 * Event stream consumer: fetch-based ndjson reader with resume-on-drop.
 *
 * The server closes the response when a run finishes; anything else (a
 * network hiccup, a proxy timeout) triggers a reconnect that asks for
 * from_seq = lastSeq + 1, so no event is rendered twice and none is lost.
 */

import type { RunEvent } from "./types.js";

export type StreamStatus = "connecting" | "streaming" | "reconnecting" | "closed";

export interface StreamCallbacks {
  onEvent: (event: RunEvent) => void;
  onStatus?: (status: StreamStatus) => void;
}

export interface StreamOptions {
  fetchImpl?: typeof fetch;
  retryDelayMs?: number;
  maxRetries?: number;
}

/** Split an incoming byte stream into complete lines; carry partials over. */
export class LineSplitter {
  private buffer = "";

  push(chunk: string): string[] {
    this.buffer += chunk;
    const parts = this.buffer.split("\n");
    this.buffer = parts.pop() ?? "";
    return parts.filter((line) => line.trim().length > 0);
  }

  flush(): string[] {
    const rest = this.buffer.trim();
    this.buffer = "";
    return rest ? [rest] : [];
  }
}

export class EventStream {
  private lastSeq = 0;
  private stopped = false;
  private sawRunFinished = false;

  constructor(
    private readonly baseUrl: string,
    private readonly runId: string,
    private readonly callbacks: StreamCallbacks,
    private readonly options: StreamOptions = {},
  ) {}

  get resumeFrom(): number {
    return this.lastSeq + 1;
  }

  stop(): void {
    this.stopped = true;
  }

  async run(): Promise<void> {
    const fetchImpl = this.options.fetchImpl ?? fetch;
    const retryDelay = this.options.retryDelayMs ?? 1000;
    const maxRetries = this.options.maxRetries ?? 20;
    let failures = 0;

    this.callbacks.onStatus?.("connecting");
    while (!this.stopped && !this.sawRunFinished && failures <= maxRetries) {
      const url = `${this.baseUrl}/runs/${this.runId}/events?from_seq=${this.resumeFrom}`;
      try {
        const response = await fetchImpl(url);
        if (!response.ok || !response.body) {
          throw new Error(`stream request failed: ${response.status}`);
        }
        this.callbacks.onStatus?.("streaming");
        await this.consume(response.body);
        failures = 0;
        if (this.sawRunFinished) {
          break;
        }
        // Clean close without run_finished: the server saw the run die or
        // we raced journal rotation; resume from where we stopped.
        this.callbacks.onStatus?.("reconnecting");
        await sleep(retryDelay);
      } catch {
        failures += 1;
        this.callbacks.onStatus?.("reconnecting");
        await sleep(retryDelay * Math.min(failures, 5));
      }
    }
    this.callbacks.onStatus?.("closed");
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    const splitter = new LineSplitter();
    for (;;) {
      const { done, value } = await reader.read();
      const lines = done
        ? splitter.flush()
        : splitter.push(decoder.decode(value, { stream: true }));
      for (const line of lines) {
        this.dispatch(line);
      }
      if (done) {
        return;
      }
      if (this.stopped) {
        await reader.cancel();
        return;
      }
    }
  }

  private dispatch(line: string): void {
    let event: RunEvent;
    try {
      event = JSON.parse(line) as RunEvent;
    } catch {
      return; // tolerate a torn line; the reconnect will re-deliver it
    }
    if (typeof event.seq !== "number" || event.seq <= this.lastSeq) {
      return; // duplicate from reconnect overlap
    }
    this.lastSeq = event.seq;
    if (event.kind === "run_finished") {
      this.sawRunFinished = true;
    }
    this.callbacks.onEvent(event);
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
