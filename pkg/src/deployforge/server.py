"""Local HTTP control surface: run listing, event streaming, approvals.

Plain chunk-free streaming over close-delimited HTTP keeps the protocol
consumable by curl, fetch() and the dashboard alike: one JSON event per
line, connection closes when the run is over.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .debugger import RetryBudget
from .errors import DeployForgeError
from .guideline import parse_guideline
from .knowledge import open_repository
from .llm import LlmGateway
from .runner import ApprovalBroker, journal_path, run_deployment, run_dir
from .sandbox import create_sandbox


@dataclass
class ServerConfig:
    state_dir: Path
    sandbox_root: Path
    repo_path: Path
    listen_addr: str = "127.0.0.1:8321"
    network_allowed: bool = True
    llm_mode: str = "replay"
    transcript_path: Path | None = None
    assets_dir: Path | None = None
    per_step_budget: int = 5
    global_budget: int = 25
    approval_timeout_s: float = 3600.0

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        return host or "127.0.0.1", int(port)


@dataclass
class RunHandle:
    run_id: str
    broker: ApprovalBroker
    thread: threading.Thread
    outcome: str | None = None
    error: str | None = None


@dataclass
class ServerState:
    config: ServerConfig
    runs: dict[str, RunHandle] = field(default_factory=dict)
    _counter: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def new_run_id(self) -> str:
        with self._lock:
            self._counter += 1
            return f"run-{int(time.time())}-{self._counter:04d}"

    def start_run(self, guideline_text: str, bindings: dict[str, str]) -> str:
        guideline = parse_guideline(guideline_text)
        run_id = self.new_run_id()
        env = create_sandbox(run_id, self.config.network_allowed, self.config.sandbox_root)
        repo = open_repository(self.config.repo_path)
        broker = ApprovalBroker()
        llm = LlmGateway(mode=self.config.llm_mode,
                         transcript_path=self.config.transcript_path)
        budget = RetryBudget(per_step=self.config.per_step_budget,
                             global_limit=self.config.global_budget)
        handle = RunHandle(run_id=run_id, broker=broker, thread=None)  # type: ignore[arg-type]

        def worker() -> None:
            try:
                transcript = run_deployment(
                    guideline, env, repo, budget,
                    state_dir=self.config.state_dir, llm=llm, bindings=bindings,
                    approvals=broker, approval_timeout_s=self.config.approval_timeout_s,
                )
                handle.outcome = transcript.outcome
            except Exception as exc:  # noqa: BLE001 - worker must not die silently
                handle.error = str(exc)
                handle.outcome = "aborted"

        thread = threading.Thread(target=worker, daemon=True, name=f"run-{run_id}")
        handle.thread = thread
        self.runs[run_id] = handle
        thread.start()
        return run_id

    def run_live(self, run_id: str) -> bool:
        handle = self.runs.get(run_id)
        return handle is not None and handle.thread.is_alive()


def _run_summary(state: ServerState, run_id: str) -> dict:
    jpath = journal_path(state.config.state_dir, run_id)
    summary = {"run_id": run_id, "outcome": None, "events": 0, "project": None}
    if jpath.exists():
        last = None
        count = 0
        with jpath.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    count += 1
                    last = line
        summary["events"] = count
        if last:
            event = json.loads(last)
            if event["kind"] == "run_finished":
                summary["outcome"] = event["payload"].get("outcome")
        with jpath.open(encoding="utf-8") as fh:
            first = fh.readline()
        if first.strip():
            event = json.loads(first)
            if event["kind"] == "run_started":
                summary["project"] = event["payload"]["guideline"].get("project_name")
    summary["live"] = state.run_live(run_id)
    return summary


class ControlHandler(BaseHTTPRequestHandler):
    """Routes for the dashboard and for scripting; state hangs off the server."""

    server_version = "deployforge"
    protocol_version = "HTTP/1.0"  # close-delimited streaming

    @property
    def state(self) -> ServerState:
        return self.server.state  # type: ignore[attr-defined]

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        pass  # request logging is the caller's business, not stderr's

    # -- helpers -----------------------------------------------------------

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    # -- GET ----------------------------------------------------------------

    def do_GET(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if url.path == "/runs":
                self._list_runs()
            elif len(parts) == 3 and parts[0] == "runs" and parts[2] == "events":
                self._stream_events(parts[1], url)
            elif url.path == "/knowledge/search":
                self._knowledge_search(url)
            else:
                self._serve_static(url.path)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def _list_runs(self) -> None:
        runs_root = Path(self.state.config.state_dir) / "runs"
        run_ids = sorted(p.name for p in runs_root.iterdir() if p.is_dir()) if runs_root.is_dir() else []
        self._send_json(200, {"runs": [_run_summary(self.state, rid) for rid in run_ids]})

    def _stream_events(self, run_id: str, url) -> None:
        jpath = journal_path(self.state.config.state_dir, run_id)
        if not jpath.exists():
            self._send_json(404, {"error": f"unknown run: {run_id}"})
            return
        query = parse_qs(url.query)
        from_seq = int(query.get("from_seq", ["0"])[0])

        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()

        with jpath.open(encoding="utf-8") as fh:
            while True:
                pos = fh.tell()
                line = fh.readline()
                if line.endswith("\n"):
                    event = json.loads(line)
                    if event["seq"] >= from_seq:
                        self.wfile.write(line.encode("utf-8"))
                        self.wfile.flush()
                else:
                    # EOF (or a half-written line): follow while the run is
                    # live, close once it is not.
                    fh.seek(pos)
                    if not self.state.run_live(run_id):
                        break
                    time.sleep(0.05)

    def _knowledge_search(self, url) -> None:
        query = parse_qs(url.query)
        text = (query.get("q") or [""])[0]
        k = int((query.get("k") or ["10"])[0])
        repo = open_repository(self.state.config.repo_path)
        hits = repo.retrieve_semantic(text, k=max(k, 1), min_similarity=0.0)
        self._send_json(200, {
            "query": text,
            "results": [
                {
                    "case_id": case.case_id,
                    "similarity": round(sim, 6),
                    "error_class": case.error_class,
                    "digest": case.fingerprint.digest,
                    "normalized_text": case.fingerprint.normalized_text,
                    "success_ratio": f"{case.successes}/{case.uses}",
                    "remedial_steps": [s.run for s in case.fix.remedial_steps],
                }
                for case, sim in hits
            ],
        })

    def _serve_static(self, path: str) -> None:
        assets = self.state.config.assets_dir
        if assets is None or not Path(assets).is_dir():
            if path in ("/", "/index.html"):
                body = (
                    b"<html><body><h1>deployforge</h1>"
                    b"<p>No dashboard assets built. API: GET /runs, "
                    b"GET /runs/&lt;id&gt;/events, POST /runs, "
                    b"POST /runs/&lt;id&gt;/approvals/&lt;approval_id&gt;, "
                    b"GET /knowledge/search?q=...</p></body></html>"
                )
                self.send_response(200)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            else:
                self._send_json(404, {"error": "not found"})
            return
        rel = path.lstrip("/") or "index.html"
        target = (Path(assets) / rel).resolve()
        if Path(assets).resolve() not in target.parents and target != Path(assets).resolve():
            self._send_json(404, {"error": "not found"})
            return
        if not target.is_file():
            target = Path(assets) / "index.html"
            if not target.is_file():
                self._send_json(404, {"error": "not found"})
                return
        content_types = {
            ".html": "text/html", ".js": "application/javascript",
            ".css": "text/css", ".map": "application/json", ".json": "application/json",
        }
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", content_types.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    # -- POST ----------------------------------------------------------------

    def do_POST(self) -> None:  # noqa: N802
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        try:
            if parts == ["runs"]:
                self._start_run()
            elif len(parts) == 4 and parts[0] == "runs" and parts[2] == "approvals":
                self._resolve_approval(parts[1], parts[3])
            else:
                self._send_json(404, {"error": "not found"})
        except (BrokenPipeError, ConnectionResetError):
            pass

    def _start_run(self) -> None:
        body = self._read_body()
        guideline_text = body.decode("utf-8", errors="replace")
        bindings: dict[str, str] = {}
        try:
            parsed = json.loads(guideline_text)
            if isinstance(parsed, dict) and "guideline" in parsed:
                guideline_text = parsed["guideline"]
                bindings = dict(parsed.get("bindings") or {})
        except json.JSONDecodeError:
            pass  # raw YAML body
        try:
            run_id = self.state.start_run(guideline_text, bindings)
        except DeployForgeError as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(200, {"run_id": run_id})

    def _resolve_approval(self, run_id: str, approval_id: str) -> None:
        handle = self.state.runs.get(run_id)
        if handle is None:
            self._send_json(404, {"error": f"unknown run: {run_id}"})
            return
        try:
            payload = json.loads(self._read_body().decode("utf-8"))
            decision = payload["decision"]
            if decision not in ("approved", "rejected"):
                raise ValueError(decision)
        except (json.JSONDecodeError, KeyError, ValueError, UnicodeDecodeError):
            self._send_json(400, {"error": 'body must be {"decision": "approved"|"rejected"}'})
            return
        try:
            request = handle.broker.resolve(approval_id, decision)
        except KeyError:
            self._send_json(404, {"error": f"unknown approval: {approval_id}"})
            return
        except ValueError as exc:
            self._send_json(409, {"error": str(exc)})
            return
        self._send_json(200, {"approval_id": request.approval_id, "state": request.state})


class ControlServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: ServerConfig):
        self.state = ServerState(config=config)
        super().__init__(config.host_port(), ControlHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_forever(config: ServerConfig) -> None:
    server = ControlServer(config)
    host, port = server.server_address[:2]
    print(f"deployforge control surface on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
