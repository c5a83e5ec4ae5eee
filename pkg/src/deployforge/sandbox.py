"""Isolated execution environment: workspaces, step execution, probing.

Isolation is directory-level: a fresh workspace per run, an explicit
environment-variable allowlist, and HOME redirected into the workspace.
Container backends can sit behind the same interface but are not required.
"""

from __future__ import annotations

import math
import os
import re
import shutil
import signal
import socket
import subprocess
import threading
import time
import urllib.request
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .errors import RunIdCollision, SandboxRootUnwritable, SandboxViolation
from .guideline import CheckSpec, Requirement, Step, constraint_satisfied

RUN_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")

# Env-var names containing any of these fragments are treated as secrets:
# they are kept out of child environments unless explicitly injected, and
# their values are scrubbed from captured output.
SECRET_NAME_FRAGMENTS = ("KEY", "TOKEN", "SECRET", "PASSWORD", "CREDENTIAL")

# Tail kept in ExecutionResult per stream; full streams go to log files.
STREAM_TAIL_BYTES = 64 * 1024

LOG_DIR = ".deployforge/logs"

_PROBE_TABLE_PATH = Path(__file__).parent / "config" / "probe_commands.yaml"
_VERSION_RE = re.compile(r"(\d+(?:\.\d+)+)")


def is_secret_name(name: str) -> bool:
    upper = name.upper()
    return any(fragment in upper for fragment in SECRET_NAME_FRAGMENTS)


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ExecutionEnvironment:
    workspace_root: str
    env_vars: dict[str, str]
    path_entries: list[str]
    network_allowed: bool

    def child_env(self) -> dict[str, str]:
        env = dict(self.env_vars)
        env["PATH"] = os.pathsep.join(self.path_entries)
        return env

    def secret_values(self) -> list[str]:
        return [v for k, v in self.env_vars.items() if is_secret_name(k) and v]


@dataclass(frozen=True)
class EnvironmentSnapshot:
    captured_at: str
    tool_versions: dict[str, str]
    free_disk_gb: float
    free_mem_gb: float
    gpu_present: bool


@dataclass(frozen=True)
class ExecutionResult:
    step_id: str
    status: str  # success | failure | timeout
    exit_code: int | None
    stdout: str
    stderr: str
    duration_ms: int
    env_snapshot_after: EnvironmentSnapshot
    failed_check: str | None = None


@dataclass(frozen=True)
class ChangeNote:
    field: str
    before: str
    after: str

    @property
    def text(self) -> str:
        return f"{self.field}: {self.before} → {self.after}"


def create_sandbox(
    run_id: str, network_allowed: bool, sandbox_root: str | os.PathLike
) -> ExecutionEnvironment:
    """Create a fresh, empty workspace for one run under sandbox_root."""
    if not RUN_ID_RE.match(run_id):
        raise SandboxViolation(f"run id is not filesystem-safe: {run_id!r}")
    root = Path(sandbox_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SandboxRootUnwritable(f"cannot create sandbox root {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise SandboxRootUnwritable(f"sandbox root not writable: {root}")

    workspace = root / run_id
    try:
        workspace.mkdir()
    except FileExistsError:
        raise RunIdCollision(f"workspace already exists for run id {run_id!r}") from None

    (workspace / LOG_DIR).mkdir(parents=True)
    env_vars = {
        "HOME": str(workspace),
        "LANG": os.environ.get("LANG", "C.UTF-8"),
    }
    path_entries = os.environ.get("PATH", "/usr/bin:/bin").split(os.pathsep)
    return ExecutionEnvironment(
        workspace_root=str(workspace),
        env_vars=env_vars,
        path_entries=path_entries,
        network_allowed=network_allowed,
    )


def resolve_in_workspace(env: ExecutionEnvironment, relative: str | None) -> Path:
    """Resolve a workspace-relative path, refusing escapes."""
    root = Path(env.workspace_root).resolve()
    if relative is None or relative == "":
        return root
    candidate = (root / relative).resolve()
    if candidate != root and root not in candidate.parents:
        raise SandboxViolation(f"path escapes the workspace: {relative!r}")
    return candidate


def redact(text: str, secret_values: list[str]) -> str:
    for value in secret_values:
        if value:
            text = text.replace(value, "<redacted>")
    return text


def _tail(text: str, limit: int = STREAM_TAIL_BYTES) -> str:
    encoded = text.encode("utf-8", errors="replace")
    if len(encoded) <= limit:
        return text
    return encoded[-limit:].decode("utf-8", errors="replace")


class _StreamReader(threading.Thread):
    """Drain one pipe line-by-line, forwarding redacted lines as they land."""

    def __init__(self, pipe, sink, on_line):
        super().__init__(daemon=True)
        self.pipe = pipe
        self.sink = sink
        self.on_line = on_line

    def run(self) -> None:
        try:
            for raw in iter(self.pipe.readline, b""):
                line = raw.decode("utf-8", errors="replace")
                self.sink.append(line)
                if self.on_line:
                    self.on_line(line)
        finally:
            self.pipe.close()


def evaluate_check(
    check: CheckSpec | None,
    *,
    exit_code: int | None,
    stdout: str,
    env: ExecutionEnvironment,
    ran_process: bool,
) -> str | None:
    """Return the name of the first failing check clause, or None if all pass.

    Evaluation order: exit_code, stdout_matches, file_exists, port_open.
    When no check is declared, exit code 0 is the success criterion.
    """
    if check is None:
        if ran_process and exit_code != 0:
            return "exit_code"
        return None
    if ran_process:
        expected = check.exit_code if check.exit_code is not None else 0
        if exit_code != expected:
            return "exit_code"
        if check.stdout_matches is not None and not re.search(check.stdout_matches, stdout):
            return "stdout_matches"
    if check.file_exists is not None:
        if not resolve_in_workspace(env, check.file_exists).exists():
            return "file_exists"
    if check.port_open is not None:
        try:
            with socket.create_connection(("127.0.0.1", check.port_open), timeout=1.0):
                pass
        except OSError:
            return "port_open"
    return None


def _finish(
    env: ExecutionEnvironment,
    step: Step,
    *,
    status: str,
    exit_code: int | None,
    stdout: str,
    stderr: str,
    started: float,
    ran_process: bool,
    requirements: list[Requirement] | None = None,
) -> ExecutionResult:
    secrets = env.secret_values()
    stdout = redact(stdout, secrets)
    stderr = redact(stderr, secrets)
    failed_check = None
    if status == "derive":
        failed_check = evaluate_check(
            step.check, exit_code=exit_code, stdout=stdout, env=env, ran_process=ran_process
        )
        if step.kind == "probe" and failed_check == "exit_code" and step.check is None:
            # Probes are informational: a nonzero exit is data, not a failure.
            failed_check = None
        status = "failure" if failed_check else "success"
    duration_ms = int(math.ceil((time.monotonic() - started) * 1000))

    log_dir = Path(env.workspace_root) / LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)
    (log_dir / f"{step.id}.out").write_text(stdout, encoding="utf-8")
    (log_dir / f"{step.id}.err").write_text(stderr, encoding="utf-8")

    return ExecutionResult(
        step_id=step.id,
        status=status,
        exit_code=exit_code,
        stdout=_tail(stdout),
        stderr=_tail(stderr),
        duration_ms=duration_ms,
        env_snapshot_after=probe_environment(env, requirements or []),
        failed_check=failed_check,
    )


def execute_step(
    env: ExecutionEnvironment,
    step: Step,
    on_output=None,
    requirements: list[Requirement] | None = None,
) -> ExecutionResult:
    """Run one fully rendered step inside the workspace.

    on_output, when given, is called as on_output(stream, line) for every
    captured line, already redacted. A step that exceeds its timeout has
    its whole process group killed and reports status "timeout".
    """
    if re.search(r"\{\{[A-Za-z_][A-Za-z0-9_]*\}\}", step.run + (step.working_dir or "") + (step.path or "")):
        raise ValueError(f"step {step.id!r} still contains template markers; render it first")

    cwd = resolve_in_workspace(env, step.working_dir)  # raises SandboxViolation before any side effect
    started = time.monotonic()
    secrets = env.secret_values()

    if step.kind == "file_write":
        target = resolve_in_workspace(env, step.path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(step.run, encoding="utf-8")
        return _finish(env, step, status="derive", exit_code=None, stdout="", stderr="",
                       started=started, ran_process=False, requirements=requirements)

    if step.kind == "download":
        return _download(env, step, started, requirements)

    if step.kind == "verify" and not step.run.strip():
        return _finish(env, step, status="derive", exit_code=None, stdout="", stderr="",
                       started=started, ran_process=False, requirements=requirements)

    try:
        proc = subprocess.Popen(
            ["/bin/sh", "-c", step.run],
            cwd=str(cwd),
            env=env.child_env(),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except OSError as exc:
        # Binary (the shell itself) not found or not executable: degrade to a
        # failed result with synthesized stderr rather than raising.
        return _finish(env, step, status="failure", exit_code=None, stdout="",
                       stderr=f"spawn error: {exc}\n", started=started,
                       ran_process=True, requirements=requirements)

    out_lines: list[str] = []
    err_lines: list[str] = []

    def forward(stream_name):
        def cb(line: str) -> None:
            if on_output:
                on_output(stream_name, redact(line, secrets))
        return cb

    readers = [
        _StreamReader(proc.stdout, out_lines, forward("stdout")),
        _StreamReader(proc.stderr, err_lines, forward("stderr")),
    ]
    for r in readers:
        r.start()

    timed_out = False
    try:
        proc.wait(timeout=step.timeout_s)
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_tree(proc)
    for r in readers:
        r.join(timeout=5)

    stdout = "".join(out_lines)
    stderr = "".join(err_lines)
    if timed_out:
        elapsed_ms = int(math.ceil((time.monotonic() - started) * 1000))
        result = _finish(env, step, status="timeout", exit_code=None, stdout=stdout,
                         stderr=stderr, started=started, ran_process=True,
                         requirements=requirements)
        # _finish recomputes duration; keep the invariant >= timeout_s * 1000.
        return replace(result, duration_ms=max(elapsed_ms, step.timeout_s * 1000,
                                               result.duration_ms))
    return _finish(env, step, status="derive", exit_code=proc.returncode, stdout=stdout,
                   stderr=stderr, started=started, ran_process=True, requirements=requirements)


def _kill_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        pass


def _download(
    env: ExecutionEnvironment, step: Step, started: float, requirements
) -> ExecutionResult:
    url = step.run.strip()
    dest_rel = step.path or url.rsplit("/", 1)[-1]
    dest = resolve_in_workspace(env, dest_rel)
    if not env.network_allowed and not url.startswith("file://"):
        return _finish(env, step, status="failure", exit_code=None, stdout="",
                       stderr=f"network disabled: cannot download {url}\n",
                       started=started, ran_process=False, requirements=requirements)
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        with urllib.request.urlopen(url, timeout=step.timeout_s) as resp:
            dest.write_bytes(resp.read())
    except Exception as exc:  # noqa: BLE001 - all download failures become step failures
        return _finish(env, step, status="failure", exit_code=None, stdout="",
                       stderr=f"download failed: {exc}\n", started=started,
                       ran_process=False, requirements=requirements)
    return _finish(env, step, status="derive", exit_code=None,
                   stdout=f"downloaded {url} -> {dest_rel}\n", stderr="",
                   started=started, ran_process=False, requirements=requirements)


# --- probing -----------------------------------------------------------------

_default_probe_table: dict[str, dict] | None = None


def load_probe_table(path: str | os.PathLike | None = None) -> dict[str, dict]:
    global _default_probe_table
    if path is None and _default_probe_table is not None:
        return _default_probe_table
    table_path = Path(path) if path else _PROBE_TABLE_PATH
    data = yaml.safe_load(table_path.read_text(encoding="utf-8")) or {}
    table = data.get("probes", {})
    if path is None:
        _default_probe_table = table
    return table


def _probe_version(name: str, table: dict[str, dict]) -> str:
    spec = table.get(name, {"command": f"{name} --version"})
    command = spec.get("command", f"{name} --version")
    pattern = spec.get("pattern")
    try:
        proc = subprocess.run(
            ["/bin/sh", "-c", command],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return "absent"
    if proc.returncode != 0 and not proc.stdout and not proc.stderr:
        return "absent"
    first_line = ((proc.stdout or proc.stderr).strip().splitlines() or [""])[0]
    if proc.returncode != 0 and "not found" in (proc.stderr or "").lower():
        return "absent"
    if pattern:
        m = re.search(pattern, first_line)
        if m:
            return m.group(1) if m.groups() else m.group(0)
    m = _VERSION_RE.search(first_line)
    if m:
        return m.group(1)
    return "absent" if proc.returncode != 0 else (first_line or "absent")


def _free_disk_gb(path: str) -> float:
    try:
        return shutil.disk_usage(path).free / 1e9
    except OSError:
        return 0.0


def _free_mem_gb() -> float:
    try:
        with open("/proc/meminfo", encoding="ascii") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024 / 1e9
    except (OSError, ValueError, IndexError):
        pass
    return 0.0


def probe_environment(
    env: ExecutionEnvironment,
    requirements: list[Requirement],
    probe_table: dict[str, dict] | None = None,
) -> EnvironmentSnapshot:
    """Capture tool versions for each requirement plus resource headroom."""
    table = probe_table if probe_table is not None else load_probe_table()
    versions = {req.name: _probe_version(req.name, table) for req in requirements}
    return EnvironmentSnapshot(
        captured_at=now_iso(),
        tool_versions=versions,
        free_disk_gb=round(_free_disk_gb(env.workspace_root), 3),
        free_mem_gb=round(_free_mem_gb(), 3),
        gpu_present=shutil.which("nvidia-smi") is not None,
    )


def requirement_satisfied(req: Requirement, snapshot: EnvironmentSnapshot) -> bool:
    """Evaluate one requirement against a snapshot.

    Version constraints compare against the probed tool version; min:N
    quantity constraints compare against resource headroom for the special
    names disk_gb and mem_gb.
    """
    if req.name == "disk_gb":
        return constraint_satisfied(req.constraint, str(snapshot.free_disk_gb))
    if req.name == "mem_gb":
        return constraint_satisfied(req.constraint, str(snapshot.free_mem_gb))
    version = snapshot.tool_versions.get(req.name, "absent")
    if version == "absent":
        return False
    return constraint_satisfied(req.constraint, version)


def snapshot_diff(before: EnvironmentSnapshot, after: EnvironmentSnapshot) -> list[ChangeNote]:
    """One note per changed tool version or >5% resource swing."""
    notes: list[ChangeNote] = []
    names = sorted(set(before.tool_versions) | set(after.tool_versions))
    for name in names:
        b = before.tool_versions.get(name, "absent")
        a = after.tool_versions.get(name, "absent")
        if b != a:
            notes.append(ChangeNote(field=name, before=b, after=a))
    for field_name in ("free_disk_gb", "free_mem_gb"):
        b = getattr(before, field_name)
        a = getattr(after, field_name)
        base = max(abs(b), 1e-9)
        if abs(a - b) / base > 0.05:
            notes.append(ChangeNote(field=field_name, before=str(b), after=str(a)))
    if before.gpu_present != after.gpu_present:
        notes.append(ChangeNote(field="gpu_present", before=str(before.gpu_present),
                                after=str(after.gpu_present)))
    return notes


# --- serialization -----------------------------------------------------------

def snapshot_to_dict(s: EnvironmentSnapshot) -> dict:
    return {
        "captured_at": s.captured_at,
        "tool_versions": dict(s.tool_versions),
        "free_disk_gb": s.free_disk_gb,
        "free_mem_gb": s.free_mem_gb,
        "gpu_present": s.gpu_present,
    }


def snapshot_from_dict(raw: dict) -> EnvironmentSnapshot:
    return EnvironmentSnapshot(
        captured_at=raw["captured_at"],
        tool_versions=dict(raw["tool_versions"]),
        free_disk_gb=raw["free_disk_gb"],
        free_mem_gb=raw["free_mem_gb"],
        gpu_present=raw["gpu_present"],
    )


def result_to_dict(r: ExecutionResult) -> dict:
    return {
        "step_id": r.step_id,
        "status": r.status,
        "exit_code": r.exit_code,
        "stdout": r.stdout,
        "stderr": r.stderr,
        "duration_ms": r.duration_ms,
        "env_snapshot_after": snapshot_to_dict(r.env_snapshot_after),
        "failed_check": r.failed_check,
    }


def result_from_dict(raw: dict) -> ExecutionResult:
    return ExecutionResult(
        step_id=raw["step_id"],
        status=raw["status"],
        exit_code=raw["exit_code"],
        stdout=raw["stdout"],
        stderr=raw["stderr"],
        duration_ms=raw["duration_ms"],
        env_snapshot_after=snapshot_from_dict(raw["env_snapshot_after"]),
        failed_check=raw.get("failed_check"),
    )
