"""Workspace isolation, step execution, probing, snapshot diffs."""

from __future__ import annotations

import hashlib
import os
import subprocess
import time
from pathlib import Path

import pytest

from deployforge.errors import RunIdCollision, SandboxViolation
from deployforge.guideline import CheckSpec, Requirement, Step
from deployforge.sandbox import (
    STREAM_TAIL_BYTES,
    EnvironmentSnapshot,
    create_sandbox,
    execute_step,
    probe_environment,
    requirement_satisfied,
    snapshot_diff,
)


@pytest.fixture()
def env(tmp_path):
    return create_sandbox("run1", False, tmp_path / "sb")


def test_create_sandbox_fresh_workspace(env):
    workspace = Path(env.workspace_root)
    assert workspace.is_dir()
    assert env.env_vars["HOME"] == str(workspace)
    # Only the log scaffolding exists in a fresh workspace.
    assert [p.name for p in workspace.iterdir()] == [".deployforge"]


def test_create_sandbox_run_id_collision(tmp_path):
    create_sandbox("dup", False, tmp_path / "sb")
    with pytest.raises(RunIdCollision):
        create_sandbox("dup", True, tmp_path / "sb")


@pytest.mark.parametrize("bad_id", ["../evil", "a b", "x/y", "", "run$1"])
def test_create_sandbox_rejects_unsafe_ids(tmp_path, bad_id):
    with pytest.raises(SandboxViolation):
        create_sandbox(bad_id, False, tmp_path / "sb")


def test_echo_with_stdout_check_succeeds(env):
    step = Step(id="s1", run="echo ok", check=CheckSpec(stdout_matches="ok"))
    result = execute_step(env, step)
    assert result.status == "success"
    assert result.exit_code == 0
    assert "ok" in result.stdout


def test_nonzero_exit_is_failure(env):
    result = execute_step(env, Step(id="s1", run="exit 3"))
    assert result.status == "failure"
    assert result.exit_code == 3
    assert result.failed_check == "exit_code"


def test_check_failure_names_first_failing_clause(env):
    step = Step(id="s1", run="echo started", check=CheckSpec(stdout_matches="READY"))
    result = execute_step(env, step)
    assert result.status == "failure"
    assert result.failed_check == "stdout_matches"


def test_timeout_kills_process_tree(env):
    marker = "sleepmarker-deployforge-test"
    step = Step(id="s1", run=f"sleep 5 # {marker}", timeout_s=1)
    started = time.monotonic()
    result = execute_step(env, step)
    elapsed = time.monotonic() - started
    assert result.status == "timeout"
    assert result.duration_ms >= 1000
    assert elapsed < 6  # liveness: returned within timeout + 5 s
    # Process-table inspection: nothing with our marker survives.
    time.sleep(0.1)
    survivors = []
    for pid_dir in Path("/proc").iterdir():
        if not pid_dir.name.isdigit():
            continue
        try:
            cmdline = (pid_dir / "cmdline").read_bytes().decode(errors="replace")
        except OSError:
            continue
        if marker in cmdline and "pytest" not in cmdline:
            survivors.append(cmdline)
    assert survivors == []


def test_missing_binary_becomes_failure_result(env):
    result = execute_step(env, Step(id="s1", run="definitely-missing-binary-xyz --flag"))
    assert result.status == "failure"
    assert result.exit_code not in (0, None)


def test_working_dir_escape_is_refused_before_running(env):
    step = Step(id="s1", run="echo never", working_dir="../../outside")
    with pytest.raises(SandboxViolation):
        execute_step(env, step)
    assert not (Path(env.workspace_root) / ".deployforge/logs/s1.out").exists()


def test_unrendered_step_is_rejected(env):
    with pytest.raises(ValueError):
        execute_step(env, Step(id="s1", run="echo {{var}}"))


def test_working_dir_is_honored(env):
    (Path(env.workspace_root) / "inner").mkdir()
    step = Step(id="s1", run="pwd", working_dir="inner")
    result = execute_step(env, step)
    assert result.stdout.strip().endswith("/inner")


def test_file_write_kind(env):
    step = Step(id="w1", kind="file_write", path="cfg/app.ini", run="[app]\nkey=1\n",
                check=CheckSpec(file_exists="cfg/app.ini"))
    result = execute_step(env, step)
    assert result.status == "success"
    assert (Path(env.workspace_root) / "cfg/app.ini").read_text() == "[app]\nkey=1\n"


def test_verify_without_run_checks_files(env):
    missing = execute_step(env, Step(id="v1", kind="verify", check=CheckSpec(file_exists="x")))
    assert missing.status == "failure"
    assert missing.failed_check == "file_exists"
    (Path(env.workspace_root) / "x").write_text("ok")
    present = execute_step(env, Step(id="v2", kind="verify", check=CheckSpec(file_exists="x")))
    assert present.status == "success"


def test_probe_kind_ignores_exit_code(env):
    result = execute_step(env, Step(id="p1", kind="probe", run="exit 7"))
    assert result.status == "success"
    assert result.exit_code == 7


def test_download_file_url(env, tmp_path):
    src = tmp_path / "payload.txt"
    src.write_text("weights")
    step = Step(id="d1", kind="download", run=f"file://{src}", path="models/payload.txt")
    result = execute_step(env, step)
    assert result.status == "success"
    assert (Path(env.workspace_root) / "models/payload.txt").read_text() == "weights"


def test_download_without_network_fails_cleanly(env):
    step = Step(id="d1", kind="download", run="https://example.com/model.bin", path="m.bin")
    result = execute_step(env, step)
    assert result.status == "failure"
    assert "network disabled" in result.stderr


def test_port_open_check(env):
    import socket
    import threading

    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]
    accepting = threading.Thread(target=lambda: server.accept(), daemon=True)
    accepting.start()
    try:
        ok = execute_step(env, Step(id="v", run="true", check=CheckSpec(port_open=port)))
        assert ok.status == "success"
    finally:
        server.close()
    closed = execute_step(env, Step(id="v2", run="true", check=CheckSpec(port_open=port)))
    assert closed.status == "failure"
    assert closed.failed_check == "port_open"


def test_isolation_tripwire(env, tmp_path):
    tripwire = tmp_path / "tripwire"
    tripwire.mkdir()
    (tripwire / "precious.txt").write_text("do not touch")

    def digest_dir(d: Path) -> str:
        h = hashlib.blake2s()
        for p in sorted(d.rglob("*")):
            h.update(p.name.encode())
            if p.is_file():
                h.update(p.read_bytes())
        return h.hexdigest()

    before = digest_dir(tripwire)
    execute_step(env, Step(id="s1", run="mkdir -p data && echo x > data/file && echo $HOME"))
    assert digest_dir(tripwire) == before
    assert (Path(env.workspace_root) / "data/file").exists()


def test_secret_redaction_in_streams_and_logs(env):
    env.env_vars["DEMO_API_KEY"] = "ultrasecret-value-123"
    chunks = []
    step = Step(id="s1", run="echo token is $DEMO_API_KEY")
    result = execute_step(env, step, on_output=lambda stream, line: chunks.append(line))
    assert "ultrasecret-value-123" not in result.stdout
    assert "<redacted>" in result.stdout
    assert all("ultrasecret-value-123" not in c for c in chunks)
    log = (Path(env.workspace_root) / ".deployforge/logs/s1.out").read_text()
    assert "ultrasecret-value-123" not in log


def test_child_env_is_allowlist_only(env):
    os.environ["DEPLOYFORGE_TEST_LEAKY"] = "leak"
    try:
        result = execute_step(env, Step(id="s1", run="env"))
    finally:
        del os.environ["DEPLOYFORGE_TEST_LEAKY"]
    assert "DEPLOYFORGE_TEST_LEAKY" not in result.stdout
    assert f"HOME={env.workspace_root}" in result.stdout


def test_output_tail_truncation_with_full_logs(env):
    # 100 KiB of output: result keeps the last 64 KiB, log file keeps all.
    step = Step(id="big", run="yes 0123456789abcdef | head -c 102400")
    result = execute_step(env, step)
    assert len(result.stdout.encode()) <= STREAM_TAIL_BYTES
    log = Path(env.workspace_root) / ".deployforge/logs/big.out"
    assert log.stat().st_size >= 102400


def test_output_chunks_are_lines(env):
    chunks = []
    execute_step(env, Step(id="s1", run="printf 'a\\nb\\nc\\n'"),
                 on_output=lambda stream, line: chunks.append((stream, line)))
    assert chunks == [("stdout", "a\n"), ("stdout", "b\n"), ("stdout", "c\n")]


# --- probing -------------------------------------------------------------------

def test_probe_environment_empty_requirements(env):
    snapshot = probe_environment(env, [])
    assert snapshot.tool_versions == {}
    assert snapshot.free_disk_gb >= 0
    assert snapshot.free_mem_gb >= 0


def test_probe_environment_absent_tool(env):
    snapshot = probe_environment(env, [Requirement("definitely-not-installed-xyz", ">= 1.0")])
    assert snapshot.tool_versions["definitely-not-installed-xyz"] == "absent"


def test_probe_environment_python_matches_host(env):
    # Oracle: ask the interpreter directly what version it is.
    out = subprocess.run(["python3", "--version"], capture_output=True, text=True)
    host_version = (out.stdout or out.stderr).split()[1]
    req = Requirement("python", ">= 3.9")
    snapshot = probe_environment(env, [req])
    assert snapshot.tool_versions["python"] == host_version
    assert requirement_satisfied(req, snapshot) == (
        tuple(map(int, host_version.split(".")[:2])) >= (3, 9)
    )


def test_requirement_satisfied_absent_tool(env):
    snapshot = probe_environment(env, [])
    assert requirement_satisfied(Requirement("ghost", ">= 1.0"), snapshot) is False


def test_requirement_min_disk(env):
    snapshot = probe_environment(env, [])
    assert requirement_satisfied(Requirement("disk_gb", "min:0"), snapshot) is True


# --- snapshot diff ----------------------------------------------------------------

def _snap(**overrides) -> EnvironmentSnapshot:
    base = dict(captured_at="2024-01-01T00:00:00+00:00", tool_versions={},
                free_disk_gb=100.0, free_mem_gb=16.0, gpu_present=False)
    base.update(overrides)
    return EnvironmentSnapshot(**base)


def test_snapshot_diff_identity():
    s = _snap(tool_versions={"python": "3.11"})
    assert snapshot_diff(s, s) == []


def test_snapshot_diff_tool_appeared():
    before = _snap(tool_versions={"python": "absent"})
    after = _snap(tool_versions={"python": "3.11"})
    notes = snapshot_diff(before, after)
    assert len(notes) == 1
    assert notes[0].text == "python: absent → 3.11"


def test_snapshot_diff_resource_threshold():
    # 100 -> 93 GB is a 7% delta: over the 5% threshold, one note.
    notes = snapshot_diff(_snap(free_disk_gb=100.0), _snap(free_disk_gb=93.0))
    assert [n.field for n in notes] == ["free_disk_gb"]
    # 100 -> 96 GB is 4%: under the threshold, silent.
    assert snapshot_diff(_snap(free_disk_gb=100.0), _snap(free_disk_gb=96.0)) == []
