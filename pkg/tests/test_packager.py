"""Manifest derivation, replay, and secret hygiene."""

from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from deployforge.errors import NoEntrypointDerivable, NotSucceeded
from deployforge.guideline import parse_guideline
from deployforge.packager import (
    guideline_digest,
    load_manifest,
    missing_layout_paths,
    package_agent,
    replay_manifest,
)
from deployforge.runner import RunTranscript
from deployforge.sandbox import EnvironmentSnapshot, ExecutionResult, create_sandbox

from helpers import run_scenario, scenario


def _snapshot(versions=None):
    return EnvironmentSnapshot(captured_at="2024-01-01T00:00:00+00:00",
                               tool_versions=versions or {"python": "3.11.4"},
                               free_disk_gb=10.0, free_mem_gb=4.0, gpu_present=False)


def _transcript(doc, outcome="succeeded", run_id="rt"):
    result = ExecutionResult(step_id=doc.steps[0].id, status="success", exit_code=0,
                             stdout="", stderr="", duration_ms=1,
                             env_snapshot_after=_snapshot())
    return RunTranscript(run_id=run_id, guideline=doc, results=(result,),
                         fix_attempts=(), outcome=outcome,
                         started_at="2024-01-01T00:00:00+00:00",
                         ended_at="2024-01-01T00:01:00+00:00")


AGENT_DOC = """
schema_version: 1
project_name: tts-service
source: ./tts
steps:
  - id: prep
    kind: command
    run: "echo prep"
agent:
  start: "python3 serve.py"
  health: {port_open: 7860}
  invoke: {kind: http, template: "POST /speak", input_schema: "{}"}
"""


def test_agent_metadata_passes_through(workdirs):
    doc = parse_guideline(AGENT_DOC)
    env = create_sandbox("pk1", False, workdirs["sandbox_root"])
    manifest = package_agent(_transcript(doc), env)
    assert manifest.entrypoints["start"] == "python3 serve.py"
    assert manifest.entrypoints["health"] == {"port_open": 7860}
    assert manifest.entrypoints["invoke"]["kind"] == "http"
    assert manifest.provenance["guideline_digest"] == guideline_digest(doc)
    assert (Path(env.workspace_root) / "agent.yaml").exists()


def test_not_succeeded_is_refused(workdirs):
    doc = parse_guideline(AGENT_DOC)
    env = create_sandbox("pk2", False, workdirs["sandbox_root"])
    with pytest.raises(NotSucceeded):
        package_agent(_transcript(doc, outcome="failed_exhausted"), env)


def test_health_derived_from_last_verify_step(workdirs):
    # Tracing the derivation rule: with no agent metadata, the last verify
    # step's check becomes health and its run becomes start.
    doc = parse_guideline("""
schema_version: 1
project_name: web-demo
source: ./web
steps:
  - id: build
    kind: command
    run: "echo build"
  - id: launch_check
    kind: verify
    run: "python3 -m http.server 7860 &"
    check: {port_open: 7860}
""")
    env = create_sandbox("pk3", False, workdirs["sandbox_root"])
    manifest = package_agent(_transcript(doc), env)
    assert manifest.entrypoints["health"] == {"port_open": 7860}
    assert manifest.entrypoints["start"] == "python3 -m http.server 7860 &"


def test_no_entrypoint_derivable(workdirs):
    doc = parse_guideline("""
schema_version: 1
project_name: batch-job
source: ./batch
steps:
  - id: crunch
    kind: command
    run: "echo crunch"
""")
    env = create_sandbox("pk4", False, workdirs["sandbox_root"])
    with pytest.raises(NoEntrypointDerivable):
        package_agent(_transcript(doc), env)


def test_lockfile_freezes_final_snapshot_versions(workdirs):
    doc = parse_guideline(AGENT_DOC)
    env = create_sandbox("pk5", False, workdirs["sandbox_root"])
    manifest = package_agent(_transcript(doc), env)
    assert manifest.environment.tool_versions == {"python": "3.11.4"}


def test_secret_values_never_serialized(workdirs):
    doc = parse_guideline(AGENT_DOC)
    env = create_sandbox("pk6", False, workdirs["sandbox_root"])
    env.env_vars["HF_TOKEN"] = "hf_secret_value_abc123"
    env.env_vars["SAFE_SETTING"] = "visible-value"
    package_agent(_transcript(doc), env)
    raw = (Path(env.workspace_root) / "agent.yaml").read_bytes()
    assert b"hf_secret_value_abc123" not in raw
    assert b"${HF_TOKEN}" in raw
    assert b"visible-value" in raw


def test_manifest_round_trip_parse(workdirs):
    doc = parse_guideline(AGENT_DOC)
    env = create_sandbox("pk7", False, workdirs["sandbox_root"])
    manifest = package_agent(_transcript(doc), env)
    loaded = load_manifest(Path(env.workspace_root) / "agent.yaml")
    assert loaded == manifest
    data = yaml.safe_load((Path(env.workspace_root) / "agent.yaml").read_text())
    assert set(data) == {"schema_version", "name", "version", "provenance",
                         "environment", "entrypoints"}


# --- replay -------------------------------------------------------------------

def test_replay_healthy_for_succeeded_scenario(workdirs):
    sc = scenario("happy-path")
    transcript, env, _repo = run_scenario(sc, workdirs, "rp1")
    manifest = package_agent(transcript, env)
    status = replay_manifest(manifest, env, poll_interval_s=0.05, deadline_s=10)
    assert status == "healthy"


def test_replay_layout_mismatch_lists_missing(workdirs):
    sc = scenario("happy-path")
    transcript, env, _repo = run_scenario(sc, workdirs, "rp2")
    manifest = package_agent(transcript, env)
    (Path(env.workspace_root) / "deployed.txt").unlink()
    assert missing_layout_paths(manifest, env) == ["deployed.txt"]
    status = replay_manifest(manifest, env, poll_interval_s=0.05, deadline_s=5)
    assert status == "layout_mismatch"


def test_replay_unhealthy_when_start_dies_and_health_never_passes(workdirs):
    doc = parse_guideline(AGENT_DOC.replace('start: "python3 serve.py"', 'start: "true"')
                          .replace("health: {port_open: 7860}",
                                   "health: {file_exists: never-created.txt}"))
    env = create_sandbox("rp3", False, workdirs["sandbox_root"])
    manifest = package_agent(_transcript(doc), env)
    status = replay_manifest(manifest, env, poll_interval_s=0.05, deadline_s=5)
    assert status == "unhealthy"
