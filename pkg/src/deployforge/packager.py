"""Package a successful run into a re-invokable agent manifest.

The manifest (agent.yaml) freezes what the run proved: the environment the
project worked in, the files it needs, and how to start and health-check
it. replay_manifest() re-launches from the manifest alone.
"""

from __future__ import annotations

import hashlib
import os
import signal
import subprocess
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .errors import NoEntrypointDerivable, NotSucceeded
from .guideline import (
    CheckSpec,
    GuidelineDocument,
    check_to_dict,
    serialize_guideline,
)
from .runner import RunTranscript
from .sandbox import (
    ExecutionEnvironment,
    evaluate_check,
    is_secret_name,
    resolve_in_workspace,
)

MANIFEST_NAME = "agent.yaml"
MANIFEST_SCHEMA_VERSION = 1

HEALTH_POLL_INTERVAL_S = 2.0
HEALTH_DEADLINE_S = 120.0


@dataclass(frozen=True)
class EnvironmentLockfile:
    os: str
    tool_versions: dict[str, str]
    env_vars: dict[str, str]  # secrets carried by name reference, never value
    working_layout: tuple[str, ...]


@dataclass(frozen=True)
class AgentManifest:
    schema_version: int
    name: str
    version: str
    provenance: dict
    environment: EnvironmentLockfile
    entrypoints: dict


def guideline_digest(doc: GuidelineDocument) -> str:
    blob = serialize_guideline(doc).encode("utf-8")
    return hashlib.blake2s(blob, digest_size=16).hexdigest()


def _derive_entrypoints(doc: GuidelineDocument) -> dict:
    """Agent metadata wins; otherwise fall back to the last verify step."""
    start = doc.agent.start if doc.agent else None
    health = doc.agent.health if doc.agent else None
    invoke = doc.agent.invoke if doc.agent else None

    last_verify = next((s for s in reversed(doc.steps) if s.kind == "verify"), None)
    if health is None and last_verify is not None:
        health = last_verify.check
    if start is None and last_verify is not None and last_verify.run.strip():
        start = last_verify.run

    if not start or health is None:
        raise NoEntrypointDerivable(
            "guideline declares no agent metadata and no usable verify step"
        )
    entry: dict = {"start": start, "health": check_to_dict(health)}
    if invoke is not None:
        entry["invoke"] = invoke
    return entry


def _derive_layout(doc: GuidelineDocument, workspace: Path) -> tuple[str, ...]:
    # The paths the guideline itself names are the declared layout; only
    # those that actually materialized make it into the lockfile.
    candidates: list[str] = []
    for step in doc.steps:
        if step.path:
            candidates.append(step.path)
        if step.check and step.check.file_exists:
            candidates.append(step.check.file_exists)
    seen: set[str] = set()
    layout = []
    for rel in candidates:
        if rel not in seen and (workspace / rel).exists():
            seen.add(rel)
            layout.append(rel)
    return tuple(layout)


def package_agent(transcript: RunTranscript, env: ExecutionEnvironment) -> AgentManifest:
    """Write agent.yaml for a succeeded transcript; returns the manifest."""
    if transcript.outcome != "succeeded":
        raise NotSucceeded(f"transcript outcome is {transcript.outcome!r}")

    doc = transcript.guideline
    entrypoints = _derive_entrypoints(doc)
    workspace = Path(env.workspace_root)

    final_snapshot = (
        transcript.results[-1].env_snapshot_after if transcript.results else None
    )
    tool_versions = dict(final_snapshot.tool_versions) if final_snapshot else {}

    env_vars: dict[str, str] = {}
    for name, value in env.env_vars.items():
        env_vars[name] = f"${{{name}}}" if is_secret_name(name) else value

    lockfile = EnvironmentLockfile(
        os=os.uname().sysname + " " + os.uname().release,
        tool_versions=tool_versions,
        env_vars=env_vars,
        working_layout=_derive_layout(doc, workspace),
    )
    manifest = AgentManifest(
        schema_version=MANIFEST_SCHEMA_VERSION,
        name=doc.project_name,
        version="1.0.0",
        provenance={
            "run_id": transcript.run_id,
            "guideline_digest": guideline_digest(doc),
            "created_at": datetime.now(timezone.utc).isoformat(),
        },
        environment=lockfile,
        entrypoints=entrypoints,
    )

    manifest_text = yaml.safe_dump(manifest_to_dict(manifest), sort_keys=False)
    for secret in env.secret_values():
        if secret and secret in manifest_text:
            raise ValueError("manifest serialization leaked a secret value")
    (workspace / MANIFEST_NAME).write_text(manifest_text, encoding="utf-8")
    return manifest


def manifest_to_dict(m: AgentManifest) -> dict:
    return {
        "schema_version": m.schema_version,
        "name": m.name,
        "version": m.version,
        "provenance": dict(m.provenance),
        "environment": {
            "os": m.environment.os,
            "tool_versions": dict(m.environment.tool_versions),
            "env_vars": dict(m.environment.env_vars),
            "working_layout": list(m.environment.working_layout),
        },
        "entrypoints": dict(m.entrypoints),
    }


def manifest_from_dict(raw: dict) -> AgentManifest:
    env = raw["environment"]
    return AgentManifest(
        schema_version=raw["schema_version"],
        name=raw["name"],
        version=raw["version"],
        provenance=dict(raw["provenance"]),
        environment=EnvironmentLockfile(
            os=env["os"],
            tool_versions=dict(env["tool_versions"]),
            env_vars=dict(env["env_vars"]),
            working_layout=tuple(env["working_layout"]),
        ),
        entrypoints=dict(raw["entrypoints"]),
    )


def load_manifest(path: str | Path) -> AgentManifest:
    return manifest_from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def missing_layout_paths(manifest: AgentManifest, env: ExecutionEnvironment) -> list[str]:
    workspace = Path(env.workspace_root)
    return [rel for rel in manifest.environment.working_layout
            if not (workspace / rel).exists()]


def replay_manifest(
    manifest: AgentManifest,
    env: ExecutionEnvironment,
    *,
    poll_interval_s: float = HEALTH_POLL_INTERVAL_S,
    deadline_s: float = HEALTH_DEADLINE_S,
) -> str:
    """Relaunch a packaged agent: "healthy", "unhealthy" or "layout_mismatch".

    Checks the recorded layout, launches the start command, polls the
    health check until it passes or the deadline lapses, then tears the
    process down either way.
    """
    missing = missing_layout_paths(manifest, env)
    if missing:
        return "layout_mismatch"
    workspace = Path(env.workspace_root)

    health = CheckSpec(**manifest.entrypoints["health"])
    start = manifest.entrypoints["start"]

    proc = subprocess.Popen(
        ["/bin/sh", "-c", start],
        cwd=str(workspace),
        env=env.child_env(),
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
        start_new_session=True,
    )
    try:
        deadline = time.monotonic() + deadline_s
        while time.monotonic() < deadline:
            failed = evaluate_check(health, exit_code=None, stdout="", env=env,
                                    ran_process=False)
            if failed is None:
                return "healthy"
            if proc.poll() is not None:
                # Start command already exited and health still failing.
                return "unhealthy"
            time.sleep(poll_interval_s)
        return "unhealthy"
    finally:
        if proc.poll() is None:
            try:
                os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                proc.kill()
            proc.wait(timeout=10)
