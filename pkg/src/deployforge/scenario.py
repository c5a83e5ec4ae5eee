"""Deterministic deployment scenarios: fake projects that fail on cue.

A scenario bundles a guideline with injected failures and ground-truth
fixes. materialize() writes small shell scripts into the workspace that
keep failing (or hanging) until their marker file exists; the oracle fix
creates the marker. Everything is byte-deterministic so full runs can be
compared across executions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .debugger import analyze_failure, fingerprint
from .errors import ValidationError
from .guideline import GuidelineDocument, Step, parse_guideline_data, step_from_dict

SIM_DIR = ".sim"


@dataclass(frozen=True)
class InjectedFailure:
    step_id: str
    fails_until_marker: str
    error_text: str
    hang_s: int | None = None  # sleep instead of exiting: drives timeouts
    success_text: str = "ok"


@dataclass(frozen=True)
class OracleFix:
    steps: tuple[Step, ...]
    error_text: str
    as_timeout: bool = False


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    guideline: GuidelineDocument
    injected_failures: tuple[InjectedFailure, ...]
    fix_oracle: dict[str, OracleFix]  # fingerprint digest -> ground-truth fix
    llm_transcript: str | None = None

    def oracle_steps(self, digest: str) -> tuple[Step, ...] | None:
        entry = self.fix_oracle.get(digest)
        return entry.steps if entry else None


def oracle_digest(error_text: str, *, as_timeout: bool = False) -> str:
    """The digest diagnose() will compute for a step failing with error_text."""
    status = "timeout" if as_timeout else "failure"
    _error_class, basis = analyze_failure(status, error_text, "")
    return fingerprint(basis).digest


def load_scenario(path: str | Path) -> Scenario:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValidationError(f"scenario file {path} is not a mapping")
    scenario_id = raw.get("scenario_id")
    if not isinstance(scenario_id, str) or not scenario_id:
        raise ValidationError("scenario_id is required")

    guideline = parse_guideline_data(raw["guideline"])
    step_ids = {s.id for s in guideline.steps}

    failures = []
    for entry in raw.get("injected_failures") or []:
        step_id = entry["step_id"]
        if step_id not in step_ids:
            raise ValidationError(
                f"injected failure references unknown step {step_id!r}", step_id=step_id
            )
        marker = entry["fails_until_marker"]
        if marker.startswith("/") or marker.startswith(".."):
            raise ValidationError(f"marker path must be workspace-relative: {marker!r}")
        failures.append(InjectedFailure(
            step_id=step_id,
            fails_until_marker=marker,
            error_text=entry.get("error_text", ""),
            hang_s=entry.get("hang_s"),
            success_text=entry.get("success_text", "ok"),
        ))

    oracle: dict[str, OracleFix] = {}
    for i, entry in enumerate(raw.get("fix_oracle") or []):
        steps = tuple(
            step_from_dict({**s, "id": s.get("id", f"oracle-{i}-{j}")}, j)
            for j, s in enumerate(entry["steps"])
        )
        as_timeout = bool(entry.get("as_timeout"))
        error_text = entry.get("for_error", "")
        digest = entry.get("digest") or oracle_digest(error_text, as_timeout=as_timeout)
        oracle[digest] = OracleFix(steps=steps, error_text=error_text, as_timeout=as_timeout)

    return Scenario(
        scenario_id=scenario_id,
        guideline=guideline,
        injected_failures=tuple(failures),
        fix_oracle=oracle,
        llm_transcript=raw.get("llm_transcript"),
    )


def _failure_script(failure: InjectedFailure) -> str:
    """POSIX sh script: succeed once the marker exists, misbehave until then."""
    lines = ["#!/bin/sh", f'if [ -e "{failure.fails_until_marker}" ]; then']
    lines.append(f'  echo "{failure.success_text}"')
    lines.append("  exit 0")
    lines.append("fi")
    if failure.error_text:
        for text_line in failure.error_text.splitlines():
            escaped = text_line.replace("\\", "\\\\").replace('"', '\\"')
            lines.append(f'  echo "{escaped}" >&2')
    if failure.hang_s is not None:
        lines.append(f"sleep {failure.hang_s}")
    lines.append("exit 1")
    return "\n".join(lines) + "\n"


def materialize(scenario: Scenario, workspace: str | Path) -> None:
    """Write the scenario's failure scripts into an empty-ish workspace.

    Two materializations of the same scenario are byte-identical; scripts
    embed nothing about when or where they were generated.
    """
    root = Path(workspace)
    sim = root / SIM_DIR
    sim.mkdir(parents=True, exist_ok=True)
    for failure in scenario.injected_failures:
        script = sim / f"{failure.step_id}.sh"
        script.write_text(_failure_script(failure), encoding="utf-8")
        script.chmod(0o755)


def seed_repository(repo, scenario: Scenario) -> list[str]:
    """Pre-load a repo with the scenario's oracle fixes as proven cases."""
    from .debugger import FailureDiagnosis, make_fix
    from .sandbox import EnvironmentSnapshot, ExecutionResult

    snapshot = EnvironmentSnapshot(
        captured_at="1970-01-01T00:00:00+00:00",
        tool_versions={},
        free_disk_gb=0.0,
        free_mem_gb=0.0,
        gpu_present=False,
    )
    case_ids = []
    for digest, oracle in scenario.fix_oracle.items():
        status = "timeout" if oracle.as_timeout else "failure"
        error_class, basis = analyze_failure(status, oracle.error_text, "")
        diag = FailureDiagnosis(
            step_id="seed",
            error_class=error_class,
            fingerprint=fingerprint(basis),
            evidence_lines=(basis,) if basis in oracle.error_text else (),
            env_context=snapshot,
            summary=f"{error_class}: {basis}"[:500],
        )
        fix = make_fix(list(oracle.steps), origin="repo_exact", rationale="seeded oracle fix")
        result = ExecutionResult(
            step_id="seed", status="success", exit_code=0, stdout="",
            stderr="", duration_ms=0, env_snapshot_after=snapshot,
        )
        case_ids.append(repo.merge_case(diag, fix, result))
    return case_ids


def scenario_dir() -> Path:
    """Shipped scenario corpus (testdata/scenarios at the repo root)."""
    return Path(__file__).resolve().parents[2] / "testdata" / "scenarios"


def load_all_scenarios(directory: str | Path | None = None) -> list[Scenario]:
    directory = Path(directory) if directory else scenario_dir()
    return [load_scenario(p) for p in sorted(directory.glob("*.yaml"))]
