"""Deployment guideline documents: parsing, validation, templating.

A guideline is a YAML document describing an ordered, linear deployment
plan. Parsing is strict: every structural invariant is checked up front so
the runner never sees a half-valid plan.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import yaml

from .errors import (
    IllegalSubstitution,
    MissingBinding,
    ParseError,
    UnsupportedVersion,
    ValidationError,
)

SCHEMA_VERSION = 1
DEFAULT_TIMEOUT_S = 600

STEP_KINDS = ("command", "file_write", "probe", "verify", "download")

# Template variables look like {{name}}; names are identifier-shaped.
VARIABLE_RE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")
# Anything brace-brace shaped that is not a well-formed variable reference.
MARKER_RE = re.compile(r"\{\{.*?\}\}")

# Commands matching any of these force needs_approval regardless of the
# document's own flag. Kept deliberately blunt.
DESTRUCTIVE_PATTERNS = [
    re.compile(r"\brm\s+(?:-[A-Za-z]+\s+)*-(?:[A-Za-z]*r[A-Za-z]*f|[A-Za-z]*f[A-Za-z]*r)[A-Za-z]*\b"),
    re.compile(r"\bmkfs(\.\w+)?\b"),
    re.compile(r"\bdd\b"),
    re.compile(r"\bshutdown\b"),
    re.compile(r"\bsudo\b"),
]

_CONSTRAINT_RE = re.compile(r"^(>=|<=|==|>|<)\s*(\d+(?:\.\d+)*)$")
_MIN_RE = re.compile(r"^min:(\d+(?:\.\d+)?)$")


def is_destructive(command: str) -> bool:
    return any(p.search(command) for p in DESTRUCTIVE_PATTERNS)


@dataclass(frozen=True)
class CheckSpec:
    """Success criteria for a step beyond the bare exit code."""

    exit_code: int | None = None
    stdout_matches: str | None = None
    file_exists: str | None = None
    port_open: int | None = None

    def is_empty(self) -> bool:
        return (
            self.exit_code is None
            and self.stdout_matches is None
            and self.file_exists is None
            and self.port_open is None
        )


@dataclass(frozen=True)
class Requirement:
    """A named environment requirement with a version or quantity constraint."""

    name: str
    constraint: str


@dataclass(frozen=True)
class Step:
    """One unit of the deployment plan.

    ``run`` holds a shell command line for command/probe/verify/download
    steps and literal file content for file_write steps. ``path`` names the
    destination for file_write and download steps, workspace-relative.
    """

    id: str
    title: str = ""
    kind: str = "command"
    run: str = ""
    check: CheckSpec | None = None
    timeout_s: int = DEFAULT_TIMEOUT_S
    needs_approval: bool = False
    working_dir: str | None = None
    path: str | None = None


@dataclass(frozen=True)
class AgentMeta:
    """Optional top-level entrypoint metadata feeding the packager."""

    start: str | None = None
    health: CheckSpec | None = None
    invoke: dict | None = None


@dataclass(frozen=True)
class GuidelineDocument:
    schema_version: int
    project_name: str
    source: str
    env_requirements: tuple[Requirement, ...] = ()
    steps: tuple[Step, ...] = ()
    variables: dict[str, str | None] = field(default_factory=dict)
    agent: AgentMeta | None = None

    def required_at_runtime(self) -> list[str]:
        """Variables declared without a default; bindings must supply them."""
        return [name for name, default in self.variables.items() if default is None]


def referenced_variables(step: Step) -> set[str]:
    names: set[str] = set()
    for text in (step.run, step.working_dir or "", step.path or ""):
        names.update(VARIABLE_RE.findall(text))
    return names


def parse_constraint(text: str) -> tuple[str, str]:
    """Split a constraint into (op, value); op is a comparator or "min".

    Raises ValueError when the text fits neither form of the grammar.
    """
    m = _CONSTRAINT_RE.match(text.strip())
    if m:
        return m.group(1), m.group(2)
    m = _MIN_RE.match(text.strip())
    if m:
        return "min", m.group(1)
    raise ValueError(f"unparseable constraint: {text!r}")


def compare_versions(a: str, b: str) -> int:
    """Numeric piecewise comparison of dotted version strings."""
    pa = [int(x) for x in a.split(".")]
    pb = [int(x) for x in b.split(".")]
    length = max(len(pa), len(pb))
    pa += [0] * (length - len(pa))
    pb += [0] * (length - len(pb))
    return (pa > pb) - (pa < pb)


def constraint_satisfied(constraint: str, actual: str) -> bool:
    """Evaluate a constraint against an observed version/quantity string."""
    op, wanted = parse_constraint(constraint)
    if op == "min":
        try:
            return float(actual) >= float(wanted)
        except ValueError:
            return False
    m = re.match(r"\d+(?:\.\d+)*", actual.strip())
    if not m:
        return False
    cmp = compare_versions(m.group(0), wanted)
    return {
        ">=": cmp >= 0,
        "<=": cmp <= 0,
        "==": cmp == 0,
        ">": cmp > 0,
        "<": cmp < 0,
    }[op]


# --- parsing -----------------------------------------------------------------

def _require(cond: bool, message: str, step_id: str | None = None) -> None:
    if not cond:
        raise ValidationError(message, step_id=step_id)


def _parse_check(raw: object, step_id: str) -> CheckSpec:
    _require(isinstance(raw, dict), "check must be a mapping", step_id)
    assert isinstance(raw, dict)
    known = {"exit_code", "stdout_matches", "file_exists", "port_open"}
    unknown = set(raw) - known
    _require(not unknown, f"unknown check fields: {sorted(unknown)}", step_id)
    check = CheckSpec(
        exit_code=raw.get("exit_code"),
        stdout_matches=raw.get("stdout_matches"),
        file_exists=raw.get("file_exists"),
        port_open=raw.get("port_open"),
    )
    _require(not check.is_empty(), "check must set at least one field", step_id)
    if check.port_open is not None:
        _require(
            isinstance(check.port_open, int) and 1 <= check.port_open <= 65535,
            f"port_open out of range: {check.port_open}",
            step_id,
        )
    if check.stdout_matches is not None:
        try:
            re.compile(check.stdout_matches)
        except re.error as exc:
            raise ValidationError(
                f"stdout_matches is not a valid regex: {exc}", step_id=step_id
            ) from exc
    return check


def _validate_relative(path: str, what: str, step_id: str | None) -> None:
    _require(not path.startswith("/"), f"{what} must be relative: {path!r}", step_id)
    parts = [p for p in path.replace("\\", "/").split("/") if p not in ("", ".")]
    depth = 0
    for part in parts:
        depth += -1 if part == ".." else 1
        _require(depth >= 0, f"{what} escapes the workspace: {path!r}", step_id)


def _parse_step(raw: object, index: int) -> Step:
    if not isinstance(raw, dict):
        raise ValidationError(f"step #{index} is not a mapping")
    step_id = raw.get("id")
    _require(isinstance(step_id, str) and step_id != "", f"step #{index} needs an id")
    assert isinstance(step_id, str)

    kind = raw.get("kind", "command")
    _require(kind in STEP_KINDS, f"unknown step kind: {kind!r}", step_id)

    run = raw.get("run", "")
    _require(isinstance(run, str), "run must be text", step_id)

    timeout_s = raw.get("timeout_s", DEFAULT_TIMEOUT_S)
    _require(
        isinstance(timeout_s, int) and not isinstance(timeout_s, bool) and timeout_s >= 1,
        f"timeout_s must be a positive integer, got {timeout_s!r}",
        step_id,
    )

    check = _parse_check(raw["check"], step_id) if raw.get("check") is not None else None
    _require(not (kind == "verify" and check is None), "verify step requires a check", step_id)
    if kind == "verify" and not run.strip():
        # Without a process there is nothing for these checks to look at.
        _require(
            check is not None and check.exit_code is None and check.stdout_matches is None,
            "verify step without a run may only use file_exists/port_open checks",
            step_id,
        )

    working_dir = raw.get("working_dir")
    if working_dir is not None:
        _require(isinstance(working_dir, str), "working_dir must be text", step_id)
        _validate_relative(working_dir, "working_dir", step_id)

    path = raw.get("path")
    if path is not None:
        _require(isinstance(path, str), "path must be text", step_id)
        _validate_relative(path, "path", step_id)
    _require(not (kind == "file_write" and path is None), "file_write step requires a path", step_id)

    needs_approval = bool(raw.get("needs_approval", False))
    if kind == "command" and is_destructive(run):
        needs_approval = True

    return Step(
        id=step_id,
        title=raw.get("title", ""),
        kind=kind,
        run=run,
        check=check,
        timeout_s=timeout_s,
        needs_approval=needs_approval,
        working_dir=working_dir,
        path=path,
    )


def parse_guideline_data(data: object) -> GuidelineDocument:
    """Validate an already-deserialized guideline mapping."""
    if not isinstance(data, dict):
        raise ValidationError("guideline document must be a mapping")

    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersion(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")

    project_name = data.get("project_name")
    _require(isinstance(project_name, str) and project_name != "", "project_name is required")
    source = data.get("source")
    _require(isinstance(source, str) and source != "", "source is required")

    raw_vars = data.get("variables") or {}
    _require(isinstance(raw_vars, dict), "variables must be a mapping")
    variables: dict[str, str | None] = {}
    for name, default in raw_vars.items():
        _require(isinstance(name, str) and VARIABLE_RE.fullmatch("{{%s}}" % name) is not None,
                 f"bad variable name: {name!r}")
        _require(default is None or isinstance(default, str),
                 f"variable {name!r} default must be text or null")
        variables[name] = default

    raw_reqs = data.get("env_requirements") or []
    _require(isinstance(raw_reqs, list), "env_requirements must be a list")
    requirements = []
    for raw in raw_reqs:
        _require(isinstance(raw, dict), "requirement entries must be mappings")
        name = raw.get("name")
        _require(isinstance(name, str) and name != "", "requirement name must be non-empty")
        constraint = raw.get("constraint", "")
        _require(isinstance(constraint, str), f"requirement {name!r} constraint must be text")
        try:
            parse_constraint(constraint)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        requirements.append(Requirement(name=name, constraint=constraint))

    raw_steps = data.get("steps")
    _require(isinstance(raw_steps, list) and len(raw_steps) > 0, "steps must be a non-empty list")
    assert isinstance(raw_steps, list)
    steps = [_parse_step(raw, i) for i, raw in enumerate(raw_steps)]

    seen: set[str] = set()
    for step in steps:
        _require(step.id not in seen, f"duplicate step id: {step.id!r}", step.id)
        seen.add(step.id)

    declared = set(variables)
    for step in steps:
        undeclared = sorted(referenced_variables(step) - declared)
        _require(
            not undeclared,
            f"step {step.id!r} references undeclared variables: {', '.join(undeclared)}",
            step.id,
        )

    agent = None
    raw_agent = data.get("agent")
    if raw_agent is not None:
        _require(isinstance(raw_agent, dict), "agent must be a mapping")
        health = _parse_check(raw_agent["health"], "agent") if raw_agent.get("health") else None
        agent = AgentMeta(start=raw_agent.get("start"), health=health, invoke=raw_agent.get("invoke"))

    return GuidelineDocument(
        schema_version=version,
        project_name=project_name,
        source=source,
        env_requirements=tuple(requirements),
        steps=tuple(steps),
        variables=variables,
        agent=agent,
    )


def parse_guideline(document_text: str) -> GuidelineDocument:
    """Parse and validate a YAML guideline document."""
    try:
        data = yaml.safe_load(document_text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ParseError(
            exc.problem or "malformed YAML",
            line=(mark.line + 1) if mark else None,
            column=(mark.column + 1) if mark else None,
        ) from exc
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from exc
    return parse_guideline_data(data)


# --- serialization -----------------------------------------------------------

def check_to_dict(check: CheckSpec) -> dict:
    out: dict = {}
    if check.exit_code is not None:
        out["exit_code"] = check.exit_code
    if check.stdout_matches is not None:
        out["stdout_matches"] = check.stdout_matches
    if check.file_exists is not None:
        out["file_exists"] = check.file_exists
    if check.port_open is not None:
        out["port_open"] = check.port_open
    return out


def step_to_dict(step: Step) -> dict:
    out: dict = {
        "id": step.id,
        "title": step.title,
        "kind": step.kind,
        "run": step.run,
        "timeout_s": step.timeout_s,
        "needs_approval": step.needs_approval,
    }
    if step.check is not None:
        out["check"] = check_to_dict(step.check)
    if step.working_dir is not None:
        out["working_dir"] = step.working_dir
    if step.path is not None:
        out["path"] = step.path
    return out


def step_from_dict(raw: dict, index: int = 0) -> Step:
    return _parse_step(raw, index)


def guideline_to_dict(doc: GuidelineDocument) -> dict:
    out: dict = {
        "schema_version": doc.schema_version,
        "project_name": doc.project_name,
        "source": doc.source,
        "env_requirements": [
            {"name": r.name, "constraint": r.constraint} for r in doc.env_requirements
        ],
        "steps": [step_to_dict(s) for s in doc.steps],
        "variables": dict(doc.variables),
    }
    if doc.agent is not None:
        agent: dict = {}
        if doc.agent.start is not None:
            agent["start"] = doc.agent.start
        if doc.agent.health is not None:
            agent["health"] = check_to_dict(doc.agent.health)
        if doc.agent.invoke is not None:
            agent["invoke"] = doc.agent.invoke
        out["agent"] = agent
    return out


def serialize_guideline(doc: GuidelineDocument) -> str:
    return yaml.safe_dump(guideline_to_dict(doc), sort_keys=False, allow_unicode=True)


# --- templating --------------------------------------------------------------

def _substitute(text: str, bindings: dict[str, str], command_like: bool, step_id: str) -> str:
    missing: list[str] = []

    def repl(m: re.Match[str]) -> str:
        name = m.group(1)
        if name not in bindings:
            missing.append(name)
            return m.group(0)
        value = bindings[name]
        if command_like and ("\n" in value or "\r" in value):
            raise IllegalSubstitution(
                f"value for {name!r} would introduce a newline into step {step_id!r}"
            )
        if MARKER_RE.search(value):
            raise IllegalSubstitution(
                f"value for {name!r} would introduce template markers into step {step_id!r}"
            )
        return value

    result = VARIABLE_RE.sub(repl, text)
    if missing:
        raise MissingBinding(missing)
    return result


def render_step(step: Step, bindings: dict[str, str]) -> Step:
    """Return a copy of the step with all {{name}} references substituted.

    Rendering an already-rendered step is a no-op. command-like templates
    reject values containing newlines; all templates reject values that
    would smuggle new markers in, which is what makes rendering idempotent.
    """
    command_like = step.kind != "file_write"
    rendered_run = _substitute(step.run, bindings, command_like, step.id)
    rendered_wd = (
        _substitute(step.working_dir, bindings, True, step.id)
        if step.working_dir is not None
        else None
    )
    rendered_path = (
        _substitute(step.path, bindings, True, step.id) if step.path is not None else None
    )
    needs_approval = step.needs_approval
    if step.kind == "command" and is_destructive(rendered_run):
        needs_approval = True
    return replace(
        step,
        run=rendered_run,
        working_dir=rendered_wd,
        path=rendered_path,
        needs_approval=needs_approval,
    )
