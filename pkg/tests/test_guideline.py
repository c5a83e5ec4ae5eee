"""Guideline parsing, validation, templating."""

from __future__ import annotations

import re

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from deployforge.errors import (
    IllegalSubstitution,
    MissingBinding,
    ParseError,
    UnsupportedVersion,
    ValidationError,
)
from deployforge.guideline import (
    DEFAULT_TIMEOUT_S,
    CheckSpec,
    Step,
    constraint_satisfied,
    guideline_to_dict,
    is_destructive,
    parse_constraint,
    parse_guideline,
    parse_guideline_data,
    render_step,
    serialize_guideline,
)

MINIMAL = """
schema_version: 1
project_name: demo
source: ./demo
steps:
  - id: s1
    kind: command
    run: "echo ok"
"""


def test_minimal_document_parses_with_defaults():
    doc = parse_guideline(MINIMAL)
    assert len(doc.steps) == 1
    step = doc.steps[0]
    assert step.id == "s1"
    assert step.timeout_s == DEFAULT_TIMEOUT_S
    assert step.needs_approval is False
    assert doc.variables == {}


def test_duplicate_step_id_rejected():
    text = MINIMAL + "  - id: s1\n    kind: command\n    run: 'echo again'\n"
    with pytest.raises(ValidationError) as excinfo:
        parse_guideline(text)
    assert "s1" in str(excinfo.value)
    assert excinfo.value.step_id == "s1"


def test_undeclared_variable_rejected_and_named():
    text = """
schema_version: 1
project_name: demo
source: ./demo
steps:
  - id: s1
    kind: command
    run: "serve --port {{PORT}} --host {{HOST}}"
variables:
  HOST: localhost
"""
    # Independent oracle: scan the raw text for the variable grammar by hand
    # and subtract the declared names.
    referenced = set(re.findall(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}", text))
    declared = {"HOST"}
    expected_missing = referenced - declared
    assert expected_missing == {"PORT"}

    with pytest.raises(ValidationError) as excinfo:
        parse_guideline(text)
    assert "PORT" in str(excinfo.value)
    assert "HOST" not in str(excinfo.value).replace("localhost", "")


def test_required_at_runtime_variables_are_null_defaults():
    text = MINIMAL.replace('run: "echo ok"', 'run: "echo {{MODE}}"') + "variables:\n  MODE:\n"
    doc = parse_guideline(text)
    assert doc.required_at_runtime() == ["MODE"]


def test_malformed_yaml_reports_position():
    with pytest.raises(ParseError) as excinfo:
        parse_guideline("steps:\n  - id: s1\n   bad indent: [\n")
    assert excinfo.value.line is not None


def test_unsupported_version():
    with pytest.raises(UnsupportedVersion):
        parse_guideline(MINIMAL.replace("schema_version: 1", "schema_version: 2"))


def test_verify_requires_check():
    text = MINIMAL + "  - id: v1\n    kind: verify\n    run: 'echo x'\n"
    with pytest.raises(ValidationError):
        parse_guideline(text)


def test_destructive_command_forces_approval():
    text = MINIMAL.replace('run: "echo ok"', 'run: "sudo rm -rf /opt/app"')
    doc = parse_guideline(text)
    assert doc.steps[0].needs_approval is True


@pytest.mark.parametrize("command,expected", [
    ("rm -rf build", True),
    ("rm -fr build", True),
    ("rm -r build", False),
    ("mkfs.ext4 /dev/sda1", True),
    ("dd if=/dev/zero of=x", True),
    ("shutdown -h now", True),
    ("sudo apt install x", True),
    ("echo informed", False),
    ("pip install torch", False),
])
def test_destructive_denylist(command, expected):
    assert is_destructive(command) is expected


# --- constraint grammar -------------------------------------------------------

@pytest.mark.parametrize("text,op,value", [
    (">= 3.9", ">=", "3.9"),
    ("<=1.2.3", "<=", "1.2.3"),
    ("== 2.0", "==", "2.0"),
    ("> 10", ">", "10"),
    ("< 4", "<", "4"),
    ("min:20", "min", "20"),
])
def test_constraint_grammar_accepts(text, op, value):
    assert parse_constraint(text) == (op, value)


@pytest.mark.parametrize("text", ["~= 3.9", "3.9", "min:", ">= x.y", ""])
def test_constraint_grammar_rejects(text):
    with pytest.raises(ValueError):
        parse_constraint(text)


@pytest.mark.parametrize("constraint,actual,expected", [
    (">= 3.9", "3.11.2", True),
    (">= 3.9", "3.9", True),
    (">= 3.9", "3.8.19", False),
    ("< 2.0", "1.26.4", True),
    ("== 1.2", "1.2", True),
    ("min:10", "25.5", True),
    ("min:10", "4", False),
])
def test_constraint_satisfaction(constraint, actual, expected):
    assert constraint_satisfied(constraint, actual) is expected


# --- rendering ----------------------------------------------------------------

def _step(run: str, **kwargs) -> Step:
    return Step(id="s1", run=run, **kwargs)


def test_render_direct_substitution():
    rendered = render_step(_step("pip install {{pkg}}"), {"pkg": "torch"})
    assert rendered.run == "pip install torch"


def test_render_identity_with_no_variables():
    step = _step("echo hi")
    assert render_step(step, {}) == step


def test_render_adjacent_variables():
    # Hand-applied substitution grammar: {{a}}{{b}} -> xy.
    rendered = render_step(_step("run {{a}}{{b}}"), {"a": "x", "b": "y"})
    assert rendered.run == "run xy"


def test_render_missing_binding_names_variable():
    with pytest.raises(MissingBinding) as excinfo:
        render_step(_step("echo {{missing_one}}"), {})
    assert "missing_one" in str(excinfo.value)


def test_render_rejects_newline_into_command():
    with pytest.raises(IllegalSubstitution):
        render_step(_step("echo {{v}}"), {"v": "a\nrm -rf /"})


def test_render_allows_newline_into_file_content():
    step = Step(id="w", kind="file_write", run="{{body}}", path="out.txt")
    rendered = render_step(step, {"body": "line1\nline2"})
    assert rendered.run == "line1\nline2"


def test_render_rejects_markers_smuggled_in_values():
    with pytest.raises(IllegalSubstitution):
        render_step(_step("echo {{v}}"), {"v": "{{w}}"})


def test_render_flags_destructive_after_substitution():
    rendered = render_step(_step("{{cmd}} /tmp/x"), {"cmd": "rm -rf"})
    assert rendered.needs_approval is True


# --- round-trip and idempotence properties --------------------------------------

_names = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)
_texts = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters=" .-_/"),
    min_size=0, max_size=30,
).map(lambda s: s.strip())


@st.composite
def _check_specs(draw):
    choice = draw(st.integers(min_value=0, max_value=3))
    if choice == 0:
        return {"exit_code": draw(st.integers(min_value=0, max_value=5))}
    if choice == 1:
        return {"stdout_matches": "ready"}
    if choice == 2:
        return {"file_exists": draw(_names) + ".txt"}
    return {"port_open": draw(st.integers(min_value=1, max_value=65535))}


@st.composite
def _documents(draw):
    n_steps = draw(st.integers(min_value=1, max_value=5))
    variables = {name: draw(_texts) for name in draw(st.lists(_names, max_size=3, unique=True))}
    steps = []
    for i in range(n_steps):
        kind = draw(st.sampled_from(["command", "probe", "file_write", "verify"]))
        step: dict = {
            "id": f"step-{i}",
            "title": draw(_texts),
            "kind": kind,
            "run": draw(_texts) or "echo ok",
            "timeout_s": draw(st.integers(min_value=1, max_value=900)),
            "needs_approval": draw(st.booleans()),
        }
        if variables and draw(st.booleans()):
            name = draw(st.sampled_from(sorted(variables)))
            step["run"] += " {{%s}}" % name
        if kind == "verify":
            step["check"] = draw(_check_specs())
        elif draw(st.booleans()):
            step["check"] = draw(_check_specs())
        if kind == "file_write":
            step["path"] = f"out/{i}.txt"
        steps.append(step)
    return {
        "schema_version": 1,
        "project_name": draw(_names),
        "source": "./" + draw(_names),
        "env_requirements": [
            {"name": draw(_names), "constraint": ">= 1.0"}
            for _ in range(draw(st.integers(min_value=0, max_value=2)))
        ],
        "steps": steps,
        "variables": variables,
    }


@given(_documents())
@settings(max_examples=60, deadline=None)
def test_parse_serialize_round_trip(raw):
    doc = parse_guideline_data(raw)
    again = parse_guideline(serialize_guideline(doc))
    assert again == doc


@given(_documents(), st.dictionaries(_names, _texts, max_size=3))
@settings(max_examples=60, deadline=None)
def test_render_idempotent(raw, extra):
    doc = parse_guideline_data(raw)
    bindings = {k: v for k, v in doc.variables.items() if v is not None}
    bindings.update(extra)
    for step in doc.steps:
        try:
            once = render_step(step, bindings)
        except (MissingBinding, IllegalSubstitution):
            continue
        assert render_step(once, bindings) == once
        assert "{{" not in once.run or not re.search(r"\{\{[A-Za-z_][A-Za-z0-9_]*\}\}", once.run)


# --- rejection completeness ------------------------------------------------------

def _valid_base() -> dict:
    return yaml.safe_load("""
schema_version: 1
project_name: demo
source: ./demo
env_requirements:
  - {name: python, constraint: ">= 3.9"}
variables:
  MODE: fast
steps:
  - id: s1
    kind: command
    run: "echo {{MODE}}"
  - id: s2
    kind: verify
    run: "echo check"
    check: {exit_code: 0}
""")


def _mutations():
    def dup_id(d):
        d["steps"].append(dict(d["steps"][0]))

    def no_steps(d):
        d["steps"] = []

    def bad_version(d):
        d["schema_version"] = 99

    def verify_without_check(d):
        del d["steps"][1]["check"]

    def zero_timeout(d):
        d["steps"][0]["timeout_s"] = 0

    def escaping_working_dir(d):
        d["steps"][0]["working_dir"] = "../outside"

    def absolute_working_dir(d):
        d["steps"][0]["working_dir"] = "/etc"

    def undeclared_variable(d):
        d["steps"][0]["run"] = "echo {{UNKNOWN_VAR}}"

    def bad_port(d):
        d["steps"][1]["check"] = {"port_open": 70000}

    def empty_check(d):
        d["steps"][1]["check"] = {}

    def bad_constraint(d):
        d["env_requirements"][0]["constraint"] = "approximately 3"

    def bad_kind(d):
        d["steps"][0]["kind"] = "teleport"

    def file_write_without_path(d):
        d["steps"][0]["kind"] = "file_write"

    return [
        dup_id, no_steps, bad_version, verify_without_check, zero_timeout,
        escaping_working_dir, absolute_working_dir, undeclared_variable,
        bad_port, empty_check, bad_constraint, bad_kind, file_write_without_path,
    ]


@pytest.mark.parametrize("mutate", _mutations(), ids=lambda f: f.__name__)
def test_each_invariant_violation_is_rejected(mutate):
    base = _valid_base()
    parse_guideline_data(base)  # sanity: the base document is valid
    doc = _valid_base()
    mutate(doc)
    with pytest.raises((ValidationError, UnsupportedVersion)):
        parse_guideline_data(doc)


def test_guideline_to_dict_is_yaml_safe():
    doc = parse_guideline_data(_valid_base())
    yaml.safe_dump(guideline_to_dict(doc))
