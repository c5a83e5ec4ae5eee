"""Shared machinery for driving scenarios and scripting the model gateway."""

from __future__ import annotations

import json
from pathlib import Path

from deployforge.debugger import RetryBudget
from deployforge.knowledge import open_repository
from deployforge.llm import LlmGateway, ModelResponse, ToolCall
from deployforge.runner import ApprovalBroker, run_deployment
from deployforge.sandbox import create_sandbox
from deployforge.scenario import Scenario, load_scenario, materialize, seed_repository

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "testdata" / "scenarios"


def scenario(name: str) -> Scenario:
    matches = sorted(SCENARIO_DIR.glob(f"*{name}*.yaml"))
    assert matches, f"no scenario file matches {name!r}"
    return load_scenario(matches[0])


def propose_fix_response(commands: list[str], rationale: str = "scripted fix") -> ModelResponse:
    args = json.dumps({
        "rationale": rationale,
        "steps": [{"kind": "command", "run": run} for run in commands],
    })
    return ModelResponse(kind="tool_call", tool_call=ToolCall("propose_fix", args),
                         usage={"prompt_tokens": 20, "completion_tokens": 10})


class ScriptedTransport:
    """Pops one canned response per call; repeats the last one when drained."""

    def __init__(self, responses: list[ModelResponse]):
        self.responses = list(responses)
        self.calls = 0

    def __call__(self, envelope) -> ModelResponse:
        self.calls += 1
        if len(self.responses) > 1:
            return self.responses.pop(0)
        return self.responses[0]


class CountingFixTransport:
    """Proposes a distinct (useless or useful) fix on every call."""

    def __init__(self, command_template: str = "true # attempt {n}"):
        self.command_template = command_template
        self.calls = 0

    def __call__(self, envelope) -> ModelResponse:
        self.calls += 1
        return propose_fix_response([self.command_template.format(n=self.calls)])


def run_scenario(
    sc: Scenario,
    dirs: dict,
    run_id: str,
    *,
    seed: bool = True,
    llm: LlmGateway | None = None,
    budget: RetryBudget | None = None,
    approvals: ApprovalBroker | None = None,
    repo_path: Path | None = None,
    on_event=None,
):
    """Materialize and run one scenario; returns (transcript, env, repo)."""
    repo = open_repository(repo_path or dirs["repo_path"])
    if seed:
        seed_repository(repo, sc)
    env = create_sandbox(run_id, False, dirs["sandbox_root"])
    materialize(sc, env.workspace_root)
    transcript = run_deployment(
        sc.guideline,
        env,
        repo,
        budget or RetryBudget(),
        state_dir=dirs["state_dir"],
        llm=llm if llm is not None else LlmGateway(mode="replay"),
        approvals=approvals or ApprovalBroker(auto="approved"),
        on_event=on_event,
    )
    return transcript, env, repo


def record_scenario_transcript(
    sc: Scenario,
    dirs: dict,
    transport,
    name: str,
    *,
    budget: RetryBudget | None = None,
) -> Path:
    """Run once in record mode against a scripted transport; returns the
    transcript path for replaying the exact same run later."""
    path = dirs["tmp"] / f"{name}.transcript.ndjson"
    gateway = LlmGateway(mode="record", transcript_path=path, transport=transport)
    run_scenario(
        sc, dirs, f"{name}-recording", seed=False, llm=gateway,
        budget=budget or RetryBudget(),
        repo_path=dirs["tmp"] / f"{name}-recording-repo",
    )
    return path
