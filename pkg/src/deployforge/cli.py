"""Command-line surface: deploy, resume, replay-manifest, knowledge, serve.

Configuration precedence is flags > DEPLOYFORGE_* env vars > defaults.
Exit codes: 0 succeeded, 1 failed/not-found, 2 aborted, 64 usage error,
65 validation error, 66 corrupt knowledge ledger.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .debugger import RetryBudget
from .errors import (
    CorruptLedger,
    DeployForgeError,
    ParseError,
    UnsupportedVersion,
    ValidationError,
)
from .events import RunEvent
from .guideline import parse_guideline
from .knowledge import open_repository
from .llm import LlmGateway
from .packager import load_manifest, missing_layout_paths, package_agent, replay_manifest
from .runner import ApprovalBroker, resume_run, run_deployment
from .sandbox import ExecutionEnvironment, create_sandbox
from .server import ServerConfig, serve_forever

EXIT_SUCCEEDED = 0
EXIT_FAILED = 1
EXIT_ABORTED = 2
EXIT_USAGE = 64
EXIT_VALIDATION = 65
EXIT_CORRUPT_LEDGER = 66


@dataclass
class CliConfig:
    state_dir: Path
    sandbox_root: Path
    repo_path: Path
    llm_mode: str
    transcript_path: Path | None
    network_allowed: bool
    budgets: RetryBudget
    listen_addr: str


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 64, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _env(name: str, default: str) -> str:
    return os.environ.get(f"DEPLOYFORGE_{name}", default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deployforge", description=__doc__)
    parser.add_argument("--state-dir", default=_env("STATE_DIR", "./deployforge-state"))
    parser.add_argument("--sandbox-root", default=_env("SANDBOX_ROOT", ""))
    parser.add_argument("--repo", default=_env("REPO", ""))
    parser.add_argument("--llm-mode", choices=["live", "record", "replay"],
                        default=_env("LLM_MODE", "replay"))
    parser.add_argument("--transcript", default=_env("LLM_TRANSCRIPT", ""))
    parser.add_argument("--network", dest="network", action="store_true", default=None)
    parser.add_argument("--no-network", dest="network", action="store_false")
    parser.add_argument("--per-step-budget", type=int, default=5)
    parser.add_argument("--global-budget", type=int, default=25)
    parser.add_argument("--listen", default=_env("LISTEN", "127.0.0.1:8321"))

    sub = parser.add_subparsers(dest="command", required=True)

    deploy = sub.add_parser("deploy", help="run a guideline inside a fresh sandbox")
    deploy.add_argument("guideline", help="path to the guideline YAML")
    deploy.add_argument("--run-id", default="")
    deploy.add_argument("--var", action="append", default=[], metavar="NAME=VALUE")
    deploy.add_argument("--approve-all", action="store_true",
                        help="resolve every approval gate as approved")
    deploy.add_argument("--approval-timeout", type=float, default=3600.0)

    resume = sub.add_parser("resume", help="continue an interrupted run")
    resume.add_argument("run_id")
    resume.add_argument("--approve-all", action="store_true")
    resume.add_argument("--approval-timeout", type=float, default=3600.0)

    replay = sub.add_parser("replay-manifest", help="relaunch a packaged agent and health-check it")
    replay.add_argument("manifest", help="path to agent.yaml")
    replay.add_argument("--workspace", default="", help="workspace dir (defaults to the manifest's)")
    replay.add_argument("--poll-interval", type=float, default=2.0)
    replay.add_argument("--deadline", type=float, default=120.0)

    knowledge = sub.add_parser("knowledge", help="inspect the case repository")
    ksub = knowledge.add_subparsers(dest="subcommand", required=True)
    ksub.add_parser("list")
    show = ksub.add_parser("show")
    show.add_argument("case_id")
    search = ksub.add_parser("search")
    search.add_argument("query")
    search.add_argument("-k", type=int, default=5)
    ksub.add_parser("stats")

    sub.add_parser("serve", help="serve the HTTP control surface and dashboard")
    return parser


def _config_from_args(args) -> CliConfig:
    state_dir = Path(args.state_dir)
    sandbox_root = Path(args.sandbox_root) if args.sandbox_root else state_dir / "sandboxes"
    repo_path = Path(args.repo) if args.repo else state_dir / "knowledge"
    network = args.network if args.network is not None else True
    return CliConfig(
        state_dir=state_dir,
        sandbox_root=sandbox_root,
        repo_path=repo_path,
        llm_mode=args.llm_mode,
        transcript_path=Path(args.transcript) if args.transcript else None,
        network_allowed=network,
        budgets=RetryBudget(per_step=args.per_step_budget, global_limit=args.global_budget),
        listen_addr=args.listen,
    )


# --- terminal rendering --------------------------------------------------------

def render_event(event: RunEvent, out=None) -> None:
    out = out if out is not None else sys.stdout
    p = event.payload
    kind = event.kind
    if kind == "run_started":
        line = f"run {event.run_id} started: {p['guideline']['project_name']}"
    elif kind == "step_started":
        tag = "fix" if p.get("remedial") else "step"
        line = f"  [{tag}] {p['step_id']} (attempt {p['attempt']}) started"
    elif kind == "output_chunk":
        line = f"    {p['stream']}> {p['text'].rstrip()}"
    elif kind == "step_finished":
        result = p["result"]
        line = f"  [{'fix' if p.get('remedial') else 'step'}] {p['step_id']} -> {result['status']}"
        if result.get("failed_check"):
            line += f" (check: {result['failed_check']})"
    elif kind == "diagnosis":
        line = f"  diagnosis: {p['error_class']} [{p['digest'][:12]}] {p['summary'][:80]}"
    elif kind == "fix_proposed":
        line = f"  fix proposed ({p['origin']}, risk {p['risk']}): {p['fix_id']}"
    elif kind == "fix_applied":
        line = f"  fix attempt #{p['attempt']} -> {p['outcome']}"
    elif kind == "approval_requested":
        line = f"  approval needed [{p['approval_id']}] ({p['reason']}): {p['rendered_command']}"
    elif kind == "approval_resolved":
        line = f"  approval {p['approval_id']} -> {p['decision']}"
    elif kind == "knowledge_merged":
        line = f"  knowledge: case {p['case_id'][:12]} {p['outcome']} [{p['digest'][:12]}]"
    elif kind == "run_finished":
        line = f"run finished: {p['outcome']}"
    else:
        line = f"  {kind}: {json.dumps(p)[:100]}"
    print(line, file=out)


class PromptApprovals(ApprovalBroker):
    """Inline approval prompts for terminal runs without a dashboard."""

    def submit(self, request) -> None:
        super().submit(request)
        print(f"\napproval required for step {request.step_id} ({request.reason}):")
        print(f"  $ {request.rendered_command}")
        if sys.stdin.isatty():
            answer = input("approve? [y/N] ").strip().lower()
            decision = "approved" if answer.startswith("y") else "rejected"
        else:
            print("stdin is not interactive; rejecting (use --approve-all to override)")
            decision = "rejected"
        self.resolve(request.approval_id, decision)


# --- commands -------------------------------------------------------------------

def _parse_vars(pairs: list[str]) -> dict[str, str]:
    bindings = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            raise ValueError(f"--var expects NAME=VALUE, got {pair!r}")
        bindings[name] = value
    return bindings


def _gateway(config: CliConfig) -> LlmGateway:
    return LlmGateway(mode=config.llm_mode, transcript_path=config.transcript_path)


def _outcome_exit(outcome: str | None) -> int:
    return {"succeeded": EXIT_SUCCEEDED, "failed_exhausted": EXIT_FAILED,
            "aborted": EXIT_ABORTED}.get(outcome or "", EXIT_FAILED)


def cmd_deploy(args, config: CliConfig) -> int:
    try:
        bindings = _parse_vars(args.var)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    guideline = parse_guideline(Path(args.guideline).read_text(encoding="utf-8"))
    run_id = args.run_id or f"run-{int(time.time())}-{os.getpid()}"
    env = create_sandbox(run_id, config.network_allowed, config.sandbox_root)
    repo = open_repository(config.repo_path)
    approvals = ApprovalBroker(auto="approved") if args.approve_all else PromptApprovals()
    transcript = run_deployment(
        guideline, env, repo, config.budgets,
        state_dir=config.state_dir, llm=_gateway(config), bindings=bindings,
        approvals=approvals, approval_timeout_s=args.approval_timeout,
        on_event=render_event,
    )
    if transcript.outcome == "succeeded":
        manifest = package_agent(transcript, env)
        print(f"packaged agent manifest: {env.workspace_root}/agent.yaml "
              f"(start: {manifest.entrypoints['start']!r})")
    return _outcome_exit(transcript.outcome)


def cmd_resume(args, config: CliConfig) -> int:
    approvals = ApprovalBroker(auto="approved") if args.approve_all else PromptApprovals()
    transcript = resume_run(
        args.run_id, state_dir=config.state_dir, repo=open_repository(config.repo_path),
        budget=config.budgets, llm=_gateway(config), approvals=approvals,
        approval_timeout_s=args.approval_timeout, on_event=render_event,
    )
    return _outcome_exit(transcript.outcome)


def cmd_replay_manifest(args, config: CliConfig) -> int:
    manifest = load_manifest(args.manifest)
    workspace = Path(args.workspace) if args.workspace else Path(args.manifest).parent
    env = ExecutionEnvironment(
        workspace_root=str(workspace),
        env_vars={"HOME": str(workspace), "LANG": os.environ.get("LANG", "C.UTF-8")},
        path_entries=os.environ.get("PATH", "/usr/bin:/bin").split(os.pathsep),
        network_allowed=config.network_allowed,
    )
    missing = missing_layout_paths(manifest, env)
    status = replay_manifest(manifest, env, poll_interval_s=args.poll_interval,
                             deadline_s=args.deadline)
    print(f"replay: {status}")
    if status == "layout_mismatch":
        for rel in missing:
            print(f"  missing: {rel}")
        return 3
    return {"healthy": 0, "unhealthy": 2}[status]


def cmd_knowledge(args, config: CliConfig) -> int:
    repo = open_repository(config.repo_path)
    if args.subcommand == "stats":
        stats = repo.stats()
        print(f"records: {stats['records']}")
        print(f"uses: {stats['uses']}  successes: {stats['successes']}  "
              f"success ratio: {stats['overall_success_ratio']:.2f}")
        for cls, count in sorted(stats["by_class"].items()):
            print(f"  {cls}: {count}")
    elif args.subcommand == "list":
        for case in sorted(repo.all_cases(), key=lambda c: c.last_used, reverse=True):
            print(f"{case.case_id}  {case.error_class:20s} {case.successes}/{case.uses}  "
                  f"{case.fingerprint.normalized_text[:60]}")
    elif args.subcommand == "show":
        case = repo.get(args.case_id)
        if case is None:
            print(f"case not found: {args.case_id}", file=sys.stderr)
            return EXIT_FAILED
        print(json.dumps(_case_view(case), indent=2))
    elif args.subcommand == "search":
        hits = repo.retrieve_semantic(args.query, k=args.k, min_similarity=0.0)
        for case, similarity in hits:
            print(f"{similarity:.4f}  {case.case_id}  {case.error_class:20s} "
                  f"{case.fingerprint.normalized_text[:60]}")
    return EXIT_SUCCEEDED


def _case_view(case) -> dict:
    return {
        "case_id": case.case_id,
        "error_class": case.error_class,
        "digest": case.fingerprint.digest,
        "normalized_text": case.fingerprint.normalized_text,
        "outcome": case.outcome,
        "uses": case.uses,
        "successes": case.successes,
        "created_at": case.created_at,
        "last_used": case.last_used,
        "fix": {
            "fix_id": case.fix.fix_id,
            "origin": case.fix.origin,
            "steps": [s.run for s in case.fix.remedial_steps],
        },
    }


def cmd_serve(args, config: CliConfig) -> int:
    assets = Path("frontend/dist")
    serve_forever(ServerConfig(
        state_dir=config.state_dir,
        sandbox_root=config.sandbox_root,
        repo_path=config.repo_path,
        listen_addr=config.listen_addr,
        network_allowed=config.network_allowed,
        llm_mode=config.llm_mode,
        transcript_path=config.transcript_path,
        assets_dir=assets if assets.is_dir() else None,
        per_step_budget=config.budgets.per_step,
        global_budget=config.budgets.global_limit,
    ))
    return EXIT_SUCCEEDED


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    config = _config_from_args(args)
    try:
        if args.command == "deploy":
            return cmd_deploy(args, config)
        if args.command == "resume":
            return cmd_resume(args, config)
        if args.command == "replay-manifest":
            return cmd_replay_manifest(args, config)
        if args.command == "knowledge":
            return cmd_knowledge(args, config)
        if args.command == "serve":
            return cmd_serve(args, config)
        parser.error(f"unknown command {args.command!r}")
    except (ParseError, ValidationError, UnsupportedVersion) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CorruptLedger as exc:
        print(f"corrupt knowledge ledger: {exc}", file=sys.stderr)
        return EXIT_CORRUPT_LEDGER
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILED
    except DeployForgeError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
