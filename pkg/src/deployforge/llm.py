"""Provider-agnostic chat-completion gateway with record/replay transcripts.

The wire format is the common chat-completion shape with a tool-call
extension; any compatible endpoint works. Replay mode makes every consumer
testable offline: requests are matched against recorded digests and a
mismatch fails loudly instead of improvising.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .errors import LlmUnavailable, MalformedToolCall, TranscriptMismatch

ENV_ENDPOINT = "DEPLOYFORGE_LLM_ENDPOINT"
ENV_KEY = "DEPLOYFORGE_LLM_KEY"
ENV_MODEL = "DEPLOYFORGE_LLM_MODEL"

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: dict


@dataclass(frozen=True)
class PromptEnvelope:
    system_text: str
    user_text: str
    tool_schemas: tuple[ToolSchema, ...] = ()
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")
        names = [t.name for t in self.tool_schemas]
        if len(names) != len(set(names)):
            raise ValueError("tool schema names must be unique")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments_text: str

    def arguments(self) -> dict:
        try:
            parsed = json.loads(self.arguments_text)
        except json.JSONDecodeError as exc:
            raise MalformedToolCall(f"tool-call arguments are not JSON: {exc}") from exc
        if not isinstance(parsed, dict):
            raise MalformedToolCall("tool-call arguments must be a JSON object")
        return parsed


@dataclass(frozen=True)
class ModelResponse:
    kind: str  # text | tool_call
    text: str | None = None
    tool_call: ToolCall | None = None
    usage: dict = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})


def canonical_digest(envelope: PromptEnvelope) -> str:
    """Content hash of the envelope, invariant to serialization field order."""
    payload = {
        "system_text": " ".join(envelope.system_text.split()),
        "user_text": " ".join(envelope.user_text.split()),
        "tool_schemas": [
            {"name": t.name, "description": t.description, "parameters": t.parameters}
            for t in envelope.tool_schemas
        ],
        "temperature": envelope.temperature,
        "max_tokens": envelope.max_tokens,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2s(blob.encode("utf-8"), digest_size=16).hexdigest()


def response_to_dict(r: ModelResponse) -> dict:
    out: dict = {"kind": r.kind, "usage": dict(r.usage)}
    if r.text is not None:
        out["text"] = r.text
    if r.tool_call is not None:
        out["tool_call"] = {"name": r.tool_call.name, "arguments_text": r.tool_call.arguments_text}
    return out


def response_from_dict(raw: dict) -> ModelResponse:
    tc = raw.get("tool_call")
    return ModelResponse(
        kind=raw["kind"],
        text=raw.get("text"),
        tool_call=ToolCall(tc["name"], tc["arguments_text"]) if tc else None,
        usage=dict(raw.get("usage", {"prompt_tokens": 0, "completion_tokens": 0})),
    )


class LlmGateway:
    """Chat-completion client in one of three modes: live, record, replay.

    live   -- HTTP round-trips with retry/backoff.
    record -- live calls, each appended to the transcript file.
    replay -- answers from the transcript only; zero network activity.
    """

    def __init__(
        self,
        mode: str = "replay",
        transcript_path: str | os.PathLike | None = None,
        transport=None,
        sleep=time.sleep,
    ):
        if mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown gateway mode: {mode!r}")
        self.mode = mode
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._transport = transport or _http_transport
        self._sleep = sleep
        self.calls_made = 0
        self._entries: list[dict] = []
        self._cursor = 0
        if mode == "replay":
            if self.transcript_path and self.transcript_path.exists():
                self._entries = [
                    json.loads(line)
                    for line in self.transcript_path.read_text(encoding="utf-8").splitlines()
                    if line.strip()
                ]

    def complete(self, envelope: PromptEnvelope) -> ModelResponse:
        self.calls_made += 1
        digest = canonical_digest(envelope)
        if self.mode == "replay":
            return self._replay(digest)
        response = self._call_live(envelope)
        if self.mode == "record":
            self._append_entry(digest, response)
        return response

    # -- replay ----------------------------------------------------------

    def _replay(self, digest: str) -> ModelResponse:
        if self._cursor >= len(self._entries):
            raise TranscriptMismatch(expected="<end of transcript>", got=digest)
        entry = self._entries[self._cursor]
        if entry["request_digest"] != digest:
            raise TranscriptMismatch(expected=entry["request_digest"], got=digest)
        self._cursor += 1
        return response_from_dict(entry["response"])

    # -- record ----------------------------------------------------------

    def _append_entry(self, digest: str, response: ModelResponse) -> None:
        if self.transcript_path is None:
            raise ValueError("record mode requires a transcript_path")
        self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(
            {"request_digest": digest, "response": response_to_dict(response)},
            sort_keys=True,
        )
        with self.transcript_path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    # -- live ------------------------------------------------------------

    def _call_live(self, envelope: PromptEnvelope) -> ModelResponse:
        last_error: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                return self._transport(envelope)
            except _RetryableTransportError as exc:
                last_error = exc
                if attempt < RETRY_ATTEMPTS - 1:
                    self._sleep(RETRY_BACKOFF_S[attempt])
        raise LlmUnavailable(f"model endpoint unavailable after {RETRY_ATTEMPTS} attempts: {last_error}")


class _RetryableTransportError(Exception):
    pass


def _http_transport(envelope: PromptEnvelope) -> ModelResponse:
    endpoint = os.environ.get(ENV_ENDPOINT)
    if not endpoint:
        raise LlmUnavailable(f"{ENV_ENDPOINT} is not configured")
    key = os.environ.get(ENV_KEY, "")
    model = os.environ.get(ENV_MODEL, "default")

    body = {
        "model": model,
        "messages": [
            {"role": "system", "content": envelope.system_text},
            {"role": "user", "content": envelope.user_text},
        ],
        "temperature": envelope.temperature,
        "max_tokens": envelope.max_tokens,
    }
    if envelope.tool_schemas:
        body["tools"] = [
            {
                "type": "function",
                "function": {
                    "name": t.name,
                    "description": t.description,
                    "parameters": t.parameters,
                },
            }
            for t in envelope.tool_schemas
        ]

    request = urllib.request.Request(
        endpoint,
        data=json.dumps(body).encode("utf-8"),
        headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {key}",
        },
        method="POST",
    )
    try:
        with urllib.request.urlopen(request, timeout=120) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code == 429 or exc.code >= 500:
            raise _RetryableTransportError(f"HTTP {exc.code}") from exc
        raise LlmUnavailable(f"HTTP {exc.code}: {exc.reason}") from exc
    except (urllib.error.URLError, OSError) as exc:
        raise _RetryableTransportError(str(exc)) from exc

    return parse_chat_completion(payload)


def parse_chat_completion(payload: dict) -> ModelResponse:
    """Map a chat-completion response body onto ModelResponse."""
    usage_raw = payload.get("usage", {})
    usage = {
        "prompt_tokens": usage_raw.get("prompt_tokens", 0),
        "completion_tokens": usage_raw.get("completion_tokens", 0),
    }
    try:
        message = payload["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise LlmUnavailable(f"unrecognized completion payload: {exc}") from exc
    tool_calls = message.get("tool_calls") or []
    if tool_calls:
        fn = tool_calls[0].get("function", {})
        return ModelResponse(
            kind="tool_call",
            tool_call=ToolCall(name=fn.get("name", ""), arguments_text=fn.get("arguments", "")),
            usage=usage,
        )
    return ModelResponse(kind="text", text=message.get("content") or "", usage=usage)
