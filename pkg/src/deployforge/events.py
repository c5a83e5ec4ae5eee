"""Append-only run journal: line-delimited JSON events, one file per run.

The journal is the source of truth for a run: the transcript is a fold
over it, the dashboard streams it, and resume replays it. Events hit disk
before anyone else sees them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterator

EVENT_KINDS = (
    "run_started",
    "step_started",
    "output_chunk",
    "step_finished",
    "diagnosis",
    "fix_proposed",
    "fix_applied",
    "approval_requested",
    "approval_resolved",
    "knowledge_merged",
    "run_finished",
)

# Fields erased when comparing journals across runs: wall-clock readings,
# measured durations, resource headroom, and the run identity itself.
VOLATILE_KEYS = frozenset({
    "at",
    "started_at",
    "ended_at",
    "captured_at",
    "created_at",
    "last_used",
    "duration_ms",
    "free_disk_gb",
    "free_mem_gb",
    "run_id",
})


@dataclass(frozen=True)
class RunEvent:
    seq: int
    run_id: str
    kind: str
    payload: dict
    at: str


def event_to_dict(event: RunEvent) -> dict:
    return {
        "seq": event.seq,
        "run_id": event.run_id,
        "kind": event.kind,
        "payload": event.payload,
        "at": event.at,
    }


def event_from_dict(raw: dict) -> RunEvent:
    return RunEvent(
        seq=raw["seq"], run_id=raw["run_id"], kind=raw["kind"],
        payload=raw["payload"], at=raw["at"],
    )


class JournalWriter:
    """Single writer for one run's journal; seq numbering is gapless.

    Reopening an existing journal continues the numbering, which is what
    makes resumed runs append seamlessly.
    """

    def __init__(self, path: str | Path, run_id: str,
                 on_event: Callable[[RunEvent], None] | None = None):
        self.path = Path(path)
        self.run_id = run_id
        self.on_event = on_event
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._next_seq = sum(1 for _ in read_journal(self.path)) + 1 if self.path.exists() else 1
        self._fh = self.path.open("a", encoding="utf-8")

    def emit(self, kind: str, payload: dict) -> RunEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind: {kind!r}")
        event = RunEvent(
            seq=self._next_seq,
            run_id=self.run_id,
            kind=kind,
            payload=payload,
            at=datetime.now(timezone.utc).isoformat(),
        )
        self._next_seq += 1
        self._fh.write(json.dumps(event_to_dict(event), sort_keys=True) + "\n")
        self._fh.flush()
        if self.on_event:
            self.on_event(event)
        return event

    def close(self) -> None:
        self._fh.close()


def read_journal(path: str | Path) -> Iterator[RunEvent]:
    path = Path(path)
    if not path.exists():
        return
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield event_from_dict(json.loads(line))


def _erase_volatile(value: Any) -> Any:
    if isinstance(value, dict):
        return {
            k: (None if k in VOLATILE_KEYS else _erase_volatile(v))
            for k, v in value.items()
        }
    if isinstance(value, list):
        return [_erase_volatile(v) for v in value]
    return value


def normalize_journal(path: str | Path) -> str:
    """Journal rendered for cross-run comparison: volatile fields nulled.

    Two runs of the same deterministic scenario must normalize to byte-equal
    strings.
    """
    out_lines = []
    for event in read_journal(path):
        erased = _erase_volatile(event_to_dict(event))
        out_lines.append(json.dumps(erased, sort_keys=True))
    return "\n".join(out_lines) + "\n"
