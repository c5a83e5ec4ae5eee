"""Persistent case & solution repository with exact and semantic retrieval.

Storage is a single append-only ndjson ledger (cases.ndjson). A repeated
(fingerprint, fix) observation appends a fresh record line carrying the
bumped counters; on load, the last line per identity wins, so existing
bytes are never rewritten. The in-memory index is an optimization only:
retrieval is defined by (and tested against) a brute-force scan.
"""

from __future__ import annotations

import errno
import fcntl
import hashlib
import json
import logging
import math
import os
import platform
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .debugger import (
    CandidateFix,
    ErrorFingerprint,
    FailureDiagnosis,
    diagnosis_query_text,
    fingerprint_from_dict,
    fingerprint_to_dict,
    fix_from_dict,
    fix_hash,
    fix_to_dict,
)
from .errors import CorruptLedger, StorageFull
from .sandbox import ExecutionResult

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 256
LEDGER_NAME = "cases.ndjson"
LOCK_NAME = ".repo.lock"
CASE_SCHEMA_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


# --- reference embedder -------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    norm: float


def _bucket_and_sign(token: str) -> tuple[int, float]:
    # hashlib, not hash(): bucket assignment must agree across interpreters.
    digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
    bucket = int.from_bytes(digest[:4], "big") % EMBEDDING_DIM
    sign = 1.0 if digest[4] & 1 else -1.0
    return bucket, sign


def embed_text(text: str) -> EmbeddingVector:
    """Deterministic feature-hashing embedding over tokens and bigrams."""
    tokens = _TOKEN_RE.findall(text.lower())
    acc = [0.0] * EMBEDDING_DIM
    features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    for feature in features:
        bucket, sign = _bucket_and_sign(feature)
        acc[bucket] += sign
    norm = math.sqrt(sum(v * v for v in acc))
    if norm > 0:
        acc = [v / norm for v in acc]
        norm = 1.0
    return EmbeddingVector(values=tuple(acc), norm=norm)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    # Zero vectors are defined to have similarity 0, never NaN.
    if a.norm == 0 or b.norm == 0:
        return 0.0
    dot = sum(x * y for x, y in zip(a.values, b.values))
    return dot / (a.norm * b.norm)


# --- records ------------------------------------------------------------------

@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    fingerprint: ErrorFingerprint
    error_class: str
    context: dict
    fix: CandidateFix
    outcome: str  # outcome of the most recent observation
    uses: int
    successes: int
    created_at: str
    last_used: str
    embedding: EmbeddingVector

    @property
    def success_ratio(self) -> float:
        return self.successes / self.uses if self.uses else 0.0


def case_identity(digest: str, fhash: str) -> str:
    return hashlib.blake2s(f"{digest}:{fhash}".encode(), digest_size=8).hexdigest()


def case_to_dict(record: CaseRecord) -> dict:
    return {
        "schema_version": CASE_SCHEMA_VERSION,
        "case_id": record.case_id,
        "fingerprint": fingerprint_to_dict(record.fingerprint),
        "error_class": record.error_class,
        "context": dict(record.context),
        "fix": fix_to_dict(record.fix),
        "outcome": record.outcome,
        "uses": record.uses,
        "successes": record.successes,
        "created_at": record.created_at,
        "last_used": record.last_used,
        "embedding": {"values": list(record.embedding.values), "norm": record.embedding.norm},
    }


def case_from_dict(raw: dict) -> CaseRecord:
    emb = raw["embedding"]
    return CaseRecord(
        case_id=raw["case_id"],
        fingerprint=fingerprint_from_dict(raw["fingerprint"]),
        error_class=raw["error_class"],
        context=dict(raw["context"]),
        fix=fix_from_dict(raw["fix"]),
        outcome=raw["outcome"],
        uses=raw["uses"],
        successes=raw["successes"],
        created_at=raw["created_at"],
        last_used=raw["last_used"],
        embedding=EmbeddingVector(values=tuple(emb["values"]), norm=emb["norm"]),
    )


_REQUIRED_FIELDS = (
    "case_id", "fingerprint", "error_class", "fix", "outcome",
    "uses", "successes", "created_at", "last_used", "embedding",
)


@dataclass
class RepositoryIndex:
    by_fingerprint: dict[str, list[str]]
    vectors: dict[str, EmbeddingVector]


class KnowledgeRepository:
    """Handle over one repository directory; open with open_repository()."""

    def __init__(self, root: Path, records: dict[str, CaseRecord]):
        self.root = root
        self._records = records
        self._index = self._build_index()

    # -- loading ---------------------------------------------------------

    @property
    def ledger_path(self) -> Path:
        return self.root / LEDGER_NAME

    def _build_index(self) -> RepositoryIndex:
        by_fp: dict[str, list[str]] = {}
        vectors: dict[str, EmbeddingVector] = {}
        for record in self._records.values():
            by_fp.setdefault(record.fingerprint.digest, []).append(record.case_id)
            vectors[record.case_id] = record.embedding
        return RepositoryIndex(by_fingerprint=by_fp, vectors=vectors)

    def rebuild_index(self) -> RepositoryIndex:
        self._index = self._build_index()
        return self._index

    @property
    def index(self) -> RepositoryIndex:
        return self._index

    def __len__(self) -> int:
        return len(self._records)

    def all_cases(self) -> list[CaseRecord]:
        return list(self._records.values())

    def get(self, case_id: str) -> CaseRecord | None:
        return self._records.get(case_id)

    # -- accumulation ----------------------------------------------------

    def merge_case(
        self, diag: FailureDiagnosis, fix: CandidateFix, result: ExecutionResult
    ) -> str:
        """Record one (failure, fix, outcome) observation; dedup by identity."""
        outcome = "success" if result.status == "success" else "failure"
        fhash = fix_hash(fix.remedial_steps)
        case_id = case_identity(diag.fingerprint.digest, fhash)
        now = datetime.now(timezone.utc).isoformat()

        existing = self._records.get(case_id)
        if existing is not None:
            record = replace(
                existing,
                outcome=outcome,
                uses=existing.uses + 1,
                successes=existing.successes + (1 if outcome == "success" else 0),
                last_used=now,
            )
        else:
            record = CaseRecord(
                case_id=case_id,
                fingerprint=diag.fingerprint,
                error_class=diag.error_class,
                context={
                    "os": platform.platform(),
                    "tool_versions": dict(diag.env_context.tool_versions),
                },
                fix=fix,
                outcome=outcome,
                uses=1,
                successes=1 if outcome == "success" else 0,
                created_at=now,
                last_used=now,
                embedding=embed_text(diagnosis_query_text(diag)),
            )

        line = json.dumps(case_to_dict(record), sort_keys=True) + "\n"
        lock_path = self.root / LOCK_NAME
        with open(lock_path, "a+", encoding="utf-8") as lock_fh:
            fcntl.flock(lock_fh, fcntl.LOCK_EX)
            try:
                with self.ledger_path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise StorageFull(str(exc)) from exc
                raise
            finally:
                fcntl.flock(lock_fh, fcntl.LOCK_UN)

        self._records[case_id] = record
        bucket = self._index.by_fingerprint.setdefault(record.fingerprint.digest, [])
        if case_id not in bucket:
            bucket.append(case_id)
        self._index.vectors[case_id] = record.embedding
        return case_id

    # -- retrieval -------------------------------------------------------

    def retrieve_exact(self, fp: ErrorFingerprint, k: int) -> list[CaseRecord]:
        """All records matching the digest, best success ratio first."""
        if k < 1:
            raise ValueError("k must be >= 1")
        ids = self._index.by_fingerprint.get(fp.digest, [])
        records = [self._records[cid] for cid in ids]
        # success_ratio desc, then last_used desc; stable sorts compose.
        records.sort(key=lambda r: r.last_used, reverse=True)
        records.sort(key=lambda r: r.success_ratio, reverse=True)
        return records[:k]

    def retrieve_semantic(
        self, query_text: str, k: int, min_similarity: float
    ) -> list[tuple[CaseRecord, float]]:
        """Brute-force cosine scan; descending similarity, case_id tiebreak.

        Ranking and thresholding quantize similarity to 12 decimals so the
        order is reproducible across arithmetic backends (a numpy oracle
        and this pure-Python scan disagree in the last ulps otherwise).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= min_similarity <= 1.0:
            raise ValueError("min_similarity must be in [0, 1]")
        query = embed_text(query_text)
        scored = [
            (record, round(cosine_similarity(query, record.embedding), 12))
            for record in self._records.values()
        ]
        eligible = [(r, s) for r, s in scored if s >= min_similarity]
        eligible.sort(key=lambda pair: (-pair[1], pair[0].case_id))
        return eligible[:k]

    def stats(self) -> dict:
        by_class: dict[str, int] = {}
        uses = successes = 0
        for record in self._records.values():
            by_class[record.error_class] = by_class.get(record.error_class, 0) + 1
            uses += record.uses
            successes += record.successes
        return {
            "records": len(self._records),
            "by_class": by_class,
            "uses": uses,
            "successes": successes,
            "overall_success_ratio": (successes / uses) if uses else 0.0,
        }


def open_repository(path: str | os.PathLike) -> KnowledgeRepository:
    """Open (or create) a repository directory, validating the ledger.

    A trailing partial line is a crash artifact: it is dropped with a
    warning. A malformed line anywhere else means real corruption and
    raises CorruptLedger.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ledger = root / LEDGER_NAME
    records: dict[str, CaseRecord] = {}
    if ledger.exists():
        raw = ledger.read_text(encoding="utf-8")
        lines = raw.split("\n")
        # A file ending in newline splits to [.., ""]; anything else in the
        # last slot is a write that never completed.
        trailing_partial = lines[-1] != ""
        body = lines[:-1]
        for lineno, line in enumerate(body, start=1):
            if line == "":
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise ValueError("not an object")
                for field_name in _REQUIRED_FIELDS:
                    if field_name not in data:
                        raise ValueError(f"missing field {field_name!r}")
                record = case_from_dict(data)
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptLedger(f"{ledger}:{lineno}: {exc}") from exc
            records[record.case_id] = record
        if trailing_partial:
            partial = lines[-1]
            try:
                data = json.loads(partial)
                record = case_from_dict(data)
                records[record.case_id] = record
            except (ValueError, KeyError, TypeError):
                logger.warning(
                    "dropping truncated trailing line in %s (%d bytes)", ledger, len(partial)
                )
    return KnowledgeRepository(root=root, records=records)
