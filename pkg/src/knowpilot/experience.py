"""Experiential knowledge: capture, persist, and retrieve the three kinds of
human intervention (direct edits, corrective prompts, refinements), plus the
word-level diff engine that makes direct edits replayable.

Records are immutable once written; corrections create new records.  The
store is an append-only experience.jsonl, one record per line, embeddings
base64-encoded little-endian float32 as in the knowledge store.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .knowledge import (
    Embedder,
    EmbeddingUnavailable,
    StubEmbedder,
    VectorIndex,
    decode_embedding,
    encode_embedding,
    _read_jsonl,
)
from .model import ExperienceKind, ExperienceRecord, canonical_json, derive_id

RELEVANCE_THRESHOLD = 0.25
DEFAULT_LIMIT = 5

KEEP = "keep"
DELETE = "delete"
INSERT = "insert"


class ExperienceError(Exception):
    pass


class InvalidPayload(ExperienceError):
    pass


class ScriptMismatch(ExperienceError):
    pass


def tokenize(text: str) -> list[str]:
    """Word tokens: whitespace split, punctuation stays attached to its word."""
    return text.split()


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class EditOp:
    kind: str
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.kind not in (KEEP, DELETE, INSERT):
            raise ValueError(f"unknown edit op kind: {self.kind}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EditOp":
        return cls(kind=raw["kind"], tokens=tuple(raw["tokens"]))


def compute_edit_script(original: str, revised: str) -> list[EditOp]:
    """Minimal word-level edit script from ``original`` to ``revised``.

    Tokens are aligned on a longest common subsequence, so the number of
    deleted plus inserted tokens is minimal.  The script is canonical: runs
    are merged, deletes precede inserts at each divergence.
    """
    a = tokenize(original)
    b = tokenize(revised)
    vocab: dict[str, int] = {}
    a_ids = [vocab.setdefault(tok, len(vocab)) for tok in a]
    b_ids = [vocab.setdefault(tok, len(vocab)) for tok in b]
    keep_a, keep_b = kernels.lcs_keep_flags(a_ids, b_ids)

    ops: list[EditOp] = []
    ia = ib = 0
    n, m = len(a), len(b)
    while ia < n or ib < m:
        start = ia
        while ia < n and not keep_a[ia]:
            ia += 1
        if ia > start:
            ops.append(EditOp(DELETE, tuple(a[start:ia])))
        start = ib
        while ib < m and not keep_b[ib]:
            ib += 1
        if ib > start:
            ops.append(EditOp(INSERT, tuple(b[start:ib])))
        start = ia
        while ia < n and ib < m and keep_a[ia] and keep_b[ib]:
            ia += 1
            ib += 1
        if ia > start:
            ops.append(EditOp(KEEP, tuple(a[start:ia])))
    return ops


def apply_edit_script(original: str, script: Sequence[EditOp]) -> str:
    """Inverse of compute_edit_script: replay the ops against ``original``.

    The keep/delete tokens must equal the original's token sequence in
    order; output joins tokens with single spaces."""
    source = tokenize(original)
    pos = 0
    out: list[str] = []
    for op in script:
        if op.kind in (KEEP, DELETE):
            expected = list(op.tokens)
            actual = source[pos : pos + len(expected)]
            if actual != expected:
                raise ScriptMismatch(
                    f"{op.kind} tokens {expected[:5]}... do not match source "
                    f"{actual[:5]}..."
                )
            pos += len(expected)
            if op.kind == KEEP:
                out.extend(op.tokens)
        else:
            out.extend(op.tokens)
    if pos != len(source):
        raise ScriptMismatch(f"{len(source) - pos} source tokens left unconsumed")
    return " ".join(out)


def script_cost(script: Iterable[EditOp]) -> int:
    """Deleted plus inserted token count."""
    return sum(len(op.tokens) for op in script if op.kind != KEEP)


def validate_script_form(script: Sequence[EditOp]) -> list[str]:
    violations = []
    for i, op in enumerate(script):
        if not op.tokens:
            violations.append(f"empty op at index {i}")
        if i and op.kind == script[i - 1].kind:
            violations.append(f"consecutive {op.kind} ops at index {i}")
    return violations


@dataclass(frozen=True)
class DirectEditPayload:
    original: str
    revised: str
    edit_script: tuple[EditOp, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "original": self.original,
            "revised": self.revised,
            "edit_script": [op.to_dict() for op in self.edit_script],
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "DirectEditPayload":
        return cls(
            original=raw["original"],
            revised=raw["revised"],
            edit_script=tuple(EditOp.from_dict(op) for op in raw["edit_script"]),
        )

    @classmethod
    def from_texts(cls, original: str, revised: str) -> "DirectEditPayload":
        return cls(
            original=original,
            revised=revised,
            edit_script=tuple(compute_edit_script(original, revised)),
        )


@dataclass(frozen=True)
class CorrectivePromptPayload:
    instruction: str
    before: str
    after: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "instruction": self.instruction,
            "before": self.before,
            "after": self.after,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "CorrectivePromptPayload":
        return cls(
            instruction=raw["instruction"], before=raw["before"], after=raw["after"]
        )


@dataclass(frozen=True)
class RefinementPayload:
    original_phrase: str
    revised_phrase: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_phrase": self.original_phrase,
            "revised_phrase": self.revised_phrase,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RefinementPayload":
        return cls(
            original_phrase=raw["original_phrase"],
            revised_phrase=raw["revised_phrase"],
        )


Payload = DirectEditPayload | CorrectivePromptPayload | RefinementPayload

_PAYLOAD_TYPES: dict[ExperienceKind, type] = {
    ExperienceKind.DIRECT_EDIT: DirectEditPayload,
    ExperienceKind.CORRECTIVE_PROMPT: CorrectivePromptPayload,
    ExperienceKind.REFINEMENT: RefinementPayload,
}


def payload_from_dict(kind: ExperienceKind, raw: Mapping[str, Any]) -> Payload:
    return _PAYLOAD_TYPES[kind].from_dict(raw)


def validate_payload(kind: ExperienceKind, payload: Payload) -> None:
    """Raise InvalidPayload unless ``payload`` matches ``kind`` and its
    invariants hold."""
    expected = _PAYLOAD_TYPES[kind]
    if not isinstance(payload, expected):
        raise InvalidPayload(
            f"kind {kind.value} requires {expected.__name__}, "
            f"got {type(payload).__name__}"
        )
    if isinstance(payload, DirectEditPayload):
        problems = validate_script_form(payload.edit_script)
        if problems:
            raise InvalidPayload("; ".join(problems))
        try:
            replayed = apply_edit_script(payload.original, payload.edit_script)
        except ScriptMismatch as exc:
            raise InvalidPayload(f"edit script does not apply: {exc}") from exc
        if replayed != normalize_ws(payload.revised):
            raise InvalidPayload("edit script does not reproduce the revised text")
    elif isinstance(payload, CorrectivePromptPayload):
        if not payload.instruction.strip():
            raise InvalidPayload("instruction must be non-empty")
    elif isinstance(payload, RefinementPayload):
        if payload.original_phrase == payload.revised_phrase:
            raise InvalidPayload("refinement phrases must differ")


class ExperienceStore:
    """Append-only record store with cosine retrieval over the context
    descriptors.  Appends are serialized; reads scan a reference snapshot."""

    def __init__(self, root: str | Path, embedder: Embedder | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.embedder = embedder or StubEmbedder()
        self._write_lock = threading.RLock()
        self._records: tuple[ExperienceRecord, ...] = ()
        self._index: VectorIndex | None = None
        self._load()

    @property
    def _path(self) -> Path:
        return self.root / "experience.jsonl"

    def _load(self) -> None:
        records = []
        for line in _read_jsonl(self._path):
            payload_raw = line["payload"]
            records.append(
                ExperienceRecord(
                    record_id=line["record_id"],
                    kind=ExperienceKind(line["kind"]),
                    context_descriptor=line["context_descriptor"],
                    payload=dict(payload_raw),
                    embedding=tuple(decode_embedding(line["embedding_b64"]).tolist()),
                    captured_at=int(line["captured_at"]),
                    session_id=line["session_id"],
                )
            )
        self._records = tuple(records)
        self._index = None

    def count(self) -> int:
        return len(self._records)

    def records(self) -> tuple[ExperienceRecord, ...]:
        return self._records

    def by_id(self, record_id: str) -> ExperienceRecord | None:
        for record in self._records:
            if record.record_id == record_id:
                return record
        return None

    def record(
        self,
        kind: ExperienceKind,
        payload: Payload,
        context_descriptor: str,
        session_id: str,
        captured_at: int | None = None,
        record_id: str | None = None,
    ) -> ExperienceRecord:
        validate_payload(kind, payload)
        if captured_at is None:
            captured_at = int(time.time() * 1000)
        with self._write_lock:
            if record_id is None:
                record_id = derive_id(
                    "exp", session_id, captured_at, len(self._records), kind.value
                )
            vec = np.asarray(self.embedder.embed(context_descriptor), dtype=np.float64)
            if not np.all(np.isfinite(vec)) or float(np.linalg.norm(vec)) == 0.0:
                raise EmbeddingUnavailable("embedder returned a degenerate vector")
            vec32 = vec.astype("<f4").astype(np.float64)
            rec = ExperienceRecord(
                record_id=record_id,
                kind=kind,
                context_descriptor=context_descriptor,
                payload=payload.to_dict(),
                embedding=tuple(vec32.tolist()),
                captured_at=captured_at,
                session_id=session_id,
            )
            line = {
                "record_id": rec.record_id,
                "kind": rec.kind.value,
                "context_descriptor": rec.context_descriptor,
                "payload": dict(rec.payload),
                "embedding_b64": encode_embedding(np.asarray(rec.embedding)),
                "captured_at": rec.captured_at,
                "session_id": rec.session_id,
            }
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(line) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records = self._records + (rec,)
            self._index = None
            return rec

    def index(self) -> VectorIndex:
        index = self._index
        if index is None or len(index) != len(self._records):
            index = VectorIndex.build(
                [(r.record_id, np.asarray(r.embedding)) for r in self._records],
                self.embedder.dimension,
            )
            self._index = index
        return index

    def retrieve_relevant(
        self,
        context_descriptor: str,
        limit: int = DEFAULT_LIMIT,
        kinds: Iterable[ExperienceKind] | None = None,
    ) -> list[tuple[ExperienceRecord, float]]:
        """Records ranked by descriptor similarity, newest first on ties;
        scores under the relevance floor are dropped."""
        if limit < 1:
            raise ValueError("limit must be >= 1")
        records = self._records
        if not records:
            return []
        kind_filter = set(kinds) if kinds is not None else None
        qvec = np.asarray(
            self.embedder.embed(context_descriptor), dtype=np.float64
        ).astype("<f4").astype(np.float64)
        scores = self.index().scores(qvec)
        candidates = [
            (i, float(scores[i]))
            for i in range(len(records))
            if scores[i] >= RELEVANCE_THRESHOLD
            and (kind_filter is None or records[i].kind in kind_filter)
        ]
        candidates.sort(key=lambda c: (-c[1], -records[c[0]].captured_at, -c[0]))
        return [(records[i], score) for i, score in candidates[:limit]]
