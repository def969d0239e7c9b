"""Shared domain types and their canonical JSON forms.

Every value here is immutable after construction and safe to share across
threads.  Canonical serialization is a UTF-8 JSON object with snake_case
field names; ``to_dict``/``from_dict`` round-trip every type field by field
and are the single wire/persistence format used by the stores, the HTTP
API, and fixtures.

Identifiers are opaque 128-bit values rendered as 32 hex chars.  ``new_id``
draws them from a (optionally injected) RNG; ``derive_id`` derives them
deterministically from content, which is what sessions and stores use so
that replays with fixed seeds reproduce identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import secrets
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence


def new_id(rng: random.Random | None = None) -> str:
    """Random 128-bit hex identifier; pass ``rng`` for reproducible draws."""
    if rng is None:
        return secrets.token_hex(16)
    return "%032x" % rng.getrandbits(128)


def derive_id(*parts: object) -> str:
    """Deterministic 128-bit hex identifier derived from content parts."""
    material = "\x1f".join(str(p) for p in parts)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:32]


def canonical_json(value: Any) -> str:
    """Stable JSON used everywhere bytes must be reproducible."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class SessionState(str, Enum):
    NEW = "new"
    CONFIGURED = "configured"
    OUTLINED = "outlined"
    DRAFTING = "drafting"
    COMPLETE = "complete"


_STATE_ORDER = {
    SessionState.NEW: 0,
    SessionState.CONFIGURED: 1,
    SessionState.OUTLINED: 2,
    SessionState.DRAFTING: 3,
    SessionState.COMPLETE: 4,
}


def state_at_least(state: SessionState, floor: SessionState) -> bool:
    return _STATE_ORDER[state] >= _STATE_ORDER[floor]


class SectionStatus(str, Enum):
    PENDING = "pending"
    RETRIEVED = "retrieved"
    DRAFTED = "drafted"
    ACCEPTED = "accepted"


# Forward-only, except drafted->retrieved (a heading edit invalidates the
# draft) and drafted->drafted (regeneration / in-place user edits).
SECTION_TRANSITIONS: frozenset[tuple[SectionStatus, SectionStatus]] = frozenset(
    {
        (SectionStatus.PENDING, SectionStatus.RETRIEVED),
        (SectionStatus.RETRIEVED, SectionStatus.DRAFTED),
        (SectionStatus.DRAFTED, SectionStatus.DRAFTED),
        (SectionStatus.DRAFTED, SectionStatus.RETRIEVED),
        (SectionStatus.DRAFTED, SectionStatus.ACCEPTED),
    }
)


class ExperienceKind(str, Enum):
    DIRECT_EDIT = "direct_edit"
    CORRECTIVE_PROMPT = "corrective_prompt"
    REFINEMENT = "refinement"


class EventKind(str, Enum):
    PRIORS_SUBMITTED = "priors_submitted"
    CONFIG_EDITED = "config_edited"
    OUTLINE_GENERATED = "outline_generated"
    OUTLINE_EDITED = "outline_edited"
    SECTION_RETRIEVED = "section_retrieved"
    SECTION_DRAFTED = "section_drafted"
    SECTION_EDITED = "section_edited"
    CORRECTIVE_PROMPT = "corrective_prompt"
    REFINEMENT = "refinement"
    SECTION_ACCEPTED = "section_accepted"


@dataclass(frozen=True)
class AgentConfig:
    """Persistent parsed form of the user's task-specific priors."""

    persona: str
    style: str
    structure_expectations: tuple[str, ...]
    target_domain: str
    created_at: int
    revision: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "persona": self.persona,
            "style": self.style,
            "structure_expectations": list(self.structure_expectations),
            "target_domain": self.target_domain,
            "created_at": self.created_at,
            "revision": self.revision,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AgentConfig":
        return cls(
            persona=raw["persona"],
            style=raw["style"],
            structure_expectations=tuple(raw["structure_expectations"]),
            target_domain=raw["target_domain"],
            created_at=int(raw["created_at"]),
            revision=int(raw["revision"]),
        )


def validate_config(
    config: AgentConfig, previous: AgentConfig | None = None
) -> list[str]:
    """Return invariant violations as data; an empty list means valid.

    Pass ``previous`` (the config before the latest modification) to also
    check that the revision counter advanced by exactly one.
    """
    violations: list[str] = []
    if not config.persona.strip():
        violations.append("persona empty")
    if not config.style.strip():
        violations.append("style empty")
    if config.revision < 1:
        violations.append("revision below 1")
    if config.created_at < 0:
        violations.append("created_at negative")
    if previous is not None and config.revision != previous.revision + 1:
        violations.append("revision skipped")
    return violations


@dataclass(frozen=True)
class OutlineSection:
    id: str
    heading: str
    intent_notes: str
    status: SectionStatus

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "heading": self.heading,
            "intent_notes": self.intent_notes,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "OutlineSection":
        return cls(
            id=raw["id"],
            heading=raw["heading"],
            intent_notes=raw["intent_notes"],
            status=SectionStatus(raw["status"]),
        )


@dataclass(frozen=True)
class Outline:
    title: str
    sections: tuple[OutlineSection, ...]
    revision: int

    def __post_init__(self) -> None:
        ids = [s.id for s in self.sections]
        if len(ids) != len(set(ids)):
            raise ValueError("outline section ids must be unique")

    def section(self, section_id: str) -> OutlineSection | None:
        for sec in self.sections:
            if sec.id == section_id:
                return sec
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "sections": [s.to_dict() for s in self.sections],
            "revision": self.revision,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Outline":
        return cls(
            title=raw["title"],
            sections=tuple(OutlineSection.from_dict(s) for s in raw["sections"]),
            revision=int(raw["revision"]),
        )


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    source_doc: str
    text: str
    char_span: tuple[int, int]
    embedding: tuple[float, ...]

    def __post_init__(self) -> None:
        start, end = self.char_span
        if not 0 <= start < end:
            raise ValueError("char_span must satisfy 0 <= start < end")
        if any(not math.isfinite(x) for x in self.embedding):
            raise ValueError("embedding components must be finite")

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "source_doc": self.source_doc,
            "text": self.text,
            "char_span": list(self.char_span),
            "embedding": list(self.embedding),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "KnowledgeChunk":
        return cls(
            chunk_id=raw["chunk_id"],
            source_doc=raw["source_doc"],
            text=raw["text"],
            char_span=(int(raw["char_span"][0]), int(raw["char_span"][1])),
            embedding=tuple(float(x) for x in raw["embedding"]),
        )


@dataclass(frozen=True)
class RetrievalResult:
    chunk: KnowledgeChunk
    score: float
    rank: int

    def __post_init__(self) -> None:
        if not -1.0 - 1e-9 <= self.score <= 1.0 + 1e-9:
            raise ValueError("cosine score out of [-1, 1]")
        if self.rank < 1:
            raise ValueError("rank is 1-based")

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk": self.chunk.to_dict(),
            "score": self.score,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RetrievalResult":
        return cls(
            chunk=KnowledgeChunk.from_dict(raw["chunk"]),
            score=float(raw["score"]),
            rank=int(raw["rank"]),
        )


def validate_ranking(results: Sequence[RetrievalResult]) -> list[str]:
    """Check the within-retrieval invariants: ranks 1..n, scores non-increasing."""
    violations = []
    for i, res in enumerate(results):
        if res.rank != i + 1:
            violations.append(f"rank {res.rank} at position {i}")
        if i and res.score > results[i - 1].score + 1e-12:
            violations.append(f"score increases at rank {res.rank}")
    return violations


@dataclass(frozen=True)
class ExperienceRecord:
    record_id: str
    kind: ExperienceKind
    context_descriptor: str
    payload: Mapping[str, Any]
    embedding: tuple[float, ...]
    captured_at: int
    session_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "kind": self.kind.value,
            "context_descriptor": self.context_descriptor,
            "payload": dict(self.payload),
            "embedding": list(self.embedding),
            "captured_at": self.captured_at,
            "session_id": self.session_id,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperienceRecord":
        return cls(
            record_id=raw["record_id"],
            kind=ExperienceKind(raw["kind"]),
            context_descriptor=raw["context_descriptor"],
            payload=dict(raw["payload"]),
            embedding=tuple(float(x) for x in raw["embedding"]),
            captured_at=int(raw["captured_at"]),
            session_id=raw["session_id"],
        )


@dataclass(frozen=True)
class SectionDraft:
    section_id: str
    text: str
    provenance: tuple[str, ...]
    version: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "section_id": self.section_id,
            "text": self.text,
            "provenance": list(self.provenance),
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SectionDraft":
        return cls(
            section_id=raw["section_id"],
            text=raw["text"],
            provenance=tuple(raw["provenance"]),
            version=int(raw["version"]),
        )


@dataclass(frozen=True)
class SessionEvent:
    event_id: str
    at: int
    kind: EventKind
    detail: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "at": self.at,
            "kind": self.kind.value,
            "detail": dict(self.detail),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SessionEvent":
        return cls(
            event_id=raw["event_id"],
            at=int(raw["at"]),
            kind=EventKind(raw["kind"]),
            detail=dict(raw["detail"]),
        )


@dataclass(frozen=True)
class Session:
    """One writing engagement: a fold over its event log.

    ``clock_seconds`` accumulates only human interaction intervals (time
    between a draft being presented and the user acting on it); model call
    latencies live in the event details and are summed separately by the
    evaluation harness.
    """

    session_id: str
    state: SessionState
    config: AgentConfig | None = None
    outline: Outline | None = None
    drafts: Mapping[str, SectionDraft] = field(default_factory=dict)
    event_log: tuple[SessionEvent, ...] = ()
    clock_seconds: float = 0.0

    def validate(self) -> list[str]:
        violations = []
        if (self.config is not None) != state_at_least(
            self.state, SessionState.CONFIGURED
        ):
            violations.append("config presence does not match state")
        if (self.outline is not None) != state_at_least(
            self.state, SessionState.OUTLINED
        ):
            violations.append("outline presence does not match state")
        for i in range(1, len(self.event_log)):
            if self.event_log[i].at < self.event_log[i - 1].at:
                violations.append(f"event timestamps decrease at index {i}")
        return violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "state": self.state.value,
            "config": self.config.to_dict() if self.config else None,
            "outline": self.outline.to_dict() if self.outline else None,
            "drafts": {k: v.to_dict() for k, v in sorted(self.drafts.items())},
            "event_log": [e.to_dict() for e in self.event_log],
            "clock_seconds": self.clock_seconds,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Session":
        return cls(
            session_id=raw["session_id"],
            state=SessionState(raw["state"]),
            config=AgentConfig.from_dict(raw["config"]) if raw["config"] else None,
            outline=Outline.from_dict(raw["outline"]) if raw["outline"] else None,
            drafts={
                k: SectionDraft.from_dict(v) for k, v in raw["drafts"].items()
            },
            event_log=tuple(SessionEvent.from_dict(e) for e in raw["event_log"]),
            clock_seconds=float(raw["clock_seconds"]),
        )
