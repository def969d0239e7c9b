"""The knowledge-fusion pipeline as an explicit session state machine:
priors -> config -> outline (with interactive edits) -> per-section
retrieval -> fused prompt -> draft -> capture.

The event log is the source of truth: session state is a pure fold over
events (``apply_event``), mutating operations validate-then-append, and
recovery replays ``events.jsonl``.  config.json / outline.json /
drafts/*.md are projections for humans and the UI.

Determinism: identifiers are content-derived (session id + event index),
timestamps come from an injectable clock, and prompts never embed random
identifiers, so fixed stub scripts and a logical clock reproduce byte-
identical logs, drafts, and exports.

Capture ordering: an intervention writes its experience record first, then
its event.  A crash between the two leaves one orphan record, which no
invariant counts against a committed event.
"""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .experience import (
    CorrectivePromptPayload,
    DirectEditPayload,
    ExperienceStore,
    RefinementPayload,
)
from .gateway import (
    Gateway,
    GENERATION_TEMPERATURE,
    PARSING_TEMPERATURE,
    PromptTemplate,
    estimate_tokens,
    render_prompt,
    template_from_text,
)
from .knowledge import KnowledgeStore
from .model import (
    AgentConfig,
    EventKind,
    ExperienceKind,
    ExperienceRecord,
    Outline,
    OutlineSection,
    RetrievalResult,
    SECTION_TRANSITIONS,
    SectionDraft,
    SectionStatus,
    Session,
    SessionEvent,
    SessionState,
    canonical_json,
    derive_id,
    new_id,
    state_at_least,
)
from .search import SearchProvider, SearchUnavailable, WebResult

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_BUDGET = 6000
EXPERIENCE_LIMIT = 5
KEYWORD_QUERIES = 3

_PRESENTATION_KINDS = (
    EventKind.SECTION_DRAFTED,
    EventKind.SECTION_EDITED,
    EventKind.CORRECTIVE_PROMPT,
    EventKind.REFINEMENT,
)


class PipelineError(Exception):
    pass


class IllegalTransition(PipelineError):
    """The requested operation is not legal in the session's current state."""


class ConfigParseFailure(PipelineError):
    pass


class OutlineParseFailure(PipelineError):
    pass


class UnknownSection(PipelineError):
    pass


class PhraseNotFound(PipelineError):
    pass


class OutlineEditRejected(PipelineError):
    pass


class SessionIncomplete(PipelineError):
    pass


class SessionBusy(PipelineError):
    pass


class UnknownSessionError(PipelineError):
    pass


class Clock(Protocol):
    def now_ms(self) -> int: ...


class WallClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)


class LogicalClock:
    """Controllable clock for replayable runs: time moves only when the
    test advances it."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def advance(self, seconds: float) -> None:
        self._now += int(round(seconds * 1000))


# Which event kinds are legal in which session state.
EVENT_GRAMMAR: dict[SessionState, frozenset[EventKind]] = {
    SessionState.NEW: frozenset({EventKind.PRIORS_SUBMITTED}),
    SessionState.CONFIGURED: frozenset(
        {EventKind.CONFIG_EDITED, EventKind.OUTLINE_GENERATED}
    ),
    SessionState.OUTLINED: frozenset(
        {EventKind.CONFIG_EDITED, EventKind.OUTLINE_EDITED, EventKind.SECTION_RETRIEVED}
    ),
    SessionState.DRAFTING: frozenset(
        {
            EventKind.CONFIG_EDITED,
            EventKind.OUTLINE_EDITED,
            EventKind.SECTION_RETRIEVED,
            EventKind.SECTION_DRAFTED,
            EventKind.SECTION_EDITED,
            EventKind.CORRECTIVE_PROMPT,
            EventKind.REFINEMENT,
            EventKind.SECTION_ACCEPTED,
        }
    ),
    SessionState.COMPLETE: frozenset(),
}


def _section_status_change(
    outline: Outline, section_id: str, status: SectionStatus
) -> Outline:
    sections = []
    for sec in outline.sections:
        if sec.id == section_id:
            if (sec.status, status) not in SECTION_TRANSITIONS:
                raise IllegalTransition(
                    f"section {section_id}: {sec.status.value} -> {status.value}"
                )
            sections.append(replace(sec, status=status))
        else:
            sections.append(sec)
    return replace(outline, sections=tuple(sections))


def _maybe_complete(session: Session) -> Session:
    outline = session.outline
    if (
        outline is not None
        and outline.sections
        and all(s.status == SectionStatus.ACCEPTED for s in outline.sections)
    ):
        return replace(session, state=SessionState.COMPLETE)
    return session


def apply_event(session: Session, event: SessionEvent) -> Session:
    """Pure state fold; raises IllegalTransition on any event outside the
    grammar, leaving the input untouched."""
    if event.kind not in EVENT_GRAMMAR[session.state]:
        raise IllegalTransition(
            f"event {event.kind.value} not legal in state {session.state.value}"
        )
    if session.event_log and event.at < session.event_log[-1].at:
        raise IllegalTransition("event timestamps must be non-decreasing")
    detail = event.detail
    log = session.event_log + (event,)
    wait = float(detail.get("wait_seconds", 0.0))
    clock = session.clock_seconds + wait

    if event.kind == EventKind.PRIORS_SUBMITTED:
        return replace(
            session,
            state=SessionState.CONFIGURED,
            config=AgentConfig.from_dict(detail["config"]),
            event_log=log,
            clock_seconds=clock,
        )
    if event.kind == EventKind.CONFIG_EDITED:
        return replace(
            session,
            config=AgentConfig.from_dict(detail["config"]),
            event_log=log,
            clock_seconds=clock,
        )
    if event.kind == EventKind.OUTLINE_GENERATED:
        return replace(
            session,
            state=SessionState.OUTLINED,
            outline=Outline.from_dict(detail["outline"]),
            event_log=log,
            clock_seconds=clock,
        )
    if event.kind == EventKind.OUTLINE_EDITED:
        updated = replace(
            session,
            outline=Outline.from_dict(detail["outline"]),
            event_log=log,
            clock_seconds=clock,
        )
        return _maybe_complete(updated)
    if event.kind == EventKind.SECTION_RETRIEVED:
        assert session.outline is not None
        outline = _section_status_change(
            session.outline, detail["section_id"], SectionStatus.RETRIEVED
        )
        state = (
            SessionState.DRAFTING
            if session.state == SessionState.OUTLINED
            else session.state
        )
        return replace(
            session, state=state, outline=outline, event_log=log, clock_seconds=clock
        )
    if event.kind in (
        EventKind.SECTION_DRAFTED,
        EventKind.SECTION_EDITED,
        EventKind.CORRECTIVE_PROMPT,
        EventKind.REFINEMENT,
    ):
        assert session.outline is not None
        draft = SectionDraft.from_dict(detail["draft"])
        outline = _section_status_change(
            session.outline, detail["section_id"], SectionStatus.DRAFTED
        )
        drafts = {**session.drafts, draft.section_id: draft}
        return replace(
            session,
            outline=outline,
            drafts=drafts,
            event_log=log,
            clock_seconds=clock,
        )
    if event.kind == EventKind.SECTION_ACCEPTED:
        assert session.outline is not None
        outline = _section_status_change(
            session.outline, detail["section_id"], SectionStatus.ACCEPTED
        )
        updated = replace(
            session, outline=outline, event_log=log, clock_seconds=clock
        )
        return _maybe_complete(updated)
    raise IllegalTransition(f"unhandled event kind {event.kind}")


def replay(session_id: str, events: Iterable[SessionEvent]) -> Session:
    session = Session(session_id=session_id, state=SessionState.NEW)
    for event in events:
        session = apply_event(session, event)
    return session


INTERVENTION_KINDS = frozenset(
    {
        EventKind.CONFIG_EDITED,
        EventKind.OUTLINE_EDITED,
        EventKind.SECTION_EDITED,
        EventKind.CORRECTIVE_PROMPT,
        EventKind.REFINEMENT,
    }
)


def intervention_count(session: Session) -> int:
    return sum(1 for e in session.event_log if e.kind in INTERVENTION_KINDS)


def llm_latency_ms(session: Session) -> float:
    return sum(float(e.detail.get("llm_latency_ms", 0.0)) for e in session.event_log)


# ---------------------------------------------------------------------------
# Prompt fusion


@dataclass(frozen=True)
class FusedPrompt:
    system_text: str
    user_text: str
    provenance: tuple[str, ...]
    token_estimate: int


@dataclass(frozen=True)
class FusionResult:
    prompt: FusedPrompt
    private: tuple[RetrievalResult, ...]
    web: tuple[WebResult, ...]
    experience: tuple[tuple[ExperienceRecord, float], ...]

    def provenance_ids(self) -> tuple[str, ...]:
        return tuple(
            [r.chunk.chunk_id for r in self.private]
            + [rec.record_id for rec, _ in self.experience]
        )


def _clip(text: str, limit: int = 240) -> str:
    return text if len(text) <= limit else text[: limit - 3] + "..."


def render_experience_item(record: ExperienceRecord) -> str:
    payload = record.payload
    if record.kind == ExperienceKind.DIRECT_EDIT:
        return (
            f'- Prefer "{_clip(payload["revised"])}" over '
            f'"{_clip(payload["original"])}".'
        )
    if record.kind == ExperienceKind.CORRECTIVE_PROMPT:
        return f'- Standing instruction: {_clip(payload["instruction"])}'
    return (
        f'- Replace "{_clip(payload["original_phrase"])}" with '
        f'"{_clip(payload["revised_phrase"])}".'
    )


def render_experience_block(records: Sequence[ExperienceRecord]) -> str:
    if not records:
        return ""
    lines = ["Guidance from past interventions:"]
    lines.extend(render_experience_item(r) for r in records)
    return "\n".join(lines)


@dataclass
class _Droppable:
    tag: str
    identifier: str
    score: float


def assemble_fused_prompt(
    config: AgentConfig,
    outline: Outline,
    section: OutlineSection,
    retrievals: Sequence[RetrievalResult],
    web: Sequence[WebResult],
    experience: Sequence[tuple[ExperienceRecord, float]],
    templates: "TemplateSet",
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    instruction: str | None = None,
    before_text: str | None = None,
) -> FusionResult:
    """Deterministic fused prompt in fixed block order: priors, outline
    context, private evidence, open-domain snippets, experiential guidance.

    When over the token budget, evidence is dropped lowest-score-first
    (web items score 1/rank), but never the last item of a non-empty
    source, so every present source keeps at least one block.
    """
    system_text = render_prompt(
        templates.section_system, {"persona": config.persona, "style": config.style}
    )

    kept_private = list(retrievals)
    kept_web = list(web)
    kept_exp = list(experience)

    def build_user() -> str:
        idx = next(
            (i for i, s in enumerate(outline.sections) if s.id == section.id), 0
        )
        outline_lines = [f"Article: {outline.title}", "Outline:"]
        outline_lines += [
            f"{i + 1}. {s.heading}" for i, s in enumerate(outline.sections)
        ]
        outline_lines.append(f"Write section {idx + 1}: {section.heading}")
        if section.intent_notes:
            outline_lines.append(f"Intent: {section.intent_notes}")
        private_block = ""
        if kept_private:
            private_block = "Private evidence:\n" + "\n".join(
                f"[chunk {r.chunk.chunk_id}] {r.chunk.text}" for r in kept_private
            )
        open_block = ""
        if kept_web:
            open_block = "Web evidence:\n" + "\n".join(
                f"[web {w.url}] {w.title}: {w.snippet}" for w in kept_web
            )
        exp_block = render_experience_block([rec for rec, _ in kept_exp])
        instruction_block = ""
        if instruction:
            instruction_block = f"Revision instruction: {instruction}"
            if before_text is not None:
                instruction_block += f"\nCurrent draft:\n{before_text}"
        return render_prompt(
            templates.section_user,
            {
                "outline_context": "\n".join(outline_lines),
                "private_evidence": private_block,
                "open_evidence": open_block,
                "experience_guidance": exp_block,
                "instruction_block": instruction_block,
            },
        ).strip()

    def estimate() -> int:
        return estimate_tokens(system_text + build_user())

    def droppables() -> list[_Droppable]:
        out: list[_Droppable] = []
        if len(kept_private) > 1:
            out += [
                _Droppable("explicit_private", r.chunk.chunk_id, r.score)
                for r in kept_private
            ]
        if len(kept_web) > 1:
            out += [
                _Droppable("explicit_open", w.url, 1.0 / w.rank) for w in kept_web
            ]
        if len(kept_exp) > 1:
            out += [
                _Droppable("experiential", rec.record_id, score)
                for rec, score in kept_exp
            ]
        return out

    while estimate() > token_budget:
        candidates = droppables()
        if not candidates:
            break
        victim = min(candidates, key=lambda d: (d.score, d.tag, d.identifier))
        if victim.tag == "explicit_private":
            kept_private = [
                r for r in kept_private if r.chunk.chunk_id != victim.identifier
            ]
        elif victim.tag == "explicit_open":
            kept_web = [w for w in kept_web if w.url != victim.identifier]
        else:
            kept_exp = [
                (rec, s) for rec, s in kept_exp if rec.record_id != victim.identifier
            ]

    user_text = build_user()
    token_estimate = estimate_tokens(system_text + user_text)
    if token_estimate > token_budget:
        raise ValueError(
            f"fixed prompt blocks alone exceed the {token_budget}-token budget"
        )
    provenance = ["prior"]
    if kept_private:
        provenance.append("explicit_private")
    if kept_web:
        provenance.append("explicit_open")
    if kept_exp:
        provenance.append("experiential")
    return FusionResult(
        prompt=FusedPrompt(
            system_text=system_text,
            user_text=user_text,
            provenance=tuple(provenance),
            token_estimate=token_estimate,
        ),
        private=tuple(kept_private),
        web=tuple(kept_web),
        experience=tuple(kept_exp),
    )


# ---------------------------------------------------------------------------
# Templates


@dataclass(frozen=True)
class TemplateSet:
    priors: PromptTemplate
    config_edit: PromptTemplate
    outline: PromptTemplate
    keywords: PromptTemplate
    section_system: PromptTemplate
    section_user: PromptTemplate


def load_templates(directory: str | Path | None = None) -> TemplateSet:
    """Load prompt templates from ``directory``, falling back to the copies
    shipped with the package.

    Placeholders per template:
        priors          {{brief}} {{experience}}
        config_edit     {{config}} {{instruction}}
        outline         {{persona}} {{style}} {{domain}} {{structure}} {{experience}}
        keywords        {{heading}} {{intent_notes}} {{domain}}
        section_system  {{persona}} {{style}}
        section_user    {{outline_context}} {{private_evidence}} {{open_evidence}}
                        {{experience_guidance}} {{instruction_block}}
    """

    def read(name: str) -> str:
        if directory is not None:
            candidate = Path(directory) / f"{name}.txt"
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        return (
            resources.files("knowpilot.templates").joinpath(f"{name}.txt").read_text(
                encoding="utf-8"
            )
        )

    return TemplateSet(
        priors=template_from_text("priors", read("priors")),
        config_edit=template_from_text("config_edit", read("config_edit")),
        outline=template_from_text("outline", read("outline")),
        keywords=template_from_text("keywords", read("keywords")),
        section_system=template_from_text("section_system", read("section_system")),
        section_user=template_from_text("section_user", read("section_user")),
    )


# ---------------------------------------------------------------------------
# Response parsing

_KV_RE = re.compile(r"^(PERSONA|STYLE|DOMAIN|TITLE):\s*(.*)$")
_NUMBERED_RE = re.compile(r"^\s*(\d+)[.)]\s+(.*)$")

REFORMAT_INSTRUCTION = (
    "Your previous reply did not follow the required structure. "
    "Reply again using exactly the requested format and nothing else."
)


def parse_config_text(text: str) -> dict[str, Any] | None:
    persona = style = domain = ""
    structure: list[str] = []
    in_structure = False
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.upper().startswith("STRUCTURE:"):
            in_structure = True
            continue
        match = _KV_RE.match(stripped)
        if match:
            in_structure = False
            key, value = match.group(1), match.group(2).strip()
            if key == "PERSONA":
                persona = value
            elif key == "STYLE":
                style = value
            elif key == "DOMAIN":
                domain = value
            continue
        if in_structure and stripped.startswith("-"):
            item = stripped.lstrip("-").strip()
            if item:
                structure.append(item)
    if not persona or not style:
        return None
    return {
        "persona": persona,
        "style": style,
        "target_domain": domain or "general",
        "structure_expectations": structure,
    }


def parse_outline_text(text: str) -> tuple[str, list[tuple[str, str]]] | None:
    title = ""
    sections: list[tuple[str, str]] = []
    for line in text.splitlines():
        stripped = line.strip()
        kv = _KV_RE.match(stripped)
        if kv and kv.group(1) == "TITLE":
            title = kv.group(2).strip()
            continue
        numbered = _NUMBERED_RE.match(stripped)
        if numbered:
            body = numbered.group(2).strip()
            heading, _, intent = body.partition(" :: ")
            heading = heading.strip()
            if heading:
                sections.append((heading, intent.strip()))
    if not sections:
        return None
    return title, sections


def parse_keyword_lines(text: str, fallback: str) -> list[str]:
    queries = []
    for line in text.splitlines():
        cleaned = line.strip().lstrip("-*").strip()
        cleaned = re.sub(r"^\d+[.)]\s*", "", cleaned)
        if cleaned:
            queries.append(cleaned)
        if len(queries) == KEYWORD_QUERIES:
            break
    return queries or [fallback]


def render_config_block(config: AgentConfig) -> str:
    lines = [
        f"PERSONA: {config.persona}",
        f"STYLE: {config.style}",
        f"DOMAIN: {config.target_domain}",
        "STRUCTURE:",
    ]
    lines += [f"- {item}" for item in config.structure_expectations]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Session persistence


class SessionStore:
    """Per-session directory: events.jsonl (source of truth) plus
    config.json / outline.json / drafts/*.md projections."""

    def __init__(self, root: str | Path):
        self.root = Path(root) / "sessions"
        self.root.mkdir(parents=True, exist_ok=True)

    def dir_for(self, session_id: str) -> Path:
        return self.root / session_id

    def create(self, session_id: str) -> None:
        path = self.dir_for(session_id)
        path.mkdir(parents=True, exist_ok=True)
        (path / "drafts").mkdir(exist_ok=True)
        (path / "events.jsonl").touch()

    def exists(self, session_id: str) -> bool:
        return (self.dir_for(session_id) / "events.jsonl").exists()

    def list_ids(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(
            p.name for p in self.root.iterdir() if (p / "events.jsonl").exists()
        )

    def append_event(self, session_id: str, event: SessionEvent) -> None:
        path = self.dir_for(session_id) / "events.jsonl"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(event.to_dict()) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load_events(self, session_id: str) -> list[SessionEvent]:
        from .knowledge import _read_jsonl

        path = self.dir_for(session_id) / "events.jsonl"
        if not path.exists():
            raise UnknownSessionError(session_id)
        return [SessionEvent.from_dict(row) for row in _read_jsonl(path)]

    def write_projections(self, session: Session) -> None:
        path = self.dir_for(session.session_id)
        if session.config is not None:
            (path / "config.json").write_text(
                canonical_json(session.config.to_dict()) + "\n", encoding="utf-8"
            )
        if session.outline is not None:
            (path / "outline.json").write_text(
                canonical_json(session.outline.to_dict()) + "\n", encoding="utf-8"
            )
        for draft in session.drafts.values():
            (path / "drafts" / f"{draft.section_id}.md").write_text(
                draft.text + "\n", encoding="utf-8"
            )


# ---------------------------------------------------------------------------
# User actions


@dataclass(frozen=True)
class DirectEdit:
    revised_text: str


@dataclass(frozen=True)
class CorrectiveInstruction:
    instruction: str


@dataclass(frozen=True)
class Refinement:
    original_phrase: str
    revised_phrase: str


@dataclass(frozen=True)
class Accept:
    pass


UserAction = DirectEdit | CorrectiveInstruction | Refinement | Accept


# ---------------------------------------------------------------------------
# Pipeline


class Pipeline:
    """Orchestrates sessions against the shared stores and gateway.

    Mutations on one session are serialized by a per-session lock; distinct
    sessions run fully concurrently.  Pass ``blocking=False`` to a mutation
    to get SessionBusy instead of waiting (the HTTP layer does this).
    """

    def __init__(
        self,
        gateway: Gateway,
        knowledge: KnowledgeStore,
        experience: ExperienceStore,
        search: SearchProvider,
        session_root: str | Path,
        clock: Clock | None = None,
        rng: random.Random | None = None,
        templates: TemplateSet | None = None,
        token_budget: int = DEFAULT_TOKEN_BUDGET,
    ):
        self.gateway = gateway
        self.knowledge = knowledge
        self.experience = experience
        self.search = search
        self.store = SessionStore(session_root)
        self.clock: Clock = clock or WallClock()
        self.rng = rng
        self.templates = templates or load_templates()
        self.token_budget = token_budget
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    # -- session access -----------------------------------------------------

    def create_session(self, session_id: str | None = None) -> Session:
        session_id = session_id or new_id(self.rng)
        with self._registry_lock:
            if self.store.exists(session_id):
                raise PipelineError(f"session {session_id} already exists")
            self.store.create(session_id)
            session = Session(session_id=session_id, state=SessionState.NEW)
            self._sessions[session_id] = session
            self._locks[session_id] = threading.Lock()
            return session

    def session(self, session_id: str) -> Session:
        with self._registry_lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
        events = self.store.load_events(session_id)
        session = replay(session_id, events)
        with self._registry_lock:
            self._sessions.setdefault(session_id, session)
            self._locks.setdefault(session_id, threading.Lock())
            return self._sessions[session_id]

    def list_sessions(self) -> list[str]:
        return self.store.list_ids()

    def _lock(self, session_id: str) -> threading.Lock:
        self.session(session_id)
        with self._registry_lock:
            return self._locks[session_id]

    def _commit(self, session: Session, event: SessionEvent) -> Session:
        updated = apply_event(session, event)  # validates before persisting
        self.store.append_event(session.session_id, event)
        self.store.write_projections(updated)
        with self._registry_lock:
            self._sessions[session.session_id] = updated
        return updated

    def _event_id(self, session: Session) -> str:
        return derive_id(session.session_id, "event", len(session.event_log))

    # -- operations ----------------------------------------------------------

    def parse_priors(
        self,
        session_id: str,
        user_brief: str,
        experience: Sequence[ExperienceRecord] | None = None,
        use_experience: bool = True,
        blocking: bool = True,
    ) -> Session:
        if not user_brief.strip():
            raise ValueError("brief must be non-empty")
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            if session.state != SessionState.NEW:
                raise IllegalTransition(
                    f"parse_priors requires a new session, not {session.state.value}"
                )
            if experience is None and use_experience:
                experience = [
                    rec
                    for rec, _ in self.experience.retrieve_relevant(
                        user_brief, limit=EXPERIENCE_LIMIT
                    )
                ]
            prompt = render_prompt(
                self.templates.priors,
                {
                    "brief": user_brief,
                    "experience": render_experience_block(list(experience or [])),
                },
            )
            parsed, latency = self._call_and_parse(
                prompt, "priors", parse_config_text, PARSING_TEMPERATURE
            )
            if parsed is None:
                raise ConfigParseFailure("model output not parseable as a config")
            config = AgentConfig(
                persona=parsed["persona"],
                style=parsed["style"],
                structure_expectations=tuple(parsed["structure_expectations"]),
                target_domain=parsed["target_domain"],
                created_at=self.clock.now_ms(),
                revision=1,
            )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.PRIORS_SUBMITTED,
                detail={
                    "brief": user_brief,
                    "config": config.to_dict(),
                    "llm_latency_ms": latency,
                },
            )
            return self._commit(session, event)

    def edit_config(
        self,
        session_id: str,
        fields: Mapping[str, Any] | None = None,
        instruction: str | None = None,
        blocking: bool = True,
    ) -> Session:
        if (fields is None) == (instruction is None):
            raise ValueError("provide exactly one of fields or instruction")
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            if session.config is None or not state_at_least(
                session.state, SessionState.CONFIGURED
            ):
                raise IllegalTransition("edit_config requires a configured session")
            if EventKind.CONFIG_EDITED not in EVENT_GRAMMAR[session.state]:
                raise IllegalTransition(
                    f"config edits are not legal in state {session.state.value}"
                )
            old = session.config
            before_block = render_config_block(old)
            latency = 0.0
            if fields is not None:
                allowed = {
                    "persona",
                    "style",
                    "target_domain",
                    "structure_expectations",
                }
                unknown = set(fields) - allowed
                if unknown:
                    raise ValueError(f"unknown config fields: {sorted(unknown)}")
                merged = old.to_dict() | dict(fields)
                new_config = AgentConfig(
                    persona=str(merged["persona"]),
                    style=str(merged["style"]),
                    structure_expectations=tuple(merged["structure_expectations"]),
                    target_domain=str(merged["target_domain"]),
                    created_at=old.created_at,
                    revision=old.revision + 1,
                )
                change: dict[str, Any] = {"kind": "fields", "fields": dict(fields)}
            else:
                prompt = render_prompt(
                    self.templates.config_edit,
                    {"config": before_block, "instruction": instruction},
                )
                parsed, latency = self._call_and_parse(
                    prompt, "config_edit", parse_config_text, PARSING_TEMPERATURE
                )
                if parsed is None:
                    raise ConfigParseFailure(
                        "model output not parseable as a config"
                    )
                new_config = AgentConfig(
                    persona=parsed["persona"],
                    style=parsed["style"],
                    structure_expectations=tuple(parsed["structure_expectations"]),
                    target_domain=parsed["target_domain"],
                    created_at=old.created_at,
                    revision=old.revision + 1,
                )
                change = {"kind": "instruction", "instruction": instruction}
            after_block = render_config_block(new_config)
            descriptor = f"config | {new_config.target_domain} | {new_config.persona}"
            if fields is not None:
                record = self.experience.record(
                    ExperienceKind.DIRECT_EDIT,
                    DirectEditPayload.from_texts(before_block, after_block),
                    context_descriptor=descriptor,
                    session_id=session_id,
                    captured_at=self.clock.now_ms(),
                )
            else:
                record = self.experience.record(
                    ExperienceKind.CORRECTIVE_PROMPT,
                    CorrectivePromptPayload(
                        instruction=str(instruction),
                        before=before_block,
                        after=after_block,
                    ),
                    context_descriptor=descriptor,
                    session_id=session_id,
                    captured_at=self.clock.now_ms(),
                )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.CONFIG_EDITED,
                detail={
                    "change": change,
                    "config": new_config.to_dict(),
                    "record_id": record.record_id,
                    "llm_latency_ms": latency,
                },
            )
            return self._commit(session, event)

    def generate_outline(self, session_id: str, blocking: bool = True) -> Session:
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            if session.state != SessionState.CONFIGURED:
                raise IllegalTransition(
                    f"generate_outline requires state configured, "
                    f"not {session.state.value}"
                )
            config = session.config
            assert config is not None
            descriptor = f"outline | {config.target_domain} | {config.persona}"
            relevant = [
                rec
                for rec, _ in self.experience.retrieve_relevant(
                    descriptor, limit=EXPERIENCE_LIMIT
                )
            ]
            prompt = render_prompt(
                self.templates.outline,
                {
                    "persona": config.persona,
                    "style": config.style,
                    "domain": config.target_domain,
                    "structure": "\n".join(
                        f"- {s}" for s in config.structure_expectations
                    )
                    or "- (none given)",
                    "experience": render_experience_block(relevant),
                },
            )
            parsed, latency = self._call_and_parse(
                prompt, "outline", parse_outline_text, GENERATION_TEMPERATURE
            )
            if parsed is None:
                raise OutlineParseFailure("model output contained no sections")
            title, headings = parsed
            sections = tuple(
                OutlineSection(
                    id=derive_id(
                        session_id, "section", len(session.event_log), i
                    ),
                    heading=heading,
                    intent_notes=intent,
                    status=SectionStatus.PENDING,
                )
                for i, (heading, intent) in enumerate(headings)
            )
            outline = Outline(
                title=title or f"{config.target_domain} article",
                sections=sections,
                revision=1,
            )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.OUTLINE_GENERATED,
                detail={"outline": outline.to_dict(), "llm_latency_ms": latency},
            )
            return self._commit(session, event)

    def edit_outline(
        self, session_id: str, command: Mapping[str, Any], blocking: bool = True
    ) -> Session:
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            outline = session.outline
            if outline is None or not state_at_least(
                session.state, SessionState.OUTLINED
            ):
                raise IllegalTransition("edit_outline requires an outlined session")
            if EventKind.OUTLINE_EDITED not in EVENT_GRAMMAR[session.state]:
                raise IllegalTransition(
                    f"outline edits are not legal in state {session.state.value}"
                )
            new_outline = self._apply_outline_command(session, outline, command)
            before = "\n".join(s.heading for s in outline.sections)
            after = "\n".join(s.heading for s in new_outline.sections)
            config = session.config
            assert config is not None
            record = self.experience.record(
                ExperienceKind.DIRECT_EDIT,
                DirectEditPayload.from_texts(before, after),
                context_descriptor=(
                    f"outline edit | {config.target_domain} | {outline.title}"
                ),
                session_id=session_id,
                captured_at=self.clock.now_ms(),
            )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.OUTLINE_EDITED,
                detail={
                    "command": dict(command),
                    "outline": new_outline.to_dict(),
                    "record_id": record.record_id,
                },
            )
            return self._commit(session, event)

    def _apply_outline_command(
        self, session: Session, outline: Outline, command: Mapping[str, Any]
    ) -> Outline:
        op = command.get("op")
        sections = list(outline.sections)
        if op == "add":
            heading = str(command.get("heading", "")).strip()
            if not heading:
                raise OutlineEditRejected("add requires a heading")
            new_section = OutlineSection(
                id=derive_id(session.session_id, "section", len(session.event_log), 0),
                heading=heading,
                intent_notes=str(command.get("intent_notes", "")),
                status=SectionStatus.PENDING,
            )
            position = command.get("position")
            index = len(sections) if position is None else int(position)
            index = max(0, min(index, len(sections)))
            sections.insert(index, new_section)
        elif op == "remove":
            target = self._find(sections, command)
            if len(sections) == 1:
                raise OutlineEditRejected("outline must keep at least one section")
            sections = [s for s in sections if s.id != target.id]
        elif op == "reorder":
            target = self._find(sections, command)
            position = int(command.get("position", 0))
            sections = [s for s in sections if s.id != target.id]
            position = max(0, min(position, len(sections)))
            sections.insert(position, target)
        elif op == "retitle":
            target = self._find(sections, command)
            heading = str(command.get("heading", "")).strip()
            if not heading:
                raise OutlineEditRejected("retitle requires a heading")
            if target.status == SectionStatus.ACCEPTED:
                raise OutlineEditRejected("cannot retitle an accepted section")
            # A heading edit invalidates an existing draft.
            status = (
                SectionStatus.RETRIEVED
                if target.status == SectionStatus.DRAFTED
                else target.status
            )
            intent = command.get("intent_notes")
            updated = replace(
                target,
                heading=heading,
                status=status,
                intent_notes=(
                    target.intent_notes if intent is None else str(intent)
                ),
            )
            sections = [updated if s.id == target.id else s for s in sections]
        else:
            raise OutlineEditRejected(f"unknown outline command: {op}")
        return Outline(
            title=outline.title,
            sections=tuple(sections),
            revision=outline.revision + 1,
        )

    @staticmethod
    def _find(
        sections: Sequence[OutlineSection], command: Mapping[str, Any]
    ) -> OutlineSection:
        section_id = command.get("section_id")
        for sec in sections:
            if sec.id == section_id:
                return sec
        raise UnknownSection(str(section_id))

    def retrieve_for_section(
        self, session_id: str, section_id: str, blocking: bool = True
    ) -> Session:
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            outline = session.outline
            if outline is None:
                raise IllegalTransition("session has no outline yet")
            section = outline.section(section_id)
            if section is None:
                raise UnknownSection(section_id)
            if EventKind.SECTION_RETRIEVED not in EVENT_GRAMMAR[session.state]:
                raise IllegalTransition(
                    f"retrieval is not legal in state {session.state.value}"
                )
            if section.status != SectionStatus.PENDING:
                raise IllegalTransition(
                    f"retrieve_for_section requires a pending section, "
                    f"not {section.status.value}"
                )
            config = session.config
            assert config is not None
            prompt = render_prompt(
                self.templates.keywords,
                {
                    "heading": section.heading,
                    "intent_notes": section.intent_notes or "(none)",
                    "domain": config.target_domain,
                },
            )
            response = self.gateway.chat(
                [("user", prompt)],
                temperature=PARSING_TEMPERATURE,
                request_tag=f"keywords:{section.heading}",
            )
            queries = parse_keyword_lines(response.text, fallback=section.heading)
            latency = response.latency_ms

            # Private: top-5 per keyword query, dedup by chunk keeping the
            # best score, then re-rank to a final top-5.
            best: dict[str, RetrievalResult] = {}
            for query in queries:
                for result in self.knowledge.retrieve_top_k(query):
                    prev = best.get(result.chunk.chunk_id)
                    if prev is None or result.score > prev.score:
                        best[result.chunk.chunk_id] = result
            merged = sorted(
                best.values(), key=lambda r: (-r.score, r.chunk.chunk_id)
            )[:5]
            private = [
                replace(result, rank=i + 1) for i, result in enumerate(merged)
            ]

            degraded = False
            web: list[WebResult] = []
            seen_urls: set[str] = set()
            for query in queries:
                try:
                    hits = self.search.search(query)
                except SearchUnavailable as exc:
                    logger.warning(
                        "open-domain search degraded for section %s: %s",
                        section_id,
                        exc,
                    )
                    degraded = True
                    break
                for hit in hits:
                    if hit.url not in seen_urls:
                        seen_urls.add(hit.url)
                        web.append(hit)
            web = [
                replace(hit, rank=i + 1) for i, hit in enumerate(web[:5])
            ]
            if degraded:
                web = []

            descriptor = f"{config.persona} | {section.heading}"
            relevant = self.experience.retrieve_relevant(
                descriptor, limit=EXPERIENCE_LIMIT
            )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.SECTION_RETRIEVED,
                detail={
                    "section_id": section_id,
                    "queries": queries,
                    "private": [
                        {"chunk_id": r.chunk.chunk_id, "score": r.score, "rank": r.rank}
                        for r in private
                    ],
                    "web": [w.to_dict() for w in web],
                    "experience": [
                        [rec.record_id, score] for rec, score in relevant
                    ],
                    "degraded_search": degraded,
                    "llm_latency_ms": latency,
                },
            )
            return self._commit(session, event)

    def _cached_retrieval(
        self, session: Session, section_id: str
    ) -> tuple[
        list[RetrievalResult],
        list[WebResult],
        list[tuple[ExperienceRecord, float]],
    ]:
        detail: Mapping[str, Any] | None = None
        for event in reversed(session.event_log):
            if (
                event.kind == EventKind.SECTION_RETRIEVED
                and event.detail.get("section_id") == section_id
            ):
                detail = event.detail
                break
        if detail is None:
            raise IllegalTransition(f"section {section_id} was never retrieved")
        private = []
        for row in detail["private"]:
            chunk = self.knowledge.chunk_by_id(row["chunk_id"])
            if chunk is None:
                raise PipelineError(
                    f"provenance chunk {row['chunk_id']} missing from store"
                )
            private.append(
                RetrievalResult(
                    chunk=chunk, score=float(row["score"]), rank=int(row["rank"])
                )
            )
        web = [WebResult.from_dict(row) for row in detail["web"]]
        experience = []
        for record_id, score in detail["experience"]:
            record = self.experience.by_id(record_id)
            if record is None:
                raise PipelineError(
                    f"provenance record {record_id} missing from store"
                )
            experience.append((record, float(score)))
        return private, web, experience

    def generate_section(
        self, session_id: str, section_id: str, blocking: bool = True
    ) -> Session:
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            outline = session.outline
            if outline is None:
                raise IllegalTransition("session has no outline yet")
            section = outline.section(section_id)
            if section is None:
                raise UnknownSection(section_id)
            if EventKind.SECTION_DRAFTED not in EVENT_GRAMMAR[session.state]:
                raise IllegalTransition(
                    f"drafting is not legal in state {session.state.value}"
                )
            if section.status != SectionStatus.RETRIEVED:
                raise IllegalTransition(
                    f"generate_section requires a retrieved section, "
                    f"not {section.status.value}"
                )
            config = session.config
            assert config is not None
            private, web, experience = self._cached_retrieval(session, section_id)
            fusion = assemble_fused_prompt(
                config,
                outline,
                section,
                private,
                web,
                experience,
                self.templates,
                token_budget=self.token_budget,
            )
            response = self.gateway.chat(
                [
                    ("system", fusion.prompt.system_text),
                    ("user", fusion.prompt.user_text),
                ],
                temperature=GENERATION_TEMPERATURE,
                request_tag=f"section:{section.heading}",
            )
            prior = session.drafts.get(section_id)
            draft = SectionDraft(
                section_id=section_id,
                text=response.text,
                provenance=fusion.provenance_ids(),
                version=(prior.version + 1) if prior else 1,
            )
            event = SessionEvent(
                event_id=self._event_id(session),
                at=self.clock.now_ms(),
                kind=EventKind.SECTION_DRAFTED,
                detail={
                    "section_id": section_id,
                    "draft": draft.to_dict(),
                    "web_urls": [w.url for w in fusion.web],
                    "prompt_provenance": list(fusion.prompt.provenance),
                    "token_estimate": fusion.prompt.token_estimate,
                    "llm_latency_ms": response.latency_ms,
                },
            )
            return self._commit(session, event)

    def submit_user_action(
        self,
        session_id: str,
        section_id: str,
        action: UserAction,
        blocking: bool = True,
    ) -> Session:
        with self._mutation(session_id, blocking):
            session = self.session(session_id)
            outline = session.outline
            if outline is None:
                raise IllegalTransition("session has no outline yet")
            section = outline.section(section_id)
            if section is None:
                raise UnknownSection(section_id)
            if session.state != SessionState.DRAFTING:
                raise IllegalTransition(
                    f"user actions are not legal in state {session.state.value}"
                )
            if section.status != SectionStatus.DRAFTED:
                raise IllegalTransition(
                    f"user actions require a drafted section, "
                    f"not {section.status.value}"
                )
            draft = session.drafts[section_id]
            config = session.config
            assert config is not None
            now = self.clock.now_ms()
            wait_seconds = (now - self._presented_at(session, section_id)) / 1000.0
            descriptor = f"{config.persona} | {section.heading}"

            if isinstance(action, Accept):
                event = SessionEvent(
                    event_id=self._event_id(session),
                    at=now,
                    kind=EventKind.SECTION_ACCEPTED,
                    detail={"section_id": section_id, "wait_seconds": wait_seconds},
                )
                return self._commit(session, event)

            if isinstance(action, DirectEdit):
                payload = DirectEditPayload.from_texts(
                    draft.text, action.revised_text
                )
                record = self.experience.record(
                    ExperienceKind.DIRECT_EDIT,
                    payload,
                    context_descriptor=descriptor,
                    session_id=session_id,
                    captured_at=now,
                )
                new_draft = replace(
                    draft, text=action.revised_text, version=draft.version + 1
                )
                event = SessionEvent(
                    event_id=self._event_id(session),
                    at=now,
                    kind=EventKind.SECTION_EDITED,
                    detail={
                        "section_id": section_id,
                        "record_id": record.record_id,
                        "draft": new_draft.to_dict(),
                        "wait_seconds": wait_seconds,
                    },
                )
                return self._commit(session, event)

            if isinstance(action, CorrectiveInstruction):
                if not action.instruction.strip():
                    raise ValueError("instruction must be non-empty")
                private, web, experience = self._cached_retrieval(
                    session, section_id
                )
                fusion = assemble_fused_prompt(
                    config,
                    outline,
                    section,
                    private,
                    web,
                    experience,
                    self.templates,
                    token_budget=self.token_budget,
                    instruction=action.instruction,
                    before_text=draft.text,
                )
                response = self.gateway.chat(
                    [
                        ("system", fusion.prompt.system_text),
                        ("user", fusion.prompt.user_text),
                    ],
                    temperature=GENERATION_TEMPERATURE,
                    request_tag=f"corrective:{section.heading}",
                )
                record = self.experience.record(
                    ExperienceKind.CORRECTIVE_PROMPT,
                    CorrectivePromptPayload(
                        instruction=action.instruction,
                        before=draft.text,
                        after=response.text,
                    ),
                    context_descriptor=descriptor,
                    session_id=session_id,
                    captured_at=now,
                )
                new_draft = replace(
                    draft, text=response.text, version=draft.version + 1
                )
                event = SessionEvent(
                    event_id=self._event_id(session),
                    at=now,
                    kind=EventKind.CORRECTIVE_PROMPT,
                    detail={
                        "section_id": section_id,
                        "instruction": action.instruction,
                        "record_id": record.record_id,
                        "draft": new_draft.to_dict(),
                        "wait_seconds": wait_seconds,
                        "llm_latency_ms": response.latency_ms,
                    },
                )
                return self._commit(session, event)

            if isinstance(action, Refinement):
                if action.original_phrase not in draft.text:
                    raise PhraseNotFound(action.original_phrase)
                record = self.experience.record(
                    ExperienceKind.REFINEMENT,
                    RefinementPayload(
                        original_phrase=action.original_phrase,
                        revised_phrase=action.revised_phrase,
                    ),
                    context_descriptor=descriptor,
                    session_id=session_id,
                    captured_at=now,
                )
                new_text = draft.text.replace(
                    action.original_phrase, action.revised_phrase
                )
                new_draft = replace(draft, text=new_text, version=draft.version + 1)
                event = SessionEvent(
                    event_id=self._event_id(session),
                    at=now,
                    kind=EventKind.REFINEMENT,
                    detail={
                        "section_id": section_id,
                        "original_phrase": action.original_phrase,
                        "revised_phrase": action.revised_phrase,
                        "record_id": record.record_id,
                        "draft": new_draft.to_dict(),
                        "wait_seconds": wait_seconds,
                    },
                )
                return self._commit(session, event)

            raise ValueError(f"unknown action type {type(action).__name__}")

    @staticmethod
    def _presented_at(session: Session, section_id: str) -> int:
        for event in reversed(session.event_log):
            if (
                event.kind in _PRESENTATION_KINDS
                and event.detail.get("section_id") == section_id
            ):
                return event.at
        return session.event_log[-1].at if session.event_log else 0

    # -- helpers --------------------------------------------------------------

    def _call_and_parse(self, prompt, tag, parser, temperature):
        response = self.gateway.chat(
            [("user", prompt)], temperature=temperature, request_tag=tag
        )
        latency = response.latency_ms
        parsed = parser(response.text)
        if parsed is not None:
            return parsed, latency
        retry = self.gateway.chat(
            [
                ("user", prompt),
                ("assistant", response.text),
                ("user", REFORMAT_INSTRUCTION),
            ],
            temperature=temperature,
            request_tag=tag,
        )
        latency += retry.latency_ms
        return parser(retry.text), latency

    @contextmanager
    def _mutation(self, session_id: str, blocking: bool = True):
        lock = self._lock(session_id)
        if not lock.acquire(blocking=blocking):
            raise SessionBusy(session_id)
        try:
            yield
        finally:
            lock.release()

    # -- bulk drivers ----------------------------------------------------------

    def write_all(
        self, session_id: str, auto_accept: bool = False
    ) -> Session:
        """Retrieve and draft every pending section in outline order;
        optionally accept each draft (no experience is captured on accept)."""
        session = self.session(session_id)
        if session.outline is None:
            raise IllegalTransition("session has no outline yet")
        for section in session.outline.sections:
            if section.status == SectionStatus.PENDING:
                session = self.retrieve_for_section(session_id, section.id)
            current = session.outline.section(section.id)
            assert current is not None
            if current.status == SectionStatus.RETRIEVED:
                session = self.generate_section(session_id, section.id)
            current = session.outline.section(section.id)
            assert current is not None
            if auto_accept and current.status == SectionStatus.DRAFTED:
                session = self.submit_user_action(session_id, section.id, Accept())
        return session

    def run_brief(
        self,
        brief: str,
        session_id: str | None = None,
        auto_accept: bool = True,
    ) -> Session:
        session = self.create_session(session_id)
        self.parse_priors(session.session_id, brief)
        self.generate_outline(session.session_id)
        return self.write_all(session.session_id, auto_accept=auto_accept)

    # -- export ----------------------------------------------------------------

    def export_markdown(self, session_id: str) -> str:
        session = self.session(session_id)
        if session.state != SessionState.COMPLETE:
            raise SessionIncomplete(
                f"session {session_id} is {session.state.value}, not complete"
            )
        outline = session.outline
        assert outline is not None
        lines = [f"# {outline.title}", ""]
        for section in outline.sections:
            draft = session.drafts.get(section.id)
            lines.append(f"## {section.heading}")
            lines.append("")
            lines.append(draft.text if draft else "")
            lines.append("")
        lines.append("## Provenance")
        lines.append("")
        for section in outline.sections:
            draft = session.drafts.get(section.id)
            lines.append(f"### {section.heading}")
            web_urls = self._last_web_urls(session, section.id)
            if draft:
                for pid in draft.provenance:
                    kind = (
                        "chunk"
                        if self.knowledge.chunk_by_id(pid) is not None
                        else "experience"
                    )
                    lines.append(f"- {kind} {pid}")
            for url in web_urls:
                lines.append(f"- web {url}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    @staticmethod
    def _last_web_urls(session: Session, section_id: str) -> list[str]:
        for event in reversed(session.event_log):
            if (
                event.kind == EventKind.SECTION_DRAFTED
                and event.detail.get("section_id") == section_id
            ):
                return list(event.detail.get("web_urls", []))
        return []
