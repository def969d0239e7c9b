"""HTTP service over the pipeline and stores.

Every endpoint delegates 1:1 to a library operation, so an API-driven
session and a library-driven one produce identical persisted artifacts.
Error responses carry a machine-readable code from a closed set; per-session
mutations are serialized, a concurrent second mutation gets 409
session_busy.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .evalharness import JudgeParseFailure
from .experience import ExperienceStore, InvalidPayload
from .gateway import (
    EndpointUnavailable,
    Gateway,
    ProtocolError,
    RequestRejected,
    StubBackend,
    gateway_from_env,
)
from .knowledge import (
    DegenerateVector,
    DuplicateDocument,
    EmbeddingUnavailable,
    KnowledgeStore,
    StubEmbedder,
    embedder_from_env,
    make_document,
)
from .model import ExperienceKind
from .pipeline import (
    Accept,
    Clock,
    ConfigParseFailure,
    CorrectiveInstruction,
    DirectEdit,
    IllegalTransition,
    OutlineEditRejected,
    OutlineParseFailure,
    PhraseNotFound,
    Pipeline,
    PipelineError,
    Refinement,
    SessionBusy,
    SessionIncomplete,
    UnknownSection,
    UnknownSessionError,
    WallClock,
)
from .search import FixtureSearch, SearchProvider, SearchUnavailable, search_from_env

# Specific classes first: handler lookup walks the MRO, so the PipelineError
# fallback only catches subclasses without a mapping of their own.
API_ERROR_CODES: dict[type[Exception], tuple[int, str]] = {
    IllegalTransition: (409, "illegal_state"),
    SessionBusy: (409, "session_busy"),
    OutlineEditRejected: (409, "outline_edit_rejected"),
    SessionIncomplete: (409, "session_incomplete"),
    DuplicateDocument: (409, "duplicate_document"),
    UnknownSessionError: (404, "unknown_session"),
    UnknownSection: (404, "unknown_section"),
    PhraseNotFound: (422, "phrase_not_found"),
    InvalidPayload: (422, "invalid_payload"),
    DegenerateVector: (422, "degenerate_vector"),
    ValueError: (422, "validation"),
    ConfigParseFailure: (502, "config_parse_failure"),
    OutlineParseFailure: (502, "outline_parse_failure"),
    JudgeParseFailure: (502, "judge_parse_failure"),
    EndpointUnavailable: (502, "gateway_unavailable"),
    RequestRejected: (502, "gateway_rejected"),
    ProtocolError: (502, "gateway_protocol_error"),
    EmbeddingUnavailable: (502, "embedding_unavailable"),
    SearchUnavailable: (502, "search_unavailable"),
    PipelineError: (409, "pipeline_error"),
}


@dataclass
class AppState:
    """Wiring for one service process: shared stores, gateway, pipeline."""

    data_dir: Path
    gateway: Gateway
    knowledge: KnowledgeStore
    experience: ExperienceStore
    search: SearchProvider
    pipeline: Pipeline
    clock: Clock = field(default_factory=WallClock)


def build_state(
    data_dir: str | Path,
    offline: bool = False,
    stub_script: str | Path | None = None,
    clock: Clock | None = None,
    rng: random.Random | None = None,
) -> AppState:
    """Assemble stores and pipeline under ``data_dir``.

    ``offline`` forces the stub gateway / embedder / fixture search;
    ``stub_script`` optionally loads scripted stub responses and search
    fixtures from a JSON file ({"script": ..., "latencies": ...,
    "search_fixtures": ...}).
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    clock = clock or WallClock()
    script: dict[str, Any] = {}
    latencies: dict[str, float] = {}
    fixtures: dict[str, list[dict[str, str]]] = {}
    if stub_script is not None:
        raw = json.loads(Path(stub_script).read_text(encoding="utf-8"))
        script = raw.get("script", {})
        latencies = raw.get("latencies", {})
        fixtures = raw.get("search_fixtures", {})
    if offline:
        gateway = Gateway(backend=StubBackend(script=script, latencies=latencies))
        embedder = StubEmbedder()
        search: SearchProvider = FixtureSearch(fixtures)
    else:
        gateway = gateway_from_env()
        embedder = embedder_from_env()
        search = search_from_env()
    knowledge = KnowledgeStore(data_dir / "kb", embedder=embedder)
    experience = ExperienceStore(data_dir / "experience", embedder=embedder)
    pipeline = Pipeline(
        gateway=gateway,
        knowledge=knowledge,
        experience=experience,
        search=search,
        session_root=data_dir,
        clock=clock,
        rng=rng,
    )
    return AppState(
        data_dir=data_dir,
        gateway=gateway,
        knowledge=knowledge,
        experience=experience,
        search=search,
        pipeline=pipeline,
        clock=clock,
    )


class PriorsBody(BaseModel):
    brief: str
    use_experience: bool = True


class ConfigPatchBody(BaseModel):
    fields: Optional[dict[str, Any]] = None
    instruction: Optional[str] = None


class OutlinePatchBody(BaseModel):
    commands: list[dict[str, Any]]


class ActionBody(BaseModel):
    kind: str
    revised_text: Optional[str] = None
    instruction: Optional[str] = None
    original_phrase: Optional[str] = None
    revised_phrase: Optional[str] = None


class DocumentBody(BaseModel):
    title: str
    body: str
    source_path: str = ""


def create_app(state: AppState) -> FastAPI:
    app = FastAPI(title="knowpilot", docs_url=None, redoc_url=None)
    pipeline = state.pipeline

    def _make_handler(status: int, code: str):
        async def handler(request: Request, exc: Exception):
            return JSONResponse(
                status_code=status,
                content={"code": code, "message": str(exc), "detail": None},
            )

        return handler

    for exc_type, (status, code) in API_ERROR_CODES.items():
        app.add_exception_handler(exc_type, _make_handler(status, code))

    @app.exception_handler(RequestValidationError)
    async def handle_body_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={
                "code": "validation",
                "message": "request body failed validation",
                "detail": exc.errors(),
            },
        )

    @app.exception_handler(Exception)
    async def handle_unexpected(request: Request, exc: Exception):
        # Same ApiError shape for anything unmapped; internals stay private.
        return JSONResponse(
            status_code=500,
            content={"code": "internal", "message": "internal error", "detail": None},
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201)
    def create_session():
        session = pipeline.create_session()
        return session.to_dict()

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": pipeline.list_sessions()}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return pipeline.session(session_id).to_dict()

    @app.post("/sessions/{session_id}/priors")
    def submit_priors(session_id: str, body: PriorsBody):
        session = pipeline.parse_priors(
            session_id, body.brief, use_experience=body.use_experience, blocking=False
        )
        return session.to_dict()

    @app.patch("/sessions/{session_id}/config")
    def patch_config(session_id: str, body: ConfigPatchBody):
        session = pipeline.edit_config(
            session_id,
            fields=body.fields,
            instruction=body.instruction,
            blocking=False,
        )
        return session.to_dict()

    @app.post("/sessions/{session_id}/outline")
    def generate_outline(session_id: str):
        session = pipeline.generate_outline(session_id, blocking=False)
        return session.to_dict()

    @app.patch("/sessions/{session_id}/outline")
    def edit_outline(session_id: str, body: OutlinePatchBody):
        if not body.commands:
            raise ValueError("commands must be non-empty")
        for command in body.commands:
            session = pipeline.edit_outline(session_id, command, blocking=False)
        return session.to_dict()

    @app.post("/sessions/{session_id}/sections/{section_id}/retrieve")
    def retrieve_section(session_id: str, section_id: str):
        session = pipeline.retrieve_for_section(
            session_id, section_id, blocking=False
        )
        return session.to_dict()

    @app.post("/sessions/{session_id}/sections/{section_id}/generate")
    def generate_section(session_id: str, section_id: str):
        session = pipeline.generate_section(session_id, section_id, blocking=False)
        return session.to_dict()

    @app.post("/sessions/{session_id}/sections/{section_id}/actions")
    def submit_action(session_id: str, section_id: str, body: ActionBody):
        action: Any
        if body.kind == "direct_edit":
            if body.revised_text is None:
                raise ValueError("direct_edit requires revised_text")
            action = DirectEdit(revised_text=body.revised_text)
        elif body.kind == "corrective_prompt":
            if not body.instruction:
                raise ValueError("corrective_prompt requires instruction")
            action = CorrectiveInstruction(instruction=body.instruction)
        elif body.kind == "refinement":
            if body.original_phrase is None or body.revised_phrase is None:
                raise ValueError(
                    "refinement requires original_phrase and revised_phrase"
                )
            action = Refinement(
                original_phrase=body.original_phrase,
                revised_phrase=body.revised_phrase,
            )
        elif body.kind == "accept":
            action = Accept()
        else:
            raise ValueError(f"unknown action kind: {body.kind}")
        session = pipeline.submit_user_action(
            session_id, section_id, action, blocking=False
        )
        return session.to_dict()

    @app.get("/sessions/{session_id}/export")
    def export_session(session_id: str):
        markdown = pipeline.export_markdown(session_id)
        return Response(content=markdown, media_type="text/markdown")

    @app.post("/kb/documents", status_code=201)
    def ingest_document(body: DocumentBody):
        doc = make_document(
            title=body.title,
            body=body.body,
            source_path=body.source_path,
            ingested_at=state.clock.now_ms(),
        )
        chunk_ids = state.knowledge.ingest_document(doc)
        return {
            "doc_id": doc.doc_id,
            "chunk_ids": chunk_ids,
            "chunk_count": len(chunk_ids),
        }

    @app.get("/kb/search")
    def kb_search(q: str = Query(...), k: int = Query(5)):
        results = state.knowledge.retrieve_top_k(q, k=k)
        return {
            "results": [
                {
                    "chunk_id": r.chunk.chunk_id,
                    "source_doc": r.chunk.source_doc,
                    "text": r.chunk.text,
                    "score": r.score,
                    "rank": r.rank,
                }
                for r in results
            ]
        }

    @app.get("/experience")
    def browse_experience(
        query: str = Query(""),
        kind: str = Query(""),
        limit: int = Query(20),
    ):
        kinds = [ExperienceKind(kind)] if kind else None
        if query:
            scored = state.experience.retrieve_relevant(
                query, limit=limit, kinds=kinds
            )
            records = [
                {**rec.to_dict(), "score": score} for rec, score in scored
            ]
        else:
            rows = [
                rec
                for rec in reversed(state.experience.records())
                if kinds is None or rec.kind in kinds
            ][:limit]
            records = [rec.to_dict() for rec in rows]
        for rec in records:
            rec.pop("embedding", None)
        return {"records": records}

    return app


def serve(
    data_dir: str | Path,
    host: str = "127.0.0.1",
    port: int = 8701,
    offline: bool = False,
    stub_script: str | Path | None = None,
) -> None:
    import uvicorn

    state = build_state(data_dir, offline=offline, stub_script=stub_script)
    app = create_app(state)
    uvicorn.run(app, host=host, port=port, log_level="warning")
