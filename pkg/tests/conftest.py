"""Shared fixtures: stub-backed pipelines and a standard scripted scenario."""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import pytest

from knowpilot.experience import ExperienceStore
from knowpilot.gateway import Gateway, StubBackend
from knowpilot.knowledge import ChunkingPolicy, KnowledgeStore, StubEmbedder, make_document
from knowpilot.pipeline import LogicalClock, Pipeline
from knowpilot.search import FixtureSearch

STANDARD_SCRIPT = {
    "priors": (
        "PERSONA: senior market analyst\n"
        "STYLE: formal and precise\n"
        "DOMAIN: finance\n"
        "STRUCTURE:\n"
        "- market overview\n"
        "- risk analysis"
    ),
    "outline": (
        "TITLE: Quarterly Market Review\n"
        "1. Market Overview :: set the scene\n"
        "2. Risk Analysis :: quantify exposure\n"
        "3. Outlook"
    ),
    "keywords:Market Overview": "equity market trends\nquarterly earnings",
    "keywords:Risk Analysis": "portfolio risk factors",
    "keywords:Outlook": "market outlook forecast",
    "section:Market Overview": (
        "Equity markets advanced this quarter on broad earnings strength."
    ),
    "section:Risk Analysis": (
        "Concentration risk remains the dominant exposure in the portfolio."
    ),
    "section:Outlook": "The outlook is cautiously constructive.",
}

STANDARD_FIXTURES = {
    "equity market trends": [
        {
            "title": "Market wrap",
            "snippet": "Equities rose across sectors.",
            "url": "https://example.org/markets",
        }
    ],
    "portfolio risk factors": [
        {
            "title": "Risk primer",
            "snippet": "Concentration and duration risk.",
            "url": "https://example.org/risk",
        }
    ],
}

STANDARD_DOCS = [
    (
        "earnings",
        "Quarterly earnings rose nine percent across the index. "
        "Margins expanded in technology and health care.",
    ),
    (
        "risk",
        "Concentration risk is elevated when few names drive returns. "
        "Diversification and hedging reduce drawdowns.",
    ),
]


@dataclass
class Rig:
    """One wired pipeline with all collaborators reachable for assertions."""

    pipeline: Pipeline
    gateway: Gateway
    backend: StubBackend
    knowledge: KnowledgeStore
    experience: ExperienceStore
    search: FixtureSearch
    clock: LogicalClock
    root: Path


def build_rig(
    root: Path,
    script: dict | None = None,
    latencies: dict | None = None,
    fixtures: dict | None = None,
    docs: list[tuple[str, str]] | None = None,
    seed: int = 42,
    token_budget: int = 6000,
    policy: ChunkingPolicy | None = None,
) -> Rig:
    root.mkdir(parents=True, exist_ok=True)
    embedder = StubEmbedder()
    backend = StubBackend(
        script=dict(script if script is not None else STANDARD_SCRIPT),
        latencies=latencies,
    )
    gateway = Gateway(backend=backend)
    knowledge = KnowledgeStore(root / "kb", embedder=embedder, policy=policy)
    experience = ExperienceStore(root / "experience", embedder=embedder)
    search = FixtureSearch(
        fixtures if fixtures is not None else STANDARD_FIXTURES
    )
    clock = LogicalClock()
    pipeline = Pipeline(
        gateway=gateway,
        knowledge=knowledge,
        experience=experience,
        search=search,
        session_root=root,
        clock=clock,
        rng=random.Random(seed),
        token_budget=token_budget,
    )
    for title, body in docs if docs is not None else STANDARD_DOCS:
        knowledge.ingest_document(make_document(title, body, ingested_at=0))
    return Rig(
        pipeline=pipeline,
        gateway=gateway,
        backend=backend,
        knowledge=knowledge,
        experience=experience,
        search=search,
        clock=clock,
        root=root,
    )


@pytest.fixture
def rig(tmp_path: Path) -> Rig:
    return build_rig(tmp_path / "rig")


@pytest.fixture
def embedder() -> StubEmbedder:
    return StubEmbedder()
