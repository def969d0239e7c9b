"""Open-domain evidence: a Serper-wire-compatible web search client plus a
fixture-backed offline stub.  The pipeline treats SearchUnavailable as a
degradation, not a failure."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Any, Mapping, Protocol

import requests

DEFAULT_SEARCH_LIMIT = 5


class SearchUnavailable(Exception):
    pass


@dataclass(frozen=True)
class WebResult:
    title: str
    snippet: str
    url: str
    rank: int
    fetched_at: int

    def __post_init__(self) -> None:
        if not self.url:
            raise ValueError("url must be non-empty")
        if self.rank < 1:
            raise ValueError("rank is 1-based")

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "snippet": self.snippet,
            "url": self.url,
            "rank": self.rank,
            "fetched_at": self.fetched_at,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "WebResult":
        return cls(
            title=raw["title"],
            snippet=raw["snippet"],
            url=raw["url"],
            rank=int(raw["rank"]),
            fetched_at=int(raw["fetched_at"]),
        )


class SearchProvider(Protocol):
    def search(self, query: str, limit: int = DEFAULT_SEARCH_LIMIT) -> list[WebResult]: ...


class FixtureSearch:
    """Offline stub: a pure function of (query, fixture set).  Queries with
    no fixture return no results."""

    def __init__(
        self,
        fixtures: Mapping[str, list[Mapping[str, str]]] | None = None,
        fetched_at: int = 0,
    ):
        self._fixtures = {k: list(v) for k, v in (fixtures or {}).items()}
        self._fetched_at = fetched_at

    def search(self, query: str, limit: int = DEFAULT_SEARCH_LIMIT) -> list[WebResult]:
        if not query:
            raise ValueError("query must be non-empty")
        rows = self._fixtures.get(query, [])[:limit]
        return [
            WebResult(
                title=row.get("title", ""),
                snippet=row.get("snippet", ""),
                url=row["url"],
                rank=i + 1,
                fetched_at=self._fetched_at,
            )
            for i, row in enumerate(rows)
        ]


class SerperSearch:
    """Live client for the Serper JSON search wire format: query goes out as
    ``q``, results come back under ``organic`` with title/snippet/link."""

    def __init__(
        self,
        api_key: str,
        endpoint: str = "https://google.serper.dev/search",
        timeout: float = 30.0,
    ):
        self.api_key = api_key
        self.endpoint = endpoint
        self.timeout = timeout

    def search(self, query: str, limit: int = DEFAULT_SEARCH_LIMIT) -> list[WebResult]:
        if not query:
            raise ValueError("query must be non-empty")
        try:
            resp = requests.post(
                self.endpoint,
                json={"q": query},
                headers={
                    "X-API-KEY": self.api_key,
                    "Content-Type": "application/json",
                },
                timeout=self.timeout,
            )
            resp.raise_for_status()
            body = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise SearchUnavailable(str(exc)) from exc
        now_ms = int(time.time() * 1000)
        results = []
        for i, row in enumerate(body.get("organic", [])[:limit]):
            url = row.get("link", "")
            if not url:
                continue
            results.append(
                WebResult(
                    title=row.get("title", ""),
                    snippet=row.get("snippet", ""),
                    url=url,
                    rank=i + 1,
                    fetched_at=now_ms,
                )
            )
        return results


def search_from_env() -> SearchProvider:
    """SerperSearch when KNOWPILOT_SEARCH_API_KEY is set, otherwise an empty
    fixture stub."""
    api_key = os.environ.get("KNOWPILOT_SEARCH_API_KEY", "")
    if api_key:
        return SerperSearch(api_key=api_key)
    return FixtureSearch()
