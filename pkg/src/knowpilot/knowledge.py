"""Private explicit knowledge: document ingestion, chunking, embedding, and
exact top-k cosine retrieval with append-only persistence.

Store directory layout:
    documents.jsonl  one RawDocument per line
    chunks.jsonl     chunk records, embeddings base64-encoded little-endian float32
    meta.json        dimension, chunking policy, embedding provider id

A document's chunk lines are appended before its document line; the
document line is the commit marker, so chunk lines without one are dropped
on open.  That makes ingestion atomic per document under kill/restart.
Embeddings are rounded to float32 at ingestion and all scoring starts from
those float32 values, so rankings are identical before and after reload.
"""

from __future__ import annotations

import base64
import json
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Protocol

import numpy as np
import requests

from . import kernels
from .model import KnowledgeChunk, RetrievalResult, canonical_json, derive_id

_WORD_RE = re.compile(r"\w+", re.UNICODE)

DEFAULT_DIMENSION = 384
DEFAULT_TOP_K = 5


class KnowledgeError(Exception):
    pass


class DuplicateDocument(KnowledgeError):
    pass


class EmbeddingUnavailable(KnowledgeError):
    pass


class DegenerateVector(KnowledgeError):
    pass


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    title: str
    body: str
    source_path: str
    ingested_at: int

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("document body must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "title": self.title,
            "body": self.body,
            "source_path": self.source_path,
            "ingested_at": self.ingested_at,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RawDocument":
        return cls(
            doc_id=raw["doc_id"],
            title=raw["title"],
            body=raw["body"],
            source_path=raw["source_path"],
            ingested_at=int(raw["ingested_at"]),
        )


def make_document(
    title: str, body: str, source_path: str = "", ingested_at: int | None = None
) -> RawDocument:
    """Document with a content-derived id, so the same content always maps
    to the same id and re-ingestion is caught as a duplicate."""
    return RawDocument(
        doc_id=derive_id("doc", title, body),
        title=title,
        body=body,
        source_path=source_path,
        ingested_at=int(time.time() * 1000) if ingested_at is None else ingested_at,
    )


@dataclass(frozen=True)
class ChunkingPolicy:
    """Sliding-window chunker settings; cuts prefer paragraph breaks, then
    sentence ends, then a hard cut at the size limit."""

    target_size: int = 800
    overlap: int = 200

    def __post_init__(self) -> None:
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if not 0 <= self.overlap < self.target_size:
            raise ValueError("overlap must satisfy 0 <= overlap < target_size")

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_size": self.target_size,
            "overlap": self.overlap,
            "boundary": "paragraph,sentence,hard",
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ChunkingPolicy":
        return cls(target_size=int(raw["target_size"]), overlap=int(raw["overlap"]))


_SENTENCE_ENDS = (". ", ".\n", "! ", "!\n", "? ", "?\n")


def _find_cut(body: str, start: int, hard_end: int, target: int) -> int:
    # Only consider boundaries in the back half of the window so short
    # paragraphs do not degenerate into tiny chunks.
    lo = start + max(1, target // 2)
    para = body.rfind("\n\n", lo, hard_end)
    if para != -1:
        return para + 2
    best = -1
    for marker in _SENTENCE_ENDS:
        pos = body.rfind(marker, lo, hard_end)
        if pos > best:
            best = pos
    if best != -1:
        return best + 1
    return hard_end


def chunk_text(
    body: str, policy: ChunkingPolicy | None = None
) -> list[tuple[tuple[int, int], str]]:
    """Split ``body`` into overlapping spans covering the whole text.

    The spans are literal substrings: concatenating the first chunk with
    each later chunk minus its overlap prefix reconstructs the body exactly.
    """
    if not body:
        raise ValueError("body must be non-empty")
    policy = policy or ChunkingPolicy()
    spans: list[tuple[int, int]] = []
    start = 0
    n = len(body)
    while True:
        if n - start <= policy.target_size:
            spans.append((start, n))
            break
        cut = _find_cut(body, start, start + policy.target_size, policy.target_size)
        spans.append((start, cut))
        start = max(cut - policy.overlap, start + 1)
    return [((s, e), body[s:e]) for s, e in spans]


@dataclass(frozen=True)
class VectorIndex:
    """Exact cosine index: unit-normalized float64 rows, one per entry.

    Entry ids are unique and every row shares the configured dimension;
    scoring is a full scan, which at the target scale (<= 1e5 entries)
    finishes in milliseconds and keeps the ranking provably exact.
    """

    dimension: int
    entry_ids: tuple[str, ...]
    matrix: np.ndarray
    metric: str = "cosine"

    def __post_init__(self) -> None:
        if len(set(self.entry_ids)) != len(self.entry_ids):
            raise ValueError("index entry ids must be unique")
        if self.matrix.shape != (len(self.entry_ids), self.dimension):
            raise ValueError(
                f"matrix shape {self.matrix.shape} does not match "
                f"{len(self.entry_ids)} entries x {self.dimension} dims"
            )

    def __len__(self) -> int:
        return len(self.entry_ids)

    @classmethod
    def build(
        cls, entries: list[tuple[str, np.ndarray]], dimension: int
    ) -> "VectorIndex":
        if not entries:
            return cls(dimension, (), np.zeros((0, dimension), dtype=np.float64))
        matrix = np.array([vec for _, vec in entries], dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateVector("index contains a zero embedding")
        return cls(
            dimension, tuple(entry_id for entry_id, _ in entries), matrix / norms
        )

    def scores(self, query: np.ndarray) -> np.ndarray:
        """Cosine similarity of every entry against a raw (non-unit) query."""
        qnorm = float(np.linalg.norm(query))
        if qnorm == 0.0:
            raise DegenerateVector("query embedded to a zero vector")
        return kernels.cosine_scores(self.matrix, np.asarray(query) / qnorm)


class Embedder(Protocol):
    dimension: int
    provider_id: str

    def embed(self, text: str) -> np.ndarray: ...


class StubEmbedder:
    """Deterministic offline embedder: hash each lowercase word into one of
    ``dimension`` buckets, count, then L2-normalize."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self.provider_id = f"stub-hash-{dimension}"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        vec = np.zeros(self.dimension, dtype=np.float64)
        words = _WORD_RE.findall(text.lower())
        if not words:
            # No word tokens (pure punctuation); hash the raw text instead.
            words = [text]
        for word in words:
            vec[zlib.crc32(word.encode("utf-8")) % self.dimension] += 1.0
        return vec / np.linalg.norm(vec)


class HttpEmbedder:
    """OpenAI-compatible /embeddings client, configured via
    KNOWPILOT_EMBED_BASE_URL / _API_KEY / _MODEL."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        dimension: int = DEFAULT_DIMENSION,
        timeout: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.dimension = dimension
        self.timeout = timeout
        self.provider_id = f"http-{model}"

    def embed(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": [text]},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise EmbeddingUnavailable(str(exc)) from exc
        if vec.shape != (self.dimension,):
            raise EmbeddingUnavailable(
                f"provider returned dimension {vec.shape}, expected {self.dimension}"
            )
        return vec


def embedder_from_env() -> Embedder:
    base_url = os.environ.get("KNOWPILOT_EMBED_BASE_URL", "")
    if not base_url:
        return StubEmbedder()
    return HttpEmbedder(
        base_url=base_url,
        model=os.environ.get("KNOWPILOT_EMBED_MODEL", "text-embedding-3-small"),
        api_key=os.environ.get("KNOWPILOT_EMBED_API_KEY", ""),
        dimension=int(os.environ.get("KNOWPILOT_EMBED_DIMENSION", DEFAULT_DIMENSION)),
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (norm_a * norm_b))


def encode_embedding(vec: np.ndarray) -> str:
    return base64.b64encode(
        np.asarray(vec, dtype=np.float64).astype("<f4").tobytes()
    ).decode("ascii")


def decode_embedding(raw: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(raw), dtype="<f4").astype(np.float64)


class KnowledgeStore:
    """Append-only persisted document/chunk store with an exact in-memory
    cosine index.  Single writer (ingestion holds the lock), lock-free
    concurrent reads against reference snapshots."""

    def __init__(
        self,
        root: str | Path,
        embedder: Embedder | None = None,
        policy: ChunkingPolicy | None = None,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.embedder = embedder or StubEmbedder()
        self._write_lock = threading.RLock()
        self._docs: dict[str, RawDocument] = {}
        self._chunks: tuple[KnowledgeChunk, ...] = ()
        self._index: VectorIndex | None = None

        meta_path = self.root / "meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta["dimension"] != self.embedder.dimension:
                raise ValueError(
                    f"store dimension {meta['dimension']} != embedder "
                    f"dimension {self.embedder.dimension}"
                )
            if meta["provider_id"] != self.embedder.provider_id:
                raise ValueError(
                    f"store was built with provider {meta['provider_id']}, "
                    f"got {self.embedder.provider_id}"
                )
            self.policy = ChunkingPolicy.from_dict(meta["policy"])
        else:
            self.policy = policy or ChunkingPolicy()
            meta_path.write_text(
                canonical_json(
                    {
                        "dimension": self.embedder.dimension,
                        "policy": self.policy.to_dict(),
                        "provider_id": self.embedder.provider_id,
                    }
                )
                + "\n",
                encoding="utf-8",
            )
        self._load()

    @property
    def _documents_path(self) -> Path:
        return self.root / "documents.jsonl"

    @property
    def _chunks_path(self) -> Path:
        return self.root / "chunks.jsonl"

    def _load(self) -> None:
        docs: dict[str, RawDocument] = {}
        for line in _read_jsonl(self._documents_path):
            doc = RawDocument.from_dict(line)
            docs[doc.doc_id] = doc
        chunks: list[KnowledgeChunk] = []
        for line in _read_jsonl(self._chunks_path):
            if line["source_doc"] not in docs:
                continue  # orphan from an interrupted ingest
            embedding = decode_embedding(line["embedding_b64"])
            chunk = KnowledgeChunk(
                chunk_id=line["chunk_id"],
                source_doc=line["source_doc"],
                text=line["text"],
                char_span=(int(line["char_span"][0]), int(line["char_span"][1])),
                embedding=tuple(embedding.tolist()),
            )
            start, end = chunk.char_span
            if docs[chunk.source_doc].body[start:end] != chunk.text:
                raise KnowledgeError(
                    f"chunk {chunk.chunk_id} does not match its source span"
                )
            chunks.append(chunk)
        self._docs = docs
        self._chunks = tuple(chunks)
        self._index = None

    def index(self) -> VectorIndex:
        index = self._index
        if index is None or len(index) != len(self._chunks):
            index = VectorIndex.build(
                [(c.chunk_id, np.asarray(c.embedding)) for c in self._chunks],
                self.embedder.dimension,
            )
            self._index = index
        return index

    def documents(self) -> list[RawDocument]:
        return sorted(self._docs.values(), key=lambda d: d.doc_id)

    def chunk_count(self) -> int:
        return len(self._chunks)

    def chunk_by_id(self, chunk_id: str) -> KnowledgeChunk | None:
        for chunk in self._chunks:
            if chunk.chunk_id == chunk_id:
                return chunk
        return None

    def ingest_document(
        self, doc: RawDocument, policy: ChunkingPolicy | None = None
    ) -> list[str]:
        with self._write_lock:
            if doc.doc_id in self._docs:
                raise DuplicateDocument(doc.doc_id)
            pieces = chunk_text(doc.body, policy or self.policy)
            new_chunks: list[KnowledgeChunk] = []
            for (start, end), text in pieces:
                vec = np.asarray(self.embedder.embed(text), dtype=np.float64)
                if vec.shape != (self.embedder.dimension,):
                    raise EmbeddingUnavailable(
                        f"embedder returned shape {vec.shape}"
                    )
                if not np.all(np.isfinite(vec)) or float(np.linalg.norm(vec)) == 0.0:
                    raise EmbeddingUnavailable("embedder returned a degenerate vector")
                vec32 = vec.astype("<f4").astype(np.float64)
                new_chunks.append(
                    KnowledgeChunk(
                        chunk_id=derive_id("chunk", doc.doc_id, start, end),
                        source_doc=doc.doc_id,
                        text=text,
                        char_span=(start, end),
                        embedding=tuple(vec32.tolist()),
                    )
                )
            # Chunks first, document line last: the document line commits.
            with open(self._chunks_path, "a", encoding="utf-8") as fh:
                for chunk in new_chunks:
                    record = {
                        "chunk_id": chunk.chunk_id,
                        "source_doc": chunk.source_doc,
                        "text": chunk.text,
                        "char_span": list(chunk.char_span),
                        "embedding_b64": encode_embedding(
                            np.asarray(chunk.embedding)
                        ),
                    }
                    fh.write(canonical_json(record) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            with open(self._documents_path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(doc.to_dict()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._docs = {**self._docs, doc.doc_id: doc}
            self._chunks = self._chunks + tuple(new_chunks)
            self._index = None
            return [c.chunk_id for c in new_chunks]

    def retrieve_top_k(self, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievalResult]:
        """Exact scan: the ``k`` highest-cosine chunks, ties broken by
        ascending chunk_id; fewer than ``k`` only when the index is smaller."""
        if k < 1:
            raise ValueError("k must be >= 1")
        chunks = self._chunks
        if not chunks:
            return []
        qvec = np.asarray(self.embedder.embed(query), dtype=np.float64)
        qvec = qvec.astype("<f4").astype(np.float64)
        scores = self.index().scores(qvec)
        order = sorted(
            range(len(chunks)), key=lambda i: (-scores[i], chunks[i].chunk_id)
        )[:k]
        return [
            RetrievalResult(chunk=chunks[i], score=float(scores[i]), rank=rank)
            for rank, i in enumerate(order, start=1)
        ]


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    """Parse a jsonl file, tolerating a torn trailing line."""
    if not path.exists():
        return []
    rows: list[dict[str, Any]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return rows
