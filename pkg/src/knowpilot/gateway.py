"""Single choke point for model calls.

A chat-completion client speaking the OpenAI-compatible wire format against
any configured endpoint, plus a deterministic stub backend for offline runs
and tests, and a ``{{name}}`` prompt-template renderer.

Endpoint configuration comes from KNOWPILOT_LLM_BASE_URL,
KNOWPILOT_LLM_API_KEY and KNOWPILOT_LLM_MODEL.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol

import requests

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 2048
GENERATION_TEMPERATURE = 0.3
PARSING_TEMPERATURE = 0.0

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


class GatewayError(Exception):
    """Base class for gateway failures."""


class EndpointUnavailable(GatewayError):
    """Transport kept failing (or the endpoint kept returning 5xx) after retries."""


class RequestRejected(GatewayError):
    """The endpoint answered with a 4xx; not retried."""


class ProtocolError(GatewayError):
    """The endpoint answered 200 with a body we cannot interpret."""


class MissingBinding(GatewayError):
    def __init__(self, name: str):
        super().__init__(f"missing template binding: {name}")
        self.name = name


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = GENERATION_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    request_tag: str = ""

    def validate(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        for msg in self.messages:
            if msg.role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown message role: {msg.role}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency must be >= 0")


def estimate_tokens(text: str) -> int:
    """Crude budget estimate at 4 characters per token."""
    return math.ceil(len(text) / 4)


def stub_text(request: ChatRequest) -> str:
    """Deterministic unscripted stub completion: a stable content hash over
    the concatenated message contents."""
    digest = hashlib.sha256(
        "".join(m.content for m in request.messages).encode("utf-8")
    ).hexdigest()
    return "STUB:" + digest[:16]


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class StubBackend:
    """Offline backend: a pure function of (messages, script).

    ``script`` maps request_tag to canned text; unscripted requests get the
    stable content-hash text.  Scripted entries may be a list, consumed one
    response per call (for retry scenarios).  ``latencies`` maps request_tag
    to a reported latency in ms without actually sleeping.
    """

    def __init__(
        self,
        script: Mapping[str, str | list[str]] | None = None,
        latencies: Mapping[str, float] | None = None,
    ):
        self._script: dict[str, str | list[str]] = dict(script or {})
        self._latencies = dict(latencies or {})
        self.calls: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls.append(request)
        entry = self._script.get(request.request_tag)
        if isinstance(entry, list):
            text = entry.pop(0) if entry else stub_text(request)
        elif entry is not None:
            text = entry
        else:
            text = stub_text(request)
        prompt_chars = sum(len(m.content) for m in request.messages)
        return ChatResponse(
            text=text,
            prompt_tokens=math.ceil(prompt_chars / 4),
            completion_tokens=estimate_tokens(text),
            latency_ms=float(self._latencies.get(request.request_tag, 0.0)),
        )


class HttpBackend:
    """OpenAI-compatible chat-completions client with bounded retries.

    Retries transport failures and 5xx up to ``max_retries`` times beyond
    the first attempt, backing off 250 ms * 2^attempt; 4xx is rejected
    without retry.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self.last_attempts = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": request.model,
            "messages": [
                {"role": m.role, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"

        last_error: Exception | None = None
        start = time.monotonic()
        for attempt in range(self.max_retries + 1):
            self.last_attempts = attempt + 1
            if attempt:
                self._sleep(self.backoff_base * 2**attempt)
            try:
                resp = requests.post(
                    url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning(
                    "transport failure for %s (attempt %d): %s",
                    request.request_tag,
                    attempt + 1,
                    exc,
                )
                continue
            if resp.status_code >= 500:
                last_error = EndpointUnavailable(f"HTTP {resp.status_code}")
                logger.warning(
                    "HTTP %d for %s (attempt %d)",
                    resp.status_code,
                    request.request_tag,
                    attempt + 1,
                )
                continue
            if resp.status_code >= 400:
                raise RequestRejected(f"HTTP {resp.status_code}: {resp.text[:500]}")
            latency_ms = (time.monotonic() - start) * 1000.0
            if attempt:
                logger.info(
                    "request %s succeeded with retry count %d",
                    request.request_tag,
                    attempt,
                )
            return self._parse(resp, latency_ms)
        raise EndpointUnavailable(f"exhausted retries: {last_error}")

    @staticmethod
    def _parse(resp: requests.Response, latency_ms: float) -> ChatResponse:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage") or {}
            return ChatResponse(
                text=text,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                latency_ms=latency_ms,
            )
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion body: {exc}") from exc


@dataclass(frozen=True)
class Gateway:
    """Validates requests and delegates to the configured backend.  All
    per-request state is local, so concurrent in-flight calls from multiple
    sessions are safe; the configuration is read-only after construction."""

    backend: Backend
    model: str = "stub"

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        return self.backend.complete(request)

    def chat(
        self,
        messages: list[tuple[str, str]],
        temperature: float = GENERATION_TEMPERATURE,
        request_tag: str = "",
        max_tokens: int = DEFAULT_MAX_TOKENS,
    ) -> ChatResponse:
        return self.complete(
            ChatRequest(
                model=self.model,
                messages=tuple(ChatMessage(role, content) for role, content in messages),
                temperature=temperature,
                max_tokens=max_tokens,
                request_tag=request_tag,
            )
        )


def gateway_from_env() -> Gateway:
    """Build a gateway from KNOWPILOT_LLM_* environment variables; without a
    base URL this returns a stub-backed gateway."""
    base_url = os.environ.get("KNOWPILOT_LLM_BASE_URL", "")
    model = os.environ.get("KNOWPILOT_LLM_MODEL", "stub")
    if not base_url:
        return Gateway(backend=StubBackend(), model=model)
    return Gateway(
        backend=HttpBackend(
            base_url=base_url,
            api_key=os.environ.get("KNOWPILOT_LLM_API_KEY", ""),
        ),
        model=model,
    )


@dataclass(frozen=True)
class PromptTemplate:
    """Text template with ``{{name}}`` placeholders.

    The placeholder set and ``required_bindings`` must coincide; build from
    raw text with :func:`template_from_text` to get that by construction.
    """

    template_id: str
    body: str
    required_bindings: frozenset[str]

    def __post_init__(self) -> None:
        found = set(_PLACEHOLDER_RE.findall(self.body))
        if found != set(self.required_bindings):
            raise ValueError(
                f"template {self.template_id}: placeholders {sorted(found)} != "
                f"required bindings {sorted(self.required_bindings)}"
            )


def template_from_text(template_id: str, body: str) -> PromptTemplate:
    return PromptTemplate(
        template_id=template_id,
        body=body,
        required_bindings=frozenset(_PLACEHOLDER_RE.findall(body)),
    )


def render_prompt(template: PromptTemplate, bindings: Mapping[str, Any]) -> str:
    """Fill every placeholder; single pass, so binding values are never
    re-expanded."""
    missing = sorted(template.required_bindings - set(bindings))
    if missing:
        raise MissingBinding(missing[0])
    return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
