"""Evaluation harness: judge-scored outline and article quality on a 1-5
scale, interaction-time accounting, and a multi-method comparison runner
over a topic file.

Scores come from rubric prompts that mandate a ``SCORE: <n>`` line; the
judge model is whatever gateway you hand in, so a deterministic stub makes
the whole harness offline and reproducible.  Reports use the column layout
Time Score / Outline Score / Content / Fluency / Structure.
"""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .gateway import Gateway, PARSING_TEMPERATURE, render_prompt, template_from_text
from .model import Session, SessionState
from .pipeline import Pipeline, SessionIncomplete, llm_latency_ms

REPORT_COLUMNS = ("Time Score", "Outline Score", "Content", "Fluency", "Structure")

_SCORE_RE = re.compile(r"SCORE:\s*(-?\d+(?:\.\d+)?)")


class JudgeParseFailure(Exception):
    pass


@dataclass(frozen=True)
class EvalTopic:
    topic_id: str
    domain_label: str
    brief: str

    def __post_init__(self) -> None:
        if not self.brief.strip():
            raise ValueError("brief must be non-empty")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EvalTopic":
        return cls(
            topic_id=raw["topic_id"],
            domain_label=raw.get("domain_label", "general"),
            brief=raw["brief"],
        )


def load_topics(path: str | Path) -> list[EvalTopic]:
    topics = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                topics.append(EvalTopic.from_dict(json.loads(line)))
    return topics


def parse_score(text: str) -> tuple[float, bool]:
    """Extract the mandated score line; returns (score, clamped_flag)."""
    match = _SCORE_RE.search(text)
    if not match:
        raise JudgeParseFailure("no SCORE line in judge output")
    value = float(match.group(1))
    if 1.0 <= value <= 5.0:
        return value, False
    return min(5.0, max(1.0, value)), True


class Judge:
    """Rubric-based judge over the gateway; one call per dimension."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self._templates = {
            name: template_from_text(
                name,
                resources.files("knowpilot.templates")
                .joinpath(f"judge_{name}.txt")
                .read_text(encoding="utf-8"),
            )
            for name in ("outline", "content", "fluency", "structure")
        }
        self.clamp_flags: list[str] = []

    def _score(self, name: str, bindings: Mapping[str, str], tag: str) -> float:
        prompt = render_prompt(self._templates[name], bindings)
        response = self.gateway.chat(
            [("user", prompt)], temperature=PARSING_TEMPERATURE, request_tag=tag
        )
        try:
            value, clamped = parse_score(response.text)
        except JudgeParseFailure:
            retry = self.gateway.chat(
                [
                    ("user", prompt),
                    ("assistant", response.text),
                    (
                        "user",
                        "Reply with exactly one line of the form SCORE: <number>.",
                    ),
                ],
                temperature=PARSING_TEMPERATURE,
                request_tag=tag,
            )
            value, clamped = parse_score(retry.text)
        if clamped:
            self.clamp_flags.append(tag)
        return value

    def judge_outline(self, outline_text: str, topic: EvalTopic) -> float:
        if not outline_text.strip():
            raise ValueError("outline must be non-empty")
        return self._score(
            "outline",
            {"topic": topic.brief, "outline": outline_text},
            tag=f"judge_outline:{topic.topic_id}",
        )

    def judge_article(
        self, article_text: str, topic: EvalTopic
    ) -> tuple[float, float, float]:
        if not article_text.strip():
            raise ValueError("article must be non-empty")
        scores = tuple(
            self._score(
                name,
                {"topic": topic.brief, "article": article_text},
                tag=f"judge_{name}:{topic.topic_id}",
            )
            for name in ("content", "fluency", "structure")
        )
        return scores  # type: ignore[return-value]


def time_score(session: Session) -> float:
    """Model latency plus accrued interaction time, in seconds to 2 dp."""
    if session.state != SessionState.COMPLETE:
        raise SessionIncomplete(session.session_id)
    return round(llm_latency_ms(session) / 1000.0 + session.clock_seconds, 2)


@dataclass(frozen=True)
class MethodOutcome:
    outline_text: str
    article_text: str
    time_seconds: float


class MethodRunner(Protocol):
    name: str

    def run(self, topic: EvalTopic) -> MethodOutcome: ...


class PipelineRunner:
    """Runs the full fusion pipeline end to end (auto-accepting drafts) and
    reports its session time score."""

    name = "pipeline"

    def __init__(self, pipeline_factory):
        # One fresh Pipeline per topic keeps store paths and ids isolated.
        self._factory = pipeline_factory

    def run(self, topic: EvalTopic) -> MethodOutcome:
        pipeline: Pipeline = self._factory(topic)
        session = pipeline.run_brief(topic.brief, auto_accept=True)
        outline = session.outline
        assert outline is not None
        outline_text = "\n".join(
            f"{i + 1}. {s.heading}" for i, s in enumerate(outline.sections)
        )
        article = pipeline.export_markdown(session.session_id)
        return MethodOutcome(
            outline_text=outline_text,
            article_text=article,
            time_seconds=time_score(session),
        )


class ChatbotRunner:
    """Baseline: a direct multi-turn conversation with the model, no
    retrieval and no experience."""

    name = "chatbot"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self._outline_template = template_from_text(
            "chatbot_outline",
            resources.files("knowpilot.templates")
            .joinpath("chatbot_outline.txt")
            .read_text(encoding="utf-8"),
        )
        self._article_template = template_from_text(
            "chatbot_article",
            resources.files("knowpilot.templates")
            .joinpath("chatbot_article.txt")
            .read_text(encoding="utf-8"),
        )

    def run(self, topic: EvalTopic) -> MethodOutcome:
        outline_resp = self.gateway.chat(
            [("user", render_prompt(self._outline_template, {"brief": topic.brief}))],
            request_tag=f"chatbot_outline:{topic.topic_id}",
        )
        article_resp = self.gateway.chat(
            [
                (
                    "user",
                    render_prompt(
                        self._article_template,
                        {"brief": topic.brief, "outline": outline_resp.text},
                    ),
                )
            ],
            request_tag=f"chatbot_article:{topic.topic_id}",
        )
        elapsed = (outline_resp.latency_ms + article_resp.latency_ms) / 1000.0
        return MethodOutcome(
            outline_text=outline_resp.text,
            article_text=article_resp.text,
            time_seconds=round(elapsed, 2),
        )


@dataclass(frozen=True)
class EvalRow:
    method: str
    topic_id: str
    time_score: float | None
    outline_score: float | None
    content: float | None
    fluency: float | None
    structure: float | None
    valid: bool
    error: str = ""

    def values(self) -> dict[str, float | None]:
        return {
            "Time Score": self.time_score,
            "Outline Score": self.outline_score,
            "Content": self.content,
            "Fluency": self.fluency,
            "Structure": self.structure,
        }


@dataclass(frozen=True)
class EvalReport:
    method: str
    rows: tuple[EvalRow, ...]
    aggregates: Mapping[str, float | None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "rows": [
                {
                    "topic_id": r.topic_id,
                    "valid": r.valid,
                    "error": r.error,
                    **r.values(),
                }
                for r in self.rows
            ],
            "aggregates": dict(self.aggregates),
        }


def _aggregate(rows: Sequence[EvalRow]) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    valid = [r for r in rows if r.valid]
    for column in REPORT_COLUMNS:
        values = [r.values()[column] for r in valid]
        out[column] = (
            round(sum(v for v in values if v is not None) / len(values), 2)
            if values
            else None
        )
    return out


def run_comparison(
    methods: Sequence[MethodRunner],
    topics: Sequence[EvalTopic],
    judge: Judge,
    parallelism: int = 1,
) -> list[EvalReport]:
    """Run every method over every topic; per-row failures are recorded and
    excluded from aggregates, the run continues."""
    if not methods or not topics:
        raise ValueError("need at least one method and one topic")

    def evaluate(runner: MethodRunner, topic: EvalTopic) -> EvalRow:
        try:
            outcome = runner.run(topic)
            outline_score = judge.judge_outline(outcome.outline_text, topic)
            content, fluency, structure = judge.judge_article(
                outcome.article_text, topic
            )
            return EvalRow(
                method=runner.name,
                topic_id=topic.topic_id,
                time_score=outcome.time_seconds,
                outline_score=outline_score,
                content=content,
                fluency=fluency,
                structure=structure,
                valid=True,
            )
        except Exception as exc:
            return EvalRow(
                method=runner.name,
                topic_id=topic.topic_id,
                time_score=None,
                outline_score=None,
                content=None,
                fluency=None,
                structure=None,
                valid=False,
                error=f"{type(exc).__name__}: {exc}",
            )

    jobs = [(runner, topic) for runner in methods for topic in topics]
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(lambda job: evaluate(*job), jobs))
    else:
        rows = [evaluate(runner, topic) for runner, topic in jobs]
    rows.sort(key=lambda r: (r.method, r.topic_id))

    reports = []
    for runner in methods:
        method_rows = tuple(r for r in rows if r.method == runner.name)
        reports.append(
            EvalReport(
                method=runner.name,
                rows=method_rows,
                aggregates=_aggregate(method_rows),
            )
        )
    return reports


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["Method", "Topic", *REPORT_COLUMNS])
    for report in reports:
        for row in report.rows:
            values = row.values()
            writer.writerow(
                [report.method, row.topic_id]
                + [
                    "" if values[c] is None else f"{values[c]:.2f}"
                    for c in REPORT_COLUMNS
                ]
            )
        writer.writerow(
            [report.method, "MEAN"]
            + [
                ""
                if report.aggregates[c] is None
                else f"{report.aggregates[c]:.2f}"
                for c in REPORT_COLUMNS
            ]
        )
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def format_table(reports: Sequence[EvalReport]) -> str:
    headers = ["Method", *REPORT_COLUMNS]
    table = [headers]
    for report in reports:
        table.append(
            [report.method]
            + [
                "-"
                if report.aggregates[c] is None
                else f"{report.aggregates[c]:.2f}"
                for c in REPORT_COLUMNS
            ]
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
