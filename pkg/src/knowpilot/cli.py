"""Command-line front door: ingest documents, run sessions scriptably,
export articles, run evaluations, serve the HTTP API.

Exit codes: 0 success, 1 domain error, 2 usage error.  Progress goes to
stderr, machine output (ids, counts, reports) to stdout.
"""

from __future__ import annotations

import argparse
import os
import random
import sys
from pathlib import Path

from .api import build_state, serve
from .evalharness import (
    ChatbotRunner,
    Judge,
    PipelineRunner,
    format_table,
    load_topics,
    reports_to_csv,
    reports_to_json,
    run_comparison,
)
from .experience import ExperienceError
from .gateway import GatewayError
from .knowledge import KnowledgeError, make_document
from .pipeline import Pipeline, PipelineError
from .search import SearchUnavailable

DOMAIN_ERRORS = (
    PipelineError,
    KnowledgeError,
    ExperienceError,
    GatewayError,
    SearchUnavailable,
    FileNotFoundError,
    ValueError,
)


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _state(args: argparse.Namespace):
    return build_state(
        data_dir=args.data_dir,
        offline=args.offline,
        stub_script=args.stub_script,
        rng=random.Random(args.seed) if args.seed is not None else None,
    )


def cmd_ingest(args: argparse.Namespace) -> int:
    state = _state(args)
    total = 0
    for path in args.paths:
        path = Path(path)
        body = path.read_text(encoding="utf-8")
        doc = make_document(title=path.stem, body=body, source_path=str(path))
        chunk_ids = state.knowledge.ingest_document(doc)
        total += len(chunk_ids)
        print(f"{path}\t{doc.doc_id}\t{len(chunk_ids)}")
    _progress(f"ingested {len(args.paths)} document(s), {total} chunk(s)")
    return 0


def cmd_session_new(args: argparse.Namespace) -> int:
    state = _state(args)
    session = state.pipeline.create_session()
    state.pipeline.parse_priors(
        session.session_id, args.brief, use_experience=not args.no_experience
    )
    _progress(f"session configured from brief ({len(args.brief)} chars)")
    print(session.session_id)
    return 0


def cmd_session_outline(args: argparse.Namespace) -> int:
    state = _state(args)
    session = state.pipeline.generate_outline(args.session_id)
    outline = session.outline
    assert outline is not None
    _progress(f"outline generated: {len(outline.sections)} section(s)")
    for i, section in enumerate(outline.sections):
        print(f"{i + 1}. {section.heading}\t{section.id}")
    return 0


def cmd_session_write(args: argparse.Namespace) -> int:
    state = _state(args)
    session = state.pipeline.write_all(
        args.session_id, auto_accept=args.auto_accept
    )
    _progress(f"session state: {session.state.value}")
    print(session.state.value)
    return 0


def cmd_session_export(args: argparse.Namespace) -> int:
    state = _state(args)
    markdown = state.pipeline.export_markdown(args.session_id)
    if args.out:
        Path(args.out).write_text(markdown, encoding="utf-8")
        _progress(f"wrote {args.out}")
    else:
        sys.stdout.write(markdown)
    return 0


def cmd_eval_run(args: argparse.Namespace) -> int:
    state = _state(args)
    topics = load_topics(args.topics)
    methods = []
    for name in args.methods.split(","):
        name = name.strip()
        if name == "chatbot":
            methods.append(ChatbotRunner(state.gateway))
        elif name == "pipeline":

            def factory(topic, _args=args):
                nested = build_state(
                    data_dir=Path(_args.data_dir) / "eval" / topic.topic_id,
                    offline=_args.offline,
                    stub_script=_args.stub_script,
                    rng=random.Random(_args.seed)
                    if _args.seed is not None
                    else None,
                )
                return nested.pipeline

            methods.append(PipelineRunner(factory))
        else:
            raise ValueError(f"unknown method: {name}")
    judge = Judge(state.gateway)
    reports = run_comparison(
        methods, topics, judge, parallelism=args.parallelism
    )
    print(format_table(reports))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(reports_to_csv(reports), encoding="utf-8")
        (out / "report.json").write_text(reports_to_json(reports), encoding="utf-8")
        _progress(f"wrote {out / 'report.csv'} and {out / 'report.json'}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    host, _, port = args.bind.partition(":")
    serve(
        data_dir=args.data_dir,
        host=host or "127.0.0.1",
        port=int(port or 8701),
        offline=args.offline,
        stub_script=args.stub_script,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knowpilot",
        description="Domain-writing agent engine: sessions, knowledge, evaluation.",
    )
    parser.add_argument(
        "--data-dir",
        default=os.environ.get("KNOWPILOT_DATA_DIR", "./knowpilot-data"),
        help="root directory for stores and sessions "
        "(env KNOWPILOT_DATA_DIR)",
    )
    parser.add_argument(
        "--offline",
        action="store_true",
        help="force the stub gateway, stub embedder, and fixture search",
    )
    parser.add_argument(
        "--stub-script",
        default=os.environ.get("KNOWPILOT_STUB_SCRIPT"),
        help="JSON file with scripted stub responses and search fixtures",
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="seed for reproducible ids"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="ingest text/markdown documents")
    p_ingest.add_argument("paths", nargs="+")
    p_ingest.set_defaults(func=cmd_ingest)

    p_session = sub.add_parser("session", help="session lifecycle")
    session_sub = p_session.add_subparsers(dest="session_command", required=True)

    p_new = session_sub.add_parser("new", help="create a session from a brief")
    p_new.add_argument("--brief", required=True)
    p_new.add_argument("--no-experience", action="store_true")
    p_new.set_defaults(func=cmd_session_new)

    p_outline = session_sub.add_parser("outline", help="generate the outline")
    p_outline.add_argument("session_id")
    p_outline.set_defaults(func=cmd_session_outline)

    p_write = session_sub.add_parser("write", help="retrieve and draft sections")
    p_write.add_argument("session_id")
    p_write.add_argument("--auto-accept", action="store_true")
    p_write.set_defaults(func=cmd_session_write)

    p_export = session_sub.add_parser("export", help="export the article markdown")
    p_export.add_argument("session_id")
    p_export.add_argument("--out", default=None)
    p_export.set_defaults(func=cmd_session_export)

    p_eval = sub.add_parser("eval", help="evaluation harness")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)
    p_run = eval_sub.add_parser("run", help="compare methods over a topic file")
    p_run.add_argument("--topics", required=True)
    p_run.add_argument("--methods", default="chatbot,pipeline")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--parallelism", type=int, default=1)
    p_run.set_defaults(func=cmd_eval_run)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--bind", default="127.0.0.1:8701")
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
