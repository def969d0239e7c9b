"""CLI behavior: subcommands, exit codes, stream separation, determinism."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from conftest import STANDARD_FIXTURES, STANDARD_SCRIPT
from knowpilot.cli import main

JUDGE_EXTRAS = {
    "judge_outline:t1": "SCORE: 4",
    "judge_content:t1": "SCORE: 3",
    "judge_fluency:t1": "SCORE: 4",
    "judge_structure:t1": "SCORE: 5",
    "chatbot_outline:t1": "1. Intro\n2. Close",
    "chatbot_article:t1": "Chatbot article body.",
}


@pytest.fixture
def stub_script(tmp_path) -> Path:
    path = tmp_path / "stub.json"
    path.write_text(
        json.dumps(
            {
                "script": {**STANDARD_SCRIPT, **JUDGE_EXTRAS},
                "latencies": {},
                "search_fixtures": STANDARD_FIXTURES,
            }
        ),
        encoding="utf-8",
    )
    return path


def run_cli(args, data_dir, stub_script, seed=11):
    return main(
        [
            "--data-dir",
            str(data_dir),
            "--offline",
            "--stub-script",
            str(stub_script),
            "--seed",
            str(seed),
            *args,
        ]
    )


class TestIngest:
    def test_single_file_prints_chunk_count(self, tmp_path, stub_script, capsys):
        doc = tmp_path / "notes.md"
        doc.write_text("A sentence about markets. " * 40, encoding="utf-8")
        code = run_cli(["ingest", str(doc)], tmp_path / "data", stub_script)
        assert code == 0
        out, err = capsys.readouterr()
        fields = out.strip().split("\t")
        assert fields[0] == str(doc)
        assert int(fields[2]) >= 1
        assert "ingested 1 document(s)" in err

    def test_missing_file_is_domain_error(self, tmp_path, stub_script, capsys):
        code = run_cli(
            ["ingest", str(tmp_path / "absent.md")], tmp_path / "data", stub_script
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestSessionFlow:
    def _new_session(self, data_dir, stub_script, capsys) -> str:
        assert run_cli(
            ["session", "new", "--brief", "quarterly market review"],
            data_dir,
            stub_script,
        ) == 0
        return capsys.readouterr().out.strip()

    def test_new_outline_write_export(self, tmp_path, stub_script, capsys):
        data = tmp_path / "data"
        sid = self._new_session(data, stub_script, capsys)
        assert len(sid) == 32

        assert run_cli(["session", "outline", sid], data, stub_script) == 0
        out, _ = capsys.readouterr()
        assert out.splitlines()[0].startswith("1. Market Overview")

        assert (
            run_cli(["session", "write", sid, "--auto-accept"], data, stub_script)
            == 0
        )
        out, _ = capsys.readouterr()
        assert out.strip() == "complete"

        target = tmp_path / "article.md"
        assert (
            run_cli(
                ["session", "export", sid, "--out", str(target)],
                data,
                stub_script,
            )
            == 0
        )
        capsys.readouterr()
        content = target.read_text(encoding="utf-8")
        assert content.startswith("# Quarterly Market Review")

    def test_export_incomplete_session_exits_1(self, tmp_path, stub_script, capsys):
        data = tmp_path / "data"
        sid = self._new_session(data, stub_script, capsys)
        code = run_cli(["session", "export", sid], data, stub_script)
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_auto_accept_writes_no_experience(self, tmp_path, stub_script, capsys):
        data = tmp_path / "data"
        sid = self._new_session(data, stub_script, capsys)
        run_cli(["session", "outline", sid], data, stub_script)
        run_cli(["session", "write", sid, "--auto-accept"], data, stub_script)
        experience_file = data / "experience" / "experience.jsonl"
        assert (
            not experience_file.exists()
            or experience_file.read_text(encoding="utf-8").strip() == ""
        )

    def test_write_without_auto_accept_leaves_drafted(
        self, tmp_path, stub_script, capsys
    ):
        data = tmp_path / "data"
        sid = self._new_session(data, stub_script, capsys)
        run_cli(["session", "outline", sid], data, stub_script)
        capsys.readouterr()
        assert run_cli(["session", "write", sid], data, stub_script) == 0
        out, _ = capsys.readouterr()
        assert out.strip() == "drafting"

    def test_exports_identical_across_two_runs(self, tmp_path, stub_script, capsys):
        exports = []
        for name in ("one", "two"):
            data = tmp_path / name
            sid = self._new_session(data, stub_script, capsys)
            run_cli(["session", "outline", sid], data, stub_script)
            run_cli(["session", "write", sid, "--auto-accept"], data, stub_script)
            target = tmp_path / f"{name}.md"
            run_cli(
                ["session", "export", sid, "--out", str(target)], data, stub_script
            )
            capsys.readouterr()
            exports.append(target.read_bytes())
        assert exports[0] == exports[1]


class TestEvalCli:
    def test_eval_run_prints_table_and_writes_reports(
        self, tmp_path, stub_script, capsys
    ):
        topics = tmp_path / "topics.jsonl"
        topics.write_text(
            '{"topic_id": "t1", "domain_label": "finance", "brief": "markets"}\n',
            encoding="utf-8",
        )
        out_dir = tmp_path / "reports"
        code = run_cli(
            [
                "eval",
                "run",
                "--topics",
                str(topics),
                "--methods",
                "chatbot,pipeline",
                "--out",
                str(out_dir),
            ],
            tmp_path / "data",
            stub_script,
        )
        assert code == 0
        out, _ = capsys.readouterr()
        assert "Time Score" in out and "Outline Score" in out
        assert "chatbot" in out and "pipeline" in out
        csv_text = (out_dir / "report.csv").read_text(encoding="utf-8")
        assert csv_text.splitlines()[0] == (
            "Method,Topic,Time Score,Outline Score,Content,Fluency,Structure"
        )
        payload = json.loads((out_dir / "report.json").read_text(encoding="utf-8"))
        assert {entry["method"] for entry in payload} == {"chatbot", "pipeline"}

    def test_unknown_method_is_domain_error(self, tmp_path, stub_script, capsys):
        topics = tmp_path / "topics.jsonl"
        topics.write_text('{"topic_id": "t1", "brief": "b"}\n', encoding="utf-8")
        code = run_cli(
            ["eval", "run", "--topics", str(topics), "--methods", "mystery"],
            tmp_path / "data",
            stub_script,
        )
        assert code == 1


class TestUsageErrors:
    def test_missing_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["session", "new", "--nonsense"])
        assert excinfo.value.code == 2
