"""Fusion pipeline: parsing, outline editing, retrieval wiring, prompt
fusion, user actions, state-machine soundness, replay, and determinism."""

from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from conftest import STANDARD_SCRIPT, build_rig
from knowpilot.experience import apply_edit_script, normalize_ws
from knowpilot.knowledge import EmbeddingUnavailable
from knowpilot.model import (
    EventKind,
    ExperienceKind,
    KnowledgeChunk,
    Outline,
    OutlineSection,
    RetrievalResult,
    SectionStatus,
    Session,
    SessionEvent,
    SessionState,
)
from knowpilot.pipeline import (
    Accept,
    ConfigParseFailure,
    CorrectiveInstruction,
    DirectEdit,
    EVENT_GRAMMAR,
    IllegalTransition,
    OutlineEditRejected,
    OutlineParseFailure,
    PhraseNotFound,
    Refinement,
    UnknownSection,
    apply_event,
    assemble_fused_prompt,
    intervention_count,
    load_templates,
    replay,
)
from knowpilot.search import SearchUnavailable, WebResult


def configured(rig, brief="write a market review"):
    session = rig.pipeline.create_session()
    rig.pipeline.parse_priors(session.session_id, brief)
    return session.session_id


def outlined(rig):
    sid = configured(rig)
    rig.pipeline.generate_outline(sid)
    return sid


def drafting(rig):
    """s1 drafted, s2 retrieved, s3 pending."""
    sid = outlined(rig)
    outline = rig.pipeline.session(sid).outline
    s1, s2, _ = [s.id for s in outline.sections]
    rig.pipeline.retrieve_for_section(sid, s1)
    rig.pipeline.generate_section(sid, s1)
    rig.pipeline.retrieve_for_section(sid, s2)
    return sid


class TestParsePriors:
    def test_scripted_brief_yields_config(self, rig):
        sid = configured(rig, "write as a cardiologist, formal tone, 5 sections")
        session = rig.pipeline.session(sid)
        assert session.state == SessionState.CONFIGURED
        assert "analyst" in session.config.persona
        assert session.config.revision == 1
        assert session.event_log[-1].kind == EventKind.PRIORS_SUBMITTED

    def test_empty_brief_rejected(self, rig):
        session = rig.pipeline.create_session()
        with pytest.raises(ValueError):
            rig.pipeline.parse_priors(session.session_id, "   ")

    def test_prose_output_retries_once_then_fails(self, tmp_path):
        rig = build_rig(
            tmp_path / "r",
            script={"priors": ["just some prose", "more prose, still no format"]},
        )
        session = rig.pipeline.create_session()
        with pytest.raises(ConfigParseFailure):
            rig.pipeline.parse_priors(session.session_id, "brief")
        priors_calls = [c for c in rig.backend.calls if c.request_tag == "priors"]
        assert len(priors_calls) == 2  # one retry with a reformat instruction
        assert any(
            "format" in m.content.lower() for m in priors_calls[1].messages
        )
        after = rig.pipeline.session(session.session_id)
        assert after.state == SessionState.NEW
        assert after.event_log == ()

    def test_parse_recovers_on_retry(self, tmp_path):
        rig = build_rig(
            tmp_path / "r",
            script={"priors": ["prose first", STANDARD_SCRIPT["priors"]]},
        )
        session = rig.pipeline.create_session()
        rig.pipeline.parse_priors(session.session_id, "brief")
        assert rig.pipeline.session(session.session_id).state == SessionState.CONFIGURED


class TestEditConfig:
    def test_field_edit_bumps_revision_and_captures_direct_edit(self, rig):
        sid = configured(rig)
        before_count = rig.experience.count()
        session = rig.pipeline.edit_config(sid, fields={"style": "casual tone"})
        assert session.config.style == "casual tone"
        assert session.config.revision == 2
        assert rig.experience.count() == before_count + 1
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.DIRECT_EDIT
        assert session.event_log[-1].kind == EventKind.CONFIG_EDITED
        assert session.event_log[-1].detail["record_id"] == record.record_id

    def test_instruction_edit_routes_through_gateway(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["config_edit"] = (
            "PERSONA: senior market analyst\n"
            "STYLE: casual and friendly\n"
            "DOMAIN: finance\n"
            "STRUCTURE:\n- market overview"
        )
        rig = build_rig(tmp_path / "r", script=script)
        sid = configured(rig)
        session = rig.pipeline.edit_config(sid, instruction="more casual tone")
        assert session.config.style == "casual and friendly"
        assert session.config.revision == 2
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.CORRECTIVE_PROMPT
        assert record.payload["instruction"] == "more casual tone"
        assert "formal and precise" in record.payload["before"]
        assert "casual and friendly" in record.payload["after"]

    def test_edit_on_unconfigured_session_rejected(self, rig):
        session = rig.pipeline.create_session()
        with pytest.raises(IllegalTransition):
            rig.pipeline.edit_config(session.session_id, fields={"style": "x"})

    def test_requires_exactly_one_change_form(self, rig):
        sid = configured(rig)
        with pytest.raises(ValueError):
            rig.pipeline.edit_config(sid)
        with pytest.raises(ValueError):
            rig.pipeline.edit_config(sid, fields={"style": "a"}, instruction="b")


class TestGenerateOutline:
    def test_scripted_headings_become_pending_sections(self, rig):
        sid = outlined(rig)
        outline = rig.pipeline.session(sid).outline
        assert [s.heading for s in outline.sections] == [
            "Market Overview",
            "Risk Analysis",
            "Outlook",
        ]
        assert all(s.status == SectionStatus.PENDING for s in outline.sections)
        assert outline.sections[0].intent_notes == "set the scene"
        assert outline.revision == 1

    def test_zero_headings_fails_after_retry(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["outline"] = ["no headings here", "still no headings"]
        rig = build_rig(tmp_path / "r", script=script)
        sid = configured(rig)
        with pytest.raises(OutlineParseFailure):
            rig.pipeline.generate_outline(sid)
        session = rig.pipeline.session(sid)
        assert session.state == SessionState.CONFIGURED
        assert session.outline is None

    def test_identical_scripts_identical_outline(self, tmp_path):
        outlines = []
        for name in ("a", "b"):
            rig = build_rig(tmp_path / name, seed=7)
            sid = outlined(rig)
            outlines.append(rig.pipeline.session(sid).outline.to_dict())
        assert outlines[0] == outlines[1]

    def test_five_numbered_headings_make_five_sections(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["outline"] = "\n".join(f"{i}. Heading {i}" for i in range(1, 6))
        rig = build_rig(tmp_path / "five", script=script)
        sid = outlined(rig)
        outline = rig.pipeline.session(sid).outline
        assert len(outline.sections) == 5
        assert all(s.status == SectionStatus.PENDING for s in outline.sections)


class TestEditOutline:
    def test_reorder_moves_section_to_front(self, rig):
        sid = outlined(rig)
        outline = rig.pipeline.session(sid).outline
        ids = [s.id for s in outline.sections]
        session = rig.pipeline.edit_outline(
            sid, {"op": "reorder", "section_id": ids[2], "position": 0}
        )
        assert [s.id for s in session.outline.sections] == [ids[2], ids[0], ids[1]]
        assert session.outline.revision == 2

    def test_remove_last_section_rejected(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["outline"] = "TITLE: Single\n1. Only section"
        rig = build_rig(tmp_path / "r", script=script)
        sid = outlined(rig)
        only_id = rig.pipeline.session(sid).outline.sections[0].id
        with pytest.raises(OutlineEditRejected):
            rig.pipeline.edit_outline(sid, {"op": "remove", "section_id": only_id})

    def test_unknown_section_id(self, rig):
        sid = outlined(rig)
        with pytest.raises(UnknownSection):
            rig.pipeline.edit_outline(
                sid, {"op": "remove", "section_id": "not-a-section"}
            )

    def test_edit_captures_heading_diff(self, rig):
        sid = outlined(rig)
        first = rig.pipeline.session(sid).outline.sections[0]
        rig.pipeline.edit_outline(
            sid,
            {"op": "retitle", "section_id": first.id, "heading": "Fresh Heading"},
        )
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.DIRECT_EDIT
        assert "Market Overview" in record.payload["original"]
        assert "Fresh Heading" in record.payload["revised"]

    def test_retitle_resets_drafted_section_to_retrieved(self, rig):
        sid = drafting(rig)
        outline = rig.pipeline.session(sid).outline
        drafted = outline.sections[0]
        assert drafted.status == SectionStatus.DRAFTED
        session = rig.pipeline.edit_outline(
            sid,
            {"op": "retitle", "section_id": drafted.id, "heading": "Renamed"},
        )
        assert session.outline.sections[0].status == SectionStatus.RETRIEVED

    def test_add_inserts_pending_section(self, rig):
        sid = outlined(rig)
        session = rig.pipeline.edit_outline(
            sid, {"op": "add", "heading": "Appendix", "position": 1}
        )
        assert session.outline.sections[1].heading == "Appendix"
        assert session.outline.sections[1].status == SectionStatus.PENDING
        ids = [s.id for s in session.outline.sections]
        assert len(ids) == len(set(ids))


command_strategy = st.one_of(
    st.fixed_dictionaries(
        {
            "op": st.just("add"),
            "heading": st.text(min_size=1, max_size=8),
            "position": st.integers(min_value=-1, max_value=6),
        }
    ),
    st.fixed_dictionaries(
        {"op": st.just("remove"), "index": st.integers(min_value=0, max_value=5)}
    ),
    st.fixed_dictionaries(
        {
            "op": st.just("reorder"),
            "index": st.integers(min_value=0, max_value=5),
            "position": st.integers(min_value=0, max_value=6),
        }
    ),
    st.fixed_dictionaries(
        {
            "op": st.just("retitle"),
            "index": st.integers(min_value=0, max_value=5),
            "heading": st.text(min_size=1, max_size=8),
        }
    ),
)


class TestOutlineCommandProperties:
    @settings(max_examples=60, deadline=None)
    @given(commands=st.lists(command_strategy, max_size=12))
    def test_random_sequences_preserve_invariants(self, tmp_path_factory, commands):
        rig = build_rig(tmp_path_factory.mktemp("outline-prop"))
        sid = outlined(rig)
        session = rig.pipeline.session(sid)
        for command in commands:
            sections = session.outline.sections
            concrete = dict(command)
            if "index" in concrete:
                concrete["section_id"] = sections[
                    concrete.pop("index") % len(sections)
                ].id
            try:
                session = rig.pipeline.edit_outline(sid, concrete)
            except OutlineEditRejected:
                continue
            ids = [s.id for s in session.outline.sections]
            assert len(ids) == len(set(ids))
            assert len(ids) >= 1


class TestRetrieveForSection:
    def test_empty_private_store_degenerates_gracefully(self, tmp_path):
        rig = build_rig(tmp_path / "r", docs=[])
        sid = outlined(rig)
        section = rig.pipeline.session(sid).outline.sections[0]
        session = rig.pipeline.retrieve_for_section(sid, section.id)
        detail = session.event_log[-1].detail
        assert detail["private"] == []
        assert [w["url"] for w in detail["web"]] == ["https://example.org/markets"]
        assert session.outline.sections[0].status == SectionStatus.RETRIEVED

    def test_chunk_matching_heading_ranks_first(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["keywords:Market Overview"] = "Market Overview"
        docs = [("exact", "Market Overview"), ("other", "unrelated words entirely")]
        rig = build_rig(tmp_path / "r", script=script, docs=docs)
        sid = outlined(rig)
        section = rig.pipeline.session(sid).outline.sections[0]
        session = rig.pipeline.retrieve_for_section(sid, section.id)
        top = session.event_log[-1].detail["private"][0]
        chunk = rig.knowledge.chunk_by_id(top["chunk_id"])
        assert chunk.text == "Market Overview"
        assert top["score"] == pytest.approx(1.0, abs=1e-9)

    def test_provenance_ids_resolve_against_stores(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        for event in session.event_log:
            if event.kind != EventKind.SECTION_RETRIEVED:
                continue
            for row in event.detail["private"]:
                assert rig.knowledge.chunk_by_id(row["chunk_id"]) is not None
            for record_id, _ in event.detail["experience"]:
                assert rig.experience.by_id(record_id) is not None

    def test_search_outage_degrades_without_failing(self, tmp_path):
        class Outage:
            def search(self, query, limit=5):
                raise SearchUnavailable("down")

        rig = build_rig(tmp_path / "r")
        rig.pipeline.search = Outage()
        sid = outlined(rig)
        section = rig.pipeline.session(sid).outline.sections[0]
        session = rig.pipeline.retrieve_for_section(sid, section.id)
        detail = session.event_log[-1].detail
        assert detail["web"] == []
        assert detail["degraded_search"] is True
        assert session.outline.sections[0].status == SectionStatus.RETRIEVED

    def test_embedding_outage_aborts_section_stays_pending(self, rig, monkeypatch):
        sid = outlined(rig)
        section = rig.pipeline.session(sid).outline.sections[0]

        def broken(query, k=5):
            raise EmbeddingUnavailable("provider down")

        monkeypatch.setattr(rig.knowledge, "retrieve_top_k", broken)
        before = rig.pipeline.session(sid).to_dict()
        with pytest.raises(EmbeddingUnavailable):
            rig.pipeline.retrieve_for_section(sid, section.id)
        after = rig.pipeline.session(sid)
        assert after.to_dict() == before
        assert after.outline.sections[0].status == SectionStatus.PENDING

    def test_non_pending_section_rejected(self, rig):
        sid = drafting(rig)
        drafted = rig.pipeline.session(sid).outline.sections[0]
        with pytest.raises(IllegalTransition):
            rig.pipeline.retrieve_for_section(sid, drafted.id)


def _mk_chunk(i, text, score):
    chunk = KnowledgeChunk(
        chunk_id=f"chunk{i:02d}",
        source_doc="doc",
        text=text,
        char_span=(0, len(text)),
        embedding=(1.0, 0.0),
    )
    return RetrievalResult(chunk=chunk, score=score, rank=i + 1)


def _mk_record(i, score):
    from knowpilot.model import ExperienceRecord

    record = ExperienceRecord(
        record_id=f"record{i:02d}",
        kind=ExperienceKind.REFINEMENT,
        context_descriptor="ctx",
        payload={"original_phrase": f"orig {i}", "revised_phrase": f"rev {i}"},
        embedding=(1.0, 0.0),
        captured_at=i,
        session_id="s",
    )
    return (record, score)


def _mk_web(i):
    return WebResult(
        title=f"W{i}",
        snippet=f"snippet {i}",
        url=f"https://w{i}.example",
        rank=i + 1,
        fetched_at=0,
    )


@pytest.fixture(scope="module")
def templates():
    return load_templates()


def _fusion_fixture():
    config_sections = (
        OutlineSection("sec1", "Alpha", "", SectionStatus.RETRIEVED),
        OutlineSection("sec2", "Beta", "", SectionStatus.PENDING),
    )
    from knowpilot.model import AgentConfig

    config = AgentConfig(
        persona="chief economist",
        style="dry and precise",
        structure_expectations=("overview",),
        target_domain="finance",
        created_at=0,
        revision=1,
    )
    outline = Outline("Report", config_sections, revision=1)
    return config, outline, config_sections[0]


class TestAssembleFusedPrompt:
    def test_config_only_provenance_prior(self, templates):
        config, outline, section = _fusion_fixture()
        fusion = assemble_fused_prompt(
            config, outline, section, [], [], [], templates
        )
        assert fusion.prompt.provenance == ("prior",)
        assert "chief economist" in fusion.prompt.system_text
        assert "Write section 1: Alpha" in fusion.prompt.user_text

    def test_one_of_each_source_all_tags_in_order(self, templates):
        config, outline, section = _fusion_fixture()
        fusion = assemble_fused_prompt(
            config,
            outline,
            section,
            [_mk_chunk(0, "private evidence text", 0.9)],
            [_mk_web(0)],
            [_mk_record(0, 0.8)],
            templates,
        )
        assert fusion.prompt.provenance == (
            "prior",
            "explicit_private",
            "explicit_open",
            "experiential",
        )
        user = fusion.prompt.user_text
        assert "[chunk chunk00] private evidence text" in user
        assert "[web https://w0.example]" in user
        assert 'Replace "orig 0" with "rev 0".' in user
        # fixed block order
        assert (
            user.index("[chunk") < user.index("[web") < user.index("Replace")
        )

    def test_truncation_drops_lowest_scores_first(self, templates):
        config, outline, section = _fusion_fixture()
        filler = "x" * 400  # 100 tokens per chunk
        retrievals = [
            _mk_chunk(0, f"{filler} high", 0.9),
            _mk_chunk(1, f"{filler} mid", 0.5),
            _mk_chunk(2, f"{filler} low", 0.2),
        ]
        base = assemble_fused_prompt(
            config, outline, section, retrievals, [], [], templates
        )
        full_estimate = base.prompt.token_estimate
        # A budget just under the full size forces exactly one drop.
        fusion = assemble_fused_prompt(
            config,
            outline,
            section,
            retrievals,
            [],
            [],
            templates,
            token_budget=full_estimate - 1,
        )
        kept_ids = [r.chunk.chunk_id for r in fusion.private]
        assert kept_ids == ["chunk00", "chunk01"]  # 0.2 dropped first
        for result in fusion.private:
            assert f"[chunk {result.chunk.chunk_id}] {result.chunk.text}" in (
                fusion.prompt.user_text
            )
        assert "chunk02" not in fusion.prompt.user_text
        assert fusion.prompt.token_estimate <= full_estimate - 1

    def test_truncation_never_drops_last_item_of_a_source(self, templates):
        config, outline, section = _fusion_fixture()
        retrievals = [_mk_chunk(i, "x" * 300 + f" {i}", 0.9 - i / 10) for i in range(4)]
        web = [_mk_web(i) for i in range(3)]
        experience = [_mk_record(i, 0.8 - i / 10) for i in range(3)]
        # Budget sized to the one-item-per-source minimum: everything beyond
        # the guard must be dropped, the guard itself never is.
        minimal = assemble_fused_prompt(
            config,
            outline,
            section,
            retrievals[:1],
            web[:1],
            experience[:1],
            templates,
        ).prompt.token_estimate
        fusion = assemble_fused_prompt(
            config,
            outline,
            section,
            retrievals,
            web,
            experience,
            templates,
            token_budget=minimal,
        )
        assert len(fusion.private) == 1
        assert len(fusion.web) == 1
        assert len(fusion.experience) == 1
        assert fusion.private[0].chunk.chunk_id == "chunk00"  # best kept
        assert fusion.prompt.token_estimate <= minimal

    def test_impossible_budget_fails_loudly(self, templates):
        config, outline, section = _fusion_fixture()
        with pytest.raises(ValueError):
            assemble_fused_prompt(
                config,
                outline,
                section,
                [_mk_chunk(0, "x" * 600, 0.9)],
                [],
                [],
                templates,
                token_budget=1,
            )

    def test_cross_source_drop_order_follows_scores(self, templates):
        config, outline, section = _fusion_fixture()
        filler = "y" * 200
        retrievals = [
            _mk_chunk(0, f"{filler} a", 0.9),
            _mk_chunk(1, f"{filler} b", 0.35),
        ]
        web = [_mk_web(0), _mk_web(1)]  # scores 1.0 and 0.5
        experience = [_mk_record(0, 0.8), _mk_record(1, 0.3)]
        full = assemble_fused_prompt(
            config, outline, section, retrievals, web, experience, templates
        ).prompt.token_estimate
        fusion = assemble_fused_prompt(
            config,
            outline,
            section,
            retrievals,
            web,
            experience,
            templates,
            token_budget=full - 1,
        )
        # Lowest score overall is record1 at 0.3.
        assert [rec.record_id for rec, _ in fusion.experience] == ["record00"]
        assert len(fusion.private) == 2 and len(fusion.web) == 2


class TestGenerateSection:
    def test_draft_matches_script_with_cached_provenance(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        draft = session.drafts[first.id]
        assert draft.text.startswith("Equity markets advanced")
        assert draft.version == 1
        assert draft.provenance
        for pid in draft.provenance:
            in_knowledge = rig.knowledge.chunk_by_id(pid) is not None
            in_experience = rig.experience.by_id(pid) is not None
            assert in_knowledge != in_experience  # exactly one store

    def test_generate_requires_retrieved_status(self, rig):
        sid = outlined(rig)
        section = rig.pipeline.session(sid).outline.sections[0]
        with pytest.raises(IllegalTransition):
            rig.pipeline.generate_section(sid, section.id)

    def test_fused_prompt_sent_to_gateway_contains_blocks(self, rig):
        sid = drafting(rig)
        call = next(
            c
            for c in rig.backend.calls
            if c.request_tag == "section:Market Overview"
        )
        system, user = call.messages[0].content, call.messages[1].content
        assert "senior market analyst" in system
        assert "[chunk " in user
        assert "[web https://example.org/markets]" in user


class TestUserActions:
    def test_direct_edit_round_trips_script(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        old_text = session.drafts[first.id].text
        revised = old_text.replace("advanced", "rallied")
        session = rig.pipeline.submit_user_action(
            sid, first.id, DirectEdit(revised_text=revised)
        )
        assert session.drafts[first.id].text == revised
        assert session.drafts[first.id].version == 2
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.DIRECT_EDIT
        from knowpilot.experience import EditOp

        script = [EditOp.from_dict(op) for op in record.payload["edit_script"]]
        assert apply_edit_script(old_text, script) == normalize_ws(revised)

    def test_accept_adds_no_record(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        before = rig.experience.count()
        session = rig.pipeline.submit_user_action(sid, first.id, Accept())
        assert rig.experience.count() == before
        assert session.outline.sections[0].status == SectionStatus.ACCEPTED
        assert session.event_log[-1].kind == EventKind.SECTION_ACCEPTED

    def test_refinement_phrase_missing_leaves_draft_unchanged(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        before = session.to_dict()
        with pytest.raises(PhraseNotFound):
            rig.pipeline.submit_user_action(
                sid,
                first.id,
                Refinement(original_phrase="absent phrase", revised_phrase="x"),
            )
        assert rig.pipeline.session(sid).to_dict() == before

    def test_refinement_substitutes_and_records(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        session = rig.pipeline.submit_user_action(
            sid,
            first.id,
            Refinement(original_phrase="advanced", revised_phrase="climbed"),
        )
        assert "climbed" in session.drafts[first.id].text
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.REFINEMENT

    def test_corrective_prompt_regenerates_with_instruction(self, tmp_path):
        script = dict(STANDARD_SCRIPT)
        script["corrective:Market Overview"] = "A tighter market overview."
        rig = build_rig(tmp_path / "r", script=script)
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        old_text = session.drafts[first.id].text
        session = rig.pipeline.submit_user_action(
            sid, first.id, CorrectiveInstruction(instruction="make it tighter")
        )
        assert session.drafts[first.id].text == "A tighter market overview."
        assert session.drafts[first.id].version == 2
        record = rig.experience.records()[-1]
        assert record.kind == ExperienceKind.CORRECTIVE_PROMPT
        assert record.payload["before"] == old_text
        assert record.payload["after"] == "A tighter market overview."
        call = next(
            c
            for c in rig.backend.calls
            if c.request_tag == "corrective:Market Overview"
        )
        assert "make it tighter" in call.messages[1].content

    def test_wait_time_accrues_on_actions(self, rig):
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        rig.clock.advance(10)
        session = rig.pipeline.submit_user_action(
            sid, first.id, Refinement("advanced", "rose")
        )
        assert session.clock_seconds == pytest.approx(10.0)
        rig.clock.advance(20)
        session = rig.pipeline.submit_user_action(sid, first.id, Accept())
        assert session.clock_seconds == pytest.approx(30.0)


OP_BY_KIND = {
    EventKind.PRIORS_SUBMITTED: lambda rig, sid, s: rig.pipeline.parse_priors(
        sid, "another brief"
    ),
    EventKind.CONFIG_EDITED: lambda rig, sid, s: rig.pipeline.edit_config(
        sid, fields={"style": "terse"}
    ),
    EventKind.OUTLINE_GENERATED: lambda rig, sid, s: rig.pipeline.generate_outline(
        sid
    ),
    EventKind.OUTLINE_EDITED: lambda rig, sid, s: rig.pipeline.edit_outline(
        sid,
        {
            "op": "retitle",
            "section_id": s.outline.sections[-1].id if s.outline else "missing",
            "heading": "Renamed",
        },
    ),
    EventKind.SECTION_RETRIEVED: lambda rig, sid, s: rig.pipeline.retrieve_for_section(
        sid, s.outline.sections[-1].id if s.outline else "missing"
    ),
    EventKind.SECTION_DRAFTED: lambda rig, sid, s: rig.pipeline.generate_section(
        sid, s.outline.sections[1].id if s.outline else "missing"
    ),
    EventKind.SECTION_EDITED: lambda rig, sid, s: rig.pipeline.submit_user_action(
        sid,
        s.outline.sections[0].id if s.outline else "missing",
        DirectEdit("fully new text"),
    ),
    EventKind.CORRECTIVE_PROMPT: lambda rig, sid, s: rig.pipeline.submit_user_action(
        sid,
        s.outline.sections[0].id if s.outline else "missing",
        CorrectiveInstruction("shorter"),
    ),
    EventKind.REFINEMENT: lambda rig, sid, s: rig.pipeline.submit_user_action(
        sid,
        s.outline.sections[0].id if s.outline else "missing",
        Refinement("markets", "exchanges"),
    ),
    EventKind.SECTION_ACCEPTED: lambda rig, sid, s: rig.pipeline.submit_user_action(
        sid, s.outline.sections[0].id if s.outline else "missing", Accept()
    ),
}

STATE_BUILDERS = {
    SessionState.NEW: lambda rig: rig.pipeline.create_session().session_id,
    SessionState.CONFIGURED: configured,
    SessionState.OUTLINED: outlined,
    SessionState.DRAFTING: drafting,
    SessionState.COMPLETE: lambda rig: rig.pipeline.run_brief(
        "complete run brief"
    ).session_id,
}


class TestStateMachineSoundness:
    @pytest.mark.parametrize("state", list(SessionState))
    @pytest.mark.parametrize("kind", list(EventKind))
    def test_exhaustive_state_kind_pairs(self, tmp_path, state, kind):
        rig = build_rig(tmp_path / "r")
        sid = STATE_BUILDERS[state](rig)
        session = rig.pipeline.session(sid)
        assert session.state == state
        events_path = rig.root / "sessions" / sid / "events.jsonl"
        before_dict = session.to_dict()
        before_bytes = events_path.read_bytes()
        legal = kind in EVENT_GRAMMAR[state]
        if legal:
            OP_BY_KIND[kind](rig, sid, session)  # must not raise
            after = rig.pipeline.session(sid)
            assert after.event_log[-1].kind == kind
        else:
            with pytest.raises(IllegalTransition):
                OP_BY_KIND[kind](rig, sid, session)
            after = rig.pipeline.session(sid)
            assert after.to_dict() == before_dict
            assert events_path.read_bytes() == before_bytes

    @pytest.mark.parametrize("state", list(SessionState))
    @pytest.mark.parametrize("kind", list(EventKind))
    def test_apply_event_enforces_grammar(self, state, kind):
        session = Session(session_id="s", state=state)
        event = SessionEvent("e", 0, kind, {})
        if kind not in EVENT_GRAMMAR[state]:
            with pytest.raises(IllegalTransition):
                apply_event(session, event)

    def test_section_path_reset_then_accept(self, rig):
        # pending -> retrieved -> drafted -> retrieved (retitle) -> drafted
        # -> accepted is a legal per-section path.
        sid = drafting(rig)
        session = rig.pipeline.session(sid)
        first = session.outline.sections[0]
        rig.pipeline.edit_outline(
            sid, {"op": "retitle", "section_id": first.id, "heading": "Markets"}
        )
        assert (
            rig.pipeline.session(sid).outline.sections[0].status
            == SectionStatus.RETRIEVED
        )
        rig.pipeline.generate_section(sid, first.id)
        assert rig.pipeline.session(sid).drafts[first.id].version == 2
        rig.pipeline.submit_user_action(sid, first.id, Accept())
        assert (
            rig.pipeline.session(sid).outline.sections[0].status
            == SectionStatus.ACCEPTED
        )


class TestReplayAndPersistence:
    def test_replay_reconstructs_identical_state(self, rig):
        sid = drafting(rig)
        rig.clock.advance(5)
        session = rig.pipeline.session(sid)
        rig.pipeline.submit_user_action(
            sid, session.outline.sections[0].id, Refinement("markets", "indices")
        )
        live = rig.pipeline.session(sid)
        events = rig.pipeline.store.load_events(sid)
        rebuilt = replay(sid, events)
        assert rebuilt.to_dict() == live.to_dict()

    def test_fresh_pipeline_loads_persisted_session(self, tmp_path):
        rig = build_rig(tmp_path / "r")
        sid = drafting(rig)
        live = rig.pipeline.session(sid).to_dict()
        from knowpilot.pipeline import Pipeline

        fresh = Pipeline(
            gateway=rig.gateway,
            knowledge=rig.knowledge,
            experience=rig.experience,
            search=rig.search,
            session_root=rig.root,
            clock=rig.clock,
        )
        assert fresh.session(sid).to_dict() == live

    def test_projection_files_written(self, rig):
        sid = drafting(rig)
        session_dir = rig.root / "sessions" / sid
        assert (session_dir / "config.json").exists()
        assert (session_dir / "outline.json").exists()
        first = rig.pipeline.session(sid).outline.sections[0]
        assert (session_dir / "drafts" / f"{first.id}.md").exists()

    def test_torn_trailing_event_line_tolerated(self, tmp_path):
        rig = build_rig(tmp_path / "r")
        sid = drafting(rig)
        before = rig.pipeline.session(sid)
        events_path = rig.root / "sessions" / sid / "events.jsonl"
        with open(events_path, "a", encoding="utf-8") as fh:
            fh.write('{"event_id": "torn", "at": 99, "ki')  # interrupted write
        from knowpilot.pipeline import Pipeline

        fresh = Pipeline(
            gateway=rig.gateway,
            knowledge=rig.knowledge,
            experience=rig.experience,
            search=rig.search,
            session_root=rig.root,
            clock=rig.clock,
        )
        # The torn line is ignored; every committed event survives.
        assert fresh.session(sid).to_dict() == before.to_dict()


def run_intervention_scenario(rig) -> str:
    sid = outlined(rig)
    rig.pipeline.edit_config(sid, fields={"style": "direct"})
    session = rig.pipeline.session(sid)
    ids = [s.id for s in session.outline.sections]
    rig.pipeline.edit_outline(
        sid, {"op": "retitle", "section_id": ids[2], "heading": "Long View"}
    )
    for n, section_id in enumerate(ids):
        rig.pipeline.retrieve_for_section(sid, section_id)
        rig.pipeline.generate_section(sid, section_id)
        rig.clock.advance(7)
        draft = rig.pipeline.session(sid).drafts[section_id]
        if n == 0:
            rig.pipeline.submit_user_action(
                sid, section_id, DirectEdit(draft.text + " Edited closing line.")
            )
        elif n == 1:
            rig.pipeline.submit_user_action(
                sid, section_id, CorrectiveInstruction("tone it down")
            )
        else:
            first_word = draft.text.split()[0]
            rig.pipeline.submit_user_action(
                sid, section_id, Refinement(first_word, first_word.upper())
            )
        rig.clock.advance(3)
        rig.pipeline.submit_user_action(sid, section_id, Accept())
    return sid


class TestDeterminism:
    def test_two_runs_produce_byte_identical_artifacts(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            rig = build_rig(tmp_path / name, seed=123)
            sid = run_intervention_scenario(rig)
            export = rig.pipeline.export_markdown(sid)
            events = (rig.root / "sessions" / sid / "events.jsonl").read_bytes()
            drafts = {
                p.name: p.read_bytes()
                for p in sorted((rig.root / "sessions" / sid / "drafts").iterdir())
            }
            experience = (rig.root / "experience" / "experience.jsonl").read_bytes()
            outputs.append((sid, export, events, drafts, experience))
        assert outputs[0] == outputs[1]


class TestCaptureCompleteness:
    def test_interventions_equal_records(self, tmp_path):
        rig = build_rig(tmp_path / "r")
        sid = run_intervention_scenario(rig)
        session = rig.pipeline.session(sid)
        session_records = [
            r for r in rig.experience.records() if r.session_id == sid
        ]
        assert len(session_records) == intervention_count(session)
        assert intervention_count(session) == 5  # config, outline, 3 actions

    def test_auto_accept_run_captures_nothing(self, tmp_path):
        rig = build_rig(tmp_path / "r")
        session = rig.pipeline.run_brief("auto run brief", auto_accept=True)
        assert session.state == SessionState.COMPLETE
        assert intervention_count(session) == 0
        assert [
            r for r in rig.experience.records()
            if r.session_id == session.session_id
        ] == []


class TestConcurrency:
    def test_distinct_sessions_run_concurrently(self, rig):
        from concurrent.futures import ThreadPoolExecutor

        def run_one(n: int) -> str:
            session = rig.pipeline.run_brief(f"brief {n}", auto_accept=True)
            assert session.state == SessionState.COMPLETE
            return session.session_id

        with ThreadPoolExecutor(max_workers=4) as pool:
            session_ids = list(pool.map(run_one, range(4)))
        assert len(set(session_ids)) == 4
        for sid in session_ids:
            events = rig.pipeline.store.load_events(sid)
            assert replay(sid, events).state == SessionState.COMPLETE

    def test_busy_session_rejected_without_blocking(self, rig):
        from knowpilot.pipeline import SessionBusy

        session = rig.pipeline.create_session()
        lock = rig.pipeline._lock(session.session_id)
        lock.acquire()
        try:
            with pytest.raises(SessionBusy):
                rig.pipeline.parse_priors(
                    session.session_id, "brief", blocking=False
                )
        finally:
            lock.release()


class TestExport:
    def test_incomplete_session_cannot_export(self, rig):
        sid = drafting(rig)
        from knowpilot.pipeline import SessionIncomplete

        with pytest.raises(SessionIncomplete):
            rig.pipeline.export_markdown(sid)

    def test_export_contains_headings_drafts_and_provenance(self, tmp_path):
        rig = build_rig(tmp_path / "r")
        session = rig.pipeline.run_brief("brief", auto_accept=True)
        markdown = rig.pipeline.export_markdown(session.session_id)
        assert markdown.startswith("# Quarterly Market Review")
        assert "## Market Overview" in markdown
        assert "Equity markets advanced" in markdown
        assert "## Provenance" in markdown
        assert "- chunk " in markdown
        assert "- web https://example.org/markets" in markdown
