import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radassist.errors import ContractError
from radassist.prompts import (
    PromptBuilder,
    TemplateError,
    TemplateRegistry,
    Turn,
    approx_token_count,
    join_names,
)
from radassist.vocab import Vocabulary

REPORT_INSTRUCTION = (
    "You are to act as a radiologist and write the finding section of a chest x-ray "
    "radiology report for this X-ray image and the given predicted findings. Write in "
    "the style of a radiologist, write one fluent text without enumeration, be concise "
    "and don't provide explanations or reasons."
)


class TestReportPrompt:
    def test_bit_exact_with_tokens_and_findings(self, prompt_builder):
        p = prompt_builder.build_report_prompt(True, ["Edema", "Cardiomegaly"])
        assert p.rendered == (
            "Image information: <IMG>. Predicted Findings: Cardiomegaly, Edema. "
            + REPORT_INSTRUCTION
        )

    def test_findings_absent_drops_header(self, prompt_builder):
        p = prompt_builder.build_report_prompt(True, None)
        assert p.rendered == "Image information: <IMG>. " + REPORT_INSTRUCTION
        assert "Predicted Findings" not in p.rendered

    def test_tokens_absent_drops_image_header(self, prompt_builder):
        p = prompt_builder.build_report_prompt(None, ["Edema"])
        assert p.rendered == "Predicted Findings: Edema. " + REPORT_INSTRUCTION
        assert not p.has_image

    def test_indication_inserted_before_instruction(self, prompt_builder):
        p = prompt_builder.build_report_prompt(True, ["Edema"], "evaluate for pneumonia")
        assert "Indication: evaluate for pneumonia. " + REPORT_INSTRUCTION in p.rendered
        assert p.rendered.index("Indication:") > p.rendered.index("Predicted Findings:")

    def test_both_absent_is_contract_error(self, prompt_builder):
        with pytest.raises(ContractError):
            prompt_builder.build_report_prompt(None, None)
        with pytest.raises(ContractError):
            prompt_builder.build_report_prompt(None, [])

    def test_findings_sorted_to_vocabulary_order(self, prompt_builder):
        a = prompt_builder.build_report_prompt(None, ["Pneumonia", "Edema"])
        b = prompt_builder.build_report_prompt(None, ["Edema", "Pneumonia"])
        assert a.rendered == b.rendered
        assert "Edema, Pneumonia" in a.rendered

    def test_unknown_finding_rejected(self, prompt_builder):
        with pytest.raises(ContractError):
            prompt_builder.build_report_prompt(None, ["Gout"])

    @given(
        st.sets(st.sampled_from(Vocabulary().names), min_size=1, max_size=5),
        st.sets(st.sampled_from(Vocabulary().names), min_size=1, max_size=5),
    )
    @settings(max_examples=50, deadline=None)
    def test_rendering_injective_over_findings(self, a, b):
        builder = PromptBuilder()
        ra = builder.build_report_prompt(None, sorted(a)).rendered
        rb = builder.build_report_prompt(None, sorted(b)).rendered
        assert (ra == rb) == (a == b)


class TestRegistry:
    def test_ten_templates_per_non_report_task(self):
        registry = TemplateRegistry.load()
        for task in ("complete_qa", "binary_qa", "region_qa", "easy_language",
                     "summarization", "correction", "nle"):
            assert len(registry.templates(task)) == 10
        assert len(registry.templates("report")) == 1

    def test_validation_fails_fast(self, tmp_path):
        registry = TemplateRegistry.load()
        raw = {
            task: [{"text": t.text, "source": t.source, "flavor": t.flavor} for t in templates]
            for task, templates in registry.tasks.items()
        }
        raw["binary_qa"] = raw["binary_qa"][:9]
        bad = tmp_path / "registry.json"
        bad.write_text(json.dumps(raw))
        with pytest.raises(TemplateError, match="binary_qa"):
            TemplateRegistry.load(bad)

    def test_synthesized_templates_are_marked(self):
        registry = TemplateRegistry.load()
        for task, templates in registry.tasks.items():
            if task == "report":
                continue
            sources = {t.source for t in templates}
            assert "synthesized" in sources and "core" in sources


class TestInstructionSampling:
    def test_seeded_sampling_deterministic(self, prompt_builder):
        a = prompt_builder.sample_instruction("binary_qa", {"PATHOLOGY": "Edema"}, random.Random(5))
        b = prompt_builder.sample_instruction("binary_qa", {"PATHOLOGY": "Edema"}, random.Random(5))
        assert a == b
        assert "Edema" in a

    def test_uniform_over_templates(self, prompt_builder):
        rng = random.Random(0)
        seen = {
            prompt_builder.sample_instruction("summarization", {}, rng) for _ in range(300)
        }
        assert len(seen) == 10

    def test_missing_placeholder_raises(self, prompt_builder):
        with pytest.raises(TemplateError):
            prompt_builder.sample_instruction("binary_qa", {}, random.Random(0))

    def test_correction_both_slots(self, prompt_builder):
        instr = prompt_builder.sample_correction_instruction(
            ["Edema"], ["Pneumonia"], random.Random(1)
        )
        assert "Edema" in instr and "Pneumonia" in instr

    def test_correction_add_only_and_remove_only(self, prompt_builder):
        add = prompt_builder.sample_correction_instruction(["Edema"], [], random.Random(2))
        assert "Edema" in add
        rem = prompt_builder.sample_correction_instruction([], ["Edema"], random.Random(2))
        assert "Edema" in rem
        with pytest.raises(ContractError):
            prompt_builder.sample_correction_instruction([], [], random.Random(2))

    def test_join_names(self):
        assert join_names([]) == ""
        assert join_names(["A"]) == "A"
        assert join_names(["A", "B"]) == "A and B"
        assert join_names(["A", "B", "C"]) == "A, B and C"


class TestDialog:
    def test_base_case_equals_report_prompt_plus_markers(self, prompt_builder):
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        d = prompt_builder.render_dialog([], bundle)
        assert d.rendered == f"USER: {bundle.rendered}\nASSISTANT:"

    def test_single_image_placeholder_in_long_dialog(self, prompt_builder):
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        history = [
            Turn("user", bundle),
            Turn("assistant", "There is edema."),
        ]
        d = prompt_builder.render_dialog(history, "Is there any Edema?")
        assert d.rendered.count("<IMG>") == 1
        assert d.rendered.endswith("\nASSISTANT:")

    def test_consecutive_same_role_rejected(self, prompt_builder):
        history = [Turn("user", "a"), Turn("user", "b")]
        with pytest.raises(ContractError):
            prompt_builder.render_dialog(history, "c")

    def test_image_only_in_first_turn(self, prompt_builder):
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        history = [Turn("user", "hello"), Turn("assistant", "hi"), Turn("user", bundle)]
        with pytest.raises(ContractError):
            prompt_builder.render_dialog(history, "x")

    def test_truncation_drops_oldest_pairs_and_flags(self, prompt_builder):
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        history = [Turn("user", bundle)]
        for i in range(25):
            history.append(Turn("assistant", f"answer number {i} with some extra words"))
            history.append(Turn("user", f"question number {i} with some extra words"))
        history.append(Turn("assistant", "final answer"))
        budget = 220
        d = prompt_builder.render_dialog(history, "last question", token_budget=budget)
        assert d.truncated
        assert approx_token_count(d.rendered) <= budget
        # first (image) turn always kept, most recent turns survive
        assert d.rendered.startswith("USER: Image information: <IMG>.")
        assert "question number 24" in d.rendered
        assert "question number 0" not in d.rendered

    def test_no_truncation_under_budget(self, prompt_builder):
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        d = prompt_builder.render_dialog([Turn("user", bundle), Turn("assistant", "ok")],
                                         "next", token_budget=10_000)
        assert not d.truncated

    def test_new_instruction_survives_tight_budget(self, prompt_builder):
        # a three-turn dialog over budget drops the middle turn, never the
        # first (image) turn or the new instruction
        bundle = prompt_builder.build_report_prompt(True, ["Edema"])
        history = [Turn("user", bundle), Turn("assistant", "word " * 80)]
        d = prompt_builder.render_dialog(history, "Is there any Edema?", token_budget=160)
        assert d.truncated
        assert "Is there any Edema?" in d.rendered
        assert d.rendered.startswith("USER: Image information: <IMG>.")
        assert "word word" not in d.rendered
