import random
import string

import pytest

from askbd.backends import (
    CAP_GENERATE,
    BackendProfile,
    GenerationParams,
    ScriptedBackend,
    generate_fingerprint,
)
from askbd.detect import (
    DetectionOutcome,
    StepQuestionList,
    UnparseableBackendOutput,
    cqe,
    detect,
    load_template,
    parse_detector_response,
    reg,
    sqr,
    ssi,
)
from askbd.records import CORRECT_LABEL, ErrorLabel, render_solution_text

MODEL = "demo-model"
PROFILE = BackendProfile(
    name="demo",
    endpoint="scripted:unused",
    model=MODEL,
    capabilities=frozenset({CAP_GENERATE}),
)


def script_for(pairs):
    """Build a scripted backend from {prompt: response} pairs."""
    entries = {}
    for prompt, response in pairs.items():
        key = generate_fingerprint(
            MODEL, [{"role": "user", "content": prompt}], GenerationParams()
        )
        entries[key] = {"response": response}
    return ScriptedBackend(entries, MODEL)


# The published detector instructions, frozen for the golden comparison.
NAIVE_FIGURE = (
    "Given the <question>, please judge whether each step in <solution> is correct. "
    "During the judging process,you should know that the <question> does not always "
    "have only one standard solution, and any reasonable <solution> should be "
    "accepted. You should pay attention to both the expressions and the statements "
    "in each step, and take care about the logic consistency between different "
    "steps. Additionally, consider arithmetic expression equivalency and avoid "
    "rejecting solutions solely because they use equivalent expressions.\n"
    "\n"
    "In each step, if no errors are found, respond with Step X: <correct>. If you "
    "find that the operands in the listed expressions are correct but an error "
    "occurs in the calculated result, respond with Step X: <calculation error>. If "
    "you find statements or operands in the listed expression are incorrectly "
    "referencing the question conditions or the results from prior steps, respond "
    "with Step X: <reference error>. If you find operands or expressions in the "
    "step that is lack of references or support from the question conditions or "
    "prior steps, respond with Step X: <missing step>. If you find statements or "
    "operands in the listed expression are fabricated or inconsistent with the "
    "question's conditions, respond with: Step X: <hallucination>. If an error is "
    "a follow-on issue due to mistakes in previous steps rather than an independent "
    "error, respond with: Step X: <secondary error>.\n"
    "\n"
    "<question> [Question Text] <solution> [Solution Text]\n"
    "\n"
    "Now, please start to respond."
)

COT_EXTRA = (
    "Before the <response>, you should provide your step-by-step <thinking> about "
    "your judging process."
)


class TestTemplates:
    def test_naive_matches_figure(self):
        rendered = load_template("naive").render(
            question="[Question Text]", solution="[Solution Text]"
        )
        assert rendered == NAIVE_FIGURE

    def test_cot_adds_thinking_instruction(self):
        rendered = load_template("cot").render(
            question="[Question Text]", solution="[Solution Text]"
        )
        assert COT_EXTRA in rendered
        assert rendered.endswith("Now, please start to think first and then respond.")
        # shares the whole tag-definition paragraph with the naive prompt
        assert NAIVE_FIGURE.split("\n\n")[1] in rendered

    def test_reference_templates_add_reference_slot(self):
        for template_id in ("reference_naive", "reference_cot"):
            rendered = load_template(template_id).render(
                question="Q", solution="S", reference="R"
            )
            assert "<reference> R" in rendered

    def test_unbound_placeholder_fails(self):
        with pytest.raises(ValueError):
            load_template("naive").render(question="only")

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            load_template("explain")


class TestParseDetectorResponse:
    def test_first_primary_error_wins(self):
        text = "Step 1: <calculation error>\nStep 2: <correct>\nStep 3: <secondary error>"
        outcome = parse_detector_response(text, 3)
        assert outcome.valid
        assert outcome.predicted == ErrorLabel(1, "calc")
        assert outcome.step_tags == ("calc", "correct", "secondary")

    def test_all_correct(self):
        text = "Step 1: <correct>\nStep 2: <correct>"
        outcome = parse_detector_response(text, 2)
        assert outcome.valid
        assert outcome.predicted == CORRECT_LABEL

    def test_missing_line_invalid(self):
        outcome = parse_detector_response("Step 1: <correct>\nStep 3: <correct>", 3)
        assert not outcome.valid

    def test_duplicate_line_invalid(self):
        outcome = parse_detector_response("Step 1: <correct>\nStep 1: <correct>", 1)
        assert not outcome.valid

    def test_step_count_mismatch_invalid(self):
        outcome = parse_detector_response(
            "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>", 2
        )
        assert not outcome.valid

    def test_bare_tags_and_case_insensitivity(self):
        text = "STEP 1: Reference Error\nstep 2: <CORRECT>"
        outcome = parse_detector_response(text, 2)
        assert outcome.valid
        assert outcome.predicted == ErrorLabel(1, "ref")

    def test_thinking_text_captured(self):
        text = "I will check each step.\nThe math looks fine.\nStep 1: <correct>"
        outcome = parse_detector_response(text, 1)
        assert outcome.thinking == "I will check each step.\nThe math looks fine."

    def test_trailing_commentary_allowed_with_brackets(self):
        text = "Step 1: <missing step> because 55 appears from nowhere"
        outcome = parse_detector_response(text, 1)
        assert outcome.predicted == ErrorLabel(1, "missing")

    def test_totality_on_random_bytes(self):
        rng = random.Random(123)
        alphabet = string.printable + "\x00\xff"
        for _ in range(2000):
            blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 200)))
            text = blob.decode("utf-8", errors="replace")
            outcome = parse_detector_response(text, rng.randrange(1, 5))
            assert isinstance(outcome, DetectionOutcome)
            assert outcome.valid in (True, False)

    def test_first_primary_rule_metamorphic(self):
        base = ["<correct>", "<calculation error>", "<correct>", "<correct>"]
        text = "\n".join(f"Step {i}: {t}" for i, t in enumerate(base, 1))
        predicted = parse_detector_response(text, 4).predicted
        # flipping tags after the first primary error never changes the label
        for replacement in ("<reference error>", "<hallucination>", "<missing step>"):
            for position in (2, 3):
                edited = list(base)
                edited[position] = replacement
                text2 = "\n".join(f"Step {i}: {t}" for i, t in enumerate(edited, 1))
                assert parse_detector_response(text2, 4).predicted == predicted

    def test_secondary_transparency_metamorphic(self):
        base = ["<correct>", "<reference error>", "<calculation error>"]
        text = "\n".join(f"Step {i}: {t}" for i, t in enumerate(base, 1))
        predicted = parse_detector_response(text, 3).predicted
        edited = list(base)
        edited[2] = "<secondary error>"
        text2 = "\n".join(f"Step {i}: {t}" for i, t in enumerate(edited, 1))
        assert parse_detector_response(text2, 3).predicted == predicted


LEAF_CQE_RESPONSE = (
    "<conditions> Each gust blows the leaf 5 feet forward; each swirl blows it "
    "back 2 feet; there are 11 gusts.\n"
    "<inquiry> How far down the sidewalk has the leaf traveled after 11 gusts?"
)


def leaf_scripts(leaf_record):
    """Scripted exchanges for a full four-stage run on the leaf problem."""
    cqe_prompt = load_template("cqe").render(question=leaf_record.question)
    ssi_prompt = load_template("ssi").render(solution=render_solution_text(leaf_record))
    ssi_response = (
        "Question 1: How far forward do 11 gusts blow the leaf?\n"
        "Question 2: How far back do 11 swirls blow the leaf?\n"
        "Question 3: How far has the leaf traveled after 11 gusts?"
    )
    inquiry = "How far down the sidewalk has the leaf traveled after 11 gusts?"
    questions = [
        "How far forward do 11 gusts blow the leaf?",
        "How far back do 11 swirls blow the leaf?",
        "How far has the leaf traveled after 11 gusts?",
        inquiry,
    ]
    conditions = (
        "Each gust blows the leaf 5 feet forward; each swirl blows it back 2 "
        "feet; there are 11 gusts."
    )
    numbered = "\n".join(f"Question {i}: {q}" for i, q in enumerate(questions, 1))
    sqr_prompt = load_template("sqr").render(conditions=conditions, questions=numbered)
    sqr_response = (
        "Step 1: The gusts blow the leaf forward 5 * 11 = 55 feet.\n"
        "Step 2: The swirls blow the leaf back 2 * 11 = 22 feet.\n"
        "Step 3: The leaf has traveled 55 - 22 = 33 feet.\n"
        "Step 4: The leaf has traveled 33 feet down the sidewalk."
    )
    reg_prompt = load_template("reference_naive").render(
        question=leaf_record.question,
        solution=render_solution_text(leaf_record),
        reference=sqr_response,
    )
    reg_response = "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"
    return {
        cqe_prompt: LEAF_CQE_RESPONSE,
        ssi_prompt: ssi_response,
        sqr_prompt: sqr_response,
        reg_prompt: reg_response,
    }


class TestStages:
    def test_cqe_parses_fixture(self, leaf_record):
        prompt = load_template("cqe").render(question=leaf_record.question)
        backend = script_for({prompt: LEAF_CQE_RESPONSE})
        parts, exchange = cqe(leaf_record.question, PROFILE, backend=backend)
        assert "5 feet forward" in parts.conditions
        assert parts.inquiry.startswith("How far")
        assert exchange.stage == "cqe"

    def test_cqe_missing_delimiter_fails_after_reask(self, leaf_record):
        prompt = load_template("cqe").render(question=leaf_record.question)
        backend = script_for({prompt: "no sections here"})
        with pytest.raises(UnparseableBackendOutput):
            cqe(leaf_record.question, PROFILE, backend=backend)

    def test_ssi_appends_inquiry(self, leaf_record):
        scripts = leaf_scripts(leaf_record)
        backend = script_for(scripts)
        inquiry = "How far down the sidewalk has the leaf traveled after 11 gusts?"
        questions, exchange = ssi(leaf_record, inquiry, PROFILE, backend=backend)
        assert len(questions.questions) == 4
        assert questions.questions[-1] == inquiry
        assert exchange.stage == "ssi"

    def test_ssi_wrong_count_rejected(self, leaf_record):
        prompt = load_template("ssi").render(solution=render_solution_text(leaf_record))
        backend = script_for({prompt: "Question 1: only one?"})
        with pytest.raises(UnparseableBackendOutput):
            ssi(leaf_record, "inquiry?", PROFILE, backend=backend)

    def test_sqr_empty_conditions_rejected(self):
        questions = StepQuestionList(questions=("q?",), inquiry="q?")
        with pytest.raises(ValueError):
            sqr("  ", questions, PROFILE, backend=None)

    def test_sqr_single_question(self):
        questions = StepQuestionList(questions=("What is 3 + 4?",), inquiry="What is 3 + 4?")
        prompt = load_template("sqr").render(
            conditions="There are 3 apples and 4 pears.",
            questions="Question 1: What is 3 + 4?",
        )
        backend = script_for({prompt: "Step 1: There are 3 + 4 = 7 fruits."})
        reference, exchange = sqr(
            "There are 3 apples and 4 pears.", questions, PROFILE, backend=backend
        )
        assert reference.startswith("Step 1:")
        assert exchange.stage == "sqr"

    def test_reg_correct_fixture(self, leaf_record):
        reference = "Step 1: The leaf travels 33 feet."
        prompt = load_template("reference_naive").render(
            question=leaf_record.question,
            solution=render_solution_text(leaf_record),
            reference=reference,
        )
        backend = script_for(
            {prompt: "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"}
        )
        outcome, exchanges = reg(leaf_record, reference, PROFILE, backend=backend)
        assert outcome.valid and outcome.predicted == CORRECT_LABEL
        assert [e.stage for e in exchanges] == ["reg"]

    def test_reg_garbage_yields_invalid_outcome(self, leaf_record):
        reference = "Step 1: whatever."
        prompt = load_template("reference_naive").render(
            question=leaf_record.question,
            solution=render_solution_text(leaf_record),
            reference=reference,
        )
        backend = script_for({prompt: "I refuse to answer in the required format."})
        outcome, exchanges = reg(leaf_record, reference, PROFILE, backend=backend)
        assert not outcome.valid
        assert len(exchanges) == 2  # one re-ask, then fail


class TestDetect:
    def test_m0_uses_naive_template(self, leaf_record):
        prompt = load_template("naive").render(
            question=leaf_record.question, solution=render_solution_text(leaf_record)
        )
        backend = script_for(
            {prompt: "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"}
        )
        run = detect(leaf_record, PROFILE, "M0", backend=backend)
        assert run.outcome.predicted == CORRECT_LABEL
        assert len(run.transcript) == 1
        assert run.transcript[0].prompt == prompt

    def test_m1_captures_thinking(self, leaf_record):
        prompt = load_template("cot").render(
            question=leaf_record.question, solution=render_solution_text(leaf_record)
        )
        backend = script_for(
            {
                prompt: "Checking each step carefully first.\n"
                "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"
            }
        )
        run = detect(leaf_record, PROFILE, "M1", backend=backend)
        assert run.outcome.thinking == "Checking each step carefully first."

    def test_m2_runs_four_stages_in_order(self, leaf_record):
        backend = script_for(leaf_scripts(leaf_record))
        run = detect(leaf_record, PROFILE, "M2", backend=backend)
        assert [e.stage for e in run.transcript] == ["cqe", "ssi", "sqr", "reg"]
        assert run.outcome.valid
        assert run.outcome.predicted == CORRECT_LABEL

    def test_m3_runs_four_stages_with_cot_grading(self, leaf_record):
        scripts = leaf_scripts(leaf_record)
        sqr_response = scripts[load_template("sqr").render(
            conditions=(
                "Each gust blows the leaf 5 feet forward; each swirl blows it "
                "back 2 feet; there are 11 gusts."
            ),
            questions="\n".join(
                f"Question {i}: {q}" for i, q in enumerate(
                    [
                        "How far forward do 11 gusts blow the leaf?",
                        "How far back do 11 swirls blow the leaf?",
                        "How far has the leaf traveled after 11 gusts?",
                        "How far down the sidewalk has the leaf traveled after 11 gusts?",
                    ],
                    1,
                )
            ),
        )]
        reg_cot_prompt = load_template("reference_cot").render(
            question=leaf_record.question,
            solution=render_solution_text(leaf_record),
            reference=sqr_response,
        )
        scripts[reg_cot_prompt] = (
            "Each step matches the reference.\n"
            "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"
        )
        run = detect(leaf_record, PROFILE, "M3", backend=script_for(scripts))
        assert [e.stage for e in run.transcript] == ["cqe", "ssi", "sqr", "reg"]
        assert run.outcome.valid
        assert run.outcome.thinking == "Each step matches the reference."

    def test_ref_strategies_require_reference(self, leaf_record):
        with pytest.raises(ValueError):
            detect(leaf_record, PROFILE, "ref_matching")

    def test_ref_matching_scripted(self, leaf_record):
        reference = render_solution_text(leaf_record)
        prompt = load_template("reference_naive").render(
            question=leaf_record.question,
            solution=render_solution_text(leaf_record),
            reference=reference,
        )
        backend = script_for(
            {prompt: "Step 1: <correct>\nStep 2: <correct>\nStep 3: <correct>"}
        )
        run = detect(leaf_record, PROFILE, "ref_matching", reference=reference, backend=backend)
        assert run.outcome.predicted == CORRECT_LABEL

    def test_unknown_strategy(self, leaf_record):
        with pytest.raises(ValueError):
            detect(leaf_record, PROFILE, "M9")

    def test_scripted_error_fixture_detects_injected_step(self, leaf_record):
        from askbd.inject import inject_calculation

        injected, label = inject_calculation(leaf_record, 10999)
        prompt = load_template("naive").render(
            question=injected.question, solution=render_solution_text(injected)
        )
        backend = script_for(
            {prompt: "Step 1: <calculation error>\nStep 2: <correct>\nStep 3: <secondary error>"}
        )
        run = detect(injected, PROFILE, "M0", backend=backend)
        assert run.outcome.predicted == label
