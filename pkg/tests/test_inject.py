from collections import Counter
from fractions import Fraction

import pytest

from askbd.inject import (
    InjectionConfig,
    NoDeletableStep,
    NoExpressionStep,
    inject,
    inject_batch,
    inject_calculation,
    inject_hallucination,
    inject_missing,
    inject_reference,
)
from askbd.label_oracle import scan_record, verify_corpus
from askbd.records import (
    CATEGORIES,
    CORRECT_LABEL,
    ErrorLabel,
    SolutionStep,
    condition_values,
    make_record,
)
from askbd.exprs import eval_expr, parse_expr

# One seed reproduces all four appendix-style rows on the leaf problem;
# frozen after a search over the deterministic per-category generators.
GOLDEN_SEED = 10999


class TestGoldenRows:
    def test_calculation_row(self, leaf_record):
        injected, label = inject_calculation(leaf_record, GOLDEN_SEED)
        assert label == ErrorLabel(1, "calc")
        assert "5 × 11 = 50" in injected.steps[0].statement
        # later steps keep the original correct value
        assert "55 - 22 = 33" in injected.steps[2].statement
        assert injected.steps[1] == leaf_record.steps[1]

    def test_reference_row(self, leaf_record):
        injected, label = inject_reference(leaf_record, GOLDEN_SEED)
        assert label == ErrorLabel(1, "ref")
        assert "so 10 gusts will blow it forward 5 × 10 = 50" in injected.steps[0].statement
        assert injected.steps[0].stated_result == 50
        assert injected.steps[1] == leaf_record.steps[1]
        assert injected.steps[2] == leaf_record.steps[2]

    def test_missing_row(self, leaf_record):
        injected, label = inject_missing(leaf_record, GOLDEN_SEED)
        assert label == ErrorLabel(2, "missing")
        assert len(injected.steps) == 2
        assert injected.steps[0].statement.startswith("Each swirl")
        assert "55 - 22 = 33" in injected.steps[1].statement

    def test_hallucination_row(self, leaf_record):
        injected, label = inject_hallucination(leaf_record, GOLDEN_SEED)
        assert label == ErrorLabel(4, "halluc")
        assert "33 + 10 = 43" in injected.steps[3].statement
        assert injected.steps[:3] == leaf_record.steps


class TestInjectionProperties:
    def test_calc_wrong_value_never_equals_truth(self, leaf_record):
        for seed in range(200):
            injected, label = inject_calculation(leaf_record, seed)
            broken = injected.steps[label.step - 1]
            original = leaf_record.steps[label.step - 1]
            assert broken.stated_result != original.stated_result
            assert broken.expression == original.expression

    def test_calc_step_distribution_roughly_uniform(self, leaf_record):
        counts = Counter()
        n = 1000
        for seed in range(n):
            _, label = inject_calculation(leaf_record, seed)
            counts[label.step] += 1
        expected = n / 3
        chi2 = sum((counts[s] - expected) ** 2 / expected for s in (1, 2, 3))
        # chi-square with 2 dof: 13.8 is the 0.1% point
        assert chi2 < 13.8, counts

    def test_ref_result_recomputed_consistently(self, leaf_record):
        for seed in range(200):
            injected, label = inject_reference(leaf_record, seed)
            step = injected.steps[label.step - 1]
            assert eval_expr(parse_expr(step.expression)) == step.stated_result

    def test_ref_altered_operand_never_equals_original(self, leaf_record):
        for seed in range(1000):
            injected, label = inject_reference(leaf_record, seed)
            step = injected.steps[label.step - 1]
            original = leaf_record.steps[label.step - 1]
            assert step.expression != original.expression

    def test_missing_leaves_dangling_operand(self, leaf_record):
        for seed in range(100):
            injected, label = inject_missing(leaf_record, seed)
            conditions = set(condition_values(injected.question))
            priors = set()
            dangling = []
            for step in injected.steps:
                if step.expression is None:
                    continue
                for text in step.expression.split():
                    try:
                        value = Fraction(text)
                    except ValueError:
                        continue
                    if value not in conditions and value not in priors:
                        dangling.append((step.index, value))
                priors.add(step.stated_result)
            assert dangling and dangling[0][0] == label.step

    def test_halluc_operand_is_fresh_and_consistent(self, leaf_record):
        for seed in range(200):
            injected, label = inject_hallucination(leaf_record, seed)
            appended = injected.steps[-1]
            assert eval_expr(parse_expr(appended.expression)) == appended.stated_result
            operand = appended.expression.split(" + ")[1]
            value = Fraction(operand)
            assert value not in set(condition_values(injected.question))
            assert value not in {s.stated_result for s in leaf_record.steps}

    def test_single_step_record_has_no_deletable_step(self):
        record = make_record(
            question="Add 3 and 4.",
            steps=(SolutionStep(1, "Add: 3 + 4 = 7.", "3 + 4", Fraction(7)),),
            answer=7,
        )
        with pytest.raises(NoDeletableStep):
            inject_missing(record, 0)

    def test_no_expression_step(self):
        record = make_record(
            question="q 1", steps=(SolutionStep(1, "prose only"),), answer=1
        )
        with pytest.raises(NoExpressionStep):
            inject_calculation(record, 0)

    def test_determinism(self, leaf_record):
        for category in CATEGORIES:
            cfg = InjectionConfig(category=category, seed=42)
            first, _ = inject(leaf_record, cfg)
            second, _ = inject(leaf_record, cfg)
            assert first == second

    def test_offsets_must_exclude_zero(self):
        with pytest.raises(ValueError):
            InjectionConfig(category="calc", offsets=(0, 1))

    def test_batch_emits_one_per_category(self, leaf_record):
        out = list(inject_batch([leaf_record], seed=1))
        assert [label.category for _, label in out] == list(CATEGORIES)
        for injected, label in out:
            assert injected.label == label


class TestLabelOracle:
    def test_correct_record_has_zero_findings(self, leaf_record):
        assert scan_record(leaf_record) == CORRECT_LABEL

    def test_locates_all_four_categories(self, leaf_record):
        for seed in range(100):
            for injected, label in inject_batch([leaf_record], seed=seed):
                assert scan_record(injected) == label, (seed, label)

    def test_verify_corpus_reports_mismatches(self, leaf_record):
        injected, _ = inject_calculation(leaf_record, 3)
        ok = verify_corpus([leaf_record, injected])
        assert ok == []
        mislabeled = make_record(
            question=injected.question,
            steps=injected.steps,
            answer=injected.answer,
            origin=injected.origin,
            label=ErrorLabel(2, "ref"),
        )
        bad = verify_corpus([mislabeled])
        assert len(bad) == 1
