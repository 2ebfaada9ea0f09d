"""Seeded injection of one labeled error into a correct solution.

Four categories: a wrong calculated result (operands untouched), a wrong
operand reference (result recomputed correctly), a deleted supporting
step (consumer keeps the dangling operand), and a fabricated final step.
Later steps are never propagated into; the injected record differs from
its source only in the region implied by the category.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Iterator

from .exprs import eval_expr, format_value, parse_expr
from .records import (
    CATEGORIES,
    CATEGORY_CALCULATION,
    CATEGORY_HALLUCINATION,
    CATEGORY_MISSING,
    CATEGORY_REFERENCE,
    ErrorLabel,
    SolutionRecord,
    SolutionStep,
    compute_record_id,
    condition_values,
    _EXPRESSION_EQ,
    _NUM,
)

DEFAULT_OFFSETS = (-5, -4, -3, -2, -1, 1, 2, 3, 4, 5)


class InjectionError(ValueError):
    pass


class NoExpressionStep(InjectionError):
    pass


class NoReferencingOperand(InjectionError):
    pass


class NoDeletableStep(InjectionError):
    pass


@dataclass(frozen=True)
class InjectionConfig:
    """Category is the controlled hyper-parameter; the error location is
    drawn from the seeded generator. Offsets are a guess at plausible
    perturbation magnitudes (the 55 -> 50 style drift) and configurable."""

    category: str
    seed: int = 0
    offsets: tuple[int, ...] = DEFAULT_OFFSETS

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if 0 in self.offsets:
            raise ValueError("offset 0 would produce a non-error")


def _rng(seed: int, record: SolutionRecord, category: str) -> random.Random:
    return random.Random(f"{seed}|{category}|{record.record_id}")


def _relabel(
    record: SolutionRecord, steps: Iterable[SolutionStep], label: ErrorLabel, seed: int
) -> SolutionRecord:
    steps = tuple(steps)
    lineage = {"source_id": record.record_id, "seed": seed}
    return SolutionRecord(
        record_id=compute_record_id(record.question, record.origin, label, steps),
        question=record.question,
        steps=steps,
        answer=record.answer,
        origin=record.origin,
        label=label,
        lineage=lineage,
    )


_NUM_RE = re.compile(_NUM)


def _operand_tokens(expression: str) -> list[tuple[int, int, Fraction]]:
    return [
        (m.start(), m.end(), Fraction(m.group()))
        for m in _NUM_RE.finditer(expression)
    ]


def _equation_match(statement: str):
    match = None
    for match in _EXPRESSION_EQ.finditer(statement):
        pass
    return match


def _swap_equation(statement: str, new_lhs: str | None, new_rhs: str) -> str:
    """Rewrite the trailing `lhs = rhs` calculation inside a statement."""
    match = _equation_match(statement)
    if match is None:
        return statement
    lhs = new_lhs if new_lhs is not None else match.group(1)
    return (
        statement[: match.start(1)]
        + lhs
        + statement[match.end(1): match.start(2)]
        + new_rhs
        + statement[match.end(2):]
    )


def _swap_mentions_outside_equation(statement: str, old: Fraction, new: Fraction) -> str:
    """Replace standalone mentions of `old` outside the trailing equation."""
    match = _equation_match(statement)
    token = re.compile(rf"(?<![\d.]){re.escape(format_value(old))}(?![\d.])")
    if match is None:
        return token.sub(format_value(new), statement)
    head = token.sub(format_value(new), statement[: match.start()])
    tail = token.sub(format_value(new), statement[match.end():])
    return head + statement[match.start(): match.end()] + tail


def _prior_results(record: SolutionRecord, before_index: int) -> set[Fraction]:
    return {
        s.stated_result
        for s in record.steps
        if s.expression is not None and s.index < before_index
    }


def inject_calculation(
    record: SolutionRecord, seed: int = 0, offsets: tuple[int, ...] = DEFAULT_OFFSETS
) -> tuple[SolutionRecord, ErrorLabel]:
    """Replace one step's calculated result with a wrong value."""
    rng = _rng(seed, record, CATEGORY_CALCULATION)
    eligible = [s for s in record.steps if s.expression is not None]
    if not eligible:
        raise NoExpressionStep(f"record {record.record_id} has no expression step")
    step = eligible[rng.randrange(len(eligible))]
    true_value = step.stated_result
    valid = [o for o in offsets if true_value + o > 0]
    wrong = true_value + valid[rng.randrange(len(valid))]
    new_step = replace(
        step,
        statement=_swap_equation(step.statement, None, format_value(wrong)),
        stated_result=wrong,
    )
    steps = [new_step if s.index == step.index else s for s in record.steps]
    label = ErrorLabel(step.index, CATEGORY_CALCULATION)
    return _relabel(record, steps, label, seed), label


def inject_reference(
    record: SolutionRecord, seed: int = 0, offsets: tuple[int, ...] = DEFAULT_OFFSETS
) -> tuple[SolutionRecord, ErrorLabel]:
    """Point one operand at a wrong value and recompute the step correctly.

    The replacement value stays outside the condition/prior-result pool so
    the wrong reference cannot accidentally resolve.
    """
    rng = _rng(seed, record, CATEGORY_REFERENCE)
    conditions = set(condition_values(record.question))

    choices: list[tuple[SolutionStep, list[tuple[int, int, Fraction, list[int]]]]] = []
    for step in record.steps:
        if step.expression is None:
            continue
        resolvable = conditions | _prior_results(record, step.index)
        spots = []
        for start, end, value in _operand_tokens(step.expression):
            if value not in resolvable:
                continue
            usable = [
                o
                for o in offsets
                if value + o > 0
                and (value + o) not in resolvable
                and _recomputes_to_positive_integer(step.expression, start, end, value + o)
            ]
            if usable:
                spots.append((start, end, value, usable))
        if spots:
            choices.append((step, spots))
    if not choices:
        raise NoReferencingOperand(f"record {record.record_id} has no usable operand")

    step, spots = choices[rng.randrange(len(choices))]
    start, end, old_value, usable = spots[rng.randrange(len(spots))]
    new_value = old_value + usable[rng.randrange(len(usable))]

    new_expression = step.expression[:start] + format_value(new_value) + step.expression[end:]
    new_result = eval_expr(parse_expr(new_expression))
    statement = _swap_equation(step.statement, new_expression, format_value(new_result))
    statement = _swap_mentions_outside_equation(statement, old_value, new_value)
    new_step = replace(
        step, statement=statement, expression=new_expression, stated_result=new_result
    )
    steps = [new_step if s.index == step.index else s for s in record.steps]
    label = ErrorLabel(step.index, CATEGORY_REFERENCE)
    return _relabel(record, steps, label, seed), label


def _recomputes_to_positive_integer(expression: str, start: int, end: int, value: Fraction) -> bool:
    candidate = expression[:start] + format_value(value) + expression[end:]
    try:
        result = eval_expr(parse_expr(candidate))
    except ValueError:
        return False
    return result > 0 and result.denominator == 1


def inject_missing(
    record: SolutionRecord, seed: int = 0
) -> tuple[SolutionRecord, ErrorLabel]:
    """Delete a supporting step; its consumer keeps the dangling operand."""
    rng = _rng(seed, record, CATEGORY_MISSING)
    if len(record.steps) < 2:
        raise NoDeletableStep(f"record {record.record_id} has a single step")

    deletable: list[tuple[SolutionStep, int]] = []  # (step, index of first consumer)
    for step in record.steps:
        if step.expression is None:
            continue
        consumer = None
        for later in record.steps:
            if later.index <= step.index or later.expression is None:
                continue
            if any(v == step.stated_result for _, _, v in _operand_tokens(later.expression)):
                consumer = later.index
                break
        if consumer is not None:
            deletable.append((step, consumer))
    if not deletable:
        raise NoDeletableStep(f"record {record.record_id}: no result is consumed later")

    step, consumer = deletable[rng.randrange(len(deletable))]
    kept = [s for s in record.steps if s.index != step.index]
    renumbered = [replace(s, index=i) for i, s in enumerate(kept, start=1)]
    # the consumer sits after the deleted step, so it shifts down by one
    label = ErrorLabel(consumer - 1, CATEGORY_MISSING)
    return _relabel(record, renumbered, label, seed), label


def inject_hallucination(
    record: SolutionRecord, seed: int = 0
) -> tuple[SolutionRecord, ErrorLabel]:
    """Append a fabricated final step combining a fresh operand with the
    previous final value, computed correctly."""
    rng = _rng(seed, record, CATEGORY_HALLUCINATION)
    last = record.last_expression_step()
    previous = last.stated_result if last is not None else record.answer
    forbidden = set(condition_values(record.question))
    forbidden |= {s.stated_result for s in record.steps if s.stated_result is not None}
    forbidden.add(record.answer)
    pool: list[int] = []
    bound = 13
    while not pool:
        pool = [n for n in range(2, bound) if Fraction(n) not in forbidden]
        bound += 10
    operand = Fraction(pool[rng.randrange(len(pool))])
    result = previous + operand
    calculation = f"{format_value(previous)} + {format_value(operand)}"
    statement = (
        f"Finally, an additional {format_value(operand)} is accounted for, "
        f"bringing the total to {calculation} = {format_value(result)}."
    )
    appended = SolutionStep(
        index=len(record.steps) + 1,
        statement=statement,
        expression=calculation,
        stated_result=result,
    )
    steps = list(record.steps) + [appended]
    label = ErrorLabel(appended.index, CATEGORY_HALLUCINATION)
    return _relabel(record, steps, label, seed), label


def inject(
    record: SolutionRecord, cfg: InjectionConfig
) -> tuple[SolutionRecord, ErrorLabel]:
    if cfg.category == CATEGORY_CALCULATION:
        return inject_calculation(record, cfg.seed, cfg.offsets)
    if cfg.category == CATEGORY_REFERENCE:
        return inject_reference(record, cfg.seed, cfg.offsets)
    if cfg.category == CATEGORY_MISSING:
        return inject_missing(record, cfg.seed)
    return inject_hallucination(record, cfg.seed)


def inject_batch(
    records: Iterable[SolutionRecord],
    seed: int = 0,
    categories: tuple[str, ...] = CATEGORIES,
    offsets: tuple[int, ...] = DEFAULT_OFFSETS,
) -> Iterator[tuple[SolutionRecord, ErrorLabel]]:
    """One erroneous record per category per input record."""
    for record in records:
        for category in categories:
            yield inject(record, InjectionConfig(category=category, seed=seed, offsets=offsets))
