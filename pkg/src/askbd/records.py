"""Question/solution records, step parsing, JSONL serialization, statistics.

Records hold expressions as source strings (parse-validated at load) so
files stay human-editable. LaTeX math markers in solution text are
normalized to plain operators at ingestion.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

from .exprs import Rational, format_value, parse_expr

ORIGIN_CONVENTIONAL = "D"
ORIGIN_ALTERNATIVE = "D1"
ORIGINS = (ORIGIN_CONVENTIONAL, ORIGIN_ALTERNATIVE)

CATEGORY_CALCULATION = "calc"
CATEGORY_REFERENCE = "ref"
CATEGORY_MISSING = "missing"
CATEGORY_HALLUCINATION = "halluc"
CATEGORIES = (
    CATEGORY_CALCULATION,
    CATEGORY_REFERENCE,
    CATEGORY_MISSING,
    CATEGORY_HALLUCINATION,
)

STAT_CLASSES = ("correct",) + CATEGORIES


class RecordError(ValueError):
    pass


class MissingStepMarkers(RecordError):
    pass


class NonContiguousIndices(RecordError):
    pass


class SchemaViolation(RecordError):
    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name:
            where.append(f"field {field_name}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.field_name = field_name


@dataclass(frozen=True)
class ErrorLabel:
    """Gold error location: both fields present (erroneous) or both absent."""

    step: int | None = None
    category: str | None = None

    def __post_init__(self):
        if (self.step is None) != (self.category is None):
            raise ValueError("step and category must both be present or both absent")
        if self.category is not None and self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def is_error(self) -> bool:
        return self.step is not None


CORRECT_LABEL = ErrorLabel()


@dataclass(frozen=True)
class SolutionStep:
    index: int
    statement: str
    expression: str | None = None
    stated_result: Rational | None = None

    def __post_init__(self):
        if self.expression is not None and self.stated_result is None:
            raise ValueError("a step with an expression must state its result")


@dataclass(frozen=True)
class SolutionRecord:
    record_id: str
    question: str
    steps: tuple[SolutionStep, ...]
    answer: Rational
    origin: str = ORIGIN_CONVENTIONAL
    label: ErrorLabel = CORRECT_LABEL
    lineage: Mapping[str, object] | None = None
    candidate_rank: int | None = None
    permuted_expression: str | None = None
    route: str | None = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a record needs at least one step")
        if [s.index for s in self.steps] != list(range(1, len(self.steps) + 1)):
            raise ValueError("step indices must be contiguous from 1")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.label.is_error and self.label.step > len(self.steps):
            raise ValueError("label points past the last step")
        if not self.label.is_error:
            last = self.last_expression_step()
            if last is not None and last.stated_result != self.answer:
                raise ValueError(
                    "an error-free record must end its calculations at the answer"
                )

    def last_expression_step(self) -> SolutionStep | None:
        for step in reversed(self.steps):
            if step.expression is not None:
                return step
        return None


def render_step(step: SolutionStep) -> str:
    return f"Step {step.index}. {step.statement}"


def render_solution_text(record_or_steps) -> str:
    steps = getattr(record_or_steps, "steps", record_or_steps)
    return "\n".join(render_step(s) for s in steps)


def compute_record_id(
    question: str,
    origin: str,
    label: ErrorLabel,
    steps: Iterable[SolutionStep],
) -> str:
    """Content-addressed id so regeneration is idempotent."""
    payload = json.dumps(
        {
            "question": question,
            "origin": origin,
            "label": [label.step, label.category],
            "steps": [
                [s.index, s.statement, s.expression,
                 None if s.stated_result is None else format_value(s.stated_result)]
                for s in steps
            ],
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def make_record(
    question: str,
    steps: Iterable[SolutionStep],
    answer,
    origin: str = ORIGIN_CONVENTIONAL,
    label: ErrorLabel = CORRECT_LABEL,
    lineage: Mapping[str, object] | None = None,
    **extras,
) -> SolutionRecord:
    steps = tuple(steps)
    return SolutionRecord(
        record_id=compute_record_id(question, origin, label, steps),
        question=question,
        steps=steps,
        answer=Fraction(answer),
        origin=origin,
        label=label,
        lineage=lineage,
        **extras,
    )


# --- Structured solution text ---

_STEP_MARKER = re.compile(r"Step\s+(\d+)\s*[.:]\s*")
_NUM = r"\d+(?:\.\d+)?"
_EXPRESSION_EQ = re.compile(
    rf"({_NUM}(?:\s*[+−×*/÷-]\s*{_NUM})+)\s*=\s*({_NUM})"
)


def normalize_math_text(text: str) -> str:
    """Strip $...$ markers and map LaTeX operators to plain ones."""
    out = text.replace("\\times", "×").replace("\\div", "÷")
    out = out.replace("\\cdot", "×")
    return out.replace("$", "")


def extract_expression(statement: str) -> tuple[str, Rational] | None:
    """The trailing `a <op> b = c` calculation of a statement, if any."""
    match = None
    for match in _EXPRESSION_EQ.finditer(statement):
        pass
    if match is None:
        return None
    return match.group(1).strip(), Fraction(match.group(2))


def parse_structured_solution(text: str) -> list[SolutionStep]:
    """Split `Step n.`-marked solution text into steps.

    Statements are preserved verbatim (after math-marker normalization);
    trailing calculations become the step's expression and stated result.
    """
    normalized = normalize_math_text(text)
    markers = list(_STEP_MARKER.finditer(normalized))
    if not markers:
        raise MissingStepMarkers("no 'Step n.' markers found")
    indices = [int(m.group(1)) for m in markers]
    if indices != list(range(1, len(indices) + 1)):
        raise NonContiguousIndices(f"step indices {indices} are not 1..{len(indices)}")
    steps = []
    for pos, marker in enumerate(markers):
        end = markers[pos + 1].start() if pos + 1 < len(markers) else len(normalized)
        statement = normalized[marker.end():end].strip()
        extracted = extract_expression(statement)
        if extracted is None:
            steps.append(SolutionStep(index=indices[pos], statement=statement))
        else:
            expression, result = extracted
            steps.append(
                SolutionStep(
                    index=indices[pos],
                    statement=statement,
                    expression=expression,
                    stated_result=result,
                )
            )
    return steps


def condition_values(question: str) -> list[Rational]:
    """Numbers stated by the question, in order of appearance."""
    return [Fraction(m.group()) for m in re.finditer(_NUM, question)]


# --- JSONL serialization ---


def parse_rational(text: str) -> Rational:
    return Fraction(text)


def record_to_json(record: SolutionRecord) -> dict:
    steps = []
    for s in record.steps:
        step: dict = {"index": s.index, "statement": s.statement}
        if s.expression is not None:
            step["expression"] = s.expression
            step["result"] = format_value(s.stated_result)
        steps.append(step)
    label: dict = {}
    if record.label.is_error:
        label = {"step": record.label.step, "category": record.label.category}
    obj: dict = {
        "id": record.record_id,
        "question": record.question,
        "steps": steps,
        "answer": format_value(record.answer),
        "origin": record.origin,
        "label": label,
    }
    if record.lineage is not None:
        obj["lineage"] = dict(record.lineage)
    if record.candidate_rank is not None:
        obj["candidate_rank"] = record.candidate_rank
    if record.permuted_expression is not None:
        obj["permuted_expression"] = record.permuted_expression
    if record.route is not None:
        obj["route"] = record.route
    return obj


def record_from_json(obj: dict, line: int | None = None) -> SolutionRecord:
    try:
        steps = []
        for raw in obj["steps"]:
            expression = raw.get("expression")
            if expression is not None:
                parse_expr(expression)  # parse-validated at load
                result = parse_rational(raw["result"])
            else:
                result = None
            steps.append(
                SolutionStep(
                    index=raw["index"],
                    statement=raw["statement"],
                    expression=expression,
                    stated_result=result,
                )
            )
        raw_label = obj.get("label") or {}
        label = ErrorLabel(raw_label.get("step"), raw_label.get("category"))
        return SolutionRecord(
            record_id=obj["id"],
            question=obj["question"],
            steps=tuple(steps),
            answer=parse_rational(obj["answer"]),
            origin=obj["origin"],
            label=label,
            lineage=obj.get("lineage"),
            candidate_rank=obj.get("candidate_rank"),
            permuted_expression=obj.get("permuted_expression"),
            route=obj.get("route"),
        )
    except SchemaViolation:
        raise
    except KeyError as err:
        raise SchemaViolation(f"missing field {err.args[0]!r}", line=line) from err
    except (ValueError, TypeError) as err:
        raise SchemaViolation(str(err), line=line) from err


def read_jsonl(path) -> list[SolutionRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as err:
                raise SchemaViolation(f"invalid JSON: {err}", line=number) from err
            records.append(record_from_json(obj, line=number))
    return records


def write_jsonl(records: Iterable[SolutionRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json(record), sort_keys=True, ensure_ascii=False))
            handle.write("\n")


# --- Statistics ---


@dataclass(frozen=True)
class DatasetStats:
    """Cross-tab of record counts per (origin, correct/error-category)."""

    counts: Mapping[tuple[str, str], int]
    total: int

    def cell(self, origin: str, klass: str) -> int:
        return self.counts.get((origin, klass), 0)

    def as_table(self) -> str:
        header = "origin  " + "  ".join(f"{k:>8}" for k in STAT_CLASSES)
        lines = [header]
        for origin in ORIGINS:
            row = f"{origin:<6}  " + "  ".join(
                f"{self.cell(origin, k):>8}" for k in STAT_CLASSES
            )
            lines.append(row)
        return "\n".join(lines)


def compute_stats(records: Iterable[SolutionRecord]) -> DatasetStats:
    counts: dict[tuple[str, str], int] = {}
    total = 0
    for record in records:
        klass = record.label.category if record.label.is_error else "correct"
        counts[(record.origin, klass)] = counts.get((record.origin, klass), 0) + 1
        total += 1
    return DatasetStats(counts=counts, total=total)
