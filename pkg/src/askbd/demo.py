"""Deterministic offline corpora, cassettes, and run configs.

Generates word-problem records whose condition values, intermediate
results, and answer are pairwise distinct positive integers with every
intermediate consumed exactly once; under those invariants the
recompute-and-resolve checker locates any injected error exactly. Also
builds scripted cassettes so full detection runs work with zero network.

Run `python -m askbd.demo OUTDIR` to materialize a ready-to-run demo.
"""

from __future__ import annotations

import json
import random
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .alternatives import (
    NoPermutationsAvailable,
    candidate_to_record,
    generate_alternatives,
)
from .backends import GenerationParams, generate_fingerprint
from .detect import STRATEGY_ASKBD, STRATEGY_ASKBD_COT, STRATEGY_COT, load_template
from .inject import InjectionError, inject_batch
from .records import (
    CATEGORIES,
    SolutionRecord,
    SolutionStep,
    condition_values,
    make_record,
    render_solution_text,
    write_jsonl,
)

_CATEGORY_SPELLING = {
    "calc": "calculation error",
    "ref": "reference error",
    "missing": "missing step",
    "halluc": "hallucination",
}

NAMES = ("Avery", "Brooke", "Casey", "Devin", "Elliot", "Frankie", "Harper", "Jordan")


def _family_trips(rng: random.Random):
    a = rng.randint(6, 14)
    b = rng.randint(2, a - 2)
    n = rng.randint(3, 12)
    question = (
        f"A ferry carries {a} passengers on each morning trip and {b} passengers "
        f"on each evening trip. It makes {n} trips in the morning and {n} trips "
        "in the evening. How many more passengers ride in the morning than in "
        "the evening over the whole day?"
    )
    r1, r2 = a * n, b * n
    answer = r1 - r2
    steps = [
        (f"The morning trips carry {a} * {n} = {r1} passengers.", f"{a} * {n}", r1),
        (f"The evening trips carry {b} * {n} = {r2} passengers.", f"{b} * {n}", r2),
        (
            f"The morning trips carry {r1} - {r2} = {answer} more passengers.",
            f"{r1} - {r2}",
            answer,
        ),
    ]
    return question, steps, answer


def _family_crates(rng: random.Random):
    name = rng.choice(NAMES)
    c = rng.randint(3, 12)
    u = rng.randint(4, 15)
    e = rng.randint(2, c * u - 2)
    question = (
        f"{name} receives {c} crates with {u} boxes in each crate. Workers "
        f"unpack {e} of the boxes. How many boxes are still packed?"
    )
    r1 = c * u
    answer = r1 - e
    steps = [
        (f"The crates hold {c} * {u} = {r1} boxes in total.", f"{c} * {u}", r1),
        (f"After unpacking, {r1} - {e} = {answer} boxes remain.", f"{r1} - {e}", answer),
    ]
    return question, steps, answer


def _family_fair(rng: random.Random):
    t1 = rng.randint(5, 20)
    p1 = rng.randint(3, 12)
    t2 = rng.randint(5, 20)
    p2 = rng.randint(2, 9)
    f = rng.randint(7, 40)
    question = (
        f"A fair sells {t1} adult tickets at {p1} dollars each and {t2} child "
        f"tickets at {p2} dollars each, and it also collects a fixed fee of "
        f"{f} dollars. How many dollars does the fair collect in total?"
    )
    r1, r2 = t1 * p1, t2 * p2
    r3 = r1 + r2
    answer = r3 + f
    steps = [
        (f"Adult tickets bring in {t1} * {p1} = {r1} dollars.", f"{t1} * {p1}", r1),
        (f"Child tickets bring in {t2} * {p2} = {r2} dollars.", f"{t2} * {p2}", r2),
        (f"Ticket sales total {r1} + {r2} = {r3} dollars.", f"{r1} + {r2}", r3),
        (f"With the fee, the fair collects {r3} + {f} = {answer} dollars.", f"{r3} + {f}", answer),
    ]
    return question, steps, answer


def _family_share(rng: random.Random):
    name = rng.choice(NAMES)
    g = rng.randint(3, 9)
    k = rng.randint(4, 15)
    total = g * k
    m = rng.randint(2, 20)
    question = (
        f"{name} splits {total} rolls evenly among {g} baskets and then adds "
        f"{m} more rolls to each basket. How many rolls end up in each basket?"
    )
    answer = k + m
    steps = [
        (f"Each basket first gets {total} / {g} = {k} rolls.", f"{total} / {g}", k),
        (f"After adding more, each basket has {k} + {m} = {answer} rolls.", f"{k} + {m}", answer),
    ]
    return question, steps, answer


_FAMILIES = (_family_trips, _family_crates, _family_fair, _family_share)


def _build_record(question: str, rows, answer: int) -> SolutionRecord:
    steps = tuple(
        SolutionStep(index=i, statement=text, expression=expr, stated_result=Fraction(value))
        for i, (text, expr, value) in enumerate(rows, start=1)
    )
    return make_record(question=question, steps=steps, answer=answer)


def _operand_values(expression: str) -> list[Fraction]:
    import re

    return [Fraction(m.group()) for m in re.finditer(r"\d+(?:\.\d+)?", expression)]


def oracle_clean(record: SolutionRecord) -> bool:
    """Invariants that make the recompute-and-resolve checker exact:
    distinct positive integer values, full resolvability, and each
    non-final result consumed exactly once."""
    conditions = condition_values(record.question)
    results = [s.stated_result for s in record.steps if s.expression is not None]
    if not results or results[-1] != record.answer:
        return False
    values = list(set(conditions)) + results
    if len(set(values)) != len(values):
        return False
    for value in values:
        if value <= 0 or value.denominator != 1:
            return False
    condition_set = set(conditions)
    priors: list[Fraction] = []
    consumption = {r: 0 for r in results}
    for step in record.steps:
        if step.expression is None:
            continue
        for operand in _operand_values(step.expression):
            if operand in consumption and operand in priors:
                consumption[operand] += 1
            elif operand not in condition_set:
                return False
        priors.append(step.stated_result)
    return all(count == 1 for result, count in consumption.items() if result != record.answer)


def _injectable(record: SolutionRecord) -> bool:
    # eligibility is seed-independent, so one probe covers every seed
    try:
        list(inject_batch([record], seed=0))
    except InjectionError:
        return False
    return True


def build_paired_corpus(
    n: int, seed: int = 0, k_candidates: int = 3
) -> tuple[list[SolutionRecord], list[SolutionRecord]]:
    """n conventional records, each paired with one derived alternative.

    Both sides satisfy the oracle-clean invariants and support all four
    injections; instances failing any check are resampled.
    """
    rng = random.Random(seed)
    conventional: list[SolutionRecord] = []
    alternative: list[SolutionRecord] = []
    seen_questions: set[str] = set()
    attempts = 0
    while len(conventional) < n:
        attempts += 1
        if attempts > 200 * n:
            raise RuntimeError("corpus generation is not converging")
        family = _FAMILIES[len(conventional) % len(_FAMILIES)]
        question, rows, answer = family(rng)
        if question in seen_questions:
            continue
        record = _build_record(question, rows, answer)
        if not (oracle_clean(record) and _injectable(record)):
            continue
        try:
            candidates = generate_alternatives(record, k=k_candidates, seed=rng.randrange(2**31))
        except NoPermutationsAvailable:
            continue
        selected = None
        for rank, candidate in enumerate(candidates, start=1):
            derived = candidate_to_record(candidate, record, rank=rank, seed=seed)
            if oracle_clean(derived) and _injectable(derived):
                selected = derived
                break
        if selected is None:
            continue
        seen_questions.add(question)
        conventional.append(record)
        alternative.append(selected)
    return conventional, alternative


def build_labeled_corpus(
    n: int, seed: int = 0
) -> tuple[list[SolutionRecord], list[SolutionRecord], list[SolutionRecord]]:
    """(conventional, alternative, injected): n + n correct records plus
    4 erroneous records per correct one."""
    conventional, alternative = build_paired_corpus(n, seed=seed)
    injected = [rec for rec, _ in inject_batch(conventional + alternative, seed=seed)]
    return conventional, alternative, injected


# --- Scripted cassette for full detection runs ---

ACCURACY_TARGETS = {
    ("M0", "D"): 0.60, ("M0", "D1"): 0.40,
    ("M1", "D"): 0.70, ("M1", "D1"): 0.55,
    ("M2", "D"): 0.75, ("M2", "D1"): 0.65,
    ("M3", "D"): 0.85, ("M3", "D1"): 0.80,
}


def _tags_for(record: SolutionRecord, correct: bool, rng: random.Random) -> list[str]:
    n = len(record.steps)
    gold = record.label
    if correct:
        tags = ["correct"] * n
        if gold.is_error:
            tags[gold.step - 1] = _CATEGORY_SPELLING[gold.category]
            for later in range(gold.step, n):
                if rng.random() < 0.3:
                    tags[later] = "secondary error"
        return tags
    # wrong in a controlled way: miss, misplace, or miscategorize
    tags = ["correct"] * n
    if gold.is_error:
        roll = rng.random()
        if roll < 0.4:
            pass  # misses the error entirely
        elif roll < 0.7 and n > 1:
            other = 1 + (gold.step % n)
            tags[other - 1] = _CATEGORY_SPELLING[gold.category]
        else:
            wrong_category = rng.choice(
                [c for c in CATEGORIES if c != gold.category]
            )
            tags[gold.step - 1] = _CATEGORY_SPELLING[wrong_category]
    else:
        victim = rng.randrange(n)
        tags[victim] = _CATEGORY_SPELLING[rng.choice(CATEGORIES)]
    return tags


def _render_tags(tags: Sequence[str]) -> str:
    return "\n".join(f"Step {i}: <{t}>" for i, t in enumerate(tags, start=1))


def _step_questions(record: SolutionRecord) -> list[str]:
    return [
        f"What is {s.expression}?" if s.expression else f"What does step {s.index} conclude?"
        for s in record.steps
    ]


def _reference_text(record: SolutionRecord) -> str:
    """Reference lines recomputed from the step expressions alone, so any
    two records with identical step questions share one reference."""
    from .exprs import eval_expr, format_value, parse_expr

    lines = []
    for i, step in enumerate(record.steps, start=1):
        if step.expression is not None:
            value = format_value(eval_expr(parse_expr(step.expression)))
            lines.append(f"Step {i}: From the conditions, {step.expression} = {value}.")
        else:
            lines.append(f"Step {i}: This follows directly from the conditions.")
    lines.append(
        f"Step {len(record.steps) + 1}: Therefore the answer is "
        f"{record.answer.numerator if record.answer.denominator == 1 else record.answer}."
    )
    return "\n".join(lines)


def _split_question(record: SolutionRecord) -> tuple[str, str]:
    sentences = [part.strip() for part in record.question.split(". ") if part.strip()]
    inquiry = sentences[-1]
    conditions = ". ".join(sentences[:-1]) + "."
    return conditions, inquiry


def build_cassette(
    records: Iterable[SolutionRecord],
    model: str,
    seed: int = 0,
) -> dict[str, dict]:
    """Scripted exchanges for every strategy over every record, with
    per-strategy accuracy close to ACCURACY_TARGETS."""
    rng = random.Random(seed)
    entries: dict[str, dict] = {}
    params = GenerationParams()

    def script(prompt: str, response: str) -> None:
        key = generate_fingerprint(model, [{"role": "user", "content": prompt}], params)
        entries[key] = {"response": response}

    for record in records:
        solution = render_solution_text(record)
        conditions, inquiry = _split_question(record)
        reference = _reference_text(record)

        questions = _step_questions(record) + [inquiry]
        numbered = "\n".join(f"Question {i}: {q}" for i, q in enumerate(questions, 1))

        script(
            load_template("cqe").render(question=record.question),
            f"<conditions> {conditions}\n<inquiry> {inquiry}",
        )
        script(
            load_template("ssi").render(solution=solution),
            "\n".join(
                f"Question {i}: {q}" for i, q in enumerate(questions[:-1], start=1)
            ),
        )
        script(
            load_template("sqr").render(conditions=conditions, questions=numbered),
            reference,
        )

        for strategy in ("M0", "M1", "M2", "M3"):
            correct = rng.random() < ACCURACY_TARGETS[(strategy, record.origin)]
            tags = _tags_for(record, correct, rng)
            body = _render_tags(tags)
            if strategy in (STRATEGY_COT, STRATEGY_ASKBD_COT):
                body = "Let me verify each step against the question.\n" + body
            if strategy == "M0":
                prompt = load_template("naive").render(
                    question=record.question, solution=solution
                )
            elif strategy == "M1":
                prompt = load_template("cot").render(
                    question=record.question, solution=solution
                )
            elif strategy == STRATEGY_ASKBD:
                prompt = load_template("reference_naive").render(
                    question=record.question, solution=solution, reference=reference
                )
            else:
                prompt = load_template("reference_cot").render(
                    question=record.question, solution=solution, reference=reference
                )
            script(prompt, body)
    return entries


def write_cassette(entries: dict[str, dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for key in sorted(entries):
            handle.write(
                json.dumps(
                    {"request_hash": key, **entries[key]}, sort_keys=True, ensure_ascii=False
                )
                + "\n"
            )


def build_demo(outdir, n_questions: int = 4, seeds: Sequence[int] = (1, 2, 3)) -> dict:
    """Materialize corpus, cassette, profiles, and run config under outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    model = "demo-model"

    conventional, alternative, injected = build_labeled_corpus(n_questions, seed=2024)
    corpus = conventional + alternative + injected
    corpus_path = outdir / "corpus.jsonl"
    write_jsonl(corpus, corpus_path)

    cassette_path = outdir / "cassette.jsonl"
    write_cassette(build_cassette(corpus, model, seed=2024), cassette_path)

    profiles_path = outdir / "profiles.json"
    profiles_path.write_text(
        json.dumps(
            {
                "profiles": [
                    {
                        "name": "demo",
                        "endpoint": f"scripted:{cassette_path}",
                        "model": model,
                        "capabilities": ["generate"],
                    },
                    {
                        "name": "scorer",
                        "endpoint": "mock:score?mode=hash&scale=2.0",
                        "model": "mock-scorer",
                        "capabilities": ["score_tokens"],
                    },
                ]
            },
            indent=2,
        )
        + "\n"
    )

    config_path = outdir / "run.json"
    config_path.write_text(
        json.dumps(
            {
                "profiles": str(profiles_path),
                "profile_names": ["demo"],
                "strategies": ["M0", "M1", "M2", "M3"],
                "seeds": list(seeds),
                "corpora": [str(corpus_path)],
                "out": str(outdir / "out"),
                "strict_scripted": True,
            },
            indent=2,
        )
        + "\n"
    )
    return {
        "corpus": corpus_path,
        "cassette": cassette_path,
        "profiles": profiles_path,
        "config": config_path,
        "n_records": len(corpus),
    }


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "demo"
    info = build_demo(target)
    print(f"wrote {info['n_records']} records under {target}")
    print(f"run: askbd run --config {info['config']}")
