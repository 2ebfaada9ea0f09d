"""Operator entry point: ingestion, alternative generation, interactive
review, error injection, likelihood scoring, detection runs, evaluation.

Exit codes: 0 success, 2 schema error, 3 backend error, 4 user abort.
All randomness flows from explicit --seed flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import random
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import backends, likelihood
from .alternatives import (
    CompositionError,
    NoPermutationsAvailable,
    candidate_to_record,
    generate_alternatives,
)
from .backends import BackendError, BackendProfile, load_profiles, open_backend
from .detect import DetectionRun, UnparseableBackendOutput, detect
from .detect import DetectionOutcome, parse_detector_response
from .evaluate import (
    JudgedResult,
    build_report,
    judge,
    render_report_csv,
    render_report_markdown,
    render_results_csv,
)
from .inject import InjectionConfig, InjectionError, inject
from .records import (
    CATEGORIES,
    RecordError,
    SchemaViolation,
    SolutionRecord,
    compute_stats,
    make_record,
    parse_structured_solution,
    read_jsonl,
    render_solution_text,
    render_step,
    write_jsonl,
)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_BACKEND = 3
EXIT_ABORT = 4

_STRATEGY_FLAGS = {
    "M0": "M0",
    "M1": "M1",
    "M2": "M2",
    "M3": "M3",
    "ref-conventional": "ref_conventional",
    "ref-matching": "ref_matching",
    "ref_conventional": "ref_conventional",
    "ref_matching": "ref_matching",
}


class UserAbort(Exception):
    pass


# --- ingest ---

_ANNOTATION = re.compile(r"<<[^>]*>>")
_FINAL_MARKER = "####"


def _raw_to_record(obj: dict) -> SolutionRecord:
    question = obj["question"]
    if "rationale" in obj:
        rationale, answer_text = obj["rationale"], str(obj["answer"])
    else:
        answer_field = obj["answer"]
        if _FINAL_MARKER in answer_field:
            rationale, answer_text = answer_field.split(_FINAL_MARKER, 1)
        else:
            raise SchemaViolation("no rationale/final-answer split found")
    lines = [_ANNOTATION.sub("", line).strip() for line in rationale.strip().splitlines()]
    lines = [line for line in lines if line]
    numbered = []
    for i, line in enumerate(lines, start=1):
        if re.match(r"Step\s+\d+\s*[.:]", line):
            numbered.append(line)
        else:
            numbered.append(f"Step {i}. {line}")
    steps = parse_structured_solution(" ".join(numbered))
    answer = Fraction(answer_text.strip().replace(",", "").replace("$", ""))
    return make_record(question=question, steps=steps, answer=answer)


def cmd_ingest(args) -> int:
    raw = []
    with open(args.infile, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise SchemaViolation(f"invalid JSON: {err}", line=number) from err
    if args.n is not None and args.n < len(raw):
        rng = random.Random(args.seed)
        picked = sorted(rng.sample(range(len(raw)), args.n))
        raw = [raw[i] for i in picked]
    records, skipped = [], 0
    for obj in raw:
        try:
            records.append(_raw_to_record(obj))
        except (RecordError, ValueError, KeyError) as err:
            skipped += 1
            print(f"skipping record: {err}", file=sys.stderr)
    write_jsonl(records, args.out)
    print(f"ingested {len(records)} records ({skipped} skipped) -> {args.out}")
    return EXIT_OK


# --- gen-alt ---


def cmd_gen_alt(args) -> int:
    records = read_jsonl(args.infile)
    out: list[SolutionRecord] = []
    failures = 0
    for record in records:
        try:
            candidates = generate_alternatives(
                record, k=args.k, seed=args.seed, max_rewrites=args.max_rewrites,
                route=args.route,
            )
        except (CompositionError, NoPermutationsAvailable) as err:
            failures += 1
            print(f"no candidates for {record.record_id}: {err}", file=sys.stderr)
            continue
        for rank, candidate in enumerate(candidates, start=1):
            out.append(candidate_to_record(candidate, record, rank=rank, seed=args.seed))
    write_jsonl(out, args.out)
    print(f"generated {len(out)} candidates ({failures} records skipped) -> {args.out}")
    return EXIT_OK


# --- review ---


def _load_audit(path: Path) -> dict[str, dict]:
    decisions: dict[str, dict] = {}
    if path.exists():
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    entry = json.loads(line)
                    decisions[entry["source_id"]] = entry
    return decisions


def cmd_review(args) -> int:
    candidates = read_jsonl(args.candidates)
    by_source: dict[str, list[SolutionRecord]] = {}
    for record in candidates:
        source = (record.lineage or {}).get("source_id", record.record_id)
        by_source.setdefault(source, []).append(record)
    for group in by_source.values():
        group.sort(key=lambda r: r.candidate_rank or 0)

    audit_path = Path(args.audit)
    decisions = _load_audit(audit_path)
    aborted = False

    for source, group in by_source.items():
        if source in decisions:
            continue
        print(f"\n=== source {source} — {len(group)} candidate(s)")
        print(group[0].question)
        for record in group:
            print(f"\n--- candidate {record.candidate_rank} [{record.permuted_expression}]")
            for step in record.steps:
                print("   " + render_step(step))
        choice = input(
            "\nselect candidate number, Enter for top-ranked, r to reject, q to quit: "
        ).strip().lower()
        if choice == "q":
            aborted = True
            break
        if choice == "r":
            entry = {"source_id": source, "decision": "reject"}
        else:
            rank = int(choice) if choice else (group[0].candidate_rank or 1)
            if rank not in {r.candidate_rank for r in group}:
                print(f"no candidate ranked {rank}; rejecting nothing, try again")
                aborted = True
                break
            entry = {"source_id": source, "decision": "select", "candidate_rank": rank}
        decisions[entry["source_id"]] = entry
        with open(audit_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")

    selected = []
    for source, group in by_source.items():
        entry = decisions.get(source)
        if entry and entry["decision"] == "select":
            rank = entry["candidate_rank"]
            selected.extend(r for r in group if r.candidate_rank == rank)
    write_jsonl(selected, args.out)
    decided = sum(1 for s in by_source if s in decisions)
    print(f"\n{decided}/{len(by_source)} sources decided; {len(selected)} selected -> {args.out}")
    return EXIT_ABORT if aborted else EXIT_OK


# --- inject ---


def cmd_inject(args) -> int:
    records = read_jsonl(args.infile)
    categories = list(CATEGORIES) if args.category == "all" else [args.category]
    out, failures = [], 0
    for record in records:
        for category in categories:
            try:
                injected, _ = inject(record, InjectionConfig(category=category, seed=args.seed))
            except InjectionError as err:
                failures += 1
                print(f"cannot inject {category} into {record.record_id}: {err}",
                      file=sys.stderr)
                continue
            out.append(injected)
    write_jsonl(out, args.out)
    print(f"injected {len(out)} records ({failures} skipped) -> {args.out}")
    return EXIT_OK


# --- score-likelihood ---


def cmd_score_likelihood(args) -> int:
    profiles = load_profiles(args.profiles_file)
    names = [n.strip() for n in args.profiles.split(",") if n.strip()]
    missing = [n for n in names if n not in profiles]
    if missing:
        raise SchemaViolation(f"unknown profiles {missing}")
    chosen = [profiles[n] for n in names]
    opened = {p.name: open_backend(p, strict_scripted=args.strict_scripted) for p in chosen}
    records = read_jsonl(args.infile)
    scored: list[likelihood.ScoredSolution] = []
    indicators: dict[str, float] = {}
    for record in records:
        per_backend = [
            likelihood.score_solution(record, profile, backend=opened[profile.name])
            for profile in chosen
        ]
        scored.extend(per_backend)
        indicators[record.record_id] = sum(s.indicator for s in per_backend) / len(per_backend)
    likelihood.write_scores_jsonl(scored, args.out)
    print(f"scored {len(records)} records with {len(chosen)} profiles -> {args.out}")

    if args.analysis:
        results: dict[str, bool] = {}
        if args.results:
            results = _read_correctness(args.results, args.strategy)
        bucketing = likelihood.quartile_buckets(indicators)
        likelihood.write_analysis_csv(args.analysis, indicators, bucketing, results)
        if results:
            accuracy = likelihood.bucket_accuracy(
                bucketing, {rid: results.get(rid, False) for rid in indicators}
            )
            for bucket in likelihood.QUARTILES:
                value = accuracy[bucket]
                print(f"{bucket}: {'undefined' if value is None else f'{value:.3f}'}")
        print(f"analysis -> {args.analysis}")
    return EXIT_OK


def _read_correctness(path, strategy: str | None) -> dict[str, bool]:
    rows: dict[str, list[bool]] = {}
    with open(path, encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            if strategy and row["strategy"] != strategy:
                continue
            rows.setdefault(row["record_id"], []).append(row["correct"] == "1")
    ambiguous = [rid for rid, flags in rows.items() if len(flags) > 1 and len(set(flags)) > 1]
    if ambiguous:
        raise SchemaViolation(
            f"results are ambiguous for {len(ambiguous)} records; filter with --strategy"
        )
    return {rid: flags[0] for rid, flags in rows.items()}


# --- detect / evaluate / run ---


def _transcript_path(outdir: Path, profile: str, strategy: str, seed: int) -> Path:
    return outdir / "transcripts" / f"{profile}__{strategy}__seed{seed}.jsonl"


def _write_transcripts(path: Path, runs: list[DetectionRun]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as handle:
        for run in runs:
            for exchange in run.transcript:
                handle.write(
                    json.dumps(
                        {
                            "record_id": run.record_id,
                            "strategy": run.strategy,
                            "stage": exchange.stage,
                            "prompt": exchange.prompt,
                            "response": exchange.response,
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def _existing_record_ids(path: Path) -> set[str]:
    ids: set[str] = set()
    if path.exists():
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    ids.add(json.loads(line)["record_id"])
    return ids


def _reference_pool(paths: list[str]) -> dict[str, SolutionRecord]:
    pool: dict[str, SolutionRecord] = {}
    for path in paths:
        for record in read_jsonl(path):
            pool[record.record_id] = record
    return pool


def _resolve_reference(record: SolutionRecord, strategy: str,
                       pool: dict[str, SolutionRecord]) -> str:
    """ref_matching: the correct solution matching this record's structure
    (itself when correct, its injection source otherwise). ref_conventional:
    the correct conventional ancestor, via the lineage chain."""

    def parent_of(rec: SolutionRecord) -> SolutionRecord:
        parent = (rec.lineage or {}).get("source_id")
        if parent is None or parent not in pool:
            raise SchemaViolation(f"no reference ancestor for {record.record_id}")
        return pool[parent]

    base = record
    if strategy == "ref_matching":
        if base.label.is_error:
            base = parent_of(base)
        return render_solution_text(base)
    seen: set[str] = set()
    while base.label.is_error or base.origin != "D":
        if base.record_id in seen:
            raise SchemaViolation(f"lineage cycle at {base.record_id}")
        seen.add(base.record_id)
        base = parent_of(base)
    return render_solution_text(base)


def _run_detection(
    records: list[SolutionRecord],
    profile: BackendProfile,
    backend,
    strategy: str,
    seed: int,
    outdir: Path,
    reference_pool: dict[str, SolutionRecord] | None,
    resume: bool,
    workers: int = 4,
) -> list[tuple[SolutionRecord, DetectionRun]]:
    path = _transcript_path(outdir, profile.name, strategy, seed)
    if not resume and path.exists():
        path.unlink()
    done = _existing_record_ids(path) if resume else set()
    pending = [r for r in records if r.record_id not in done]

    def one(record: SolutionRecord) -> DetectionRun:
        reference = None
        if strategy in ("ref_conventional", "ref_matching"):
            reference = _resolve_reference(record, strategy, reference_pool or {})
        try:
            return detect(record, profile, strategy, reference=reference, backend=backend)
        except (UnparseableBackendOutput, backends.MalformedResponse,
                backends.RateLimited) as err:
            # per-record failures become invalid outcomes; auth errors abort
            outcome = DetectionOutcome.invalid_response("", f"stage failure: {err}")
            return DetectionRun(
                record_id=record.record_id, strategy=strategy,
                outcome=outcome, transcript=(),
            )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        runs = list(pool.map(one, pending))
    _write_transcripts(path, runs)
    return list(zip(pending, runs))


def cmd_detect(args) -> int:
    profiles = load_profiles(args.profiles_file)
    if args.profile not in profiles:
        raise SchemaViolation(f"unknown profile {args.profile!r}")
    profile = profiles[args.profile]
    backend = open_backend(profile, strict_scripted=args.strict_scripted)
    strategy = _STRATEGY_FLAGS[args.strategy]
    records = read_jsonl(args.infile)
    reference_pool = _reference_pool([args.ref_corpus]) if args.ref_corpus else None
    outdir = Path(args.out)
    judged = []
    for seed in args.seeds:
        pairs = _run_detection(
            records, profile, backend, strategy, seed, outdir,
            reference_pool, args.resume,
        )
        for record, run in pairs:
            judged.append(_judge_pair(record, run, profile.name, seed))
    (outdir / "results.csv").parent.mkdir(parents=True, exist_ok=True)
    (outdir / "results.csv").write_text(render_results_csv(judged))
    print(f"detected {len(judged)} (record, seed) pairs -> {outdir}")
    return EXIT_OK


def _judge_pair(record: SolutionRecord, run: DetectionRun, profile: str, seed: int):
    return JudgedResult(
        record_id=record.record_id,
        profile=profile,
        strategy=run.strategy,
        origin=record.origin,
        seed=seed,
        gold=record.label,
        predicted=run.outcome.predicted,
        valid=run.outcome.valid,
        correct=judge(record.label, run.outcome),
    )


_TRANSCRIPT_NAME = re.compile(r"(?P<profile>.+)__(?P<strategy>.+)__seed(?P<seed>\d+)\.jsonl$")


def cmd_evaluate(args) -> int:
    gold = {r.record_id: r for r in read_jsonl(args.gold)}
    judged: list[JudgedResult] = []
    seeds: list[int] = []
    transcripts_dir = Path(args.transcripts)
    for path in sorted(transcripts_dir.glob("*.jsonl")):
        name = _TRANSCRIPT_NAME.match(path.name)
        if not name:
            continue
        profile = name.group("profile")
        strategy = name.group("strategy")
        seed = int(name.group("seed"))
        if seed not in seeds:
            seeds.append(seed)
        grading: dict[str, str] = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry["stage"] == "reg":
                grading[entry["record_id"]] = entry["response"]
        for record_id, response in grading.items():
            record = gold.get(record_id)
            if record is None:
                raise SchemaViolation(f"gold corpus lacks record {record_id}")
            outcome = parse_detector_response(response, len(record.steps))
            judged.append(
                JudgedResult(
                    record_id=record_id,
                    profile=profile,
                    strategy=strategy,
                    origin=record.origin,
                    seed=seed,
                    gold=record.label,
                    predicted=outcome.predicted,
                    valid=outcome.valid,
                    correct=judge(record.label, outcome),
                )
            )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report = build_report(judged, seeds=sorted(seeds))
    (outdir / "report.csv").write_text(render_report_csv(report))
    (outdir / "report.md").write_text(render_report_markdown(report))
    (outdir / "results.csv").write_text(render_results_csv(judged))
    print(f"evaluated {len(judged)} judged results -> {outdir}")
    return EXIT_OK


@dataclass(frozen=True)
class RunConfig:
    profiles_path: str
    profile_names: tuple[str, ...]
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    corpora: tuple[str, ...]
    out: str
    strict_scripted: bool = False
    reference_corpus: str | None = None
    workers: int = 4


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    try:
        config = RunConfig(
            profiles_path=data["profiles"],
            profile_names=tuple(data.get("profile_names", [])),
            strategies=tuple(_STRATEGY_FLAGS[s] for s in data["strategies"]),
            seeds=tuple(data["seeds"]),
            corpora=tuple(data["corpora"]),
            out=data["out"],
            strict_scripted=data.get("strict_scripted", False),
            reference_corpus=data.get("reference_corpus"),
            workers=data.get("workers", 4),
        )
    except KeyError as err:
        raise SchemaViolation(f"run config missing key {err.args[0]!r}") from err
    if not config.seeds:
        raise SchemaViolation("run config needs at least one seed")
    for path_ in (config.profiles_path, *config.corpora):
        if not Path(path_).exists():
            raise SchemaViolation(f"referenced file does not exist: {path_}")
    return config


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    strict = config.strict_scripted or args.strict_scripted
    profiles = load_profiles(config.profiles_path)
    names = config.profile_names or tuple(
        name for name, p in profiles.items() if backends.CAP_GENERATE in p.capabilities
    )
    missing = [n for n in names if n not in profiles]
    if missing:
        raise SchemaViolation(f"unknown profiles {missing}")

    records: list[SolutionRecord] = []
    for corpus in config.corpora:
        records.extend(read_jsonl(corpus))
    reference_pool = (
        _reference_pool([config.reference_corpus]) if config.reference_corpus else None
    )

    outdir = Path(config.out)
    judged: list[JudgedResult] = []
    for name in names:
        profile = profiles[name]
        backend = open_backend(profile, strict_scripted=strict)
        for strategy in config.strategies:
            for seed in config.seeds:
                pairs = _run_detection(
                    records, profile, backend, strategy, seed, outdir,
                    reference_pool, resume=args.resume, workers=config.workers,
                )
                for record, run in pairs:
                    judged.append(_judge_pair(record, run, profile.name, seed))

    outdir.mkdir(parents=True, exist_ok=True)
    report = build_report(judged, seeds=sorted(set(config.seeds)))
    (outdir / "report.csv").write_text(render_report_csv(report))
    (outdir / "report.md").write_text(render_report_markdown(report))
    (outdir / "results.csv").write_text(render_results_csv(judged))
    stats = compute_stats(records)
    (outdir / "stats.txt").write_text(stats.as_table() + "\n")
    print(f"ran {len(judged)} (record, strategy, seed) detections -> {outdir}")
    return EXIT_OK


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="askbd",
        description="Error-detection experiments for math word problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="sample a raw question/rationale file into a seed corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-alt", help="generate alternative-solution candidates")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rewrites", type=int, default=3)
    p.add_argument("--route", choices=["templated", "backend"], default="templated")
    p.set_defaults(func=cmd_gen_alt)

    p = sub.add_parser("review", help="interactively curate candidates into an alternative corpus")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audit", required=True)
    p.set_defaults(func=cmd_review)

    p = sub.add_parser("inject", help="inject labeled errors into correct solutions")
    p.add_argument("--category", choices=list(CATEGORIES) + ["all"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("score-likelihood", help="score solutions and bucket by quartile")
    p.add_argument("--profiles", required=True, help="comma-separated profile names")
    p.add_argument("--profiles-file", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--analysis", default=None, help="per-record CSV output")
    p.add_argument("--results", default=None, help="results.csv to join correctness from")
    p.add_argument("--strategy", default=None, help="filter results rows by strategy")
    p.add_argument("--strict-scripted", action="store_true")
    p.set_defaults(func=cmd_score_likelihood)

    p = sub.add_parser("detect", help="run one detection strategy over a corpus")
    p.add_argument("--strategy", choices=sorted(_STRATEGY_FLAGS), required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--profiles-file", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--ref-corpus", default=None)
    p.add_argument("--strict-scripted", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="judge transcripts against gold labels")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full experiment: detect every cell, then evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--strict-scripted", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaViolation as err:
        print(f"schema error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except RecordError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except BackendError as err:
        print(f"backend error: {err}", file=sys.stderr)
        return EXIT_BACKEND
    except (KeyboardInterrupt, UserAbort):
        print("aborted", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
