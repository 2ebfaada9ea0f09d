"""Solution likelihood math and quartile analysis.

Total log-likelihood is the sum of per-token log-probabilities of the
solution text conditioned on the question; the comparison indicator is
the per-token average, which removes the length penalty. Closed models
that cannot score are proxied by averaging open scoring backends.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import backends
from .backends import BackendProfile, TokenScore
from .records import SolutionRecord, render_solution_text

QUARTILES = ("Q1", "Q2", "Q3", "Q4")


class EmptyContinuation(ValueError):
    pass


class TooFewRecords(ValueError):
    pass


class MissingResult(KeyError):
    pass


def sum_logprob(scores: Sequence[TokenScore]) -> float:
    if not scores:
        raise EmptyContinuation("no token scores to sum")
    return math.fsum(s.logprob for s in scores)


def avg_token_logprob(scores: Sequence[TokenScore]) -> float:
    return sum_logprob(scores) / len(scores)


@dataclass(frozen=True)
class ScoredSolution:
    record_id: str
    backend: str
    total: float
    token_count: int
    indicator: float  # average per-token log-likelihood, nats/token


def score_solution(
    record: SolutionRecord, profile: BackendProfile, backend=None
) -> ScoredSolution:
    """Score the rendered solution text conditioned on the question."""
    prefix = record.question + "\n"
    continuation = render_solution_text(record)
    scores = backends.score_tokens(profile, prefix, continuation, backend=backend)
    if not scores:
        raise EmptyContinuation(f"record {record.record_id} scored zero tokens")
    total = sum_logprob(scores)
    return ScoredSolution(
        record_id=record.record_id,
        backend=profile.name,
        total=total,
        token_count=len(scores),
        indicator=total / len(scores),
    )


def pseudo_indicator(
    record: SolutionRecord,
    profiles: Sequence[BackendProfile],
    backends_by_name: Mapping[str, object] | None = None,
) -> float:
    """Unweighted mean of per-backend indicators."""
    if not profiles:
        raise ValueError("need at least one scoring profile")
    indicators = []
    for profile in profiles:
        backend = backends_by_name.get(profile.name) if backends_by_name else None
        indicators.append(score_solution(record, profile, backend=backend).indicator)
    return math.fsum(indicators) / len(indicators)


@dataclass(frozen=True)
class QuartileBucketing:
    """Nearest-rank percentile cuts at 25/50/75 and per-record buckets."""

    cuts: tuple[float, float, float]
    assignment: Mapping[str, str]

    def bucket(self, record_id: str) -> str:
        return self.assignment[record_id]

    def members(self, bucket: str) -> list[str]:
        return [rid for rid, b in self.assignment.items() if b == bucket]


def _nearest_rank(ordered: Sequence[float], percentile: float) -> float:
    rank = math.ceil(percentile / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def quartile_buckets(indicators: Mapping[str, float]) -> QuartileBucketing:
    """Assign Q1..Q4 by half-open intervals; ties fall into the lower bucket."""
    if len(indicators) < 4:
        raise TooFewRecords(f"need at least 4 records, got {len(indicators)}")
    ordered = sorted(indicators.values())
    cuts = tuple(_nearest_rank(ordered, p) for p in (25, 50, 75))
    assignment = {}
    for record_id, value in indicators.items():
        if value <= cuts[0]:
            bucket = "Q1"
        elif value <= cuts[1]:
            bucket = "Q2"
        elif value <= cuts[2]:
            bucket = "Q3"
        else:
            bucket = "Q4"
        assignment[record_id] = bucket
    return QuartileBucketing(cuts=cuts, assignment=assignment)


def bucket_accuracy(
    bucketing: QuartileBucketing, results: Mapping[str, bool]
) -> dict[str, float | None]:
    """Mean 0/1 correctness per bucket; empty buckets stay undefined."""
    sums: dict[str, list[int]] = {b: [0, 0] for b in QUARTILES}
    for record_id, bucket in bucketing.assignment.items():
        if record_id not in results:
            raise MissingResult(record_id)
        sums[bucket][0] += 1 if results[record_id] else 0
        sums[bucket][1] += 1
    return {
        bucket: (correct / count if count else None)
        for bucket, (correct, count) in sums.items()
    }


def write_scores_jsonl(scores: Iterable[ScoredSolution], path) -> None:
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for s in scores:
            handle.write(
                json.dumps(
                    {
                        "record_id": s.record_id,
                        "backend": s.backend,
                        "total": s.total,
                        "token_count": s.token_count,
                        "indicator": s.indicator,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_scores_jsonl(path) -> list[ScoredSolution]:
    import json

    out = []
    with open(path, encoding="utf-8") as handle:
        for raw in handle:
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            out.append(
                ScoredSolution(
                    record_id=obj["record_id"],
                    backend=obj["backend"],
                    total=obj["total"],
                    token_count=obj["token_count"],
                    indicator=obj["indicator"],
                )
            )
    return out


def write_analysis_csv(
    path,
    indicators: Mapping[str, float],
    bucketing: QuartileBucketing,
    results: Mapping[str, bool],
) -> None:
    """Per-record (record_id, indicator, bucket, correct) rows for plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["record_id", "indicator", "bucket", "correct"])
        for record_id in sorted(indicators):
            writer.writerow(
                [
                    record_id,
                    repr(indicators[record_id]),
                    bucketing.bucket(record_id),
                    int(bool(results[record_id])) if record_id in results else "",
                ]
            )
