"""Run sanity checks and rank effectiveness measures."""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import formats
from .errors import EvaluationRefused, FormatError, InvariantViolation
from .formats import Qrel, RunFile, TopicRecord

PARSE_FAIL = "PARSE_FAIL"
SCORE_TIES = "SCORE_TIES"
NAN_SCORE = "NAN_SCORE"
EMPTY_RESULT_SET = "EMPTY_RESULT_SET"
UNKNOWN_QUERY = "UNKNOWN_QUERY"
RANK_SCORE_CONTRADICTION = "RANK_SCORE_CONTRADICTION"
# Informational: run query that has no judgments at all.
UNJUDGED_QUERY = "UNJUDGED_QUERY"

SEVERITY = {
    PARSE_FAIL: "error",
    NAN_SCORE: "error",
    SCORE_TIES: "warn",
    EMPTY_RESULT_SET: "warn",
    UNKNOWN_QUERY: "warn",
    RANK_SCORE_CONTRADICTION: "warn",
    UNJUDGED_QUERY: "info",
}


@dataclass(frozen=True)
class Finding:
    code: str
    severity: str
    qid: str | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        d = {"code": self.code, "severity": self.severity, "detail": self.detail}
        if self.qid is not None:
            d["qid"] = self.qid
        return d


def _finding(code: str, qid: str | None = None, detail: str = "") -> Finding:
    return Finding(code, SEVERITY[code], qid, detail)


@dataclass(frozen=True)
class SanityReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def to_dict(self) -> dict:
        return {"ok": self.ok, "findings": [f.to_dict() for f in self.findings]}


def _qids(topics: Iterable[TopicRecord | str] | Mapping | None) -> list[str] | None:
    if topics is None:
        return None
    return [t.qid if isinstance(t, TopicRecord) else str(t) for t in topics]


def sanity_check(run: RunFile, topics: Iterable[TopicRecord | str] | None = None, qrels: Iterable[Qrel] | None = None) -> SanityReport:
    """Enumerate every finding; nothing short-circuits."""
    findings: list[Finding] = []
    qids = _qids(topics)
    by_query = run.by_query()
    for qid, lines in by_query.items():
        nan = [line.docno for line in lines if math.isnan(line.score)]
        if nan:
            findings.append(_finding(NAN_SCORE, qid, f"{len(nan)} NaN score(s), e.g. {nan[0]}"))
        finite = [line for line in lines if not math.isnan(line.score)]
        counts: dict[float, list[str]] = defaultdict(list)
        for line in finite:
            counts[line.score].append(line.docno)
        ties = {s: d for s, d in counts.items() if len(d) > 1}
        if ties:
            score = max(ties)
            docs = ties[score]
            findings.append(_finding(SCORE_TIES, qid, f"{sum(len(d) for d in ties.values())} documents share scores, e.g. {sorted(docs)[:3]} at {score:g}"))
        by_rank = sorted(finite, key=lambda line: line.rank)
        for prev, cur in zip(by_rank, by_rank[1:]):
            if cur.score > prev.score:
                findings.append(
                    _finding(
                        RANK_SCORE_CONTRADICTION,
                        qid,
                        f"rank {cur.rank} ({cur.docno}) scores {cur.format_score()} > rank {prev.rank} ({prev.docno}) {prev.format_score()}",
                    )
                )
                break
    if qids is not None:
        known = set(qids)
        for qid in by_query:
            if qid not in known:
                findings.append(_finding(UNKNOWN_QUERY, qid, "query not in topics"))
        for qid in qids:
            if qid not in by_query:
                findings.append(_finding(EMPTY_RESULT_SET, qid, "no results for topic"))
    if qrels is not None:
        judged = {q.topic for q in qrels}
        for qid in by_query:
            if qid not in judged:
                findings.append(_finding(UNJUDGED_QUERY, qid, "query has no relevance judgments"))
    return SanityReport(tuple(findings))


def check_run_file(source: formats.Source, topics=None, qrels=None) -> tuple[RunFile | None, SanityReport]:
    """Parse then sanity-check; a parse failure becomes a PARSE_FAIL finding."""
    try:
        run = formats.parse_run(source)
    except FormatError as exc:
        return None, SanityReport((_finding(PARSE_FAIL, None, exc.message),))
    return run, sanity_check(run, topics, qrels)


# ---------------------------------------------------------------- measures


def gain(relevance: int, kind: str = "exp") -> float:
    rel = max(relevance, 0)
    if kind == "exp":
        return float(2**rel - 1)
    return float(rel)


def dcg(gains: Sequence[float], k: int) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains[:k]))


def ndcg_at_k(ranking: Sequence[str], qrels: Mapping[str, int] | Iterable[Qrel], k: int, gain_kind: str = "exp") -> float:
    """nDCG@k with gain 2^rel - 1 (or rel for ``linear``) and log2(rank + 1) discount.

    Unjudged documents gain 0; returns 0.0 when no judged document has positive gain.
    """
    if k < 1:
        raise InvariantViolation("k must be >= 1", invariant="k >= 1")
    if not isinstance(qrels, Mapping):
        qrels = {q.docno: q.relevance for q in qrels}
    ideal = dcg(sorted((gain(r, gain_kind) for r in qrels.values()), reverse=True), k)
    if ideal <= 0:
        return 0.0
    seen: set[str] = set()
    gains = []
    for docno in ranking[:k]:
        # A document counts once even if a malformed ranking repeats it.
        gains.append(0.0 if docno in seen else gain(qrels.get(docno, 0), gain_kind))
        seen.add(docno)
    return dcg(gains, k) / ideal


_MEASURE = re.compile(r"^ndcg(?:\[(exp|linear)\])?@(\d+)$", re.IGNORECASE)


@dataclass(frozen=True)
class Measure:
    name: str
    k: int
    gain: str = "exp"

    def __str__(self) -> str:
        suffix = "" if self.gain == "exp" else f"[{self.gain}]"
        return f"nDCG{suffix}@{self.k}"

    @classmethod
    def parse(cls, text: str | "Measure") -> "Measure":
        if isinstance(text, Measure):
            return text
        m = _MEASURE.match(text.strip())
        if not m or int(m.group(2)) < 1:
            raise InvariantViolation(f"unknown measure {text!r} (supported: nDCG@k, nDCG[linear]@k)", invariant="known measure")
        return cls("nDCG", int(m.group(2)), (m.group(1) or "exp").lower())

    def compute(self, ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
        return ndcg_at_k(ranking, qrels, self.k, self.gain)


@dataclass(frozen=True)
class EvaluationReport:
    measure: str
    per_query: Mapping[str, float]
    mean: float
    evaluated_query_count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "per_query": dict(sorted(self.per_query.items())), "evaluated_query_count": self.evaluated_query_count}


@dataclass(frozen=True)
class Evaluation:
    reports: Mapping[str, EvaluationReport]
    sanity: SanityReport = field(default_factory=SanityReport)

    def __getitem__(self, measure: str) -> EvaluationReport:
        return self.reports[str(Measure.parse(measure))]

    def to_dict(self) -> dict:
        return {m: self.reports[m].to_dict() for m in sorted(self.reports)}


def evaluate(
    run: RunFile,
    qrels: Iterable[Qrel],
    measures: Iterable[str | Measure] = ("nDCG@10",),
    topics: Iterable[TopicRecord | str] | None = None,
) -> Evaluation:
    """Per-query and mean values over every judged topic; missing topics score 0."""
    qrels = list(qrels)
    judged: dict[str, dict[str, int]] = defaultdict(dict)
    for q in qrels:
        judged[q.topic][q.docno] = q.relevance
    report = sanity_check(run, topics, qrels)
    if not report.ok:
        raise EvaluationRefused(
            "run failed sanity checks: " + "; ".join(f"{f.code}({f.qid or '-'}) {f.detail}" for f in report.errors),
            sanity=report.to_dict(),
        )
    rankings = run.rankings()
    extra = []
    flagged = {f.qid for f in report.findings if f.code == EMPTY_RESULT_SET}
    for qid in judged:
        if qid not in rankings and qid not in flagged:
            extra.append(_finding(EMPTY_RESULT_SET, qid, "judged topic has no results"))
    if extra:
        report = SanityReport(report.findings + tuple(extra))
    reports = {}
    for m in (Measure.parse(x) for x in measures):
        per_query = {qid: m.compute(rankings.get(qid, []), judged[qid]) for qid in sorted(judged)}
        mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
        reports[str(m)] = EvaluationReport(str(m), per_query, mean, len(per_query))
    return Evaluation(reports, report)
