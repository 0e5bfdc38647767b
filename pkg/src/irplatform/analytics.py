"""Leaderboards and system-preference reproducibility statistics."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import Conflict, InvariantViolation
from .evaluator import EvaluationReport

log = logging.getLogger(__name__)

QUANTILES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class LeaderboardEntry:
    approach: str
    corpus: str
    per_task: Mapping[str, float]
    macro_avg: float | None
    missing_tasks: tuple[str, ...] = ()

    @property
    def complete(self) -> bool:
        return not self.missing_tasks

    def to_dict(self) -> dict:
        return {
            "approach": self.approach,
            "macro_avg": self.macro_avg,
            "per_task": dict(sorted(self.per_task.items())),
            "complete": self.complete,
            "missing_tasks": list(self.missing_tasks),
        }


def _mean_of(value: EvaluationReport | float) -> float:
    return value.mean if isinstance(value, EvaluationReport) else float(value)


def build_leaderboard(
    evaluations: Iterable[tuple[str, str, EvaluationReport | float]],
    corpus_map: Mapping[str, str],
) -> dict[str, list[LeaderboardEntry]]:
    """Per-corpus entries, macro-averaged over the corpus' tasks.

    An approach missing a task of the corpus is kept but marked incomplete
    (macro_avg None) and listed after all complete entries.
    """
    scores: dict[tuple[str, str], float] = {}
    for approach, task, report in evaluations:
        if (approach, task) in scores:
            raise Conflict(f"duplicate evaluation for ({approach!r}, {task!r})", approach=approach, task=task)
        scores[(approach, task)] = _mean_of(report)
    tasks_of: dict[str, list[str]] = defaultdict(list)
    for task, corpus in sorted(corpus_map.items()):
        tasks_of[corpus].append(task)
    board: dict[str, list[LeaderboardEntry]] = {}
    for corpus in sorted(tasks_of):
        tasks = tasks_of[corpus]
        approaches = sorted({a for (a, t) in scores if t in tasks})
        entries = []
        for approach in approaches:
            per_task = {t: scores[(approach, t)] for t in tasks if (approach, t) in scores}
            missing = tuple(t for t in tasks if t not in per_task)
            macro = None if missing else math.fsum(per_task.values()) / len(per_task)
            entries.append(LeaderboardEntry(approach, corpus, per_task, macro, missing))
        entries.sort(key=lambda e: (e.macro_avg is None, -(e.macro_avg or 0.0), e.approach))
        board[corpus] = entries
    unknown = sorted({t for (_, t) in scores} - set(corpus_map))
    if unknown:
        log.warning("evaluations for tasks without a corpus ignored: %s", unknown)
    return board


def leaderboard_json(board: Mapping[str, Sequence[LeaderboardEntry]]) -> dict:
    return {corpus: [e.to_dict() for e in entries] for corpus, entries in sorted(board.items())}


def render_leaderboard(board: Mapping[str, Sequence[LeaderboardEntry]], measure: str = "nDCG@10") -> str:
    lines = []
    for corpus, entries in sorted(board.items()):
        tasks = sorted({t for e in entries for t in e.per_task} | {t for e in entries for t in e.missing_tasks})
        lines.append(f"{corpus}  ({measure}, macro-averaged over {len(tasks)} task(s))")
        width = max([len("approach")] + [len(e.approach) for e in entries])
        head = f"  {'approach':<{width}}  {'macro':>6}" + "".join(f"  {t[:12]:>12}" for t in tasks)
        lines.append(head)
        for e in entries:
            macro = "  n/a " if e.macro_avg is None else f"{e.macro_avg:6.3f}"
            cells = "".join(f"  {e.per_task[t]:12.3f}" if t in e.per_task else f"  {'-':>12}" for t in tasks)
            lines.append(f"  {e.approach:<{width}}  {macro}{cells}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- reproducibility


@dataclass(frozen=True)
class PreferencePair:
    baseline: str
    advanced: str
    origin_task: str


@dataclass(frozen=True)
class ReproResult:
    pair: PreferencePair
    target_task: str
    effect_ratio: float
    delta_relative_improvement: float | None


@dataclass(frozen=True)
class ReproReport:
    target_task: str
    success_rate: float
    quantiles: Mapping[str, Mapping[str, float | None]]
    pair_count: int
    results: tuple[ReproResult, ...] = ()
    excluded: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "pairs": self.pair_count,
            "quantiles": {m: {k: q[k] for k in ("25%", "50%", "75%")} for m, q in sorted(self.quantiles.items())},
            "excluded": list(self.excluded),
        }


def _paired(a: Mapping[str, float], b: Mapping[str, float], what: str) -> list[str]:
    topics = sorted(set(a) & set(b))
    if not topics:
        raise InvariantViolation(f"no common topics for {what}", invariant="non-empty topic set")
    if set(a) != set(b):
        log.warning("%s: %d topics not shared by both systems are ignored", what, len(set(a) ^ set(b)))
    return topics


def mean_improvement(baseline: Mapping[str, float], advanced: Mapping[str, float], what: str = "topics") -> float:
    """Mean over shared topics of advanced - baseline."""
    topics = _paired(baseline, advanced, what)
    return math.fsum(advanced[t] - baseline[t] for t in topics) / len(topics)


def effect_ratio(
    origin_baseline: Mapping[str, float],
    origin_advanced: Mapping[str, float],
    target_baseline: Mapping[str, float],
    target_advanced: Mapping[str, float],
) -> float:
    """Mean per-topic improvement on the target divided by that on the origin."""
    origin = mean_improvement(origin_baseline, origin_advanced, "origin task")
    if origin == 0:
        raise InvariantViolation("origin improvement is zero; no preference to reproduce", invariant="origin improvement > 0")
    return mean_improvement(target_baseline, target_advanced, "target task") / origin


def delta_relative_improvement(
    origin_baseline_mean: float, origin_advanced_mean: float, target_baseline_mean: float, target_advanced_mean: float
) -> float | None:
    """Origin relative improvement minus target relative improvement; None when a baseline mean is 0."""
    if origin_baseline_mean == 0 or target_baseline_mean == 0:
        return None
    ri_origin = (origin_advanced_mean - origin_baseline_mean) / origin_baseline_mean
    ri_target = (target_advanced_mean - target_baseline_mean) / target_baseline_mean
    return ri_origin - ri_target


def quantiles(values: Sequence[float], probs: Sequence[float] = QUANTILES) -> list[float | None]:
    """Linear interpolation between closest ranks (numpy's default method)."""
    if len(values) == 0:
        return [None for _ in probs]
    return [float(q) for q in np.quantile(np.asarray(values, dtype=float), probs, method="linear")]


def preference_pairs(origin_means: Mapping[str, float], origin_task: str) -> list[PreferencePair]:
    """Every pair with a strict preference on the origin; the lower-scoring approach is the baseline."""
    pairs = []
    for a, b in combinations(sorted(origin_means), 2):
        if origin_means[a] == origin_means[b]:
            continue
        base, adv = (a, b) if origin_means[a] < origin_means[b] else (b, a)
        pairs.append(PreferencePair(base, adv, origin_task))
    return pairs


def _mean(scores: Mapping[str, float]) -> float:
    return math.fsum(scores.values()) / len(scores)


def repro_report(
    pairs: Iterable[PreferencePair],
    origin_task: str,
    target_task: str,
    per_topic: Mapping[tuple[str, str], Mapping[str, float]],
) -> ReproReport:
    """Success rate (effect ratio > 0) and 25/50/75% quantiles of ER and delta RI on target_task.

    per_topic maps (approach, task) to that approach's per-topic scores.
    """
    results = []
    excluded = []
    for pair in pairs:
        needed = [(pair.baseline, origin_task), (pair.advanced, origin_task), (pair.baseline, target_task), (pair.advanced, target_task)]
        missing = [f"{a}@{t}" for a, t in needed if (a, t) not in per_topic or not per_topic[(a, t)]]
        if missing:
            excluded.append(f"{pair.baseline} < {pair.advanced}: missing {', '.join(missing)}")
            log.info("excluding pair %s/%s: missing %s", pair.baseline, pair.advanced, missing)
            continue
        ob, oa, tb, ta = (per_topic[k] for k in needed)
        er = effect_ratio(ob, oa, tb, ta)
        dri = delta_relative_improvement(_mean(ob), _mean(oa), _mean(tb), _mean(ta))
        results.append(ReproResult(pair, target_task, er, dri))
    ers = [r.effect_ratio for r in results]
    dris = [r.delta_relative_improvement for r in results if r.delta_relative_improvement is not None]
    success = 100.0 * sum(1 for v in ers if v > 0) / len(ers) if ers else 0.0
    labels = ("25%", "50%", "75%")
    q = {
        "effect_ratio": dict(zip(labels, quantiles(ers))),
        "delta_relative_improvement": dict(zip(labels, quantiles(dris))),
    }
    return ReproReport(target_task, success, q, len(results), tuple(results), tuple(excluded))


def repro_json(reports: Iterable[ReproReport], origin_task: str) -> dict:
    return {"origin_task": origin_task, "targets": {r.target_task: r.to_dict() for r in reports}}


def render_repro(reports: Sequence[ReproReport], origin_task: str) -> str:
    order = sorted(reports, key=lambda r: (-r.success_rate, r.target_task))
    fmt = lambda v: "   n/a" if v is None else f"{v:6.2f}"  # noqa: E731
    lines = [
        f"Reproducibility of {origin_task} system preferences",
        f"  {'target':<20} {'success%':>8}  {'ER 25%':>6} {'ER 50%':>6} {'ER 75%':>6}  {'dRI 25%':>7} {'dRI 50%':>7} {'dRI 75%':>7}",
    ]
    for r in order:
        er, dri = r.quantiles["effect_ratio"], r.quantiles["delta_relative_improvement"]
        lines.append(
            f"  {r.target_task:<20} {r.success_rate:8.1f}  {fmt(er['25%'])} {fmt(er['50%'])} {fmt(er['75%'])}"
            f"  {fmt(dri['25%']):>7} {fmt(dri['50%']):>7} {fmt(dri['75%']):>7}"
        )
    return "\n".join(lines) + "\n"
