"""One store root wired together: hub, registry, executor, run records and analytics."""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import analytics, evaluator, formats
from .errors import InvariantViolation, NotFound
from .executor import ContainerBackend, ExecutionReport, ExecutionRequest, Executor, ResourceLimits, make_backend
from .hub import DatasetHub, Role
from .registry import NodeKind, Registry
from .store import CONFIG_NAME, atomic_write, default_store_root, pretty_json, sha256_file

log = logging.getLogger(__name__)

DEFAULT_MEASURES = ("nDCG@10",)
_APPROACH = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._@+-]*$")


@dataclass
class Config:
    container_backend: str = "mock"
    parallelism: int = 1
    default_role: str = Role.PARTICIPANT.value

    def __post_init__(self) -> None:
        if self.container_backend not in ("mock", "oci"):
            raise InvariantViolation(f"container_backend must be 'mock' or 'oci', not {self.container_backend!r}")
        if int(self.parallelism) < 1:
            raise InvariantViolation("parallelism must be >= 1", invariant="parallelism >= 1")
        Role(self.default_role)

    @classmethod
    def load(cls, root: Path) -> "Config":
        path = root / CONFIG_NAME
        if not path.is_file():
            return cls()
        data = json.loads(path.read_text())
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def save(self, root: Path) -> None:
        atomic_write(root / CONFIG_NAME, pretty_json(asdict(self)))


@dataclass(frozen=True)
class RunRecord:
    approach: str
    dataset_id: str
    path: Path
    provenance: dict
    evaluation: dict | None = field(default=None, compare=False)

    @property
    def run_path(self) -> Path:
        return self.path / "run.txt"


class Platform:
    def __init__(
        self,
        root: str | os.PathLike | None = None,
        backend: ContainerBackend | str | None = None,
        parallelism: int | None = None,
    ) -> None:
        self.root = Path(root).resolve() if root is not None else default_store_root()
        self.config = Config.load(self.root)
        if isinstance(backend, str) or backend is None:
            backend = make_backend(backend or self.config.container_backend, self.root)
        self.backend = backend
        self.hub = DatasetHub(self.root)
        self.registry = Registry(self.root, in_use=self._in_use)
        self.executor = Executor(self.root, self.hub, self.registry, backend, parallelism or self.config.parallelism)
        self.runs_dir = self.root / "runs"

    def _in_use(self, ref) -> list[str]:
        return self.executor.in_use(ref)

    # ---- pipelines

    def run_pipeline(
        self,
        terminal: str,
        dataset_id: str,
        approach: str | None = None,
        limits: ResourceLimits | None = None,
        rerank_depth: int = 100,
        lenient: bool = False,
        use_cache: bool = True,
        measures: Sequence[str] = DEFAULT_MEASURES,
        record: bool = True,
    ) -> tuple[ExecutionReport, RunRecord | None]:
        pipeline = self.registry.resolve_pipeline(terminal)
        request = ExecutionRequest(pipeline, dataset_id, limits or ResourceLimits(), rerank_depth, lenient, use_cache)
        report = self.executor.execute(request)
        term = pipeline.resolved_dag[-1]
        if not (record and report.ok and (report.terminal.output_path / "run.txt").is_file()):
            return report, None
        rec = self.record_run(approach or term.ref.node_id, dataset_id, report, rerank_depth, measures)
        return report, rec

    def record_run(
        self, approach: str, dataset_id: str, report: ExecutionReport, rerank_depth: int, measures: Sequence[str] = DEFAULT_MEASURES
    ) -> RunRecord:
        if not _APPROACH.match(approach):
            raise InvariantViolation(f"invalid approach name {approach!r}", invariant="approach name")
        entry = report.terminal
        target = self.runs_dir / approach / dataset_id
        target.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(entry.output_path / "run.txt", target / "run.txt")
        prov = {
            "approach": approach,
            "dataset": dataset_id,
            "terminal": entry.provenance["node"]["ref"],
            "cache_key": entry.key,
            "output_digest": entry.output_digest,
            "run_sha256": sha256_file(target / "run.txt"),
            "rerank_depth": rerank_depth,
            "pipeline": [{"node": n.node, "kind": n.kind, "key": n.key, "output_digest": n.output_digest} for n in report.nodes],
            "terminal_provenance": {k: v for k, v in entry.provenance.items() if k not in ("constituents",)},
        }
        atomic_write(target / "provenance.json", pretty_json(prov))
        for stale in ("evaluation.json", "sanity.json"):
            (target / stale).unlink(missing_ok=True)
        ds = self.hub.get(dataset_id)
        evaluation = None
        if ds.qrels_path is not None:
            run = formats.parse_run(target / "run.txt")
            result = evaluator.evaluate(run, self.hub.qrels(dataset_id), measures, self.hub.topics(dataset_id).values())
            evaluation = result.to_dict()
            atomic_write(target / "evaluation.json", pretty_json(evaluation))
            atomic_write(target / "sanity.json", pretty_json(result.sanity.to_dict()))
        return RunRecord(approach, dataset_id, target, prov, evaluation)

    # ---- evaluation

    def evaluate_run(self, source: formats.Source, dataset_id: str, measures: Sequence[str] = DEFAULT_MEASURES) -> evaluator.Evaluation:
        """Sanity-check and evaluate a run against a registered dataset; read-only."""
        topics = self.hub.topics(dataset_id).values()
        qrels = self.hub.qrels(dataset_id)
        run, report = evaluator.check_run_file(source, topics, qrels)
        if run is None:
            raise evaluator.EvaluationRefused("run file does not parse", sanity=report.to_dict())
        return evaluator.evaluate(run, qrels, measures, topics)

    def run_records(self) -> list[RunRecord]:
        records = []
        if not self.runs_dir.is_dir():
            return records
        for prov_path in sorted(self.runs_dir.glob("*/*/provenance.json")):
            d = prov_path.parent
            ev = d / "evaluation.json"
            records.append(
                RunRecord(
                    d.parent.name,
                    d.name,
                    d,
                    json.loads(prov_path.read_text()),
                    json.loads(ev.read_text()) if ev.is_file() else None,
                )
            )
        return records

    def run_record(self, approach: str, dataset_id: str) -> RunRecord:
        for rec in self.run_records():
            if rec.approach == approach and rec.dataset_id == dataset_id:
                return rec
        raise NotFound(f"no run of {approach!r} on {dataset_id!r}", approach=approach, dataset=dataset_id)

    # ---- analytics

    def _per_topic(self, measure: str) -> dict[tuple[str, str], dict[str, float]]:
        m = str(evaluator.Measure.parse(measure))
        out = {}
        for rec in self.run_records():
            if rec.evaluation and m in rec.evaluation:
                out[(rec.approach, rec.dataset_id)] = rec.evaluation[m]["per_query"]
        return out

    def leaderboard(self, measure: str = "nDCG@10", datasets: Iterable[str] | None = None) -> dict[str, list[analytics.LeaderboardEntry]]:
        m = str(evaluator.Measure.parse(measure))
        wanted = set(datasets) if datasets is not None else None
        corpus_map = {ds.dataset_id: ds.corpus for ds in self.hub.list() if wanted is None or ds.dataset_id in wanted}
        evaluations = [
            (rec.approach, rec.dataset_id, rec.evaluation[m]["mean"])
            for rec in self.run_records()
            if rec.evaluation and m in rec.evaluation and rec.dataset_id in corpus_map
        ]
        return analytics.build_leaderboard(evaluations, corpus_map)

    def repro(self, origin: str, targets: Sequence[str], measure: str = "nDCG@10") -> list[analytics.ReproReport]:
        per_topic = self._per_topic(measure)
        origin_means = {a: sum(s.values()) / len(s) for (a, t), s in per_topic.items() if t == origin and s}
        if not origin_means:
            raise NotFound(f"no evaluated runs on origin task {origin!r}", task=origin)
        pairs = analytics.preference_pairs(origin_means, origin)
        return [analytics.repro_report(pairs, origin, target, per_topic) for target in targets]


def init_store(root: str | os.PathLike, config: Config | None = None) -> Platform:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (config or Config()).save(root)
    return Platform(root)


def node_kinds() -> list[str]:
    return [k.value for k in NodeKind if k is not NodeKind.UPLOAD]
