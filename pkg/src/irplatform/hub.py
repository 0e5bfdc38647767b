"""Dataset hub: registration, default_text, re-rank files and access control."""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from filelock import FileLock

from . import formats
from .errors import AccessDenied, Conflict, DataWithheld, FormatError, IntegrityMismatch, InvariantViolation, NotFound
from .formats import DocumentRecord, Qrel, RerankEntry, RunFile, TopicRecord
from .store import atomic_write, make_readonly, pretty_json, sha256_bytes, sha256_file

log = logging.getLogger(__name__)

DOCUMENTS = "documents.jsonl.gz"
TOPICS = "topics.jsonl.gz"
QRELS = "qrels.txt"
RERANK = "re-rank.jsonl.gz"
META = "meta.json"
DEFAULT_RERANK_DEPTH = 100


class Resource(str, Enum):
    DOCUMENTS = "documents"
    TOPICS = "topics"
    RERANK = "rerank"
    QRELS = "qrels"


class Role(str, Enum):
    PARTICIPANT = "participant"
    ORGANIZER = "organizer"
    UNREGISTERED = "unregistered"


# Default access per (resource, role): "yes" is open, "dagger" is closed but
# an organizer grant can open it.  Organizers always have access.
DEFAULT_ACCESS: dict[tuple[Resource, Role], str] = {
    (Resource.DOCUMENTS, Role.PARTICIPANT): "yes",
    (Resource.DOCUMENTS, Role.ORGANIZER): "yes",
    (Resource.DOCUMENTS, Role.UNREGISTERED): "dagger",
    (Resource.TOPICS, Role.PARTICIPANT): "yes",
    (Resource.TOPICS, Role.ORGANIZER): "yes",
    (Resource.TOPICS, Role.UNREGISTERED): "dagger",
    (Resource.RERANK, Role.PARTICIPANT): "yes",
    (Resource.RERANK, Role.ORGANIZER): "yes",
    (Resource.RERANK, Role.UNREGISTERED): "dagger",
    (Resource.QRELS, Role.PARTICIPANT): "dagger",
    (Resource.QRELS, Role.ORGANIZER): "yes",
    (Resource.QRELS, Role.UNREGISTERED): "dagger",
}


@dataclass(frozen=True)
class DefaultTextRule:
    source_fields: tuple[str, ...]
    joiner: str = " "

    def __post_init__(self) -> None:
        object.__setattr__(self, "source_fields", tuple(self.source_fields))
        if not self.source_fields:
            raise InvariantViolation("default_text rule needs at least one source field", invariant="non-empty rule")

    def to_dict(self) -> dict:
        return {"source_fields": list(self.source_fields), "joiner": self.joiner}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DefaultTextRule":
        return cls(tuple(d["source_fields"]), d.get("joiner", " "))

    @classmethod
    def parse(cls, spec: str) -> "DefaultTextRule":
        """Parse the CLI form ``title,abstract``."""
        return cls(tuple(f.strip() for f in spec.split(",") if f.strip()))


@dataclass(frozen=True)
class AccessGrant:
    dataset_id: str
    resource: Resource
    role: Role
    granted: bool = True


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    resource: Resource
    role: Role
    liftable: bool = False
    sandbox_only: bool = False
    reason: str = ""


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    root: Path
    confidential: bool
    corpus: str
    digests: Mapping[str, str | None]
    default_text_rules: Mapping[str, DefaultTextRule] = field(default_factory=dict)
    withheld: bool = False

    @property
    def documents_path(self) -> Path:
        return self.root / DOCUMENTS

    @property
    def topics_path(self) -> Path:
        return self.root / TOPICS

    @property
    def qrels_path(self) -> Path | None:
        return self.root / QRELS if self.digests.get("qrels") else None

    @property
    def full_rank_dir(self) -> Path:
        return self.root / "full-rank"

    @property
    def rerank_dir(self) -> Path:
        return self.root / "rerank"

    @property
    def content_digest(self) -> str:
        """Digest over the files a retrieval component can see (documents and topics)."""
        return sha256_bytes(f"{self.digests['documents']}:{self.digests['topics']}".encode())

    def meta(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "confidential": self.confidential,
            "corpus": self.corpus,
            "digests": dict(self.digests),
            "default_text_rules": {k: r.to_dict() for k, r in sorted(self.default_text_rules.items())},
            "withheld": self.withheld,
        }


def resolve_default_text(raw: Mapping[str, Any], rule: DefaultTextRule) -> str:
    """Join the rule's source fields that are present in raw; missing fields are skipped."""
    parts = []
    for name in rule.source_fields:
        value = raw.get(name)
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = rule.joiner.join(str(v) for v in value)
        parts.append(str(value))
    if not parts:
        log.warning("none of the default_text fields %s present", list(rule.source_fields))
        return ""
    return rule.joiner.join(parts)


def decide_access(resource: Resource | str, role: Role | str, confidential: bool, granted: bool = False) -> AccessDecision:
    """Pure access decision for one (resource, role) cell."""
    resource, role = Resource(resource), Role(role)
    if role is Role.ORGANIZER:
        return AccessDecision(True, resource, role, reason="organizer")
    cell = DEFAULT_ACCESS[(resource, role)]
    if cell == "yes" and confidential:
        # Blind dataset: software may read it inside the sandbox, the user may not download it.
        cell = "sandbox"
    if cell == "yes":
        return AccessDecision(True, resource, role, reason="default")
    if granted:
        return AccessDecision(True, resource, role, reason="organizer grant")
    return AccessDecision(
        False,
        resource,
        role,
        liftable=True,
        sandbox_only=cell == "sandbox",
        reason="confidential dataset: sandbox-only" if cell == "sandbox" else "not accessible by default",
    )


def is_grantable(resource: Resource | str, role: Role | str, confidential: bool) -> bool:
    return not decide_access(resource, role, confidential).allowed


def fetch(dataset: Dataset, resource: Resource | str, role: Role | str, grants: Iterable[AccessGrant] = ()) -> Path:
    """File reference for resource, or AccessDenied carrying role, resource and liftability."""
    resource, role = Resource(resource), Role(role)
    granted = any(
        g.granted and g.dataset_id == dataset.dataset_id and Resource(g.resource) is resource and Role(g.role) is role
        for g in grants
    )
    decision = decide_access(resource, role, dataset.confidential, granted)
    if not decision.allowed:
        raise AccessDenied(
            f"{role.value} may not fetch {resource.value} of {dataset.dataset_id!r} ({decision.reason})",
            role=role.value,
            resource=resource.value,
            dataset=dataset.dataset_id,
            liftable_by_organizer=decision.liftable,
            sandbox_only=decision.sandbox_only,
        )
    if dataset.withheld and resource is not Resource.RERANK:
        raise DataWithheld(f"content of {dataset.dataset_id!r} is withheld in this store", dataset=dataset.dataset_id)
    if resource is Resource.DOCUMENTS:
        return dataset.documents_path
    if resource is Resource.TOPICS:
        return dataset.topics_path
    if resource is Resource.QRELS:
        if dataset.qrels_path is None:
            raise NotFound(f"dataset {dataset.dataset_id!r} has no qrels", dataset=dataset.dataset_id)
        return dataset.qrels_path
    return dataset.rerank_dir


def build_rerank_entries(
    documents: Mapping[str, DocumentRecord],
    topics: Mapping[str, TopicRecord],
    run: RunFile,
    depth: int = DEFAULT_RERANK_DEPTH,
    lenient: bool = False,
) -> list[RerankEntry]:
    """Join a run's top-depth lines per query with topic and document records."""
    if depth < 1:
        raise InvariantViolation("re-rank depth must be >= 1", invariant="depth >= 1")
    entries: list[RerankEntry] = []
    for qid, lines in run.by_query().items():
        topic = topics.get(qid)
        if topic is None:
            if not lenient:
                raise NotFound(f"run query {qid!r} is not in the topics", qid=qid)
            log.warning("skipping unknown query %r", qid)
            continue
        lines = sorted(lines, key=lambda line: (-line.score, line.docno))
        rank = 0
        for line in lines:
            if rank >= depth:
                break
            doc = documents.get(line.docno)
            if doc is None:
                if not lenient:
                    raise NotFound(f"run document {line.docno!r} (query {qid!r}) is not in the corpus", docno=line.docno, qid=qid)
                log.warning("skipping unknown document %r for query %r", line.docno, qid)
                continue
            rank += 1
            entries.append(
                RerankEntry(
                    qid=qid,
                    query=topic.query,
                    original_topic=topic.original_topic,
                    docno=doc.docno,
                    text=doc.text,
                    original_document=doc.original_document,
                    score=float(line.score),
                    rank=rank,
                )
            )
    return entries


def _raw_jsonl(path: Path) -> list[dict]:
    data = formats.read_source(path)
    rows = []
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path.name}: malformed JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise FormatError(f"{path.name}: record is not an object", line=lineno)
        rows.append(obj)
    return rows


def _apply_rule(rows: list[dict], id_key: str, text_key: str, original_keys: tuple[str, ...], rule: DefaultTextRule | None) -> list[dict]:
    if rule is None:
        return rows
    out = []
    for row in rows:
        raw = next((row[k] for k in original_keys if isinstance(row.get(k), dict)), None)
        if raw is None:
            # Flat source record: its own fields become the original record.
            raw = {k: v for k, v in row.items() if k not in (id_key, text_key)}
            row = {id_key: row.get(id_key), original_keys[0]: raw}
        out.append({**row, text_key: resolve_default_text(raw, rule)})
    return out


class DatasetHub:
    """Datasets stored under ``<root>/datasets/<id>/``; immutable after registration."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.datasets_dir = self.root / "datasets"
        self.locks_dir = self.root / "locks"
        self._cache: dict[str, tuple[dict, dict]] = {}
        self._mutex = threading.Lock()

    def _lock(self, name: str) -> FileLock:
        self.locks_dir.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.locks_dir / f"{name}.lock"))

    def register_dataset(
        self,
        dataset_id: str,
        documents: str | os.PathLike,
        topics: str | os.PathLike,
        qrels: str | os.PathLike | None = None,
        confidential: bool = False,
        rules: Mapping[str, DefaultTextRule] | None = None,
        corpus: str | None = None,
    ) -> Dataset:
        if not dataset_id or "/" in dataset_id or dataset_id.startswith("."):
            raise InvariantViolation(f"invalid dataset id {dataset_id!r}", invariant="dataset id")
        if (self.datasets_dir / dataset_id).exists():
            raise Conflict(f"dataset {dataset_id!r} is already registered", dataset=dataset_id)
        rules = dict(rules or {})
        unknown = set(rules) - {"documents", "topics"}
        if unknown:
            raise InvariantViolation(f"rules target unknown files {sorted(unknown)}", invariant="rule target")
        doc_rows = _apply_rule(_raw_jsonl(Path(documents)), "docno", "text", ("original_document",), rules.get("documents"))
        topic_rows = _apply_rule(_raw_jsonl(Path(topics)), "qid", "query", ("original_topic", "original_query"), rules.get("topics"))
        docs = formats.parse_documents(formats._jsonl(doc_rows, compressed=False))
        tops = formats.parse_topics(formats._jsonl(topic_rows, compressed=False))
        files = {
            DOCUMENTS: formats.serialize_documents(docs),
            TOPICS: formats.serialize_topics(tops),
        }
        if qrels is not None:
            files[QRELS] = formats.serialize_qrels(formats.parse_qrels(qrels))
        digests = {
            "documents": sha256_bytes(files[DOCUMENTS]),
            "topics": sha256_bytes(files[TOPICS]),
            "qrels": sha256_bytes(files[QRELS]) if QRELS in files else None,
        }
        return self._install(dataset_id, files, digests, confidential, rules, corpus or dataset_id, withheld=False)

    def _install(
        self,
        dataset_id: str,
        files: Mapping[str, bytes],
        digests: Mapping[str, str | None],
        confidential: bool,
        rules: Mapping[str, DefaultTextRule],
        corpus: str,
        withheld: bool,
    ) -> Dataset:
        target = self.datasets_dir / dataset_id
        with self._lock(f"dataset-{dataset_id}"):
            if target.exists():
                raise Conflict(f"dataset {dataset_id!r} is already registered", dataset=dataset_id)
            staging = self.datasets_dir / f".{dataset_id}.staging"
            if staging.exists():
                shutil.rmtree(staging)
            staging.mkdir(parents=True)
            for name, data in files.items():
                (staging / name).write_bytes(data)
            if not withheld:
                full = staging / "full-rank"
                full.mkdir()
                for name in (DOCUMENTS, TOPICS):
                    os.link(staging / name, full / name)
            ds = Dataset(dataset_id, target, confidential, corpus, dict(digests), dict(rules), withheld)
            (staging / META).write_text(pretty_json(ds.meta()))
            for name in list(files) + [META]:
                (staging / name).chmod(0o444)
            os.rename(staging, target)
            (target / "rerank").mkdir()
            atomic_write(target / "grants.json", pretty_json([]))
        log.info("registered dataset %s", dataset_id)
        return ds

    def install_withheld(self, meta: Mapping[str, Any], files: Mapping[str, bytes]) -> Dataset:
        """Register a dataset from archived metadata; files may be absent when withheld."""
        rules = {k: DefaultTextRule.from_dict(v) for k, v in meta.get("default_text_rules", {}).items()}
        withheld = DOCUMENTS not in files or TOPICS not in files
        return self._install(
            meta["dataset_id"], files, meta["digests"], meta["confidential"], rules, meta.get("corpus", meta["dataset_id"]), withheld
        )

    def get(self, dataset_id: str) -> Dataset:
        meta_path = self.datasets_dir / dataset_id / META
        if not dataset_id or "/" in dataset_id or not meta_path.is_file():
            raise NotFound(f"dataset {dataset_id!r} is not registered", dataset=dataset_id)
        meta = json.loads(meta_path.read_text())
        rules = {k: DefaultTextRule.from_dict(v) for k, v in meta.get("default_text_rules", {}).items()}
        return Dataset(
            meta["dataset_id"],
            meta_path.parent,
            meta["confidential"],
            meta.get("corpus", dataset_id),
            meta["digests"],
            rules,
            meta.get("withheld", False),
        )

    def list(self) -> list[Dataset]:
        if not self.datasets_dir.is_dir():
            return []
        return [self.get(p.name) for p in sorted(self.datasets_dir.iterdir()) if (p / META).is_file()]

    def verify(self, dataset_id: str) -> None:
        """Raise IntegrityMismatch if a stored file no longer matches its digest."""
        ds = self.get(dataset_id)
        for key, name in (("documents", DOCUMENTS), ("topics", TOPICS), ("qrels", QRELS)):
            expected = ds.digests.get(key)
            path = ds.root / name
            if expected and path.exists() and sha256_file(path) != expected:
                raise IntegrityMismatch(f"{dataset_id}/{name} was modified after registration", file=str(path))

    # ---- grants

    def grants(self, dataset_id: str) -> list[AccessGrant]:
        self.get(dataset_id)
        path = self.datasets_dir / dataset_id / "grants.json"
        if not path.exists():
            return []
        return [
            AccessGrant(g["dataset_id"], Resource(g["resource"]), Role(g["role"]), g["granted"])
            for g in json.loads(path.read_text())
        ]

    def grant(
        self,
        dataset_id: str,
        resource: Resource | str,
        role: Role | str,
        granted: bool = True,
        actor: Role | str = Role.ORGANIZER,
    ) -> AccessGrant:
        resource, role, actor = Resource(resource), Role(role), Role(actor)
        if actor is not Role.ORGANIZER:
            raise AccessDenied("only organizers may change access grants", role=actor.value, resource=resource.value)
        ds = self.get(dataset_id)
        if not is_grantable(resource, role, ds.confidential):
            raise InvariantViolation(
                f"{resource.value} for {role.value} is open by default; nothing to grant",
                invariant="only dagger cells are grantable",
            )
        with self._lock(f"grants-{dataset_id}"):
            current = [g for g in self.grants(dataset_id) if not (g.resource is resource and g.role is role)]
            new = AccessGrant(dataset_id, resource, role, granted)
            if granted:
                current.append(new)
            rows = [
                {"dataset_id": g.dataset_id, "resource": g.resource.value, "role": g.role.value, "granted": g.granted}
                for g in sorted(current, key=lambda g: (g.resource.value, g.role.value))
            ]
            atomic_write(self.datasets_dir / dataset_id / "grants.json", pretty_json(rows))
        return new

    def fetch(self, dataset_id: str, resource: Resource | str, role: Role | str) -> Path:
        return fetch(self.get(dataset_id), resource, role, self.grants(dataset_id))

    # ---- content (executor/evaluator side; no role checks)

    def _content(self, ds: Dataset) -> tuple[dict[str, DocumentRecord], dict[str, TopicRecord]]:
        if ds.withheld:
            raise DataWithheld(f"data withheld: content of {ds.dataset_id!r} is not in this store", dataset=ds.dataset_id)
        with self._mutex:
            hit = self._cache.get(ds.dataset_id)
            if hit is None:
                docs = {d.docno: d for d in formats.parse_documents(ds.documents_path)}
                tops = {t.qid: t for t in formats.parse_topics(ds.topics_path)}
                hit = self._cache[ds.dataset_id] = (docs, tops)
        return hit

    def documents(self, dataset_id: str) -> dict[str, DocumentRecord]:
        return self._content(self.get(dataset_id))[0]

    def topics(self, dataset_id: str) -> dict[str, TopicRecord]:
        return self._content(self.get(dataset_id))[1]

    def qrels(self, dataset_id: str) -> list[Qrel]:
        ds = self.get(dataset_id)
        if ds.qrels_path is None:
            raise NotFound(f"dataset {dataset_id!r} has no qrels", dataset=dataset_id)
        if not ds.qrels_path.exists():
            raise DataWithheld(f"data withheld: qrels of {dataset_id!r} are not in this store", dataset=dataset_id)
        return formats.parse_qrels(ds.qrels_path)

    def full_rank_input(self, dataset_id: str) -> Path:
        ds = self.get(dataset_id)
        if ds.withheld:
            raise DataWithheld(f"data withheld: content of {dataset_id!r} is not in this store", dataset=dataset_id)
        return ds.full_rank_dir

    def build_rerank_file(
        self, dataset_id: str, run: RunFile, depth: int = DEFAULT_RERANK_DEPTH, lenient: bool = False
    ) -> Path:
        """Write a re-rank file for run into the dataset's content-addressed re-rank area; return its directory."""
        ds = self.get(dataset_id)
        docs, tops = self._content(ds)
        data = formats.serialize_rerank(build_rerank_entries(docs, tops, run, depth, lenient))
        digest = sha256_bytes(data)
        target = ds.rerank_dir / digest
        with self._lock(f"rerank-{digest}"):
            if not (target / RERANK).exists():
                staging = ds.rerank_dir / f".{digest}.staging"
                shutil.rmtree(staging, ignore_errors=True)
                staging.mkdir(parents=True)
                (staging / RERANK).write_bytes(data)
                make_readonly(staging)
                os.rename(staging, target)
        return target


def dataset_files_digest(ds: Dataset) -> str:
    """Digest of the immutable dataset files (meta, documents, topics, qrels)."""
    parts = []
    for name in (META, DOCUMENTS, TOPICS, QRELS):
        p = ds.root / name
        parts.append(f"{name}:{sha256_file(p) if p.exists() else '-'}")
    return sha256_bytes("\n".join(parts).encode())

