"""Interchange files: documents, topics, re-rank, qrels and TREC run files.

JSON-lines files are UTF-8, optionally gzip-compressed, one record per line
with a fixed key order per record type.  Qrels and runs are whitespace
separated text; a single space is emitted between columns.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator, Mapping, Sequence, Union

from .errors import FormatError, IntegrityError, InvariantViolation

log = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"

Source = Union[bytes, bytearray, str, "os.PathLike[str]", IO[bytes]]


@dataclass(frozen=True)
class DocumentRecord:
    docno: str
    text: str
    original_document: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class TopicRecord:
    qid: str
    query: str
    original_topic: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RerankEntry:
    qid: str
    query: str
    original_topic: Mapping[str, Any]
    docno: str
    text: str
    original_document: Mapping[str, Any]
    score: float
    rank: int


@dataclass(frozen=True)
class Qrel:
    topic: str
    iteration: str
    docno: str
    relevance: int


@dataclass(frozen=True)
class RunLine:
    qid: str
    iteration: str
    docno: str
    rank: int
    score: float
    tag: str
    # Verbatim decimal text from the parsed file; re-emitted unchanged.
    score_text: str | None = field(default=None, compare=False, repr=False)

    def format_score(self) -> str:
        return self.score_text if self.score_text is not None else repr(float(self.score))


@dataclass(frozen=True)
class RunFile:
    lines: tuple[RunLine, ...]
    tag: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(self.lines))
        tags = {line.tag for line in self.lines}
        if len(tags) > 1:
            raise InvariantViolation(f"run mixes tags {sorted(tags)}", invariant="uniform tag")
        if tags and self.tag not in tags:
            raise InvariantViolation(
                f"run tag {self.tag!r} differs from line tag {next(iter(tags))!r}",
                invariant="uniform tag",
            )

    def __len__(self) -> int:
        return len(self.lines)

    @property
    def qids(self) -> list[str]:
        return list(dict.fromkeys(line.qid for line in self.lines))

    def by_query(self) -> dict[str, list[RunLine]]:
        grouped: dict[str, list[RunLine]] = defaultdict(list)
        for line in self.lines:
            grouped[line.qid].append(line)
        return dict(grouped)

    def ranking(self, qid: str) -> list[str]:
        """Docnos for one query in score order (descending, docno ascending on ties)."""
        lines = [line for line in self.lines if line.qid == qid]
        lines.sort(key=lambda line: (-line.score, line.docno))
        return [line.docno for line in lines]

    def rankings(self) -> dict[str, list[str]]:
        out = {}
        for qid, lines in self.by_query().items():
            lines = sorted(lines, key=lambda line: (-line.score, line.docno))
            out[qid] = [line.docno for line in lines]
        return out


# ---------------------------------------------------------------- reading


def read_source(source: Source, compressed: bool | None = None) -> bytes:
    """Bytes of a path, file object or bytes value; gzip is auto-detected when compressed is None."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    if compressed is None:
        compressed = data[:2] == GZIP_MAGIC
    if compressed:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"not a valid gzip stream: {exc}") from exc
    return data


def _text_lines(data: bytes) -> Iterator[tuple[int, str]]:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid UTF-8 at byte {exc.start}") from exc
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line.strip():
            yield lineno, line.rstrip("\r")


def _json_records(data: bytes) -> Iterator[tuple[int, dict]]:
    for lineno, line in _text_lines(data):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise FormatError("record is not a JSON object", line=lineno)
        yield lineno, obj


def _ident(obj: dict, key: str, lineno: int) -> str:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise FormatError(f"missing or invalid {key!r}", line=lineno)
    value = str(value)
    if not value:
        raise FormatError(f"empty {key!r}", line=lineno)
    return value


def _string(obj: dict, key: str, lineno: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise FormatError(f"missing or non-string {key!r}", line=lineno)
    return value


def _mapping(obj: dict, keys: Sequence[str], lineno: int) -> dict:
    for key in keys:
        if key in obj:
            value = obj[key]
            if not isinstance(value, dict):
                raise FormatError(f"{key!r} is not an object", line=lineno)
            return value
    return {}


def parse_documents(stream: Source, compressed: bool | None = None) -> list[DocumentRecord]:
    records: list[DocumentRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _json_records(read_source(stream, compressed)):
        docno = _ident(obj, "docno", lineno)
        if docno in seen:
            raise IntegrityError(
                f"duplicate docno {docno!r} (first seen on line {seen[docno]})",
                line=lineno,
                docno=docno,
            )
        seen[docno] = lineno
        records.append(
            DocumentRecord(docno, _string(obj, "text", lineno), _mapping(obj, ["original_document"], lineno))
        )
    return records


def parse_topics(stream: Source, compressed: bool | None = None) -> list[TopicRecord]:
    records: list[TopicRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _json_records(read_source(stream, compressed)):
        qid = _ident(obj, "qid", lineno)
        if qid in seen:
            raise IntegrityError(f"duplicate qid {qid!r}", line=lineno, qid=qid)
        seen[qid] = lineno
        original = _mapping(obj, ["original_topic", "original_query"], lineno)
        records.append(TopicRecord(qid, _string(obj, "query", lineno), original))
    return records


def parse_rerank(stream: Source, compressed: bool | None = None) -> list[RerankEntry]:
    entries: list[RerankEntry] = []
    seen: set[tuple[str, str]] = set()
    for lineno, obj in _json_records(read_source(stream, compressed)):
        qid = _ident(obj, "qid", lineno)
        docno = _ident(obj, "docno", lineno)
        if (qid, docno) in seen:
            raise IntegrityError(f"duplicate pair ({qid!r}, {docno!r})", line=lineno)
        seen.add((qid, docno))
        rank = obj.get("rank")
        if isinstance(rank, bool) or not isinstance(rank, int) or rank < 1:
            raise FormatError("rank must be an integer >= 1", line=lineno)
        score = obj.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
            raise FormatError("score must be a finite number", line=lineno)
        entries.append(
            RerankEntry(
                qid=qid,
                query=_string(obj, "query", lineno),
                original_topic=_mapping(obj, ["original_topic", "original_query"], lineno),
                docno=docno,
                text=_string(obj, "text", lineno),
                original_document=_mapping(obj, ["original_document"], lineno),
                score=float(score),
                rank=rank,
            )
        )
    try:
        _check_rerank_ordering(entries)
    except InvariantViolation as exc:
        raise IntegrityError(exc.message) from exc
    return entries


def parse_qrels(stream: Source) -> list[Qrel]:
    qrels: list[Qrel] = []
    seen: set[tuple[str, str]] = set()
    for lineno, line in _text_lines(read_source(stream, compressed=None)):
        cols = line.split()
        if len(cols) != 4:
            raise FormatError(f"expected 4 columns, got {len(cols)}", line=lineno)
        topic, iteration, docno, rel = cols
        try:
            relevance = int(rel)
        except ValueError:
            raise FormatError(f"non-integer relevance {rel!r}", line=lineno) from None
        if (topic, docno) in seen:
            raise IntegrityError(f"duplicate judgment ({topic!r}, {docno!r})", line=lineno)
        seen.add((topic, docno))
        if not 0 <= relevance <= 3:
            log.warning("qrels line %d: relevance %d outside 0..3", lineno, relevance)
        qrels.append(Qrel(topic, iteration, docno, relevance))
    return qrels


def parse_run(stream: Source, allow_empty: bool = False) -> RunFile:
    lines: list[RunLine] = []
    seen: set[tuple[str, str]] = set()
    tag: str | None = None
    for lineno, text in _text_lines(read_source(stream, compressed=None)):
        cols = text.split()
        if len(cols) != 6:
            raise FormatError(f"expected 6 columns, got {len(cols)}", line=lineno)
        qid, iteration, docno, rank_s, score_s, line_tag = cols
        try:
            rank = int(rank_s)
        except ValueError:
            raise FormatError(f"non-integer rank {rank_s!r}", line=lineno) from None
        if rank < 1:
            raise FormatError("rank must be >= 1", line=lineno)
        try:
            score = float(score_s)
        except ValueError:
            raise FormatError(f"non-numeric score {score_s!r}", line=lineno) from None
        if (qid, docno) in seen:
            raise IntegrityError(f"duplicate pair ({qid!r}, {docno!r})", line=lineno)
        seen.add((qid, docno))
        if tag is None:
            tag = line_tag
        elif line_tag != tag:
            raise IntegrityError(f"mixed tags {tag!r} and {line_tag!r}", line=lineno)
        lines.append(RunLine(qid, iteration, docno, rank, score, line_tag, score_text=score_s))
    if not lines and not allow_empty:
        raise FormatError("run file is empty")
    return RunFile(tuple(lines), tag or "")


def normalize_run_text(text: str) -> str:
    """Whitespace-normalized form of run or qrels text, as the serializers emit it."""
    rows = [" ".join(line.split()) for line in text.splitlines() if line.strip()]
    return "".join(row + "\n" for row in rows)


# ---------------------------------------------------------------- writing


def _jsonl(rows: Iterable[dict], compressed: bool) -> bytes:
    buf = io.StringIO()
    for row in rows:
        buf.write(json.dumps(row, ensure_ascii=False))
        buf.write("\n")
    data = buf.getvalue().encode("utf-8")
    # mtime=0 keeps compressed output byte-stable for hashing.
    return gzip.compress(data, mtime=0) if compressed else data


def _require(cond: bool, message: str, invariant: str) -> None:
    if not cond:
        raise InvariantViolation(message, invariant=invariant)


def _check_token(value: Any, name: str) -> None:
    _require(isinstance(value, str) and value != "", f"{name} must be a non-empty string", f"{name} non-empty")
    _require(len(value.split()) == 1 and value.strip() == value, f"{name} {value!r} contains whitespace", f"{name} is a single token")


def serialize_documents(records: Iterable[DocumentRecord], compressed: bool = True) -> bytes:
    seen: set[str] = set()
    rows = []
    for rec in records:
        _require(isinstance(rec.docno, str) and rec.docno != "", "docno must be non-empty", "docno non-empty")
        _require(rec.docno not in seen, f"duplicate docno {rec.docno!r}", "docno unique")
        _require(isinstance(rec.text, str), "text must be a string", "text present")
        seen.add(rec.docno)
        rows.append({"docno": rec.docno, "text": rec.text, "original_document": dict(rec.original_document)})
    return _jsonl(rows, compressed)


def serialize_topics(records: Iterable[TopicRecord], compressed: bool = True) -> bytes:
    seen: set[str] = set()
    rows = []
    for rec in records:
        _require(isinstance(rec.qid, str) and rec.qid != "", "qid must be non-empty", "qid non-empty")
        _require(rec.qid not in seen, f"duplicate qid {rec.qid!r}", "qid unique")
        _require(isinstance(rec.query, str), "query must be a string", "query present")
        seen.add(rec.qid)
        rows.append({"qid": rec.qid, "query": rec.query, "original_topic": dict(rec.original_topic)})
    return _jsonl(rows, compressed)


def _check_rerank_ordering(entries: Sequence[RerankEntry]) -> None:
    per_qid: dict[str, list[RerankEntry]] = defaultdict(list)
    for e in entries:
        per_qid[e.qid].append(e)
    for qid, group in per_qid.items():
        group = sorted(group, key=lambda e: e.rank)
        ranks = [e.rank for e in group]
        _require(ranks == list(range(1, len(group) + 1)), f"ranks for {qid!r} are not contiguous from 1", "ranks contiguous")
        for prev, cur in zip(group, group[1:]):
            _require(
                cur.score <= prev.score,
                f"score increases from rank {prev.rank} to {cur.rank} for {qid!r}",
                "scores non-increasing",
            )


def serialize_rerank(entries: Iterable[RerankEntry], compressed: bool = True) -> bytes:
    entries = list(entries)
    seen: set[tuple[str, str]] = set()
    rows = []
    for e in entries:
        _require(isinstance(e.rank, int) and not isinstance(e.rank, bool) and e.rank >= 1, "rank must be ≥ 1", "rank >= 1")
        _require(math.isfinite(e.score), "score must be finite", "score finite")
        _require(e.qid != "" and e.docno != "", "qid and docno must be non-empty", "ids non-empty")
        _require((e.qid, e.docno) not in seen, f"duplicate pair ({e.qid!r}, {e.docno!r})", "(qid, docno) unique")
        seen.add((e.qid, e.docno))
        rows.append(
            {
                "qid": e.qid,
                "query": e.query,
                "original_topic": dict(e.original_topic),
                "docno": e.docno,
                "text": e.text,
                "original_document": dict(e.original_document),
                "rank": e.rank,
                "score": e.score,
            }
        )
    _check_rerank_ordering(entries)
    return _jsonl(rows, compressed)


def serialize_qrels(qrels: Iterable[Qrel]) -> bytes:
    seen: set[tuple[str, str]] = set()
    out = []
    for q in qrels:
        for name in ("topic", "iteration", "docno"):
            _check_token(getattr(q, name), name)
        _require(isinstance(q.relevance, int) and not isinstance(q.relevance, bool), "relevance must be an integer", "integer relevance")
        _require((q.topic, q.docno) not in seen, f"duplicate judgment ({q.topic!r}, {q.docno!r})", "(topic, docno) unique")
        seen.add((q.topic, q.docno))
        out.append(f"{q.topic} {q.iteration} {q.docno} {q.relevance}\n")
    return "".join(out).encode("utf-8")


def serialize_run(run: RunFile) -> bytes:
    seen: set[tuple[str, str]] = set()
    out = []
    for line in run.lines:
        for name in ("qid", "iteration", "docno", "tag"):
            _check_token(getattr(line, name), name)
        _require(isinstance(line.rank, int) and line.rank >= 1, "rank must be ≥ 1", "rank >= 1")
        _require(line.tag == run.tag, f"line tag {line.tag!r} differs from run tag {run.tag!r}", "uniform tag")
        _require((line.qid, line.docno) not in seen, f"duplicate pair ({line.qid!r}, {line.docno!r})", "(qid, docno) unique")
        seen.add((line.qid, line.docno))
        out.append(f"{line.qid} {line.iteration} {line.docno} {line.rank} {line.format_score()} {line.tag}\n")
    return "".join(out).encode("utf-8")


def run_from_scores(scores: Mapping[str, Mapping[str, float]], tag: str, depth: int | None = None) -> RunFile:
    """Build a run from per-query score maps, ranking by score then docno."""
    lines = []
    for qid, docs in scores.items():
        ordered = sorted(docs.items(), key=lambda kv: (-kv[1], kv[0]))
        if depth is not None:
            ordered = ordered[:depth]
        for rank, (docno, score) in enumerate(ordered, start=1):
            lines.append(RunLine(qid, "Q0", docno, rank, float(score), tag))
    return RunFile(tuple(lines), tag)
