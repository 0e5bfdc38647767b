import gzip
import json
import math

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from irplatform import formats
from irplatform.errors import FormatError, IntegrityError, InvariantViolation
from irplatform.formats import DocumentRecord, Qrel, RerankEntry, RunFile, RunLine, TopicRecord

ROUND_TRIPS = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])

token = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF, blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc")), min_size=1, max_size=8)
free_text = st.text(max_size=40)
json_scalar = st.one_of(st.none(), st.booleans(), st.integers(-10**6, 10**6), free_text)
original = st.dictionaries(st.text(min_size=1, max_size=6), st.one_of(json_scalar, st.lists(json_scalar, max_size=3)), max_size=4)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def documents(draw):
    ids = draw(st.lists(token, unique=True, max_size=8))
    return [DocumentRecord(i, draw(free_text), draw(original)) for i in ids]


@st.composite
def topics(draw):
    ids = draw(st.lists(token, unique=True, max_size=8))
    return [TopicRecord(i, draw(free_text), draw(original)) for i in ids]


@st.composite
def rerank_entries(draw):
    entries = []
    for qid in draw(st.lists(token, unique=True, max_size=3)):
        query, topic = draw(free_text), draw(original)
        docnos = draw(st.lists(token, unique=True, max_size=5))
        scores = sorted(draw(st.lists(finite, min_size=len(docnos), max_size=len(docnos))), reverse=True)
        for rank, (docno, score) in enumerate(zip(docnos, scores), start=1):
            entries.append(RerankEntry(qid, query, topic, docno, draw(free_text), draw(original), score, rank))
    return entries


@st.composite
def qrels(draw):
    pairs = draw(st.lists(st.tuples(token, token), unique=True, max_size=10))
    return [Qrel(t, draw(st.sampled_from(["0", "Q0"])), d, draw(st.integers(-1, 4))) for t, d in pairs]


@st.composite
def runs(draw):
    tag = draw(token)
    pairs = draw(st.lists(st.tuples(token, token), unique=True, min_size=1, max_size=10))
    lines = []
    for i, (q, d) in enumerate(pairs):
        score = draw(finite)
        text = draw(st.sampled_from([None, repr(score), f"{score:.6f}"])) if math.isfinite(score) else None
        lines.append(RunLine(q, "Q0", d, draw(st.integers(1, 1000)), float(text) if text else score, tag, score_text=text))
    return RunFile(tuple(lines), tag)


@ROUND_TRIPS
@given(documents(), st.booleans())
def test_documents_round_trip(records, compressed):
    data = formats.serialize_documents(records, compressed=compressed)
    assert formats.parse_documents(data) == records
    assert formats.serialize_documents(formats.parse_documents(data), compressed=compressed) == data


@ROUND_TRIPS
@given(topics(), st.booleans())
def test_topics_round_trip(records, compressed):
    data = formats.serialize_topics(records, compressed=compressed)
    assert formats.parse_topics(data) == records
    assert formats.serialize_topics(formats.parse_topics(data), compressed=compressed) == data


@ROUND_TRIPS
@given(rerank_entries())
def test_rerank_round_trip(entries):
    data = formats.serialize_rerank(entries)
    assert formats.parse_rerank(data) == entries
    assert formats.serialize_rerank(formats.parse_rerank(data)) == data


@ROUND_TRIPS
@given(qrels())
def test_qrels_round_trip(records):
    data = formats.serialize_qrels(records)
    assert formats.parse_qrels(data) == records
    assert formats.serialize_qrels(formats.parse_qrels(data)) == data


@ROUND_TRIPS
@given(runs())
def test_run_round_trip(run):
    data = formats.serialize_run(run)
    parsed = formats.parse_run(data)
    assert parsed == run
    assert parsed.tag == run.tag
    assert formats.serialize_run(parsed) == data


# Field values shown for the three example rows of the interchange table.
DOC_ROW = '{"docno": "8182161", "text": "Goldfish can grow up to 18 inches", "original_document": {}}'
TOPIC_ROW = '{"qid": "156493", "query": "do goldfish grow", "original_query": {}}'
RERANK_ROW = (
    '{"qid": "156493", "query": "do goldfish grow", "original_query": {}, "docno": 8182161, '
    '"text": "Goldfish can grow up to 18 inches", "original_document": {}, "rank": 1, "score": 31.16}'
)
QRELS_ROW = "156493 Q0 8182161 2\n"


def test_table_rows_parse_to_exact_values():
    (doc,) = formats.parse_documents(gzip.compress(DOC_ROW.encode()))
    assert (doc.docno, doc.text, dict(doc.original_document)) == ("8182161", "Goldfish can grow up to 18 inches", {})
    (topic,) = formats.parse_topics(TOPIC_ROW.encode())
    assert (topic.qid, topic.query, dict(topic.original_topic)) == ("156493", "do goldfish grow", {})
    (entry,) = formats.parse_rerank(RERANK_ROW.encode())
    assert entry.qid == "156493" and entry.query == "do goldfish grow"
    assert entry.docno == "8182161"  # integer docno is coerced to the string identifier
    assert entry.text == "Goldfish can grow up to 18 inches"
    assert entry.rank == 1 and entry.score == 31.16
    (q,) = formats.parse_qrels(QRELS_ROW.encode())
    assert q == Qrel("156493", "Q0", "8182161", 2)


def test_original_query_alias_serializes_as_original_topic():
    (topic,) = formats.parse_topics(b'{"qid": "1", "query": "x", "original_query": {"title": "x"}}')
    out = json.loads(formats.serialize_topics([topic], compressed=False))
    assert out == {"qid": "1", "query": "x", "original_topic": {"title": "x"}}


def test_gzip_output_is_byte_stable():
    recs = [DocumentRecord("a", "b")]
    assert formats.serialize_documents(recs) == formats.serialize_documents(recs)
    assert formats.serialize_documents(recs)[:2] == formats.GZIP_MAGIC


def test_run_score_text_is_kept_verbatim():
    text = b"q1 Q0 d1 1 31.160000 tag\nq1 Q0 d2 2 1e-3 tag\n"
    assert formats.serialize_run(formats.parse_run(text)) == text


@pytest.mark.parametrize(
    "text, error, fragment",
    [
        (b"q1 Q0 d1 1 2.0\n", FormatError, "line 1: expected 6 columns"),
        (b"q1 Q0 d1 x 2.0 t\n", FormatError, "non-integer rank"),
        (b"q1 Q0 d1 0 2.0 t\n", FormatError, "rank must be >= 1"),
        (b"q1 Q0 d1 1 abc t\n", FormatError, "non-numeric score"),
        (b"q1 Q0 d1 1 2 t\nq1 Q0 d1 2 1 t\n", IntegrityError, "line 2: duplicate pair"),
        (b"q1 Q0 d1 1 2 a\nq1 Q0 d2 2 1 b\n", IntegrityError, "mixed tags"),
        (b"", FormatError, "empty"),
    ],
)
def test_run_parse_errors(text, error, fragment):
    with pytest.raises(error, match=fragment):
        formats.parse_run(text)


def test_nan_score_parses_so_sanity_checks_can_report_it():
    run = formats.parse_run(b"q1 Q0 d1 1 nan t\n")
    assert math.isnan(run.lines[0].score)


@pytest.mark.parametrize(
    "text, fragment",
    [
        (b'{"docno": "a", "text": "x"}\n{"docno": "a", "text": "y"}\n', "line 2: duplicate docno"),
        (b'{"text": "x"}\n', "missing or invalid 'docno'"),
        (b'{"docno": "a"}\n', "non-string 'text'"),
        (b"{not json\n", "malformed JSON"),
        (b"[1, 2]\n", "not a JSON object"),
    ],
)
def test_document_parse_errors(text, fragment):
    with pytest.raises(FormatError, match=fragment):
        formats.parse_documents(text)


def test_qrels_errors_and_out_of_range_warning(caplog):
    with pytest.raises(IntegrityError, match="duplicate judgment"):
        formats.parse_qrels(b"1 0 a 1\n1 0 a 2\n")
    with pytest.raises(FormatError, match="non-integer relevance"):
        formats.parse_qrels(b"1 0 a x\n")
    assert formats.parse_qrels(b"1 0 a 7\n")[0].relevance == 7
    assert "outside 0..3" in caplog.text


def test_rerank_ordering_is_enforced():
    base = dict(qid="q", query="", original_topic={}, text="", original_document={})
    gap = [RerankEntry(docno="a", score=2.0, rank=1, **base), RerankEntry(docno="b", score=1.0, rank=3, **base)]
    with pytest.raises(InvariantViolation, match="not contiguous"):
        formats.serialize_rerank(gap)
    rising = [RerankEntry(docno="a", score=1.0, rank=1, **base), RerankEntry(docno="b", score=2.0, rank=2, **base)]
    with pytest.raises(InvariantViolation, match="score increases"):
        formats.serialize_rerank(rising)


def test_serializers_refuse_invalid_records():
    with pytest.raises(InvariantViolation, match="rank must be"):
        formats.serialize_run(RunFile((RunLine("q", "Q0", "d", 0, 1.0, "t"),), "t"))
    with pytest.raises(InvariantViolation, match="whitespace"):
        formats.serialize_qrels([Qrel("q 1", "0", "d", 1)])
    with pytest.raises(InvariantViolation, match="duplicate docno"):
        formats.serialize_documents([DocumentRecord("a", ""), DocumentRecord("a", "")])
    with pytest.raises(InvariantViolation, match="mixes tags"):
        RunFile((RunLine("q", "Q0", "d", 1, 1.0, "a"), RunLine("q", "Q0", "e", 2, 1.0, "b")), "a")


def test_ranking_orders_by_score_then_docno():
    run = formats.parse_run(b"q Q0 b 1 1.0 t\nq Q0 a 2 1.0 t\nq Q0 c 3 5.0 t\n")
    assert run.ranking("q") == ["c", "a", "b"]
    assert run.rankings() == {"q": ["c", "a", "b"]}


def test_run_from_scores_depth():
    run = formats.run_from_scores({"q": {"a": 1.0, "b": 3.0, "c": 2.0}}, "t", depth=2)
    assert [(line.docno, line.rank) for line in run.lines] == [("b", 1), ("c", 2)]
