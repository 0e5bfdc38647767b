import math
import random

import pytest

import oracle
from irplatform import formats
from irplatform.errors import EvaluationRefused, InvariantViolation
from irplatform.evaluator import (
    EMPTY_RESULT_SET,
    NAN_SCORE,
    PARSE_FAIL,
    RANK_SCORE_CONTRADICTION,
    SCORE_TIES,
    UNJUDGED_QUERY,
    UNKNOWN_QUERY,
    Measure,
    check_run_file,
    evaluate,
    ndcg_at_k,
    sanity_check,
)
from irplatform.formats import Qrel

# (0 + 3/log2(3) + 1/log2(4)) / (3/log2(2) + 1/log2(3)), frozen from the
# brute-force oracle in tests/oracle.py.
WORKED_EXAMPLE = 0.6590018048024133

TOPICS = ["q1", "q2"]
QRELS = [Qrel("q1", "0", "d1", 1), Qrel("q2", "0", "d1", 1)]
CLEAN = b"q1 Q0 d1 1 3.0 t\nq1 Q0 d2 2 2.0 t\nq2 Q0 d1 1 3.0 t\nq2 Q0 d2 2 2.0 t\n"


def test_worked_example():
    value = ndcg_at_k(["d3", "d1", "d2"], {"d1": 2, "d2": 1, "d3": 0}, 10)
    assert abs(value - WORKED_EXAMPLE) < 1e-12
    assert abs(value - oracle.ndcg_brute(["d3", "d1", "d2"], {"d1": 2, "d2": 1, "d3": 0}, 10)) < 1e-12


def test_ideal_and_zero():
    q = {"a": 2, "b": 1, "c": 0}
    assert ndcg_at_k(["a", "b", "c"], q, 10) == 1.0
    assert ndcg_at_k(["c", "x"], q, 10) == 0.0
    assert ndcg_at_k(["a"], {"a": 0}, 10) == 0.0


def test_random_instances_match_exhaustive_oracle():
    rng = random.Random(20240611)
    worst = 0.0
    for _ in range(10_000):
        n = rng.randint(1, 6)
        docs = [f"d{i}" for i in range(n)]
        judged = {d: rng.randint(0, 2) for d in docs if rng.random() < 0.8}
        ranking = rng.sample(docs, rng.randint(0, n))
        k = rng.randint(1, 7)
        worst = max(worst, abs(ndcg_at_k(ranking, judged, k) - oracle.ndcg_brute(ranking, judged, k)))
    assert worst < 1e-12


def test_linear_gain_and_k_validation():
    assert Measure.parse("ndcg[linear]@3").compute(["b", "a"], {"a": 2, "b": 1}) == pytest.approx(
        (1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3))
    )
    with pytest.raises(InvariantViolation):
        ndcg_at_k([], {}, 0)
    with pytest.raises(InvariantViolation, match="unknown measure"):
        Measure.parse("map")
    assert str(Measure.parse("NDCG@10")) == "nDCG@10"


def test_repeated_docno_counts_once():
    assert ndcg_at_k(["a", "a"], {"a": 1, "b": 1}, 10) == pytest.approx(1 / (1 + 1 / math.log2(3)))


# One dedicated fixture per sanity code.
FIXTURES = {
    SCORE_TIES: (b"q1 Q0 d1 1 5.0 t\nq1 Q0 d2 2 5.0 t\nq2 Q0 d1 1 1.0 t\n", "q1"),
    NAN_SCORE: (b"q1 Q0 d1 1 nan t\nq2 Q0 d1 1 1.0 t\n", "q1"),
    EMPTY_RESULT_SET: (b"q1 Q0 d1 1 1.0 t\n", "q2"),
    UNKNOWN_QUERY: (b"q1 Q0 d1 1 1.0 t\nq2 Q0 d1 1 1.0 t\nq99 Q0 d1 1 1.0 t\n", "q99"),
    RANK_SCORE_CONTRADICTION: (b"q1 Q0 d1 1 1.0 t\nq1 Q0 d2 2 2.0 t\nq2 Q0 d1 1 1.0 t\n", "q1"),
}


@pytest.mark.parametrize("code", sorted(FIXTURES))
def test_each_sanity_code_fires_on_its_fixture(code):
    text, qid = FIXTURES[code]
    report = sanity_check(formats.parse_run(text), TOPICS, QRELS)
    hits = [f for f in report.findings if f.code == code]
    assert hits and hits[0].qid == qid


def test_clean_run_is_silent():
    assert sanity_check(formats.parse_run(CLEAN), TOPICS, QRELS).findings == ()


def test_parse_fail_finding():
    run, report = check_run_file(b"q1 Q0 d1 1\n", TOPICS, QRELS)
    assert run is None and report.codes() == {PARSE_FAIL} and not report.ok


def test_unjudged_query_is_informational():
    report = sanity_check(formats.parse_run(b"q1 Q0 d1 1 1.0 t\nq3 Q0 d1 1 1.0 t\n"), None, QRELS)
    assert [f.severity for f in report.findings if f.code == UNJUDGED_QUERY] == ["info"]
    assert report.ok


def test_all_findings_are_enumerated():
    text = b"q1 Q0 d1 1 nan t\nq1 Q0 d2 2 5.0 t\nq1 Q0 d3 3 5.0 t\nq99 Q0 d1 1 1 t\n"
    codes = sanity_check(formats.parse_run(text), TOPICS, QRELS).codes()
    assert {NAN_SCORE, SCORE_TIES, UNKNOWN_QUERY, EMPTY_RESULT_SET} <= codes


def test_evaluate_refuses_nan():
    with pytest.raises(EvaluationRefused) as err:
        evaluate(formats.parse_run(FIXTURES[NAN_SCORE][0]), QRELS, ["nDCG@10"], TOPICS)
    assert err.value.details["sanity"]["findings"][0]["code"] == NAN_SCORE


def test_evaluate_means():
    run = formats.parse_run(b"q1 Q0 d1 1 1.0 t\nq2 Q0 d9 1 1.0 t\n")
    result = evaluate(run, QRELS, ["nDCG@10"])
    rep = result["ndcg@10"]
    assert rep.per_query == {"q1": 1.0, "q2": 0.0} and rep.mean == 0.5 and rep.evaluated_query_count == 2
    assert result.to_dict() == {"nDCG@10": {"mean": 0.5, "per_query": {"q1": 1.0, "q2": 0.0}, "evaluated_query_count": 2}}


def test_missing_judged_topic_scores_zero(tmp_path):
    qrels_text = "q1 0 a 2\nq1 0 b 1\nq2 0 a 1\nq3 0 c 2\nq3 0 a 0\n"
    run_text = "q1 Q0 b 1 2.0 t\nq1 Q0 a 2 1.0 t\nq3 Q0 c 1 4.0 t\nq3 Q0 a 2 1.0 t\n"
    (tmp_path / "q").write_text(qrels_text)
    (tmp_path / "r").write_text(run_text)
    want_mean, want = oracle.mean_ndcg_from_files(tmp_path / "r", tmp_path / "q")
    result = evaluate(formats.parse_run(run_text.encode()), formats.parse_qrels(qrels_text.encode()))
    rep = result["nDCG@10"]
    assert rep.per_query["q2"] == 0.0 and rep.evaluated_query_count == 3
    assert abs(rep.mean - want_mean) < 1e-12
    assert all(abs(rep.per_query[q] - want[q]) < 1e-12 for q in want)
    assert any(f.code == EMPTY_RESULT_SET and f.qid == "q2" for f in result.sanity.findings)
