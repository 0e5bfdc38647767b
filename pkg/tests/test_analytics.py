import random

import pytest

import oracle
from irplatform import analytics
from irplatform.analytics import (
    PreferencePair,
    build_leaderboard,
    delta_relative_improvement,
    effect_ratio,
    preference_pairs,
    quantiles,
    repro_report,
)
from irplatform.errors import Conflict, InvariantViolation


def test_macro_average_and_ordering():
    board = build_leaderboard(
        [("a", "t1", 0.2), ("a", "t2", 0.4), ("b", "t1", 0.5), ("b", "t2", 0.5), ("c", "solo", 0.7)],
        {"t1": "msmarco", "t2": "msmarco", "solo": "robust"},
    )
    ms = board["msmarco"]
    assert [e.approach for e in ms] == ["b", "a"]
    assert ms[1].macro_avg == pytest.approx(0.3)
    assert board["robust"][0].macro_avg == 0.7


def test_incomplete_entries_are_marked_and_last():
    board = build_leaderboard([("a", "t1", 0.9), ("b", "t1", 0.1), ("b", "t2", 0.1)], {"t1": "c", "t2": "c"})
    entries = board["c"]
    assert [e.approach for e in entries] == ["b", "a"]
    assert entries[1].macro_avg is None and entries[1].missing_tasks == ("t2",) and not entries[1].complete


def test_ties_break_by_name_and_duplicates_refused():
    board = build_leaderboard([("z", "t", 0.5), ("a", "t", 0.5)], {"t": "c"})
    assert [e.approach for e in board["c"]] == ["a", "z"]
    with pytest.raises(Conflict):
        build_leaderboard([("a", "t", 0.5), ("a", "t", 0.4)], {"t": "c"})
    assert "macro" in analytics.render_leaderboard(board)


def per_topic(mean, n=4):
    return {f"q{i}": mean for i in range(n)}


def test_worked_example():
    er = effect_ratio(per_topic(0.4), per_topic(0.6), per_topic(0.3), per_topic(0.4))
    dri = delta_relative_improvement(0.4, 0.6, 0.3, 0.4)
    assert abs(er - 0.5) < 1e-12
    assert abs(dri - (0.5 - 1 / 3)) < 1e-12
    assert round(dri, 4) == 0.1667


def test_er_reference_points():
    base, adv = {"a": 0.1, "b": 0.3}, {"a": 0.5, "b": 0.4}
    assert effect_ratio(base, adv, base, adv) == 1.0
    assert effect_ratio(base, adv, base, base) == 0.0
    with pytest.raises(InvariantViolation, match="origin improvement is zero"):
        effect_ratio(base, base, base, adv)


def test_delta_ri_reference_points():
    assert delta_relative_improvement(0.4, 0.6, 0.4, 0.6) == 0.0
    assert delta_relative_improvement(0.4, 0.6, 0.2, 0.6) < 0
    assert delta_relative_improvement(0.0, 0.6, 0.2, 0.6) is None


def test_quantiles_match_sort_oracle():
    rng = random.Random(3)
    for _ in range(500):
        values = [rng.uniform(-2, 2) for _ in range(rng.randint(1, 30))]
        got = quantiles(values)
        for p, q in zip((0.25, 0.5, 0.75), got):
            assert abs(q - oracle.quantile_sorted(values, p)) < 1e-12
    assert quantiles([]) == [None, None, None]
    assert quantiles([0.3]) == [0.3, 0.3, 0.3]


def _pairs_with_er(ers):
    """Per-topic scores producing exactly the given effect ratios."""
    data = {}
    pairs = []
    for i, er in enumerate(ers):
        b, a = f"b{i}", f"a{i}"
        data[(b, "origin")] = {"q": 0.2}
        data[(a, "origin")] = {"q": 0.4}
        data[(b, "target")] = {"q": 0.5}
        data[(a, "target")] = {"q": 0.5 + 0.2 * er}
        pairs.append(PreferencePair(b, a, "origin"))
    return pairs, data


def test_success_rate_counts_positive_er():
    pairs, data = _pairs_with_er([-0.5, 0.2, 0.8, 1.1])
    report = repro_report(pairs, "origin", "target", data)
    assert report.success_rate == 75.0
    assert report.pair_count == 4


def test_identity_reproduction_randomized():
    rng = random.Random(11)
    for _ in range(50):
        approaches = [f"s{i}" for i in range(rng.randint(2, 6))]
        data = {(a, "t"): {f"q{j}": rng.random() for j in range(rng.randint(3, 12))} for a in approaches}
        topics = sorted(next(iter(data.values())))
        data = {k: {q: rng.random() for q in topics} for k in data}
        means = {a: sum(data[(a, "t")].values()) / len(topics) for a in approaches}
        pairs = preference_pairs(means, "t")
        report = repro_report(pairs, "t", "t", data)
        assert report.success_rate == 100.0
        for r in report.results:
            assert abs(r.effect_ratio - 1.0) < 1e-12
            assert abs(r.delta_relative_improvement) < 1e-12


def test_missing_target_run_excludes_pair():
    pairs, data = _pairs_with_er([1.0, 0.5])
    del data[("a1", "target")]
    report = repro_report(pairs, "origin", "target", data)
    assert report.pair_count == 1 and "a1@target" in report.excluded[0]
    q = report.to_dict()["quantiles"]["effect_ratio"]
    assert q == pytest.approx({"25%": 1.0, "50%": 1.0, "75%": 1.0}, abs=1e-12)


def test_preference_pairs_skip_ties():
    pairs = preference_pairs({"a": 0.1, "b": 0.3, "c": 0.3}, "t")
    assert {(p.baseline, p.advanced) for p in pairs} == {("a", "b"), ("a", "c")}


def test_render_repro():
    pairs, data = _pairs_with_er([1.0])
    text = analytics.render_repro([repro_report(pairs, "origin", "target", data)], "origin")
    assert "target" in text and "100.0" in text
