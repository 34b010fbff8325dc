import random
import zlib

import pytest

from conftest import TYPE_MAP, FixedPredictor, make_timeline
from reference_metrics import brute_force_grid
from timelinelm.evaluation import (NEW, RECURRING, ModelPredictor, OraclePredictor,
                                   _TimelineIndex, compute_metrics,
                                   enumerate_eval_points, metrics_report_text,
                                   per_concept_report, precision_hit, recall_hit)

GRID_T = (30, 365, float("inf"))
GRID_N = (1, 5, 10)
TYPES = ("Disorder", "Finding", "Substance", "Procedure")


def test_enumerate_points_classifies_temporality():
    timeline = make_timeline("p0", [("A", 0), ("B", 3), ("A", 9)])
    points = enumerate_eval_points(timeline, TYPE_MAP)
    assert [(p.gold_code, p.temporality) for p in points] == [("B", NEW), ("A", RECURRING)]
    assert [p.position for p in points] == [1, 2]


def test_enumerate_points_single_concept():
    assert enumerate_eval_points(make_timeline("p0", [("A", 0)]), TYPE_MAP) == []


def test_first_point_is_new():
    timeline = make_timeline("p0", [("A", 0), ("B", 1)])
    points = enumerate_eval_points(timeline, TYPE_MAP)
    assert points[0].temporality == NEW


def _point(timeline, position):
    points = enumerate_eval_points(timeline, TYPE_MAP)
    return next(p for p in points if p.position == position)


def test_precision_hit_forward_window():
    # gold A at day 0 (New point); candidate B first occurs at day 20
    timeline = make_timeline("p0", [("C", 0), ("A", 0), ("B", 20)])
    index = _TimelineIndex(timeline, TYPE_MAP)
    point = _point(timeline, 1)
    assert point.gold_code == "A" and point.temporality == NEW
    assert precision_hit(point, ["B"], index, 30)


def test_precision_hit_window_monotone_in_t():
    timeline = make_timeline("p0", [("C", 0), ("A", 0), ("B", 40)])
    index = _TimelineIndex(timeline, TYPE_MAP)
    point = _point(timeline, 1)
    assert not precision_hit(point, ["B"], index, 30)
    assert precision_hit(point, ["B"], index, 365)
    assert precision_hit(point, ["B"], index, float("inf"))


def test_precision_requires_matching_stratum():
    # B already in history: predicting it at a New point is not a hit
    timeline = make_timeline("p0", [("B", 0), ("A", 5), ("B", 6)])
    index = _TimelineIndex(timeline, TYPE_MAP)
    point = _point(timeline, 1)  # gold A, New
    assert not precision_hit(point, ["B"], index, 30)
    # but at a Recurring point it is
    rec_point = _point(timeline, 2)  # gold B, Recurring
    assert precision_hit(rec_point, ["B"], index, 30)


def test_recall_hit_lookback():
    timeline = make_timeline("p0", [("A", 0), ("B", 10), ("C", 70)])
    table = {
        ("p0", 1, "Finding"): ["C"],   # C predicted 60 days before it occurs
        ("p0", 2, "Finding"): ["D"],
    }
    predictor = FixedPredictor(table)
    points = enumerate_eval_points(timeline, TYPE_MAP)
    index = _TimelineIndex(timeline, TYPE_MAP)
    c_point = next(p for p in points if p.gold_code == "C")

    def candidates_at(position, concept_type, n):
        return predictor.candidates(timeline, position, concept_type, n)

    assert not recall_hit(c_point, index, candidates_at, 30, 1)
    assert recall_hit(c_point, index, candidates_at, 365, 1)


def test_recall_hit_at_own_point_for_all_t():
    timeline = make_timeline("p0", [("A", 0), ("B", 400)])
    table = {("p0", 1, "Disorder"): ["B"]}
    predictor = FixedPredictor(table)
    index = _TimelineIndex(timeline, TYPE_MAP)
    point = _point(timeline, 1)

    def candidates_at(position, concept_type, n):
        return predictor.candidates(timeline, position, concept_type, n)

    for t in GRID_T:
        assert recall_hit(point, index, candidates_at, t, 1)


def test_oracle_predictor_scores_one_everywhere():
    timelines = [
        make_timeline("p0", [("A", 0), ("B", 3), ("A", 9), ("E", 12)]),
        make_timeline("p1", [("C", 0), ("C", 40), ("F", 41), ("B", 300)]),
    ]
    rows = compute_metrics(OraclePredictor(TYPE_MAP), timelines, TYPE_MAP,
                           GRID_T, GRID_N, TYPES)
    for row in rows:
        for value in (row.precision_new, row.precision_recurring,
                      row.recall_new, row.recall_recurring):
            assert value in (None, 1.0)
        if row.concept_type == "All":
            assert row.support_new + row.support_recurring == 6


def test_adversarial_predictor_scores_zero_precision():
    timelines = [make_timeline("p0", [("A", 0), ("B", 3), ("A", 9)])]

    class Adversary:
        def candidates(self, timeline, position, concept_type, n):
            return ["Z"]  # never occurs

    rows = compute_metrics(Adversary(), timelines, TYPE_MAP, (30,), (1,), TYPES)
    all_row = next(r for r in rows if r.concept_type == "All")
    assert all_row.precision_new == 0.0 and all_row.precision_recurring == 0.0


class StableRandomPredictor:
    """Deterministic pseudo-random rankings keyed by (patient, position, type)."""

    def __init__(self, codes, seed=0):
        self.codes = sorted(codes)
        self.seed = seed

    def candidates(self, timeline, position, concept_type, n):
        key = f"{self.seed}|{timeline.patient_id}|{position}|{concept_type}"
        rng = random.Random(zlib.crc32(key.encode()))
        pool = [c for c in self.codes if TYPE_MAP[c] == concept_type]
        rng.shuffle(pool)
        return pool[:n]


def random_timelines(n, seed=0, max_len=10):
    rng = random.Random(seed)
    codes = list(TYPE_MAP)
    out = []
    for i in range(n):
        day = 0
        events = []
        for _ in range(rng.randint(2, max_len)):
            events.append((rng.choice(codes), day))
            day += rng.choice([0, 1, 1, 2, 20, 40, 200, 400])
        # bucketing invariant: no duplicate (code, day)
        seen = set()
        unique = [e for e in events if not (e in seen or seen.add(e))]
        if len(unique) >= 2:
            out.append(make_timeline(f"p{i}", unique))
    return out


def test_compute_metrics_equals_brute_force_on_fixtures():
    timelines = [
        make_timeline("p0", [("A", 0), ("B", 3), ("A", 9), ("E", 12), ("B", 45)]),
        make_timeline("p1", [("C", 0), ("C", 40), ("F", 41), ("B", 300), ("D", 301)]),
        make_timeline("p2", [("A", 0), ("D", 0), ("A", 400), ("C", 4000)]),
    ]
    predictor = StableRandomPredictor(TYPE_MAP, seed=5)
    rows = compute_metrics(predictor, timelines, TYPE_MAP, GRID_T, GRID_N, TYPES)
    reference = brute_force_grid(predictor, timelines, TYPE_MAP, GRID_T, GRID_N, TYPES)
    assert len(rows) == len(reference)
    for row in rows:
        ref = reference[(row.concept_type, row.t_days, row.at_n)]
        assert row.precision_new == ref["precision_new"]
        assert row.precision_recurring == ref["precision_recurring"]
        assert row.recall_new == ref["recall_new"]
        assert row.recall_recurring == ref["recall_recurring"]
        assert row.support_new == ref["support_new"]
        assert row.support_recurring == ref["support_recurring"]


def test_monotonic_in_t_and_n():
    timelines = random_timelines(12, seed=3)
    predictor = StableRandomPredictor(TYPE_MAP, seed=1)
    rows = compute_metrics(predictor, timelines, TYPE_MAP, GRID_T, GRID_N, TYPES)
    cell = {(r.concept_type, r.t_days, r.at_n): r for r in rows}

    def leq(a, b):
        return a is None or b is None or a <= b

    for rt in ("All", *TYPES):
        for t1, t2 in zip(GRID_T, GRID_T[1:]):
            for n in GRID_N:
                a, b = cell[(rt, t1, n)], cell[(rt, t2, n)]
                assert leq(a.precision_new, b.precision_new)
                assert leq(a.recall_new, b.recall_new)
        for n1, n2 in zip(GRID_N, GRID_N[1:]):
            for t in GRID_T:
                a, b = cell[(rt, t, n1)], cell[(rt, t, n2)]
                assert leq(a.precision_recurring, b.precision_recurring)
                assert leq(a.recall_recurring, b.recall_recurring)


def test_supports_partition_points():
    timelines = random_timelines(8, seed=9)
    rows = compute_metrics(OraclePredictor(TYPE_MAP), timelines, TYPE_MAP,
                           (30,), (1,), TYPES)
    total_points = sum(len(enumerate_eval_points(t, TYPE_MAP)) for t in timelines)
    all_row = next(r for r in rows if r.concept_type == "All")
    assert all_row.support_new + all_row.support_recurring == total_points
    by_type = {r.concept_type: r for r in rows if r.concept_type != "All"}
    assert sum(r.support_new + r.support_recurring for r in by_type.values()) == total_points


def test_empty_stratum_rows_are_null():
    timelines = [make_timeline("p0", [("A", 0), ("B", 1)])]  # disorders only
    rows = compute_metrics(OraclePredictor(TYPE_MAP), timelines, TYPE_MAP,
                           (30,), (1,), TYPES)
    proc = next(r for r in rows if r.concept_type == "Procedure")
    assert proc.support_new == 0 and proc.precision_new is None


def test_per_concept_report_shapes_and_counts():
    timelines = [
        make_timeline("p0", [("A", 0), ("B", 1)]),
        make_timeline("p1", [("C", 0), ("B", 1)]),
        make_timeline("p2", [("D", 0), ("B", 1), ("A", 900)]),
    ]
    # predictor always answers "B" for disorders: B-points hit, the A-point misses
    table = {(f"p{i}", pos, "Disorder"): ["B"] for i in range(3) for pos in (1, 2)}
    rows = per_concept_report(FixedPredictor(table), timelines, TYPE_MAP, "Disorder")
    assert rows == [("B", pytest.approx(3 / 4), 3, 1)]


def test_per_concept_report_perfect_code():
    timelines = [make_timeline("p0", [("C", 0), ("A", 1)]),
                 make_timeline("p1", [("C", 0), ("A", 2)])]
    table = {("p0", 1, "Disorder"): ["A"], ("p1", 1, "Disorder"): ["A"]}
    rows = per_concept_report(FixedPredictor(table), timelines, TYPE_MAP, "Disorder")
    assert rows == [("A", 1.0, 2, 0)]


def test_report_text_is_stable():
    timelines = [make_timeline("p0", [("A", 0), ("B", 1)])]
    rows = compute_metrics(OraclePredictor(TYPE_MAP), timelines, TYPE_MAP,
                           GRID_T, (1,), TYPES)
    text = metrics_report_text(rows)
    assert text.splitlines()[0].startswith("type\tt_days")
    assert "inf\t1" in text
    assert text == metrics_report_text(rows)
