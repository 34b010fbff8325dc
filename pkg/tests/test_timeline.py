import datetime as dt
import random

import pytest

from conftest import make_mention
from timelinelm.corpus import PatientRecord, day_index
from timelinelm.errors import ConfigError
from timelinelm.timeline import (ConceptEvent, DemographicEvent, SeparatorEvent,
                                 age_decade_token, bucket_mentions, build_timeline,
                                 filter_singletons, insert_separators,
                                 separator_token, validate_timeline)


def test_bucketing_collapses_same_day():
    mentions = [make_mention("A", 10, start=i) for i in range(4)]
    events = bucket_mentions(mentions)
    assert len(events) == 1
    assert events[0].mention.mention_span == (0, 0)  # earliest survives


def test_bucketing_keeps_distinct_days():
    events = bucket_mentions([make_mention("A", 0), make_mention("A", 2)])
    assert [(e.code, e.bucket_date) for e in events] == [("A", 0), ("A", 2)]


def test_bucketing_empty_and_bad_width():
    assert bucket_mentions([]) == []
    with pytest.raises(ConfigError):
        bucket_mentions([], bucket_days=0)


def test_bucketing_idempotent():
    rng = random.Random(0)
    mentions = [make_mention(rng.choice("ABC"), rng.randint(0, 20), start=i)
                for i in range(50)]
    once = bucket_mentions(mentions)
    twice = bucket_mentions([e.mention for e in once])
    assert twice == once


def test_singleton_filter():
    mentions = [
        make_mention("X", 3),                      # one raw mention: dropped
        make_mention("Y", 5, start=0), make_mention("Y", 5, start=9),  # same day twice: kept
        make_mention("Z", 1), make_mention("Z", 40),
    ]
    kept = filter_singletons(mentions)
    assert {m.code for m in kept} == {"Y", "Z"}
    assert len([m for m in kept if m.code == "Y"]) == 2
    assert filter_singletons([]) == []


def test_singleton_filter_order_independent():
    rng = random.Random(1)
    mentions = [make_mention(rng.choice("AB"), rng.randint(0, 9), start=i)
                for i in range(9)] + [make_mention("Q", 2)]
    shuffled = mentions[:]
    rng.shuffle(shuffled)
    assert {(m.code, m.day, m.mention_span) for m in filter_singletons(mentions)} == \
           {(m.code, m.day, m.mention_span) for m in filter_singletons(shuffled)}


def test_separator_ladder_examples():
    assert separator_token(7) == "<7 days later>"
    assert separator_token(2) == "<2 days later>"
    assert separator_token(8) == "<1 weeks later>"
    assert separator_token(30) == "<4 weeks later>"
    assert separator_token(31) == "<1 months later>"
    assert separator_token(400) == "<1 years later>"
    assert separator_token(3650) == "<10 years later>"
    assert separator_token(4015) == "<10+ years later>"


def test_separator_ladder_property():
    for g in range(1, 5001):
        token = separator_token(g)
        if g <= 7:
            assert token == f"<{g} days later>"
        elif g <= 30:
            assert token == f"<{g // 7} weeks later>"
        elif g <= 364:
            assert token == f"<{g // 30} months later>"
        elif g // 365 <= 10:
            assert token == f"<{g // 365} years later>"
        else:
            assert token == "<10+ years later>"


def test_insert_separators_boundaries():
    events = bucket_mentions([make_mention("A", 0), make_mention("B", 1),
                              make_mention("C", 8)])
    seq = insert_separators(events)
    kinds = [e.gap_class if isinstance(e, SeparatorEvent) else e.code for e in seq]
    assert kinds == ["A", "B", "<7 days later>", "C"]  # gap 1 not > bucket, gap 7 is


def _record(birth: str, docs_days=()):
    return PatientRecord("p0", "F", "asian", dt.date.fromisoformat(birth))


def test_build_timeline_prefix_and_age():
    record = _record("1950-01-15")
    day = day_index(dt.date(2016, 6, 1))  # patient is 66
    mentions = [make_mention("A", day, start=0), make_mention("A", day, start=5)]
    timeline = build_timeline(record, mentions)
    head = timeline.events[:3]
    assert [e.kind for e in head] == ["sex", "ethnicity", "age_decade"]
    assert head[0].value == "F" and head[2].value == "60s"
    assert validate_timeline(timeline) == []


def test_build_timeline_drops_all_singletons(caplog):
    record = _record("1950-01-15")
    timeline = build_timeline(record, [make_mention("A", 100), make_mention("B", 100)])
    assert timeline is None


def test_age_decade_change_event():
    record = _record("1950-01-15")
    d64 = day_index(dt.date(2014, 6, 1))   # age 64
    d71 = day_index(dt.date(2021, 6, 1))   # age 71
    mentions = [make_mention("A", d64, start=0), make_mention("A", d64, start=4),
                make_mention("B", d71, start=0), make_mention("B", d71, start=4)]
    timeline = build_timeline(record, mentions)
    demo = [e for e in timeline.events if isinstance(e, DemographicEvent)
            and e.kind == "age_decade"]
    assert [e.value for e in demo] == ["60s", "70s"]
    # the extra decade event sits right before the crossing concept
    i = timeline.events.index(demo[1])
    assert isinstance(timeline.events[i + 1], ConceptEvent)
    assert timeline.events[i + 1].code == "B"
    assert validate_timeline(timeline) == []


def test_age_decade_token_caps():
    assert age_decade_token(5) == "0s"
    assert age_decade_token(66) == "60s"
    assert age_decade_token(104) == "100s"


def test_validator_flags_violations():
    record = _record("1950-01-15")
    day = day_index(dt.date(2016, 6, 1))
    timeline = build_timeline(record, [make_mention("A", day, start=0),
                                       make_mention("A", day, start=3)])
    timeline.events.insert(3, SeparatorEvent("<2 days later>"))
    timeline.events.insert(3, SeparatorEvent("<2 days later>"))
    assert any("adjacent separators" in v for v in validate_timeline(timeline))
