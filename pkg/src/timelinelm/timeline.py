"""Per-patient timelines: cleaned, day-bucketed concept events with
demographic prefixes and temporal separator tokens.

The build pipeline is filter_singletons -> bucket_mentions ->
insert_separators -> demographic prefix (sex, ethnicity, age decade, plus an
extra age event wherever the patient's decade changes).
"""

import datetime as dt
import logging
from dataclasses import dataclass, field

from .annotator import ConceptMention
from .corpus import PatientRecord, day_index
from .errors import ConfigError
from .records import read_records, write_records

logger = logging.getLogger(__name__)

TIMELINES_SCHEMA = "timelines/1"

DEMOGRAPHIC_KINDS = ("sex", "ethnicity", "age_decade")


@dataclass
class DemographicEvent:
    kind: str  # one of DEMOGRAPHIC_KINDS
    value: str

    @property
    def token(self) -> str:
        short = {"sex": "sex", "ethnicity": "ethnicity", "age_decade": "age"}[self.kind]
        return f"<{short}:{self.value}>"


@dataclass
class ConceptEvent:
    mention: ConceptMention  # bucket representative (earliest mention)
    bucket_date: int  # day index of the representative

    @property
    def code(self) -> str:
        return self.mention.code


@dataclass
class SeparatorEvent:
    gap_class: str  # e.g. "<7 days later>"

    @property
    def token(self) -> str:
        return self.gap_class


TimelineEvent = DemographicEvent | ConceptEvent | SeparatorEvent


@dataclass
class PatientTimeline:
    patient_id: str
    events: list[TimelineEvent] = field(default_factory=list)

    def concepts(self) -> list[ConceptEvent]:
        return [e for e in self.events if isinstance(e, ConceptEvent)]


def filter_singletons(mentions: list[ConceptMention]) -> list[ConceptMention]:
    """Drop codes whose raw mention count over the whole record is exactly 1.

    Applied before bucketing: two same-day mentions of a code keep it alive.
    """
    counts: dict[str, int] = {}
    for m in mentions:
        counts[m.code] = counts.get(m.code, 0) + 1
    return [m for m in mentions if counts[m.code] > 1]


def bucket_mentions(mentions: list[ConceptMention], bucket_days: int = 1) -> list[ConceptEvent]:
    """Collapse repeated (code, day-bucket) mentions to their earliest mention."""
    if bucket_days < 1:
        raise ConfigError(f"bucket_days must be >= 1, got {bucket_days}")
    best: dict[tuple[str, int], ConceptMention] = {}
    for m in mentions:
        key = (m.code, m.day // bucket_days)
        cur = best.get(key)
        if cur is None or _mention_order(m) < _mention_order(cur):
            best[key] = m
    events = [ConceptEvent(mention=m, bucket_date=m.day) for m in best.values()]
    events.sort(key=lambda e: (e.bucket_date, _mention_order(e.mention)))
    return events


def _mention_order(m: ConceptMention):
    return (m.timestamp, m.doc_id, m.mention_span[0])


def separator_token(gap_days: int) -> str:
    """Render the elapsed-time token for a positive day gap."""
    if gap_days < 1:
        raise ValueError("separator gaps must be positive")
    if gap_days <= 7:
        return f"<{gap_days} days later>"
    if gap_days <= 30:
        return f"<{gap_days // 7} weeks later>"
    if gap_days <= 364:
        return f"<{gap_days // 30} months later>"
    years = gap_days // 365
    if years > 10:
        return "<10+ years later>"
    return f"<{years} years later>"


def all_separator_tokens() -> list[str]:
    """Every token the ladder can produce, for vocabulary registration."""
    tokens = [f"<{d} days later>" for d in range(1, 8)]
    tokens += [f"<{w} weeks later>" for w in range(1, 5)]
    tokens += [f"<{m} months later>" for m in range(1, 13)]
    tokens += [f"<{y} years later>" for y in range(1, 11)]
    tokens.append("<10+ years later>")
    return tokens


def insert_separators(events: list[ConceptEvent], bucket_days: int = 1) -> list[TimelineEvent]:
    """Insert one separator between concept events more than a bucket apart."""
    out: list[TimelineEvent] = []
    prev: ConceptEvent | None = None
    for event in events:
        if prev is not None:
            gap = event.bucket_date - prev.bucket_date
            if gap > bucket_days:
                out.append(SeparatorEvent(gap_class=separator_token(gap)))
        out.append(event)
        prev = event
    return out


def age_decade_token(age_years: int) -> str:
    decade = min(max(age_years, 0) // 10 * 10, 100)
    return f"{decade}s"


def build_timeline(record: PatientRecord, mentions: list[ConceptMention],
                   bucket_days: int = 1) -> PatientTimeline | None:
    """Assemble the patient timeline; returns None if nothing survives cleaning."""
    kept = filter_singletons(mentions)
    concept_events = bucket_mentions(kept, bucket_days)
    if not concept_events:
        logger.info("patient %s dropped: no concept events survive cleaning",
                    record.patient_id)
        return None

    sequenced = insert_separators(concept_events, bucket_days)

    first_day = concept_events[0].bucket_date
    decade = age_decade_token(record.age_years_at(first_day))
    events: list[TimelineEvent] = [
        DemographicEvent("sex", record.sex),
        DemographicEvent("ethnicity", record.ethnicity),
        DemographicEvent("age_decade", decade),
    ]
    current = decade
    for event in sequenced:
        if isinstance(event, ConceptEvent):
            here = age_decade_token(record.age_years_at(event.bucket_date))
            if here != current:
                events.append(DemographicEvent("age_decade", here))
                current = here
        events.append(event)
    return PatientTimeline(patient_id=record.patient_id, events=events)


def build_timelines(corpus_patients: list[PatientRecord],
                    mentions_by_patient: dict[str, list[ConceptMention]],
                    bucket_days: int = 1) -> list[PatientTimeline]:
    timelines = []
    for record in corpus_patients:
        if not record.documents:
            logger.info("patient %s dropped: no documents", record.patient_id)
            continue
        timeline = build_timeline(record, mentions_by_patient.get(record.patient_id, []),
                                  bucket_days)
        if timeline is not None:
            timelines.append(timeline)
    return timelines


def validate_timeline(timeline: PatientTimeline) -> list[str]:
    """Structural invariant check; returns human-readable violations."""
    violations = []
    events = timeline.events
    head = [e.kind for e in events[:3] if isinstance(e, DemographicEvent)]
    if head[:3] != list(DEMOGRAPHIC_KINDS):
        violations.append("timeline must start with sex, ethnicity, age_decade demographics")
    last_day = None
    seen_buckets = set()
    for i, event in enumerate(events):
        if isinstance(event, SeparatorEvent):
            if i + 1 < len(events) and isinstance(events[i + 1], SeparatorEvent):
                violations.append(f"adjacent separators at position {i}")
        if isinstance(event, ConceptEvent):
            if last_day is not None and event.bucket_date < last_day:
                violations.append(f"bucket_date decreases at position {i}")
            last_day = event.bucket_date
            key = (event.code, event.bucket_date)
            if key in seen_buckets:
                violations.append(f"duplicate (code, bucket_date) {key}")
            seen_buckets.add(key)
    return violations


# ---------------------------------------------------------------------------
# File format: events as tagged unions
# ---------------------------------------------------------------------------

def _event_to_record(event: TimelineEvent) -> dict:
    if isinstance(event, DemographicEvent):
        return {"event": "demographic", "kind": event.kind, "value": event.value}
    if isinstance(event, SeparatorEvent):
        return {"event": "separator", "gap_class": event.gap_class}
    m = event.mention
    return {
        "event": "concept",
        "code": m.code,
        "bucket_date": event.bucket_date,
        "doc_id": m.doc_id,
        "timestamp": m.timestamp.isoformat(),
        "mention_span": list(m.mention_span),
        "context_span": list(m.context_span),
        "context_text": m.context_text,
    }


def _event_from_record(rec: dict, patient_id: str) -> TimelineEvent:
    kind = rec["event"]
    if kind == "demographic":
        return DemographicEvent(rec["kind"], rec["value"])
    if kind == "separator":
        return SeparatorEvent(rec["gap_class"])
    mention = ConceptMention(
        code=rec["code"],
        patient_id=patient_id,
        doc_id=rec["doc_id"],
        timestamp=dt.datetime.fromisoformat(rec["timestamp"]),
        mention_span=tuple(rec["mention_span"]),
        context_span=tuple(rec["context_span"]),
        context_text=rec["context_text"],
    )
    return ConceptEvent(mention=mention, bucket_date=rec["bucket_date"])


def save_timelines_file(timelines: list[PatientTimeline], path) -> None:
    write_records(path, TIMELINES_SCHEMA, (
        {
            "patient_id": t.patient_id,
            "events": [_event_to_record(e) for e in t.events],
        }
        for t in timelines
    ))


def load_timelines_file(path) -> list[PatientTimeline]:
    timelines = []
    for _, rec in read_records(path, TIMELINES_SCHEMA):
        pid = rec["patient_id"]
        timelines.append(PatientTimeline(
            patient_id=pid,
            events=[_event_from_record(e, pid) for e in rec["events"]],
        ))
    return timelines
