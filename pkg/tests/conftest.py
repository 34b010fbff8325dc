import datetime as dt

import pytest

from timelinelm.annotator import ConceptEntry, ConceptMention, build_lexicon
from timelinelm.corpus import date_from_day
from timelinelm.timeline import ConceptEvent, DemographicEvent, PatientTimeline

TYPE_MAP = {
    "A": "Disorder",
    "B": "Disorder",
    "C": "Finding",
    "D": "Finding",
    "E": "Substance",
    "F": "Procedure",
}


@pytest.fixture
def tiny_lexicon():
    return build_lexicon([
        ConceptEntry("10001", "hypertension", "Disorder", ("high blood pressure",)),
        ConceptEntry("10002", "diabetes mellitus", "Disorder", ("T1DM",)),
        ConceptEntry("10003", "diabetes", "Disorder"),
        ConceptEntry("10004", "fever", "Finding"),
        ConceptEntry("10005", "metformin", "Substance"),
    ])


def make_mention(code: str, day: int, patient_id: str = "p0", doc_id: str = "d0",
                 start: int = 0, end: int | None = None,
                 context: tuple[int, int] | None = None) -> ConceptMention:
    end = start if end is None else end
    context = (start, end) if context is None else context
    return ConceptMention(
        code=code,
        patient_id=patient_id,
        doc_id=doc_id,
        timestamp=dt.datetime.combine(date_from_day(day), dt.time(12, 0)),
        mention_span=(start, end),
        context_span=context,
        context_text="x",
    )


def make_timeline(patient_id: str, events: list[tuple[str, int]],
                  sex: str = "F", ethnicity: str = "other",
                  decade: str = "60s") -> PatientTimeline:
    """Timeline from (code, day) pairs, with the standard demographic prefix."""
    out: list = [
        DemographicEvent("sex", sex),
        DemographicEvent("ethnicity", ethnicity),
        DemographicEvent("age_decade", decade),
    ]
    for i, (code, day) in enumerate(events):
        out.append(ConceptEvent(
            mention=make_mention(code, day, patient_id=patient_id, doc_id=f"d{i:03d}"),
            bucket_date=day,
        ))
    return PatientTimeline(patient_id=patient_id, events=out)


class FixedPredictor:
    """Candidate rankings from an explicit (patient, position, type) table."""

    def __init__(self, table: dict[tuple[str, int, str], list[str]]):
        self.table = table

    def candidates(self, timeline, position, concept_type, n):
        return self.table.get((timeline.patient_id, position, concept_type), [])[:n]
