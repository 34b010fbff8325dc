"""Rebuild one synthetic clinical note per patient from timeline events.

Contexts from the same document whose token ranges overlap or touch are
merged (token ids are absolute, so the union never duplicates text), and each
mention's code token is inserted directly after its surface text, which is
retained. Demographics and separators become special-token segments.
"""

import logging
from dataclasses import dataclass, field

from .annotator import TokenizedDocument
from .errors import DataError
from .records import read_records, write_records
from .timeline import ConceptEvent, DemographicEvent, PatientTimeline, SeparatorEvent

logger = logging.getLogger(__name__)

NOTES_SCHEMA = "notes/1"


@dataclass
class TextSegment:
    text: str


@dataclass
class ConceptTokenSegment:
    code: str


@dataclass
class SpecialTokenSegment:
    token: str


NoteSegment = TextSegment | ConceptTokenSegment | SpecialTokenSegment


@dataclass
class ReconstructedNote:
    patient_id: str
    segments: list[NoteSegment] = field(default_factory=list)

    def concept_codes(self) -> list[str]:
        return [s.code for s in self.segments if isinstance(s, ConceptTokenSegment)]


@dataclass
class ContextGroup:
    doc_id: str
    span: tuple[int, int]  # union of member context spans, inclusive
    members: list[ConceptEvent]  # sorted by mention start token


def merge_contexts(events: list[ConceptEvent]) -> list[ContextGroup]:
    """Union overlapping-or-touching context spans within each document.

    Output group order follows the earliest member (timestamp, doc, position),
    so rendering is insensitive to the order events arrive in.
    """
    by_doc: dict[str, list[ConceptEvent]] = {}
    for event in events:
        by_doc.setdefault(event.mention.doc_id, []).append(event)
    groups: list[ContextGroup] = []
    for doc_id, doc_events in by_doc.items():
        doc_events = sorted(doc_events, key=lambda e: (e.mention.context_span,
                                                       e.mention.mention_span))
        current: list[ConceptEvent] = []
        span: tuple[int, int] | None = None
        for event in doc_events:
            s, e = event.mention.context_span
            if span is not None and s <= span[1] + 1:
                span = (span[0], max(span[1], e))
                current.append(event)
            else:
                if current:
                    groups.append(_finish_group(doc_id, span, current))
                current = [event]
                span = (s, e)
        if current:
            groups.append(_finish_group(doc_id, span, current))
    groups.sort(key=lambda g: (g.members[0].mention.timestamp, g.doc_id, g.span[0]))
    return groups


def _finish_group(doc_id: str, span: tuple[int, int], members: list[ConceptEvent]) -> ContextGroup:
    members = sorted(members, key=lambda e: e.mention.mention_span)
    return ContextGroup(doc_id=doc_id, span=span, members=members)


def _emit_group(group: ContextGroup, doc: TokenizedDocument) -> list[NoteSegment]:
    # Code-token placement is isolated here: the code goes directly after the
    # mention's surface tokens, and the surface text stays in place.
    start, end = group.span
    if end >= len(doc.tokens):
        raise DataError(
            f"context span {group.span} exceeds document {group.doc_id!r} "
            f"({len(doc.tokens)} tokens)"
        )
    segments: list[NoteSegment] = []
    cursor = start
    for event in group.members:
        _, me = event.mention.mention_span
        text = " ".join(doc.tokens[cursor:me + 1])
        if text:
            segments.append(TextSegment(text))
        segments.append(ConceptTokenSegment(event.code))
        cursor = me + 1
    tail = " ".join(doc.tokens[cursor:end + 1])
    if tail:
        segments.append(TextSegment(tail))
    return segments


def _normalize(segments: list[NoteSegment]) -> list[NoteSegment]:
    out: list[NoteSegment] = []
    for seg in segments:
        if isinstance(seg, TextSegment) and out and isinstance(out[-1], TextSegment):
            out[-1] = TextSegment(out[-1].text + " " + seg.text)
        else:
            out.append(seg)
    return out


def render_note(timeline: PatientTimeline,
                docs: dict[tuple[str, str], TokenizedDocument]) -> ReconstructedNote:
    """Render the timeline into interleaved text / concept / special segments."""
    segments: list[NoteSegment] = []
    run: list[ConceptEvent] = []

    def flush():
        for group in merge_contexts(run):
            doc = docs.get((timeline.patient_id, group.doc_id))
            if doc is None:
                raise DataError(
                    f"document {group.doc_id!r} of patient {timeline.patient_id!r} "
                    "not available for rendering"
                )
            segments.extend(_emit_group(group, doc))
        run.clear()

    for event in timeline.events:
        if isinstance(event, ConceptEvent):
            run.append(event)
        else:
            flush()
            token = event.token if isinstance(event, DemographicEvent) else event.gap_class
            segments.append(SpecialTokenSegment(token))
    flush()
    return ReconstructedNote(patient_id=timeline.patient_id, segments=_normalize(segments))


def render_notes(timelines: list[PatientTimeline],
                 docs: dict[tuple[str, str], TokenizedDocument]) -> list[ReconstructedNote]:
    return [render_note(t, docs) for t in timelines]


def strip_context(note: ReconstructedNote) -> ReconstructedNote:
    """Ablation helper: drop all free-text segments, keeping concepts/specials."""
    return ReconstructedNote(
        patient_id=note.patient_id,
        segments=[s for s in note.segments if not isinstance(s, TextSegment)],
    )


def render_flat(note: ReconstructedNote, code_text=None) -> str:
    """Human-readable rendering; codes become ``[[code]]`` unless a renderer
    mapping codes to strings is supplied."""
    parts = []
    for seg in note.segments:
        if isinstance(seg, TextSegment):
            parts.append(seg.text)
        elif isinstance(seg, ConceptTokenSegment):
            parts.append(f"[[{seg.code}]]" if code_text is None else code_text(seg.code))
        else:
            parts.append(seg.token)
    return " ".join(parts)


def save_notes_file(notes: list[ReconstructedNote], path) -> None:
    def _encode(seg: NoteSegment) -> list[str]:
        if isinstance(seg, TextSegment):
            return ["text", seg.text]
        if isinstance(seg, ConceptTokenSegment):
            return ["concept", seg.code]
        return ["special", seg.token]

    write_records(path, NOTES_SCHEMA, (
        {"patient_id": n.patient_id, "segments": [_encode(s) for s in n.segments]}
        for n in notes
    ))


def load_notes_file(path) -> list[ReconstructedNote]:
    notes = []
    for _, rec in read_records(path, NOTES_SCHEMA):
        segments: list[NoteSegment] = []
        for tag, value in rec["segments"]:
            if tag == "text":
                segments.append(TextSegment(value))
            elif tag == "concept":
                segments.append(ConceptTokenSegment(value))
            elif tag == "special":
                segments.append(SpecialTokenSegment(value))
            else:
                raise DataError(f"unknown segment tag {tag!r}")
        notes.append(ReconstructedNote(patient_id=rec["patient_id"], segments=segments))
    return notes
