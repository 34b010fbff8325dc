import random

import pytest

from conftest import make_mention
from timelinelm.annotator import (build_lexicon, ConceptEntry, annotate_corpus,
                                  tokenized_documents)
from timelinelm.corpus import Corpus, PatientRecord, ClinicalDocument
from timelinelm.errors import DataError
from timelinelm.reconstruct import (ConceptTokenSegment, SpecialTokenSegment,
                                    TextSegment, load_notes_file, merge_contexts,
                                    render_flat, render_note, save_notes_file,
                                    strip_context)
from timelinelm.timeline import ConceptEvent, build_timelines
import datetime as dt


def _event(code, day, doc_id, ctx, start=None):
    start = ctx[0] if start is None else start
    m = make_mention(code, day, doc_id=doc_id, start=start, context=ctx)
    return ConceptEvent(mention=m, bucket_date=day)


def test_merge_overlapping_same_doc():
    groups = merge_contexts([_event("A", 0, "d0", (10, 40)),
                             _event("B", 0, "d0", (30, 60))])
    assert len(groups) == 1
    assert groups[0].span == (10, 60)
    assert [e.code for e in groups[0].members] == ["A", "B"]


def test_merge_same_span_different_docs():
    groups = merge_contexts([_event("A", 0, "d0", (10, 40)),
                             _event("B", 0, "d1", (10, 40))])
    assert len(groups) == 2


def test_merge_disjoint_spans():
    groups = merge_contexts([_event("A", 0, "d0", (0, 5)),
                             _event("B", 0, "d0", (50, 60))])
    assert [g.span for g in groups] == [(0, 5), (50, 60)]


def test_merge_touching_spans():
    groups = merge_contexts([_event("A", 0, "d0", (0, 5)),
                             _event("B", 0, "d0", (6, 9))])
    assert len(groups) == 1 and groups[0].span == (0, 9)


def _brute_force_spans(spans):
    """Independent merger: pairwise-union to a fixpoint."""
    spans = [list(s) for s in spans]
    changed = True
    while changed:
        changed = False
        for i in range(len(spans)):
            for j in range(i + 1, len(spans)):
                a, b = spans[i], spans[j]
                if a[0] <= b[1] + 1 and b[0] <= a[1] + 1:
                    spans[i] = [min(a[0], b[0]), max(a[1], b[1])]
                    del spans[j]
                    changed = True
                    break
            if changed:
                break
    return sorted(tuple(s) for s in spans)


def random_span_events(rng, n_events=12, n_docs=2, width=100):
    events = []
    for k in range(n_events):
        s = rng.randint(0, width)
        e = s + rng.randint(0, 15)
        events.append(_event(f"C{k}", 0, f"d{rng.randint(0, n_docs - 1)}", (s, e)))
    return events


def test_merge_matches_brute_force_on_random_sets():
    rng = random.Random(13)
    for _ in range(100):
        events = random_span_events(rng)
        groups = merge_contexts(events)
        by_doc = {}
        for e in events:
            by_doc.setdefault(e.mention.doc_id, []).append(e.mention.context_span)
        for doc_id, spans in by_doc.items():
            got = sorted(g.span for g in groups if g.doc_id == doc_id)
            assert got == _brute_force_spans(spans)


def test_merge_order_independent():
    rng = random.Random(3)
    events = random_span_events(rng)
    baseline = merge_contexts(events)
    for _ in range(5):
        shuffled = events[:]
        rng.shuffle(shuffled)
        assert merge_contexts(shuffled) == baseline


def _tiny_corpus(docs_text: list[tuple[str, str]]):
    documents = [
        ClinicalDocument("p0", doc_id, dt.datetime.fromisoformat(created), text)
        for doc_id, created, text in docs_text
    ]
    record = PatientRecord("p0", "F", "asian", dt.date(1950, 1, 15), documents)
    return Corpus(patients=[record])


LEX = build_lexicon([
    ConceptEntry("10001", "hypertension", "Disorder"),
    ConceptEntry("10004", "fever", "Finding"),
])


def _pipeline(corpus):
    mentions = annotate_corpus(corpus, LEX)
    timelines = build_timelines(corpus.patients, mentions)
    docs = tokenized_documents(corpus)
    return timelines, docs


def test_render_single_concept_keeps_surface_and_appends_code():
    corpus = _tiny_corpus([
        ("d0", "2016-06-01T10:00:00",
         "Patient has severe hypertension today. Second hypertension mention."),
    ])
    timelines, docs = _pipeline(corpus)
    note = render_note(timelines[0], docs)
    kinds = [type(s).__name__ for s in note.segments]
    assert kinds[:3] == ["SpecialTokenSegment"] * 3
    text, code = note.segments[3], note.segments[4]
    assert isinstance(text, TextSegment) and text.text.endswith("hypertension")
    assert isinstance(code, ConceptTokenSegment) and code.code == "10001"
    assert note.segments[5].text == "today ."  # trailing sentence text retained


def test_render_merged_group_places_each_code():
    corpus = _tiny_corpus([
        ("d0", "2016-06-01T10:00:00",
         "Has hypertension and fever now. Also hypertension and fever later."),
    ])
    timelines, docs = _pipeline(corpus)
    note = render_note(timelines[0], docs)
    codes = note.concept_codes()
    assert codes == [e.code for e in timelines[0].concepts()]
    flat = render_flat(note)
    assert "hypertension [[10001]] and fever [[10004]]" in flat


def test_render_inserts_separator_tokens():
    corpus = _tiny_corpus([
        ("d0", "2016-06-01T10:00:00", "hypertension noted. hypertension again."),
        ("d1", "2016-06-03T10:00:00", "fever spike. fever persists."),
    ])
    timelines, docs = _pipeline(corpus)
    note = render_note(timelines[0], docs)
    specials = [s.token for s in note.segments if isinstance(s, SpecialTokenSegment)]
    assert "<2 days later>" in specials


def test_render_unresolvable_span_names_doc():
    corpus = _tiny_corpus([("d0", "2016-06-01T10:00:00", "fever twice. fever again.")])
    timelines, docs = _pipeline(corpus)
    bad = timelines[0].concepts()[0].mention
    bad.context_span = (0, 999)
    with pytest.raises(DataError, match="d0"):
        render_note(timelines[0], docs)


def test_strip_context_drops_text_only():
    corpus = _tiny_corpus([
        ("d0", "2016-06-01T10:00:00", "Has hypertension and fever. hypertension, fever."),
    ])
    timelines, docs = _pipeline(corpus)
    note = render_note(timelines[0], docs)
    stripped = strip_context(note)
    assert not any(isinstance(s, TextSegment) for s in stripped.segments)
    assert stripped.concept_codes() == note.concept_codes()
    assert sum(isinstance(s, SpecialTokenSegment) for s in stripped.segments) == \
           sum(isinstance(s, SpecialTokenSegment) for s in note.segments)


def test_notes_file_round_trip(tmp_path):
    corpus = _tiny_corpus([
        ("d0", "2016-06-01T10:00:00", "Has hypertension and fever. hypertension, fever."),
    ])
    timelines, docs = _pipeline(corpus)
    notes = [render_note(timelines[0], docs)]
    path = tmp_path / "notes.jsonl"
    save_notes_file(notes, path)
    assert load_notes_file(path) == notes
