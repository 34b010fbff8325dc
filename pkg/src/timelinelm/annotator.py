"""Dictionary-based concept recognition and linking with contextual spans.

Documents are tokenized on whitespace with punctuation split into separate
tokens; each token gets an absolute id (its position). Matching is greedy
left-to-right leftmost-longest over case-folded token sequences, and every
mention carries the surrounding context: the enclosing sentence, clamped to
at most 50 tokens on each side of the mention.
"""

import datetime as dt
import logging
from dataclasses import dataclass, field

from .corpus import ClinicalDocument, Corpus
from .errors import DataError
from .records import read_records, write_records

logger = logging.getLogger(__name__)

LEXICON_SCHEMA = "lexicon/1"
MENTIONS_SCHEMA = "mentions/1"

CONCEPT_TYPES = ("Disorder", "Substance", "Finding", "Procedure")

CONTEXT_WINDOW = 50  # tokens on each side of a mention, punctuation included

_PUNCT = set(".,;:!?()[]{}\"'`")
_SENTENCE_END = (".", "!", "?")


@dataclass
class ConceptEntry:
    code: str
    canonical_name: str
    concept_type: str
    synonyms: tuple[str, ...] = ()


@dataclass
class TokenizedDocument:
    doc_id: str
    tokens: list[str]  # token text; absolute token id == list index
    sentence_boundaries: list[int]  # indices of sentence-final tokens, sorted


@dataclass
class ConceptMention:
    code: str
    patient_id: str
    doc_id: str
    timestamp: dt.datetime
    mention_span: tuple[int, int]  # inclusive absolute token ids
    context_span: tuple[int, int]
    context_text: str

    @property
    def day(self) -> int:
        from .corpus import day_index

        return day_index(self.timestamp)


def tokenize_text(text: str) -> tuple[list[str], list[int]]:
    """Split text into tokens and sentence-final token indices."""
    tokens: list[str] = []
    boundaries: set[int] = set()
    pos = 0
    n = len(text)
    while pos < n:
        # skip whitespace, remembering newlines so line breaks end sentences
        ws_start = pos
        while pos < n and text[pos].isspace():
            pos += 1
        if "\n" in text[ws_start:pos] and tokens:
            boundaries.add(len(tokens) - 1)
        if pos >= n:
            break
        chunk_start = pos
        while pos < n and not text[pos].isspace():
            pos += 1
        chunk = text[chunk_start:pos]
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        parts = lead + ([chunk] if chunk else []) + list(reversed(trail))
        for part in parts:
            tokens.append(part)
            if part.endswith(_SENTENCE_END):
                boundaries.add(len(tokens) - 1)
    return tokens, sorted(boundaries)


def tokenize_document(doc: ClinicalDocument) -> TokenizedDocument:
    tokens, boundaries = tokenize_text(doc.text)
    return TokenizedDocument(doc_id=doc.doc_id, tokens=tokens, sentence_boundaries=boundaries)


class Lexicon:
    """Case-insensitive multi-word longest-match lookup over concept names."""

    def __init__(self, entries: list[ConceptEntry]):
        self.entries = list(entries)
        self.by_code = {e.code: e for e in entries}
        self._phrases: dict[tuple[str, ...], str] = {}
        self.max_phrase_len = 0
        for entry in entries:
            for surface in (entry.canonical_name, *entry.synonyms):
                tokens, _ = tokenize_text(surface)
                if not tokens:
                    raise DataError(f"entry {entry.code!r} has an empty surface form")
                key = tuple(t.casefold() for t in tokens)
                existing = self._phrases.get(key)
                if existing is not None and existing != entry.code:
                    raise DataError(
                        f"ambiguous surface {surface!r}: maps to {existing} and {entry.code}"
                    )
                self._phrases[key] = entry.code
                self.max_phrase_len = max(self.max_phrase_len, len(key))

    def lookup(self, tokens: tuple[str, ...]) -> str | None:
        return self._phrases.get(tuple(t.casefold() for t in tokens))

    def concept_type(self, code: str) -> str:
        return self.by_code[code].concept_type

    def name(self, code: str) -> str:
        return self.by_code[code].canonical_name

    def type_map(self) -> dict[str, str]:
        return {e.code: e.concept_type for e in self.entries}


def build_lexicon(entries: list[ConceptEntry]) -> Lexicon:
    if not entries:
        raise DataError("lexicon requires at least one entry")
    seen = set()
    for entry in entries:
        if entry.code in seen:
            raise DataError(f"duplicate concept code {entry.code!r}")
        seen.add(entry.code)
        if not entry.canonical_name.strip():
            raise DataError(f"entry {entry.code!r} has an empty canonical name")
        if entry.concept_type not in CONCEPT_TYPES:
            raise DataError(
                f"entry {entry.code!r} has unknown type {entry.concept_type!r}"
            )
    return Lexicon(entries)


def extract_context(doc: TokenizedDocument, mention_span: tuple[int, int],
                    window: int = CONTEXT_WINDOW) -> tuple[int, int]:
    """Enclosing sentence, clamped to ``window`` tokens per side and doc edges."""
    ms, me = mention_span
    n = len(doc.tokens)
    sent_start = 0
    for b in doc.sentence_boundaries:
        if b < ms:
            sent_start = b + 1
        else:
            break
    sent_end = n - 1
    for b in doc.sentence_boundaries:
        if b >= me:
            sent_end = b
            break
    start = max(sent_start, ms - window, 0)
    end = min(sent_end, me + window, n - 1)
    return start, end


def annotate_document(doc: TokenizedDocument, lexicon: Lexicon, *,
                      patient_id: str = "", timestamp: dt.datetime | None = None,
                      window: int = CONTEXT_WINDOW) -> list[ConceptMention]:
    """Greedy leftmost-longest matching; mentions never overlap."""
    if timestamp is None:
        timestamp = dt.datetime(1970, 1, 1)
    mentions = []
    tokens = doc.tokens
    n = len(tokens)
    i = 0
    while i < n:
        matched = None
        for length in range(min(lexicon.max_phrase_len, n - i), 0, -1):
            code = lexicon.lookup(tuple(tokens[i:i + length]))
            if code is not None:
                matched = (code, length)
                break
        if matched is None:
            i += 1
            continue
        code, length = matched
        span = (i, i + length - 1)
        ctx = extract_context(doc, span, window)
        mentions.append(ConceptMention(
            code=code,
            patient_id=patient_id,
            doc_id=doc.doc_id,
            timestamp=timestamp,
            mention_span=span,
            context_span=ctx,
            context_text=" ".join(tokens[ctx[0]:ctx[1] + 1]),
        ))
        i += length
    return mentions


def annotate_corpus(corpus: Corpus, lexicon: Lexicon,
                    window: int = CONTEXT_WINDOW) -> dict[str, list[ConceptMention]]:
    """Annotate every document; mentions per patient in (doc order, position) order."""
    out: dict[str, list[ConceptMention]] = {}
    for patient in corpus.patients:
        mentions: list[ConceptMention] = []
        for doc in patient.documents:
            tokenized = tokenize_document(doc)
            mentions.extend(annotate_document(
                tokenized, lexicon,
                patient_id=patient.patient_id, timestamp=doc.created_at, window=window,
            ))
        out[patient.patient_id] = mentions
    return out


def tokenized_documents(corpus: Corpus) -> dict[tuple[str, str], TokenizedDocument]:
    """Index of (patient_id, doc_id) -> TokenizedDocument for note rendering."""
    return {
        (p.patient_id, d.doc_id): tokenize_document(d)
        for p in corpus.patients
        for d in p.documents
    }


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def load_lexicon_file(path) -> Lexicon:
    entries = []
    for _, rec in read_records(path, LEXICON_SCHEMA):
        entries.append(ConceptEntry(
            code=rec["code"],
            canonical_name=rec["name"],
            concept_type=rec["type"],
            synonyms=tuple(rec.get("synonyms", [])),
        ))
    return build_lexicon(entries)


def save_lexicon_file(entries: list[ConceptEntry], path) -> None:
    write_records(path, LEXICON_SCHEMA, (
        {
            "code": e.code,
            "name": e.canonical_name,
            "type": e.concept_type,
            "synonyms": list(e.synonyms),
        }
        for e in entries
    ))


def save_mentions_file(mentions_by_patient: dict[str, list[ConceptMention]], path) -> None:
    write_records(path, MENTIONS_SCHEMA, (
        {
            "patient_id": m.patient_id,
            "doc_id": m.doc_id,
            "code": m.code,
            "timestamp": m.timestamp.isoformat(),
            "mention_span": list(m.mention_span),
            "context_span": list(m.context_span),
            "context_text": m.context_text,
        }
        for pid in sorted(mentions_by_patient)
        for m in mentions_by_patient[pid]
    ))


def load_mentions_file(path) -> dict[str, list[ConceptMention]]:
    out: dict[str, list[ConceptMention]] = {}
    for _, rec in read_records(path, MENTIONS_SCHEMA):
        mention = ConceptMention(
            code=rec["code"],
            patient_id=rec["patient_id"],
            doc_id=rec["doc_id"],
            timestamp=dt.datetime.fromisoformat(rec["timestamp"]),
            mention_span=tuple(rec["mention_span"]),
            context_span=tuple(rec["context_span"]),
            context_text=rec["context_text"],
        )
        out.setdefault(mention.patient_id, []).append(mention)
    return out
