"""Word-level base vocabulary plus single-token concept codes.

Concept tokens are appended after the base vocabulary and their embedding
rows are initialised to the mean of their canonical name's token embeddings
(the alternative all-token-mean initialisation sits behind a flag and is off
by default). Id spaces are contiguous: specials, then base words, then
concept codes.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotator import ConceptEntry, tokenize_text
from .errors import DataError
from .reconstruct import (ConceptTokenSegment, ReconstructedNote, SpecialTokenSegment,
                          TextSegment)
from .timeline import all_separator_tokens

logger = logging.getLogger(__name__)

VOCAB_FORMAT = "timelinelm-vocab/1"

# Label value ignored by the loss. Outside every valid vocabulary id and
# recorded in checkpoint headers; nothing relies on any particular value.
IGNORE_LABEL = -1

BOS_TOKEN = "<s>"
PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
RISK_TOKEN = "<risk>"
CORE_SPECIALS = (BOS_TOKEN, PAD_TOKEN, OOV_TOKEN, RISK_TOKEN)


@dataclass
class Vocabulary:
    special_tokens: dict[str, int]
    base_tokens: dict[str, int]
    concept_tokens: dict[str, int] = field(default_factory=dict)
    concept_types: dict[str, str] = field(default_factory=dict)
    ignore_label_id: int = IGNORE_LABEL

    def __post_init__(self):
        self._rebuild_reverse()

    def _rebuild_reverse(self):
        self._by_id: dict[int, tuple[str, str]] = {}
        for kind, table in (("special", self.special_tokens),
                            ("base", self.base_tokens),
                            ("concept", self.concept_tokens)):
            for token, idx in table.items():
                self._by_id[idx] = (kind, token)

    def __len__(self) -> int:
        return len(self.special_tokens) + len(self.base_tokens) + len(self.concept_tokens)

    @property
    def bos_id(self) -> int:
        return self.special_tokens[BOS_TOKEN]

    @property
    def pad_id(self) -> int:
        return self.special_tokens[PAD_TOKEN]

    @property
    def oov_id(self) -> int:
        return self.special_tokens[OOV_TOKEN]

    @property
    def risk_id(self) -> int:
        return self.special_tokens[RISK_TOKEN]

    def kind_of(self, idx: int) -> str:
        return self._by_id[idx][0]

    def token_of(self, idx: int) -> str:
        return self._by_id[idx][1]

    def is_concept_id(self, idx: int) -> bool:
        return self._by_id.get(idx, ("", ""))[0] == "concept"

    def concept_id(self, code: str) -> int:
        try:
            return self.concept_tokens[code]
        except KeyError:
            raise DataError(f"unknown concept code {code!r}") from None

    def concept_ids_of_type(self, concept_type: str | None) -> list[int]:
        """Concept token ids, optionally restricted to one concept type,
        in lexicographic code order."""
        codes = sorted(
            code for code in self.concept_tokens
            if concept_type is None or self.concept_types.get(code) == concept_type
        )
        return [self.concept_tokens[c] for c in codes]

    def to_text(self) -> str:
        lines = [f"{VOCAB_FORMAT}\tignore={self.ignore_label_id}"]
        for idx in range(len(self)):
            kind, token = self._by_id[idx]
            if "\t" in token or "\n" in token:
                raise DataError(f"token {token!r} contains tab/newline")
            extra = self.concept_types.get(token, "-") if kind == "concept" else "-"
            lines.append(f"{idx}\t{kind}\t{token}\t{extra}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


@dataclass
class EncodedNote:
    patient_id: str
    token_ids: list[int]
    concept_positions: list[int]  # indices of concept-code tokens only


def fit_base_vocab(notes: list[ReconstructedNote], min_freq: int = 1) -> Vocabulary:
    """Frequency-cut word vocabulary over text segments, with registered
    specials: core tokens, the full separator ladder, and every special token
    appearing in the notes. Deterministic: words ordered by (-count, word)."""
    if not notes:
        raise DataError("cannot fit a vocabulary on zero notes")
    counts: dict[str, int] = {}
    seen_specials: set[str] = set()
    any_text = False
    for note in notes:
        for seg in note.segments:
            if isinstance(seg, TextSegment):
                for word in seg.text.split():
                    any_text = True
                    counts[word] = counts.get(word, 0) + 1
            elif isinstance(seg, SpecialTokenSegment):
                seen_specials.add(seg.token)
    if not any_text:
        raise DataError("notes contain no text; nothing to fit")

    specials: dict[str, int] = {}
    for token in (*CORE_SPECIALS, *all_separator_tokens(), *sorted(seen_specials)):
        if token not in specials:
            specials[token] = len(specials)
    base: dict[str, int] = {}
    next_id = len(specials)
    for word in sorted(counts, key=lambda w: (-counts[w], w)):
        if counts[word] >= min_freq:
            base[word] = next_id
            next_id += 1
    return Vocabulary(special_tokens=specials, base_tokens=base)


def init_base_embeddings(vocab: Vocabulary, dim: int, seed: int) -> np.ndarray:
    """Seeded N(0, 0.02^2) rows for every current vocabulary entry."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((len(vocab), dim)) * 0.02


def _name_token_row(vocab: Vocabulary, embeddings: np.ndarray, word: str) -> np.ndarray:
    idx = vocab.base_tokens.get(word)
    if idx is None:
        idx = vocab.base_tokens.get(word.casefold(), vocab.oov_id)
    return embeddings[idx]


def add_concept_tokens(vocab: Vocabulary, embeddings: np.ndarray,
                       entries: list[ConceptEntry],
                       all_token_mean: bool = False) -> tuple[Vocabulary, np.ndarray]:
    """Append one token per concept code with name-averaged embedding rows.

    ``all_token_mean=True`` switches to the mean of every existing embedding
    row instead; it is off by default because it destabilises training.
    Returns a new vocabulary and matrix; existing ids and rows are unchanged.
    """
    if embeddings.shape[0] != len(vocab):
        raise DataError(
            f"embedding rows ({embeddings.shape[0]}) do not match vocab size ({len(vocab)})"
        )
    for entry in entries:
        if entry.code in vocab.concept_tokens:
            raise DataError(f"concept code {entry.code!r} already in vocabulary")
    by_code = {e.code: e for e in entries}
    new_concepts = dict(vocab.concept_tokens)
    new_types = dict(vocab.concept_types)
    rows = [embeddings]
    next_id = len(vocab)
    all_mean = embeddings.mean(axis=0) if all_token_mean else None
    for code in sorted(by_code):
        entry = by_code[code]
        new_concepts[code] = next_id
        new_types[code] = entry.concept_type
        next_id += 1
        if all_token_mean:
            row = all_mean
        else:
            words, _ = tokenize_text(entry.canonical_name)
            name_rows = np.stack([_name_token_row(vocab, embeddings, w) for w in words])
            row = name_rows.mean(axis=0)
        rows.append(row[None, :])
    expanded = Vocabulary(
        special_tokens=dict(vocab.special_tokens),
        base_tokens=dict(vocab.base_tokens),
        concept_tokens=new_concepts,
        concept_types=new_types,
        ignore_label_id=vocab.ignore_label_id,
    )
    return expanded, np.concatenate(rows, axis=0)


def encode(note: ReconstructedNote, vocab: Vocabulary) -> EncodedNote:
    """Segments to ids; records the positions of concept-code tokens (special
    separator/demographic tokens are deliberately not recorded, so they are
    never supervised)."""
    ids: list[int] = []
    positions: list[int] = []
    for seg in note.segments:
        if isinstance(seg, TextSegment):
            for word in seg.text.split():
                ids.append(vocab.base_tokens.get(word, vocab.oov_id))
        elif isinstance(seg, ConceptTokenSegment):
            positions.append(len(ids))
            ids.append(vocab.concept_id(seg.code))
        else:
            idx = vocab.special_tokens.get(seg.token)
            if idx is None:
                raise DataError(f"unknown special token {seg.token!r}")
            ids.append(idx)
    return EncodedNote(patient_id=note.patient_id, token_ids=ids, concept_positions=positions)


def decode(encoded: EncodedNote, vocab: Vocabulary) -> ReconstructedNote:
    """Inverse of encode for in-vocabulary notes (OOV words decode to the OOV
    token, so the round trip is exact only when every word is in vocabulary)."""
    segments: list = []
    words: list[str] = []

    def flush_words():
        if words:
            segments.append(TextSegment(" ".join(words)))
            words.clear()

    for idx in encoded.token_ids:
        kind, token = vocab._by_id[idx]
        if kind == "base":
            words.append(token)
        elif kind == "concept":
            flush_words()
            segments.append(ConceptTokenSegment(token))
        else:
            flush_words()
            segments.append(SpecialTokenSegment(token))
    flush_words()
    return ReconstructedNote(patient_id=encoded.patient_id, segments=segments)


def save_vocab_file(vocab: Vocabulary, path) -> None:
    Path(path).write_text(vocab.to_text(), encoding="utf-8")


def load_vocab_file(path) -> Vocabulary:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataError(f"empty vocabulary file {path}")
    header = lines[0].split("\t")
    if header[0] != VOCAB_FORMAT:
        raise DataError(f"unsupported vocabulary format {header[0]!r}")
    ignore = int(header[1].removeprefix("ignore=")) if len(header) > 1 else IGNORE_LABEL
    specials: dict[str, int] = {}
    base: dict[str, int] = {}
    concepts: dict[str, int] = {}
    types: dict[str, str] = {}
    for line in lines[1:]:
        if not line:
            continue
        idx_s, kind, token, extra = line.split("\t")
        idx = int(idx_s)
        if kind == "special":
            specials[token] = idx
        elif kind == "base":
            base[token] = idx
        elif kind == "concept":
            concepts[token] = idx
            types[token] = extra
        else:
            raise DataError(f"unknown vocab kind {kind!r}")
    return Vocabulary(special_tokens=specials, base_tokens=base,
                      concept_tokens=concepts, concept_types=types,
                      ignore_label_id=ignore)
