import numpy as np
import pytest

from timelinelm.annotator import ConceptEntry
from timelinelm.errors import DataError
from timelinelm.reconstruct import (ConceptTokenSegment, ReconstructedNote,
                                    SpecialTokenSegment, TextSegment)
from timelinelm.vocab import (add_concept_tokens, decode, encode, fit_base_vocab,
                              init_base_embeddings, load_vocab_file, save_vocab_file)


def _note(*segments):
    return ReconstructedNote(patient_id="p0", segments=list(segments))


NOTES = [
    _note(SpecialTokenSegment("<sex:F>"),
          TextSegment("bp high today today"),
          ConceptTokenSegment("10001"),
          TextSegment("diabetes mellitus noted")),
    _note(TextSegment("bp stable today"),
          ConceptTokenSegment("10004")),
]

ENTRIES = [
    ConceptEntry("10001", "diabetes mellitus", "Disorder"),
    ConceptEntry("10004", "bp", "Finding"),
    ConceptEntry("10007", "unseen words", "Disorder"),
]


def test_fit_contains_every_word_at_min_freq_1():
    vocab = fit_base_vocab(NOTES, min_freq=1)
    for word in ("bp", "high", "today", "diabetes", "mellitus", "noted", "stable"):
        assert word in vocab.base_tokens
    assert "<sex:F>" in vocab.special_tokens
    assert "<2 days later>" in vocab.special_tokens  # ladder pre-registered


def test_fit_is_deterministic():
    a = fit_base_vocab(NOTES, min_freq=1)
    b = fit_base_vocab(NOTES, min_freq=1)
    assert a.base_tokens == b.base_tokens and a.special_tokens == b.special_tokens


def test_rare_word_encodes_as_oov():
    vocab = fit_base_vocab(NOTES, min_freq=2)  # only "today" and "bp" survive
    assert "today" in vocab.base_tokens and "noted" not in vocab.base_tokens
    encoded = encode(_note(TextSegment("noted today")), vocab)
    assert encoded.token_ids[0] == vocab.oov_id
    assert encoded.token_ids[1] == vocab.base_tokens["today"]


def test_fit_rejects_empty():
    with pytest.raises(DataError):
        fit_base_vocab([], min_freq=1)
    with pytest.raises(DataError):
        fit_base_vocab([_note(ConceptTokenSegment("10001"))], min_freq=1)


def _expanded(all_token_mean=False):
    vocab = fit_base_vocab(NOTES, min_freq=1)
    emb = init_base_embeddings(vocab, dim=16, seed=5)
    return vocab, emb, *add_concept_tokens(vocab, emb, ENTRIES,
                                           all_token_mean=all_token_mean)


def test_concept_embedding_is_name_mean():
    vocab, emb, vocab2, emb2 = _expanded()
    row = emb2[vocab2.concept_tokens["10001"]]
    expected = (emb[vocab.base_tokens["diabetes"]] + emb[vocab.base_tokens["mellitus"]]) / 2
    assert np.abs(row - expected).max() < 1e-6


def test_single_word_name_copies_embedding():
    vocab, emb, vocab2, emb2 = _expanded()
    row = emb2[vocab2.concept_tokens["10004"]]
    assert np.array_equal(row, emb[vocab.base_tokens["bp"]])


def test_oov_name_words_use_oov_row():
    vocab, emb, vocab2, emb2 = _expanded()
    row = emb2[vocab2.concept_tokens["10007"]]
    assert np.allclose(row, emb[vocab.oov_id])


def test_all_token_mean_flag_changes_rows():
    _, _, _, emb_name = _expanded(all_token_mean=False)
    vocab, emb, vocab2, emb_mean = _expanded(all_token_mean=True)
    code_row = vocab2.concept_tokens["10001"]
    assert not np.allclose(emb_name[code_row], emb_mean[code_row])
    assert np.allclose(emb_mean[code_row], emb.mean(axis=0))


def test_expansion_preserves_existing_rows_and_ids():
    vocab, emb, vocab2, emb2 = _expanded()
    assert np.array_equal(emb2[:len(vocab)], emb)
    assert vocab2.base_tokens == vocab.base_tokens
    assert vocab2.special_tokens == vocab.special_tokens
    assert len(vocab2) == len(vocab) + len(ENTRIES)
    ids = sorted(vocab2.concept_tokens.values())
    assert ids == list(range(len(vocab), len(vocab2)))


def test_duplicate_code_rejected():
    vocab, emb, vocab2, emb2 = _expanded()
    with pytest.raises(DataError, match="already"):
        add_concept_tokens(vocab2, emb2, [ENTRIES[0]])


def test_encode_positions_and_round_trip():
    _, _, vocab2, _ = _expanded()
    note = _note(TextSegment("bp high"), ConceptTokenSegment("10004"))
    encoded = encode(note, vocab2)
    assert len(encoded.token_ids) == 3
    assert encoded.concept_positions == [2]
    assert decode(encoded, vocab2) == note


def test_encode_no_concepts():
    _, _, vocab2, _ = _expanded()
    encoded = encode(_note(TextSegment("bp high")), vocab2)
    assert encoded.concept_positions == []


def test_encode_unknown_code_fails():
    vocab = fit_base_vocab(NOTES, min_freq=1)
    with pytest.raises(DataError, match="99999"):
        encode(_note(ConceptTokenSegment("99999")), vocab)


def test_specials_not_recorded_as_concept_positions():
    _, _, vocab2, _ = _expanded()
    note = _note(SpecialTokenSegment("<2 days later>"), ConceptTokenSegment("10004"))
    encoded = encode(note, vocab2)
    assert encoded.concept_positions == [1]


def test_decode_encode_identity_on_corpus_notes():
    _, _, vocab2, _ = _expanded()
    for note in NOTES:
        assert decode(encode(note, vocab2), vocab2) == note


def test_vocab_file_round_trip(tmp_path):
    _, _, vocab2, _ = _expanded()
    path = tmp_path / "vocab.txt"
    save_vocab_file(vocab2, path)
    loaded = load_vocab_file(path)
    assert loaded.special_tokens == vocab2.special_tokens
    assert loaded.base_tokens == vocab2.base_tokens
    assert loaded.concept_tokens == vocab2.concept_tokens
    assert loaded.concept_types == vocab2.concept_types
    assert loaded.content_hash() == vocab2.content_hash()
