"""30-day disorder risk forecasting: dataset construction from timeline
splits, second-stage fine-tuning, constrained top-5 decoding, and at-least-N
scoring with a pluggable match oracle."""

import logging
from dataclasses import dataclass

import numpy as np

from .annotator import TokenizedDocument
from .errors import DataError
from .network import next_distribution
from .reconstruct import render_note
from .timeline import ConceptEvent, PatientTimeline
from .training import (Checkpoint, OptimizerConfig, TrainingExample, train)
from .vocab import IGNORE_LABEL, EncodedNote, Vocabulary, encode

logger = logging.getLogger(__name__)

FUTURE_WINDOW_DAYS = 30
MAX_HISTORY_CONCEPTS = 50
MIN_FUTURE_DISORDERS = 5
PREDICTION_LIMIT = 5


@dataclass
class RiskExample:
    patient_id: str
    history: PatientTimeline  # timeline prefix, up to and incl. the split concept
    split_day: int
    labels: list[str]  # unique new disorder codes, ordered by first future occurrence

    def history_codes(self) -> set[str]:
        return {e.code for e in self.history.concepts()}


@dataclass
class RiskReportRow:
    model: str
    at_least: dict[int, float]  # n -> fraction of patients with >= n matches
    support: int


def split_timeline(timeline: PatientTimeline) -> tuple[PatientTimeline, list[ConceptEvent], int]:
    """Split at min(half the concepts, 50) concept events.

    Returns (history prefix, future concept events, split day). Raises
    DataError for timelines with fewer than two concept events.
    """
    concepts = timeline.concepts()
    if len(concepts) < 2:
        raise DataError(
            f"patient {timeline.patient_id}: need >= 2 concept events to split"
        )
    keep = min(len(concepts) // 2, MAX_HISTORY_CONCEPTS)
    seen = 0
    cut = 0
    split_event = None
    for i, event in enumerate(timeline.events):
        if isinstance(event, ConceptEvent):
            seen += 1
            if seen == keep:
                cut = i + 1
                split_event = event
                break
    history = PatientTimeline(patient_id=timeline.patient_id,
                              events=list(timeline.events[:cut]))
    return history, concepts[keep:], split_event.bucket_date


def build_risk_dataset(timelines: list[PatientTimeline],
                       type_map: dict[str, str]) -> list[RiskExample]:
    """Keep patients with >= 30 days of future data and >= 5 distinct future
    disorders in the 30-day window; labels are the new ones among those."""
    examples = []
    for timeline in timelines:
        pid = timeline.patient_id
        try:
            history, future, split_day = split_timeline(timeline)
        except DataError as exc:
            logger.info("risk: %s excluded: %s", pid, exc)
            continue
        if not future or future[-1].bucket_date - split_day < FUTURE_WINDOW_DAYS:
            logger.info("risk: %s excluded: < %d days of future data", pid,
                        FUTURE_WINDOW_DAYS)
            continue
        window = [e for e in future
                  if split_day < e.bucket_date <= split_day + FUTURE_WINDOW_DAYS
                  and type_map.get(e.code) == "Disorder"]
        distinct = {e.code for e in window}
        if len(distinct) < MIN_FUTURE_DISORDERS:
            logger.info("risk: %s excluded: %d distinct future disorders < %d",
                        pid, len(distinct), MIN_FUTURE_DISORDERS)
            continue
        history_codes = {e.code for e in history.concepts()}
        labels: list[str] = []
        for event in window:
            if event.code not in history_codes and event.code not in labels:
                labels.append(event.code)
        if not labels:
            logger.info("risk: %s excluded: no new disorders in window", pid)
            continue
        examples.append(RiskExample(patient_id=pid, history=history,
                                    split_day=split_day, labels=labels))
    return examples


def encode_history(example: RiskExample,
                   docs: dict[tuple[str, str], TokenizedDocument],
                   vocab: Vocabulary) -> EncodedNote:
    return encode(render_note(example.history, docs), vocab)


def stage2_training_example(history_ids: list[int], label_codes: list[str],
                            vocab: Vocabulary, max_seq_len: int) -> TrainingExample:
    """History + <risk> + ordered label codes, supervising only the labels.

    Histories longer than the remaining budget lose their oldest tokens.
    """
    label_ids = [vocab.concept_id(c) for c in label_codes]
    budget = max_seq_len - 1 - len(label_ids)
    if budget < 1:
        raise DataError(f"{len(label_ids)} labels do not fit in max_seq_len {max_seq_len}")
    kept = list(history_ids[-budget:])
    ids = kept + [vocab.risk_id] + label_ids
    n_pad = max_seq_len - len(ids)
    input_ids = np.array(ids + [vocab.pad_id] * n_pad, dtype=np.int64)
    labels = np.full(max_seq_len, IGNORE_LABEL, dtype=np.int64)
    risk_pos = len(kept)
    for offset, label_id in enumerate(label_ids):
        labels[risk_pos + offset] = label_id
    return TrainingExample(input_ids=input_ids, label_ids=labels)


def build_stage2_examples(examples: list[RiskExample],
                          docs: dict[tuple[str, str], TokenizedDocument],
                          vocab: Vocabulary, max_seq_len: int) -> list[TrainingExample]:
    out = []
    for ex in examples:
        history_ids = encode_history(ex, docs, vocab).token_ids
        out.append(stage2_training_example(history_ids, ex.labels, vocab, max_seq_len))
    return out


def finetune_stage2(ckpt: Checkpoint, stage2_examples: list[TrainingExample],
                    opt_cfg: OptimizerConfig, vocab: Vocabulary) -> Checkpoint:
    """Continue training from a stage-1 checkpoint for (by default) one epoch
    with otherwise unchanged hyperparameters."""
    if ckpt.vocab_hash != vocab.content_hash():
        raise DataError("checkpoint vocabulary does not match the supplied vocabulary")
    if opt_cfg.epochs != 1:
        logger.warning("stage-2 fine-tuning configured for %d epochs; 1 is the default "
                       "because more tends to overfit", opt_cfg.epochs)
    return train(stage2_examples, ckpt.config, opt_cfg,
                 tok_emb=ckpt.params["tok_emb"], vocab_hash=ckpt.vocab_hash,
                 initial_params=ckpt.params)


def predict_top5(ckpt: Checkpoint, vocab: Vocabulary, history_ids: list[int],
                 history_codes: set[str], limit: int = PREDICTION_LIMIT,
                 distribution_fn=None) -> list[str]:
    """Greedy autoregressive decode from <risk>, restricted at every step to
    disorder codes outside the history and not yet emitted."""
    if distribution_fn is None:
        def distribution_fn(ids):
            return next_distribution(ckpt.params, ckpt.config, ids)

    excluded = {c for c in history_codes if vocab.concept_types.get(c) == "Disorder"}
    ids = list(history_ids) + [vocab.risk_id]
    out: list[str] = []
    disorder_ids = vocab.concept_ids_of_type("Disorder")
    while len(out) < limit:
        probs = distribution_fn(ids)
        pool = [
            (vocab.token_of(idx), float(probs[idx]))
            for idx in disorder_ids
            if vocab.token_of(idx) not in excluded and vocab.token_of(idx) not in out
        ]
        if not pool:
            logger.warning("disorder vocabulary exhausted after %d predictions", len(out))
            break
        pool.sort(key=lambda cp: (-cp[1], cp[0]))
        code = pool[0][0]
        out.append(code)
        ids.append(vocab.concept_id(code))
    return out


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def exact_match_oracle(prediction: str, label: str) -> bool:
    return prediction == label


class EquivalenceTableOracle:
    """Matches codes/names that share an equivalence class."""

    def __init__(self, classes: list[list[str]]):
        self._class_of: dict[str, int] = {}
        for i, group in enumerate(classes):
            for member in group:
                self._class_of[member] = i

    def __call__(self, prediction: str, label: str) -> bool:
        if prediction == label:
            return True
        a = self._class_of.get(prediction)
        return a is not None and a == self._class_of.get(label)


def match_count(predictions: list[str], labels: list[str], oracle=exact_match_oracle) -> int:
    """Number of predictions matching some label; each label used once."""
    remaining = list(labels)
    count = 0
    for pred in predictions:
        for i, label in enumerate(remaining):
            if oracle(pred, label):
                count += 1
                del remaining[i]
                break
    return count


def aggregate_report(model: str, counts: list[int],
                     thresholds=(1, 2, 3)) -> RiskReportRow:
    n = len(counts)
    at_least = {
        k: (sum(1 for c in counts if c >= k) / n if n else 0.0) for k in thresholds
    }
    return RiskReportRow(model=model, at_least=at_least, support=n)


def score_at_least_n(predictions_by_patient: dict[str, list[str]],
                     labels_by_patient: dict[str, list[str]],
                     model: str = "model", oracle=exact_match_oracle) -> RiskReportRow:
    counts = [
        match_count(predictions_by_patient[pid], labels_by_patient[pid], oracle)
        for pid in sorted(predictions_by_patient)
        if pid in labels_by_patient
    ]
    return aggregate_report(model, counts)


def risk_report_text(rows: list[RiskReportRow]) -> str:
    lines = ["model\tat_least_1\tat_least_2\tat_least_3\tsupport"]
    for r in rows:
        lines.append("\t".join([
            r.model,
            *(f"{100.0 * r.at_least[k]:.1f}%" for k in (1, 2, 3)),
            str(r.support),
        ]))
    return "\n".join(lines) + "\n"
