"""Next-concept prediction metrics: T-day windows, new/recurring strata,
top-N candidate sets and per-type filtering, with micro-averaged "All" rows.

One evaluation point exists per concept event with at least one predecessor;
its ranking is computed from everything strictly before it. Precision asks
whether any type-filtered candidate materialises (in the matching stratum)
within T days after the point. Recall is look-back coverage over the same
points: an occurrence counts as recalled if its code was ranked top-N at any
point up to T days before it, including the ranking produced at the
occurrence itself (whose context is strictly earlier). Both metrics therefore
share their per-stratum supports, and a perfect oracle scores 1.0 everywhere.
"""

import logging
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .annotator import CONCEPT_TYPES
from .timeline import PatientTimeline
from .training import Checkpoint
from .network import next_distribution
from .vocab import EncodedNote, Vocabulary

logger = logging.getLogger(__name__)

NEW = "New"
RECURRING = "Recurring"

DEFAULT_T_GRID = (30, 365, float("inf"))
DEFAULT_N_GRID = (1, 5, 10)


@dataclass
class EvalPoint:
    patient_id: str
    position: int  # index into the timeline's concept-event sequence
    gold_code: str
    gold_type: str
    occurred_at: int  # day index
    temporality: str  # NEW iff the code never appeared earlier in the timeline


@dataclass
class MetricsRow:
    concept_type: str  # a concept type or "All"
    t_days: float
    at_n: int
    precision_new: float | None
    precision_recurring: float | None
    recall_new: float | None
    recall_recurring: float | None
    support_new: int
    support_recurring: int


def enumerate_eval_points(timeline: PatientTimeline,
                          type_map: dict[str, str]) -> list[EvalPoint]:
    points = []
    seen: set[str] = set()
    for position, event in enumerate(timeline.concepts()):
        if position > 0:
            points.append(EvalPoint(
                patient_id=timeline.patient_id,
                position=position,
                gold_code=event.code,
                gold_type=type_map.get(event.code, "Unknown"),
                occurred_at=event.bucket_date,
                temporality=NEW if event.code not in seen else RECURRING,
            ))
        seen.add(event.code)
    return points


class _TimelineIndex:
    """Occurrence days per code plus prefix-history sets for one timeline."""

    def __init__(self, timeline: PatientTimeline, type_map: dict[str, str]):
        self.concepts = [(e.code, e.bucket_date) for e in timeline.concepts()]
        self.types = [type_map.get(c, "Unknown") for c, _ in self.concepts]
        self.days_by_code: dict[str, list[int]] = {}
        for code, day in self.concepts:
            self.days_by_code.setdefault(code, []).append(day)
        self.history: list[set[str]] = []
        seen: set[str] = set()
        for code, _ in self.concepts:
            self.history.append(set(seen))
            seen.add(code)

    def occurs_within(self, code: str, lo: int, hi: float) -> bool:
        days = self.days_by_code.get(code)
        if not days:
            return False
        i = bisect_left(days, lo)
        return i < len(days) and days[i] <= hi


def precision_hit(point: EvalPoint, candidates: list[str], index: _TimelineIndex,
                  t_days: float) -> bool:
    """Any candidate occurring within [occurred_at, occurred_at + T] whose
    stratum relative to the point matches the point's temporality."""
    history = index.history[point.position]
    lo = point.occurred_at
    hi = point.occurred_at + t_days
    want_new = point.temporality == NEW
    for code in candidates:
        if (code not in history) != want_new:
            continue
        if index.occurs_within(code, lo, hi):
            return True
    return False


def recall_hit(point: EvalPoint, index: _TimelineIndex, candidates_at, t_days: float,
               n: int) -> bool:
    """Was this occurrence's code ranked top-N (filtered to its type) at any
    point within the look-back window [day - T, day]?"""
    for p in range(point.position, 0, -1):
        if index.concepts[p][1] < point.occurred_at - t_days:
            break
        if point.gold_code in candidates_at(p, point.gold_type, n):
            return True
    return False


class _Tally:
    __slots__ = ("hits", "total")

    def __init__(self):
        self.hits = 0
        self.total = 0

    def add(self, hit: bool):
        self.total += 1
        self.hits += bool(hit)

    @property
    def ratio(self) -> float | None:
        return self.hits / self.total if self.total else None


def compute_metrics(predictor, timelines: list[PatientTimeline],
                    type_map: dict[str, str],
                    t_grid=DEFAULT_T_GRID, n_grid=DEFAULT_N_GRID,
                    types=CONCEPT_TYPES) -> list[MetricsRow]:
    """Score a predictor over the full (type x T x N) grid.

    ``predictor.candidates(timeline, position, concept_type, n)`` must return
    a ranked code list computed from events strictly before ``position``.
    "All" rows are micro-averages: every point is pooled, filtered by its own
    gold type.
    """
    max_n = max(n_grid)
    precision: dict[tuple, _Tally] = {}
    recall: dict[tuple, _Tally] = {}

    def tally(table, key) -> _Tally:
        if key not in table:
            table[key] = _Tally()
        return table[key]

    for timeline in timelines:
        index = _TimelineIndex(timeline, type_map)
        points = enumerate_eval_points(timeline, type_map)
        cache: dict[tuple[int, str], list[str]] = {}

        def candidates_at(position: int, concept_type: str, n: int) -> list[str]:
            key = (position, concept_type)
            if key not in cache:
                cache[key] = predictor.candidates(timeline, position, concept_type, max_n)
            return cache[key][:n]

        for point in points:
            row_types = [point.gold_type, "All"]
            for n in n_grid:
                cands = candidates_at(point.position, point.gold_type, n)
                for t in t_grid:
                    p_hit = precision_hit(point, cands, index, t)
                    r_hit = recall_hit(point, index, candidates_at, t, n)
                    for rt in row_types:
                        tally(precision, (rt, t, n, point.temporality)).add(p_hit)
                        tally(recall, (rt, t, n, point.temporality)).add(r_hit)

    rows = []
    for rt in ("All", *types):
        for t in t_grid:
            for n in n_grid:
                p_new = precision.get((rt, t, n, NEW), _Tally())
                p_rec = precision.get((rt, t, n, RECURRING), _Tally())
                r_new = recall.get((rt, t, n, NEW), _Tally())
                r_rec = recall.get((rt, t, n, RECURRING), _Tally())
                rows.append(MetricsRow(
                    concept_type=rt,
                    t_days=t,
                    at_n=n,
                    precision_new=p_new.ratio,
                    precision_recurring=p_rec.ratio,
                    recall_new=r_new.ratio,
                    recall_recurring=r_rec.ratio,
                    support_new=p_new.total,
                    support_recurring=p_rec.total,
                ))
    return rows


def per_concept_report(predictor, timelines: list[PatientTimeline],
                       type_map: dict[str, str], concept_type: str,
                       temporality: str = NEW, n: int = 1,
                       t_days: float = 30) -> list[tuple[str, float, int, int]]:
    """Per predicted-code precision rows (code, precision, TP, FP), sorted by
    precision then TP, both descending."""
    tp: dict[str, int] = {}
    fp: dict[str, int] = {}
    for timeline in timelines:
        index = _TimelineIndex(timeline, type_map)
        for point in enumerate_eval_points(timeline, type_map):
            if point.gold_type != concept_type or point.temporality != temporality:
                continue
            cands = predictor.candidates(timeline, point.position, concept_type, n)
            if not cands:
                continue
            top = cands[0]
            if precision_hit(point, cands, index, t_days):
                tp[top] = tp.get(top, 0) + 1
            else:
                fp[top] = fp.get(top, 0) + 1
    rows = []
    for code in sorted(set(tp) | set(fp)):
        t, f = tp.get(code, 0), fp.get(code, 0)
        rows.append((code, t / (t + f), t, f))
    rows.sort(key=lambda r: (-r[1], -r[2], r[0]))
    return rows


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

class OraclePredictor:
    """Always ranks the concept that actually comes next first."""

    def __init__(self, type_map: dict[str, str]):
        self.type_map = type_map

    def candidates(self, timeline: PatientTimeline, position: int,
                   concept_type: str, n: int) -> list[str]:
        event = timeline.concepts()[position]
        if self.type_map.get(event.code, "Unknown") == concept_type:
            return [event.code]
        return []


class ModelPredictor:
    """Ranks concept tokens by the checkpointed model's next-token probability.

    The context for the k-th concept event is the encoded reconstructed note
    up to (excluding) that concept's token, truncated to the most recent
    max_seq_len ids. Notes that fit in the context window are scored with one
    forward pass.
    """

    def __init__(self, ckpt: Checkpoint, vocab: Vocabulary,
                 notes: dict[str, EncodedNote]):
        self.ckpt = ckpt
        self.vocab = vocab
        self.notes = notes
        self._dist: dict[tuple[str, int], np.ndarray] = {}
        self._done_full: set[str] = set()

    def _distribution(self, patient_id: str, position: int) -> np.ndarray:
        key = (patient_id, position)
        if key in self._dist:
            return self._dist[key]
        note = self.notes[patient_id]
        cfg = self.ckpt.config
        if len(note.token_ids) <= cfg.max_seq_len and patient_id not in self._done_full:
            from .network import forward

            ids = np.asarray(note.token_ids, dtype=np.int64)[None, :]
            logits, _ = forward(self.ckpt.params, cfg, ids)
            for k, cut in enumerate(note.concept_positions):
                if cut == 0:
                    continue
                row = logits[0, cut - 1]
                row = row - row.max()
                e = np.exp(row)
                self._dist[(patient_id, k)] = e / e.sum()
            self._done_full.add(patient_id)
            return self._dist[key]
        cut = note.concept_positions[position]
        probs = next_distribution(self.ckpt.params, cfg, note.token_ids[:cut])
        self._dist[key] = probs
        return probs

    def candidates(self, timeline: PatientTimeline, position: int,
                   concept_type: str, n: int) -> list[str]:
        probs = self._distribution(timeline.patient_id, position)
        ranked = sorted(
            ((self.vocab.token_of(idx), float(probs[idx]))
             for idx in self.vocab.concept_ids_of_type(concept_type)),
            key=lambda cp: (-cp[1], cp[0]),
        )
        return [code for code, _ in ranked[:n]]


# ---------------------------------------------------------------------------
# Report format
# ---------------------------------------------------------------------------

def _fmt_ratio(value: float | None) -> str:
    return "NA" if value is None else f"{value:.6f}"


def _fmt_t(t: float) -> str:
    return "inf" if t == float("inf") else str(int(t))


def metrics_report_text(rows: list[MetricsRow]) -> str:
    lines = ["type\tt_days\tat_n\tprecision_new\tprecision_recurring\t"
             "recall_new\trecall_recurring\tsupport_new\tsupport_recurring"]
    for r in rows:
        lines.append("\t".join([
            r.concept_type, _fmt_t(r.t_days), str(r.at_n),
            _fmt_ratio(r.precision_new), _fmt_ratio(r.precision_recurring),
            _fmt_ratio(r.recall_new), _fmt_ratio(r.recall_recurring),
            str(r.support_new), str(r.support_recurring),
        ]))
    return "\n".join(lines) + "\n"
