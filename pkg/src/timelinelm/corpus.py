"""Patient/document data model, corpus file IO, synthetic EHR generation and
patient-level train/test splitting.

A corpus file is line-delimited JSON (schema ``corpus/1``). Patient header
records carry ``{patient_id, sex, ethnicity, birth_date}``; document records
carry ``{patient_id, doc_id, created_at, text}``. Dates are ISO-8601 strings
on disk and are converted to ``datetime``/``date`` objects (and day indices
where needed) in memory.
"""

import datetime as dt
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataError, ParseError
from .records import read_records, write_records

logger = logging.getLogger(__name__)

CORPUS_SCHEMA = "corpus/1"
_EPOCH = dt.date(1970, 1, 1)

SEXES = ("M", "F", "U")


def day_index(d: dt.date | dt.datetime) -> int:
    """Days since 1970-01-01; document timestamps are bucketed at day level."""
    if isinstance(d, dt.datetime):
        d = d.date()
    return (d - _EPOCH).days


def date_from_day(day: int) -> dt.date:
    return _EPOCH + dt.timedelta(days=day)


@dataclass
class ClinicalDocument:
    patient_id: str
    doc_id: str
    created_at: dt.datetime
    text: str

    @property
    def day(self) -> int:
        return day_index(self.created_at)


@dataclass
class PatientRecord:
    patient_id: str
    sex: str
    ethnicity: str
    birth_date: dt.date
    documents: list[ClinicalDocument] = field(default_factory=list)

    def age_years_at(self, day: int) -> int:
        """Calendar age in whole years on the given day index."""
        d = date_from_day(day)
        b = self.birth_date
        return d.year - b.year - ((d.month, d.day) < (b.month, b.day))


@dataclass
class Corpus:
    patients: list[PatientRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}


def _parse_datetime(value: str, path: str, lineno: int) -> dt.datetime:
    try:
        parsed = dt.datetime.fromisoformat(value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad created_at {value!r}", path, lineno) from exc
    if parsed.tzinfo is not None:
        parsed = parsed.astimezone(dt.timezone.utc).replace(tzinfo=None)
    return parsed


def load_corpus(path: str | Path) -> Corpus:
    """Read a corpus file, grouping documents per patient sorted by created_at.

    Raises ParseError naming the offending line for malformed records and
    DataError for duplicate (patient_id, doc_id) pairs.
    """
    path = str(path)
    patients: dict[str, PatientRecord] = {}
    pending_docs: dict[str, list[ClinicalDocument]] = {}
    seen_docs: set[tuple[str, str]] = set()
    for lineno, rec in read_records(path, CORPUS_SCHEMA):
        pid = rec.get("patient_id")
        if not pid:
            raise ParseError("record missing patient_id", path, lineno)
        if "doc_id" in rec:
            for field_name in ("doc_id", "created_at", "text"):
                if field_name not in rec:
                    raise ParseError(f"document record missing {field_name}", path, lineno)
            if not rec["text"]:
                raise ParseError("document text is empty", path, lineno)
            key = (pid, rec["doc_id"])
            if key in seen_docs:
                raise DataError(f"duplicate document {key} at line {lineno}")
            seen_docs.add(key)
            doc = ClinicalDocument(
                patient_id=pid,
                doc_id=rec["doc_id"],
                created_at=_parse_datetime(rec["created_at"], path, lineno),
                text=rec["text"],
            )
            pending_docs.setdefault(pid, []).append(doc)
        else:
            for field_name in ("sex", "ethnicity", "birth_date"):
                if field_name not in rec:
                    raise ParseError(f"patient record missing {field_name}", path, lineno)
            if rec["sex"] not in SEXES:
                raise ParseError(f"bad sex {rec['sex']!r}", path, lineno)
            if pid in patients:
                raise DataError(f"duplicate patient {pid!r} at line {lineno}")
            try:
                birth = dt.date.fromisoformat(rec["birth_date"])
            except ValueError as exc:
                raise ParseError(f"bad birth_date {rec['birth_date']!r}", path, lineno) from exc
            patients[pid] = PatientRecord(pid, rec["sex"], rec["ethnicity"], birth)
    for pid, docs in pending_docs.items():
        if pid not in patients:
            raise DataError(f"documents for unknown patient {pid!r}")
        docs.sort(key=lambda d: (d.created_at, d.doc_id))
        patients[pid].documents = docs
    for rec in patients.values():
        for doc in rec.documents:
            if doc.created_at.date() < rec.birth_date:
                raise DataError(
                    f"document {doc.doc_id!r} of patient {rec.patient_id!r} predates birth"
                )
    return Corpus(patients=list(patients.values()))


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    def _records():
        for p in corpus.patients:
            yield {
                "patient_id": p.patient_id,
                "sex": p.sex,
                "ethnicity": p.ethnicity,
                "birth_date": p.birth_date.isoformat(),
            }
            for doc in p.documents:
                yield {
                    "patient_id": p.patient_id,
                    "doc_id": doc.doc_id,
                    "created_at": doc.created_at.isoformat(),
                    "text": doc.text,
                }

    write_records(path, CORPUS_SCHEMA, _records())


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

DEFAULT_NOISE_WORDS = tuple(
    "patient stable today review ward round bloods taken pending results "
    "plan continue observation afebrile tolerating diet mobilising well "
    "family updated nursing notes chased clinic letter dictated follow up "
    "arranged no acute events overnight remains comfortable seen by team".split()
)

_ETHNICITIES = ("white", "black", "asian", "hispanic", "other")


@dataclass
class SyntheticConcept:
    code: str
    name: str
    concept_type: str
    synonyms: tuple[str, ...] = ()


@dataclass
class TransitionRule:
    """Plant ``target`` ``lag_days`` after each occurrence of ``source``.

    ``probability`` is evaluated independently per source occurrence. When
    ``cue`` is set, the cue word is written into the source mention sentence
    whenever the rule fires, so the surrounding text (not the concept stream
    alone) carries the signal for the upcoming target.
    """

    source: str
    target: str
    probability: float
    lag_days: int
    cue: str | None = None


@dataclass
class SyntheticConfig:
    n_patients: int
    concepts: list[SyntheticConcept]
    transition_rules: list[TransitionRule] = field(default_factory=list)
    docs_per_patient: tuple[int, int] = (3, 8)
    noise_vocabulary: tuple[str, ...] = DEFAULT_NOISE_WORDS
    seed: int = 0
    source_rate: float = 0.8  # chance a patient carries each rule source
    singleton_rate: float = 0.1  # chance of one stray single-mention concept
    concepts_per_patient: tuple[int, int] = (2, 4)  # background conditions carried
    span_days: int | None = None  # timeline span; default scales with doc count

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        codes = [c.code for c in self.concepts]
        if len(set(codes)) != len(codes):
            raise ConfigError("synthetic concept codes must be distinct")
        for rule in self.transition_rules:
            if not 0.0 <= rule.probability <= 1.0:
                raise ConfigError(f"rule probability {rule.probability} outside [0,1]")
            if rule.source not in codes or rule.target not in codes:
                raise ConfigError(f"rule {rule.source}->{rule.target} references unknown code")
            if rule.lag_days < 1:
                raise ConfigError("rule lag_days must be >= 1")
        lo, hi = self.docs_per_patient
        if not 1 <= lo <= hi:
            raise ConfigError("docs_per_patient must be a range with 1 <= lo <= hi")
        clo, chi = self.concepts_per_patient
        if not 1 <= clo <= chi:
            raise ConfigError("concepts_per_patient must be a range with 1 <= lo <= hi")
        if not self.noise_vocabulary:
            raise ConfigError("noise vocabulary must be non-empty")


def _mention_sentence(rng: random.Random, words: tuple[str, ...], surface: str,
                      cues: list[str]) -> str:
    lead = " ".join(rng.choice(words) for _ in range(rng.randint(2, 4)))
    tail = " ".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
    cue_text = (" ".join(cues) + " ") if cues else ""
    return f"{lead} {cue_text}{surface} {tail}."


def _noise_sentence(rng: random.Random, words: tuple[str, ...]) -> str:
    n = rng.randint(4, 8)
    return " ".join(rng.choice(words) for _ in range(n)) + "."


def generate_synthetic(cfg: SyntheticConfig) -> Corpus:
    """Generate a deterministic corpus with planted concept-transition rules.

    Every planted concept occurrence is mentioned twice inside its document so
    that real occurrences survive downstream singleton filtering; stray
    single-mention noise concepts are planted at ``singleton_rate`` to give
    that filter something to do. Rule targets are only ever planted by their
    rules, so the measured P(target within lag | source) tracks the configured
    probability.
    """
    cfg.validate()
    rng = random.Random(cfg.seed)
    by_code = {c.code: c for c in cfg.concepts}
    sources = sorted({r.source for r in cfg.transition_rules})
    targets = {r.target for r in cfg.transition_rules}
    background_pool = [c.code for c in cfg.concepts if c.code not in targets and c.code not in sources]
    rules_by_source: dict[str, list[TransitionRule]] = {}
    for rule in cfg.transition_rules:
        rules_by_source.setdefault(rule.source, []).append(rule)

    patients = []
    for i in range(cfg.n_patients):
        pid = f"p{i:05d}"
        sex = rng.choice(("M", "F", "M", "F", "U"))
        ethnicity = rng.choice(_ETHNICITIES)
        birth = dt.date(rng.randint(1935, 1995), rng.randint(1, 12), rng.randint(1, 28))
        start = dt.date(rng.randint(2015, 2019), rng.randint(1, 12), rng.randint(1, 28))

        n_docs = rng.randint(*cfg.docs_per_patient)
        span = cfg.span_days if cfg.span_days else 90 + 45 * n_docs
        span = max(span, n_docs + 1)
        slot_days = sorted(rng.sample(range(span), n_docs))

        if background_pool:
            k = min(len(background_pool), rng.randint(*cfg.concepts_per_patient))
            backgrounds = rng.sample(sorted(background_pool), k)
        else:
            backgrounds = []

        # planted[day] -> list of (code, cues)
        planted: dict[int, list[tuple[str, list[str]]]] = {d: [] for d in slot_days}
        for d in slot_days:
            for code in rng.sample(backgrounds, min(len(backgrounds), rng.randint(1, 2))):
                planted[d].append((code, []))

        # one occurrence per carried rule source, then fire its rules
        for src in sources:
            if rng.random() >= cfg.source_rate:
                continue
            d = rng.choice(slot_days)
            cues: list[str] = []
            for rule in rules_by_source[src]:
                if rng.random() < rule.probability:
                    planted.setdefault(d + rule.lag_days, []).append((rule.target, []))
                    if rule.cue:
                        cues.append(rule.cue)
            planted.setdefault(d, []).append((src, cues))

        singleton: tuple[int, str] | None = None
        if background_pool and rng.random() < cfg.singleton_rate:
            singleton = (rng.choice(slot_days), rng.choice(sorted(background_pool)))

        docs = []
        for seq, d in enumerate(sorted(planted)):
            sentences = [_noise_sentence(rng, cfg.noise_vocabulary)]
            for code, cues in planted[d]:
                concept = by_code[code]
                surfaces = (concept.name,) + concept.synonyms
                # mentioned twice so the occurrence is not singleton-filtered
                sentences.append(_mention_sentence(rng, cfg.noise_vocabulary,
                                                   rng.choice(surfaces), cues))
                sentences.append(_mention_sentence(rng, cfg.noise_vocabulary,
                                                   rng.choice(surfaces), []))
            if singleton is not None and singleton[0] == d:
                sentences.append(_mention_sentence(rng, cfg.noise_vocabulary,
                                                   by_code[singleton[1]].name, []))
            rng.shuffle(sentences)
            sentences.append(_noise_sentence(rng, cfg.noise_vocabulary))
            docs.append(ClinicalDocument(
                patient_id=pid,
                doc_id=f"d{seq:03d}",
                created_at=dt.datetime.combine(start + dt.timedelta(days=d), dt.time(12, 0)),
                text=" ".join(sentences),
            ))
        patients.append(PatientRecord(pid, sex, ethnicity, birth, docs))
    return Corpus(patients=patients)


def split_patients(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Random patient-level split; |test| = round(test_fraction * n)."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0,1), got {test_fraction}")
    n = len(corpus.patients)
    if n < 2:
        raise DataError(f"cannot split a corpus with {n} patient(s)")
    n_test = round(test_fraction * n)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    test_idx = set(order[:n_test])
    train = [p for i, p in enumerate(corpus.patients) if i not in test_idx]
    test = [p for i, p in enumerate(corpus.patients) if i in test_idx]
    logger.info("split %d patients into %d train / %d test", n, len(train), len(test))
    return Corpus(patients=train), Corpus(patients=test)
