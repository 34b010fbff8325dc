"""End-to-end pipeline orchestration: flat key-value run configuration,
stage sequencing with resume-at-stage-boundaries, and the run manifest.

Stages: corpus -> annotate -> timeline -> reconstruct -> vocab -> train ->
eval, plus the optional risk stages. Outputs are written atomically (a
``.partial`` file renamed on success) and every artifact carries a schema
version line, so resumed runs refuse mismatched inputs. In deterministic mode
(the default: fixed seed, single-threaded training) repeated runs produce
byte-identical eval and risk reports.
"""

import datetime as dt
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .annotator import (CONCEPT_TYPES, ConceptEntry, Lexicon, annotate_corpus,
                        build_lexicon, load_lexicon_file, load_mentions_file,
                        save_lexicon_file, save_mentions_file, tokenized_documents)
from .corpus import (Corpus, SyntheticConcept, SyntheticConfig, TransitionRule,
                     generate_synthetic, load_corpus, split_patients, write_corpus)
from .errors import ConfigError, DataError, StageError, TimelineLMError
from .evaluation import (DEFAULT_N_GRID, DEFAULT_T_GRID, ModelPredictor,
                         compute_metrics, metrics_report_text)
from .judge import EndpointConfig
from .network import ModelConfig
from .records import read_records, write_records
from .reconstruct import render_notes, load_notes_file, save_notes_file, strip_context
from .risk import (build_risk_dataset, build_stage2_examples, encode_history,
                   finetune_stage2, predict_top5, risk_report_text, score_at_least_n)
from .timeline import build_timelines, load_timelines_file, save_timelines_file
from .training import (Checkpoint, OptimizerConfig, load_checkpoint, pack_examples,
                       save_checkpoint, train)
from .vocab import (add_concept_tokens, encode, fit_base_vocab, init_base_embeddings,
                    load_vocab_file, save_vocab_file)

logger = logging.getLogger(__name__)

RISK_SCHEMA = "risk/1"
PREDICTIONS_SCHEMA = "risk-predictions/1"


# ---------------------------------------------------------------------------
# Flat key-value config files with include support
# ---------------------------------------------------------------------------

def parse_config_file(path: str | Path, _seen: set | None = None) -> dict[str, list[str]]:
    """Parse ``key = value`` lines; repeated keys accumulate; ``include <path>``
    splices another file relative to the current one."""
    path = Path(path)
    _seen = _seen or set()
    resolved = path.resolve()
    if resolved in _seen:
        raise ConfigError(f"config include cycle at {path}")
    _seen.add(resolved)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("include "):
            for key, values in parse_config_file(path.parent / line[8:].strip(), _seen).items():
                out.setdefault(key, []).extend(values)
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out.setdefault(key.strip(), []).append(value.strip())
    return out


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus_path: str | None = None  # ingest this file instead of generating
    lexicon_path: str | None = None
    synthetic: SyntheticConfig | None = None
    test_fraction: float = 0.05
    bucket_days: int = 1
    context_tokens: int = 50
    vocab_min_freq: int = 1
    t_grid: tuple = DEFAULT_T_GRID
    n_grid: tuple = DEFAULT_N_GRID
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    risk_enabled: bool = True
    stage2_epochs: int = 1
    full_lm: bool = False  # ablation: standard objective, every token a target
    strip_context: bool = False  # ablation: concepts-only notes
    oracle: str = "exact"  # exact | table | llm
    equivalence_table: str | None = None
    judge: EndpointConfig | None = None
    jobs: int = 1

    def config_hash(self) -> str:
        payload = asdict(self)
        payload.pop("out_dir")
        if payload.get("judge"):
            payload["judge"].pop("api_key", None)  # secrets stay out of hashes
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _single(kv: dict[str, list[str]], key: str, default=None) -> str | None:
    values = kv.get(key)
    if not values:
        return default
    if len(values) > 1:
        raise ConfigError(f"config key {key!r} given {len(values)} times")
    return values[0]


def _parse_bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


def _parse_concept(value: str) -> SyntheticConcept:
    parts = [p.strip() for p in value.split("|")]
    if len(parts) < 3:
        raise ConfigError(f"concept needs code|name|type[|syn;syn], got {value!r}")
    synonyms = tuple(s.strip() for s in parts[3].split(";") if s.strip()) if len(parts) > 3 else ()
    return SyntheticConcept(parts[0], parts[1], parts[2], synonyms)


def _parse_rule(value: str) -> TransitionRule:
    parts = [p.strip() for p in value.split("|")]
    if len(parts) < 4:
        raise ConfigError(f"rule needs source|target|prob|lag[|cue], got {value!r}")
    cue = parts[4] if len(parts) > 4 and parts[4] else None
    return TransitionRule(parts[0], parts[1], float(parts[2]), int(parts[3]), cue)


def build_run_config(kv: dict[str, list[str]]) -> RunConfig:
    cfg = RunConfig()
    cfg.seed = int(_single(kv, "seed", "0"))
    cfg.out_dir = _single(kv, "out_dir", cfg.out_dir)
    cfg.corpus_path = _single(kv, "corpus")
    cfg.lexicon_path = _single(kv, "lexicon")
    cfg.test_fraction = float(_single(kv, "test_fraction", "0.05"))
    cfg.bucket_days = int(_single(kv, "bucket_days", "1"))
    cfg.context_tokens = int(_single(kv, "context_tokens", "50"))
    cfg.vocab_min_freq = int(_single(kv, "vocab_min_freq", "1"))
    if "t_grid" in kv:
        cfg.t_grid = tuple(
            float("inf") if v.strip() == "inf" else int(v)
            for v in _single(kv, "t_grid").split(","))
    if "n_grid" in kv:
        cfg.n_grid = tuple(int(v) for v in _single(kv, "n_grid").split(","))
    cfg.model = ModelConfig(
        n_layers=int(_single(kv, "n_layers", "2")),
        n_heads=int(_single(kv, "n_heads", "4")),
        model_dim=int(_single(kv, "model_dim", "64")),
        ff_dim=int(_single(kv, "ff_dim", "256")),
        max_seq_len=int(_single(kv, "max_seq_len", "256")),
        dropout=float(_single(kv, "dropout", "0.0")),
        seed=cfg.seed,
    )
    cfg.optimizer = OptimizerConfig(
        learning_rate=float(_single(kv, "learning_rate", "1e-3")),
        beta1=float(_single(kv, "beta1", "0.9")),
        beta2=float(_single(kv, "beta2", "0.95")),
        weight_decay=float(_single(kv, "weight_decay", "0.0")),
        warmup_ratio=float(_single(kv, "warmup_ratio", "0.1")),
        grad_accum=int(_single(kv, "grad_accum", "2")),
        epochs=int(_single(kv, "epochs", "1")),
        batch_size=int(_single(kv, "batch_size", "8")),
    )
    cfg.risk_enabled = _parse_bool(_single(kv, "risk_enabled", "true"))
    cfg.stage2_epochs = int(_single(kv, "stage2_epochs", "1"))
    cfg.full_lm = _parse_bool(_single(kv, "full_lm", "false"))
    cfg.strip_context = _parse_bool(_single(kv, "strip_context", "false"))
    cfg.oracle = _single(kv, "oracle", "exact")
    cfg.equivalence_table = _single(kv, "equivalence_table")
    cfg.jobs = int(_single(kv, "jobs", "1"))

    if "n_patients" in kv or "concept" in kv:
        concepts = [_parse_concept(v) for v in kv.get("concept", [])]
        rules = [_parse_rule(v) for v in kv.get("rule", [])]
        docs_range = tuple(int(v) for v in _single(kv, "docs_per_patient", "3,8").split(","))
        carried = tuple(int(v) for v in _single(kv, "concepts_per_patient", "2,4").split(","))
        span = _single(kv, "span_days")
        cfg.synthetic = SyntheticConfig(
            n_patients=int(_single(kv, "n_patients", "100")),
            concepts=concepts,
            transition_rules=rules,
            docs_per_patient=docs_range,  # type: ignore[arg-type]
            concepts_per_patient=carried,  # type: ignore[arg-type]
            span_days=int(span) if span else None,
            seed=cfg.seed,
        )
    if "judge_url" in kv:
        cfg.judge = EndpointConfig(
            url=_single(kv, "judge_url"),
            model=_single(kv, "judge_model", "gpt-4-turbo"),
            api_key=os.environ.get("JUDGE_API_KEY", _single(kv, "judge_api_key")),
            auth_header=_single(kv, "judge_auth_header", "Authorization"),
            max_concurrent=cfg.jobs,
        )
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    return build_run_config(parse_config_file(path))


def validate_config(cfg: RunConfig) -> list[str]:
    """Empty list iff every stage's preconditions are satisfiable."""
    violations = []
    if not 0.0 < cfg.test_fraction < 1.0:
        violations.append(f"corpus: test_fraction {cfg.test_fraction} outside (0,1)")
    if cfg.bucket_days < 1:
        violations.append(f"timeline: bucket_days {cfg.bucket_days} must be >= 1")
    if cfg.context_tokens < 0:
        violations.append(f"annotator: context_tokens {cfg.context_tokens} negative")
    if cfg.vocab_min_freq < 1:
        violations.append(f"tokenizer: vocab_min_freq {cfg.vocab_min_freq} must be >= 1")
    for t in cfg.t_grid:
        if t != float("inf") and t <= 0:
            violations.append(f"eval: T grid value {t} must be positive or inf")
    for n in cfg.n_grid:
        if n < 1:
            violations.append(f"eval: N grid value {n} must be >= 1")
    try:
        cfg.model.validate()
    except ConfigError as exc:
        violations.append(f"model: {exc}")
    try:
        cfg.optimizer.validate()
    except ConfigError as exc:
        violations.append(f"model: {exc}")
    if cfg.corpus_path is None and cfg.synthetic is None:
        violations.append("corpus: neither an input corpus nor synthetic settings given")
    if cfg.synthetic is not None:
        try:
            cfg.synthetic.validate()
        except ConfigError as exc:
            violations.append(f"corpus: {exc}")
    if cfg.corpus_path is not None and cfg.lexicon_path is None:
        violations.append("annotator: an ingested corpus needs an explicit lexicon file")
    if cfg.oracle not in ("exact", "table", "llm"):
        violations.append(f"risk: unknown oracle {cfg.oracle!r}")
    if cfg.oracle == "table" and not cfg.equivalence_table:
        violations.append("risk: oracle 'table' needs equivalence_table")
    if cfg.oracle == "llm" and cfg.judge is None:
        violations.append("risk: oracle 'llm' needs judge endpoint settings")
    if cfg.stage2_epochs < 1:
        violations.append("risk: stage2_epochs must be >= 1")
    return violations


# ---------------------------------------------------------------------------
# Manifest and staged execution
# ---------------------------------------------------------------------------

def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    created_at: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    stages: dict[str, dict] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        data = json.loads(path.read_text())
        return cls(**data)


class _Run:
    """Stage driver: skips stages whose key (config hash + upstream digests)
    matches the manifest, and retains ``.partial`` files on failure."""

    def __init__(self, cfg: RunConfig, out_dir: Path, resume: bool):
        self.cfg = cfg
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if resume and self.manifest_path.exists():
            self.manifest = RunManifest.load(self.manifest_path)
            if self.manifest.config_hash != cfg.config_hash():
                logger.info("config changed; previous stage results invalidated")
                self.manifest = RunManifest(config_hash=cfg.config_hash())
        else:
            self.manifest = RunManifest(config_hash=cfg.config_hash())
        self.manifest.created_at = self.manifest.created_at or \
            dt.datetime.now(dt.timezone.utc).isoformat()

    def path(self, name: str) -> Path:
        return self.dir / name

    def stage(self, name: str, outputs: list[str], producer, upstream: list[str]) -> None:
        key_parts = [self.cfg.config_hash()]
        for dep in upstream:
            key_parts.append(self.manifest.stages[dep]["key"])
            key_parts.extend(sorted(self.manifest.stages[dep]["outputs"].values()))
        key = hashlib.sha256("|".join(key_parts).encode()).hexdigest()
        record = self.manifest.stages.get(name)
        if record and record["key"] == key and all(self.path(o).exists() for o in outputs):
            logger.info("stage %s: up to date, skipping", name)
            return
        logger.info("stage %s: running", name)
        partials = {o: self.path(o + ".partial") for o in outputs}
        try:
            producer({o: partials[o] for o in outputs})
        except TimelineLMError as exc:
            raise StageError(name, str(exc)) from exc
        for final_name, partial in partials.items():
            if not partial.exists():
                raise StageError(name, f"stage did not produce {final_name}")
            os.replace(partial, self.path(final_name))
        self.manifest.stages[name] = {
            "key": key,
            "outputs": {o: _digest_file(self.path(o)) for o in outputs},
            "completed_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        }
        self.manifest.save(self.manifest_path)


def _load_or_build_lexicon(cfg: RunConfig) -> list[ConceptEntry]:
    if cfg.lexicon_path:
        return load_lexicon_file(cfg.lexicon_path).entries
    assert cfg.synthetic is not None
    return [ConceptEntry(c.code, c.name, c.concept_type, c.synonyms)
            for c in cfg.synthetic.concepts]


def initial_embeddings(vocab, entries: list[ConceptEntry], dim: int, seed: int):
    """Recreate the deterministic embedding init for a saved vocabulary:
    seeded rows for specials+base, name-averaged rows for concepts."""
    from .vocab import Vocabulary

    base = Vocabulary(dict(vocab.special_tokens), dict(vocab.base_tokens),
                      ignore_label_id=vocab.ignore_label_id)
    emb = init_base_embeddings(base, dim, seed)
    expanded, emb = add_concept_tokens(base, emb, entries)
    if expanded.concept_tokens != vocab.concept_tokens:
        raise DataError("lexicon entries do not match the vocabulary's concepts")
    return emb


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None,
                 resume: bool = True) -> RunManifest:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    run = _Run(cfg, Path(out_dir or cfg.out_dir), resume)
    if cfg.corpus_path:
        run.manifest.inputs["corpus"] = _digest_file(Path(cfg.corpus_path))
    if cfg.lexicon_path:
        run.manifest.inputs["lexicon"] = _digest_file(Path(cfg.lexicon_path))

    lexicon_entries = _load_or_build_lexicon(cfg)
    lexicon = build_lexicon(lexicon_entries)
    type_map = lexicon.type_map()

    # --- corpus ---------------------------------------------------------
    def corpus_stage(out):
        if cfg.corpus_path:
            corpus = load_corpus(cfg.corpus_path)
        else:
            corpus = generate_synthetic(cfg.synthetic)
        train_corpus, test_corpus = split_patients(corpus, cfg.test_fraction, cfg.seed)
        write_corpus(train_corpus, out["corpus-train.jsonl"])
        write_corpus(test_corpus, out["corpus-test.jsonl"])
        save_lexicon_file(lexicon_entries, out["lexicon.jsonl"])

    run.stage("corpus", ["corpus-train.jsonl", "corpus-test.jsonl", "lexicon.jsonl"],
              corpus_stage, upstream=[])

    # --- annotate --------------------------------------------------------
    def annotate_stage(out):
        for split in ("train", "test"):
            corpus = load_corpus(run.path(f"corpus-{split}.jsonl"))
            mentions = annotate_corpus(corpus, lexicon, window=cfg.context_tokens)
            save_mentions_file(mentions, out[f"mentions-{split}.jsonl"])

    run.stage("annotate", ["mentions-train.jsonl", "mentions-test.jsonl"],
              annotate_stage, upstream=["corpus"])

    # --- timeline ----------------------------------------------------------
    def timeline_stage(out):
        for split in ("train", "test"):
            corpus = load_corpus(run.path(f"corpus-{split}.jsonl"))
            mentions = load_mentions_file(run.path(f"mentions-{split}.jsonl"))
            timelines = build_timelines(corpus.patients, mentions, cfg.bucket_days)
            save_timelines_file(timelines, out[f"timelines-{split}.jsonl"])

    run.stage("timeline", ["timelines-train.jsonl", "timelines-test.jsonl"],
              timeline_stage, upstream=["annotate"])

    # --- reconstruct ---------------------------------------------------------
    # Notes are always rendered with context; the strip-context ablation drops
    # text segments at load time so both variants share one vocabulary and
    # identical training budgets.
    def reconstruct_stage(out):
        for split in ("train", "test"):
            corpus = load_corpus(run.path(f"corpus-{split}.jsonl"))
            timelines = load_timelines_file(run.path(f"timelines-{split}.jsonl"))
            notes = render_notes(timelines, tokenized_documents(corpus))
            save_notes_file(notes, out[f"notes-{split}.jsonl"])

    run.stage("reconstruct", ["notes-train.jsonl", "notes-test.jsonl"],
              reconstruct_stage, upstream=["timeline"])

    def load_notes(split: str):
        notes = load_notes_file(run.path(f"notes-{split}.jsonl"))
        if cfg.strip_context:
            notes = [strip_context(n) for n in notes]
        return notes

    # --- vocab ----------------------------------------------------------------
    def vocab_stage(out):
        notes = load_notes_file(run.path("notes-train.jsonl"))
        vocab = fit_base_vocab(notes, cfg.vocab_min_freq)
        embeddings = init_base_embeddings(vocab, cfg.model.model_dim, cfg.seed)
        vocab, _ = add_concept_tokens(vocab, embeddings, lexicon_entries)
        save_vocab_file(vocab, out["vocab.txt"])

    run.stage("vocab", ["vocab.txt"], vocab_stage, upstream=["reconstruct"])

    # --- train -------------------------------------------------------------------
    def train_stage(out):
        vocab = load_vocab_file(run.path("vocab.txt"))
        embeddings = initial_embeddings(vocab, lexicon_entries,
                                        cfg.model.model_dim, cfg.seed)
        encoded = [encode(n, vocab) for n in load_notes("train")]
        examples = pack_examples(encoded, cfg.model.max_seq_len, vocab,
                                 full_lm=cfg.full_lm)
        ckpt = train(examples, cfg.model, cfg.optimizer, embeddings,
                     vocab.content_hash())
        save_checkpoint(ckpt, out["model.ckpt"])

    run.stage("train", ["model.ckpt"], train_stage, upstream=["vocab"])

    # --- eval ---------------------------------------------------------------------
    def eval_stage(out):
        vocab = load_vocab_file(run.path("vocab.txt"))
        ckpt = load_checkpoint(run.path("model.ckpt"))
        timelines = load_timelines_file(run.path("timelines-test.jsonl"))
        notes = {n.patient_id: encode(n, vocab) for n in load_notes("test")}
        predictor = ModelPredictor(ckpt, vocab, notes)
        rows = compute_metrics(predictor, timelines, type_map,
                               cfg.t_grid, cfg.n_grid, CONCEPT_TYPES)
        Path(out["report.tsv"]).write_text(metrics_report_text(rows))
        supports = {
            f"{r.concept_type}": [r.support_new, r.support_recurring]
            for r in rows if r.at_n == cfg.n_grid[0] and r.t_days == cfg.t_grid[0]
        }
        run_info = {
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "vocab_hash": vocab.content_hash(),
            "checkpoint_step": ckpt.step,
            "supports": supports,
        }
        Path(out["run.json"]).write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n")

    run.stage("eval", ["report.tsv", "run.json"], eval_stage, upstream=["train"])

    if cfg.risk_enabled:
        _risk_stages(run, cfg, type_map)
    return run.manifest


def _risk_stages(run: _Run, cfg: RunConfig, type_map: dict[str, str]) -> None:
    # --- risk dataset -----------------------------------------------------------
    def risk_build_stage(out):
        for split in ("train", "test"):
            timelines = load_timelines_file(run.path(f"timelines-{split}.jsonl"))
            examples = build_risk_dataset(timelines, type_map)
            save_risk_file(examples, out[f"risk-{split}.jsonl"])

    run.stage("risk-build", ["risk-train.jsonl", "risk-test.jsonl"],
              risk_build_stage, upstream=["timeline"])

    # --- stage-2 fine-tune ---------------------------------------------------------
    def risk_train_stage(out):
        vocab = load_vocab_file(run.path("vocab.txt"))
        ckpt = load_checkpoint(run.path("model.ckpt"))
        corpus = load_corpus(run.path("corpus-train.jsonl"))
        examples = load_risk_file(run.path("risk-train.jsonl"))
        if not examples:
            raise DataError("risk train set is empty; corpus too small for risk stages")
        docs = tokenized_documents(corpus)
        stage2 = build_stage2_examples(examples, docs, vocab, cfg.model.max_seq_len)
        opt = OptimizerConfig(**{**asdict(cfg.optimizer), "epochs": cfg.stage2_epochs})
        ckpt2 = finetune_stage2(ckpt, stage2, opt, vocab)
        save_checkpoint(ckpt2, out["risk-model.ckpt"])

    run.stage("risk-train", ["risk-model.ckpt"], risk_train_stage,
              upstream=["train", "risk-build"])

    # --- predictions ------------------------------------------------------------------
    def risk_predict_stage(out):
        vocab = load_vocab_file(run.path("vocab.txt"))
        ckpt = load_checkpoint(run.path("risk-model.ckpt"))
        corpus = load_corpus(run.path("corpus-test.jsonl"))
        examples = load_risk_file(run.path("risk-test.jsonl"))
        docs = tokenized_documents(corpus)
        records = []
        for ex in sorted(examples, key=lambda e: e.patient_id):
            history_ids = encode_history(ex, docs, vocab).token_ids
            budget = ckpt.config.max_seq_len - 1 - len(ex.labels)
            predictions = predict_top5(ckpt, vocab, history_ids[-budget:],
                                       ex.history_codes())
            records.append({"patient_id": ex.patient_id, "predictions": predictions})
        write_records(out["risk-predictions.jsonl"], PREDICTIONS_SCHEMA, records)

    run.stage("risk-predict", ["risk-predictions.jsonl"],
              risk_predict_stage, upstream=["risk-train"])

    # --- scoring -----------------------------------------------------------------------
    def risk_score_stage(out):
        examples = load_risk_file(run.path("risk-test.jsonl"))
        labels = {e.patient_id: list(e.labels) for e in examples}
        predictions = {
            rec["patient_id"]: rec["predictions"]
            for _, rec in read_records(run.path("risk-predictions.jsonl"),
                                       PREDICTIONS_SCHEMA)
        }
        lexicon = load_lexicon_file(run.path("lexicon.jsonl"))
        report = score_risk_predictions(predictions, labels, cfg, lexicon)
        Path(out["risk-report.tsv"]).write_text(risk_report_text([report]))

    run.stage("risk-score", ["risk-report.tsv"], risk_score_stage,
              upstream=["risk-predict"])


def score_risk_predictions(predictions: dict[str, list[str]],
                           labels: dict[str, list[str]], cfg: RunConfig,
                           lexicon: Lexicon, model_name: str = "stage2"):
    """Score with the configured oracle: exact code match, an equivalence
    table, or the external judge (which sees names, not codes, and whose
    failures shrink the judged support)."""
    from .risk import EquivalenceTableOracle, aggregate_report
    from .judge import judge_cohort

    if cfg.oracle == "exact":
        return score_at_least_n(predictions, labels, model=model_name)
    if cfg.oracle == "table":
        classes = json.loads(Path(cfg.equivalence_table).read_text())
        oracle = EquivalenceTableOracle(classes)
        return score_at_least_n(predictions, labels, model=model_name, oracle=oracle)
    if cfg.oracle == "llm":
        items = [
            (pid,
             [lexicon.name(c) for c in predictions[pid]],
             [lexicon.name(c) for c in labels[pid]])
            for pid in sorted(predictions) if pid in labels
        ]
        results, failed = judge_cohort(items, cfg.judge)
        if failed:
            logger.info("judge support reduced by %d failed patients", len(failed))
        counts = [r.number_of_direct_matches for _, r in sorted(results.items())]
        return aggregate_report(model_name, counts)
    raise ConfigError(f"unknown oracle {cfg.oracle!r}")


# ---------------------------------------------------------------------------
# Risk dataset files
# ---------------------------------------------------------------------------

def save_risk_file(examples, path) -> None:
    from .timeline import _event_to_record

    write_records(path, RISK_SCHEMA, (
        {
            "patient_id": e.patient_id,
            "split_day": e.split_day,
            "labels": list(e.labels),
            "history_events": [_event_to_record(ev) for ev in e.history.events],
        }
        for e in examples
    ))


def load_risk_file(path):
    from .risk import RiskExample
    from .timeline import PatientTimeline, _event_from_record

    out = []
    for _, rec in read_records(path, RISK_SCHEMA):
        pid = rec["patient_id"]
        history = PatientTimeline(
            patient_id=pid,
            events=[_event_from_record(ev, pid) for ev in rec["history_events"]],
        )
        out.append(RiskExample(patient_id=pid, history=history,
                               split_day=rec["split_day"], labels=list(rec["labels"])))
    return out
