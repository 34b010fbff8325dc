"""Contextualised patient timelines and next-concept language modelling.

The pipeline turns free-text clinical documents into concept timelines
(dictionary NER with context capture, day bucketing, singleton filtering,
temporal separators), rebuilds one note per patient, trains a small
decoder-only transformer with a concept-only loss, and evaluates ranked
next-concept prediction and 30-day disorder risk forecasting.
"""

__version__ = "0.1.0"

from .corpus import (ClinicalDocument, Corpus, PatientRecord, SyntheticConcept,
                     SyntheticConfig, TransitionRule, generate_synthetic,
                     load_corpus, split_patients, write_corpus)
from .annotator import (ConceptEntry, ConceptMention, Lexicon, TokenizedDocument,
                        annotate_corpus, annotate_document, build_lexicon,
                        extract_context, tokenize_document)
from .timeline import (ConceptEvent, DemographicEvent, PatientTimeline,
                       SeparatorEvent, bucket_mentions, build_timeline,
                       build_timelines, filter_singletons, insert_separators,
                       validate_timeline)
from .reconstruct import (ConceptTokenSegment, ReconstructedNote, SpecialTokenSegment,
                          TextSegment, merge_contexts, render_flat, render_note,
                          render_notes, strip_context)
from .vocab import (EncodedNote, IGNORE_LABEL, Vocabulary, add_concept_tokens,
                    decode, encode, fit_base_vocab, init_base_embeddings)
from .network import ModelConfig, loss, rank_next
from .training import (Checkpoint, OptimizerConfig, TrainingExample,
                       load_checkpoint, pack_examples, save_checkpoint, train)
from .evaluation import (EvalPoint, MetricsRow, ModelPredictor, OraclePredictor,
                         compute_metrics, enumerate_eval_points, per_concept_report)
from .risk import (RiskExample, RiskReportRow, build_risk_dataset, finetune_stage2,
                   match_count, predict_top5, score_at_least_n, split_timeline)
from .judge import (EndpointConfig, JudgeResult, judge_via_llm,
                    render_baseline_prompt)
