"""Command-line entry point: one executable with a subcommand per stage plus
``run`` for the whole pipeline.

Exit codes: 0 ok, 2 config error, 3 data error, 4 stage failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotator import (annotate_corpus, load_lexicon_file, load_mentions_file,
                        save_mentions_file, tokenized_documents)
from .corpus import generate_synthetic, load_corpus, split_patients, write_corpus
from .errors import ConfigError, DataError, StageError
from .evaluation import ModelPredictor, compute_metrics, metrics_report_text
from .judge import PROMPT_FORMATS, render_baseline_prompts
from .pipeline import (PREDICTIONS_SCHEMA, build_run_config, initial_embeddings,
                       load_risk_file, load_run_config, parse_config_file,
                       run_pipeline, save_risk_file, score_risk_predictions,
                       validate_config)
from .annotator import CONCEPT_TYPES
from .records import read_records, write_records
from .reconstruct import (load_notes_file, render_flat, render_notes,
                          save_notes_file, strip_context)
from .risk import (build_risk_dataset, build_stage2_examples, encode_history,
                   finetune_stage2, predict_top5, risk_report_text)
from .timeline import build_timelines, load_timelines_file, save_timelines_file
from .training import (OptimizerConfig, load_checkpoint, pack_examples,
                       save_checkpoint, train)
from .vocab import (add_concept_tokens, encode, fit_base_vocab,
                    init_base_embeddings, load_vocab_file, save_vocab_file)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4


def _cfg_from_args(args) -> "RunConfig":
    from .pipeline import RunConfig

    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def cmd_corpus_gen(args):
    cfg = load_run_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("config has no synthetic corpus settings (n_patients/concept)")
    write_corpus(generate_synthetic(cfg.synthetic), args.out)


def cmd_corpus_split(args):
    corpus = load_corpus(args.input)
    train_c, test_c = split_patients(corpus, args.test_frac, args.seed)
    write_corpus(train_c, args.train)
    write_corpus(test_c, args.test)


def cmd_annotate(args):
    corpus = load_corpus(args.corpus)
    lexicon = load_lexicon_file(args.lexicon)
    mentions = annotate_corpus(corpus, lexicon, window=args.context_tokens)
    save_mentions_file(mentions, args.out)


def cmd_timeline_build(args):
    corpus = load_corpus(args.corpus)
    mentions = load_mentions_file(args.mentions)
    timelines = build_timelines(corpus.patients, mentions, args.bucket_days)
    save_timelines_file(timelines, args.out)


def cmd_reconstruct(args):
    corpus = load_corpus(args.corpus)
    timelines = load_timelines_file(args.timelines)
    notes = render_notes(timelines, tokenized_documents(corpus))
    if args.strip_context:
        notes = [strip_context(n) for n in notes]
    if args.flat:
        with Path(args.out).open("w", encoding="utf-8") as fh:
            for note in notes:
                fh.write(f"# {note.patient_id}\n{render_flat(note)}\n\n")
    else:
        save_notes_file(notes, args.out)


def cmd_vocab(args):
    notes = load_notes_file(args.notes)
    vocab = fit_base_vocab(notes, args.min_freq)
    entries = load_lexicon_file(args.lexicon).entries
    embeddings = init_base_embeddings(vocab, args.dim, args.seed)
    vocab, _ = add_concept_tokens(vocab, embeddings, entries,
                                  all_token_mean=args.all_token_mean)
    save_vocab_file(vocab, args.out)


def cmd_train(args):
    cfg = _cfg_from_args(args)
    if args.ablate_full_lm:
        cfg.full_lm = True
    vocab = load_vocab_file(args.vocab)
    entries = load_lexicon_file(args.lexicon).entries
    embeddings = initial_embeddings(vocab, entries, cfg.model.model_dim, cfg.seed)
    notes = load_notes_file(args.notes)
    if cfg.strip_context:
        notes = [strip_context(n) for n in notes]
    encoded = [encode(n, vocab) for n in notes]
    examples = pack_examples(encoded, cfg.model.max_seq_len, vocab, full_lm=cfg.full_lm)
    ckpt = train(examples, cfg.model, cfg.optimizer, embeddings, vocab.content_hash())
    save_checkpoint(ckpt, args.out)


def cmd_eval(args):
    cfg = _cfg_from_args(args)
    vocab = load_vocab_file(args.vocab)
    ckpt = load_checkpoint(args.ckpt)
    timelines = load_timelines_file(args.timelines)
    notes = load_notes_file(args.notes)
    if cfg.strip_context:
        notes = [strip_context(n) for n in notes]
    encoded = {n.patient_id: encode(n, vocab) for n in notes}
    predictor = ModelPredictor(ckpt, vocab, encoded)
    rows = compute_metrics(predictor, timelines, vocab.concept_types,
                           cfg.t_grid, cfg.n_grid, CONCEPT_TYPES)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.tsv").write_text(metrics_report_text(rows))
    run_info = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
                "vocab_hash": vocab.content_hash(), "checkpoint_step": ckpt.step}
    (out_dir / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n")
    print(metrics_report_text(rows), end="")


def cmd_risk_build(args):
    timelines = load_timelines_file(args.timelines)
    vocab = load_vocab_file(args.vocab)
    examples = build_risk_dataset(timelines, vocab.concept_types)
    save_risk_file(examples, args.out)


def cmd_risk_train(args):
    cfg = _cfg_from_args(args)
    vocab = load_vocab_file(args.vocab)
    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    examples = load_risk_file(args.risk)
    stage2 = build_stage2_examples(examples, tokenized_documents(corpus), vocab,
                                   ckpt.config.max_seq_len)
    opt = cfg.optimizer
    opt.epochs = args.epochs
    ckpt2 = finetune_stage2(ckpt, stage2, opt, vocab)
    save_checkpoint(ckpt2, args.out)


def cmd_risk_predict(args):
    vocab = load_vocab_file(args.vocab)
    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    examples = load_risk_file(args.risk)
    docs = tokenized_documents(corpus)
    records = []
    for ex in sorted(examples, key=lambda e: e.patient_id):
        history_ids = encode_history(ex, docs, vocab).token_ids
        budget = ckpt.config.max_seq_len - 1 - len(ex.labels)
        predictions = predict_top5(ckpt, vocab, history_ids[-budget:],
                                   ex.history_codes())
        records.append({"patient_id": ex.patient_id, "predictions": predictions})
    write_records(args.out, PREDICTIONS_SCHEMA, records)


def cmd_risk_score(args):
    cfg = _cfg_from_args(args)
    cfg.oracle = args.oracle
    if args.table:
        cfg.equivalence_table = args.table
    examples = load_risk_file(args.risk)
    labels = {e.patient_id: list(e.labels) for e in examples}
    predictions = {rec["patient_id"]: rec["predictions"]
                   for _, rec in read_records(args.predictions, PREDICTIONS_SCHEMA)}
    lexicon = load_lexicon_file(args.lexicon) if args.lexicon else None
    if cfg.oracle == "llm" and lexicon is None:
        raise ConfigError("--oracle llm needs --lexicon to convert codes to names")
    report = score_risk_predictions(predictions, labels, cfg, lexicon)
    text = risk_report_text([report])
    Path(args.out).write_text(text)
    print(text, end="")


def cmd_risk_prompt(args):
    examples = load_risk_file(args.risk)
    corpus = load_corpus(args.corpus)
    lexicon = load_lexicon_file(args.lexicon)
    docs = tokenized_documents(corpus)
    from .reconstruct import render_note

    histories = {
        ex.patient_id: render_flat(render_note(ex.history, docs),
                                   code_text=lexicon.name)
        for ex in examples
    }
    prompts, skipped = render_baseline_prompts(histories, args.format,
                                               max_tokens=args.max_tokens)
    write_records(args.out, "risk-prompts/1", (
        {"patient_id": pid, "format": args.format, "prompt": prompt}
        for pid, prompt in prompts.items()
    ))
    if skipped:
        logger.info("%d over-budget histories skipped: %s", len(skipped), skipped)


def cmd_validate(args):
    cfg = load_run_config(args.config)
    violations = validate_config(cfg)
    for v in violations:
        print(v)
    if violations:
        raise ConfigError(f"{len(violations)} violation(s)")
    print("config ok")


def cmd_run(args):
    cfg = load_run_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.jobs:
        cfg.jobs = args.jobs
    manifest = run_pipeline(cfg, cfg.out_dir, resume=not args.no_resume)
    print(f"run complete: {cfg.out_dir} ({len(manifest.stages)} stages)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timelinelm",
        description="Clinical concept timelines and next-concept language modelling",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="generate or split corpora")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)
    gen = corpus_sub.add_parser("gen")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_corpus_gen)
    split = corpus_sub.add_parser("split")
    split.add_argument("--in", dest="input", required=True)
    split.add_argument("--test-frac", type=float, default=0.05)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--train", required=True)
    split.add_argument("--test", required=True)
    split.set_defaults(func=cmd_corpus_split)

    annotate = sub.add_parser("annotate", help="dictionary NER over a corpus")
    annotate.add_argument("--corpus", required=True)
    annotate.add_argument("--lexicon", required=True)
    annotate.add_argument("--out", required=True)
    annotate.add_argument("--context-tokens", type=int, default=50)
    annotate.set_defaults(func=cmd_annotate)

    timeline = sub.add_parser("timeline", help="build patient timelines")
    timeline_sub = timeline.add_subparsers(dest="subcommand", required=True)
    tbuild = timeline_sub.add_parser("build")
    tbuild.add_argument("--mentions", required=True)
    tbuild.add_argument("--corpus", required=True)
    tbuild.add_argument("--out", required=True)
    tbuild.add_argument("--bucket-days", type=int, default=1)
    tbuild.set_defaults(func=cmd_timeline_build)

    reconstruct = sub.add_parser("reconstruct", help="render one note per patient")
    reconstruct.add_argument("--timelines", required=True)
    reconstruct.add_argument("--corpus", required=True)
    reconstruct.add_argument("--out", required=True)
    reconstruct.add_argument("--flat", action="store_true",
                             help="human-readable text with [[code]] markers")
    reconstruct.add_argument("--strip-context", action="store_true")
    reconstruct.set_defaults(func=cmd_reconstruct)

    vocab = sub.add_parser("vocab", help="fit vocabulary and concept tokens")
    vocab.add_argument("--notes", required=True)
    vocab.add_argument("--lexicon", required=True)
    vocab.add_argument("--out", required=True)
    vocab.add_argument("--min-freq", type=int, default=1)
    vocab.add_argument("--dim", type=int, default=64)
    vocab.add_argument("--seed", type=int, default=0)
    vocab.add_argument("--all-token-mean", action="store_true",
                       help="initialise concept rows to the mean of all rows "
                            "(less stable; off by default)")
    vocab.set_defaults(func=cmd_vocab)

    train_p = sub.add_parser("train", help="train the next-concept model")
    train_p.add_argument("--notes", required=True)
    train_p.add_argument("--vocab", required=True)
    train_p.add_argument("--lexicon", required=True)
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--config")
    train_p.add_argument("--ablate-full-lm", action="store_true",
                         help="standard LM objective: every token is a target")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="next-concept metrics over test timelines")
    eval_p.add_argument("--ckpt", required=True)
    eval_p.add_argument("--vocab", required=True)
    eval_p.add_argument("--timelines", required=True)
    eval_p.add_argument("--notes", required=True)
    eval_p.add_argument("--out-dir", required=True)
    eval_p.add_argument("--config")
    eval_p.set_defaults(func=cmd_eval)

    risk = sub.add_parser("risk", help="risk forecast stages")
    risk_sub = risk.add_subparsers(dest="subcommand", required=True)
    rbuild = risk_sub.add_parser("build")
    rbuild.add_argument("--timelines", required=True)
    rbuild.add_argument("--vocab", required=True)
    rbuild.add_argument("--out", required=True)
    rbuild.set_defaults(func=cmd_risk_build)
    rtrain = risk_sub.add_parser("train")
    rtrain.add_argument("--ckpt", required=True)
    rtrain.add_argument("--risk", required=True)
    rtrain.add_argument("--corpus", required=True)
    rtrain.add_argument("--vocab", required=True)
    rtrain.add_argument("--out", required=True)
    rtrain.add_argument("--config")
    rtrain.add_argument("--epochs", type=int, default=1)
    rtrain.set_defaults(func=cmd_risk_train)
    rpredict = risk_sub.add_parser("predict")
    rpredict.add_argument("--ckpt", required=True)
    rpredict.add_argument("--risk", required=True)
    rpredict.add_argument("--corpus", required=True)
    rpredict.add_argument("--vocab", required=True)
    rpredict.add_argument("--out", required=True)
    rpredict.set_defaults(func=cmd_risk_predict)
    rscore = risk_sub.add_parser("score")
    rscore.add_argument("--predictions", required=True)
    rscore.add_argument("--risk", required=True)
    rscore.add_argument("--oracle", choices=("exact", "table", "llm"), default="exact")
    rscore.add_argument("--table")
    rscore.add_argument("--lexicon")
    rscore.add_argument("--config")
    rscore.add_argument("--out", required=True)
    rscore.set_defaults(func=cmd_risk_score)
    rprompt = risk_sub.add_parser("prompt")
    rprompt.add_argument("--risk", required=True)
    rprompt.add_argument("--corpus", required=True)
    rprompt.add_argument("--lexicon", required=True)
    rprompt.add_argument("--format", choices=PROMPT_FORMATS, default="gpt4")
    rprompt.add_argument("--max-tokens", type=int)
    rprompt.add_argument("--out", required=True)
    rprompt.set_defaults(func=cmd_risk_prompt)

    validate = sub.add_parser("validate", help="check a run configuration")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=cmd_validate)

    run = sub.add_parser("run", help="execute the full pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir")
    run.add_argument("--jobs", type=int)
    run.add_argument("--no-resume", action="store_true")
    run.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        logger.error("%s", exc)
        return EXIT_STAGE
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
