"""Command-line entry point: ``cmlm-distill <subcommand> [flags] [--section.key=value ...]``.

Exit status: 0 on success, 1 when the task itself fails, 2 for configuration
or artifact-integrity problems (including bad command-line usage).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import synthetic
from .checkpoint import build_from_checkpoint, load_checkpoint, save_checkpoint
from .config import Settings, load_settings
from .decoding import translate_corpus
from .errors import CmlmError, ConfigError, IntegrityError, MetricError, TaskError
from .metrics import bleu_by_length, corpus_bleu, rouge_f1
from .soft_labels import SoftLabelStore, precompute
from .teacher import TeacherVariant, finetune_teacher
from .text import (SentencePair, Vocab, WhitespaceTokenizer, build_vocab, corpus_hash, encode_corpus, read_lines,
                   read_parallel, write_parallel)
from .trainer import train_student

SUBCOMMANDS = ("make-corpus", "finetune-teacher", "precompute-logits", "train-student", "translate", "evaluate",
               "experiment", "ablate", "grad-check")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [corpus], [model], [teacher_model], "
                                                    "[teacher], [train] and [experiment] sections")
    common.add_argument("--seed", type=int, help="seed for every random stream (overrides teacher.seed/train.seed)")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")

    p = argparse.ArgumentParser(prog="cmlm-distill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("make-corpus", parents=[common], help="write a synthetic train/dev/test corpus")

    s = sub.add_parser("finetune-teacher", parents=[common], help="train a C-MLM teacher")
    s.add_argument("--data", type=Path, required=True, help="directory with train/dev .src/.tgt files")
    s.add_argument("--vocab", type=Path, help="existing vocabulary (built from the training data if omitted)")
    s.add_argument("--variant", choices=("full", "small", "left_to_right"), default="full")

    s = sub.add_parser("precompute-logits", parents=[common], help="store the teacher's top-K soft labels")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--vocab", type=Path, required=True)
    s.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")

    s = sub.add_parser("train-student", parents=[common], help="train an encoder-decoder student")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--vocab", type=Path, required=True)
    s.add_argument("--store", type=Path, help="soft-label store; without one, train.alpha must be 0")

    s = sub.add_parser("translate", parents=[common], help="decode a source file with a student checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--vocab", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--output", type=Path, required=True)
    s.add_argument("--beam", type=int, default=4)
    s.add_argument("--length-penalty", type=float, default=0.6)

    s = sub.add_parser("evaluate", parents=[common], help="BLEU, ROUGE and per-length BLEU of a hypothesis file")
    s.add_argument("--hyp", type=Path, required=True)
    s.add_argument("--ref", type=Path, required=True)
    s.add_argument("--bucket-width", type=int, default=10)

    sub.add_parser("experiment", parents=[common], help="baseline versus distilled students over the seed list")
    s = sub.add_parser("ablate", parents=[common], help="distilled students from full, small and left-to-right teachers")
    s.add_argument("--variants", default="", help="comma-separated subset of full,small,left_to_right")

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--ops-only", action="store_true", help="skip the whole-model cases")
    return p


def _settings(args, overrides: Sequence[str]) -> Settings:
    s = load_settings(args.config, overrides)
    return s.with_seed(args.seed) if args.seed is not None else s


def _load_split(data: Path, name: str, vocab: Vocab, max_len: int) -> list[SentencePair]:
    src, tgt = read_parallel(data / name)
    return encode_corpus(src, tgt, vocab, WhitespaceTokenizer(vocab), max_len)


def _vocab_from(args) -> Vocab:
    if getattr(args, "vocab", None) is not None:
        return Vocab.load(args.vocab)
    tok = WhitespaceTokenizer()
    src, tgt = read_parallel(args.data / "train")
    return build_vocab([tok.training_tokens(line) for line in (*src, *tgt)])


def _check_vocab(meta: dict, vocab: Vocab, what: str) -> None:
    if meta.get("vocab_hash") and meta["vocab_hash"] != vocab.hash():
        raise IntegrityError(f"{what} was built with a different vocabulary "
                             f"({meta['vocab_hash'][:12]} vs {vocab.hash()[:12]})")


def cmd_make_corpus(args, s: Settings) -> int:
    seed = args.seed if args.seed is not None else s.experiment.corpus_seed
    for name, (src, tgt) in synthetic.split(s.corpus, seed).items():
        write_parallel(args.out_dir / name, src, tgt)
    print(f"wrote {s.corpus.pairs} pairs to {args.out_dir}")
    return 0


def cmd_finetune_teacher(args, s: Settings) -> int:
    vocab = _vocab_from(args)
    vocab.save(args.out_dir / "vocab.txt")
    train = _load_split(args.data, "train", vocab, s.teacher_model.max_len)
    dev = _load_split(args.data, "dev", vocab, s.teacher_model.max_len)
    res = finetune_teacher(train, dev, s.teacher_model.replace(vocab_size=len(vocab)), TeacherVariant(args.variant),
                           s.teacher, vocab_hash=vocab.hash(), log_path=args.out_dir / "teacher_metrics.jsonl",
                           checkpoint_path=args.out_dir / "teacher.ckpt")
    save_checkpoint(res.checkpoint, args.out_dir / "teacher.ckpt")
    print(json.dumps({"best_masked_accuracy": res.best_accuracy,
                      "best_step": res.checkpoint.meta["loop"]["best_step"]}))
    return 0


def cmd_precompute_logits(args, s: Settings) -> int:
    vocab = Vocab.load(args.vocab)
    ckpt = load_checkpoint(args.teacher)
    if ckpt.kind != "teacher":
        raise IntegrityError(f"{args.teacher} holds a {ckpt.kind}, not a teacher")
    _check_vocab(ckpt.meta, vocab, str(args.teacher))
    teacher = build_from_checkpoint(ckpt, use_best=True)
    train = _load_split(args.data, "train", vocab, s.model.max_len)
    _, stats = precompute(train, teacher, s.train.k, s.train.temperature, args.out_dir / "soft_labels.bin",
                          vocab_hash=vocab.hash(), teacher_hash=ckpt.content_hash(), corpus_hash=corpus_hash(train))
    print(json.dumps({"records": stats.records, "forward_passes": stats.forward_passes,
                      "K": s.train.k, "T": s.train.temperature}))
    return 0


def cmd_train_student(args, s: Settings) -> int:
    vocab = Vocab.load(args.vocab)
    train = _load_split(args.data, "train", vocab, s.model.max_len)
    dev = _load_split(args.data, "dev", vocab, s.model.max_len)
    store = SoftLabelStore.load(args.store) if args.store is not None else None
    res = train_student(train, dev, s.model.replace(vocab_size=len(vocab)), s.train, store,
                        vocab_hash=vocab.hash(), corpus_hash=corpus_hash(train),
                        log_path=args.out_dir / "student_metrics.jsonl",
                        checkpoint_path=args.out_dir / "student.ckpt")
    save_checkpoint(res.checkpoint, args.out_dir / "student.ckpt")
    print(json.dumps({"best_dev_bleu": res.best_dev_bleu, "best_step": res.checkpoint.meta["loop"]["best_step"]}))
    return 0


def cmd_translate(args, s: Settings) -> int:
    vocab = Vocab.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "student":
        raise IntegrityError(f"{args.checkpoint} holds a {ckpt.kind}, not a student")
    _check_vocab(ckpt.meta, vocab, str(args.checkpoint))
    model = build_from_checkpoint(ckpt, use_best=True)
    tok = WhitespaceTokenizer(vocab)
    sources = [vocab.encode(tok.tokenize(line)) for line in read_lines(args.input)]
    hyps = translate_corpus(model, sources, beam=args.beam, length_penalty=args.length_penalty)
    args.output.write_text("".join(tok.detokenize(vocab.decode(h)) + "\n" for h in hyps), encoding="utf-8")
    return 0


def evaluation_report(hyps: list[list[str]], refs: list[list[str]], bucket_width: int = 10) -> dict:
    r1, r2, rl = rouge_f1(hyps, refs)
    buckets = bleu_by_length(hyps, refs, bucket_width)
    return {"bleu": corpus_bleu(hyps, refs), "rouge1": r1, "rouge2": r2, "rougeL": rl, "sentences": len(hyps),
            "buckets": [{"lo": b.lo, "hi": b.hi, "count": b.count, "bleu": b.bleu} for b in buckets]}


def bucket_table(report: dict) -> str:
    lines = [f"{'ref length':>12} {'sentences':>10} {'BLEU':>8}"]
    for b in report["buckets"]:
        lines.append(f"{str(b['lo']) + '-' + str(b['hi']):>12} {b['count']:>10} {b['bleu']:8.2f}")
    return "\n".join(lines)


def cmd_evaluate(args, s: Settings) -> int:
    hyps = [line.split() for line in read_lines(args.hyp)]
    refs = [line.split() for line in read_lines(args.ref)]
    if len(hyps) != len(refs):
        raise MetricError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    report = evaluation_report(hyps, refs, args.bucket_width)
    print(json.dumps(report, sort_keys=True))
    print(bucket_table(report))
    return 0


def cmd_experiment(args, s: Settings) -> int:
    from .recipes import ExperimentRecipe, run_experiment

    cmp = run_experiment(ExperimentRecipe.from_settings(s), args.out_dir)
    print(cmp.table())
    return 0


def cmd_ablate(args, s: Settings) -> int:
    from .recipes import ExperimentRecipe, run_ablation

    variants = [v for v in args.variants.split(",") if v] or list(s.experiment.variants)
    for v in variants:
        TeacherVariant(v)
    cmp = run_ablation(ExperimentRecipe.from_settings(s), variants, args.out_dir)
    print(cmp.table())
    return 0


def cmd_grad_check(args, s: Settings) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(include_models=not args.ops_only)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


_HANDLERS = {
    "make-corpus": cmd_make_corpus,
    "finetune-teacher": cmd_finetune_teacher,
    "precompute-logits": cmd_precompute_logits,
    "train-student": cmd_train_student,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = [a for a in rest if a.startswith("--") and "." in a.split("=", 1)[0]]
    stray = [a for a in rest if a not in overrides]
    try:
        if stray:
            raise ConfigError(f"unrecognised arguments: {' '.join(stray)}")
        settings = _settings(args, overrides)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return _HANDLERS[args.command](args, settings)
    except (ConfigError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TaskError, CmlmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
