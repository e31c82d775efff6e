"""Command-line entry point: ``endx <command> [options]``.

stdout carries machine-readable JSON (or CSV paths); progress goes to stderr.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from . import evaluation as ev
from . import synthetic
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoders import Vocabulary
from .trainer import TrainConfig, ablation_matrix, train


class UsageError(Exception):
    pass


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(_existing(path, "config file").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        raw = {**raw, "seed": seed}
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _split(ds: dp.RetrievalDataset, seed: int):
    train_ds, val_ds = dp.make_splits(ds, 0.9, seed)
    # validation questions are ranked against the whole candidate pool
    val_ds = ds.restrict(question_ids=val_ds.questions, keep_pool=True)
    return train_ds, val_ds


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> None:
    passages = dp.parse_rc_json(_existing(args.input, "input file"))
    ds = dp.build_reqa(passages, candidates=args.candidates)
    dp.write_jsonl(ds, args.output)
    stats = dp.dataset_stats(ds)
    stats_path = args.stats or f"{args.output}.stats.json"
    dp.write_stats(stats, stats_path)
    if ds.skipped:
        _info(f"skipped {ds.skipped} records with bad answer offsets")
    _emit({"output": str(args.output), "stats": str(stats_path), **stats.to_dict()})


def cmd_stats(args) -> None:
    stats = dp.dataset_stats(dp.read_jsonl(_existing(args.data, "dataset")))
    if args.output:
        dp.write_stats(stats, args.output)
    _emit(stats.to_dict())


def cmd_train(args) -> None:
    cfg = _load_config(args.config, args.seed)
    ds = dp.read_jsonl(_existing(args.data, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    train_ds, val_ds = _split(ds, cfg.seed)
    vocab = Vocabulary.build([*train_ds.questions.values(), *ds.answers.values()])
    with open(out / "log.jsonl", "w", encoding="utf-8", newline="\n") as log:
        result = train(train_ds, val_ds, cfg, vocab,
                       log=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"),
                       progress=sys.stderr)
    extra = {"gam": cfg.gam.to_dict(), "loss_weights": cfg.weights.to_dict()}
    save_checkpoint(result.model, out / "best.ckpt", extra, result.state.step)
    best = result.model.params.snapshot()
    result.model.params.restore(result.final_params)
    save_checkpoint(result.model, out / "final.ckpt", extra, result.state.step)
    result.model.params.restore(best)
    _emit({"best_checkpoint": str(out / "best.ckpt"), "final_checkpoint": str(out / "final.ckpt"),
           "best_epoch": result.state.best_epoch, "best_val_r1": result.state.best_r1,
           "steps": result.state.step})


def cmd_eval(args) -> None:
    ds = dp.read_jsonl(_existing(args.data, "dataset"))
    model, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if args.min_questions is not None:
        ds = ev.one_to_many_subset(ds, args.min_questions)
        if not ds.pairs:
            raise ValueError(f"empty subset: no answer has >= {args.min_questions} questions")
    cache = args.build_index
    if cache is not None and (Path(cache) / ev.INDEX_FILE).exists():
        old = ev.AnswerIndex.load(cache)
        if old.fingerprint != f"{ev.model_digest(model)}:{ev.corpus_digest(ds.answers)}":
            _info(f"warning: index in {cache} was built from a different checkpoint or "
                  "corpus; rebuilding")
    index = ev.embed_corpus(ds.answers, model, cache_dir=cache)
    report = ev.evaluate(model, ds, index, subset_min_questions=args.min_questions)
    _emit(report.to_dict())


def cmd_query(args) -> None:
    model, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if not (Path(args.index) / ev.INDEX_FILE).exists():
        raise UsageError(f"no answer index in {args.index}; run "
                         f"`endx eval --data ... --checkpoint ... --build-index {args.index}` first")
    index = ev.AnswerIndex.load(args.index)
    if not index.fingerprint.startswith(ev.model_digest(model)):
        _info("warning: the index was built with a different checkpoint")
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    question = model.embed_texts([args.question], "question")
    ranked = ev.rank_answers(question, index)[:args.top]
    _emit([{"answer_id": aid, "score": score, "answer": index.texts.get(aid)}
           for aid, score in ranked])


def cmd_ablate(args) -> None:
    cfg = _load_config(args.config, None)
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = dp.read_jsonl(_existing(args.data, "dataset"))
    test = dp.read_jsonl(_existing(args.test, "test dataset"))
    train_ds, val_ds = _split(ds, seeds[0])
    vocab = Vocabulary.build([*train_ds.questions.values(), *ds.answers.values()])
    rows = ablation_matrix(train_ds, val_ds, test, cfg, seeds, vocab, progress=sys.stderr)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "mrr", "r1", "r5"])
        writer.writeheader()
        writer.writerows(rows)
    _emit({"table": str(args.out), "rows": rows})


def cmd_simmatrix(args) -> None:
    ds = dp.read_jsonl(_existing(args.data, "dataset"))
    model, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    matched = ds.matched_answers()
    qids = sorted(ds.questions)
    if args.answer_id is not None:
        qids = [q for q in qids if args.answer_id in matched[q]]
    if not qids:
        raise ValueError("no questions selected")
    texts = [ds.questions[q] for q in qids]
    if args.tower == "dual":
        emb = model.embed_texts(texts, "question")
    else:
        guides = [ds.answers[args.answer_id if args.answer_id is not None else min(matched[q])]
                  for q in qids]
        emb, _ = model.cross_embed_texts(texts, guides)
    ev.write_matrix_csv(args.output, qids, ev.similarity_matrix(emb))
    if args.embeddings:
        np.savetxt(args.embeddings, emb, delimiter=",")
    _emit({"matrix": str(args.output), "size": len(qids), "tower": args.tower})


def cmd_synth(args) -> None:
    split = synthetic.generate(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dp.write_jsonl(split.train, out / "train.jsonl")
    dp.write_jsonl(split.test, out / "test.jsonl")
    dp.write_jsonl(split.test_subset(4), out / "test_min4.jsonl")
    _emit({"train": str(out / "train.jsonl"), "test": str(out / "test.jsonl"),
           "test_min4": str(out / "test_min4.jsonl"),
           "train_pairs": len(split.train), "test_pairs": len(split.test)})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="endx", description="Dual-encoder answer retrieval "
                                     "trained with a cross-encoder teacher.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="reading-comprehension JSON -> retrieval dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--candidates", choices=("answers", "all-sentences"), default="answers")
    p.add_argument("--stats", help="stats sidecar path (default: OUTPUT.stats.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MRR and R@N with the dual tower")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--min-questions", type=int)
    p.add_argument("--build-index", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="rank a prebuilt answer index for one question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("ablate", help="six-row ablation table as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("simmatrix", help="question-question similarity matrix as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tower", choices=("dual", "cross"), default="dual")
    p.add_argument("--answer-id", type=int)
    p.add_argument("--embeddings", help="also write the embeddings as CSV")
    p.set_defaults(func=cmd_simmatrix)

    p = sub.add_parser("synth", help="write the synthetic one-to-many dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        _info(f"endx {args.command}: {exc}")
        return 2
    except (CheckpointError, dp.SchemaError, ValueError, OSError, FloatingPointError) as exc:
        _info(f"endx {args.command}: error: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
