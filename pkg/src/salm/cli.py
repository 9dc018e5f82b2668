"""Command line entry points: gen-data, pretrain-lm, train-salm, eval.

Exit codes: 0 success, 2 validation/config errors, 1 runtime failures.
SALM_LOG_LEVEL (debug|info|warn) controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, config_to_dict, load_run_config
from .errors import SalmError, ValidationError

log = logging.getLogger("salm")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _setup_logging() -> None:
    level_name = os.environ.get("SALM_LOG_LEVEL", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}
    if level_name not in levels:
        raise ValidationError(f"SALM_LOG_LEVEL must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level_name],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salm")
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed overriding every section seed")
    parser.add_argument("-O", "--override", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--inline-features", action="store_true",
                   help="store features as base64 in the manifest")

    p = sub.add_parser("pretrain-lm", help="pretrain the text LM")
    p.add_argument("--corpus", type=Path, required=True,
                   help="corpus directory from gen-data")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")

    p = sub.add_parser("train-salm", help="speech instruction tuning")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--lm-ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("--dump-samples", type=int, default=0,
                   help="dump the first N drawn training samples as JSONL")

    p = sub.add_parser("eval", help="decode a manifest and score it")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--keywords", type=Path, default=None)
    p.add_argument("--boost", choices=("none", "icl", "fusion"), default="none")
    p.add_argument("--decoder", choices=("greedy", "nucleus", "beam"), default="greedy")
    p.add_argument("--out", type=Path, default=None, help="report JSON path (default stdout)")
    p.add_argument("--dump-tsv", type=Path, default=None,
                   help="write per-utterance alignment TSV")
    p.add_argument("--workers", type=int, default=1)
    return parser


def cmd_gen_data(run: RunConfig, args) -> int:
    from .corpus import generate_corpus
    corpus = generate_corpus(run.corpus, args.out,
                             inline_features=args.inline_features,
                             workers=args.workers)
    log.info("wrote corpus to %s (%d keywords)", corpus.out_dir,
             len(corpus.rare_words))
    return EXIT_OK


def cmd_pretrain_lm(run: RunConfig, args) -> int:
    from .model import save_checkpoint
    from .tokenizer import CharTokenizer
    from .training import pretrain_lm

    text_path = args.corpus / "lm_text.txt"
    if not text_path.exists():
        raise ValidationError(f"missing LM text corpus: {text_path}")
    tokenizer = CharTokenizer()
    run.model.vocab_size = tokenizer.vocab_size
    lines = [ln for ln in text_path.read_text(encoding="utf-8").splitlines() if ln]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = pretrain_lm(lines, tokenizer, run.model, run.pretrain,
                         log_path=out.with_suffix(".csv"))
    save_checkpoint(out, result.lm, run.model, kind="lm",
                    meta={"heldout_ppl": result.heldout_ppl})
    log.info("pretrained LM: held-out perplexity %.4f -> %s",
             result.heldout_ppl, out)
    return EXIT_OK


def cmd_train_salm(run: RunConfig, args) -> int:
    import torch

    from .corpus import manifest_vocab, read_manifest
    from .model import SALM, load_lm_checkpoint, save_checkpoint
    from .tokenizer import CharTokenizer
    from .training import train_salm

    tokenizer = CharTokenizer()
    run.model.vocab_size = tokenizer.vocab_size
    lm, lm_config, _ = load_lm_checkpoint(args.lm_ckpt)
    if lm_config.d_lm != run.model.d_lm or lm_config.vocab_size != run.model.vocab_size:
        raise ValidationError("LM checkpoint shape disagrees with the run config")
    train_records = read_manifest(args.corpus / "train.jsonl")
    dev_records = read_manifest(args.corpus / "dev.jsonl")
    vocab_by_task = {task: manifest_vocab([r for r in train_records if r.task == task])
                     for task in ("asr", "ast")}
    torch.manual_seed(run.train.seed)
    model = SALM(run.model, lm=lm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train_salm(model, tokenizer, train_records, args.corpus,
                        run.train, run.ict, vocab_by_task,
                        dev_records=dev_records,
                        log_path=out.with_suffix(".csv"),
                        dump_samples=args.dump_samples,
                        run_dir=out.parent)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    save_checkpoint(out, model, run.model, kind="salm",
                    meta={"best_dev_wer": result.best_dev_wer})
    if args.dump_samples > 0:
        dump_path = out.with_suffix(".samples.jsonl")
        with open(dump_path, "w", encoding="utf-8") as fh:
            for row in result.dumped_samples:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        log.info("dumped %d training samples to %s",
                 len(result.dumped_samples), dump_path)
    log.info("trained SALM: best dev WER %.4f -> %s", result.best_dev_wer, out)
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    from .corpus import read_keywords, read_manifest
    from .evaluate import (decode_records_parallel, evaluate_manifest,
                           score_rows, write_report)
    from .model import load_salm_checkpoint
    from .tokenizer import CharTokenizer

    records = read_manifest(args.manifest)
    base_dir = args.manifest.parent
    keywords = read_keywords(args.keywords) if args.keywords else None
    tokenizer = CharTokenizer()
    if args.workers > 1:
        rows = decode_records_parallel(
            args.ckpt, records, base_dir, workers=args.workers,
            decoder=args.decoder, boost=args.boost, keywords=keywords,
            nucleus=run.nucleus, bias=run.bias, eval_config=run.eval)
        report = score_rows(rows, keywords=keywords)
        report["mode"] = args.boost
        report["decoder"] = "beam" if args.boost == "fusion" else args.decoder
        if args.dump_tsv:
            from .metrics import dump_alignment_tsv
            dump_alignment_tsv(args.dump_tsv, rows)
    else:
        model, _, _ = load_salm_checkpoint(args.ckpt)
        output = evaluate_manifest(
            model, tokenizer, records, base_dir,
            decoder=args.decoder, boost=args.boost, keywords=keywords,
            nucleus=run.nucleus, bias=run.bias, eval_config=run.eval,
            dump_tsv=args.dump_tsv)
        report = output.report
    report["config"] = config_to_dict(run)
    report["manifest"] = str(args.manifest)
    if keywords is not None:
        report["keywords_file"] = str(args.keywords)
    if args.out:
        write_report(args.out, report)
        log.info("wrote report to %s", args.out)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-lm": cmd_pretrain_lm,
    "train-salm": cmd_train_salm,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        run = load_run_config(args.config, overrides=args.override, seed=args.seed)
        return COMMANDS[args.command](run, args)
    except ValidationError as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except SalmError as exc:
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
