#!/usr/bin/env python3
"""Keyword-boosting study: train a context-augmented model and a plain one on
the same corpus, then compare F-scores without boost, with text-context
boosting, and with trie shallow fusion."""

import argparse
import copy
import json
from pathlib import Path

import torch

from salm.config import load_run_config
from salm.corpus import manifest_vocab, read_keywords, read_manifest
from salm.evaluate import evaluate_manifest
from salm.model import SALM, load_lm_checkpoint, save_checkpoint
from salm.tokenizer import CharTokenizer
from salm.training import train_salm


def train_variant(run, corpus_dir, lm, tokenizer, ict_prob, out_path):
    train_records = read_manifest(corpus_dir / "train.jsonl")
    dev_records = read_manifest(corpus_dir / "dev.jsonl")
    vocab = {t: manifest_vocab([r for r in train_records if r.task == t])
             for t in ("asr", "ast")}
    ict = copy.deepcopy(run.ict)
    ict.context_prob = ict_prob
    torch.manual_seed(run.train.seed)
    model = SALM(run.model, lm=copy.deepcopy(lm))
    result = train_salm(model, tokenizer, train_records, corpus_dir,
                        run.train, ict, vocab, dev_records=dev_records,
                        log_path=out_path.with_suffix(".csv"))
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    save_checkpoint(out_path, model, run.model, kind="salm",
                    meta={"best_dev_wer": result.best_dev_wer})
    return model


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--corpus", type=Path, required=True)
    parser.add_argument("--lm-ckpt", type=Path, required=True)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("runs/boost"))
    args = parser.parse_args()

    run = load_run_config(args.config)
    run.model.vocab_size = CharTokenizer().vocab_size
    args.out.mkdir(parents=True, exist_ok=True)
    tokenizer = CharTokenizer()
    lm, _, _ = load_lm_checkpoint(args.lm_ckpt)
    keywords = read_keywords(args.corpus / "keywords.txt")
    boost_records = [r for r in read_manifest(args.corpus / "boost_test.jsonl")
                     if r.task == "asr"]

    table = {}
    for name, prob in (("context-trained", run.ict.context_prob), ("plain", 0.0)):
        model = train_variant(run, args.corpus, lm, tokenizer, prob,
                              args.out / f"{name}.pt")
        for boost in ("none", "icl", "fusion"):
            report = evaluate_manifest(
                model, tokenizer, boost_records, args.corpus, boost=boost,
                keywords=keywords, bias=run.bias, eval_config=run.eval).report
            table[(name, boost)] = report
            print(f"{name:16s} boost={boost:6s} WER={report['wer']:.3f} "
                  f"F={report['f_score']:.3f} "
                  f"(P={report['precision']:.3f}/R={report['recall']:.3f})")

    summary = {f"{name}/{boost}": {k: v for k, v in rep.items()
                                   if k in ("wer", "precision", "recall", "f_score")}
               for (name, boost), rep in table.items()}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2),
                                           encoding="utf-8")
    print(f"wrote {args.out / 'summary.json'}")


if __name__ == "__main__":
    main()
