#!/usr/bin/env python3
"""Keyword-count scaling study: boost with the first N keywords for several N,
score against the same list, and dump a CSV for plotting."""

import argparse
from pathlib import Path

from salm.config import load_run_config
from salm.corpus import read_keywords, read_manifest
from salm.evaluate import keyword_sweep
from salm.model import load_salm_checkpoint
from salm.tokenizer import CharTokenizer


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--ckpt", type=Path, required=True)
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--keywords", type=Path, required=True)
    parser.add_argument("--sizes", type=str, default="8,16,32,64")
    parser.add_argument("--boost", choices=("icl", "fusion"), default="icl")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("keyword_sweep.csv"))
    args = parser.parse_args()

    run = load_run_config(args.config)
    model, _, _ = load_salm_checkpoint(args.ckpt)
    records = [r for r in read_manifest(args.manifest) if r.task == "asr"]
    keywords = read_keywords(args.keywords)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = keyword_sweep(model, CharTokenizer(), records, args.manifest.parent,
                         keywords, sizes, boost=args.boost, bias=run.bias,
                         eval_config=run.eval, csv_path=args.out)
    for row in rows:
        print(f"size={row['size']:3d}  P={row['precision']:.3f} "
              f"R={row['recall']:.3f} F={row['f_score']:.3f} WER={row['wer']:.3f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
