"""Manifest evaluation: decode hypotheses, score WER / keyword PRF / BLEU.

Boost modes: "none" decodes the bare prompt, "icl" prepends the keyword list
as text context to every prompt, "fusion" runs beam search rescored by the
keyword trie. Fan-out over worker processes shards the manifest and merges
results in order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import BiasConfig, EvalConfig, NucleusConfig
from .corpus import ManifestRecord, sample_from_record
from .decoding import (beam_search_batch, build_keyword_trie, empty_trie,
                       greedy_decode_batch, nucleus_decode_batch)
from .errors import ValidationError
from .ict import format_context
from .metrics import (dump_alignment_tsv, corpus_bleu, keyword_prf,
                      normalize_text, word_error_rate)
from .model import SALM, layouts_for_samples
from .tokenizer import CharTokenizer

BOOST_MODES = ("none", "icl", "fusion")
DECODERS = ("greedy", "nucleus", "beam")


@dataclass
class EvalOutput:
    report: dict
    utterances: list[dict] = field(default_factory=list)


def decode_records(model: SALM, tokenizer: CharTokenizer,
                   records: list[ManifestRecord], base_dir,
                   *, decoder: str = "greedy", boost: str = "none",
                   keywords: list[str] | None = None,
                   nucleus: NucleusConfig | None = None,
                   bias: BiasConfig | None = None,
                   eval_config: EvalConfig | None = None) -> list[dict]:
    """Returns one {id, task, ref, hyp} dict per record, in manifest order."""
    if boost not in BOOST_MODES:
        raise ValidationError(f"unknown boost mode {boost!r}")
    if decoder not in DECODERS:
        raise ValidationError(f"unknown decoder {decoder!r}")
    if boost in ("icl", "fusion") and not keywords:
        if boost == "icl":
            raise ValidationError("--boost icl needs a nonempty keyword list")
    eval_config = eval_config or EvalConfig()
    nucleus = nucleus or NucleusConfig()
    bias = bias or BiasConfig()
    if boost == "fusion":
        decoder = "beam"
        trie = build_keyword_trie(keywords, tokenizer) if keywords else empty_trie()
    else:
        trie = None
    context_override = format_context(keywords) if boost == "icl" else None

    rows: list[dict] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(records), eval_config.batch_size):
            chunk = records[start:start + eval_config.batch_size]
            samples = [sample_from_record(r, base_dir) for r in chunk]
            layouts = layouts_for_samples(model, samples, tokenizer,
                                          include_answer=False,
                                          context_override=context_override)
            if decoder == "greedy":
                hyp_ids = greedy_decode_batch(model, layouts,
                                              eval_config.max_new_tokens)
            elif decoder == "nucleus":
                hyp_ids = nucleus_decode_batch(model, layouts, nucleus,
                                               eval_config.max_new_tokens)
            else:
                hyp_ids = beam_search_batch(model, layouts, trie, bias,
                                            eval_config.max_new_tokens)
            for rec, ids in zip(chunk, hyp_ids):
                rows.append({"id": rec.id, "task": rec.task,
                             "ref": rec.target_text,
                             "hyp": tokenizer.decode(ids)})
    return rows


def _decode_shard(args):
    (ckpt_path, records, base_dir, kwargs) = args
    from .model import load_salm_checkpoint
    model, _, _ = load_salm_checkpoint(ckpt_path)
    tokenizer = CharTokenizer()
    return decode_records(model, tokenizer, records, base_dir, **kwargs)


def decode_records_parallel(ckpt_path, records, base_dir, workers: int = 1,
                            **kwargs) -> list[dict]:
    """Shards the manifest across worker processes; order-preserving."""
    if workers <= 1:
        raise ValidationError("decode_records_parallel expects workers > 1")
    import multiprocessing as mp
    shards = [records[i::workers] for i in range(workers)]
    shards = [s for s in shards if s]
    with mp.get_context("fork").Pool(len(shards)) as pool:
        results = pool.map(_decode_shard,
                           [(str(ckpt_path), shard, str(base_dir), kwargs)
                            for shard in shards])
    by_id = {row["id"]: row for rows in results for row in rows}
    return [by_id[rec.id] for rec in records]


def score_rows(rows: list[dict], keywords: list[str] | None = None) -> dict:
    """WER over everything, BLEU over ast rows, keyword PRF when keywords given."""
    if not rows:
        raise ValidationError("nothing to score")
    pairs = [(normalize_text(r["ref"]).split(), normalize_text(r["hyp"]).split())
             for r in rows]
    report: dict = {
        "num_utterances": len(rows),
        "wer": word_error_rate(pairs),
    }
    ast_pairs = [p for r, p in zip(rows, pairs) if r["task"] == "ast"]
    if ast_pairs:
        report["bleu"] = corpus_bleu(ast_pairs)
    if keywords:
        metrics = keyword_prf(pairs, keywords)
        report.update({
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f_score": metrics.f_score,
            "counts": {
                "tp_ref": metrics.tp_ref,
                "total_ref_occurrences": metrics.total_ref_occurrences,
                "tp_hyp": metrics.tp_hyp,
                "total_hyp_occurrences": metrics.total_hyp_occurrences,
            },
        })
    return report


def evaluate_manifest(model: SALM, tokenizer: CharTokenizer,
                      records: list[ManifestRecord], base_dir,
                      *, decoder: str = "greedy", boost: str = "none",
                      keywords: list[str] | None = None,
                      nucleus: NucleusConfig | None = None,
                      bias: BiasConfig | None = None,
                      eval_config: EvalConfig | None = None,
                      dump_tsv: str | Path | None = None) -> EvalOutput:
    rows = decode_records(model, tokenizer, records, base_dir,
                          decoder=decoder, boost=boost, keywords=keywords,
                          nucleus=nucleus, bias=bias, eval_config=eval_config)
    report = score_rows(rows, keywords=keywords)
    report["mode"] = boost
    report["decoder"] = "beam" if boost == "fusion" else decoder
    if dump_tsv:
        dump_alignment_tsv(dump_tsv, rows)
    return EvalOutput(report=report, utterances=rows)


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def keyword_sweep(model: SALM, tokenizer: CharTokenizer,
                  records: list[ManifestRecord], base_dir,
                  keywords: list[str], sizes: list[int],
                  *, boost: str = "icl",
                  bias: BiasConfig | None = None,
                  eval_config: EvalConfig | None = None,
                  csv_path: str | Path | None = None) -> list[dict]:
    """Scaling study: metrics per keyword-list size, optionally dumped as CSV.

    Each size-N point boosts and scores against the first N keywords, so the
    recall denominator tracks the boosted list.
    """
    rows = []
    for size in sizes:
        if size > len(keywords):
            raise ValidationError(f"sweep size {size} exceeds {len(keywords)} keywords")
        subset = keywords[:size]
        output = evaluate_manifest(model, tokenizer, records, base_dir,
                                   boost=boost, keywords=subset, bias=bias,
                                   eval_config=eval_config)
        rows.append({"size": size,
                     "precision": output.report["precision"],
                     "recall": output.report["recall"],
                     "f_score": output.report["f_score"],
                     "wer": output.report["wer"]})
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("size,precision,recall,f_score,wer\n")
            for row in rows:
                fh.write(f"{row['size']},{row['precision']:.6f},{row['recall']:.6f},"
                         f"{row['f_score']:.6f},{row['wer']:.6f}\n")
    return rows
