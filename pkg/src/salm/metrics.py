"""Word-level alignment, WER, keyword precision/recall/F-score, corpus BLEU.

Keyword occurrence counting works on alignments: a reference occurrence of a
keyword (a maximal, non-overlapping span found longest-keyword-first, left to
right) counts as recalled iff every word in its span is a match op; hypothesis
occurrences count as correct the same way. Recall is tp_ref / ref occurrences,
precision tp_hyp / hyp occurrences, with P = 1 by convention when the
hypothesis contains no occurrences at all.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass
from pathlib import Path

from .errors import UndefinedMetricError, ValidationError

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


# ---- alignment ---------------------------------------------------------------


@dataclass
class AlignOp:
    op: str                 # match | substitute | insert | delete
    ref_index: int | None
    hyp_index: int | None


@dataclass
class Alignment:
    ops: list[AlignOp]
    distance: int

    def counts(self) -> dict[str, int]:
        out = {"match": 0, "substitute": 0, "insert": 0, "delete": 0}
        for op in self.ops:
            out[op.op] += 1
        return out


def levenshtein_align(ref: list[str], hyp: list[str]) -> Alignment:
    """Minimal-cost word alignment with a fixed tie-break.

    On equal cost the backtrace prefers diagonal (match/substitute) over
    delete over insert.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        ref_word = ref[i - 1]
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (ref_word != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    ops: list[AlignOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0 and here == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            kind = "match" if ref[i - 1] == hyp[j - 1] else "substitute"
            ops.append(AlignOp(kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and here == cost[i - 1][j] + 1:
            ops.append(AlignOp("delete", i - 1, None))
            i -= 1
        else:
            ops.append(AlignOp("insert", None, j - 1))
            j -= 1
    ops.reverse()
    return Alignment(ops=ops, distance=cost[n][m])


def word_error_rate(pairs: list[tuple[list[str], list[str]]]) -> float:
    """(S + D + I summed over the corpus) / total reference words."""
    total_ref = sum(len(ref) for ref, _ in pairs)
    if total_ref == 0:
        raise UndefinedMetricError("WER undefined: every reference is empty")
    total_err = sum(levenshtein_align(ref, hyp).distance for ref, hyp in pairs)
    return total_err / total_ref


# ---- keyword precision / recall / F ------------------------------------------


@dataclass
class KeywordMetrics:
    precision: float
    recall: float
    f_score: float
    tp_ref: int
    total_ref_occurrences: int
    tp_hyp: int
    total_hyp_occurrences: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def f_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _normalize_keywords(keywords: list[str]) -> list[tuple[str, ...]]:
    if not keywords:
        raise ValidationError("keyword list must be nonempty")
    seen: set[tuple[str, ...]] = set()
    out: list[tuple[str, ...]] = []
    for kw in keywords:
        words = tuple(normalize_text(kw).split())
        if not words:
            raise ValidationError(f"keyword {kw!r} is empty after normalization")
        if words not in seen:
            seen.add(words)
            out.append(words)
    # longest first; lexicographic second for a deterministic scan order
    out.sort(key=lambda w: (-len(w), w))
    return out


def find_keyword_spans(words: list[str], keywords: list[tuple[str, ...]]):
    """Maximal non-overlapping spans, longest keyword first, left to right."""
    claimed = [False] * len(words)
    spans: list[tuple[int, int, tuple[str, ...]]] = []
    for kw in keywords:
        k = len(kw)
        i = 0
        while i + k <= len(words):
            window = tuple(words[i:i + k])
            if window == kw and not any(claimed[i:i + k]):
                for p in range(i, i + k):
                    claimed[p] = True
                spans.append((i, i + k, kw))
                i += k
            else:
                i += 1
    spans.sort()
    return spans


def keyword_prf(pairs: list[tuple[list[str], list[str]]],
                keywords: list[str]) -> KeywordMetrics:
    kws = _normalize_keywords(keywords)
    tp_ref = total_ref = tp_hyp = total_hyp = 0
    for ref, hyp in pairs:
        alignment = levenshtein_align(ref, hyp)
        ref_op = [""] * len(ref)
        hyp_op = [""] * len(hyp)
        for op in alignment.ops:
            if op.ref_index is not None:
                ref_op[op.ref_index] = op.op
            if op.hyp_index is not None:
                hyp_op[op.hyp_index] = op.op
        for start, end, _ in find_keyword_spans(ref, kws):
            total_ref += 1
            if all(o == "match" for o in ref_op[start:end]):
                tp_ref += 1
        for start, end, _ in find_keyword_spans(hyp, kws):
            total_hyp += 1
            if all(o == "match" for o in hyp_op[start:end]):
                tp_hyp += 1
    if total_ref == 0:
        raise UndefinedMetricError("keyword metrics undefined: no reference occurrences")
    recall = tp_ref / total_ref
    precision = 1.0 if total_hyp == 0 else tp_hyp / total_hyp
    return KeywordMetrics(precision=precision, recall=recall,
                          f_score=f_score(precision, recall),
                          tp_ref=tp_ref, total_ref_occurrences=total_ref,
                          tp_hyp=tp_hyp, total_hyp_occurrences=total_hyp)


# ---- BLEU --------------------------------------------------------------------


def _ngram_counts(words: list[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(words) - n + 1):
        gram = tuple(words[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def corpus_bleu(pairs: list[tuple[list[str], list[str]]], max_n: int = 4) -> float:
    """BLEU with clipped n-gram precisions and brevity penalty.

    Zero clipped counts for n >= 2 are add-1 smoothed; a zero unigram
    precision (or an empty hypothesis corpus) scores 0.
    """
    if not pairs:
        raise ValidationError("corpus_bleu needs at least one pair")
    ref_len = sum(len(ref) for ref, _ in pairs)
    hyp_len = sum(len(hyp) for _, hyp in pairs)
    if hyp_len == 0:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, max_n + 1):
        clipped = total = 0
        for ref, hyp in pairs:
            hyp_counts = _ngram_counts(hyp, n)
            ref_counts = _ngram_counts(ref, n)
            for gram, count in hyp_counts.items():
                clipped += min(count, ref_counts.get(gram, 0))
                total += count
        if n == 1:
            if clipped == 0:
                return 0.0
            precision = clipped / total
        elif clipped == 0:
            precision = (clipped + 1) / (total + 1)
        else:
            precision = clipped / total
        log_precision_sum += math.log(precision)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision_sum / max_n)


# ---- scoring file formats ----------------------------------------------------


def load_pairs_jsonl(path: str | Path) -> list[dict]:
    """Scoring input: JSONL records {id, ref, hyp}."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        for key in ("id", "ref", "hyp"):
            if key not in row:
                raise ValidationError(f"scoring record missing field {key!r}")
        rows.append(row)
    return rows


def dump_alignment_tsv(path: str | Path, rows: list[dict]) -> None:
    """Per-utterance TSV (id, ref, hyp, ops) for win/loss inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tref\thyp\tops\n")
        for row in rows:
            ref = normalize_text(row["ref"]).split()
            hyp = normalize_text(row["hyp"]).split()
            ops = levenshtein_align(ref, hyp).ops
            op_str = " ".join(_op_token(op, ref, hyp) for op in ops)
            fh.write(f"{row['id']}\t{' '.join(ref)}\t{' '.join(hyp)}\t{op_str}\n")


def _op_token(op: AlignOp, ref: list[str], hyp: list[str]) -> str:
    if op.op == "match":
        return ref[op.ref_index]
    if op.op == "substitute":
        return f"{ref[op.ref_index]}->{hyp[op.hyp_index]}"
    if op.op == "delete":
        return f"-{ref[op.ref_index]}"
    return f"+{hyp[op.hyp_index]}"
