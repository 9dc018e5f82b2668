"""Keyword-context training augmentation.

With a small probability a training sample gains a text context listing K
words, a few sampled from its own transcript (positives) and the rest drawn
from the corpus vocabulary excluding the transcript (negatives). The list is
shuffled so position does not reveal which words are positives.
"""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass

from .config import ICTConfig
from .corpus import PromptSample
from .errors import ValidationError

CONTEXT_TEMPLATE = "The following words may appear: {words}."


@dataclass
class ContextSample:
    words: list[str]
    num_positive: int
    num_negative: int
    truncated: bool = False


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_rng(seed: int, sample_id: str, draw: int) -> random.Random:
    """Stable per-(sample, encounter) stream, independent of hash seeding."""
    return random.Random(f"{seed}:{sample_id}:{draw}")


def sample_context(transcript: list[str], corpus_vocab: set[str],
                   config: ICTConfig, rng: random.Random) -> ContextSample:
    if not corpus_vocab:
        raise ValidationError("corpus vocabulary is empty")
    unique_transcript = list(dict.fromkeys(transcript))
    target_pos = round_half_up(config.num_keywords * config.positive_ratio)
    if config.positive_ratio > 0 and unique_transcript:
        target_pos = max(target_pos, 1)
    num_positive = min(target_pos, len(unique_transcript))
    positives = rng.sample(unique_transcript, num_positive)

    pool = sorted(corpus_vocab - set(transcript))
    want_neg = config.num_keywords - num_positive
    truncated = want_neg > len(pool)
    negatives = rng.sample(pool, min(want_neg, len(pool)))

    words = positives + negatives
    rng.shuffle(words)
    return ContextSample(words=words, num_positive=num_positive,
                         num_negative=len(negatives), truncated=truncated)


def format_context(words: list[str]) -> str:
    if not words:
        return ""
    return CONTEXT_TEMPLATE.format(words=", ".join(words))


def apply_ict(sample: PromptSample, corpus_vocab: set[str],
              config: ICTConfig, rng: random.Random) -> PromptSample:
    """Returns the sample unchanged or with a freshly sampled context field."""
    if rng.random() >= config.context_prob:
        return sample
    ctx = sample_context(sample.target_text.split(), corpus_vocab, config, rng)
    return dataclasses.replace(sample, context=format_context(ctx.words))


def augment_records(records, vocab_by_task: dict[str, set[str]],
                    config: ICTConfig, epoch: int = 0):
    """Offline variant: returns manifest records with context populated where drawn."""
    out = []
    for rec in records:
        rng = derive_rng(config.seed, rec.id, epoch)
        if rng.random() < config.context_prob:
            ctx = sample_context(rec.target_text.split(), vocab_by_task[rec.task],
                                 config, rng)
            rec = dataclasses.replace(rec, context=format_context(ctx.words))
        out.append(rec)
    return out
