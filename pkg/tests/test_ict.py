import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salm.config import ICTConfig
from salm.errors import ValidationError
from salm.ict import (apply_ict, augment_records, derive_rng, format_context,
                      round_half_up, sample_context)

VOCAB = {f"w{i:02d}" for i in range(120)}


def _cfg(**kw):
    base = dict(context_prob=0.05, num_keywords=64, positive_ratio=0.06, seed=0)
    base.update(kw)
    return ICTConfig(**base)


def test_round_half_up():
    assert round_half_up(3.84) == 4
    assert round_half_up(0.5) == 1
    assert round_half_up(0.49) == 0
    assert round_half_up(0.99) == 1


def test_sample_context_default_counts():
    transcript = ["w00", "w01", "w02", "w03", "w04"]
    ctx = sample_context(transcript, VOCAB, _cfg(), derive_rng(0, "s", 0))
    # round(64 * 0.06) = 4 positives, 60 negatives
    assert ctx.num_positive == 4
    assert ctx.num_negative == 60
    assert len(ctx.words) == 64
    in_transcript = [w for w in ctx.words if w in set(transcript)]
    assert len(in_transcript) == 4


def test_sample_context_small_k():
    transcript = ["w00", "w01", "w02"]
    ctx = sample_context(transcript, VOCAB,
                         _cfg(num_keywords=3, positive_ratio=0.33),
                         derive_rng(0, "s", 0))
    assert ctx.num_positive == 1
    assert ctx.num_negative == 2


def test_sample_context_zero_ratio():
    transcript = ["w00", "w01"]
    ctx = sample_context(transcript, VOCAB, _cfg(positive_ratio=0.0),
                         derive_rng(0, "s", 0))
    assert ctx.num_positive == 0
    assert not set(ctx.words) & set(transcript)


def test_sample_context_floor_at_one():
    ctx = sample_context(["w00"], VOCAB,
                         _cfg(num_keywords=4, positive_ratio=0.01),
                         derive_rng(0, "s", 0))
    assert ctx.num_positive == 1


def test_sample_context_truncation_flag():
    small_vocab = {"a", "b", "c", "d"}
    ctx = sample_context(["a"], small_vocab,
                         _cfg(num_keywords=10, positive_ratio=0.1),
                         derive_rng(0, "s", 0))
    assert ctx.truncated
    assert len(ctx.words) < 10


def test_sample_context_empty_vocab_error():
    with pytest.raises(ValidationError):
        sample_context(["a"], set(), _cfg(), derive_rng(0, "s", 0))


@settings(max_examples=100, deadline=None)
@given(n_words=st.integers(0, 12), k=st.integers(1, 20),
       ratio=st.floats(0, 1), seed=st.integers(0, 10))
def test_sample_context_properties(n_words, k, ratio, seed):
    transcript = [f"w{i:02d}" for i in range(n_words)]
    cfg = _cfg(num_keywords=k, positive_ratio=ratio)
    ctx = sample_context(transcript, VOCAB, cfg, derive_rng(seed, "s", 0))
    assert ctx.num_positive + ctx.num_negative == len(ctx.words)
    tset = set(transcript)
    positives = [w for w in ctx.words if w in tset]
    negatives = [w for w in ctx.words if w not in tset]
    assert len(positives) == ctx.num_positive
    assert len(negatives) == ctx.num_negative
    # ratio law: enough unique words -> exactly round(K * ratio) (>=1 floor)
    target = round_half_up(k * ratio)
    if ratio > 0 and n_words > 0:
        target = max(target, 1)
    assert ctx.num_positive == min(target, n_words)
    # determinism
    again = sample_context(transcript, VOCAB, cfg, derive_rng(seed, "s", 0))
    assert again.words == ctx.words


def test_format_context_template():
    assert format_context([]) == ""
    assert format_context(["gpu"]) == "The following words may appear: gpu."
    assert format_context(["gpu", "nemo"]) == \
        "The following words may appear: gpu, nemo."


def _sample(rng_seed=0, target="w00 w01 w02 w03 w04"):
    from tests.conftest import make_sample
    import numpy as np
    return make_sample(np.random.default_rng(rng_seed), target=target)


def test_apply_ict_prob_zero_identity():
    sample = _sample()
    for draw in range(20):
        out = apply_ict(sample, VOCAB, _cfg(context_prob=0.0),
                        derive_rng(0, sample.id, draw))
        assert out is sample


def test_apply_ict_prob_one_always_context():
    sample = _sample()
    for draw in range(20):
        out = apply_ict(sample, VOCAB, _cfg(context_prob=1.0),
                        derive_rng(0, sample.id, draw))
        assert out is not sample
        assert out.context.startswith("The following words may appear:")
        words = out.context[len("The following words may appear: "):-1].split(", ")
        assert len(words) <= 64


def test_apply_ict_deterministic():
    sample = _sample()
    a = apply_ict(sample, VOCAB, _cfg(context_prob=1.0), derive_rng(3, sample.id, 7))
    b = apply_ict(sample, VOCAB, _cfg(context_prob=1.0), derive_rng(3, sample.id, 7))
    assert a.context == b.context


def test_apply_ict_binomial_fraction():
    """Over 10k draws at p=0.05 the augmented fraction lands in the 99% band."""
    sample = _sample()
    cfg = _cfg(context_prob=0.05)
    hits = sum(
        apply_ict(sample, VOCAB, cfg, derive_rng(0, sample.id, d)) is not sample
        for d in range(10_000))
    assert 0.041 <= hits / 10_000 <= 0.059


def test_augment_records_offline(tiny_corpus):
    from salm.corpus import manifest_vocab, read_manifest
    _, corpus = tiny_corpus
    records = read_manifest(corpus.manifests["train"])[:200]
    vocabs = {t: manifest_vocab([r for r in records if r.task == t]) for t in ("asr", "ast")}
    out = augment_records(records, vocabs, _cfg(context_prob=1.0, num_keywords=8,
                                                positive_ratio=0.25))
    assert all(r.context for r in out)
    for rec in out:
        words = rec.context[len("The following words may appear: "):-1].split(", ")
        transcript = set(rec.target_text.split())
        positives = [w for w in words if w in transcript]
        negatives = [w for w in words if w not in transcript]
        # positives come from the transcript, negatives never do
        assert len(positives) >= 1
        assert len(positives) + len(negatives) == len(words)
    untouched = augment_records(records, vocabs, _cfg(context_prob=0.0))
    assert all(r.context is None for r in untouched)
    assert [dataclasses.asdict(r) for r in untouched] == \
        [dataclasses.asdict(r) for r in records]
