import numpy as np
import pytest
import torch

from salm.audio import FeatureSequence
from salm.config import CorpusConfig, SALMConfig
from salm.corpus import PromptSample, generate_corpus
from salm.tokenizer import CharTokenizer


@pytest.fixture(scope="session")
def tokenizer():
    return CharTokenizer()


def micro_config(tokenizer, **overrides) -> SALMConfig:
    base = dict(feature_dim=6, d_audio=8, encoder_sub_factor=2, encoder_layers=1,
                encoder_heads=2, d_lm=32, lm_layers=2, lm_heads=2,
                vocab_size=tokenizer.vocab_size, adapter_layers=2,
                adapter_sub_factor=4, lora_rank=2, lora_scale=1.0, max_seq_len=256)
    base.update(overrides)
    return SALMConfig(**base)


@pytest.fixture
def micro_cfg(tokenizer):
    return micro_config(tokenizer)


def random_features(rng: np.random.Generator, t: int, d: int,
                    shift: int = 10) -> FeatureSequence:
    return FeatureSequence(frames=rng.standard_normal((t, d)).astype(np.float32),
                           frame_shift_ms=shift, source_id="test")


def make_sample(rng, sample_id="s0", d=6, n_words=3, frames_per_word=8,
                target="cat dog", instruction="transcribe the audio.",
                context=None, task="asr") -> PromptSample:
    return PromptSample(
        id=sample_id,
        features=random_features(rng, n_words * frames_per_word, d),
        task=task,
        instruction=instruction,
        target_text=target,
        text=target,
        context=context,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small but complete corpus shared by data/training/cli tests."""
    cfg = CorpusConfig(vocab_size_words=60, rare_word_count=10,
                       train_sentences=240, dev_sentences=40, test_sentences=40,
                       boost_sentences=30, lm_extra_lines=80, seed=7)
    out = tmp_path_factory.mktemp("tiny_corpus")
    return cfg, generate_corpus(cfg, out)


class StubModel:
    """Decode-protocol stub: logits are a pure function of the emitted prefix.

    State is the list of per-row prefixes, so beam reordering is just a
    row gather, mirroring the real KV-cache bookkeeping.
    """

    def __init__(self, logits_fn, vocab_size: int):
        self.logits_fn = logits_fn
        self.vocab_size = vocab_size

    def _logits(self, rows):
        return torch.stack([torch.as_tensor(self.logits_fn(tuple(r)),
                                            dtype=torch.float32) for r in rows])

    def decode_start(self, layouts):
        state = [[] for _ in layouts]
        return state, self._logits(state)

    def decode_step(self, state, tokens):
        for row, tok in zip(state, tokens.tolist()):
            row.append(int(tok))
        return self._logits(state)

    def state_select(self, state, indices):
        return [list(state[i]) for i in indices.tolist()]


class IntTokenizer:
    """Maps 'a b c' style strings to small int ids, for trie unit tests."""

    def __init__(self, symbols="abcdefgh"):
        self.symbols = {ch: i for i, ch in enumerate(symbols)}

    def encode(self, text):
        from salm.errors import ValidationError
        ids = []
        for ch in text:
            if ch == " ":
                continue
            if ch not in self.symbols:
                raise ValidationError(f"cannot tokenize {ch!r}")
            ids.append(self.symbols[ch])
        return ids
