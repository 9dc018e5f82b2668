"""Synthetic multitask corpus: sentences, toy translation, manifests.

generate_corpus writes four JSONL manifests (train/dev/test/boost_test), a
keyword file holding the rare words, per-sentence feature files and a text
file for LM pretraining. Everything is deterministic in the corpus seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (Codebook, FeatureSequence, build_codebook, features_from_base64,
                    features_to_base64, read_features, synth_features, write_features)
from .config import CorpusConfig
from .errors import ValidationError

LETTERS = "abcdefghijklmnopqrstuvwxyz"

ASR_INSTRUCTIONS = (
    "transcribe the audio.",
    "write down what is said.",
    "convert the speech to text.",
    "recognize the spoken words.",
    "give the transcript of the utterance.",
    "type out the recording.",
)

AST_INSTRUCTIONS = (
    "translate the audio to the target language.",
    "render the speech in the foreign language.",
    "translate what is said into the other language.",
    "give the translation of the utterance.",
    "interpret the audio in the target language.",
)

TASKS = ("asr", "ast")


@dataclass
class ManifestRecord:
    id: str
    text: str
    task: str
    target_text: str
    instruction: str
    context: str | None = None
    features_path: str | None = None
    features_inline: str | None = None

    def to_json(self) -> str:
        payload = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        data = json.loads(line)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"manifest record has unknown fields: {sorted(unknown)}")
        try:
            rec = cls(**data)
        except TypeError as exc:
            raise ValidationError(f"manifest record missing fields: {exc}") from None
        if rec.task not in TASKS:
            raise ValidationError(f"manifest record {rec.id}: unknown task {rec.task!r}")
        if rec.features_path is None and rec.features_inline is None:
            raise ValidationError(f"manifest record {rec.id}: no features reference")
        return rec


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json(line))
    return records


def load_record_features(record: ManifestRecord, base_dir: str | Path) -> FeatureSequence:
    if record.features_inline is not None:
        return features_from_base64(record.features_inline, source_id=record.id)
    return read_features(Path(base_dir) / record.features_path, source_id=record.id)


@dataclass
class PromptSample:
    """One training/eval unit: acoustics plus the text sides of the prompt."""

    id: str
    features: FeatureSequence
    task: str
    instruction: str
    target_text: str
    text: str
    context: str | None = None


def sample_from_record(record: ManifestRecord, base_dir: str | Path) -> PromptSample:
    return PromptSample(
        id=record.id,
        features=load_record_features(record, base_dir),
        task=record.task,
        instruction=record.instruction,
        target_text=record.target_text,
        text=record.text,
        context=record.context,
    )


def make_word_list(count: int, rng: np.random.Generator, taken: set[str],
                   min_len: int = 3, max_len: int = 7) -> list[str]:
    words = []
    while len(words) < count:
        length = int(rng.integers(min_len, max_len + 1))
        word = "".join(LETTERS[int(i)] for i in rng.integers(0, 26, size=length))
        if word in taken:
            continue
        taken.add(word)
        words.append(word)
    return words


@dataclass
class ToyTranslator:
    """Deterministic bijective word map plus sentence reversal."""

    forward: dict[str, str]

    def __post_init__(self):
        self.backward = {v: k for k, v in self.forward.items()}
        if len(self.backward) != len(self.forward):
            raise ValidationError("translation map is not bijective")

    def translate(self, words: list[str]) -> list[str]:
        return [self.forward[w] for w in reversed(words)]

    def invert(self, words: list[str]) -> list[str]:
        return [self.backward[w] for w in reversed(words)]


def toy_translate(words: list[str], translator: ToyTranslator) -> list[str]:
    return translator.translate(words)


def make_instruction(task: str, rng: np.random.Generator) -> str:
    if task == "asr":
        pool = ASR_INSTRUCTIONS
    elif task == "ast":
        pool = AST_INSTRUCTIONS
    else:
        raise ValidationError(f"unknown task {task!r}")
    return pool[int(rng.integers(len(pool)))]


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


@dataclass
class GeneratedCorpus:
    out_dir: Path
    manifests: dict[str, Path]
    keyword_file: Path
    lm_text_file: Path
    frequent_words: list[str]
    rare_words: list[str]
    translator: ToyTranslator
    codebook: Codebook


def _sentence(rng: np.random.Generator, words: list[str], weights: np.ndarray,
              len_range: tuple[int, int]) -> list[str]:
    length = int(rng.integers(len_range[0], len_range[1] + 1))
    idx = rng.choice(len(words), size=length, p=weights)
    return [words[int(i)] for i in idx]


def _unique_sentences(rng, words, weights, len_range, count, seen: set[str]) -> list[list[str]]:
    out = []
    while len(out) < count:
        sent = _sentence(rng, words, weights, len_range)
        key = " ".join(sent)
        if key in seen:
            continue
        seen.add(key)
        out.append(sent)
    return out


def generate_corpus(config: CorpusConfig, out_dir: str | Path,
                    inline_features: bool = False, workers: int = 1) -> GeneratedCorpus:
    """Builds all splits and writes them under out_dir.

    Splits are textually disjoint; every boost_test sentence carries exactly
    one rare word, and each rare word leaks into at most
    config.rare_train_occurrences training sentences.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features_dir = out_dir / "features"
    if not inline_features:
        features_dir.mkdir(exist_ok=True)

    rng = np.random.default_rng(config.seed)
    taken: set[str] = set()
    n_frequent = config.vocab_size_words - config.rare_word_count
    frequent = make_word_list(n_frequent, rng, taken)
    rare = make_word_list(config.rare_word_count, rng, taken)
    foreign = make_word_list(config.vocab_size_words, rng, taken)
    translator = ToyTranslator(forward=dict(zip(frequent + rare, foreign)))
    codebook = build_codebook(frequent, rare, config, rng)

    weights = zipf_weights(n_frequent, config.zipf_exponent)
    seen: set[str] = set()
    split_sents = {
        "train": _unique_sentences(rng, frequent, weights, config.sentence_len_range,
                                   config.train_sentences, seen),
        "dev": _unique_sentences(rng, frequent, weights, config.sentence_len_range,
                                 config.dev_sentences, seen),
        "test": _unique_sentences(rng, frequent, weights, config.sentence_len_range,
                                  config.test_sentences, seen),
        "boost_test": _unique_sentences(rng, frequent, weights, config.sentence_len_range,
                                        config.boost_sentences, seen),
    }

    # leak each rare word into a few training sentences so its spelling has
    # been seen, but keep it rare (the scarcity invariant: <= 2 occurrences)
    train_sents = split_sents["train"]
    if config.rare_train_occurrences > 0 and rare:
        slots = rng.choice(len(train_sents), size=len(rare) * config.rare_train_occurrences,
                           replace=False)
        for k, word in enumerate(rare * config.rare_train_occurrences):
            sent = train_sents[int(slots[k])]
            sent[int(rng.integers(len(sent)))] = word

    # every boost sentence gets exactly one rare word, round-robin for balance
    boost_sents = split_sents["boost_test"]
    if rare:
        order = [rare[i % len(rare)] for i in range(len(boost_sents))]
        rng.shuffle(order)
        for sent, word in zip(boost_sents, order):
            sent[int(rng.integers(len(sent)))] = word

    manifests: dict[str, Path] = {}
    for split, sentences in split_sents.items():
        jobs = []
        for i, words in enumerate(sentences):
            sent_id = f"{split}-{i:06d}"
            dest = None if inline_features else out_dir / f"features/{sent_id}.bin"
            jobs.append((words, codebook, config, sent_id, _split_code(split), i, dest))
        if workers > 1:
            import multiprocessing as mp
            # fork keeps workers cheap on CPU; every job reseeds from scratch
            with mp.get_context("fork").Pool(workers) as pool:
                inline_payloads = pool.map(_feature_job, jobs)
        else:
            inline_payloads = [_feature_job(job) for job in jobs]

        records = []
        for (words, _, _, sent_id, _, i, dest), inline in zip(jobs, inline_payloads):
            rel_path = None if dest is None else f"features/{sent_id}.bin"
            text = " ".join(words)
            target_ast = " ".join(translator.translate(words))
            for task, target in (("asr", text), ("ast", target_ast)):
                records.append(ManifestRecord(
                    id=f"{sent_id}-{task}",
                    text=text,
                    task=task,
                    target_text=target,
                    instruction=make_instruction(task, rng),
                    features_path=rel_path,
                    features_inline=inline,
                ))
        path = out_dir / f"{split}.jsonl"
        write_manifest(path, records)
        manifests[split] = path

    keyword_file = out_dir / "keywords.txt"
    keyword_file.write_text("\n".join(sorted(rare)) + ("\n" if rare else ""),
                            encoding="utf-8")

    lm_text_file = out_dir / "lm_text.txt"
    with open(lm_text_file, "w", encoding="utf-8") as fh:
        for words in split_sents["train"]:
            fh.write(" ".join(words) + "\n")
            fh.write(" ".join(translator.translate(words)) + "\n")
        # uniform lines over the full vocabulary (rare and foreign included)
        # so the pretrained LM knows every spelling
        full_vocab = frequent + rare
        lo, hi = config.sentence_len_range
        for _ in range(config.lm_extra_lines):
            length = int(rng.integers(lo, hi + 1))
            src = [full_vocab[int(j)] for j in rng.integers(0, len(full_vocab), size=length)]
            fh.write(" ".join(src) + "\n")
            fh.write(" ".join(translator.translate(src)) + "\n")

    return GeneratedCorpus(
        out_dir=out_dir,
        manifests=manifests,
        keyword_file=keyword_file,
        lm_text_file=lm_text_file,
        frequent_words=frequent,
        rare_words=rare,
        translator=translator,
        codebook=codebook,
    )


def _split_code(split: str) -> int:
    return {"train": 1, "dev": 2, "test": 3, "boost_test": 4}[split]


def _feature_job(job) -> str | None:
    """Synthesizes one sentence's features; writes a file or returns base64."""
    words, codebook, config, sent_id, split_code, index, dest = job
    feat_rng = np.random.default_rng([config.seed, split_code, index])
    fs = synth_features(words, codebook, config, feat_rng, source_id=sent_id)
    if dest is None:
        return features_to_base64(fs)
    write_features(dest, fs)
    return None


def manifest_vocab(records: list[ManifestRecord], side: str = "target") -> set[str]:
    """Unique words over the chosen text side of a manifest."""
    vocab: set[str] = set()
    for rec in records:
        text = rec.target_text if side == "target" else rec.text
        vocab.update(text.split())
    return vocab


def read_keywords(path: str | Path) -> list[str]:
    lines = [ln.strip().lower() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return [ln for ln in lines if ln]
