"""Dataclass configs for every subsystem plus the flat key=value file format.

A run config is a merged view of all sections; files look like::

    corpus.train_sentences = 20000
    model.d_lm = 128
    train.lr = 1e-4

Every key is validated against the owning section's invariants at load time;
unknown keys fail fast with the offending key named in the message.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class CorpusConfig:
    vocab_size_words: int = 200
    rare_word_count: int = 30
    sentence_len_range: tuple[int, int] = (4, 9)
    frames_per_token: int = 8
    feature_dim: int = 32
    noise_sigma: float = 0.3
    seed: int = 0
    train_sentences: int = 20000
    dev_sentences: int = 400
    test_sentences: int = 400
    boost_sentences: int = 300
    zipf_exponent: float = 1.0
    # rare-word codebook vectors sit this many noise sigmas away from a
    # frequent "partner" word, keeping them acoustically confusable
    confusable_distance_sigmas: float = 2.0
    # occurrences of each rare word injected into the training split (<= 2)
    rare_train_occurrences: int = 1
    # extra uniform-vocabulary lines appended to the LM pretraining text so
    # the frozen LM has seen every spelling, rare words included
    lm_extra_lines: int = 2000

    def validate(self) -> None:
        if self.vocab_size_words < 2:
            raise ConfigError("corpus.vocab_size_words must be >= 2")
        if not 0 <= self.rare_word_count < self.vocab_size_words:
            raise ConfigError("corpus.rare_word_count must be in [0, vocab_size_words)")
        lo, hi = self.sentence_len_range
        if lo < 1 or hi < lo:
            raise ConfigError("corpus.sentence_len_range must satisfy 1 <= min <= max")
        if self.frames_per_token < 1:
            raise ConfigError("corpus.frames_per_token must be positive")
        if self.feature_dim < 1:
            raise ConfigError("corpus.feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("corpus.noise_sigma must be non-negative")
        for name in ("train_sentences", "dev_sentences", "test_sentences", "boost_sentences"):
            if getattr(self, name) < 1:
                raise ConfigError(f"corpus.{name} must be positive")
        if not 0 <= self.rare_train_occurrences <= 2:
            raise ConfigError("corpus.rare_train_occurrences must be 0, 1 or 2")
        if self.lm_extra_lines < 0:
            raise ConfigError("corpus.lm_extra_lines must be non-negative")


@dataclass
class SALMConfig:
    feature_dim: int = 32
    d_audio: int = 64
    encoder_sub_factor: int = 2
    encoder_layers: int = 2
    encoder_heads: int = 4
    d_lm: int = 256
    lm_layers: int = 4
    lm_heads: int = 4
    vocab_size: int = 34
    adapter_layers: int = 2
    adapter_sub_factor: int = 4
    lora_rank: int = 8  # reference-scale value is 128; desk default 8
    lora_scale: float = 1.0
    max_seq_len: int = 768

    def validate(self) -> None:
        positive = (
            "feature_dim", "d_audio", "encoder_sub_factor", "encoder_layers",
            "encoder_heads", "d_lm", "lm_layers", "lm_heads", "vocab_size",
            "adapter_layers", "adapter_sub_factor", "max_seq_len",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if not 1 <= self.lora_rank < self.d_lm:
            raise ConfigError("model.lora_rank must satisfy 1 <= rank < d_lm")
        if self.lora_scale <= 0:
            raise ConfigError("model.lora_scale must be positive")
        if self.d_lm % self.lm_heads != 0:
            raise ConfigError("model.d_lm must be divisible by model.lm_heads")
        if self.d_audio % self.encoder_heads != 0:
            raise ConfigError("model.d_audio must be divisible by model.encoder_heads")


@dataclass
class ICTConfig:
    context_prob: float = 0.05
    num_keywords: int = 64
    positive_ratio: float = 0.06
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.context_prob <= 1.0:
            raise ConfigError("ict.context_prob must be in [0, 1]")
        if self.num_keywords < 1:
            raise ConfigError("ict.num_keywords must be >= 1")
        if not 0.0 <= self.positive_ratio <= 1.0:
            raise ConfigError("ict.positive_ratio must be in [0, 1]")


@dataclass
class TrainConfig:
    global_batch: int = 32  # reference-scale 64
    lr: float = 1e-4
    weight_decay: float = 1e-3
    warmup_steps: int = 200  # reference-scale 2000
    max_steps: int = 2000
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_interval: int = 200
    eval_utterances: int = 128
    log_interval: int = 50
    tasks: str = "asr,ast"

    def validate(self) -> None:
        for name in ("global_batch", "warmup_steps", "max_steps", "eval_interval",
                     "eval_utterances", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr <= 0 or self.grad_clip_norm <= 0:
            raise ConfigError("train.lr and train.grad_clip_norm must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if self.warmup_steps > self.max_steps:
            raise ConfigError("train.warmup_steps must be <= train.max_steps")
        tasks = {t.strip() for t in self.tasks.split(",") if t.strip()}
        if not tasks or not tasks <= {"asr", "ast"}:
            raise ConfigError("train.tasks must be a comma list drawn from {asr, ast}")

    def task_list(self) -> list[str]:
        return [t.strip() for t in self.tasks.split(",") if t.strip()]


@dataclass
class NucleusConfig:
    temperature: float = 0.2
    top_p: float = 0.95
    top_k: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("nucleus.temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigError("nucleus.top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("nucleus.top_k must be >= 1")


@dataclass
class BiasConfig:
    context_score: float = 4.0
    beam_width: int = 5
    alpha: float = 2.0  # max log-prob gap for retaining an expansion
    gamma: float = 8.0  # max expansions per hypothesis per step

    def validate(self) -> None:
        if self.beam_width < 1:
            raise ConfigError("bias.beam_width must be >= 1")
        if self.alpha < 0:
            raise ConfigError("bias.alpha must be non-negative")
        if self.gamma < 1:
            raise ConfigError("bias.gamma must be >= 1")


@dataclass
class EvalConfig:
    max_new_tokens: int = 96
    batch_size: int = 64

    def validate(self) -> None:
        if self.max_new_tokens < 1 or self.batch_size < 1:
            raise ConfigError("eval.max_new_tokens and eval.batch_size must be positive")


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: SALMConfig = field(default_factory=SALMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        global_batch=64, lr=2e-3, warmup_steps=80, max_steps=800, eval_interval=100))
    ict: ICTConfig = field(default_factory=ICTConfig)
    nucleus: NucleusConfig = field(default_factory=NucleusConfig)
    bias: BiasConfig = field(default_factory=BiasConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()

    def set_seed(self, seed: int) -> None:
        """Point every seeded section at the same master seed."""
        self.corpus.seed = seed
        self.train.seed = seed
        self.pretrain.seed = seed
        self.ict.seed = seed
        self.nucleus.seed = seed


def _parse_value(raw: str, target_type, key: str):
    raw = raw.strip()
    origin = typing.get_origin(target_type)
    if origin is tuple:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        args = typing.get_args(target_type)
        if len(parts) != len(args):
            raise ConfigError(f"key {key!r} expects {len(args)} comma-separated values")
        return tuple(_parse_value(p, a, key) for p, a in zip(parts, args))
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} expects an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} expects a number, got {raw!r}") from None
    if target_type is str:
        return raw
    raise ConfigError(f"key {key!r} has unsupported type {target_type}")


def _section_field_types(section) -> dict[str, type]:
    hints = typing.get_type_hints(type(section))
    return {f.name: hints[f.name] for f in dataclasses.fields(section)}


def apply_override(run: RunConfig, key: str, raw_value: str) -> None:
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.field")
    section_name, field_name = key.split(".", 1)
    if not hasattr(run, section_name) or section_name.startswith("_"):
        raise ConfigError(f"unknown config section in key {key!r}")
    section = getattr(run, section_name)
    types = _section_field_types(section)
    if field_name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, field_name, _parse_value(raw_value, types[field_name], key))


def parse_config_text(text: str, run: RunConfig | None = None) -> RunConfig:
    run = run or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        apply_override(run, key.strip(), raw)
    return run


def load_run_config(path: str | Path | None = None,
                    overrides: list[str] | None = None,
                    seed: int | None = None) -> RunConfig:
    """Builds a validated RunConfig from a file, -O overrides and --seed."""
    run = RunConfig()
    if path is not None:
        run = parse_config_text(Path(path).read_text(encoding="utf-8"), run)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        key, raw = item.split("=", 1)
        apply_override(run, key.strip(), raw)
    if seed is not None:
        run.set_seed(seed)
    run.validate()
    return run


def config_to_text(run: RunConfig) -> str:
    lines = []
    for section_field in dataclasses.fields(run):
        section = getattr(run, section_field.name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section_field.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_to_dict(run: RunConfig) -> dict:
    return {
        section.name: dataclasses.asdict(getattr(run, section.name))
        for section in dataclasses.fields(run)
    }
