"""Synthetic "audio": codebook features, and the feature file formats.

A word's acoustics are frames_per_token copies of its codebook vector plus
i.i.d. Gaussian noise. Rare words are planted near a frequent partner word's
vector so that they stay acoustically confusable and keyword boosting has
headroom.

On-disk format: 3 little-endian int32 (T, D, frame_shift_ms) followed by
T*D little-endian float32; the same bytes are used for inline base64.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .errors import EmptyInputError, ValidationError

DEFAULT_FRAME_SHIFT_MS = 10


@dataclass
class FeatureSequence:
    frames: np.ndarray  # [T, D] float32
    frame_shift_ms: int = DEFAULT_FRAME_SHIFT_MS
    source_id: str = ""

    def validate(self) -> None:
        if self.frames.ndim != 2:
            raise ValidationError("features must be a T x D matrix")
        if self.frames.shape[0] < 1:
            raise EmptyInputError("feature sequence is empty")
        if self.frame_shift_ms < 1:
            raise ValidationError("frame_shift_ms must be a positive integer")
        if not np.isfinite(self.frames).all():
            raise ValidationError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


def features_to_bytes(fs: FeatureSequence) -> bytes:
    header = np.array([fs.num_frames, fs.dim, fs.frame_shift_ms], dtype="<i4")
    body = np.ascontiguousarray(fs.frames, dtype="<f4")
    return header.tobytes() + body.tobytes()


def features_from_bytes(blob: bytes, source_id: str = "") -> FeatureSequence:
    if len(blob) < 12:
        raise ValidationError("feature blob too short for header")
    t, d, shift = (int(v) for v in np.frombuffer(blob[:12], dtype="<i4"))
    expected = 12 + 4 * t * d
    if t < 1 or d < 1 or len(blob) != expected:
        raise ValidationError("feature blob header inconsistent with payload size")
    frames = np.frombuffer(blob[12:], dtype="<f4").reshape(t, d).copy()
    return FeatureSequence(frames=frames, frame_shift_ms=shift, source_id=source_id)


def write_features(path: str | Path, fs: FeatureSequence) -> None:
    Path(path).write_bytes(features_to_bytes(fs))


def read_features(path: str | Path, source_id: str = "") -> FeatureSequence:
    return features_from_bytes(Path(path).read_bytes(), source_id=source_id)


def features_to_base64(fs: FeatureSequence) -> str:
    return base64.b64encode(features_to_bytes(fs)).decode("ascii")


def features_from_base64(payload: str, source_id: str = "") -> FeatureSequence:
    return features_from_bytes(base64.b64decode(payload.encode("ascii")), source_id=source_id)


@dataclass
class Codebook:
    """Word -> feature-space vector, with rare/partner bookkeeping."""

    vectors: dict[str, np.ndarray]
    rare_partner: dict[str, str] = field(default_factory=dict)

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def nearest(self, frame: np.ndarray) -> str:
        best_word, best_dist = None, None
        for word, vec in self.vectors.items():
            dist = float(np.sum((frame - vec) ** 2))
            if best_dist is None or dist < best_dist:
                best_word, best_dist = word, dist
        return best_word


def build_codebook(frequent_words: list[str], rare_words: list[str],
                   config: CorpusConfig, rng: np.random.Generator) -> Codebook:
    vectors: dict[str, np.ndarray] = {}
    for word in frequent_words:
        vectors[word] = rng.standard_normal(config.feature_dim).astype(np.float32)
    rare_partner: dict[str, str] = {}
    offset = config.confusable_distance_sigmas * config.noise_sigma
    if offset <= 0:
        # keep rare vectors distinct even when noise is disabled
        offset = 1e-3
    for word in rare_words:
        partner = frequent_words[int(rng.integers(len(frequent_words)))]
        direction = rng.standard_normal(config.feature_dim)
        direction /= np.linalg.norm(direction)
        vectors[word] = (vectors[partner] + offset * direction).astype(np.float32)
        rare_partner[word] = partner
    return Codebook(vectors=vectors, rare_partner=rare_partner)


def synth_features(words: list[str], codebook: Codebook, config: CorpusConfig,
                   rng: np.random.Generator, source_id: str = "") -> FeatureSequence:
    """Renders a word list as frames_per_token noisy copies of each codeword."""
    if not words:
        raise EmptyInputError("cannot synthesize features for an empty word list")
    rows = []
    for word in words:
        vec = codebook.vectors.get(word)
        if vec is None:
            raise ValidationError(f"word {word!r} not in codebook")
        block = np.repeat(vec[None, :], config.frames_per_token, axis=0)
        rows.append(block)
    frames = np.concatenate(rows, axis=0)
    if config.noise_sigma > 0:
        frames = frames + rng.normal(0.0, config.noise_sigma, size=frames.shape)
    fs = FeatureSequence(frames=frames.astype(np.float32),
                         frame_shift_ms=DEFAULT_FRAME_SHIFT_MS,
                         source_id=source_id)
    fs.validate()
    return fs
