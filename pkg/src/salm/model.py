"""Speech-augmented LM: audio encoder, modality adapter, frozen toy LM + LoRA.

The prompt is laid out as

    speech embeddings | [sep] context | [sep] instruction [sep] | answer [eos]

where [sep] is a learned separator embedding owned by the SALM wrapper (the
frozen LM's embedding table never sees it during pretraining). The loss mask
is true exactly over answer positions. Rotary position encodings keep long
in-context prompts well-posed even though pretraining only sees short lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FeatureSequence
from .config import SALMConfig
from .corpus import PromptSample
from .errors import EmptyInputError, LengthError, ValidationError
from .tokenizer import EOS_ID, SEP_ID

MASK_VALUE = -1e9


@dataclass
class EmbeddingSequence:
    data: torch.Tensor  # [T, d]
    frame_shift_ms: int

    @property
    def length(self) -> int:
        return int(self.data.shape[0])


@dataclass
class TokenSequence:
    ids: list[int]
    role: str  # context | instruction | answer | special

    def validate(self, vocab_size: int) -> None:
        for tid in self.ids:
            if not 0 <= tid < vocab_size:
                raise ValidationError(f"token id {tid} outside [0, {vocab_size})")


@dataclass
class PromptLayout:
    embeddings: torch.Tensor          # [L, d_lm]
    segment_bounds: dict[str, tuple[int, int]]
    loss_mask: torch.Tensor           # [L] bool
    token_ids: torch.Tensor           # [L] long, -1 at speech positions

    @property
    def length(self) -> int:
        return int(self.embeddings.shape[0])


def _rope_tables(head_dim: int, positions: torch.Tensor, dtype: torch.dtype):
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, L, head_dim]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0 or (d_model // n_heads) % 2 != 0:
            raise ValidationError("head dim must be an even integer")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                attn_mask: torch.Tensor | None = None,
                cache: dict | None = None) -> torch.Tensor:
        b, l, d = x.shape
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(x))
        v = self._heads(self.v_proj(x))
        cos, sin = _rope_tables(self.head_dim, positions, x.dtype)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            att = att + attn_mask
        out = att.softmax(dim=-1) @ v
        out = out.transpose(1, 2).contiguous().view(b, l, d)
        return self.o_proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x, positions, attn_mask=None, cache=None):
        x = x + self.attn(self.ln1(x), positions, attn_mask, cache)
        return x + self.mlp(self.ln2(x))


def _subsample_conv(in_dim: int, out_dim: int, factor: int) -> nn.Conv1d:
    # kernel 2s-1 with padding s-1 yields exactly ceil(T / s) output frames
    return nn.Conv1d(in_dim, out_dim, kernel_size=2 * factor - 1,
                     stride=factor, padding=factor - 1)


class AudioEncoder(nn.Module):
    """Strided-convolution front end plus self-attention blocks."""

    def __init__(self, config: SALMConfig):
        super().__init__()
        self.sub_factor = config.encoder_sub_factor
        self.subsample = _subsample_conv(config.feature_dim, config.d_audio,
                                         config.encoder_sub_factor)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_audio, config.encoder_heads)
            for _ in range(config.encoder_layers))
        self.ln = nn.LayerNorm(config.d_audio)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: [B, T, feature_dim] -> [B, ceil(T/sub), d_audio]
        x = F.gelu(self.subsample(frames.transpose(1, 2))).transpose(1, 2)
        positions = torch.arange(x.shape[1])
        for block in self.blocks:
            x = block(x, positions)
        return self.ln(x)


class ModalityAdapter(nn.Module):
    """Stride-4 subsampler + attention blocks + projection to the LM width."""

    def __init__(self, config: SALMConfig):
        super().__init__()
        self.sub_factor = config.adapter_sub_factor
        self.subsample = _subsample_conv(config.d_audio, config.d_audio,
                                         config.adapter_sub_factor)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_audio, config.encoder_heads)
            for _ in range(config.adapter_layers))
        self.ln = nn.LayerNorm(config.d_audio)
        self.proj = nn.Linear(config.d_audio, config.d_lm)

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.subsample(encoded.transpose(1, 2))).transpose(1, 2)
        positions = torch.arange(x.shape[1])
        for block in self.blocks:
            x = block(x, positions)
        return self.proj(self.ln(x))


def lora_delta(x: torch.Tensor, a: torch.Tensor, b: torch.Tensor, scale: float) -> torch.Tensor:
    return scale * ((x @ a) @ b)


def lora_linear(x: torch.Tensor, base_weight: torch.Tensor,
                a: torch.Tensor, b: torch.Tensor, scale: float) -> torch.Tensor:
    """x @ W + scale * (x @ A) @ B with W, A, B in math ([in, out]) layout."""
    if x.shape[-1] != base_weight.shape[0]:
        raise ValidationError("lora_linear: x and base weight shapes do not conform")
    if a.shape[0] != base_weight.shape[0] or b.shape[1] != base_weight.shape[1] \
            or a.shape[1] != b.shape[0]:
        raise ValidationError("lora_linear: adapter shapes do not conform")
    return x @ base_weight + lora_delta(x, a, b, scale)


class LoRALinear(nn.Module):
    """Frozen linear plus a trainable low-rank additive path (B zero-init)."""

    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.base = base
        self.scale = scale
        in_dim, out_dim = base.in_features, base.out_features
        self.lora_a = nn.Parameter(torch.randn(in_dim, rank) / math.sqrt(in_dim))
        self.lora_b = nn.Parameter(torch.zeros(rank, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + lora_delta(x, self.lora_a, self.lora_b, self.scale)


def inject_lora(lm: "ToyLM", rank: int, scale: float) -> None:
    """Wraps every attention q/k/v/o projection of the LM in place."""
    for block in lm.blocks:
        attn = block.attn
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            layer = getattr(attn, name)
            if isinstance(layer, LoRALinear):
                raise ValidationError("LoRA already injected into this LM")
            setattr(attn, name, LoRALinear(layer, rank, scale))


class ToyLM(nn.Module):
    """Decoder-only transformer over character tokens."""

    def __init__(self, config: SALMConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_lm)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_lm, config.lm_heads)
            for _ in range(config.lm_layers))
        self.ln_f = nn.LayerNorm(config.d_lm)
        self.head = nn.Linear(config.d_lm, config.vocab_size, bias=False)

    def new_cache(self) -> list[dict]:
        return [{} for _ in self.blocks]

    def forward(self, embeds: torch.Tensor,
                key_pad_mask: torch.Tensor | None = None,
                cache: list[dict] | None = None) -> torch.Tensor:
        """embeds: [B, L_new, d]. Causal; returns [B, L_new, vocab]."""
        b, l_new, _ = embeds.shape
        past = 0
        if cache is not None and "k" in cache[0]:
            past = cache[0]["k"].shape[2]
        l_total = past + l_new
        if l_total > self.config.max_seq_len:
            raise LengthError(
                f"sequence length {l_total} exceeds max_seq_len {self.config.max_seq_len}")
        positions = torch.arange(past, l_total)
        qi = torch.arange(l_new)[:, None]
        kj = torch.arange(l_total)[None, :]
        allowed = kj <= past + qi
        mask = torch.zeros(l_new, l_total, dtype=embeds.dtype)
        mask[~allowed] = MASK_VALUE
        mask = mask[None, None]
        if key_pad_mask is not None:
            pad = torch.zeros(b, l_total, dtype=embeds.dtype)
            pad[key_pad_mask] = MASK_VALUE
            mask = mask + pad[:, None, None, :]
        x = embeds
        for i, block in enumerate(self.blocks):
            x = block(x, positions, mask, cache[i] if cache is not None else None)
        return self.head(self.ln_f(x))

    def forward_ids(self, ids: torch.Tensor,
                    key_pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward(self.embed(ids), key_pad_mask)


class SALM(nn.Module):
    """Frozen LM conditioned on speech via encoder + adapter, tuned with LoRA.

    Construction takes ownership of the passed LM (LoRA wrapping mutates it);
    callers that need the pristine base LM should deepcopy first.
    """

    def __init__(self, config: SALMConfig, lm: ToyLM | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = AudioEncoder(config)
        self.adapter = ModalityAdapter(config)
        self.lm = lm if lm is not None else ToyLM(config)
        inject_lora(self.lm, config.lora_rank, config.lora_scale)
        self.sep_embedding = nn.Parameter(torch.randn(config.d_lm) * 0.02)
        # start speech embeddings at the frozen LM's token-embedding scale;
        # the projection input is layer-normed, so unit per-dim variance in,
        # and a wildly out-of-distribution prefix stalls cross-modal binding
        with torch.no_grad():
            target = float(self.lm.embed.weight.detach().std())
            nn.init.normal_(self.adapter.proj.weight,
                            std=target / math.sqrt(config.d_audio))
            nn.init.zeros_(self.adapter.proj.bias)
        for name, param in self.lm.named_parameters():
            param.requires_grad = ".lora_" in name

    @property
    def param_dtype(self) -> torch.dtype:
        return self.sep_embedding.dtype

    # ---- speech path -----------------------------------------------------

    def encode_audio(self, features: FeatureSequence) -> EmbeddingSequence:
        features.validate()
        if features.dim != self.config.feature_dim:
            raise ValidationError(
                f"feature dim {features.dim} != configured {self.config.feature_dim}")
        frames = torch.from_numpy(features.frames).to(self.param_dtype)[None]
        out = self.encoder(frames)[0]
        return EmbeddingSequence(out, features.frame_shift_ms * self.config.encoder_sub_factor)

    def adapt_modality(self, encoded: EmbeddingSequence) -> EmbeddingSequence:
        if encoded.length < 1:
            raise EmptyInputError("adapter input is empty")
        out = self.adapter(encoded.data[None])[0]
        return EmbeddingSequence(out, encoded.frame_shift_ms * self.config.adapter_sub_factor)

    def encode_speech(self, features: FeatureSequence) -> EmbeddingSequence:
        return self.adapt_modality(self.encode_audio(features))

    def encode_speech_batch(self, features_list: list[FeatureSequence]) -> list[torch.Tensor]:
        """Groups inputs of equal frame count so they batch through the conv."""
        for fs in features_list:
            fs.validate()
            if fs.dim != self.config.feature_dim:
                raise ValidationError("feature dim mismatch in batch")
        by_len: dict[int, list[int]] = {}
        for i, fs in enumerate(features_list):
            by_len.setdefault(fs.num_frames, []).append(i)
        out: list[torch.Tensor | None] = [None] * len(features_list)
        for _, idxs in sorted(by_len.items()):
            frames = torch.stack([
                torch.from_numpy(features_list[i].frames).to(self.param_dtype) for i in idxs])
            speech = self.adapter(self.encoder(frames))
            for row, i in enumerate(idxs):
                out[i] = speech[row]
        return out

    # ---- prompt assembly ---------------------------------------------------

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        base = self.lm.embed(ids)
        sep = ids == SEP_ID
        if bool(sep.any()):
            base = torch.where(sep[..., None], self.sep_embedding.to(base.dtype), base)
        return base

    def assemble_prompt(self, speech: EmbeddingSequence,
                        context: TokenSequence | None,
                        instruction: TokenSequence,
                        answer: TokenSequence | None) -> PromptLayout:
        if not instruction.ids:
            raise ValidationError("instruction tokens must be nonempty")
        vocab = self.config.vocab_size
        instruction.validate(vocab)
        if context is not None:
            context.validate(vocab)
        if answer is not None:
            answer.validate(vocab)

        pieces = [speech.data]
        ids: list[int] = [-1] * speech.length
        bounds: dict[str, tuple[int, int]] = {"speech": (0, speech.length)}
        cursor = speech.length
        for name, seq in (("context", context), ("instruction", instruction),
                          ("answer", answer)):
            seq_ids = seq.ids if seq is not None else []
            if seq_ids:
                pieces.append(self.embed_tokens(torch.tensor(seq_ids, dtype=torch.long)))
            bounds[name] = (cursor, cursor + len(seq_ids))
            ids.extend(seq_ids)
            cursor += len(seq_ids)
        if cursor > self.config.max_seq_len:
            raise LengthError(f"prompt length {cursor} exceeds max_seq_len "
                              f"{self.config.max_seq_len}")
        embeddings = torch.cat(pieces, dim=0)
        loss_mask = torch.zeros(cursor, dtype=torch.bool)
        a0, a1 = bounds["answer"]
        loss_mask[a0:a1] = True
        return PromptLayout(embeddings=embeddings, segment_bounds=bounds,
                            loss_mask=loss_mask,
                            token_ids=torch.tensor(ids, dtype=torch.long))

    def lm_forward(self, layout: PromptLayout) -> torch.Tensor:
        if layout.length > self.config.max_seq_len:
            raise LengthError(f"layout length {layout.length} exceeds max_seq_len")
        return self.lm(layout.embeddings[None])[0]

    # ---- incremental decoding interface ------------------------------------

    def decode_start(self, layouts: list[PromptLayout]):
        """Left-pads prompts, fills the KV cache, returns (state, next logits)."""
        if not layouts:
            raise ValidationError("decode_start needs at least one layout")
        max_len = max(l.length for l in layouts)
        d = self.config.d_lm
        embeds = torch.zeros(len(layouts), max_len, d, dtype=self.param_dtype)
        pad_mask = torch.ones(len(layouts), max_len, dtype=torch.bool)
        for row, layout in enumerate(layouts):
            embeds[row, max_len - layout.length:] = layout.embeddings
            pad_mask[row, max_len - layout.length:] = False
        cache = self.lm.new_cache()
        logits = self.lm(embeds, key_pad_mask=pad_mask, cache=cache)
        state = {"cache": cache, "pad_mask": pad_mask}
        return state, logits[:, -1, :]

    def decode_step(self, state, tokens: torch.Tensor) -> torch.Tensor:
        embeds = self.embed_tokens(tokens)[:, None, :]
        pad_mask = torch.cat([
            state["pad_mask"],
            torch.zeros(tokens.shape[0], 1, dtype=torch.bool)], dim=1)
        state["pad_mask"] = pad_mask
        logits = self.lm(embeds, key_pad_mask=pad_mask, cache=state["cache"])
        return logits[:, -1, :]

    def state_select(self, state, indices: torch.Tensor):
        """Row-gathers a decode state (used by beam search reordering)."""
        cache = [{"k": entry["k"].index_select(0, indices),
                  "v": entry["v"].index_select(0, indices)}
                 for entry in state["cache"]]
        return {"cache": cache, "pad_mask": state["pad_mask"].index_select(0, indices)}


# ---- sample rendering -------------------------------------------------------


def render_token_sequences(sample: PromptSample, tokenizer, *,
                           include_answer: bool = True,
                           context_override: str | None = None):
    """Builds the (context, instruction, answer) token sequences for a sample.

    Separator placement: context and instruction each open with [sep]; the
    instruction also closes with [sep], which is the position from which the
    first answer token is predicted.
    """
    ctx_text = sample.context if context_override is None else context_override
    context = None
    if ctx_text:
        context = TokenSequence([SEP_ID] + tokenizer.encode(ctx_text), "context")
    if not sample.instruction:
        raise ValidationError(f"sample {sample.id} has an empty instruction")
    instruction = TokenSequence(
        [SEP_ID] + tokenizer.encode(sample.instruction) + [SEP_ID], "instruction")
    answer = None
    if include_answer:
        if not sample.target_text:
            raise ValidationError(f"sample {sample.id} has an empty target")
        answer = TokenSequence(tokenizer.encode(sample.target_text) + [EOS_ID], "answer")
    return context, instruction, answer


def layouts_for_samples(model: SALM, samples: list[PromptSample], tokenizer, *,
                        include_answer: bool = True,
                        context_override: str | None = None) -> list[PromptLayout]:
    speech_list = model.encode_speech_batch([s.features for s in samples])
    shift_ms = 0  # bookkeeping only; assemble_prompt does not use the shift
    layouts = []
    for sample, speech in zip(samples, speech_list):
        context, instruction, answer = render_token_sequences(
            sample, tokenizer, include_answer=include_answer,
            context_override=context_override)
        layouts.append(model.assemble_prompt(
            EmbeddingSequence(speech, shift_ms), context, instruction, answer))
    return layouts


# ---- parameter partition and checkpoints ------------------------------------


@dataclass
class ParameterPartition:
    frozen: set[str] = field(default_factory=set)
    trainable: set[str] = field(default_factory=set)

    def validate_against(self, model: nn.Module) -> None:
        names = {n for n, _ in model.named_parameters()}
        if self.frozen & self.trainable:
            raise ValidationError("parameter partition overlaps")
        if self.frozen | self.trainable != names:
            raise ValidationError("parameter partition does not cover the model")


def partition_parameters(model: nn.Module) -> ParameterPartition:
    part = ParameterPartition()
    for name, param in model.named_parameters():
        (part.trainable if param.requires_grad else part.frozen).add(name)
    return part


def model_config_to_text(config: SALMConfig) -> str:
    import dataclasses as _dc
    return "\n".join(f"{f.name} = {getattr(config, f.name)}"
                     for f in _dc.fields(config)) + "\n"


def model_config_from_text(text: str) -> SALMConfig:
    import dataclasses as _dc
    kwargs = {}
    types = {f.name: f.type for f in _dc.fields(SALMConfig)}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise ValidationError(f"unknown model config key {key!r} in checkpoint")
        ftype = str(types[key])
        kwargs[key] = float(raw) if "float" in ftype else int(raw)
    return SALMConfig(**kwargs)


def save_checkpoint(path, model: nn.Module, config: SALMConfig, kind: str,
                    meta: dict | None = None,
                    partition: ParameterPartition | None = None) -> None:
    """Single-archive checkpoint; parameter names carry the freeze partition."""
    if partition is None:
        if kind == "lm":
            partition = ParameterPartition(frozen={n for n, _ in model.named_parameters()})
        else:
            partition = partition_parameters(model)
    params = {}
    for name, param in model.named_parameters():
        prefix = "frozen" if name in partition.frozen else "trainable"
        params[f"{prefix}/{name}"] = param.detach().clone()
    torch.save({
        "kind": kind,
        "model_config": model_config_to_text(config),
        "params": params,
        "meta": meta or {},
    }, path)


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("kind", "model_config", "params"):
        if key not in blob:
            raise ValidationError(f"checkpoint missing field {key!r}")
    return blob


def checkpoint_partition(blob: dict) -> ParameterPartition:
    part = ParameterPartition()
    for key in blob["params"]:
        prefix, _, name = key.partition("/")
        if prefix == "frozen":
            part.frozen.add(name)
        elif prefix == "trainable":
            part.trainable.add(name)
        else:
            raise ValidationError(f"checkpoint parameter {key!r} lacks a partition prefix")
    return part


def checkpoint_state_dict(blob: dict) -> dict[str, torch.Tensor]:
    return {key.partition("/")[2]: tensor for key, tensor in blob["params"].items()}


def load_lm_checkpoint(path) -> tuple[ToyLM, SALMConfig, dict]:
    blob = read_checkpoint(path)
    if blob["kind"] != "lm":
        raise ValidationError(f"expected an lm checkpoint, got kind={blob['kind']!r}")
    config = model_config_from_text(blob["model_config"])
    lm = ToyLM(config)
    lm.load_state_dict(checkpoint_state_dict(blob))
    return lm, config, blob.get("meta", {})


def load_salm_checkpoint(path) -> tuple[SALM, SALMConfig, dict]:
    blob = read_checkpoint(path)
    if blob["kind"] != "salm":
        raise ValidationError(f"expected a salm checkpoint, got kind={blob['kind']!r}")
    config = model_config_from_text(blob["model_config"])
    model = SALM(config)
    model.load_state_dict(checkpoint_state_dict(blob))
    stored = checkpoint_partition(blob)
    derived = partition_parameters(model)
    if stored.frozen != derived.frozen:
        raise ValidationError("checkpoint freeze partition disagrees with the model's")
    return model, config, blob.get("meta", {})
