"""Optimization: schedule, masked loss, train loops, freeze verification.

The LM pretraining loop and the speech instruction tuning loop share the
optimizer recipe: Adam, linear warmup then cosine decay to lr/100, global
gradient-norm clipping. Only parameters with requires_grad are ever handed
to the optimizer, so the freeze contract is structural; verify_freeze checks
it bit-exactly after the fact.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import ICTConfig, TrainConfig
from .corpus import ManifestRecord, PromptSample, sample_from_record
from .errors import TrainingAbort, ValidationError
from .ict import apply_ict, derive_rng
from .model import (SALM, ParameterPartition, PromptLayout, ToyLM,
                    layouts_for_samples, partition_parameters)
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, CharTokenizer

MIN_LR_FRACTION = 0.01  # cosine anneal floor = lr / 100


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to config.lr, cosine decay to lr/100 at max_steps."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    warm, total, peak = config.warmup_steps, config.max_steps, config.lr
    floor = peak * MIN_LR_FRACTION
    if step <= warm:
        return peak * step / warm
    if step >= total:
        return floor
    progress = (step - warm) / (total - warm)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def masked_answer_loss(logits: torch.Tensor, token_ids: torch.Tensor,
                       loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions whose *target* is answer-masked.

    The token at position i is predicted from logits at position i-1.
    """
    pred_rows = []
    target_rows = []
    for b in range(logits.shape[0]):
        idx = torch.nonzero(loss_mask[b], as_tuple=False).flatten()
        idx = idx[idx > 0]
        pred_rows.append(logits[b, idx - 1])
        target_rows.append(token_ids[b, idx])
    preds = torch.cat(pred_rows, dim=0)
    targets = torch.cat(target_rows, dim=0)
    if preds.shape[0] == 0:
        raise ValidationError("batch contains no answer tokens")
    return F.cross_entropy(preds, targets)


def collate_layouts(layouts: list[PromptLayout], d_model: int,
                    dtype=torch.float32):
    """Right-pads layouts into (embeds, token_ids, loss_mask) tensors."""
    max_len = max(l.length for l in layouts)
    b = len(layouts)
    embeds = torch.zeros(b, max_len, d_model, dtype=dtype)
    token_ids = torch.zeros(b, max_len, dtype=torch.long)
    loss_mask = torch.zeros(b, max_len, dtype=torch.bool)
    for row, layout in enumerate(layouts):
        n = layout.length
        embeds[row, :n] = layout.embeddings
        token_ids[row, :n] = layout.token_ids.clamp(min=0)
        loss_mask[row, :n] = layout.loss_mask
    return embeds, token_ids, loss_mask


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (decay if param.ndim >= 2 else no_decay).append(param)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.Adam(groups, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)


def train_step(model: SALM, optimizer: torch.optim.Optimizer,
               layouts: list[PromptLayout], step: int, config: TrainConfig,
               batch_ids: list[str] | None = None,
               dump_dir: str | Path | None = None) -> float:
    """One optimization step over pre-rendered layouts. Returns the loss."""
    for layout in layouts:
        if not bool(layout.loss_mask.any()):
            raise ValidationError("training layout has an empty answer segment")
    lr = lr_schedule(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    embeds, token_ids, loss_mask = collate_layouts(layouts, model.config.d_lm,
                                                   dtype=model.param_dtype)
    logits = model.lm(embeds)
    loss = masked_answer_loss(logits, token_ids, loss_mask)
    if not torch.isfinite(loss):
        _dump_nan_batch(dump_dir, step, batch_ids)
        raise TrainingAbort(f"non-finite loss at step {step}")
    loss.backward()
    trainable = [p for p in model.parameters() if p.requires_grad]
    torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip_norm)
    optimizer.step()
    return float(loss.detach())


def _dump_nan_batch(dump_dir, step, batch_ids):
    if dump_dir is None:
        return
    path = Path(dump_dir) / "nan_batch.json"
    path.write_text(json.dumps({"step": step, "sample_ids": batch_ids or []}, indent=2),
                    encoding="utf-8")


@dataclass
class FreezeReport:
    changed_frozen: list[str] = field(default_factory=list)
    changed_trainable: list[str] = field(default_factory=list)
    unchanged_trainable: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.changed_frozen


def verify_freeze(before: dict[str, torch.Tensor], after: dict[str, torch.Tensor],
                  partition: ParameterPartition) -> FreezeReport:
    """Bit-exact comparison of two parameter snapshots under a partition."""
    if set(before) != set(after):
        raise ValidationError("parameter sets differ; architectures do not match")
    report = FreezeReport()
    for name in sorted(before):
        b, a = before[name], after[name]
        if b.shape != a.shape:
            raise ValidationError(f"shape mismatch for parameter {name!r}")
        same = torch.equal(b, a)
        if name in partition.frozen:
            if not same:
                report.changed_frozen.append(name)
        else:
            (report.unchanged_trainable if same else report.changed_trainable).append(name)
    return report


def snapshot_parameters(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def compare_lm_to_salm(lm_state: dict[str, torch.Tensor],
                       salm_state: dict[str, torch.Tensor]) -> list[str]:
    """Names of base-LM weights that differ between an LM and a SALM snapshot.

    SALM wraps attention projections, so `blocks.0.attn.q_proj.weight`
    appears as `lm.blocks.0.attn.q_proj.base.weight` there.
    """
    changed = []
    for name, tensor in lm_state.items():
        salm_name = "lm." + name
        if salm_name not in salm_state:
            salm_name = "lm." + name.replace("_proj.", "_proj.base.")
        if salm_name not in salm_state:
            raise ValidationError(f"LM parameter {name!r} has no SALM counterpart")
        if not torch.equal(tensor, salm_state[salm_name]):
            changed.append(name)
    return changed


# ---- LM pretraining ----------------------------------------------------------


@dataclass
class PretrainResult:
    lm: ToyLM
    history: list[dict]
    heldout_ppl: float


def lm_eval_perplexity(lm: ToyLM, batches: list[torch.Tensor]) -> float:
    total_nll, total_tokens = 0.0, 0
    with torch.no_grad():
        for ids in batches:
            logits = lm.forward_ids(ids)
            targets = ids[:, 1:]
            mask = targets != PAD_ID
            nll = F.cross_entropy(logits[:, :-1].transpose(1, 2), targets,
                                  reduction="none")
            total_nll += float(nll[mask].sum())
            total_tokens += int(mask.sum())
    return math.exp(total_nll / max(total_tokens, 1))


def _pad_id_batch(lines_ids: list[list[int]]) -> torch.Tensor:
    width = max(len(ids) for ids in lines_ids)
    out = torch.full((len(lines_ids), width), PAD_ID, dtype=torch.long)
    for row, ids in enumerate(lines_ids):
        out[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


def pretrain_lm(lines: list[str], tokenizer: CharTokenizer, model_config,
                config: TrainConfig, log_path: str | Path | None = None,
                heldout_fraction: float = 0.02) -> PretrainResult:
    """Next-character pretraining over text lines; returns the trained LM."""
    if not lines:
        raise ValidationError("pretraining corpus is empty")
    torch.manual_seed(config.seed)
    lm = ToyLM(model_config)
    optimizer = make_optimizer(lm, config)
    encoded = [[BOS_ID] + tokenizer.encode(line) + [EOS_ID] for line in lines]
    rng = random.Random(config.seed)
    rng.shuffle(encoded)
    n_heldout = max(1, int(len(encoded) * heldout_fraction))
    heldout, train = encoded[:n_heldout], encoded[n_heldout:]
    heldout_batches = [_pad_id_batch(heldout[i:i + 64])
                       for i in range(0, len(heldout), 64)]

    history: list[dict] = []
    writer = _CsvLog(log_path, ["step", "loss", "lr", "heldout_ppl"]) if log_path else None
    running = 0.0
    for step in range(1, config.max_steps + 1):
        lr = lr_schedule(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch_ids = _pad_id_batch([train[rng.randrange(len(train))]
                                   for _ in range(config.global_batch)])
        optimizer.zero_grad(set_to_none=True)
        logits = lm.forward_ids(batch_ids)
        targets = batch_ids[:, 1:]
        mask = targets != PAD_ID
        nll = F.cross_entropy(logits[:, :-1].transpose(1, 2), targets, reduction="none")
        loss = nll[mask].mean()
        if not torch.isfinite(loss):
            raise TrainingAbort(f"non-finite pretraining loss at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(lm.parameters(), config.grad_clip_norm)
        optimizer.step()
        running = float(loss.detach())
        if step % config.eval_interval == 0 or step == config.max_steps:
            ppl = lm_eval_perplexity(lm, heldout_batches)
            entry = {"step": step, "loss": running, "lr": lr, "heldout_ppl": ppl}
            history.append(entry)
            if writer:
                writer.write(entry)
        elif step % config.log_interval == 0:
            entry = {"step": step, "loss": running, "lr": lr, "heldout_ppl": ""}
            history.append(entry)
            if writer:
                writer.write(entry)
    final_ppl = lm_eval_perplexity(lm, heldout_batches)
    if writer:
        writer.close()
    return PretrainResult(lm=lm, history=history, heldout_ppl=final_ppl)


# ---- speech instruction tuning -----------------------------------------------


class _CsvLog:
    def __init__(self, path, header):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.DictWriter(self.fh, fieldnames=header)
        self.writer.writeheader()

    def write(self, row):
        self.writer.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


@dataclass
class SalmTrainResult:
    model: SALM
    history: list[dict]
    best_dev_wer: float
    best_state: dict[str, torch.Tensor] | None
    dumped_samples: list[dict] = field(default_factory=list)


def train_salm(model: SALM, tokenizer: CharTokenizer,
               train_records: list[ManifestRecord], base_dir: str | Path,
               config: TrainConfig, ict_config: ICTConfig,
               vocab_by_task: dict[str, set[str]],
               dev_records: list[ManifestRecord] | None = None,
               log_path: str | Path | None = None,
               dump_samples: int = 0,
               run_dir: str | Path | None = None) -> SalmTrainResult:
    """Multitask tuning loop with on-the-fly context augmentation.

    Batches are drawn uniformly over the (task-balanced) record list; the
    augmentation decision is re-drawn independently every time a sample is
    encountered. Dev WER is evaluated every eval_interval steps with greedy
    decoding and the best snapshot is kept.
    """
    tasks = set(config.task_list())
    records = [r for r in train_records if r.task in tasks]
    if not records:
        raise ValidationError(f"no training records for tasks {sorted(tasks)}")
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    rng = random.Random(config.seed)
    sample_cache: dict[int, PromptSample] = {}

    writer = _CsvLog(log_path, ["step", "loss", "lr", "dev_wer"]) if log_path else None
    history: list[dict] = []
    dumped: list[dict] = []
    best_wer = math.inf
    best_state = None

    for step in range(1, config.max_steps + 1):
        idxs = [rng.randrange(len(records)) for _ in range(config.global_batch)]
        batch: list[PromptSample] = []
        for i in idxs:
            if i not in sample_cache:
                sample_cache[i] = sample_from_record(records[i], base_dir)
            sample = sample_cache[i]
            sample_rng = derive_rng(ict_config.seed, sample.id, step)
            sample = apply_ict(sample, vocab_by_task[sample.task], ict_config, sample_rng)
            batch.append(sample)
            if len(dumped) < dump_samples:
                dumped.append({"id": sample.id, "step": step, "task": sample.task,
                               "context": sample.context,
                               "instruction": sample.instruction,
                               "target_text": sample.target_text})
        layouts = layouts_for_samples(model, batch, tokenizer, include_answer=True)
        loss = train_step(model, optimizer, layouts, step, config,
                          batch_ids=[s.id for s in batch], dump_dir=run_dir)

        dev_wer = ""
        if dev_records and (step % config.eval_interval == 0 or step == config.max_steps):
            dev_wer = evaluate_dev_wer(model, tokenizer, dev_records, base_dir,
                                       limit=config.eval_utterances)
            if dev_wer < best_wer:
                best_wer = dev_wer
                best_state = snapshot_parameters(model)
        if dev_wer != "" or step % config.log_interval == 0 or step == config.max_steps:
            entry = {"step": step, "loss": loss,
                     "lr": lr_schedule(step, config), "dev_wer": dev_wer}
            history.append(entry)
            if writer:
                writer.write(entry)
    if writer:
        writer.close()
    return SalmTrainResult(model=model, history=history,
                           best_dev_wer=best_wer, best_state=best_state,
                           dumped_samples=dumped)


def evaluate_dev_wer(model: SALM, tokenizer: CharTokenizer,
                     dev_records: list[ManifestRecord], base_dir,
                     limit: int = 128, batch_size: int = 64) -> float:
    """Greedy-decoding WER on the ASR records of a dev manifest."""
    from .decoding import greedy_decode_batch
    from .metrics import normalize_text, word_error_rate

    records = [r for r in dev_records if r.task == "asr"][:limit]
    if not records:
        raise ValidationError("dev manifest has no asr records")
    pairs = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            samples = [sample_from_record(r, base_dir) for r in chunk]
            layouts = layouts_for_samples(model, samples, tokenizer,
                                          include_answer=False)
            hyps = greedy_decode_batch(model, layouts,
                                       max_new=_max_new_for(samples))
            for rec, hyp_ids in zip(chunk, hyps):
                hyp = normalize_text(tokenizer.decode(hyp_ids))
                pairs.append((normalize_text(rec.target_text).split(), hyp.split()))
    return word_error_rate(pairs)


def _max_new_for(samples: list[PromptSample]) -> int:
    longest = max(len(s.target_text) for s in samples)
    return longest + 16
