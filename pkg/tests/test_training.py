import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from salm.config import ICTConfig, TrainConfig
from salm.errors import TrainingAbort, ValidationError
from salm.model import SALM, ToyLM, layouts_for_samples, partition_parameters
from salm.training import (collate_layouts, compare_lm_to_salm, lm_eval_perplexity,
                           lr_schedule, make_optimizer, masked_answer_loss,
                           pretrain_lm, snapshot_parameters, train_salm,
                           train_step, verify_freeze)

from tests.conftest import make_sample, micro_config


def _train_cfg(**kw):
    base = dict(global_batch=4, lr=1e-4, weight_decay=1e-3, warmup_steps=200,
                max_steps=2000, grad_clip_norm=5.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---- schedule ------------------------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = _train_cfg()
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(cfg.warmup_steps, cfg) == pytest.approx(1e-4)
    assert lr_schedule(cfg.max_steps, cfg) == pytest.approx(1e-6)
    assert lr_schedule(cfg.max_steps + 500, cfg) == pytest.approx(1e-6)


def test_lr_schedule_midpoint():
    cfg = _train_cfg()
    mid = (cfg.warmup_steps + cfg.max_steps) // 2
    floor = cfg.lr / 100
    assert lr_schedule(mid, cfg) == pytest.approx(floor + 0.5 * (cfg.lr - floor))


@settings(max_examples=60, deadline=None)
@given(step=st.integers(0, 2000))
def test_lr_schedule_monotone(step):
    cfg = _train_cfg()
    lr_now, lr_next = lr_schedule(step, cfg), lr_schedule(step + 1, cfg)
    if step < cfg.warmup_steps:
        assert lr_next >= lr_now
    else:
        assert lr_next <= lr_now


# ---- masked loss ---------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    vocab = 256
    logits = torch.zeros(1, 3, vocab)
    token_ids = torch.tensor([[0, 7, 9]])
    mask = torch.tensor([[False, False, True]])
    loss = masked_answer_loss(logits, token_ids, mask)
    assert float(loss) == pytest.approx(math.log(256), rel=1e-6)
    assert float(loss) == pytest.approx(5.545, abs=5e-4)


def test_loss_ignores_non_answer_targets():
    torch.manual_seed(0)
    logits = torch.randn(2, 6, 16)
    token_ids = torch.randint(0, 16, (2, 6))
    mask = torch.zeros(2, 6, dtype=torch.bool)
    mask[:, 4:] = True
    base = masked_answer_loss(logits, token_ids, mask)
    corrupted = token_ids.clone()
    corrupted[:, :4] = torch.randint(0, 16, (2, 4))
    assert torch.equal(masked_answer_loss(logits, corrupted, mask), base)


def test_loss_requires_answer_tokens():
    with pytest.raises(ValidationError):
        masked_answer_loss(torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.long),
                           torch.zeros(1, 3, dtype=torch.bool))


def test_collate_layouts_right_pads(tokenizer):
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer))
    rng = np.random.default_rng(0)
    samples = [make_sample(rng, sample_id=f"s{i}", n_words=i + 2, target="ab cd")
               for i in range(3)]
    layouts = layouts_for_samples(model, samples, tokenizer)
    embeds, token_ids, loss_mask = collate_layouts(layouts, model.config.d_lm)
    lengths = [l.length for l in layouts]
    assert embeds.shape[1] == max(lengths)
    for row, n in enumerate(lengths):
        assert torch.all(embeds[row, n:] == 0)
        assert not loss_mask[row, n:].any()


# ---- gradient clipping ---------------------------------------------------------


def test_gradient_clip_scales_to_max_norm():
    param = torch.nn.Parameter(torch.zeros(4))
    param.grad = torch.full((4,), 25.0)  # global norm 50
    pre = torch.nn.utils.clip_grad_norm_([param], 5.0)
    assert float(pre) == pytest.approx(50.0)
    assert float(param.grad.norm()) == pytest.approx(5.0)


# ---- train_step and the freeze contract ----------------------------------------


def _batch(model, tokenizer, n=3, seed=0):
    rng = np.random.default_rng(seed)
    samples = [make_sample(rng, sample_id=f"s{i}", target="ab cd") for i in range(n)]
    return layouts_for_samples(model, samples, tokenizer)


def test_train_step_freezes_lm(tokenizer):
    torch.manual_seed(1)
    model = SALM(micro_config(tokenizer))
    cfg = _train_cfg(lr=1e-3, warmup_steps=1, max_steps=10)
    opt = make_optimizer(model, cfg)
    part = partition_parameters(model)
    before = snapshot_parameters(model)
    loss = train_step(model, opt, _batch(model, tokenizer), step=1, config=cfg)
    assert math.isfinite(loss)
    report = verify_freeze(before, snapshot_parameters(model), part)
    assert report.ok
    assert report.changed_trainable  # at least one trainable moved


def test_train_step_is_deterministic(tokenizer):
    states = []
    for _ in range(2):
        torch.manual_seed(5)
        model = SALM(micro_config(tokenizer))
        cfg = _train_cfg(lr=1e-3, warmup_steps=1, max_steps=10, seed=5)
        opt = make_optimizer(model, cfg)
        for step in (1, 2):
            train_step(model, opt, _batch(model, tokenizer, seed=7), step, cfg)
        states.append(snapshot_parameters(model))
    for name in states[0]:
        assert torch.equal(states[0][name], states[1][name])


def test_train_step_rejects_empty_answers(tokenizer):
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer))
    cfg = _train_cfg()
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    sample = make_sample(rng)
    layouts = layouts_for_samples(model, [sample], tokenizer, include_answer=False)
    with pytest.raises(ValidationError):
        train_step(model, opt, layouts, 1, cfg)


def test_train_step_nan_aborts_with_dump(tokenizer, tmp_path):
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer))
    cfg = _train_cfg()
    opt = make_optimizer(model, cfg)
    layouts = _batch(model, tokenizer, n=1)
    layouts[0].embeddings.data[0] = float("nan")
    with pytest.raises(TrainingAbort):
        train_step(model, opt, layouts, 3, cfg, batch_ids=["s0"], dump_dir=tmp_path)
    dump = tmp_path / "nan_batch.json"
    assert dump.exists()
    assert "s0" in dump.read_text(encoding="utf-8")


def test_verify_freeze_reports_injected_fault(tokenizer):
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer))
    part = partition_parameters(model)
    before = snapshot_parameters(model)
    after = snapshot_parameters(model)
    report = verify_freeze(before, after, part)
    assert report.ok and not report.changed_trainable

    after["lm.embed.weight"] = after["lm.embed.weight"] + 1e-6
    report = verify_freeze(before, after, part)
    assert not report.ok
    assert report.changed_frozen == ["lm.embed.weight"]


def test_verify_freeze_architecture_mismatch(tokenizer):
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer))
    part = partition_parameters(model)
    before = snapshot_parameters(model)
    after = dict(before)
    del after["sep_embedding"]
    with pytest.raises(ValidationError):
        verify_freeze(before, after, part)


def test_compare_lm_to_salm_name_mapping(tokenizer):
    torch.manual_seed(2)
    cfg = micro_config(tokenizer)
    lm = ToyLM(cfg)
    lm_state = snapshot_parameters(lm)
    import copy
    salm = SALM(cfg, lm=copy.deepcopy(lm))
    assert compare_lm_to_salm(lm_state, snapshot_parameters(salm)) == []
    salm.lm.embed.weight.data += 1.0
    assert compare_lm_to_salm(lm_state, snapshot_parameters(salm)) == ["embed.weight"]


# ---- analytic vs finite-difference gradients ------------------------------------


def finite_difference_check(model, loss_fn, n_params=20, seed=0, h=1e-6,
                            rel_tol=1e-3):
    """Central finite differences on randomly sampled trainable elements."""
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    trainable = [(n, p) for n, p in model.named_parameters()
                 if p.requires_grad and p.grad is not None]
    flat = [(n, p, i) for n, p in trainable for i in range(p.numel())]
    rng = random.Random(seed)
    picks = rng.sample(flat, min(n_params, len(flat)))
    failures = []
    with torch.no_grad():
        for name, param, i in picks:
            view = param.data.view(-1)
            orig = float(view[i])
            view[i] = orig + h
            up = float(loss_fn())
            view[i] = orig - h
            down = float(loss_fn())
            view[i] = orig
            fd = (up - down) / (2 * h)
            auto = float(param.grad.view(-1)[i])
            scale = max(abs(fd), abs(auto))
            if scale < 1e-8:
                continue
            if abs(fd - auto) / scale > rel_tol:
                failures.append((name, i, fd, auto))
    return failures


def micro_double_salm(tokenizer, seed=0):
    torch.manual_seed(seed)
    model = SALM(micro_config(tokenizer)).double()
    # perturb LoRA B so gradients flow through both adapter matrices
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("lora_b"):
                param.add_(torch.randn_like(param) * 0.01)
    return model


def test_gradcheck_masked_cross_entropy(tokenizer):
    model = micro_double_salm(tokenizer)
    rng = np.random.default_rng(0)
    samples = [make_sample(rng, sample_id=f"g{i}", target="ab c") for i in range(2)]

    def loss_fn():
        layouts = layouts_for_samples(model, samples, tokenizer)
        embeds, ids, mask = collate_layouts(layouts, model.config.d_lm,
                                            dtype=torch.float64)
        return masked_answer_loss(model.lm(embeds), ids, mask)

    failures = finite_difference_check(model, loss_fn, n_params=20, seed=1)
    assert not failures, failures


# ---- LM pretraining -------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained_tiny_lm(tokenizer):
    lines = ["ab cd ef", "cd ab", "ef ab cd", "ab ab", "cd ef"] * 40
    cfg = micro_config(tokenizer)
    tcfg = _train_cfg(global_batch=8, lr=2e-3, warmup_steps=10, max_steps=100,
                      eval_interval=25, log_interval=10)
    return pretrain_lm(lines, tokenizer, cfg, tcfg), lines, cfg


def test_pretrain_loss_decreases(pretrained_tiny_lm):
    result, _, _ = pretrained_tiny_lm
    losses = [h["loss"] for h in result.history]
    first = sum(losses[:3]) / 3
    last = sum(losses[-3:]) / 3
    assert last < first


def test_pretrain_perplexity_reload_bit_exact(pretrained_tiny_lm, tokenizer, tmp_path):
    from salm.model import load_lm_checkpoint, save_checkpoint
    from salm.tokenizer import BOS_ID, EOS_ID
    from salm.training import _pad_id_batch

    result, lines, cfg = pretrained_tiny_lm
    encoded = [[BOS_ID] + tokenizer.encode(line) + [EOS_ID] for line in lines[:16]]
    batches = [_pad_id_batch(encoded)]
    ppl_before = lm_eval_perplexity(result.lm, batches)
    path = tmp_path / "lm.pt"
    save_checkpoint(path, result.lm, cfg, kind="lm")
    loaded, _, _ = load_lm_checkpoint(path)
    assert lm_eval_perplexity(loaded, batches) == ppl_before


def test_pretrain_history_has_perplexity(pretrained_tiny_lm):
    result, _, _ = pretrained_tiny_lm
    evals = [h for h in result.history if h["heldout_ppl"] != ""]
    assert evals
    assert all(math.isfinite(h["heldout_ppl"]) for h in evals)
    assert math.isfinite(result.heldout_ppl)


# ---- the tuning loop ------------------------------------------------------------


def test_train_salm_smoke_and_freeze(tiny_corpus, tokenizer, tmp_path):
    from salm.corpus import manifest_vocab, read_manifest

    _, corpus = tiny_corpus
    train_records = read_manifest(corpus.manifests["train"])
    dev_records = read_manifest(corpus.manifests["dev"])
    vocab = {t: manifest_vocab([r for r in train_records if r.task == t])
             for t in ("asr", "ast")}
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer, feature_dim=32))
    part = partition_parameters(model)
    before = snapshot_parameters(model)
    cfg = _train_cfg(global_batch=4, lr=1e-3, warmup_steps=2, max_steps=8,
                     eval_interval=4, eval_utterances=6, log_interval=2)
    log_path = tmp_path / "metrics.csv"
    result = train_salm(model, tokenizer, train_records, corpus.out_dir,
                        cfg, ICTConfig(context_prob=0.5, num_keywords=4,
                                       positive_ratio=0.25),
                        vocab, dev_records=dev_records, log_path=log_path,
                        dump_samples=16)
    report = verify_freeze(before, snapshot_parameters(model), part)
    assert report.ok
    assert math.isfinite(result.best_dev_wer)
    assert result.best_state is not None
    assert len(result.dumped_samples) == 16
    assert any(r["context"] for r in result.dumped_samples)  # p=0.5 over 16 draws

    text = log_path.read_text(encoding="utf-8").splitlines()
    assert text[0] == "step,loss,lr,dev_wer"
    dev_cells = [line.split(",")[3] for line in text[1:] if line.split(",")[3]]
    assert dev_cells and all(math.isfinite(float(c)) for c in dev_cells)


def test_train_salm_no_ict_never_adds_context(tiny_corpus, tokenizer):
    from salm.corpus import manifest_vocab, read_manifest

    _, corpus = tiny_corpus
    train_records = read_manifest(corpus.manifests["train"])
    vocab = {t: manifest_vocab([r for r in train_records if r.task == t])
             for t in ("asr", "ast")}
    torch.manual_seed(0)
    model = SALM(micro_config(tokenizer, feature_dim=32))
    cfg = _train_cfg(global_batch=4, lr=1e-3, warmup_steps=1, max_steps=4)
    result = train_salm(model, tokenizer, train_records, corpus.out_dir,
                        cfg, ICTConfig(context_prob=0.0), vocab,
                        dump_samples=16)
    assert all(r["context"] is None for r in result.dumped_samples)
