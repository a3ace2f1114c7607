"""Two-stage MLM pretraining: steps-based loop with stream cycling,
deterministic checkpoint/resume, scheduled validation, context-length
extension, and a grid-search fine-tuning head for classification probes.
"""

import copy
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, FingerprintMismatchError, save_checkpoint
from .data import IGNORE_LABEL, apply_mlm_mask, pad_batch
from .errors import ValidationError
from .metrics import MetricLog
from .model import EncoderWeights, encoder_forward, init_model, mlm_logits
from .optim import AdamWState, LrSchedule, adamw_step, clip_global_norm, lr_at

# salts keeping the independent RNG streams apart
_MASK_SALT = 17
_DATA_SALT = 23
_VAL_SALT = 9001

DEFAULT_FT_LRS = (5e-6, 1e-5, 2e-5, 3e-5, 5e-5, 1e-4)
DEFAULT_FT_EPOCHS = (1, 2, 3, 4, 5, 10)


@dataclass
class TrainConfig:
    stage: int = 1
    max_seq_len: int = 128
    total_steps: int = 2000
    batch_size: int = 8
    peak_lr: float = 5e-4
    warmup_steps: int = 96
    mlm_probability: float = 0.30
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 1e-5
    seed: int = 0
    checkpoint_every: int | None = None  # None -> total_steps // 25
    validate_every: int = 100
    carry_optimizer: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        if not 0 < self.mlm_probability <= 1:
            raise ValidationError(f"mlm_probability must be in (0, 1], got {self.mlm_probability}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValidationError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}"
            )
        if self.batch_size < 1 or self.max_seq_len < 1:
            raise ValidationError("batch_size and max_seq_len must be >= 1")
        if self.grad_clip <= 0:
            raise ValidationError(f"grad_clip must be positive, got {self.grad_clip}")


def desk_stage1_config(seed=0, **overrides):
    return TrainConfig(stage=1, seed=seed, **overrides)


def desk_stage2_config(seed=0, **overrides):
    kw = dict(stage=2, max_seq_len=512, total_steps=800, batch_size=4, peak_lr=5e-5, seed=seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def token_slot_budget(config):
    """Token slots a stage consumes, padding included: steps × batch × length."""
    return config.total_steps * config.batch_size * config.max_seq_len


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")


def _epoch_perm(seed, epoch, n):
    return np.random.default_rng((seed, _DATA_SALT, epoch)).permutation(n)


def _draw_batch(seed, n, batch_size, epoch, offset):
    """Next batch of dataset indices under per-epoch shuffled cycling."""
    idxs = []
    perm = _epoch_perm(seed, epoch, n)
    while len(idxs) < batch_size:
        if offset >= n:
            epoch += 1
            offset = 0
            perm = _epoch_perm(seed, epoch, n)
        take = min(batch_size - len(idxs), n - offset)
        idxs.extend(perm[offset : offset + take].tolist())
        offset += take
    return idxs, epoch, offset


def _training_step(masked, weights, model_config, config, opt_state, lr):
    hidden = encoder_forward(masked.input_ids, masked.pad_mask, weights, model_config)
    d = model_config.hidden_dim
    flat_labels = masked.labels.reshape(-1)
    sel = np.nonzero(flat_labels != IGNORE_LABEL)[0]
    rows = ag.take_rows(ag.reshape(hidden, (-1, d)), sel)
    logits = mlm_logits(rows, weights, model_config)
    loss = ag.cross_entropy(logits, flat_labels[sel], ignore_label=IGNORE_LABEL)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        return loss_val, None
    loss.backward()
    grads = weights.grads()
    clip_global_norm(grads, config.grad_clip)
    adamw_step(
        weights.data_arrays(),
        grads,
        opt_state,
        lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    weights.zero_grad()
    return loss_val, grads


def train(
    config,
    dataset,
    *,
    model_config=None,
    tokenizer_fingerprint="",
    init=None,
    val_dataset=None,
    checkpoint_dir=None,
    log=None,
):
    """Run (or resume) one pretraining stage over pre-chunked token lists.

    Returns (final Checkpoint, MetricLog). The data stream cycles with a
    fresh shuffle per pass; all RNG streams live in the checkpoint, so
    stopping and resuming reproduces the uninterrupted run bit-exactly.
    """
    if not dataset:
        raise ValidationError("empty training dataset")
    n = len(dataset)
    if init is None:
        if model_config is None:
            raise ValidationError("fresh runs need a model_config")
        weights = init_model(model_config)
        opt_state = AdamWState()
        step = 0
        mask_rng = np.random.default_rng((config.seed, _MASK_SALT))
        epoch, offset = 0, 0
    else:
        if tokenizer_fingerprint and init.tokenizer_fingerprint and init.tokenizer_fingerprint != tokenizer_fingerprint:
            raise FingerprintMismatchError(init.tokenizer_fingerprint, tokenizer_fingerprint)
        model_config = init.model_config
        weights = init.weights
        opt_state = init.opt_state
        step = init.step
        mask_rng = np.random.default_rng()
        mask_rng.bit_generator.state = init.rng["mask_state"]
        epoch, offset = init.rng["data_epoch"], init.rng["data_offset"]

    sched = LrSchedule(config.peak_lr, config.warmup_steps, config.total_steps)
    ckpt_every = config.checkpoint_every or max(1, config.total_steps // 25)
    log = log if log is not None else MetricLog()
    last_saved = None

    def snapshot():
        return Checkpoint(
            model_config=model_config,
            train_config=asdict(config),
            weights=weights,
            opt_state=opt_state,
            step=step,
            stage=config.stage,
            rng={
                "mask_state": mask_rng.bit_generator.state,
                "data_epoch": epoch,
                "data_offset": offset,
            },
            tokenizer_fingerprint=tokenizer_fingerprint or (init.tokenizer_fingerprint if init else ""),
        )

    def run_validation():
        vloss, vacc = validate(weights, model_config, val_dataset, config.mlm_probability)
        log.record(step, config.stage, "val_loss", vloss)
        log.record(step, config.stage, "val_accuracy", vacc)

    if step == 0 and val_dataset:
        run_validation()

    while step < config.total_steps:
        idxs, epoch, offset = _draw_batch(config.seed, n, config.batch_size, epoch, offset)
        batch = [dataset[i][: config.max_seq_len] for i in idxs]
        ids, _ = pad_batch(batch)
        masked = apply_mlm_mask(ids, config.mlm_probability, mask_rng, model_config.vocab_size)
        step += 1
        lr = lr_at(step, sched)
        loss_val, applied = _training_step(masked, weights, model_config, config, opt_state, lr)
        if applied is None:
            raise TrainingDiverged(step, last_saved)
        log.record(step, config.stage, "train_loss", loss_val)
        log.record(step, config.stage, "lr", lr)
        if val_dataset and step % config.validate_every == 0:
            run_validation()
        if checkpoint_dir and step % ckpt_every == 0:
            path = os.path.join(checkpoint_dir, f"checkpoint_s{config.stage}_{step:07d}.ckpt")
            save_checkpoint(snapshot(), path)
            last_saved = path

    final = snapshot()
    if checkpoint_dir:
        path = os.path.join(checkpoint_dir, f"checkpoint_s{config.stage}_{step:07d}.ckpt")
        if path != last_saved:
            save_checkpoint(final, path)
    return final, log


def validate(weights, model_config, val_dataset, mlm_probability, batch_size=32):
    """MLM loss and accuracy under per-example fixed masking.

    Example i is always corrupted the same way, so every checkpoint of a
    run sees identical positions and the series is comparable.
    """
    if not val_dataset:
        raise ValidationError("empty validation set")
    total_loss, total_correct, total_count = 0.0, 0, 0
    d = model_config.hidden_dim
    for start in range(0, len(val_dataset), batch_size):
        chunk = val_dataset[start : start + batch_size]
        rows = []
        for j, ex in enumerate(chunk):
            ex_rng = np.random.default_rng((_VAL_SALT, start + j))
            ids = np.asarray(ex[: model_config.max_seq_len], dtype=np.int64)[None, :]
            rows.append(apply_mlm_mask(ids, mlm_probability, ex_rng, model_config.vocab_size))
        width = max(r.input_ids.shape[1] for r in rows)
        ids = np.zeros((len(rows), width), dtype=np.int64)
        labels = np.full((len(rows), width), IGNORE_LABEL, dtype=np.int64)
        pad = np.zeros((len(rows), width), dtype=bool)
        for j, r in enumerate(rows):
            w = r.input_ids.shape[1]
            ids[j, :w] = r.input_ids[0]
            labels[j, :w] = r.labels[0]
            pad[j, :w] = r.pad_mask[0]
        with ag.no_grad():
            hidden = encoder_forward(ids, pad, weights, model_config)
            flat_labels = labels.reshape(-1)
            sel = np.nonzero(flat_labels != IGNORE_LABEL)[0]
            if sel.size == 0:
                continue
            picked = ag.take_rows(ag.reshape(hidden, (-1, d)), sel)
            z = mlm_logits(picked, weights, model_config).data
        targets = flat_labels[sel]
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        total_loss += float((lse - z[np.arange(len(targets)), targets]).sum())
        total_correct += int((z.argmax(axis=1) == targets).sum())
        total_count += len(targets)
    if total_count == 0:
        raise ValidationError("validation produced no corrupted positions")
    return total_loss / total_count, total_correct / total_count


def extend_context(ckpt, stage2_config):
    """Start stage 2 from a stage-1 checkpoint: weights carried bit-exactly,
    fresh optimizer and schedule, longer sequences admitted."""
    if stage2_config.stage != 2:
        raise ValidationError("extend_context requires a stage-2 config")
    if stage2_config.max_seq_len <= ckpt.model_config.max_seq_len:
        raise ValidationError(
            f"stage-2 max_seq_len {stage2_config.max_seq_len} must exceed stage-1 "
            f"{ckpt.model_config.max_seq_len}"
        )
    new_mcfg = replace(ckpt.model_config, max_seq_len=stage2_config.max_seq_len)
    params = {n: ag.parameter(p.data.copy(), name=n) for n, p in ckpt.weights.named_parameters()}
    weights = EncoderWeights(params, tied=ckpt.weights.tied)
    opt_state = AdamWState()
    if stage2_config.carry_optimizer:
        opt_state = AdamWState(
            m={k: v.copy() for k, v in ckpt.opt_state.m.items()},
            v={k: v.copy() for k, v in ckpt.opt_state.v.items()},
            t=ckpt.opt_state.t,
        )
    return Checkpoint(
        model_config=new_mcfg,
        train_config=asdict(stage2_config),
        weights=weights,
        opt_state=opt_state,
        step=0,
        stage=2,
        rng={
            "mask_state": np.random.default_rng((stage2_config.seed, _MASK_SALT)).bit_generator.state,
            "data_epoch": 0,
            "data_offset": 0,
        },
        tokenizer_fingerprint=ckpt.tokenizer_fingerprint,
    )


# --- fine-tuning ------------------------------------------------------------


@dataclass
class FineTuneResult:
    best_score: float
    best_lr: float
    best_epochs: int
    metric_name: str
    head_weight: np.ndarray
    head_bias: np.ndarray
    grid_scores: list


def _encode_example(tokenizer, row, max_len):
    from .bpe import CLS_ID, SEP_ID

    if len(row) == 3:
        a, b, label = row
        ids = [CLS_ID] + tokenizer.encode(a) + [SEP_ID] + tokenizer.encode(b) + [SEP_ID]
    else:
        a, label = row
        ids = [CLS_ID] + tokenizer.encode(a) + [SEP_ID]
    return ids[:max_len], label


def _clone_weights(weights):
    params = {n: ag.parameter(p.data.copy(), name=n) for n, p in weights.named_parameters()}
    return EncoderWeights(params, tied=weights.tied)


def fine_tune_classifier(
    weights,
    model_config,
    tokenizer,
    train_rows,
    dev_rows,
    lrs=DEFAULT_FT_LRS,
    epoch_grid=DEFAULT_FT_EPOCHS,
    batch_size=8,
    seed=0,
):
    """Grid-search fine-tuning of a classification/regression head on the
    CLS representation; reports the best dev score across the whole grid.

    Integer labels mean classification (accuracy); float labels mean
    regression (Pearson correlation).
    """
    if not train_rows or not dev_rows:
        raise ValidationError("fine-tuning needs non-empty train and dev rows")
    if not lrs or not epoch_grid:
        raise ValidationError("empty fine-tuning grid")

    train_enc = [_encode_example(tokenizer, r, model_config.max_seq_len) for r in train_rows]
    dev_enc = [_encode_example(tokenizer, r, model_config.max_seq_len) for r in dev_rows]
    labels = [lab for _, lab in train_enc]
    regression = any(isinstance(l, float) and not float(l).is_integer() for l in labels + [l for _, l in dev_enc])
    if regression:
        n_out = 1
    else:
        classes = sorted({int(l) for l in labels})
        n_out = max(classes) + 1
        bad = {int(l) for _, l in dev_enc} - set(range(n_out))
        if bad:
            raise ValidationError(f"label cardinality mismatch: dev labels {sorted(bad)} never seen in training")

    d = model_config.hidden_dim
    metric_name = "pearson" if regression else "accuracy"
    best = None
    grid_scores = []

    def forward_pooled(w, head_w, head_b, encoded):
        ids, pad = pad_batch([ids for ids, _ in encoded])
        hidden = encoder_forward(ids, pad, w, model_config)
        cls = ag.tslice(hidden, (slice(None), 0))
        return ag.add(ag.matmul(cls, head_w), head_b)

    for lr in lrs:
        for n_epochs in epoch_grid:
            rng = np.random.default_rng((seed, int(lr * 1e9), n_epochs))
            w = _clone_weights(weights)
            head_w = ag.parameter((rng.standard_normal((d, n_out)) * 0.02).astype(np.float32), name="head_w")
            head_b = ag.parameter(np.zeros(n_out, dtype=np.float32), name="head_b")
            opt = AdamWState()
            params = dict(w.data_arrays(), head_w=head_w.data, head_b=head_b.data)
            for _ in range(n_epochs):
                order = rng.permutation(len(train_enc))
                for start in range(0, len(order), batch_size):
                    sel = [train_enc[i] for i in order[start : start + batch_size]]
                    out = forward_pooled(w, head_w, head_b, sel)
                    if regression:
                        y = np.asarray([lab for _, lab in sel], dtype=np.float32)
                        diff = ag.add(ag.reshape(out, (-1,)), -y)
                        loss = ag.tmean(ag.mul(diff, diff))
                    else:
                        y = np.asarray([int(lab) for _, lab in sel], dtype=np.int64)
                        loss = ag.cross_entropy(out, y)
                    loss.backward()
                    grads = w.grads()
                    grads["head_w"] = head_w.grad if head_w.grad is not None else np.zeros_like(head_w.data)
                    grads["head_b"] = head_b.grad if head_b.grad is not None else np.zeros_like(head_b.data)
                    clip_global_norm(grads, 1.0)
                    adamw_step(params, grads, opt, lr, weight_decay=0.0)
                    w.zero_grad()
                    head_w.zero_grad()
                    head_b.zero_grad()
            with ag.no_grad():
                out = forward_pooled(w, head_w, head_b, dev_enc).data
            if regression:
                preds = out[:, 0]
                y = np.asarray([lab for _, lab in dev_enc], dtype=np.float64)
                score = float(np.corrcoef(preds, y)[0, 1]) if np.std(preds) > 0 and np.std(y) > 0 else 0.0
            else:
                y = np.asarray([int(lab) for _, lab in dev_enc])
                score = float((out.argmax(axis=1) == y).mean())
            grid_scores.append({"lr": lr, "epochs": n_epochs, metric_name: score})
            if best is None or score > best["score"]:
                best = {
                    "score": score,
                    "lr": lr,
                    "epochs": n_epochs,
                    "head_w": head_w.data.copy(),
                    "head_b": head_b.data.copy(),
                }
    return FineTuneResult(
        best_score=best["score"],
        best_lr=best["lr"],
        best_epochs=best["epochs"],
        metric_name=metric_name,
        head_weight=best["head_w"],
        head_bias=best["head_b"],
        grid_scores=grid_scores,
    )
