"""Stage 1: teacher-forced cross-entropy over the full n-step action text."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor_ad as ad
from .policy import PolicyConfig, copy_params, greedy_actions, init_params, target_ids, teacher_forced


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SftConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 3
    warmup: float = 0.10
    cosine: bool = True
    weight_decay: float = 0.0
    seed: int = 0
    val_limit: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError(f"warmup fraction must be in [0, 1), got {self.warmup}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def lr_at(step: int, total: int, lr_max: float, warmup: float, cosine: bool = True) -> float:
    """Learning rate for 1-based ``step``: linear warmup to ``lr_max``, then cosine to 0."""
    w = int(round(warmup * total))
    if w and step <= w:
        return lr_max * step / w
    if not cosine:
        return lr_max
    frac = (step - w) / max(1, total - w)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))


def sft_losses(params, records) -> ad.Tensor:
    """Per-record summed cross-entropy, shape [B]."""
    targets = [target_ids(r.gt) for r in records]
    tf = teacher_forced(params, records, targets)
    per_token = ad.softmax_cross_entropy(tf.logits, tf.targets)
    sel = np.zeros((len(records), len(tf.seq_of)))
    sel[tf.seq_of, np.arange(len(tf.seq_of))] = 1.0
    return ad.reshape(ad.matmul(ad.Tensor(sel), ad.reshape(per_token, (-1, 1))), (len(records),))


def sft_loss(params, record) -> ad.Tensor:
    return ad.sum(sft_losses(params, [record]))


def eval_loss(params, records, batch_size: int = 128) -> float:
    total = 0.0
    for i in range(0, len(records), batch_size):
        total += float(sft_losses(params, records[i:i + batch_size]).data.sum())
    return total / max(1, len(records))


def first_action_accuracy(params, records, batch_size: int = 256) -> float:
    hits = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        preds = greedy_actions(params, chunk, 1)
        hits += sum(p[0] == r.gt_actions[0] for p, r in zip(preds, chunk))
    return hits / max(1, len(records))


def _first_bad(params, batch) -> str:
    for rec in batch:
        try:
            if np.isfinite(sft_loss(params, rec).item()):
                continue
        except ad.NumericError:
            pass
        return rec.record_id
    return batch[0].record_id


@dataclass
class SftResult:
    params: dict
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train_sft(train, cfg: SftConfig, params=None, val=None, policy: PolicyConfig = PolicyConfig(),
              log: Callable[[dict], None] | None = None) -> SftResult:
    """Adam with warmup + cosine; keeps the epoch with the lowest val-seen loss."""
    if not train:
        raise TrainingError("empty training set")
    rng = np.random.default_rng([cfg.seed, 11])
    params = params if params is not None else init_params(policy, cfg.seed)
    val = list(val or [])[:cfg.val_limit]
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    state = ad.AdamState()
    curve: list[dict] = []
    best, best_val, best_epoch = copy_params(params), math.inf, 0
    step = 0

    def emit(row):
        curve.append(row)
        if log:
            log(row)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for b in range(per_epoch):
            batch = [train[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            step += 1
            for p in params.values():
                p.zero_grad()
            with ad.Tape() as tape:
                try:
                    losses = sft_losses(params, batch)
                except ad.NumericError:
                    losses = None
                if losses is None or not np.all(np.isfinite(losses.data)):
                    raise TrainingError(f"non-finite loss at step {step}, record {_first_bad(params, batch)}")
                loss = ad.mul(ad.sum(losses), 1.0 / len(batch))
                ad.backward(loss, tape)
            lr = lr_at(step, total, cfg.lr, cfg.warmup, cfg.cosine)
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, lr, cfg.weight_decay, state)
            epoch_loss += float(losses.data.sum())
            emit({"step": step, "split": "train-batch", "loss": loss.item(), "lr": lr})
        row = {"step": step, "split": "train", "epoch": epoch, "loss": epoch_loss / len(train)}
        emit(row)
        if val:
            vl = eval_loss(params, val)
            emit({"step": step, "split": "val-seen", "epoch": epoch, "loss": vl})
        else:
            vl = row["loss"]
        if vl < best_val:
            best, best_val, best_epoch = copy_params(params), vl, epoch
    return SftResult(best, curve, best_epoch)
