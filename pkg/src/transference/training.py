"""Training loop: token-bucketed batching, label-smoothed loss, Adam with
the inverse-square-root warmup schedule, per-epoch checkpointing, best-k
checkpoint averaging, and the generic -> fine-tune regime."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import (CheckpointError, ConfigError, ContractError,
                     TrainingError)
from .model import (Checkpoint, ModelConfig, PAD_ID, BOS_ID, EOS_ID,
                    SourceBatch, decode_forward, encode, make_source_batch)
from .tensor import GradTape, Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_tokens: int = 25000
    max_len: int = 256
    warmup_steps: int = 8000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_epsilon: float = 1e-9
    label_smoothing: float = 0.1
    checkpoint_keep: int = 8
    grad_clip: float | None = 5.0
    seed: int = 1

    def __post_init__(self):
        for name in ("batch_tokens", "max_len", "warmup_steps",
                     "checkpoint_keep"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing {self.label_smoothing} outside [0, 1)")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} outside [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be positive")


def lr_schedule(step: int, d_model: int = 512, warmup: int = 8000) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    The linear branch is computed as (step/warmup) * warmup^-0.5 so the
    two branches are bit-identical at step == warmup.
    """
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    rsqrt = step ** -0.5
    linear = (step / warmup) * warmup ** -0.5
    return d_model ** -0.5 * min(rsqrt, linear)


def label_smoothed_loss(logits: Tensor, target_ids: np.ndarray,
                        eps_ls: float = 0.1, pad_id: int = PAD_ID) -> Tensor:
    """Mean cross-entropy against the smoothed target distribution:
    1 - eps on the gold token, eps/(V-1) on every other vocabulary entry.
    Padding positions are excluded from the mean."""
    target_ids = np.asarray(target_ids)
    vocab = logits.shape[-1]
    not_pad = target_ids != pad_id
    n_tokens = int(not_pad.sum())
    if n_tokens == 0:
        raise ContractError("loss over an all-padding batch")
    logp = T.log_softmax(logits, axis=-1)
    gold = T.reshape(T.gather_last(logp, target_ids[..., None]),
                     target_ids.shape)
    total = T.reduce_sum(logp, axis=-1)
    smooth = eps_ls / (vocab - 1)
    per_pos = T.add(T.scale(gold, -(1.0 - eps_ls - smooth)),
                    T.scale(total, -smooth))
    masked = T.mul(per_pos, T.constant(not_pad.astype(logits.data.dtype)))
    return T.scale(T.reduce_sum(masked), 1.0 / n_tokens)


@dataclass
class OptimizerState:
    """Adam first/second moment accumulators plus the global step."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor],
                   step: int = 0) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   step=step)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98,
              epsilon: float = 1e-9) -> tuple[dict[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update, in place over the parameter dict."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.isnan(g).any():
            raise TrainingError(f"NaN gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(p.data.dtype)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


@dataclass(frozen=True)
class PreparedPair:
    """One training example: word ids, subword ids, target subword ids."""

    word_ids: tuple[int, ...]
    sub_ids: tuple[int, ...]
    tgt_ids: tuple[int, ...]


@dataclass
class Batch:
    source: SourceBatch
    tgt_in: np.ndarray    # decoder input, BOS + target
    tgt_out: np.ndarray   # labels, target + EOS
    pairs: tuple[PreparedPair, ...] = field(repr=False, default=())


def _build_batch(pairs: list[PreparedPair]) -> Batch:
    source = make_source_batch([list(p.word_ids) for p in pairs],
                               [list(p.sub_ids) for p in pairs])
    width = max(len(p.tgt_ids) for p in pairs) + 1
    tgt_in = np.full((len(pairs), width), PAD_ID, dtype=np.int64)
    tgt_out = np.full((len(pairs), width), PAD_ID, dtype=np.int64)
    for i, p in enumerate(pairs):
        row = list(p.tgt_ids)
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1:len(row) + 1] = row
        tgt_out[i, :len(row)] = row
        tgt_out[i, len(row)] = EOS_ID
    return Batch(source, tgt_in, tgt_out, tuple(pairs))


def make_batches(pairs: list[PreparedPair], batch_tokens: int = 25000,
                 max_len: int = 256, seed: int = 1,
                 epoch: int = 0) -> list[Batch]:
    """Shuffle deterministically per (seed, epoch), bucket by length, and
    fill batches greedily so that the larger of the padded source and
    target token counts stays within ``batch_tokens``.  Pairs with either
    side longer than ``max_len`` subwords are dropped; every surviving
    pair appears in exactly one batch."""
    survivors = [p for p in pairs
                 if len(p.sub_ids) <= max_len and len(p.tgt_ids) <= max_len]
    if not survivors:
        return []
    for p in survivors:
        if max(len(p.sub_ids), len(p.tgt_ids) + 1) > batch_tokens:
            raise ConfigError(
                f"a single pair of length {max(len(p.sub_ids), len(p.tgt_ids) + 1)} "
                f"cannot fit the {batch_tokens}-token budget")

    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(survivors))
    shuffled = [survivors[i] for i in order]
    shuffled.sort(key=lambda p: max(len(p.sub_ids), len(p.tgt_ids) + 1))

    batches: list[list[PreparedPair]] = []
    current: list[PreparedPair] = []
    max_src = max_tgt = 0
    for p in shuffled:
        new_src = max(max_src, len(p.sub_ids))
        new_tgt = max(max_tgt, len(p.tgt_ids) + 1)
        count = len(current) + 1
        if current and max(new_src, new_tgt) * count > batch_tokens:
            batches.append(current)
            current = [p]
            max_src, max_tgt = len(p.sub_ids), len(p.tgt_ids) + 1
        else:
            current.append(p)
            max_src, max_tgt = new_src, new_tgt
    if current:
        batches.append(current)

    batch_order = rng.permutation(len(batches))
    return [_build_batch(batches[i]) for i in batch_order]


def average_checkpoints(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean per named tensor (float64 accumulation,
    stored back as float32); config and step come from the newest input."""
    if not checkpoints:
        raise CheckpointError("no checkpoints to average")
    reference = checkpoints[0]
    names = list(reference.params.keys())
    for ckpt in checkpoints[1:]:
        if set(ckpt.params.keys()) != set(names):
            extra = set(ckpt.params.keys()) ^ set(names)
            raise CheckpointError(
                f"checkpoint parameter names differ: {sorted(extra)[0]}")
        for name in names:
            if ckpt.params[name].shape != reference.params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for tensor '{name}': "
                    f"{ckpt.params[name].shape} vs {reference.params[name].shape}")
    averaged: dict[str, Tensor] = {}
    for name in names:
        acc = np.zeros(reference.params[name].shape, dtype=np.float64)
        for ckpt in checkpoints:
            acc += ckpt.params[name].data
        averaged[name] = Tensor((acc / len(checkpoints)).astype(np.float32),
                                requires_grad=True)
    newest = max(checkpoints, key=lambda c: c.step)
    return Checkpoint(averaged, replace(newest.config), newest.step)


def forward_loss(config: ModelConfig, params: dict[str, Tensor],
                 batch: Batch, eps_ls: float, training: bool,
                 rng=None) -> Tensor:
    encoded = encode(config, params, batch.source, training, rng)
    logits = decode_forward(config, params, encoded, batch.tgt_in,
                            training, rng)
    return label_smoothed_loss(logits, batch.tgt_out, eps_ls)


def validation_loss(config: ModelConfig, params: dict[str, Tensor],
                    batches: list[Batch], eps_ls: float) -> float:
    total = 0.0
    tokens = 0
    for batch in batches:
        n = int((batch.tgt_out != PAD_ID).sum())
        loss = forward_loss(config, params, batch, eps_ls, training=False)
        total += loss.item() * n
        tokens += n
    return total / max(tokens, 1)


@dataclass
class LogRow:
    step: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float | None


def write_loss_log(path: str, rows: list[LogRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "phase", "lr", "train_loss", "val_loss"])
        for row in rows:
            writer.writerow([row.step, row.phase, f"{row.lr:.10g}",
                             f"{row.train_loss:.6f}",
                             "" if row.val_loss is None else f"{row.val_loss:.6f}"])


@dataclass
class TrainResult:
    averaged: Checkpoint
    log: list[LogRow]
    epoch_records: list[tuple[str, float]]  # (checkpoint path, val loss)
    aborted: bool = False


def train(generic_pairs: list[PreparedPair],
          finetune_pairs: list[PreparedPair],
          val_pairs: list[PreparedPair],
          checkpoint: Checkpoint,
          generic_config: TrainConfig,
          finetune_config: TrainConfig,
          ckpt_dir: str,
          log_path: str | None = None,
          verbose: bool = False) -> TrainResult:
    """Phase 1 trains on the full sorted general data, phase 2 fine-tunes
    on the selection with the step counter (and Adam moments) carried
    over.  One checkpoint is written per epoch; the best ``checkpoint_keep``
    by validation loss are averaged into ``ckpt_dir/averaged.tfrx``.

    On divergence (non-finite loss) training stops and the checkpoints
    written so far are still averaged.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    config = checkpoint.config
    params = checkpoint.params
    state = OptimizerState.for_params(params, step=checkpoint.step)
    drop_rng = np.random.default_rng(generic_config.seed)
    val_batches = make_batches(val_pairs, generic_config.batch_tokens,
                               generic_config.max_len,
                               seed=generic_config.seed, epoch=0) if val_pairs else []

    log: list[LogRow] = []
    epoch_records: list[tuple[str, float]] = []
    epoch_index = 0
    aborted = False

    phases = (("generic", generic_config, generic_pairs),
              ("finetune", finetune_config, finetune_pairs))
    for phase, cfg, data in phases:
        if aborted:
            break
        for _ in range(cfg.epochs):
            if aborted:
                break
            batches = make_batches(data, cfg.batch_tokens, cfg.max_len,
                                   seed=cfg.seed, epoch=epoch_index)
            if not batches:
                raise TrainingError(f"no trainable pairs in phase '{phase}'")
            for batch in batches:
                step = state.step + 1
                lr = lr_schedule(step, config.d_model, cfg.warmup_steps)
                with GradTape() as tape:
                    loss = forward_loss(config, params, batch,
                                        cfg.label_smoothing, training=True,
                                        rng=drop_rng)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    aborted = True
                    break
                backward(tape, loss)
                grads = {name: (p.grad if p.grad is not None
                                else np.zeros_like(p.data))
                         for name, p in params.items()}
                for p in params.values():
                    p.grad = None
                if cfg.grad_clip is not None:
                    clip_gradients(grads, cfg.grad_clip)
                adam_step(params, grads, state, lr,
                          cfg.beta1, cfg.beta2, cfg.adam_epsilon)
                log.append(LogRow(state.step, phase, lr, loss_value, None))
            if aborted:
                break
            val = (validation_loss(config, params, val_batches,
                                   cfg.label_smoothing)
                   if val_batches else float(log[-1].train_loss))
            epoch_index += 1
            path = os.path.join(ckpt_dir, f"epoch_{epoch_index}.tfrx")
            Checkpoint(params, config, state.step).save(path)
            epoch_records.append((path, val))
            last = log[-1]
            log.append(LogRow(state.step, phase, last.lr, last.train_loss, val))
            if verbose:
                print(f"[{phase}] epoch {epoch_index}: step {state.step} "
                      f"train {last.train_loss:.4f} val {val:.4f}")

    if not epoch_records:
        raise TrainingError(
            "no checkpoints produced (zero epochs configured, or divergence "
            "before the first epoch finished)")

    keep_cfg = finetune_config if finetune_config.epochs > 0 else generic_config
    keep = sorted(epoch_records, key=lambda r: (r[1], r[0]))[:keep_cfg.checkpoint_keep]
    averaged = average_checkpoints([Checkpoint.load(path) for path, _ in keep])
    averaged.save(os.path.join(ckpt_dir, "averaged.tfrx"))
    if log_path:
        write_loss_log(log_path, log)
    return TrainResult(averaged, log, epoch_records, aborted)
