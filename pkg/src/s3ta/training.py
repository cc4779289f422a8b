"""Adversarial training: inner perturbation search, outer momentum-SGD.

Every parameter update is computed from adversarial images only; there is
no clean-image loss term. Weight decay is applied as a decoupled shrink so
that with a zero data gradient parameters contract by exactly
(1 - lr * weight_decay) per step, independent of the momentum buffer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .checkpoint import (
    CheckpointFormatError,
    model_config_to_items,
    model_config_from_items,
    read_archive,
    write_archive,
)
from .data import iterate_batches
from .model import S3TA, ImageBatch, make_model, smoothed_cross_entropy

METRICS_HEADER = ("epoch", "lr", "adv_loss", "clean_top1", "robust_top1")

_ATTACK_SEED_TAG = 0xAD5EED
_EPOCH_ORDER_TAG = 0x0DE2
_QUICK_EVAL_TAG = 0xE7A1


class TrainingDivergence(RuntimeError):
    """The training loss stopped being finite."""


def _desk_inner_attack() -> AttackConfig:
    return AttackConfig(
        epsilon=8 / 255,
        step_size=2 / 255,
        num_steps=7,
        mode="targeted-random",
        random_init_prob=0.8,
    )


@dataclass(frozen=True)
class TrainConfig:
    """Outer-loop hyperparameters.

    The effective learning rate is lr_scale * batch_size / 256, ramped
    linearly over the first warmup_epochs and cut by decay_factor at each
    decay epoch. staged_readout maps epoch thresholds to the unroll step
    logits are decoded from; entries are (first_epoch, readout_step).
    """

    epochs: int = 30
    batch_size: int = 128
    lr_scale: float = 0.05
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (35, 70, 95)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    grad_clip_norm: float = 1.0  # 0 disables; the recurrent controller needs it
    inner_attack: AttackConfig = field(default_factory=_desk_inner_attack)
    staged_readout: tuple[tuple[int, int], ...] = ((0, 2),)
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs/batch_size/warmup_epochs out of range")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_clip_norm < 0:
            raise ValueError("grad_clip_norm must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not self.staged_readout:
            raise ValueError("staged_readout must be non-empty")
        if self.staged_readout[0][0] != 0:
            raise ValueError("staged_readout must start at epoch 0")
        thresholds = [t for t, _ in self.staged_readout]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("staged_readout thresholds must be strictly increasing")
        if any(step < 1 for _, step in self.staged_readout):
            raise ValueError("readout steps must be >= 1")

    @property
    def base_lr(self) -> float:
        return self.lr_scale * self.batch_size / 256

    @staticmethod
    def desk(
        readout_step: int = 2, epochs: int = 30, batch_size: int = 128, rng_seed: int = 0
    ) -> "TrainConfig":
        """CPU-sized run: 7-step inner attack at radius 8/255 on 32x32 data."""
        return TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            staged_readout=((0, readout_step),),
            rng_seed=rng_seed,
        )

    @staticmethod
    def reference_scale() -> "TrainConfig":
        """Published training recipe for the 16-step model (config only):
        120 epochs at batch 1024, 30-step inner attack at radius 16/255,
        readout deepening 4 -> 8 -> 16 at epochs 35 and 70."""
        return TrainConfig(
            epochs=120,
            batch_size=1024,
            inner_attack=AttackConfig(
                epsilon=16 / 255,
                step_size=1 / 255,
                num_steps=30,
                mode="targeted-random",
                random_init_prob=0.8,
            ),
            staged_readout=((0, 4), (35, 8), (70, 16)),
        )


def nominal_variant(cfg: TrainConfig) -> TrainConfig:
    """Identical recipe with the inner attack disabled (trains on clean
    images; the zero-step, zero-init attack is the identity)."""
    return replace(
        cfg, inner_attack=replace(cfg.inner_attack, num_steps=0, random_init_prob=0.0)
    )


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then staircase decay at cfg.decay_epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.base_lr * cfg.decay_factor**drops


def staged_readout_at(epoch: int, cfg: TrainConfig) -> int:
    """Readout step of the last schedule entry whose threshold is <= epoch."""
    step = cfg.staged_readout[0][1]
    for threshold, stage_step in cfg.staged_readout:
        if epoch >= threshold:
            step = stage_step
    return step


@dataclass
class TrainState:
    """Mutable training snapshot: one logical writer at a time.

    Momentum buffers materialize lazily on the first update, so a freshly
    initialized state checkpoints exactly one array per named parameter.
    """

    model: S3TA
    config: TrainConfig
    epoch: int = 0
    global_step: int = 0
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def _derive_attack_seed(seed: int, global_step: int) -> int:
    ss = np.random.SeedSequence([seed, _ATTACK_SEED_TAG, global_step])
    return int(ss.generate_state(1)[0])


def adversarial_train_step(
    state: TrainState,
    batch: ImageBatch,
    *,
    epoch_progress: float | None = None,
    image_indices=None,
    attack_seed: int | None = None,
) -> dict:
    """One saddle-point update; returns step metrics.

    The inner attack perturbs the batch against the current parameters at
    the staged readout step; the outer update descends the smoothed
    cross-entropy of those adversarial images alone. The attack seed is
    derived from (rng_seed, global_step) unless overridden, so target draws
    differ across steps but replay exactly.
    """
    cfg = state.config
    model = state.model
    epoch_f = float(state.epoch) if epoch_progress is None else float(epoch_progress)
    lr = lr_at(epoch_f, cfg)
    readout = staged_readout_at(int(epoch_f), cfg)
    if readout > model.config.unroll_steps:
        raise ValueError(
            f"staged readout {readout} exceeds model unroll {model.config.unroll_steps}"
        )

    inner = cfg.inner_attack
    if inner.num_steps == 0 and inner.random_init_prob == 0.0:
        adv_pixels = batch.pixels  # the no-op attack is the identity
        attack_success = 0.0
    else:
        if attack_seed is None:
            attack_seed = _derive_attack_seed(cfg.rng_seed, state.global_step)
        attack_cfg = replace(inner, rng_seed=attack_seed)
        result = run_attack(
            lambda px: model(px, readout_step=readout),
            batch,
            attack_cfg,
            num_classes=model.config.num_classes,
            image_indices=image_indices,
        )
        adv_pixels = result.adversarial.detach()
        attack_success = float(result.success.float().mean())

    logits = model(adv_pixels, readout_step=readout)
    loss = smoothed_cross_entropy(logits, batch.labels, cfg.label_smoothing)
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite training loss at step {state.global_step}")
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named])
    if cfg.grad_clip_norm:
        total = torch.sqrt(sum(g.pow(2).sum() for g in grads))
        if total > cfg.grad_clip_norm:
            grads = [g * (cfg.grad_clip_norm / total) for g in grads]
    with torch.no_grad():
        for (name, param), grad in zip(named, grads):
            if cfg.weight_decay:
                param.mul_(1.0 - lr * cfg.weight_decay)
            if cfg.momentum:
                buf = state.momentum.get(name)
                if buf is None:
                    buf = torch.zeros_like(param)
                    state.momentum[name] = buf
                buf.mul_(cfg.momentum).add_(grad)
                update = buf
            else:
                update = grad
            param.add_(update, alpha=-lr)
    state.global_step += 1
    return {
        "adv_loss": float(loss.detach()),
        "lr": lr,
        "readout_step": readout,
        "attack_success": attack_success,
    }


def clean_top1(model: S3TA, batch: ImageBatch, *, chunk: int = 256) -> float:
    """Nominal accuracy over a batch, evaluated in chunks."""
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), chunk):
            px = batch.pixels[start : start + chunk]
            labels = batch.labels[start : start + chunk]
            correct += int((model(px).argmax(dim=-1) == labels).sum())
    return correct / len(batch)


def _quick_robust_top1(
    model: S3TA, batch: ImageBatch, inner: AttackConfig, seed: int
) -> float:
    """Cheap per-epoch robustness probe: 5-step untargeted attack."""
    cfg = AttackConfig(
        epsilon=inner.epsilon,
        step_size=inner.epsilon / 4,
        num_steps=5,
        mode="untargeted",
        random_init_prob=1.0,
        rng_seed=seed,
    )
    result = run_attack(model, batch, cfg, num_classes=model.config.num_classes)
    return float((result.final_prediction == batch.labels).float().mean())


def train(
    model: S3TA,
    train_batch: ImageBatch,
    cfg: TrainConfig,
    *,
    eval_batch: ImageBatch | None = None,
    out_dir: str | Path | None = None,
    quick_eval_images: int = 128,
    progress: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run the full training loop.

    Per epoch: seeded reshuffle, one adversarial_train_step per mini-batch
    with fractional-epoch lr, then metrics (clean and quick-attack robust
    top-1 on eval_batch when given). With out_dir set, writes metrics.csv
    and a checkpoint after every epoch, plus the initial epoch_000 one.
    """
    max_readout = max(step for _, step in cfg.staged_readout)
    if max_readout > model.config.unroll_steps:
        raise ValueError(
            f"staged readout {max_readout} exceeds model unroll "
            f"{model.config.unroll_steps}"
        )
    state = TrainState(model=model, config=cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        save_checkpoint(state, out / "epoch_000.ckpt")

    num_batches = max(1, math.ceil(len(train_batch) / cfg.batch_size))
    for epoch in range(cfg.epochs):
        order_seed = int(
            np.random.SeedSequence([cfg.rng_seed, _EPOCH_ORDER_TAG, epoch]).generate_state(1)[0]
        )
        loss_sum, loss_count = 0.0, 0
        last_lr = lr_at(float(epoch), cfg)
        for b, (mini, indices) in enumerate(
            iterate_batches(train_batch, cfg.batch_size, seed=order_seed)
        ):
            metrics = adversarial_train_step(
                state,
                mini,
                epoch_progress=epoch + b / num_batches,
                image_indices=indices,
            )
            loss_sum += metrics["adv_loss"] * len(mini)
            loss_count += len(mini)
            last_lr = metrics["lr"]
        state.epoch = epoch + 1

        row = {
            "epoch": state.epoch,
            "lr": last_lr,
            "adv_loss": loss_sum / max(1, loss_count),
            "clean_top1": float("nan"),
            "robust_top1": float("nan"),
        }
        if eval_batch is not None:
            row["clean_top1"] = clean_top1(model, eval_batch)
            probe = ImageBatch(
                pixels=eval_batch.pixels[:quick_eval_images],
                labels=eval_batch.labels[:quick_eval_images],
            )
            quick_seed = int(
                np.random.SeedSequence(
                    [cfg.rng_seed, _QUICK_EVAL_TAG, epoch]
                ).generate_state(1)[0]
            )
            row["robust_top1"] = _quick_robust_top1(
                model, probe, cfg.inner_attack, quick_seed
            )
        state.history.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [
                        row["epoch"],
                        f"{row['lr']:.6g}",
                        f"{row['adv_loss']:.6f}",
                        f"{row['clean_top1']:.4f}",
                        f"{row['robust_top1']:.4f}",
                    ]
                )
            save_checkpoint(state, out / f"epoch_{state.epoch:03d}.ckpt")
    return state


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write parameters (and any momentum buffers) with the model config."""
    items = model_config_to_items(state.model.config)
    items["train.epoch"] = str(state.epoch)
    items["train.global_step"] = str(state.global_step)
    arrays = {
        f"param/{name}": p.detach().cpu().numpy()
        for name, p in state.model.named_parameters()
    }
    for name, buf in state.momentum.items():
        arrays[f"momentum/{name}"] = buf.detach().cpu().numpy()
    write_archive(path, items, arrays)


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState; parameters are restored bitwise.

    The archive stores the model config but not the training recipe; pass
    `config` to resume training, otherwise the default TrainConfig is
    attached for evaluation-only use.
    """
    items, arrays = read_archive(path)
    model_cfg = model_config_from_items(items)
    model = make_model(model_cfg, seed=0)
    param_names = {name for name, _ in model.named_parameters()}
    stored = {k[len("param/") :] for k in arrays if k.startswith("param/")}
    if stored != param_names:
        missing = sorted(param_names - stored)[:3]
        extra = sorted(stored - param_names)[:3]
        raise CheckpointFormatError(
            f"parameter set mismatch (missing {missing}, unexpected {extra})"
        )
    with torch.no_grad():
        for name, param in model.named_parameters():
            value = torch.from_numpy(arrays[f"param/{name}"])
            if value.shape != param.shape:
                raise CheckpointFormatError(
                    f"shape mismatch for {name}: {tuple(value.shape)} vs "
                    f"{tuple(param.shape)}"
                )
            param.copy_(value)
    momentum = {
        k[len("momentum/") :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("momentum/")
    }
    return TrainState(
        model=model,
        config=config if config is not None else TrainConfig(),
        epoch=int(items.get("train.epoch", "0")),
        global_step=int(items.get("train.global_step", "0")),
        momentum=momentum,
    )
