"""Layered flat key-value configuration.

Precedence, lowest to highest: built-in desk defaults, config file,
environment variables, command-line overrides. Keys are dotted section
paths ("train.epochs"); files hold one "key=value" per line with '#'
comments. Environment variables use the S3TA_ prefix with '__' standing in
for the dot: S3TA_TRAIN__EPOCHS=10 sets train.epochs.
"""

from __future__ import annotations

import os
from typing import Iterable, Mapping

from .attacks import AttackConfig
from .checkpoint import model_config_from_items, model_config_to_items
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "S3TA_"


class ConfigError(ValueError):
    """Invalid configuration key, value, or file syntax."""


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    env = os.environ if environ is None else environ
    values: dict[str, str] = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
            values[key] = value
    return values


def parse_assignments(pairs: Iterable[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        values[key] = value
    return values


def resolve_layers(*layers: Mapping[str, str] | None) -> dict[str, str]:
    resolved: dict[str, str] = {}
    for layer in layers:
        if layer:
            resolved.update(layer)
    return resolved


# ---------------------------------------------------------------------------
# typed builders
# ---------------------------------------------------------------------------


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def _take(kv: Mapping[str, str], key: str, kind, default):
    if key not in kv:
        return default
    return _convert(key, kv[key], kind)


def _parse_pairs(key: str, text: str) -> tuple[tuple[int, float], ...]:
    pairs = []
    for part in text.split(","):
        left, sep, right = part.partition(":")
        if not sep:
            raise ConfigError(f"bad entry {part!r} in {key} (want threshold:value)")
        pairs.append((_convert(key, left, int), _convert(key, right, float)))
    return tuple(pairs)


def build_attack_config(kv: Mapping[str, str], section: str = "attack") -> AttackConfig:
    p = section + "."
    base = AttackConfig()
    target = _take(kv, p + "target_class", int, None)
    schedule_text = kv.get(p + "lr_schedule", "")
    schedule = _parse_pairs(p + "lr_schedule", schedule_text) if schedule_text else ()
    try:
        return AttackConfig(
            epsilon=_take(kv, p + "epsilon", float, base.epsilon),
            step_size=_take(kv, p + "step_size", float, base.step_size),
            num_steps=_take(kv, p + "num_steps", int, base.num_steps),
            mode=kv.get(p + "mode", base.mode),
            target_class=target,
            random_init_prob=_take(
                kv, p + "random_init_prob", float, base.random_init_prob
            ),
            optimizer=kv.get(p + "optimizer", base.optimizer),
            lr_schedule=schedule,
            restarts=_take(kv, p + "restarts", int, base.restarts),
            rng_seed=_take(kv, p + "rng_seed", int, base.rng_seed),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [{section}] config: {exc}") from exc


def build_train_config(kv: Mapping[str, str]) -> TrainConfig:
    base = TrainConfig()
    decay_text = kv.get("train.decay_epochs")
    decay = (
        tuple(_convert("train.decay_epochs", p, int) for p in decay_text.split(","))
        if decay_text
        else base.decay_epochs
    )
    staged_text = kv.get("train.staged_readout")
    if staged_text:
        staged = tuple(
            (int(t), int(s))
            for t, s in (
                pair.split(":") for pair in staged_text.split(",") if pair.strip()
            )
        )
    else:
        staged = base.staged_readout
    try:
        return TrainConfig(
            epochs=_take(kv, "train.epochs", int, base.epochs),
            batch_size=_take(kv, "train.batch_size", int, base.batch_size),
            lr_scale=_take(kv, "train.lr_scale", float, base.lr_scale),
            warmup_epochs=_take(kv, "train.warmup_epochs", int, base.warmup_epochs),
            decay_epochs=decay,
            decay_factor=_take(kv, "train.decay_factor", float, base.decay_factor),
            momentum=_take(kv, "train.momentum", float, base.momentum),
            weight_decay=_take(kv, "train.weight_decay", float, base.weight_decay),
            label_smoothing=_take(
                kv, "train.label_smoothing", float, base.label_smoothing
            ),
            inner_attack=build_attack_config(
                {**_inner_defaults(), **kv}, section="inner_attack"
            ),
            staged_readout=staged,
            rng_seed=_take(kv, "train.rng_seed", int, base.rng_seed),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [train] config: {exc}") from exc


def _inner_defaults() -> dict[str, str]:
    inner = TrainConfig().inner_attack
    return {
        "inner_attack.epsilon": str(inner.epsilon),
        "inner_attack.step_size": str(inner.step_size),
        "inner_attack.num_steps": str(inner.num_steps),
        "inner_attack.mode": inner.mode,
        "inner_attack.random_init_prob": str(inner.random_init_prob),
    }


def build_model_config(kv: Mapping[str, str]) -> ModelConfig:
    """Model keys mirror the checkpoint text block (model.*, backbone.*)."""
    defaults = model_config_to_items(ModelConfig.desk())
    merged = dict(defaults)
    for key, value in kv.items():
        if key in defaults:
            merged[key] = value
    try:
        return model_config_from_items(merged)
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
