"""Experiment driver: train / attack / eval / landscape / attmaps.

Configuration resolves in layers (defaults < config file < S3TA_* env vars
< --set pairs < dedicated flags) and every run writes a manifest.json with
the fully resolved configuration, the seed, and the checkpoint hash, which
is enough to replay the run exactly.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attacks import run_attack
from .checkpoint import CheckpointFormatError
from .config import (
    ConfigError,
    build_attack_config,
    build_model_config,
    build_train_config,
    env_overrides,
    parse_assignments,
    parse_config_file,
    resolve_layers,
)
from .data import (
    DataFormatError,
    DatasetSpec,
    ImageBatch,
    ResultRow,
    load_dataset,
    write_results,
    write_synthetic_dataset,
)
from .evaluation import (
    NumericalFailure,
    evaluate,
    export_attention,
    landscape_to_csv,
    loss_landscape,
    render_landscape,
)
from .experiments import set_thread_count
from .model import make_model
from .training import TrainingDivergence, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

RECORDS_HEADER = "image_id,true_label,clean_prediction,target,adversarial_prediction,success"

ADAM_DEFAULT_SCHEDULE = "100:0.1,200:0.01,250:0.001"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s3ta",
        description="Sequential top-down attention models under L-infinity attack",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_ckpt: bool) -> None:
        p.add_argument("--config", help="key=value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--data", default="data", help="dataset directory")
        p.add_argument(
            "--synthetic",
            action="store_true",
            help="generate the synthetic dataset into --data if missing",
        )
        p.add_argument("--threads", type=int, default=None, help="torch thread cap")
        p.add_argument("--seed", type=int, default=None, help="run seed")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")

    p_train = sub.add_parser("train", help="adversarially train a model")
    common(p_train, needs_ckpt=False)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--unroll", type=int, default=None, help="model unroll steps")

    p_attack = sub.add_parser("attack", help="attack a checkpointed model")
    common(p_attack, needs_ckpt=True)
    p_attack.add_argument("--steps", type=int, default=None, help="attack steps")
    p_attack.add_argument("--epsilon", type=float, default=None)
    p_attack.add_argument("--mode", default=None, help="attack mode")
    p_attack.add_argument("--restarts", type=int, default=None)
    p_attack.add_argument("--adam", action="store_true", help="use the Adam attack")
    p_attack.add_argument("--images", type=int, default=128, help="images to attack")

    p_eval = sub.add_parser("eval", help="sweep attack strengths into a results CSV")
    common(p_eval, needs_ckpt=True)
    p_eval.add_argument(
        "--steps", default="0,10", help="comma-separated attack step counts"
    )
    p_eval.add_argument("--epsilon", type=float, default=None)
    p_eval.add_argument("--mode", default=None)
    p_eval.add_argument("--restarts", type=int, default=None)
    p_eval.add_argument("--images", type=int, default=None, help="limit test images")

    p_land = sub.add_parser("landscape", help="loss surface around one image")
    common(p_land, needs_ckpt=True)
    p_land.add_argument("--image-index", type=int, default=0)
    p_land.add_argument("--grid-n", type=int, default=21)
    p_land.add_argument("--epsilon", type=float, default=None)

    p_maps = sub.add_parser("attmaps", help="export per-step/head attention maps")
    common(p_maps, needs_ckpt=True)
    p_maps.add_argument("--image-index", type=int, default=0)
    p_maps.add_argument("--readout", type=int, default=None)
    return parser


def _flag_kv(args: argparse.Namespace) -> dict[str, str]:
    """Translate dedicated flags into dotted config keys."""
    kv: dict[str, str] = {}
    mapping = {
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "unroll": "model.unroll_steps",
        "epsilon": "attack.epsilon",
        "mode": "attack.mode",
        "restarts": "attack.restarts",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            kv[key] = str(value)
    if getattr(args, "command", "") == "attack" and args.steps is not None:
        kv["attack.num_steps"] = str(args.steps)
    if getattr(args, "adam", False):
        kv["attack.optimizer"] = "adam"
    if args.seed is not None:
        kv["train.rng_seed"] = str(args.seed)
        kv["attack.rng_seed"] = str(args.seed)
    return kv


def _resolve(args: argparse.Namespace) -> dict[str, str]:
    file_kv = parse_config_file(args.config) if args.config else {}
    kv = resolve_layers(
        file_kv, env_overrides(), parse_assignments(args.overrides), _flag_kv(args)
    )
    if kv.get("attack.optimizer") == "adam" and not kv.get("attack.lr_schedule"):
        kv["attack.lr_schedule"] = ADAM_DEFAULT_SCHEDULE
    return kv


def _dataset_spec(kv: dict[str, str], path: Path) -> DatasetSpec:
    return DatasetSpec(
        path=str(path),
        height=int(kv.get("data.height", "32")),
        width=int(kv.get("data.width", "32")),
        channels=int(kv.get("data.channels", "3")),
        num_classes=int(kv.get("data.num_classes", "10")),
    )


def _load_split(args: argparse.Namespace, kv: dict[str, str], split: str) -> ImageBatch:
    data_dir = Path(args.data)
    path = data_dir / f"{split}.bin"
    if not path.exists() and args.synthetic:
        write_synthetic_dataset(
            data_dir,
            train_images=int(kv.get("data.train_images", "2048")),
            test_images=int(kv.get("data.test_images", "512")),
            seed=int(kv.get("data.seed", "0")),
        )
    return load_dataset(_dataset_spec(kv, path))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(
    out: Path, args: argparse.Namespace, kv: dict[str, str], extra: dict
) -> None:
    manifest = {
        "command": args.command,
        "config": dict(sorted(kv.items())),
        "seed": args.seed,
        **extra,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / "manifest.json")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args: argparse.Namespace):
    state = load_checkpoint(args.checkpoint)
    return state.model


def _cmd_train(args: argparse.Namespace) -> int:
    kv = _resolve(args)
    out = _out_dir(args)
    train_cfg = build_train_config(kv)
    model_cfg = build_model_config(kv)
    model = make_model(model_cfg, seed=train_cfg.rng_seed)
    train_batch = _load_split(args, kv, "train")
    test_path = Path(args.data) / "test.bin"
    eval_batch = load_dataset(_dataset_spec(kv, test_path)) if test_path.exists() else None
    state = train(model, train_batch, train_cfg, eval_batch=eval_batch, out_dir=out)
    final = out / f"epoch_{state.epoch:03d}.ckpt"
    _write_manifest(
        out,
        args,
        kv,
        {"checkpoint_sha256": _sha256(final), "final_checkpoint": str(final)},
    )
    print(f"trained {state.epoch} epochs -> {final}")
    return EXIT_OK


def _cmd_attack(args: argparse.Namespace) -> int:
    kv = _resolve(args)
    out = _out_dir(args)
    model = _load_model(args)
    attack_cfg = build_attack_config(kv)
    test = _load_split(args, kv, "test")
    n = min(args.images, len(test))
    batch = ImageBatch(pixels=test.pixels[:n], labels=test.labels[:n])
    with torch.no_grad():
        clean_pred = model(batch.pixels).argmax(dim=-1)
    result = run_attack(
        model, batch, attack_cfg, num_classes=model.config.num_classes
    )
    np.save(out / "adversarial.npy", result.adversarial.numpy())
    lines = [RECORDS_HEADER]
    for i in range(n):
        target = "" if result.targets is None else int(result.targets[i])
        lines.append(
            f"{i},{int(batch.labels[i])},{int(clean_pred[i])},{target},"
            f"{int(result.final_prediction[i])},{int(result.success[i])}"
        )
    (out / "records.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out,
        args,
        kv,
        {
            "checkpoint_sha256": _sha256(Path(args.checkpoint)),
            "success_rate": float(result.success.float().mean()),
            "robust_top1": float((result.final_prediction == batch.labels).float().mean()),
        },
    )
    print(
        f"attacked {n} images: success rate "
        f"{float(result.success.float().mean()):.4f} -> {out / 'records.csv'}"
    )
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    kv = _resolve(args)
    out = _out_dir(args)
    model = _load_model(args)
    test = _load_split(args, kv, "test")
    if args.images is not None:
        test = ImageBatch(
            pixels=test.pixels[: args.images], labels=test.labels[: args.images]
        )
    try:
        step_counts = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --steps list {args.steps!r}") from exc
    if not step_counts:
        raise ConfigError("--steps must name at least one step count")
    model_name = Path(args.checkpoint).stem
    rows = []
    for steps in step_counts:
        if steps == 0:
            summary = evaluate(model, test, None)
            attack_name = "none"
            restarts = 1
        else:
            cfg = replace(build_attack_config(kv), num_steps=steps)
            summary = evaluate(model, test, cfg)
            attack_name = cfg.optimizer
            restarts = cfg.restarts
        rows.append(summary.result_row(model_name, attack_name, steps, restarts))
        print(
            f"steps={steps:4d} robust_top1={rows[-1].top1:.4f} "
            f"success_rate={rows[-1].success_rate:.4f}"
        )
    write_results(rows, out / "results.csv")
    _write_manifest(
        out, args, kv, {"checkpoint_sha256": _sha256(Path(args.checkpoint))}
    )
    return EXIT_OK


def _cmd_landscape(args: argparse.Namespace) -> int:
    kv = _resolve(args)
    out = _out_dir(args)
    model = _load_model(args)
    test = _load_split(args, kv, "test")
    if not 0 <= args.image_index < len(test):
        raise ConfigError(f"--image-index {args.image_index} out of range")
    image = test.pixels[args.image_index]
    label = int(test.labels[args.image_index])
    grid = loss_landscape(
        model,
        image,
        label,
        epsilon=float(kv.get("attack.epsilon", str(8 / 255))),
        grid_n=args.grid_n,
        rng_seed=int(kv.get("attack.rng_seed", "0")),
    )
    landscape_to_csv(grid, out / "landscape.csv")
    render_landscape(grid, out / "landscape.png")
    _write_manifest(
        out,
        args,
        kv,
        {
            "checkpoint_sha256": _sha256(Path(args.checkpoint)),
            "image_index": args.image_index,
            "used_gradient_fallback": grid.used_gradient_fallback,
        },
    )
    print(f"landscape grid {args.grid_n}x{args.grid_n} -> {out / 'landscape.png'}")
    return EXIT_OK


def _cmd_attmaps(args: argparse.Namespace) -> int:
    kv = _resolve(args)
    out = _out_dir(args)
    model = _load_model(args)
    test = _load_split(args, kv, "test")
    if not 0 <= args.image_index < len(test):
        raise ConfigError(f"--image-index {args.image_index} out of range")
    files = export_attention(
        model,
        test.pixels[args.image_index],
        out,
        image_name=f"img{args.image_index:05d}",
        readout_step=args.readout,
    )
    _write_manifest(
        out,
        args,
        kv,
        {
            "checkpoint_sha256": _sha256(Path(args.checkpoint)),
            "image_index": args.image_index,
            "files_written": len(files),
        },
    )
    print(f"wrote {len(files)} attention images -> {out}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "landscape": _cmd_landscape,
    "attmaps": _cmd_attmaps,
}


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    set_thread_count(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointFormatError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergence, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
