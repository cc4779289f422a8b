"""Measure how attack restarts tighten robust accuracy on a checkpoint.

Loads a trained model, attacks a fixed test subset with the same PGD budget
at several restart counts, and writes a CSV.  Robust accuracy is monotone
non-increasing in the restart count because each image keeps its worst draw.

Usage:
    python3 scripts/restart_sweep.py --checkpoint runs/train/epoch_030.ckpt \
        --data /tmp/robust_pair/data --out /tmp/restart_sweep
"""

import argparse
import csv
import time
from pathlib import Path

from s3ta.data import DatasetSpec, load_dataset
from s3ta.experiments import robust_summary
from s3ta.training import load_checkpoint


def int_list(text):
    return tuple(int(part) for part in text.split(","))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--data", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--restarts", type=int_list, default=(1, 10))
    parser.add_argument("--steps", type=int, default=10)
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    state = load_checkpoint(args.checkpoint)
    cfg = state.model.config
    test_batch = load_dataset(
        DatasetSpec(
            path=str(args.data / "test.bin"),
            height=cfg.backbone.input_height,
            width=cfg.backbone.input_width,
            channels=cfg.backbone.in_channels,
            num_classes=cfg.num_classes,
        )
    )

    args.out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    rows = []
    for restarts in args.restarts:
        summary = robust_summary(
            state,
            test_batch,
            num_steps=args.steps,
            restarts=restarts,
            rng_seed=args.seed,
            max_images=args.images,
        )
        rows.append(
            {
                "restarts": restarts,
                "num_images": summary.num_images,
                "nominal_top1": summary.nominal_top1,
                "robust_top1": summary.robust_top1,
                "success_rate": summary.success_rate,
            }
        )
        print(
            f"restarts={restarts} robust={summary.robust_top1:.4f} "
            f"success={summary.success_rate:.4f} t={time.time() - started:.0f}s",
            flush=True,
        )

    with open(args.out / "restarts.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out / 'restarts.csv'}")


if __name__ == "__main__":
    main()
