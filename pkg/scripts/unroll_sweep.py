"""Sweep attention unroll depth and report robust accuracy per depth.

Adversarially trains one model per (unroll depth, seed) pair on a shared
synthetic dataset, evaluates each under a long untargeted PGD, and writes a
CSV of per-run results plus per-depth medians.  Depths above 2 train with the
default readout-deepening curriculum.

Usage:
    python3 scripts/unroll_sweep.py --out /tmp/unroll_sweep --depths 2,4 --seeds 0,1,2
"""

import argparse
import csv
import json
import statistics
import time
from pathlib import Path

from s3ta.experiments import desk_dataset, robust_summary, train_desk_model


def int_list(text):
    return tuple(int(part) for part in text.split(","))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--depths", type=int_list, default=(2, 4))
    parser.add_argument("--seeds", type=int_list, default=(0, 1, 2))
    parser.add_argument("--train-images", type=int, default=1536)
    parser.add_argument("--test-images", type=int, default=512)
    parser.add_argument("--epochs", type=int, default=16)
    parser.add_argument("--warmup-epochs", type=int, default=3)
    parser.add_argument("--eval-steps", type=int, default=100)
    parser.add_argument("--eval-images", type=int, default=256)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    train_batch, test_batch = desk_dataset(
        args.out / "data",
        train_images=args.train_images,
        test_images=args.test_images,
        seed=0,
    )

    started = time.time()
    rows = []
    for depth in args.depths:
        for seed in args.seeds:
            state = train_desk_model(
                train_batch,
                None,
                unroll_steps=depth,
                epochs=args.epochs,
                warmup_epochs=args.warmup_epochs,
                rng_seed=seed,
            )
            summary = robust_summary(
                state,
                test_batch,
                num_steps=args.eval_steps,
                rng_seed=seed + 11,
                max_images=args.eval_images,
            )
            rows.append(
                {
                    "unroll": depth,
                    "seed": seed,
                    "nominal_top1": summary.nominal_top1,
                    "robust_top1": summary.robust_top1,
                }
            )
            print(
                f"unroll={depth} seed={seed} nominal={summary.nominal_top1:.4f} "
                f"robust={summary.robust_top1:.4f} t={time.time() - started:.0f}s",
                flush=True,
            )

    with open(args.out / "runs.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    medians = {
        str(depth): statistics.median(
            row["robust_top1"] for row in rows if row["unroll"] == depth
        )
        for depth in args.depths
    }
    report = {"median_robust_top1": medians, "minutes": (time.time() - started) / 60}
    (args.out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2), flush=True)


if __name__ == "__main__":
    main()
