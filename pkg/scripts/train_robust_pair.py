"""Train matched adversarial and nominal desk models, then compare robustness.

Generates a synthetic CIFAR-10-format dataset, trains two models that differ
only in whether the inner attack runs, and evaluates both clean and under a
20-step untargeted PGD at the training epsilon.  Writes checkpoints, per-epoch
metrics, and a JSON gap report under --out.

Usage:
    python3 scripts/train_robust_pair.py --out /tmp/robust_pair --epochs 30
"""

import argparse
import json
import time
from pathlib import Path

from s3ta.experiments import (
    DESK_EPSILON,
    desk_dataset,
    robust_summary,
    train_desk_model,
)


def progress(tag, started):
    def callback(row):
        print(
            f"[{tag}] epoch {row['epoch']:3d} lr {row['lr']:.4f} "
            f"adv_loss {row['adv_loss']:.4f} clean {row['clean_top1']:.4f} "
            f"robust {row['robust_top1']:.4f} t={time.time() - started:.0f}s",
            flush=True,
        )

    return callback


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--train-images", type=int, default=2048)
    parser.add_argument("--test-images", type=int, default=512)
    parser.add_argument("--unroll", type=int, default=2)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--eval-steps", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    train_batch, test_batch = desk_dataset(
        args.out / "data",
        train_images=args.train_images,
        test_images=args.test_images,
        seed=args.seed,
    )
    print(f"dataset: train={len(train_batch)} test={len(test_batch)}", flush=True)

    started = time.time()
    models = {}
    for tag, adversarial in (("adversarial", True), ("nominal", False)):
        models[tag] = train_desk_model(
            train_batch,
            test_batch,
            unroll_steps=args.unroll,
            epochs=args.epochs,
            adversarial=adversarial,
            rng_seed=args.seed,
            out_dir=args.out / tag,
            progress=progress(tag, started),
        )

    report = {"epsilon": DESK_EPSILON, "eval_steps": args.eval_steps}
    for tag, state in models.items():
        summary = robust_summary(
            state, test_batch, num_steps=args.eval_steps, rng_seed=args.seed + 1
        )
        report[f"{tag}_nominal_top1"] = summary.nominal_top1
        report[f"{tag}_robust_top1"] = summary.robust_top1
    report["robust_gap_pp"] = 100 * (
        report["adversarial_robust_top1"] - report["nominal_robust_top1"]
    )
    report["minutes"] = (time.time() - started) / 60

    (args.out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2), flush=True)


if __name__ == "__main__":
    main()
