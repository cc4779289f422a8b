"""Evaluation harness: accuracy metrics, loss landscapes, attention export.

Robust top-1 counts an image as correct only when its post-attack
prediction equals the true label; attack success follows the attack's own
goal (argmax equals the target, or differs from the true label). Both are
reported over all evaluated images so alternative accountings can be
recomputed offline from the per-image records.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .data import ResultRow
from .model import ImageBatch, S3TA, input_gradient, per_example_cross_entropy

_DIRECTION_TAG = 0xD17

ModelFn = Callable[[torch.Tensor], torch.Tensor]


class NumericalFailure(RuntimeError):
    """A metric or landscape produced non-finite values."""


@dataclass(frozen=True)
class EvalRecord:
    image_id: int
    true_label: int
    clean_prediction: int
    target: int | None
    adversarial_prediction: int


@dataclass
class EvalSummary:
    num_images: int
    nominal_top1: float
    robust_top1: float
    success_rate: float
    records: list[EvalRecord]

    def result_row(self, model_name: str, attack_name: str, steps: int, restarts: int) -> ResultRow:
        return ResultRow(
            model=model_name,
            attack=attack_name,
            steps=steps,
            restarts=restarts,
            top1=self.robust_top1,
            success_rate=self.success_rate,
        )


def evaluate(
    model: ModelFn,
    batch: ImageBatch,
    attack: AttackConfig | None = None,
    *,
    num_classes: int | None = None,
    batch_size: int = 128,
    image_indices: Sequence[int] | None = None,
) -> EvalSummary:
    """Nominal and robust top-1 plus success rate over a dataset.

    attack=None evaluates clean images only; it matches a zero-step,
    zero-init attack exactly (both leave pixels untouched, and "success"
    degenerates to clean misclassification). Restarts inside `attack` are
    honored via the multi-restart fold.
    """
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty batch")
    if num_classes is None:
        num_classes = (
            model.config.num_classes
            if isinstance(model, S3TA)
            else int(model(batch.pixels[:1]).shape[-1])
        )
    indices = (
        list(range(len(batch)))
        if image_indices is None
        else [int(i) for i in image_indices]
    )
    if len(indices) != len(batch):
        raise ValueError("image_indices must match the batch size")

    records: list[EvalRecord] = []
    nominal_hits = robust_hits = successes = 0
    for start in range(0, len(batch), batch_size):
        chunk = ImageBatch(
            pixels=batch.pixels[start : start + batch_size],
            labels=batch.labels[start : start + batch_size],
        )
        chunk_ids = indices[start : start + batch_size]
        with torch.no_grad():
            clean_pred = model(chunk.pixels).argmax(dim=-1)
        if attack is None:
            adv_pred = clean_pred
            success = clean_pred != chunk.labels
            targets = None
        else:
            result = run_attack(
                model, chunk, attack, num_classes, image_indices=chunk_ids
            )
            adv_pred = result.final_prediction
            success = result.success
            targets = result.targets
        if int(clean_pred.max()) >= num_classes or int(adv_pred.max()) >= num_classes:
            raise RuntimeError("prediction outside the valid class range")
        nominal_hits += int((clean_pred == chunk.labels).sum())
        robust_hits += int((adv_pred == chunk.labels).sum())
        successes += int(success.sum())
        for i in range(len(chunk)):
            records.append(
                EvalRecord(
                    image_id=chunk_ids[i],
                    true_label=int(chunk.labels[i]),
                    clean_prediction=int(clean_pred[i]),
                    target=None if targets is None else int(targets[i]),
                    adversarial_prediction=int(adv_pred[i]),
                )
            )
    n = len(batch)
    return EvalSummary(
        num_images=n,
        nominal_top1=nominal_hits / n,
        robust_top1=robust_hits / n,
        success_rate=successes / n,
        records=records,
    )


# ---------------------------------------------------------------------------
# loss landscape
# ---------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    """Loss surface on the plane spanned by an adversarial and a random
    direction, both scaled to unit L-infinity norm.

    losses[i, j] is the loss at x + epsilon * (u_axis[i] * direction_u +
    v_axis[j] * direction_v), clipped to the pixel box. in_ball marks grid
    points whose offset stays inside the epsilon-ball (the diamond
    |u| + |v| <= 1, the ball's footprint on this plane).
    """

    u_axis: np.ndarray
    v_axis: np.ndarray
    losses: np.ndarray
    direction_u: torch.Tensor
    direction_v: torch.Tensor
    epsilon: float
    in_ball: np.ndarray
    used_gradient_fallback: bool

    def __post_init__(self):
        if self.losses.shape != (self.u_axis.size, self.v_axis.size):
            raise ValueError("losses grid does not match its axes")
        if not np.isfinite(self.losses).all():
            raise NumericalFailure("landscape contains non-finite losses")


def loss_landscape(
    model: ModelFn,
    image: torch.Tensor,
    label: int,
    *,
    epsilon: float = 8 / 255,
    grid_n: int = 21,
    rng_seed: int = 0,
    attack: AttackConfig | None = None,
    num_classes: int | None = None,
    chunk: int = 64,
) -> LandscapeGrid:
    """Sample the loss on a 2D slice through an adversarial direction.

    direction_u is the reference attack's perturbation divided by epsilon;
    if the attack returns a zero perturbation the input-gradient sign is
    used instead and the grid is flagged. direction_v has i.i.d. +-1
    entries. grid_n must be odd so the clean image is the center point.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise ValueError("grid_n must be odd and >= 3")
    if image.dim() != 3:
        raise ValueError("image must be (H, W, C)")
    batch = ImageBatch(
        pixels=image.unsqueeze(0), labels=torch.tensor([label], dtype=torch.int64)
    )
    if attack is None:
        attack = AttackConfig(
            epsilon=epsilon,
            step_size=epsilon / 10,
            num_steps=20,
            mode="untargeted",
            random_init_prob=0.0,
            rng_seed=rng_seed,
        )
    if num_classes is None:
        num_classes = (
            model.config.num_classes
            if isinstance(model, S3TA)
            else int(model(batch.pixels) .shape[-1])
        )
    result = run_attack(model, batch, attack, num_classes)
    perturbation = (result.adversarial[0] - image).detach()
    fallback = bool(perturbation.abs().max() == 0)
    if fallback:
        grad = input_gradient(model, batch.pixels, batch.labels)[0]
        direction_u = torch.sign(grad)
    else:
        direction_u = perturbation / epsilon

    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, _DIRECTION_TAG]))
    signs = rng.integers(0, 2, size=tuple(image.shape)) * 2 - 1
    direction_v = torch.from_numpy(signs).to(image.dtype)

    axis = np.linspace(-1.0, 1.0, grid_n)
    losses = np.empty((grid_n, grid_n))
    points = []
    for i, u in enumerate(axis):
        for j, v in enumerate(axis):
            offset = epsilon * (float(u) * direction_u + float(v) * direction_v)
            points.append(torch.clamp(image + offset, 0.0, 1.0))
    stacked = torch.stack(points)
    label_t = torch.full((len(points),), label, dtype=torch.int64)
    flat = np.empty(len(points))
    with torch.no_grad():
        for start in range(0, len(points), chunk):
            logits = model(stacked[start : start + chunk])
            flat[start : start + chunk] = per_example_cross_entropy(
                logits, label_t[start : start + chunk]
            ).numpy()
    losses[:, :] = flat.reshape(grid_n, grid_n)
    in_ball = np.add.outer(np.abs(axis), np.abs(axis)) <= 1.0 + 1e-12
    return LandscapeGrid(
        u_axis=axis,
        v_axis=axis.copy(),
        losses=losses,
        direction_u=direction_u,
        direction_v=direction_v,
        epsilon=epsilon,
        in_ball=in_ball,
        used_gradient_fallback=fallback,
    )


def landscape_to_csv(grid: LandscapeGrid, path: str | Path) -> None:
    """Matrix CSV: first row is the v axis, first column the u axis."""
    with open(path, "w", newline="") as fh:
        fh.write("u\\v," + ",".join(f"{v:.4f}" for v in grid.v_axis) + "\n")
        for i, u in enumerate(grid.u_axis):
            fh.write(
                f"{u:.4f},"
                + ",".join(f"{loss:.6f}" for loss in grid.losses[i])
                + "\n"
            )


def render_landscape(grid: LandscapeGrid, path: str | Path) -> None:
    """Heatmap with the epsilon-ball's diamond footprint outlined."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    extent = (grid.v_axis[0], grid.v_axis[-1], grid.u_axis[0], grid.u_axis[-1])
    im = ax.imshow(grid.losses, origin="lower", extent=extent, aspect="equal")
    diamond_v = [0.0, 1.0, 0.0, -1.0, 0.0]
    diamond_u = [1.0, 0.0, -1.0, 0.0, 1.0]
    ax.plot(diamond_v, diamond_u, "w--", linewidth=1.0)
    ax.set_xlabel("random direction (epsilon units)")
    ax.set_ylabel("adversarial direction (epsilon units)")
    fig.colorbar(im, ax=ax, label="loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def attention_to_image(attention_map: torch.Tensor, out_height: int, out_width: int) -> np.ndarray:
    """Grayscale uint8 rendering, nearest-neighbor upsampled; the most
    attended location maps to 255."""
    arr = attention_map.detach().numpy().astype(np.float64)
    peak = arr.max()
    if peak > 0:
        arr = arr / peak
    scaled = np.rint(arr * 255.0).astype(np.uint8)
    reps_h = out_height // scaled.shape[0]
    reps_w = out_width // scaled.shape[1]
    if reps_h * scaled.shape[0] != out_height or reps_w * scaled.shape[1] != out_width:
        raise ValueError("output size must be a multiple of the attention grid")
    return np.repeat(np.repeat(scaled, reps_h, axis=0), reps_w, axis=1)


def export_attention(
    model: S3TA,
    image: torch.Tensor,
    out_dir: str | Path,
    *,
    image_name: str = "image",
    readout_step: int | None = None,
    overlay: bool = True,
) -> list[Path]:
    """Write one grayscale map per (step, head), optionally overlay blends.

    Filenames follow <name>_step<SS>_head<HH>.png; overlays add an
    _overlay suffix and brighten attended regions of the input.
    """
    from PIL import Image

    if image.dim() != 3:
        raise ValueError("image must be (H, W, C)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    height, width, channels = image.shape
    with torch.no_grad():
        _, trace = model.forward_with_trace(image.unsqueeze(0), readout_step=readout_step)
    base = (image.detach().numpy() * 255.0).astype(np.uint8)
    written: list[Path] = []
    for s, per_head in enumerate(trace, start=1):
        for h, read in enumerate(per_head):
            gray = attention_to_image(read.attention_map[0], height, width)
            map_path = out / f"{image_name}_step{s:02d}_head{h:02d}.png"
            Image.fromarray(gray, mode="L").save(map_path)
            written.append(map_path)
            if overlay:
                weight = 0.3 + 0.7 * (gray.astype(np.float64) / 255.0)
                blended = np.rint(base * weight[:, :, None]).astype(np.uint8)
                if channels == 1:
                    blended = blended[:, :, 0]
                over_path = out / f"{image_name}_step{s:02d}_head{h:02d}_overlay.png"
                Image.fromarray(blended).save(over_path)
                written.append(over_path)
    return written
