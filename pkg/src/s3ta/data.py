"""Dataset ingestion, synthetic data generation, and result serialization.

The record-binary format is CIFAR-10's: each record is one label byte
followed by height*width*channels pixel bytes stored channel-planar
(all of channel 0, then channel 1, ...). Pixels decode to float32 as
byte/255 exactly.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .model import ImageBatch

RESULTS_HEADER = ("model", "attack", "steps", "restarts", "top1", "success_rate")

FORMATS = ("record-binary", "directory-of-images")


class DataFormatError(ValueError):
    """Malformed dataset file; byte_offset locates the first bad byte."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    format: str = "record-binary"
    height: int = 32
    width: int = 32
    channels: int = 3
    num_classes: int = 10
    shuffle_seed: int | None = None

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown dataset format {self.format!r}")
        if min(self.height, self.width, self.channels) <= 0:
            raise ValueError("image dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def record_length(self) -> int:
        return 1 + self.height * self.width * self.channels


def load_dataset(spec: DatasetSpec) -> ImageBatch:
    """Read the full dataset into one batch, in seed-deterministic order."""
    if spec.format == "record-binary":
        batch = _load_record_binary(spec)
    else:
        batch = _load_image_directory(spec)
    if spec.shuffle_seed is not None:
        rng = np.random.default_rng(spec.shuffle_seed)
        order = torch.from_numpy(rng.permutation(len(batch)))
        batch = ImageBatch(pixels=batch.pixels[order], labels=batch.labels[order])
    return batch


def _load_record_binary(spec: DatasetSpec) -> ImageBatch:
    path = Path(spec.path)
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    rec = spec.record_length
    if raw.size == 0:
        raise DataFormatError(f"{path} is empty", byte_offset=0)
    if raw.size % rec:
        raise DataFormatError(
            f"{path} does not divide into {rec}-byte records",
            byte_offset=(raw.size // rec) * rec,
        )
    records = raw.reshape(-1, rec)
    labels = records[:, 0]
    bad = np.nonzero(labels >= spec.num_classes)[0]
    if bad.size:
        raise DataFormatError(
            f"label {labels[bad[0]]} out of range for {spec.num_classes} classes",
            byte_offset=int(bad[0]) * rec,
        )
    planes = records[:, 1:].reshape(-1, spec.channels, spec.height, spec.width)
    pixels = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageBatch(
        pixels=torch.from_numpy(np.ascontiguousarray(pixels)),
        labels=torch.from_numpy(labels.astype(np.int64)),
    )


def _load_image_directory(spec: DatasetSpec) -> ImageBatch:
    from PIL import Image

    root = Path(spec.path)
    if not root.is_dir():
        raise DataFormatError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) > spec.num_classes:
        raise DataFormatError(
            f"{len(class_dirs)} class directories exceed num_classes={spec.num_classes}"
        )
    pixels, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for file in sorted(class_dir.iterdir()):
            with Image.open(file) as img:
                arr = np.asarray(img.convert("RGB" if spec.channels == 3 else "L"))
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.shape != (spec.height, spec.width, spec.channels):
                raise DataFormatError(f"{file} has shape {arr.shape}")
            pixels.append(arr.astype(np.float32) / 255.0)
            labels.append(label)
    if not pixels:
        raise DataFormatError(f"no images under {root}")
    return ImageBatch(
        pixels=torch.from_numpy(np.stack(pixels)),
        labels=torch.tensor(labels, dtype=torch.int64),
    )


def write_record_binary(path: str | Path, batch: ImageBatch) -> None:
    """Quantize a batch to bytes and write it in record-binary layout."""
    pixels = batch.pixels.detach().cpu().numpy()
    quantized = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    planar = quantized.transpose(0, 3, 1, 2).reshape(len(batch), -1)
    records = np.concatenate(
        [batch.labels.cpu().numpy().astype(np.uint8)[:, None], planar], axis=1
    )
    tmp = Path(str(path) + ".tmp")
    records.tofile(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# batching and train-time augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Optional train-time transforms; both default off so runs replay exactly."""

    random_crop: bool = False
    crop_padding: int = 4
    horizontal_flip: bool = False
    rng_seed: int = 0


def iterate_batches(
    batch: ImageBatch,
    batch_size: int,
    *,
    seed: int | None = None,
    drop_last: bool = False,
) -> Iterator[tuple[ImageBatch, list[int]]]:
    """Yield (mini-batch, source indices) pairs in seeded or natural order.

    The indices identify each image within the full dataset, so downstream
    per-image rng streams do not depend on the batch size.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    n = len(batch)
    if seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        sel = torch.from_numpy(idx)
        yield ImageBatch(pixels=batch.pixels[sel], labels=batch.labels[sel]), [
            int(i) for i in idx
        ]


def augment_batch(batch: ImageBatch, cfg: AugmentConfig, epoch: int = 0) -> ImageBatch:
    """Seeded random crop (zero padding) and horizontal flip."""
    if not (cfg.random_crop or cfg.horizontal_flip):
        return batch
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0xA06, epoch]))
    pixels = batch.pixels.clone()
    n, h, w, _ = pixels.shape
    if cfg.random_crop:
        pad = cfg.crop_padding
        padded = torch.zeros(
            (n, h + 2 * pad, w + 2 * pad, pixels.shape[3]), dtype=pixels.dtype
        )
        padded[:, pad : pad + h, pad : pad + w] = pixels
        tops = rng.integers(0, 2 * pad + 1, size=n)
        lefts = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            pixels[i] = padded[i, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
    if cfg.horizontal_flip:
        flips = rng.random(n) < 0.5
        for i in np.nonzero(flips)[0]:
            pixels[i] = torch.flip(pixels[i], dims=(1,))
    return ImageBatch(pixels=pixels, labels=batch.labels)


# ---------------------------------------------------------------------------
# synthetic classification data
# ---------------------------------------------------------------------------


def make_synthetic_batch(
    num_images: int,
    *,
    height: int = 32,
    width: int = 32,
    channels: int = 3,
    num_classes: int = 10,
    sample_seed: int = 0,
    pattern_seed: int = 0,
    robust_amplitude: float = 0.25,
    robust_correlation: float = 0.85,
    fragile_amplitude: float = 0.028,
    fragile_block: int = 4,
    noise_std: float = 0.1,
) -> ImageBatch:
    """Class-coded images with one large-margin and one sub-epsilon cue.

    Each image plants two signals on a mid-gray background: a low-frequency
    oriented grating whose amplitude dwarfs any 8/255-ball perturbation but
    which matches the label only with probability robust_correlation (else
    it shows a random other class), and a faint high-frequency sign pattern
    that always matches the label but whose amplitude sits below that
    attack radius, so an adversary can rewrite it at will. Fitting the
    clean data pushes a model onto the faint cue (it is the only way past
    the grating's error rate); robustness requires discounting it and
    accepting the grating's ceiling. pattern_seed fixes the class signals
    (share it between train and test splits), sample_seed drives the
    per-image draw.
    """
    if num_images <= 0:
        raise ValueError("num_images must be positive")
    if not 0.0 <= robust_correlation <= 1.0:
        raise ValueError("robust_correlation must be in [0, 1]")
    gratings, sign_patterns = _class_patterns(
        height, width, channels, num_classes, pattern_seed, fragile_block
    )
    rng = np.random.default_rng(np.random.SeedSequence([sample_seed, 0x5A17]))
    labels = rng.integers(0, num_classes, size=num_images)
    pixels = np.empty((num_images, height, width, channels), dtype=np.float32)
    for i, label in enumerate(labels):
        grating_class = int(label)
        if rng.random() >= robust_correlation:
            shift = int(rng.integers(1, num_classes))
            grating_class = (label + shift) % num_classes
        noise = rng.normal(0.0, noise_std, size=(height, width, channels))
        image = (
            0.5
            + robust_amplitude * gratings[grating_class]
            + fragile_amplitude * sign_patterns[label]
            + noise
        )
        pixels[i] = np.clip(image, 0.0, 1.0)
    return ImageBatch(
        pixels=torch.from_numpy(pixels),
        labels=torch.from_numpy(labels.astype(np.int64)),
    )


def _class_patterns(
    height: int,
    width: int,
    channels: int,
    num_classes: int,
    pattern_seed: int,
    fragile_block: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([pattern_seed, 0x9A77]))
    ys, xs = np.mgrid[0:height, 0:width]
    gratings = np.empty((num_classes, height, width, channels), dtype=np.float64)
    signs = np.empty_like(gratings)
    bh = max(1, math.ceil(height / fragile_block))
    bw = max(1, math.ceil(width / fragile_block))
    for c in range(num_classes):
        angle = math.pi * c / num_classes + rng.uniform(0, math.pi / num_classes)
        cycles = 2 + c % 3
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.cos(
            2 * math.pi * cycles * (xs * math.cos(angle) + ys * math.sin(angle)) / width
            + phase
        )
        gratings[c] = wave[:, :, None]
        # blockwise +-1 pattern: faint but shaped at a scale conv stacks see
        coarse = rng.integers(0, 2, size=(bh, bw, channels)) * 2 - 1
        signs[c] = np.repeat(
            np.repeat(coarse, fragile_block, axis=0), fragile_block, axis=1
        )[:height, :width, :]
    return gratings, signs


def write_synthetic_dataset(
    out_dir: str | Path,
    *,
    train_images: int = 4096,
    test_images: int = 1024,
    seed: int = 0,
    **kwargs,
) -> tuple[Path, Path]:
    """Write matched train.bin/test.bin record-binary files; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = make_synthetic_batch(
        train_images, sample_seed=seed * 2 + 1, pattern_seed=seed, **kwargs
    )
    test = make_synthetic_batch(
        test_images, sample_seed=seed * 2 + 2, pattern_seed=seed, **kwargs
    )
    train_path, test_path = out / "train.bin", out / "test.bin"
    write_record_binary(train_path, train)
    write_record_binary(test_path, test)
    return train_path, test_path


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    model: str
    attack: str
    steps: int
    restarts: int
    top1: float
    success_rate: float


def write_results(
    records: Iterable[ResultRow], path: str | Path, append: bool = False
) -> None:
    """Serialize evaluation rows; floats carry 4 decimal places.

    With append=True an existing file keeps its header and gains rows, so a
    rerun of a deterministic evaluation appends an identical row.
    """
    path = Path(path)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    mode = "w" if fresh else "a"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(RESULTS_HEADER)
        for row in records:
            writer.writerow(
                [
                    row.model,
                    row.attack,
                    row.steps,
                    row.restarts,
                    f"{row.top1:.4f}",
                    f"{row.success_rate:.4f}",
                ]
            )
