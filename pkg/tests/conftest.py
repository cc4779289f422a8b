"""Shared fixtures: tiny models, small batches, and a linear probe model.

Everything is seeded; tests must never depend on global torch RNG state.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from s3ta.model import ImageBatch, ModelConfig, make_model

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


class LinearModel(torch.nn.Module):
    """logits = flatten(pixels) @ W^T + b, kept in float64 for exact oracles."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        w = torch.as_tensor(weight, dtype=torch.float64)
        self.weight = torch.nn.Parameter(w)
        if bias is None:
            bias = np.zeros(w.shape[0])
        self.bias = torch.nn.Parameter(torch.as_tensor(bias, dtype=torch.float64))

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        flat = pixels.reshape(pixels.shape[0], -1).to(self.weight.dtype)
        return flat @ self.weight.T + self.bias


def random_linear_model(
    rng: np.random.Generator, num_classes: int, num_features: int
) -> LinearModel:
    weight = rng.normal(scale=1.0, size=(num_classes, num_features))
    bias = rng.normal(scale=0.1, size=num_classes)
    return LinearModel(weight, bias)


def random_batch(
    rng: np.random.Generator,
    batch_size: int,
    shape: tuple[int, ...],
    num_classes: int,
    dtype: torch.dtype = torch.float64,
    margin: float = 0.0,
) -> ImageBatch:
    """Images strictly inside [margin, 1-margin] so small balls stay in-box."""
    lo, hi = margin, 1.0 - margin
    pixels = rng.uniform(lo, hi, size=(batch_size, *shape))
    labels = rng.integers(0, num_classes, size=batch_size)
    return ImageBatch(
        pixels=torch.as_tensor(pixels, dtype=dtype),
        labels=torch.as_tensor(labels, dtype=torch.int64),
    )


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig.tiny()


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    model = make_model(tiny_config, seed=0)
    model.eval()
    return model


@pytest.fixture()
def tiny_batch(tiny_config) -> ImageBatch:
    rng = np.random.default_rng(7)
    spec = tiny_config.backbone
    return random_batch(
        rng,
        4,
        (spec.input_height, spec.input_width, spec.in_channels),
        tiny_config.num_classes,
        dtype=torch.float32,
    )
