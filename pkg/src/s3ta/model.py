"""Sequential top-down attention classifier (S3TA).

A convolutional backbone turns the image into a keys/values feature grid
(computed once per image). A recurrent controller then unrolls for a fixed
number of steps: at each step it decodes query vectors from its state, reads
the grid through per-head soft spatial attention, feeds the answers (and the
queries) back into itself, and decodes class logits from its new state. The
logits of the final step are the classifier output. Unrolling deeper costs
compute but no extra parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .basis import build_spatial_basis


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    """Layer list for the convolutional feature extractor.

    `blocks` is a sequence of (out_channels, stride) residual blocks applied
    after a 3x3 stem convolution. The final block's channel count must equal
    key_channels + value_channels of the owning ModelConfig.
    """

    input_height: int = 32
    input_width: int = 32
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 1
    blocks: tuple[tuple[int, int], ...] = ((16, 1), (32, 2), (64, 2), (64, 1))

    @property
    def out_channels(self) -> int:
        return self.blocks[-1][0]

    @property
    def total_stride(self) -> int:
        s = self.stem_stride
        for _, stride in self.blocks:
            s *= stride
        return s

    @property
    def grid_height(self) -> int:
        return self.input_height // self.total_stride

    @property
    def grid_width(self) -> int:
        return self.input_width // self.total_stride

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        s = self.total_stride
        if self.input_height % s or self.input_width % s:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} not divisible "
                f"by total stride {s}"
            )


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters.

    The learnable parameter count is a pure function of everything here
    except `unroll_steps`: the controller is shared across steps.
    """

    unroll_steps: int = 2
    num_heads: int = 4
    key_channels: int = 8
    value_channels: int = 56
    basis_frequencies: int = 2
    controller_width: int = 96
    query_hidden_width: int = 96
    output_hidden_width: int = 96
    num_classes: int = 10
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    @property
    def spatial_channels(self) -> int:
        """Channels of the sine/cosine basis: (2F)^2 exactly."""
        return (2 * self.basis_frequencies) ** 2

    @property
    def query_width(self) -> int:
        return self.key_channels + self.spatial_channels

    @property
    def answer_width(self) -> int:
        return self.value_channels + self.spatial_channels

    def __post_init__(self):
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.basis_frequencies < 1:
            raise ValueError("basis_frequencies must be >= 1")
        if self.backbone.out_channels != self.key_channels + self.value_channels:
            raise ValueError(
                f"backbone outputs {self.backbone.out_channels} channels, "
                f"expected key+value = "
                f"{self.key_channels + self.value_channels}"
            )

    # -- presets ------------------------------------------------------------

    @staticmethod
    def tiny() -> "ModelConfig":
        """4x4 grid model small enough for finite-difference checks."""
        return ModelConfig(
            unroll_steps=2,
            num_heads=2,
            key_channels=4,
            value_channels=8,
            basis_frequencies=1,
            controller_width=16,
            query_hidden_width=16,
            output_hidden_width=16,
            num_classes=5,
            backbone=BackboneSpec(
                input_height=8,
                input_width=8,
                stem_channels=8,
                blocks=((8, 2), (12, 1)),
            ),
        )

    @staticmethod
    def desk(unroll_steps: int = 2) -> "ModelConfig":
        """Default 32x32 configuration used by the training experiments."""
        return ModelConfig(unroll_steps=unroll_steps)

    @staticmethod
    def reference_scale() -> "ModelConfig":
        """224x224 / 28x28-grid configuration. Kept as a config preset only;
        training it is far outside desk-scale budgets."""
        return ModelConfig(
            unroll_steps=16,
            num_heads=4,
            key_channels=32,
            value_channels=2016,
            basis_frequencies=4,
            controller_width=1024,
            query_hidden_width=1024,
            output_hidden_width=1024,
            num_classes=1000,
            backbone=BackboneSpec(
                input_height=224,
                input_width=224,
                stem_channels=64,
                stem_stride=4,
                blocks=((256, 1), (512, 2), (1024, 1), (2048, 1)),
            ),
        )

    def with_unroll(self, unroll_steps: int) -> "ModelConfig":
        return replace(self, unroll_steps=unroll_steps)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ImageBatch:
    """A batch of images in [0,1] with integer class labels.

    pixels: float tensor (batch, height, width, channels)
    labels: int64 tensor (batch,)
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def validate(self, num_classes: int | None = None) -> None:
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-d, got shape {tuple(self.pixels.shape)}")
        if self.labels.shape != self.pixels.shape[:1]:
            raise ValueError("labels must have one entry per image")
        lo, hi = self.pixels.min().item(), self.pixels.max().item()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel intensities outside [0,1]: min={lo}, max={hi}")
        if (self.labels < 0).any():
            raise ValueError("negative class label")
        if num_classes is not None and (self.labels >= num_classes).any():
            raise ValueError(f"class label out of range [0, {num_classes})")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class AttentionRead:
    """One head's read of the feature grid at one step.

    All fields may carry a leading batch dimension.
    query:         (..., C_k + C_s)
    logits_map:    (..., H', W') raw inner products
    attention_map: (..., H', W') spatial softmax of the logits map
    answer:        (..., C_v + C_s) attention-weighted spatial sum of values
    """

    query: torch.Tensor
    logits_map: torch.Tensor
    attention_map: torch.Tensor
    answer: torch.Tensor


@dataclass
class ControllerState:
    """Recurrent controller state plus the logits decoded at the last step."""

    hidden: torch.Tensor
    cell: torch.Tensor
    previous_logits: torch.Tensor


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def spatial_softmax(logits_map: torch.Tensor) -> torch.Tensor:
    """Softmax over the trailing two (spatial) dimensions.

    Stabilized by subtracting the per-map maximum before exponentiation.
    """
    flat = logits_map.reshape(*logits_map.shape[:-2], -1)
    flat = flat - flat.max(dim=-1, keepdim=True).values
    weights = torch.exp(flat)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights.reshape(logits_map.shape)


def attend(
    query: torch.Tensor, keys_aug: torch.Tensor, values_aug: torch.Tensor
) -> AttentionRead:
    """Single soft spatial read.

    query:      (C_k + C_s,)
    keys_aug:   (C_k + C_s, H', W')  keys with the spatial basis concatenated
    values_aug: (C_v + C_s, H', W')  values with the spatial basis concatenated

    The logits map is the per-location inner product of the query with the
    augmented keys; one softmax map modulates all value channels together.
    """
    if query.shape[0] != keys_aug.shape[0]:
        raise ValueError(
            f"query has {query.shape[0]} channels, keys_aug has {keys_aug.shape[0]}"
        )
    if keys_aug.shape[1:] != values_aug.shape[1:]:
        raise ValueError("keys_aug and values_aug must share the spatial grid")
    logits_map = torch.einsum("c,chw->hw", query, keys_aug)
    attention_map = spatial_softmax(logits_map)
    answer = torch.einsum("hw,chw->c", attention_map, values_aug)
    return AttentionRead(query, logits_map, attention_map, answer)


def attend_heads(
    queries: torch.Tensor, keys_aug: torch.Tensor, values_aug: torch.Tensor
) -> AttentionRead:
    """Batched multi-head version of `attend`.

    queries (B, N, C_k+C_s), keys_aug (B, C_k+C_s, H', W'),
    values_aug (B, C_v+C_s, H', W'). Returns an AttentionRead whose fields
    have leading dimensions (B, N).
    """
    if queries.shape[-1] != keys_aug.shape[1]:
        raise ValueError(
            f"queries have {queries.shape[-1]} channels, "
            f"keys_aug has {keys_aug.shape[1]}"
        )
    logits_map = torch.einsum("bnc,bchw->bnhw", queries, keys_aug)
    attention_map = spatial_softmax(logits_map)
    answer = torch.einsum("bnhw,bchw->bnc", attention_map, values_aug)
    return AttentionRead(queries, logits_map, attention_map, answer)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return torch.relu(h + self.shortcut(x))


class Backbone(nn.Module):
    """Small residual feature extractor; output splits into keys and values."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.stem = nn.Conv2d(
            spec.in_channels, spec.stem_channels, 3, stride=spec.stem_stride, padding=1
        )
        blocks = []
        channels = spec.stem_channels
        for out_channels, stride in spec.blocks:
            blocks.append(ResidualBlock(channels, out_channels, stride))
            channels = out_channels
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(torch.relu(self.stem(x)))


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class S3TA(nn.Module):
    """The sequential top-down attention classifier.

    Forward passes are pure functions of (parameters, pixels, readout_step):
    no internal randomness, no running statistics.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.backbone = Backbone(c.backbone)
        lstm_input = c.num_heads * (c.answer_width + c.query_width)
        self.controller = nn.LSTMCell(lstm_input, c.controller_width)
        self.query_net = nn.Sequential(
            nn.Linear(c.controller_width + c.num_classes, c.query_hidden_width),
            nn.ReLU(),
            nn.Linear(c.query_hidden_width, c.num_heads * c.query_width),
        )
        self.output_net = nn.Sequential(
            nn.Linear(c.controller_width, c.output_hidden_width),
            nn.ReLU(),
            nn.Linear(c.output_hidden_width, c.num_classes),
        )
        self.initial_hidden = nn.Parameter(torch.empty(c.controller_width))
        self.initial_cell = nn.Parameter(torch.empty(c.controller_width))
        basis = build_spatial_basis(
            c.backbone.grid_height, c.backbone.grid_width, c.basis_frequencies
        )
        # stored channel-first to match the backbone output layout
        self.register_buffer("spatial_basis", basis.permute(2, 0, 1).contiguous())
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        # He-scaled weights so activations keep their scale through the plain
        # (normalization-free) conv stack; zero biases; LSTM forget-gate bias 1.
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        for net in (self.query_net, self.output_net):
            final = net[-1]
            fan_in = final.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(final.weight, -bound, bound)
        lstm = self.controller
        nn.init.uniform_(
            lstm.weight_ih, -1.0 / math.sqrt(lstm.input_size), 1.0 / math.sqrt(lstm.input_size)
        )
        nn.init.uniform_(
            lstm.weight_hh, -1.0 / math.sqrt(lstm.hidden_size), 1.0 / math.sqrt(lstm.hidden_size)
        )
        nn.init.zeros_(lstm.bias_ih)
        nn.init.zeros_(lstm.bias_hh)
        # torch gate order is (input, forget, cell, output)
        h = lstm.hidden_size
        with torch.no_grad():
            lstm.bias_ih[h : 2 * h].fill_(1.0)
        bound = 1.0 / math.sqrt(self.config.controller_width)
        nn.init.uniform_(self.initial_hidden, -bound, bound)
        nn.init.uniform_(self.initial_cell, -bound, bound)

    # -- pieces --------------------------------------------------------------

    def vision_forward(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the backbone once; split channels into keys and values.

        pixels: (B, H, W, C) in [0,1]. Returns channel-first keys
        (B, C_k, H', W') and values (B, C_v, H', W').
        """
        spec = self.config.backbone
        if pixels.dim() != 4 or pixels.shape[1:] != (
            spec.input_height,
            spec.input_width,
            spec.in_channels,
        ):
            raise ValueError(
                f"expected pixels (B, {spec.input_height}, {spec.input_width}, "
                f"{spec.in_channels}), got {tuple(pixels.shape)}"
            )
        features = self.backbone(pixels.permute(0, 3, 1, 2))
        keys = features[:, : self.config.key_channels]
        values = features[:, self.config.key_channels :]
        return keys, values

    def augment(self, grid: torch.Tensor) -> torch.Tensor:
        """Concatenate the fixed spatial basis along the channel dimension."""
        basis = self.spatial_basis.unsqueeze(0).expand(grid.shape[0], -1, -1, -1)
        return torch.cat([grid, basis.to(grid.dtype)], dim=1)

    def initial_state(self, batch_size: int) -> ControllerState:
        hidden = self.initial_hidden.unsqueeze(0).expand(batch_size, -1)
        cell = self.initial_cell.unsqueeze(0).expand(batch_size, -1)
        logits = torch.zeros(
            batch_size,
            self.config.num_classes,
            dtype=hidden.dtype,
            device=hidden.device,
        )
        return ControllerState(hidden, cell, logits)

    def make_queries(self, state: ControllerState) -> torch.Tensor:
        """Decode N query vectors from hidden state and previous logits."""
        inputs = torch.cat([state.hidden, state.previous_logits], dim=-1)
        flat = self.query_net(inputs)
        return flat.reshape(-1, self.config.num_heads, self.config.query_width)

    def controller_step(
        self, state: ControllerState, reads: list[AttentionRead]
    ) -> ControllerState:
        """Advance the controller by one step given this step's N reads.

        The recurrent input is all answers followed by all queries, in head
        order. previous_logits is refreshed from the new hidden state.
        """
        if len(reads) != self.config.num_heads:
            raise ValueError(
                f"expected {self.config.num_heads} reads, got {len(reads)}"
            )
        answers = torch.cat([r.answer for r in reads], dim=-1)
        queries = torch.cat([r.query for r in reads], dim=-1)
        inputs = torch.cat([answers, queries], dim=-1)
        hidden, cell = self.controller(inputs, (state.hidden, state.cell))
        return ControllerState(hidden, cell, self.output_net(hidden))

    # -- unroll ---------------------------------------------------------------

    def _unroll(
        self, pixels: torch.Tensor, readout_step: int | None, keep_trace: bool
    ) -> tuple[torch.Tensor, list[list[AttentionRead]]]:
        steps = self.config.unroll_steps if readout_step is None else readout_step
        if not 1 <= steps <= self.config.unroll_steps:
            raise ValueError(
                f"readout_step must be in [1, {self.config.unroll_steps}], got {steps}"
            )
        keys, values = self.vision_forward(pixels)
        keys_aug = self.augment(keys)
        values_aug = self.augment(values)
        state = self.initial_state(pixels.shape[0])
        trace: list[list[AttentionRead]] = []
        for _ in range(steps):
            queries = self.make_queries(state)
            read = attend_heads(queries, keys_aug, values_aug)
            per_head = [
                AttentionRead(
                    read.query[:, h],
                    read.logits_map[:, h],
                    read.attention_map[:, h],
                    read.answer[:, h],
                )
                for h in range(self.config.num_heads)
            ]
            if keep_trace:
                trace.append(per_head)
            state = self.controller_step(state, per_head)
        return state.previous_logits, trace

    def forward(
        self, pixels: torch.Tensor, readout_step: int | None = None
    ) -> torch.Tensor:
        """Classify a pixel batch; logits decoded at `readout_step`.

        Unrolling with readout_step=j computes exactly the same prefix as a
        j-step model, so forward(k, readout_step=j) == forward(j).
        """
        logits, _ = self._unroll(pixels, readout_step, keep_trace=False)
        return logits

    def forward_with_trace(
        self, pixels: torch.Tensor, readout_step: int | None = None
    ) -> tuple[torch.Tensor, list[list[AttentionRead]]]:
        """Like forward, but also return per-step, per-head attention reads."""
        return self._unroll(pixels, readout_step, keep_trace=True)


def make_model(config: ModelConfig, seed: int = 0) -> S3TA:
    """Build a model with reproducible random initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return S3TA(config)


def parameter_count(config: ModelConfig) -> int:
    """Total scalar learnable parameters; independent of unroll_steps."""
    model = make_model(config, seed=0)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# loss and input gradients
# ---------------------------------------------------------------------------


def smoothed_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0
) -> torch.Tensor:
    """Mean cross-entropy against label-smoothed targets.

    The target puts 1-smoothing on the true class and spreads `smoothing`
    uniformly over all classes.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    log_probs = torch.log_softmax(logits, dim=-1)
    true_term = log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    uniform_term = log_probs.mean(dim=-1)  # (smoothing/K) * sum == smoothing * mean
    loss = -(1.0 - smoothing) * true_term - smoothing * uniform_term
    return loss.mean()


def per_example_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Unreduced cross-entropy, one value per image."""
    log_probs = torch.log_softmax(logits, dim=-1)
    return -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)


def input_gradient(
    model: S3TA,
    pixels: torch.Tensor,
    labels: torch.Tensor,
    smoothing: float = 0.0,
    readout_step: int | None = None,
) -> torch.Tensor:
    """Exact gradient of the mean smoothed cross-entropy w.r.t. the pixels."""
    if not pixels.is_floating_point():
        raise RuntimeError("input gradient requires floating-point pixels")
    pixels = pixels.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model(pixels, readout_step=readout_step)
        scalar = smoothed_cross_entropy(logits, labels, smoothing)
        (grad,) = torch.autograd.grad(scalar, pixels)
    return grad
