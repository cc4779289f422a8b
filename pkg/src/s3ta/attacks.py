"""L-infinity constrained attack engines.

All attacks share the same feasibility contract: every iterate (including
the random start and the returned example) lies inside the epsilon-ball
around the original pixels intersected with the [0,1] box. The attacked
model is any callable mapping a pixel batch (B, H, W, C) to logits
(B, num_classes); gradients are taken through that callable where needed,
while SPSA uses forward evaluations only.

Randomness discipline: every per-image stream is derived from
(rng_seed, image_index, restart_index), so attacks on different images or
restarts are independent and reproducible regardless of batching. Target
classes for targeted-random mode derive from (rng_seed, image_index) only,
so restarts share the attack goal and differ in their search.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ImageBatch, per_example_cross_entropy

ModelFn = Callable[[torch.Tensor], torch.Tensor]

MODES = ("targeted-random", "targeted-fixed", "untargeted")

# stream tags keeping noise and target draws on disjoint substreams
_NOISE_TAG = 0x5EED
_TARGET_TAG = 0x7A26


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    """Everything that defines one perturbation search.

    `lr_schedule` applies to the adam optimizer only: entries are
    (step_threshold, lr) with strictly increasing thresholds; the step uses
    the lr of the first entry whose threshold exceeds the step index, or the
    last lr beyond the final threshold.
    """

    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 7
    mode: str = "targeted-random"
    target_class: int | None = None
    random_init_prob: float = 0.8
    optimizer: str = "signed-gradient"
    lr_schedule: tuple[tuple[int, float], ...] = ()
    restarts: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.num_steps < 0:
            raise ValueError("num_steps must be >= 0")
        if self.optimizer not in ("signed-gradient", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "signed-gradient" and self.num_steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive for a signed-gradient attack")
        if self.optimizer == "adam":
            if not self.lr_schedule:
                raise ValueError("adam optimizer needs a non-empty lr_schedule")
            thresholds = [t for t, _ in self.lr_schedule]
            if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
                raise ValueError("lr_schedule thresholds must be strictly increasing")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted-fixed" and self.target_class is None:
            raise ValueError("targeted-fixed mode needs target_class")
        if not 0.0 <= self.random_init_prob <= 1.0:
            raise ValueError("random_init_prob must be in [0, 1]")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @staticmethod
    def reference_pgd(num_steps: int, epsilon: float = 16 / 255) -> "AttackConfig":
        """Targeted-random signed-gradient protocol: step 1/255 for long
        attacks, 1.6/255 at 10 steps, random init probability 0.8."""
        step = 1.6 / 255 if num_steps == 10 else 1 / 255
        return AttackConfig(
            epsilon=epsilon,
            step_size=step,
            num_steps=num_steps,
            mode="targeted-random",
            random_init_prob=0.8,
        )

    @staticmethod
    def reference_adam(epsilon: float = 16 / 255) -> "AttackConfig":
        """250-step Adam attack: lr 0.1 until step 100, 0.01 until 200,
        0.001 after."""
        return AttackConfig(
            epsilon=epsilon,
            step_size=1 / 255,
            num_steps=250,
            mode="targeted-random",
            random_init_prob=0.8,
            optimizer="adam",
            lr_schedule=((100, 0.1), (200, 0.01), (250, 0.001)),
        )


@dataclass(frozen=True)
class SpsaConfig:
    """Gradient-free attack parameters.

    num_samples is the number of random +-1 direction draws per iteration;
    the objective is evaluated twice per draw.
    """

    num_samples: int = 128
    perturbation_size: float = 0.01
    num_iterations: int = 10
    step_size: float = 1 / 255
    epsilon: float = 8 / 255
    rng_seed: int = 0
    random_init_prob: float = 0.0

    def __post_init__(self):
        if self.num_samples <= 0 or self.num_samples % 2:
            raise ValueError("num_samples must be even and positive")
        if self.perturbation_size <= 0:
            raise ValueError("perturbation_size must be positive")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be >= 0")
        if not 0.0 <= self.random_init_prob <= 1.0:
            raise ValueError("random_init_prob must be in [0, 1]")

    @staticmethod
    def reference_eval(epsilon: float = 16 / 255) -> "SpsaConfig":
        """Evaluation protocol: 4096 samples per iteration, 100 iterations."""
        return SpsaConfig(num_samples=4096, num_iterations=100, epsilon=epsilon)


@dataclass
class AttackResult:
    """Outcome of one attack on a batch.

    adversarial pixels satisfy the ball and box constraints exactly.
    loss_trace holds the batch-mean attack objective at every iterate
    (length num_steps + 1); its last entry is the reported final loss.
    """

    adversarial: torch.Tensor
    success: torch.Tensor
    final_prediction: torch.Tensor
    loss_trace: list[float]
    restarts_used: int
    targets: torch.Tensor | None = None
    final_loss: torch.Tensor | None = None  # per-image objective at the final iterate


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def project_linf(x: torch.Tensor, x0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp x into the epsilon-ball around x0 intersected with [0,1].

    Idempotent, and the identity on already-feasible points.
    """
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x0.shape)}")
    return torch.clamp(torch.clamp(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def draw_targets(
    labels: torch.Tensor,
    num_classes: int,
    seed: int,
    image_indices: Sequence[int],
) -> torch.Tensor:
    """Uniform draw over the classes other than each image's true label."""
    if num_classes < 2:
        raise ValueError("targeted attacks need at least two classes")
    targets = torch.empty_like(labels)
    for i, idx in enumerate(image_indices):
        rng = _stream(seed, _TARGET_TAG, idx)
        t = int(rng.integers(num_classes - 1))
        if t >= int(labels[i]):
            t += 1
        targets[i] = t
    return targets


def _resolve_goal(
    batch: ImageBatch, cfg_mode: str, target_class: int | None,
    seed: int, num_classes: int, image_indices: Sequence[int],
) -> torch.Tensor | None:
    if cfg_mode == "untargeted":
        return None
    if cfg_mode == "targeted-fixed":
        return torch.full_like(batch.labels, int(target_class))
    return draw_targets(batch.labels, num_classes, seed, image_indices)


def _objective(
    logits: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor | None
) -> torch.Tensor:
    """Per-image attack objective, to be ascended.

    Untargeted: cross-entropy on the true label. Targeted: negative
    cross-entropy on the target class.
    """
    if targets is None:
        return per_example_cross_entropy(logits, labels)
    return -per_example_cross_entropy(logits, targets)


def _objective_and_grad(
    model: ModelFn, x: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        per_image = _objective(logits, labels, targets)
        (grad,) = torch.autograd.grad(per_image.sum(), x)
    return per_image.detach(), logits.detach(), grad


def _final_eval(
    model: ModelFn, x: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        logits = model(x)
        per_image = _objective(logits, labels, targets)
    return per_image, logits.argmax(dim=-1)


def _success(
    predictions: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor | None
) -> torch.Tensor:
    if targets is None:
        return predictions != labels
    return predictions == targets


def _random_start(
    x0: torch.Tensor,
    epsilon: float,
    init_prob: float,
    seed: int,
    restart: int,
    image_indices: Sequence[int],
) -> torch.Tensor:
    """Per-image Bernoulli(init_prob) choice of a uniform point in the ball."""
    x = x0.detach().clone()
    if init_prob == 0.0:
        return x
    for i, idx in enumerate(image_indices):
        rng = _stream(seed, _NOISE_TAG, idx, restart)
        if rng.random() < init_prob:
            noise = rng.uniform(-epsilon, epsilon, size=tuple(x0.shape[1:]))
            x[i] = x0[i] + torch.from_numpy(noise).to(x0.dtype)
    return project_linf(x, x0, epsilon)


def _default_indices(batch: ImageBatch, image_indices) -> list[int]:
    if image_indices is None:
        return list(range(len(batch)))
    if len(image_indices) != len(batch):
        raise ValueError("image_indices must match the batch size")
    return [int(i) for i in image_indices]


# ---------------------------------------------------------------------------
# gradient-based attacks
# ---------------------------------------------------------------------------


def _iterative_attack(
    model: ModelFn,
    batch: ImageBatch,
    cfg: AttackConfig,
    num_classes: int,
    restart: int,
    image_indices,
    on_step,
) -> AttackResult:
    indices = _default_indices(batch, image_indices)
    x0 = batch.pixels.detach()
    labels = batch.labels
    targets = _resolve_goal(
        batch, cfg.mode, cfg.target_class, cfg.rng_seed, num_classes, indices
    )
    x = _random_start(
        x0, cfg.epsilon, cfg.random_init_prob, cfg.rng_seed, restart, indices
    )
    if on_step is not None:
        on_step(0, x)

    adam_m = torch.zeros_like(x) if cfg.optimizer == "adam" else None
    adam_v = torch.zeros_like(x) if cfg.optimizer == "adam" else None
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    trace: list[float] = []
    for step in range(cfg.num_steps):
        per_image, _, grad = _objective_and_grad(model, x, labels, targets)
        trace.append(float(per_image.mean()))
        if cfg.optimizer == "signed-gradient":
            x = x + cfg.step_size * torch.sign(grad)
        else:
            adam_m = beta1 * adam_m + (1 - beta1) * grad
            adam_v = beta2 * adam_v + (1 - beta2) * grad * grad
            m_hat = adam_m / (1 - beta1 ** (step + 1))
            v_hat = adam_v / (1 - beta2 ** (step + 1))
            lr = schedule_lr(cfg.lr_schedule, step)
            x = x + lr * m_hat / (v_hat.sqrt() + adam_eps)
        x = project_linf(x, x0, cfg.epsilon)
        if on_step is not None:
            on_step(step + 1, x)

    final_obj, predictions = _final_eval(model, x, labels, targets)
    trace.append(float(final_obj.mean()))
    return AttackResult(
        adversarial=x,
        success=_success(predictions, labels, targets),
        final_prediction=predictions,
        loss_trace=trace,
        restarts_used=1,
        targets=targets,
        final_loss=final_obj,
    )


def schedule_lr(schedule: tuple[tuple[int, float], ...], step: int) -> float:
    """Learning rate for `step` under a (threshold, lr) annealing schedule."""
    for threshold, lr in schedule:
        if step < threshold:
            return lr
    return schedule[-1][1]


def pgd_attack(
    model: ModelFn,
    batch: ImageBatch,
    cfg: AttackConfig,
    num_classes: int | None = None,
    *,
    restart: int = 0,
    image_indices=None,
    on_step=None,
) -> AttackResult:
    """Iterative signed-gradient attack inside the epsilon-ball.

    Each step moves every coordinate by exactly +-step_size along the sign
    of the input gradient of the attack objective, then projects back onto
    the feasible set.
    """
    if cfg.optimizer != "signed-gradient":
        raise ValueError("pgd_attack requires the signed-gradient optimizer")
    nc = num_classes if num_classes is not None else _infer_classes(model, batch)
    return _iterative_attack(model, batch, cfg, nc, restart, image_indices, on_step)


def adam_pgd(
    model: ModelFn,
    batch: ImageBatch,
    cfg: AttackConfig,
    num_classes: int | None = None,
    *,
    restart: int = 0,
    image_indices=None,
    on_step=None,
) -> AttackResult:
    """Projected attack with Adam moment estimates on the input gradient."""
    if cfg.optimizer != "adam":
        raise ValueError("adam_pgd requires the adam optimizer")
    nc = num_classes if num_classes is not None else _infer_classes(model, batch)
    return _iterative_attack(model, batch, cfg, nc, restart, image_indices, on_step)


def _infer_classes(model: ModelFn, batch: ImageBatch) -> int:
    with torch.no_grad():
        return int(model(batch.pixels[:1]).shape[-1])


# ---------------------------------------------------------------------------
# SPSA
# ---------------------------------------------------------------------------


def spsa_gradient(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    cfg: SpsaConfig,
    rng: np.random.Generator | None = None,
    eval_chunk: int = 512,
) -> torch.Tensor:
    """Two-sided finite-difference gradient estimate along random +-1 draws.

    `f` maps a stack of inputs (M, *x.shape) to M scalar objective values;
    it is evaluated on 2 * num_samples points in total and no analytic
    gradients are used. Each draw v contributes
    (f(x + delta v) - f(x - delta v)) / (2 delta) * v, with the division by
    the +-1 entries realized as multiplication; the estimate is the average
    over all draws.
    """
    if cfg.perturbation_size <= 0:
        raise ValueError("perturbation_size must be positive")
    if rng is None:
        rng = _stream(cfg.rng_seed, _NOISE_TAG)
    n = cfg.num_samples
    delta = cfg.perturbation_size
    estimate = torch.zeros_like(x)
    done = 0
    while done < n:
        m = min(eval_chunk // 2 or 1, n - done)
        v_np = rng.integers(0, 2, size=(m, *x.shape)) * 2 - 1
        v = torch.from_numpy(v_np).to(x.dtype)
        with torch.no_grad():
            f_plus = f(x.unsqueeze(0) + delta * v)
            f_minus = f(x.unsqueeze(0) - delta * v)
        diff = (f_plus - f_minus).reshape(m, *([1] * x.dim())) / (2 * delta)
        estimate += (diff * v).sum(dim=0)
        done += m
    return estimate / n


def spsa_attack(
    model: ModelFn,
    batch: ImageBatch,
    cfg: SpsaConfig,
    mode: str = "untargeted",
    target_class: int | None = None,
    num_classes: int | None = None,
    *,
    restart: int = 0,
    image_indices=None,
    on_step=None,
    eval_chunk: int = 512,
) -> AttackResult:
    """Projected signed-step attack driven by SPSA gradient estimates.

    Same feasibility and success contracts as pgd_attack; the model is only
    ever queried through forward evaluations.
    """
    if mode not in MODES:
        raise ValueError(f"unknown attack mode {mode!r}")
    indices = _default_indices(batch, image_indices)
    nc = num_classes if num_classes is not None else _infer_classes(model, batch)
    x0 = batch.pixels.detach()
    labels = batch.labels
    targets = _resolve_goal(batch, mode, target_class, cfg.rng_seed, nc, indices)
    x = _random_start(
        x0, cfg.epsilon, cfg.random_init_prob, cfg.rng_seed, restart, indices
    )
    if on_step is not None:
        on_step(0, x)

    per_image_traces = np.zeros((len(batch), cfg.num_iterations + 1))
    for i, idx in enumerate(indices):
        rng = _stream(cfg.rng_seed, _NOISE_TAG, idx, restart, 1)
        label_i = labels[i : i + 1]
        target_i = None if targets is None else targets[i : i + 1]

        def f(stack: torch.Tensor) -> torch.Tensor:
            flat = stack.reshape(-1, *x0.shape[1:])
            logits = model(flat)
            reps = flat.shape[0]
            return _objective(
                logits,
                label_i.expand(reps),
                None if target_i is None else target_i.expand(reps),
            )

        xi = x[i]
        for it in range(cfg.num_iterations):
            with torch.no_grad():
                per_image_traces[i, it] = float(f(xi.unsqueeze(0))[0])
            g = spsa_gradient(f, xi, cfg, rng, eval_chunk)
            xi = project_linf(
                xi + cfg.step_size * torch.sign(g), x0[i], cfg.epsilon
            )
            x[i] = xi
            if on_step is not None:
                # batch-shaped iterate, matching the pgd_attack callback
                on_step(it + 1, x)
        with torch.no_grad():
            per_image_traces[i, cfg.num_iterations] = float(f(xi.unsqueeze(0))[0])
        x[i] = xi

    final_obj, predictions = _final_eval(model, x, labels, targets)
    trace = [float(v) for v in per_image_traces.mean(axis=0)]
    return AttackResult(
        adversarial=x,
        success=_success(predictions, labels, targets),
        final_prediction=predictions,
        loss_trace=trace,
        restarts_used=1,
        targets=targets,
        final_loss=final_obj,
    )


# ---------------------------------------------------------------------------
# restarts
# ---------------------------------------------------------------------------


def multi_restart(
    attack_fn: Callable[..., AttackResult],
    batch: ImageBatch,
    restarts: int,
) -> AttackResult:
    """Fold `restarts` independent runs into a worst-case-per-image result.

    attack_fn(batch, restart=r) must derive its randomness from the restart
    index. An image counts as successfully attacked if any restart succeeds
    and as correctly classified only if every restart leaves the prediction
    correct; the returned example per image is the strongest one found
    (success beats misclassification beats highest final objective).
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    results = [attack_fn(batch, restart=r) for r in range(restarts)]
    merged = results[0]
    if restarts == 1:
        return merged

    batch_size = len(batch)
    adversarial = merged.adversarial.clone()
    success = merged.success.clone()
    predictions = merged.final_prediction.clone()
    final_loss = merged.final_loss.clone()
    for result in results[1:]:
        success |= result.success
        for i in range(batch_size):
            if _stronger(result, merged, i, batch.labels):
                adversarial[i] = result.adversarial[i]
                predictions[i] = result.final_prediction[i]
                final_loss[i] = result.final_loss[i]
        merged = AttackResult(
            adversarial=adversarial,
            success=success,
            final_prediction=predictions,
            loss_trace=merged.loss_trace,
            restarts_used=merged.restarts_used,
            targets=merged.targets,
            final_loss=final_loss,
        )
    best_trace = max((r.loss_trace for r in results), key=lambda t: t[-1])
    merged.loss_trace = list(best_trace)
    merged.restarts_used = restarts
    return merged


def _strength(result: AttackResult, i: int, labels: torch.Tensor) -> tuple:
    success = bool(result.success[i])
    misclassified = bool(result.final_prediction[i] != labels[i])
    return (success, misclassified, float(result.final_loss[i]))


def _stronger(
    candidate: AttackResult, incumbent: AttackResult, i: int, labels: torch.Tensor
) -> bool:
    return _strength(candidate, i, labels) > _strength(incumbent, i, labels)


def run_attack(
    model: ModelFn,
    batch: ImageBatch,
    cfg: AttackConfig,
    num_classes: int | None = None,
    *,
    image_indices=None,
) -> AttackResult:
    """Dispatch on cfg.optimizer and cfg.restarts."""
    single = pgd_attack if cfg.optimizer == "signed-gradient" else adam_pgd

    def attempt(b: ImageBatch, restart: int = 0) -> AttackResult:
        return single(
            model, b, cfg, num_classes, restart=restart, image_indices=image_indices
        )

    if cfg.restarts == 1:
        return attempt(batch)
    return multi_restart(attempt, batch, cfg.restarts)
