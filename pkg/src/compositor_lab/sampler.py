"""Deterministic strided reverse diffusion, early mask extraction and diverse sampling."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .masks import BBox
from .model import (CompositorNet, NoiseSchedule, as_net, denoise, make_position_mask, object_conditioning,
                    sprite_tensor, uses_multiscale)
from .training import to_signed

DEFAULT_STEPS = 50
DEFAULT_N = 5
MASK_THRESHOLD = 0.5


class UntrainedCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRequest:
    background: np.ndarray  # (H, W, 3) in [0, 1]
    sprite: np.ndarray  # (S, S, 4) in [0, 1]
    bbox: BBox | None = None
    steps: int = DEFAULT_STEPS
    seed: int = 0
    mask_extract_step: int | None = None
    record_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.mask_extract_step is not None and not 1 <= self.mask_extract_step <= self.steps:
            raise ValueError(f"mask_extract_step {self.mask_extract_step} outside [1, {self.steps}]")
        bg = np.asarray(self.background)
        if bg.ndim != 3 or bg.shape[2] != 3:
            raise ValueError(f"background must be (H, W, 3), got {bg.shape}")
        sp = np.asarray(self.sprite)
        if sp.ndim != 3 or sp.shape[2] != 4:
            raise ValueError(f"sprite must be (S, S, 4), got {sp.shape}")


@dataclass
class CompositeResult:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    predicted_mask: np.ndarray  # (H, W) bool
    seed: int
    steps_run: int
    mask_step: int
    mask_trajectory: list[tuple[int, np.ndarray]] | None = None
    timings: dict = field(default_factory=dict)


def timestep_sequence(steps: int, T: int) -> np.ndarray:
    """Uniformly strided timesteps, descending: ``(steps-1)*stride, ..., stride, 0``."""
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    return (np.arange(steps) * (T // steps))[::-1].copy()


def binarize(logits: torch.Tensor) -> np.ndarray:
    """sigmoid(logits) > 0.5, strictly; zero logits map to 0."""
    return (torch.sigmoid(logits) > MASK_THRESHOLD).squeeze(1).cpu().numpy()


def initial_noise(seed: int, shape: tuple[int, int, int]) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def check_checkpoint(net: CompositorNet, bbox_mode: bool, allow_untrained: bool) -> None:
    tag = getattr(net, "stage_tag", "init")
    if allow_untrained:
        return
    if tag == "init":
        raise UntrainedCheckpointError("checkpoint is untrained (stage 'init')")
    if bbox_mode and tag not in ("S4", "S5", "S6"):
        raise UntrainedCheckpointError(f"bbox conditioning needs a stage S4 or later checkpoint, got {tag}")


@torch.no_grad()
def ddim_loop(net: CompositorNet, x: torch.Tensor, pmask: torch.Tensor, background: torch.Tensor,
              cond: torch.Tensor, timesteps: Sequence[int], stop_after: int | None = None,
              on_step=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic (eta = 0) updates over ``timesteps``; returns (x0_hat, last mask logits)."""
    ab = NoiseSchedule(net.betas).alpha_bar
    n = len(timesteps) if stop_after is None else stop_after
    x0_hat = x
    logits = None
    for i in range(n):
        t = int(timesteps[i])
        out = denoise(net, x, t, pmask, background, cond)
        logits = out.mask_logits
        a_t = float(ab[t])
        a_prev = float(ab[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
        x0_hat = ((x - (1 - a_t) ** 0.5 * out.eps_hat) / a_t ** 0.5).clamp(-1, 1)
        x = a_prev ** 0.5 * x0_hat + (1 - a_prev) ** 0.5 * out.eps_hat
        if on_step is not None:
            on_step(i + 1, logits)
    return x0_hat, logits


def sample_batch(requests: Sequence[SampleRequest], model, allow_untrained: bool = False) -> list[CompositeResult]:
    """Run several requests (same step count and canvas) through one batched sampler."""
    if not requests:
        return []
    net = as_net(model)
    net.eval()
    steps = {r.steps for r in requests}
    if len(steps) != 1:
        raise ValueError("batched requests must share the step count")
    steps = steps.pop()
    shape = requests[0].background.shape
    if any(r.background.shape != shape for r in requests):
        raise ValueError("batched requests must share the canvas size")
    check_checkpoint(net, any(r.bbox is not None for r in requests), allow_untrained)
    h, w = shape[:2]
    dtype = next(net.parameters()).dtype
    t0 = time.perf_counter()
    background = to_signed(np.stack([r.background for r in requests])).to(dtype)
    pmask = torch.from_numpy(np.stack([make_position_mask(r.bbox, (h, w)) for r in requests]))[:, None].to(dtype)
    x = torch.from_numpy(np.stack([initial_noise(r.seed, (3, h, w)) for r in requests])).to(dtype)
    with torch.no_grad():
        cond = object_conditioning(net, sprite_tensor(np.stack([r.sprite for r in requests]), dtype),
                                   uses_multiscale(net.stage_tag))
    timesteps = timestep_sequence(steps, net.T)
    stop = max(r.mask_extract_step or steps for r in requests)
    want_traj = any(r.record_trajectory for r in requests)
    masks_at: dict[int, np.ndarray] = {}

    def on_step(k, logits):
        if want_traj or any(r.mask_extract_step == k for r in requests):
            masks_at[k] = binarize(logits)

    x0_hat, logits = ddim_loop(net, x, pmask, background, cond, timesteps, stop_after=stop, on_step=on_step)
    masks_at[stop] = binarize(logits)
    elapsed = time.perf_counter() - t0
    images = ((x0_hat.to(torch.float32) + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
    results = []
    for j, r in enumerate(requests):
        k = r.mask_extract_step or steps
        traj = [(s, masks_at[s][j]) for s in sorted(masks_at) if s <= k] if r.record_trajectory else None
        results.append(CompositeResult(images[j], masks_at[k][j], r.seed, stop, k, traj,
                                       {"seconds": elapsed / len(requests)}))
    return results


def sample_composite(req: SampleRequest, model, allow_untrained: bool = False) -> CompositeResult:
    """Full reverse pass (or ``mask_extract_step`` steps) for one request."""
    return sample_batch([req], model, allow_untrained)[0]


def extract_mask_early(req: SampleRequest, model, k: int | None = None, allow_untrained: bool = False) -> np.ndarray:
    """Run only ``k`` sampler steps and return the thresholded mask."""
    k = req.mask_extract_step if k is None else k
    if k is None or k < 1:
        raise ValueError("mask extraction step must be >= 1")
    if k > req.steps:
        raise ValueError(f"mask extraction step {k} exceeds steps {req.steps}")
    return sample_composite(replace(req, mask_extract_step=k), model, allow_untrained).predicted_mask


def diverse_requests(req: SampleRequest, n: int = DEFAULT_N) -> list[SampleRequest]:
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    return [replace(req, seed=req.seed + i) for i in range(n)]


def sample_diverse(req: SampleRequest, model, n: int = DEFAULT_N, allow_untrained: bool = False) -> list[CompositeResult]:
    """``n`` samples with seeds ``seed + i``, batched."""
    return sample_batch(diverse_requests(req, n), model, allow_untrained)


@torch.no_grad()
def refine_image(model, image: np.ndarray, strength: float, steps: int = 10, seed: int = 0) -> np.ndarray:
    """Noise ``image`` to ``strength * T`` and denoise back with an empty mask and null object tokens."""
    net = as_net(model)
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength {strength} outside (0, 1]")
    dtype = next(net.parameters()).dtype
    h, w = image.shape[:2]
    x0 = to_signed(image[None]).to(dtype)
    t_start = max(0, int(round(strength * net.T)) - 1)
    steps = max(1, min(steps, t_start + 1))
    timesteps = np.linspace(t_start, 0, steps).round().astype(np.int64)
    ab = float(NoiseSchedule(net.betas).alpha_bar[t_start])
    noise = torch.from_numpy(initial_noise(seed, (3, h, w)))[None].to(dtype)
    x = ab ** 0.5 * x0 + (1 - ab) ** 0.5 * noise
    pmask = torch.full((1, 1, h, w), -1.0, dtype=dtype)
    tokens = torch.zeros(1, net.cfg.tokens, net.cfg.token_dim, dtype=dtype)
    x0_hat, _ = ddim_loop(net, x, pmask, x0, tokens, timesteps)
    return ((x0_hat[0] + 1) / 2).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
