"""Losses, bbox perturbation, staged training with per-group freezing, and merging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import GROUPS, STAGES, StageCheckpoint, group_of, save_checkpoint
from .datagen import augment_object
from .masks import BBox
from .model import CompositorNet, NoiseSchedule, denoise, make_position_mask, object_conditioning
from .scene_synth import SceneRejected, SceneSample, composite_sprite, derive_seed

log = logging.getLogger(__name__)

DICE_LAMBDA = 0.01
DICE_EPS = 1e-6
BBOX_SCALE = 0.1
BBOX_SHIFT = 10
GRAD_CLIP = 1.0
DEFAULT_LR = {"unet": 4e-5, "encoder": 1e-4, "adaptor": 1e-4, "mask_head": 1e-3}
DATA_MODES = ("standard", "paired_views")
PMASK_POLICIES = ("always_empty", "fifty_fifty")
MASK_TARGETS = ("object", "object_effects")
LR_DECAYS = ("constant", "cosine")
COSINE_FLOOR = 0.1  # final lr as a fraction of the base lr

# Which checkpoint a stage may start from.
PREDECESSORS = {
    "S1": ("init",),
    "S2": ("init", "S1"),
    "S3": ("S3",),  # the merged checkpoint
    "S4": ("S3",),
    "S5": ("S4",),
    "S6": ("S5",),
}


class IncompatibleStageError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage_tag: str
    trainable_groups: frozenset
    data_mode: str = "standard"
    pmask_policy: str = "always_empty"
    uses_multiscale: bool = False
    steps: int = 2000
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    batch_size: int = 16
    encoder_steps: int = 0  # paired-view encoder fine-tuning before the main phase
    augment_strength: float = 0.0
    paired_strength: float = 0.5
    mask_target: str = "object"
    ckpt_every: int = 0
    lr_decay: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))
        if self.stage_tag not in STAGES[1:]:
            raise ValueError(f"unknown stage {self.stage_tag!r}")
        unknown = self.trainable_groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.stage_tag == "S6" and self.trainable_groups != {"mask_head"}:
            raise ValueError("S6 trains only the mask head")
        if self.stage_tag != "S6" and "mask_head" in self.trainable_groups:
            raise ValueError(f"{self.stage_tag} must not train the mask head")
        if self.stage_tag == "S5" and not self.uses_multiscale:
            raise ValueError("S5 requires multiscale conditioning")
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"unknown data mode {self.data_mode!r}")
        if self.pmask_policy not in PMASK_POLICIES:
            raise ValueError(f"unknown position-mask policy {self.pmask_policy!r}")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"unknown lr decay {self.lr_decay!r}")
        if self.mask_target not in MASK_TARGETS:
            raise ValueError(f"unknown mask target {self.mask_target!r}")
        if self.steps < 0 or self.encoder_steps < 0 or self.batch_size < 1:
            raise ValueError("steps and batch size must be non-negative / positive")
        if self.encoder_steps and self.data_mode != "paired_views":
            raise ValueError("encoder fine-tuning needs paired views")

    @property
    def is_mask_stage(self) -> bool:
        return self.stage_tag == "S6"


def default_plans(steps: int = 2000, batch_size: int = 16, encoder_steps: int | None = None) -> list[StagePlan]:
    enc = steps // 4 if encoder_steps is None else encoder_steps
    ug = frozenset({"unet"})
    return [
        StagePlan("S1", frozenset({"unet", "adaptor"}), steps=steps, batch_size=batch_size),
        StagePlan("S2", frozenset({"unet", "adaptor", "encoder"}), data_mode="paired_views", steps=steps,
                  batch_size=batch_size, encoder_steps=enc),
        StagePlan("S3", ug, steps=steps, batch_size=batch_size),
        StagePlan("S4", ug, pmask_policy="fifty_fifty", steps=steps, batch_size=batch_size),
        StagePlan("S5", ug, pmask_policy="fifty_fifty", uses_multiscale=True, steps=steps, batch_size=batch_size),
        StagePlan("S6", frozenset({"mask_head"}), pmask_policy="fifty_fifty", uses_multiscale=True, steps=steps,
                  batch_size=batch_size),
    ]


# ---------------------------------------------------------------- losses


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def dice_loss(gt, pred) -> torch.Tensor:
    """1 - 2 sum(gt * pred) / (sum(gt) + sum(pred) + 1e-6) over the whole raster."""
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    gt = gt.to(pred.dtype)
    return 1 - 2 * (gt * pred).sum() / (gt.sum() + pred.sum() + DICE_EPS)


def batched_dice(gt: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sample Dice losses."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    dims = tuple(range(1, pred.ndim))
    gt = gt.to(pred.dtype)
    per = 1 - 2 * (gt * pred).sum(dims) / (gt.sum(dims) + pred.sum(dims) + DICE_EPS)
    return per.mean()


@dataclass
class Batch:
    x0: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    background: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    pmask: torch.Tensor  # (B, 1, H, W)
    sprite: torch.Tensor  # (B, 4, S, S) in [-1, 1]
    gt_mask: torch.Tensor  # (B, 1, H, W) in {0, 1}
    t: torch.Tensor  # (B,) long
    noise: torch.Tensor  # (B, 3, H, W)

    def to(self, dtype) -> "Batch":
        return Batch(*(v if v.dtype == torch.long else v.to(dtype)
                       for v in (self.x0, self.background, self.pmask, self.sprite, self.gt_mask,
                                 self.t, self.noise)))


@dataclass
class LossParts:
    total: torch.Tensor
    L_d: torch.Tensor
    L_m: torch.Tensor


def compute_losses(batch: Batch, net: CompositorNet, plan: StagePlan) -> LossParts:
    sched = NoiseSchedule(net.betas)
    x_t = sched.q_sample(batch.x0, batch.t, batch.noise)
    cond = object_conditioning(net, batch.sprite, plan.uses_multiscale)
    out = denoise(net, x_t, batch.t, batch.pmask, batch.background, cond)
    L_d = diffusion_loss(batch.noise, out.eps_hat)
    L_m = batched_dice(batch.gt_mask, torch.sigmoid(out.mask_logits))
    total = DICE_LAMBDA * L_m if plan.is_mask_stage else L_d
    return LossParts(total, L_d, L_m)


def total_loss(batch: Batch, net: CompositorNet, plan: StagePlan) -> torch.Tensor:
    """L_d for S1-S5, lambda * Dice for S6; x_t uses ``batch.t`` and ``batch.noise``."""
    return compute_losses(batch, net, plan).total


# ---------------------------------------------------------------- bbox perturbation


@dataclass(frozen=True)
class Perturbation:
    fw: float
    fh: float
    dx: int
    dy: int


IDENTITY_PERTURBATION = Perturbation(1.0, 1.0, 0, 0)


def sample_perturbation(rng: np.random.Generator, scale: float = BBOX_SCALE, shift: int = BBOX_SHIFT) -> Perturbation:
    fw, fh = rng.uniform(1 - scale, 1 + scale, size=2)
    dx, dy = rng.integers(-shift, shift + 1, size=2)
    return Perturbation(float(fw), float(fh), int(dx), int(dy))


def apply_perturbation(gt, p: Perturbation, canvas: tuple[int, int]) -> BBox:
    """Rescale about the centre, shift, then clamp into ``canvas`` = (width, height)."""
    gt = BBox.coerce(gt)
    W, H = canvas

    def axis(lo, hi, f, d, limit):
        n = max(1, int(math.floor((hi - lo) * f + 0.5)))
        a = int(math.floor((lo + hi) / 2 + d - n / 2 + 0.5))
        b = a + n
        a = min(max(a, 0), limit - 1)
        b = min(max(b, a + 1), limit)
        return a, b

    x0, x1 = axis(gt.x0, gt.x1, p.fw, p.dx, W)
    y0, y1 = axis(gt.y0, gt.y1, p.fh, p.dy, H)
    return BBox(x0, y0, x1, y1)


def perturb_bbox(gt, canvas: tuple[int, int], seed: int, scale: float = BBOX_SCALE, shift: int = BBOX_SHIFT) -> BBox:
    rng = np.random.default_rng(seed)
    return apply_perturbation(gt, sample_perturbation(rng, scale, shift), canvas)


# ---------------------------------------------------------------- data


def to_signed(img: np.ndarray) -> torch.Tensor:
    """(..., H, W, C) in [0, 1] -> (..., C, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    return x.movedim(-1, -3) * 2 - 1


class TrainData:
    """In-memory training set with seeded batch assembly."""

    def __init__(self, samples: Sequence[SceneSample]):
        if not samples:
            raise ValueError("empty training set")
        self.samples = list(samples)
        self.composite = np.stack([s.composite for s in samples]).astype(np.float32)
        self.background = np.stack([s.background for s in samples]).astype(np.float32)
        self.sprite = np.stack([s.object_image for s in samples]).astype(np.float32)
        self.object_mask = np.stack([s.masks.object for s in samples])
        self.effects_mask = np.stack([s.masks.object | s.masks.shadow | s.masks.reflection for s in samples])
        self.height, self.width = self.composite.shape[1:3]

    def __len__(self) -> int:
        return len(self.samples)

    def _paired(self, i: int, seed: int, strength: float, mask_target: str):
        """Condition on augmentation A while the target composite holds augmentation B."""
        s = self.samples[i]
        view_a = augment_object(s.object_image, derive_seed(seed, 1), strength)
        view_b = augment_object(s.object_image, derive_seed(seed, 2), strength)
        spec = s.spec
        try:
            if not (view_b[..., 3] > 0.5).any():
                raise SceneRejected("empty view")
            comp, masks, _ = composite_sprite(s.background, view_b, spec.object_anchor, spec.ground_line,
                                              spec.has_water, spec.light_direction, spec.seed)
        except SceneRejected:
            return view_a, self.composite[i], self._target(i, mask_target), s.bbox
        target = masks.object if mask_target == "object" else masks.object | masks.shadow | masks.reflection
        return view_a, comp, target, BBox.from_mask(masks.object)

    def _target(self, i: int, mask_target: str) -> np.ndarray:
        return self.object_mask[i] if mask_target == "object" else self.effects_mask[i]

    def batch(self, plan: StagePlan, seed: int, T: int, paired: bool | None = None) -> Batch:
        rng = np.random.default_rng(seed)
        B = plan.batch_size
        idx = rng.integers(0, len(self), size=B)
        paired = plan.data_mode == "paired_views" if paired is None else paired
        sprites, comps, targets, boxes = [], [], [], []
        for j, i in enumerate(idx):
            sub = derive_seed(seed, 101, j)
            if paired:
                spr, comp, tgt, box = self._paired(int(i), sub, plan.paired_strength, plan.mask_target)
            else:
                spr = self.sprite[i]
                if plan.augment_strength > 0:
                    spr = augment_object(spr, sub, plan.augment_strength)
                comp, tgt, box = self.composite[i], self._target(int(i), plan.mask_target), self.samples[i].bbox
            sprites.append(spr)
            comps.append(comp)
            targets.append(tgt)
            boxes.append(box)
        pmasks = []
        coins = rng.random(B)
        for j in range(B):
            if plan.pmask_policy == "fifty_fifty" and coins[j] < 0.5:
                box = apply_perturbation(boxes[j], sample_perturbation(rng), (self.width, self.height))
                pmasks.append(make_position_mask(box, (self.height, self.width)))
            else:
                pmasks.append(make_position_mask(None, (self.height, self.width)))
        t = rng.integers(0, T, size=B)
        noise = rng.standard_normal((B, 3, self.height, self.width)).astype(np.float32)
        return Batch(
            x0=to_signed(np.stack(comps)),
            background=to_signed(self.background[idx]),
            pmask=torch.from_numpy(np.stack(pmasks))[:, None],
            sprite=to_signed(np.stack(sprites)),
            gt_mask=torch.from_numpy(np.stack(targets).astype(np.float32))[:, None],
            t=torch.from_numpy(t).long(),
            noise=torch.from_numpy(noise),
        )


def empty_fraction(policy: str, n: int, seed: int) -> float:
    """Fraction of empty position masks the policy draws over ``n`` samples (coin draws only)."""
    rng = np.random.default_rng(seed)
    if policy == "always_empty":
        return 1.0
    return float((rng.random(n) >= 0.5).mean())


# ---------------------------------------------------------------- training


def check_transition(plan: StagePlan, init: StageCheckpoint) -> None:
    allowed = PREDECESSORS[plan.stage_tag]
    if init.stage_tag not in allowed:
        raise IncompatibleStageError(
            f"stage {plan.stage_tag} cannot start from a {init.stage_tag} checkpoint (expected {allowed})")


def _phases(plan: StagePlan) -> list[tuple[frozenset, int, bool]]:
    """(groups, steps, paired) per phase."""
    if plan.encoder_steps:
        main = plan.trainable_groups - {"encoder"}
        return [(frozenset({"encoder"}), plan.encoder_steps, True), (main, plan.steps, True)]
    return [(plan.trainable_groups, plan.steps, plan.data_mode == "paired_views")]


def _optimizer(net: CompositorNet, groups: frozenset, lrs: dict) -> torch.optim.Optimizer:
    for name, p in net.named_parameters():
        p.requires_grad_(group_of(name) in groups)
    param_groups = [{"params": net.group_parameters(g), "lr": lrs[g], "name": g} for g in GROUPS if g in groups]
    return torch.optim.Adam(param_groups)


def lr_factor(decay: str, k: int, steps: int) -> float:
    """Multiplier on the base lr for update ``k`` (0-based) of a ``steps``-long phase."""
    if decay == "constant" or steps <= 1:
        return 1.0
    return COSINE_FLOOR + (1 - COSINE_FLOOR) * 0.5 * (1 + math.cos(math.pi * k / (steps - 1)))


def _lr_field(opt: torch.optim.Optimizer) -> str:
    return " ".join(f"{g['name']}={g['lr']:g}" for g in opt.param_groups)


def train_stage(
    plan: StagePlan,
    init: StageCheckpoint,
    data: TrainData,
    seed: int = 0,
    out_dir: Path | str | None = None,
    log_every: int = 1,
) -> StageCheckpoint:
    check_transition(plan, init)
    net = CompositorNet.from_checkpoint(init)
    net.train()
    rows = []
    step = 0
    stage_seed = derive_seed(seed, STAGES.index(plan.stage_tag))
    for groups, steps, paired in _phases(plan):
        opt = _optimizer(net, groups, plan.learning_rates)
        trainable = [p for p in net.parameters() if p.requires_grad]
        base = [g["lr"] for g in opt.param_groups]
        for k in range(steps):
            for g, lr in zip(opt.param_groups, base):
                g["lr"] = lr * lr_factor(plan.lr_decay, k, steps)
            batch = data.batch(plan, derive_seed(stage_seed, step), net.T, paired=paired)
            parts = compute_losses(batch, net, plan)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            torch.nn.utils.clip_grad_norm_(trainable, GRAD_CLIP)
            opt.step()
            step += 1
            if step % log_every == 0 or step == 1:
                rows.append((step, plan.stage_tag, parts.L_d.item(), parts.L_m.item(), _lr_field(opt)))
            if out_dir is not None and plan.ckpt_every and step % plan.ckpt_every == 0:
                ckpt = net.to_checkpoint(plan.stage_tag, trainable=plan.trainable_groups)
                save_checkpoint(ckpt, Path(out_dir) / f"ckpt_{plan.stage_tag}_{step}.bin")
    ckpt = net.to_checkpoint(plan.stage_tag, trainable=plan.trainable_groups)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / f"ckpt_{plan.stage_tag}_{step}.bin")
        write_metrics(out / "metrics.csv", rows)
    log.info("finished %s after %d steps", plan.stage_tag, step)
    return ckpt


def write_metrics(path: Path, rows) -> None:
    """Write ``rows`` for one stage, replacing earlier rows of that stage so re-runs are idempotent."""
    header = ["step", "stage", "L_d", "L_m", "lr"]
    stages = {r[1] for r in rows}
    kept = []
    if path.exists():
        with open(path, newline="") as f:
            kept = [r for r in list(csv.reader(f))[1:] if r and r[1] not in stages]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(kept)
        for step, stage, ld, lm, lr in rows:
            w.writerow([step, stage, repr(ld), repr(lm), lr])


def evaluate_loss(net_or_ckpt, data: TrainData, plan: StagePlan, seed: int, batches: int = 4) -> float:
    """Mean training objective on fixed seeded batches (fixed t and noise)."""
    net = net_or_ckpt if isinstance(net_or_ckpt, CompositorNet) else CompositorNet.from_checkpoint(net_or_ckpt)
    with torch.no_grad():
        vals = [float(total_loss(data.batch(plan, derive_seed(seed, 7, b), net.T), net, plan)) for b in range(batches)]
    return float(np.mean(vals))


# ---------------------------------------------------------------- merging


class MergeError(ValueError):
    pass


def merge_checkpoints(a: StageCheckpoint, b: StageCheckpoint, alpha: float) -> StageCheckpoint:
    """alpha * a + (1 - alpha) * b for every parameter, computed in float64."""
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha {alpha} outside [0, 1]")
    if list(a.parameters) != list(b.parameters):
        raise MergeError("parameter namespaces differ")
    if a.T != b.T or not np.array_equal(a.betas, b.betas):
        raise MergeError("noise schedules differ")
    if a.model_config != b.model_config:
        raise MergeError("model configurations differ")
    merged = {}
    for name, pa in a.parameters.items():
        pb = b.parameters[name]
        if pa.shape != pb.shape or pa.dtype != pb.dtype:
            raise MergeError(f"{name}: shape/dtype {pa.shape}/{pa.dtype} vs {pb.shape}/{pb.dtype}")
        merged[name] = (alpha * pa.astype(np.float64) + (1.0 - alpha) * pb.astype(np.float64)).astype(pa.dtype)
    return StageCheckpoint(merged, "S3", a.betas.copy(), {g: False for g in GROUPS}, dict(a.model_config))


# ---------------------------------------------------------------- schedule


def run_schedule(
    plans: Sequence[StagePlan],
    init: StageCheckpoint,
    data: TrainData,
    seed: int = 0,
    alpha: float = 0.25,
    out_dir: Path | str | None = None,
    log_every: int = 1,
    stages: Sequence[str] | None = None,
) -> dict[str, StageCheckpoint]:
    """Run S1..S6 in order.  S3 starts from ``merge(S1, S2, alpha)``; S2 starts from S1."""
    by_tag = {p.stage_tag: p for p in plans}
    wanted = list(stages or [p.stage_tag for p in plans])
    results: dict[str, StageCheckpoint] = {"init": init}
    prev = init
    for tag in STAGES[1:]:
        if tag not in wanted:
            continue
        plan = by_tag[tag]
        if tag == "S3":
            start = merge_checkpoints(results["S1"], results["S2"], alpha)
            results["merged"] = start
            if out_dir is not None:
                save_checkpoint(start, Path(out_dir) / "ckpt_merged.bin")
        else:
            start = prev
        prev = train_stage(plan, start, data, seed=seed, out_dir=out_dir, log_every=log_every)
        results[tag] = prev
        if out_dir is not None:
            save_checkpoint(prev, Path(out_dir) / f"ckpt_{tag}.bin")
    return results


def with_steps(plans: Sequence[StagePlan], **overrides) -> list[StagePlan]:
    return [replace(p, **overrides) for p in plans]
