"""Placement, diversity and identity metrics against synthetic ground truth."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .masks import BBox, box_iou, dilate
from .model import as_net, encoder_features
from .sampler import DEFAULT_N, DEFAULT_STEPS, CompositeResult, SampleRequest, diverse_requests, sample_batch
from .scene_synth import SceneSample, derive_seed, png_bytes, to_u8

EVAL_MODES = ("empty", "bbox")
POOL = 8
EARLY_STEP = 10
LUMA = np.array([0.299, 0.587, 0.114])


class UndefinedIdentityError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 1 when both are empty, 0 when exactly one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def placement_scores(gt: np.ndarray, preds: Sequence[np.ndarray], n: int = DEFAULT_N) -> tuple[float, bool]:
    if len(preds) != n:
        raise ValueError(f"expected {n} predictions, got {len(preds)}")
    best = max(iou(gt, p) for p in preds)
    return best, best > 0.5


def pooled_luminance(img: np.ndarray, pool: int = POOL) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lum = img[..., :3] @ LUMA if img.ndim == 3 else img
    h, w = lum.shape
    if h % pool or w % pool:
        raise ValueError(f"image {h}x{w} not divisible into {pool}x{pool} blocks")
    return lum.reshape(h // pool, pool, w // pool, pool).mean(axis=(1, 3))


def pooled_luminance_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference of 8x8 block-averaged luminance."""
    return float(np.abs(pooled_luminance(a) - pooled_luminance(b)).mean())


def pairwise_diversity(images: Sequence[np.ndarray], distance: Callable = pooled_luminance_l1) -> float:
    """Mean ``distance`` over all unordered pairs."""
    if len(images) < 2:
        raise ValueError("pairwise diversity needs at least two images")
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")
    dists = [distance(images[i], images[j]) for i, j in combinations(range(len(images)), 2)]
    return float(np.mean(dists))


def identity_crop_box(mask: np.ndarray, ratio: float = 2.0) -> BBox:
    """Square of side ``ratio`` x the longer side of the mask's box, shifted/clipped into the canvas."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UndefinedIdentityError("predicted mask is empty; identity is undefined")
    h, w = mask.shape
    box = BBox.from_mask(mask)
    side = min(int(round(ratio * max(box.width, box.height))), h, w)
    cx2, cy2 = box.x0 + box.x1, box.y0 + box.y1  # twice the centre
    x0 = min(max((cx2 - side) // 2, 0), w - side)
    y0 = min(max((cy2 - side) // 2, 0), h - side)
    return BBox(x0, y0, x0 + side, y0 + side)


def embed_for_identity(rgba: np.ndarray, model) -> torch.Tensor:
    """Mean-pooled scale-1 encoder tokens of an RGBA raster, in float64."""
    net = as_net(model)
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(rgba), dtype=dtype)[None].permute(0, 3, 1, 2) * 2 - 1
    with torch.no_grad():
        return encoder_features(x, net)[0].mean(0).to(torch.float64)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(F.cosine_similarity(a[None], b[None], eps=1e-12)[0])


def identity_proxy(result: CompositeResult | np.ndarray, sprite: np.ndarray, model,
                   mask: np.ndarray | None = None) -> float:
    """Cosine similarity between the encoder embedding of the sprite and of a crop around the object.

    The crop follows ``mask`` (defaults to the result's predicted mask).
    """
    image = result.image if isinstance(result, CompositeResult) else np.asarray(result)
    if mask is None:
        if not isinstance(result, CompositeResult):
            raise ValueError("a mask is required when passing a raw image")
        mask = result.predicted_mask
    box = identity_crop_box(mask)
    crop = image[box.y0:box.y1, box.x0:box.x1, :3]
    crop = np.concatenate([crop, np.ones(crop.shape[:2] + (1,), dtype=crop.dtype)], axis=-1)
    return cosine(embed_for_identity(crop, model), embed_for_identity(sprite, model))


def tight_box_iou(mask: np.ndarray, box: BBox) -> float:
    """IoU between the tight box of ``mask`` and ``box``; 0 for an empty mask."""
    if not np.asarray(mask).any():
        return 0.0
    return box_iou(BBox.from_mask(mask), box)


def background_error(image: np.ndarray, background: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute difference to the background outside the dilated ``mask`` (0 if nothing is outside)."""
    outside = ~dilate(np.asarray(mask, dtype=bool))
    if not outside.any():
        return 0.0
    diff = np.abs(np.asarray(image, dtype=np.float64) - np.asarray(background, dtype=np.float64))
    return float(diff[outside].mean())


def distinct_boxes(masks: Sequence[np.ndarray]) -> int:
    """Number of different tight boxes among the nonempty masks."""
    return len({BBox.from_mask(m) for m in masks if np.asarray(m).any()})


def min_pair_l2(images: Sequence[np.ndarray]) -> float:
    """Smallest L2 distance between any two images."""
    flat = [np.asarray(im, dtype=np.float64).ravel() for im in images]
    return min(float(np.linalg.norm(a - b)) for a, b in combinations(flat, 2))


# ---------------------------------------------------------------- report


@dataclass
class ImageRecord:
    id: str
    max_iou: float
    hit: bool
    ious: list[float]
    diversity: float
    identity: float | None
    best_index: int
    bbox_iou: float
    early_mask_iou: float | None = None
    final_mask_nonempty: bool = True
    background_error: float = 0.0
    distinct_boxes: int = 0
    min_pair_l2: float = 0.0


@dataclass
class PlacementReport:
    mode: str
    per_image: list[ImageRecord]
    mean_iou: float
    iou_over_half_rate: float
    pairwise_diversity: float
    identity_proxy: float | None
    n_predictions_per_image: int
    mean_bbox_iou: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    def table_row(self) -> dict:
        return {
            "mode": self.mode,
            "images": len(self.per_image),
            "IoU>0.5": self.iou_over_half_rate,
            "mean-IoU": self.mean_iou,
            "diversity": self.pairwise_diversity,
            "identity": self.identity_proxy,
        }


def aggregate(records: Sequence[ImageRecord], mode: str, n: int, config: dict | None = None) -> PlacementReport:
    if not records:
        raise ValueError("no evaluation records")
    ident = [r.identity for r in records if r.identity is not None]
    return PlacementReport(
        mode=mode,
        per_image=list(records),
        mean_iou=float(np.mean([r.max_iou for r in records])),
        iou_over_half_rate=sum(r.hit for r in records) / len(records),
        pairwise_diversity=float(np.mean([r.diversity for r in records])),
        identity_proxy=float(np.mean(ident)) if ident else None,
        n_predictions_per_image=n,
        mean_bbox_iou=float(np.mean([r.bbox_iou for r in records])),
        config=dict(config or {}),
    )


def score_image(sample: SceneSample, results: Sequence[CompositeResult], model, n: int,
                identity_mask: str = "predicted", early_step: int | None = None) -> ImageRecord:
    gt = sample.masks.object
    preds = [r.predicted_mask for r in results]
    ious = [iou(gt, p) for p in preds]
    best_iou, hit = placement_scores(gt, preds, n)
    best = int(np.argmax(ious))
    mask = gt if identity_mask == "gt" else preds[best]
    try:
        ident = identity_proxy(results[best], sample.object_image, model, mask=mask)
    except UndefinedIdentityError:
        ident = None
    early = None
    first = results[0]
    if early_step is not None and first.mask_trajectory:
        traj = dict(first.mask_trajectory)
        early = iou(traj[early_step], first.predicted_mask)
    return ImageRecord(
        id=str(sample.id), max_iou=float(best_iou), hit=bool(hit), ious=[float(v) for v in ious],
        diversity=pairwise_diversity([r.image for r in results]), identity=ident, best_index=best,
        bbox_iou=float(np.mean([tight_box_iou(p, sample.bbox) for p in preds])),
        early_mask_iou=early, final_mask_nonempty=bool(first.predicted_mask.any()),
        background_error=float(np.mean([background_error(r.image, sample.background, r.predicted_mask)
                                        for r in results])),
        distinct_boxes=distinct_boxes(preds),
        min_pair_l2=min_pair_l2([r.image for r in results]) if len(results) > 1 else 0.0,
    )


def evaluate(samples: Sequence[SceneSample], model, mode: str = "empty", n: int = DEFAULT_N,
             steps: int = DEFAULT_STEPS, seed: int = 0, identity_mask: str = "predicted",
             early_step: int | None = EARLY_STEP, scenes_per_batch: int = 4,
             out_dir: Path | str | None = None, contact_sheet: bool = False) -> PlacementReport:
    """Draw ``n`` samples per scene and score placement, diversity and identity."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if not samples:
        raise ValueError("empty evaluation split")
    net = as_net(model)
    if early_step is not None and early_step > steps:
        early_step = None
    records = []
    sheet = []
    for start in range(0, len(samples), scenes_per_batch):
        chunk = samples[start:start + scenes_per_batch]
        reqs = []
        for i, s in enumerate(chunk):
            base = SampleRequest(s.background, s.object_image, s.bbox if mode == "bbox" else None, steps,
                                 seed=derive_seed(seed, start + i), record_trajectory=early_step is not None)
            reqs.extend(diverse_requests(base, n))
        results = sample_batch(reqs, net)
        for i, s in enumerate(chunk):
            records.append(score_image(s, results[i * n:(i + 1) * n], net, n, identity_mask, early_step))
            if contact_sheet:
                sheet.append(contact_row(s, results[i * n:(i + 1) * n]))
    config = {"mode": mode, "n": n, "steps": steps, "seed": seed, "identity_mask": identity_mask,
              "stage": getattr(net, "stage_tag", None)}
    report = aggregate(records, mode, n, config)
    if out_dir is not None:
        write_report(report, out_dir)
        if contact_sheet:
            (Path(out_dir) / "contact.png").write_bytes(png_bytes(to_u8(np.concatenate(sheet, axis=0))))
    return report


def contact_row(sample: SceneSample, results: Sequence[CompositeResult]) -> np.ndarray:
    """Ground truth, then each sample with its predicted mask outlined in red."""
    tiles = [sample.composite]
    for r in results:
        im = np.array(r.image, dtype=np.float64)
        edge = r.predicted_mask & ~_erode(r.predicted_mask)
        im[edge] = (1.0, 0.0, 0.0)
        tiles.append(im)
    return np.concatenate(tiles, axis=1)


def _erode(mask: np.ndarray) -> np.ndarray:
    m = np.pad(mask, 1, constant_values=False)
    return m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]


def report_csv(report: PlacementReport) -> str:
    buf = io.StringIO()
    row = report.table_row()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(row))
    w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()


def write_report(report: PlacementReport, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "report.csv").write_text(report_csv(report))


def load_report(path: Path | str) -> PlacementReport:
    d = json.loads(Path(path).read_text())
    d["per_image"] = [ImageRecord(**r) for r in d["per_image"]]
    return PlacementReport(**d)
