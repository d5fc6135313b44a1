"""Training-triplet generation: entity filtering, shadow/reflection masks, inpainting.

Turns an image plus its entity and shadow detections into
(object sprite, full background, composite) records.  Detectors and
inpainters are external; here they are plain inputs and pluggable backends.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol

import numpy as np

from . import masks as M
from .masks import BBox
from .scene_synth import (
    SPRITE_SIZE,
    DatasetManifest,
    MaskSet,
    SceneSample,
    SceneSpec,
    derive_seed,
    encode_sample,
    sha256,
    write_blobs,
)

log = logging.getLogger(__name__)

MIN_CONFIDENCE = 0.30
MIN_AREA = 0.01
MAX_AREA = 0.80
SHADOW_KEEP = 0.80
SHADOW_EXCEPTION = 0.60
SIMILAR_AREA_RATIO = 2.0
MAX_ANGLE_STD_DEG = 2.0
REFLECTION_NU = 0.25
REFINER_STRENGTH = 0.3


@dataclass
class EntityDetection:
    mask: np.ndarray
    confidence: float
    label: str = "object"
    area_fraction: float = -1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        exact = float(self.mask.sum()) / self.mask.size
        if self.area_fraction < 0:
            self.area_fraction = exact
        elif abs(self.area_fraction - exact) > 1e-9:
            raise ValueError(f"area_fraction {self.area_fraction} != mask coverage {exact}")


@dataclass
class ShadowDetection:
    mask: np.ndarray
    confidence: float
    object_shadow_vector: tuple[float, float] = (math.nan, math.nan)

    @classmethod
    def for_object(cls, shadow_mask: np.ndarray, object_mask: np.ndarray, confidence: float) -> "ShadowDetection":
        """Build a detection whose vector runs from the object to the shadow centroid."""
        shadow_mask = np.asarray(shadow_mask, dtype=bool)
        vec = (math.nan, math.nan)
        if shadow_mask.any() and np.any(object_mask):
            oy, ox = np.argwhere(object_mask).mean(0)
            sy, sx = np.argwhere(shadow_mask).mean(0)
            vec = (float(sx - ox), float(sy - oy))
        return cls(shadow_mask, confidence, vec)


@dataclass
class InpaintRequest:
    image: np.ndarray
    mask: np.ndarray
    preserve_strength: float = REFINER_STRENGTH

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")


# ------------------------------------------------------------ steps (i)-(ii)


def entity_verdict(det: EntityDetection) -> str:
    """``"kept"`` or the reason the detection is dropped."""
    if det.confidence < MIN_CONFIDENCE:
        return "low_confidence"
    if det.area_fraction <= MIN_AREA:
        return "too_small"
    if det.area_fraction >= MAX_AREA:
        return "too_large"
    return "kept"


def filter_entities(dets: Iterable[EntityDetection]) -> list[EntityDetection]:
    return [d for d in dets if entity_verdict(d) == "kept"]


# ------------------------------------------------------------ step (iii)


def _angle_std_deg(vectors: list[tuple[float, float]]) -> float:
    angles = np.degrees([math.atan2(vy, vx) for vx, vy in vectors])
    ref = math.degrees(math.atan2(np.sin(np.radians(angles)).mean(), np.cos(np.radians(angles)).mean()))
    dev = (angles - ref + 180.0) % 360.0 - 180.0
    return float(dev.std())


def shadow_keep_decision(
    shadow: ShadowDetection,
    context: list[tuple[EntityDetection, ShadowDetection]],
) -> bool:
    """Keep confident shadows; rescue 0.6-0.8 ones backed by consistent peers.

    The rescue needs at least two objects within a factor of two in area of
    this shadow's object, object-to-shadow direction spread under 2 degrees
    among them, and at least one of them above the 0.8 bar.
    """
    if shadow.confidence > SHADOW_KEEP:
        return True
    if shadow.confidence <= SHADOW_EXCEPTION:
        return False
    own = next((e for e, s in context if s is shadow), None)
    if own is None:
        raise ValueError("context must contain the shadow's own object")
    peers = [
        (e, s) for e, s in context
        if s.mask.any()
        and np.all(np.isfinite(s.object_shadow_vector))
        and max(e.area_fraction, own.area_fraction) <= SIMILAR_AREA_RATIO * min(e.area_fraction, own.area_fraction)
    ]
    if len(peers) < 2 or not any(s is shadow for _, s in peers):
        return False
    if _angle_std_deg([s.object_shadow_vector for _, s in peers]) >= MAX_ANGLE_STD_DEG:
        return False
    return any(s.confidence > SHADOW_KEEP for _, s in peers)


# ------------------------------------------------------------ step (iv)


def reflection_axis(object_mask: np.ndarray, nu: float = REFLECTION_NU) -> float:
    """Row of the mirror axis: ``y_w - nu * (y_l - y_w)``.

    ``y_w`` is the widest row (lowest one on ties), ``y_l`` the lowest
    occupied row.
    """
    widths = object_mask.sum(axis=1)
    rows = np.flatnonzero(widths)
    if rows.size == 0:
        raise ValueError("reflection of an empty object mask")
    y_w = int(np.flatnonzero(widths == widths.max())[-1])
    y_l = int(rows[-1])
    return y_w - nu * (y_l - y_w)


def reflection_mask(object_mask: np.ndarray, has_water: bool, nu: float = REFLECTION_NU) -> np.ndarray:
    object_mask = np.asarray(object_mask, dtype=bool)
    out = np.zeros_like(object_mask)
    if not has_water:
        return out
    axis = reflection_axis(object_mask, nu)
    ys, xs = np.nonzero(object_mask)
    # Half-integer targets round up.
    ry = np.floor(2 * axis - ys + 0.5).astype(np.int64)
    keep = (ry >= 0) & (ry < object_mask.shape[0])
    out[ry[keep], xs[keep]] = True
    return out


# ------------------------------------------------------------ step (v)


def build_inpaint_mask(masks: MaskSet, kernel: int = 40) -> np.ndarray:
    return M.dilate(M.union(masks.object, masks.shadow, masks.reflection), kernel)


class InpainterBackend(Protocol):
    name: str

    def apply(self, image: np.ndarray, mask: np.ndarray, strength: float) -> np.ndarray: ...


class InpaintError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage


class IdentityInpainter:
    name = "identity"

    def apply(self, image, mask, strength):
        return image.copy()


class MeanFillInpainter:
    """Fill the hole with the mean colour of the visible pixels."""

    name = "mean_fill"

    def apply(self, image, mask, strength):
        out = image.copy()
        visible = ~mask
        fill = image[visible].mean(0) if visible.any() else np.full(image.shape[-1], 0.5)
        out[mask] = fill
        return out


class OracleInpainter:
    """Returns the known clean background; images are looked up by content hash."""

    name = "oracle"

    def __init__(self):
        self._clean: dict[str, np.ndarray] = {}

    @staticmethod
    def _key(image: np.ndarray) -> str:
        return sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes())

    def register(self, image: np.ndarray, clean: np.ndarray) -> None:
        self._clean[self._key(image)] = np.asarray(clean, dtype=np.float32)

    def apply(self, image, mask, strength):
        try:
            clean = self._clean[self._key(image)]
        except KeyError:
            raise KeyError("oracle has no clean background for this image") from None
        out = image.copy()
        out[mask] = clean[mask]
        return out


class DiffusionRefiner:
    """Partial-noise refinement with a trained denoiser.

    Noises the image to ``strength * T`` and runs the deterministic sampler
    back to zero with an empty position mask and zero object tokens.
    """

    name = "diffusion_refiner"

    def __init__(self, net, steps: int = 10, seed: int = 0):
        self.net = net
        self.steps = steps
        self.seed = seed

    def apply(self, image, mask, strength):
        from .sampler import refine_image

        out = image.copy()
        refined = refine_image(self.net, image, strength, steps=self.steps, seed=self.seed)
        out[mask] = refined[mask]
        return out


def inpaint_background(req: InpaintRequest, remover: InpainterBackend, refiner: InpainterBackend) -> np.ndarray:
    """Remove with ``remover``, refine with ``refiner``; pixels outside the mask are untouched."""
    mask = np.asarray(req.mask, dtype=bool)
    image = np.asarray(req.image, dtype=np.float32)
    try:
        removed = np.asarray(remover.apply(image.copy(), mask, 1.0), dtype=np.float32)
    except Exception as exc:
        raise InpaintError("remover", exc) from exc
    stage1 = np.where(mask[..., None], removed, image)
    try:
        refined = np.asarray(refiner.apply(stage1.copy(), mask, req.preserve_strength), dtype=np.float32)
    except Exception as exc:
        raise InpaintError("refiner", exc) from exc
    return np.where(mask[..., None], refined, image)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentParams:
    corner_shift: np.ndarray  # (4, 2) pixel offsets for TL, TR, BR, BL
    rotation_deg: float
    scale: float
    color_shift: np.ndarray  # (3,)


def sample_augment_params(rng: np.random.Generator, strength: float, size: tuple[int, int]) -> AugmentParams:
    h, w = size
    jitter = 0.15 * strength
    corner = rng.uniform(-jitter, jitter, size=(4, 2)) * np.array([w, h], dtype=np.float64)
    rot = rng.uniform(-20.0, 20.0) * strength
    scale = 1.0 + rng.uniform(-0.2, 0.2) * strength
    color = rng.uniform(-0.15, 0.15, size=3) * strength
    return AugmentParams(corner, float(rot), float(scale), color)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    coef = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(coef, 1.0).reshape(3, 3)


def augment_transform(params: AugmentParams, size: tuple[int, int]) -> np.ndarray:
    """Forward 3x3 map (pixel-centre coords): perspective first, then affine about the centre."""
    h, w = size
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    persp = _homography(corners, corners + params.corner_shift)
    cx, cy = w / 2.0, h / 2.0
    th = math.radians(params.rotation_deg)
    c, s = math.cos(th) * params.scale, math.sin(th) * params.scale
    affine = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
    return affine @ persp


def warp_nearest(img: np.ndarray, forward: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    inv = np.linalg.inv(forward)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([xx + 0.5, yy + 0.5, np.ones_like(xx, dtype=np.float64)], 0).reshape(3, -1)
    src = inv @ pts
    sx = np.floor(src[0] / src[2]).astype(np.int64)
    sy = np.floor(src[1] / src[2]).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.zeros_like(img).reshape(h * w, -1)
    out[ok] = img[sy[ok], sx[ok]].reshape(ok.sum(), -1)
    return out.reshape(img.shape)


def augment_object_with_params(sprite: np.ndarray, seed: int, strength: float) -> tuple[np.ndarray, AugmentParams]:
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must be in [0, 1]")
    sprite = np.asarray(sprite, dtype=np.float32)
    rng = np.random.default_rng(derive_seed(seed, 0xA06))
    params = sample_augment_params(rng, strength, sprite.shape[:2])
    if strength == 0.0:
        return sprite.copy(), params
    out = warp_nearest(sprite, augment_transform(params, sprite.shape[:2]))
    alpha = out[..., 3:4]
    out[..., :3] = np.clip(out[..., :3] + params.color_shift.astype(np.float32), 0.0, 1.0) * (alpha > 0)
    return out, params


def augment_object(sprite: np.ndarray, seed: int, strength: float) -> np.ndarray:
    """Perspective warp, affine and per-channel colour shift, all scaled by ``strength``."""
    return augment_object_with_params(sprite, seed, strength)[0]


# ------------------------------------------------------------ full pipeline


@dataclass
class PipelineInput:
    id: str
    image: np.ndarray
    entities: list[EntityDetection]
    shadows: list[ShadowDetection | None]
    has_water: bool
    spec: SceneSpec | None = None


@dataclass
class Backends:
    remover: InpainterBackend
    refiner: InpainterBackend
    augment_strength: float = 0.5
    seed: int = 0


@dataclass
class PipelineManifest(DatasetManifest):
    decisions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        d = super().to_json()
        d["decisions"] = self.decisions
        return d


def cut_sprite(image: np.ndarray, object_mask: np.ndarray) -> np.ndarray:
    """RGBA sprite of the masked object, centred on a transparent square."""
    box = BBox.from_mask(object_mask)
    size = max(SPRITE_SIZE, box.width, box.height)
    sprite = np.zeros((size, size, 4), dtype=np.float32)
    oy, ox = (size - box.height) // 2, (size - box.width) // 2
    sub = object_mask[box.y0:box.y1, box.x0:box.x1]
    sprite[oy:oy + box.height, ox:ox + box.width, :3] = image[box.y0:box.y1, box.x0:box.x1] * sub[..., None]
    sprite[oy:oy + box.height, ox:ox + box.width, 3] = sub
    return sprite


def process_entity(item: PipelineInput, index: int, backends: Backends) -> tuple[dict, SceneSample | None]:
    det = item.entities[index]
    shadow = item.shadows[index] if index < len(item.shadows) else None
    record_id = f"{item.id}_{index:02d}"
    decision = {
        "id": record_id,
        "source": item.id,
        "entity": index,
        "confidence": det.confidence,
        "area_fraction": det.area_fraction,
        "thresholds": {
            "min_confidence": MIN_CONFIDENCE, "min_area": MIN_AREA, "max_area": MAX_AREA,
            "shadow_keep": SHADOW_KEEP, "shadow_exception": SHADOW_EXCEPTION,
        },
    }
    verdict = entity_verdict(det)
    decision["kept"] = verdict == "kept"
    decision["reason"] = verdict
    if verdict != "kept":
        return decision, None

    context = [(e, s) for e, s in zip(item.entities, item.shadows) if s is not None]
    shadow_mask = np.zeros_like(det.mask)
    keep_shadow = False
    if shadow is not None and shadow.mask.any():
        keep_shadow = shadow_keep_decision(shadow, context)
        if keep_shadow:
            shadow_mask = shadow.mask
    decision["shadow_kept"] = keep_shadow
    refl = reflection_mask(det.mask, item.has_water)
    decision["reflection"] = bool(refl.any())

    mask_set = MaskSet.build(det.mask, shadow_mask & ~det.mask, refl & ~det.mask)
    background = inpaint_background(InpaintRequest(item.image, mask_set.dilated), backends.remover, backends.refiner)
    sprite = cut_sprite(item.image, det.mask)
    sprite = augment_object(sprite, derive_seed(backends.seed, int(sha256(record_id.encode())[:12], 16)),
                            backends.augment_strength)
    sample = SceneSample(
        object_image=sprite,
        background=background,
        composite=np.asarray(item.image, dtype=np.float32),
        masks=mask_set,
        bbox=BBox.from_mask(det.mask),
        spec=item.spec if item.spec is not None else SceneSpec(seed=0),
        id=record_id,
    )
    return decision, sample


def run_pipeline(
    source: Iterable[PipelineInput],
    backends: Backends,
    out_dir: Path | str,
    split: str = "train",
) -> PipelineManifest:
    """Run steps (i)-(v) plus augmentation for every entity in ``source``.

    Writes the dataset layout of ``scene_synth`` plus ``decisions.jsonl``.
    A failing record is logged, recorded with reason ``error`` and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = PipelineManifest(out_dir, backends.seed, (1.0, 0.0, 0.0) if split == "train" else (0.0, 0.0, 1.0))
    for item in source:
        for index in range(len(item.entities)):
            try:
                decision, sample = process_entity(item, index, backends)
            except Exception as exc:  # noqa: BLE001 - per-record isolation
                log.warning("record %s_%02d failed: %s", item.id, index, exc)
                decision = {"id": f"{item.id}_{index:02d}", "source": item.id, "entity": index,
                            "kept": False, "reason": "error", "error": str(exc)}
                sample = None
            manifest.decisions.append(decision)
            if sample is None:
                continue
            blobs = encode_sample(sample, split, extra={"decision": decision})
            files = write_blobs(out_dir, split, blobs)
            manifest.records.append({
                "id": sample.id,
                "split": split,
                "files": files,
                "sha256": {k: sha256(blobs[Path(v).name]) for k, v in files.items()},
            })
    with open(out_dir / "decisions.jsonl", "w") as fh:
        for d in manifest.decisions:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    manifest.write()
    return manifest


def synthetic_source(
    samples: Iterable[SceneSample],
    oracle: OracleInpainter | None = None,
    entity_confidence: float = 0.9,
    shadow_confidence: float = 0.9,
) -> Iterator[PipelineInput]:
    """Wrap rendered scenes as detector output (masks are ground truth)."""
    for s in samples:
        if oracle is not None:
            oracle.register(s.composite, s.background)
        det = EntityDetection(s.masks.object, entity_confidence, s.spec.object_shape)
        shadows = [ShadowDetection.for_object(s.masks.shadow, s.masks.object, shadow_confidence)]
        yield PipelineInput(s.id, s.composite, [det], shadows, s.spec.has_water, s.spec)
