"""Procedural 2-D scenes with ground-truth object, shadow and reflection masks.

Each scene is a sky/ground (or sky/water) backdrop with one object standing on
the horizon row.  Ground scenes get a cast shadow sheared along the light
direction; water scenes get a mirrored, rippled reflection.  The clean
background is kept next to the composite so the inpainting stage has an exact
answer to compare against.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masks import BBox, dilate, union

log = logging.getLogger(__name__)

SPRITE_SIZE = 32
SHAPES = ("box", "ellipse", "triangle", "composite")
SHAPE_PROBS = (0.25, 0.25, 0.25, 0.25)
SIZE_RANGE = (10, 24)  # inclusive, same range for width and height
WATER_PROB = 0.3
GROUND_RANGE = (34, 46)
LIGHT_ANGLE_MAX = 45.0  # degrees away from straight down
SHADOW_OPACITY = 0.4
SHADOW_LENGTH = 0.5  # shadow length per unit of object height
REFLECTION_OPACITY = 0.5
DILATION_KERNEL = 40
SPLITS = ("train", "val", "test")


class SceneRejected(ValueError):
    """The scene spec violates a geometric invariant."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int] = (64, 64)  # (width, height)
    ground_line: int = 40
    has_water: bool = False
    light_direction: tuple[float, float] = (0.6, 0.8)
    object_shape: str = "box"
    object_color: tuple[float, float, float] = (0.8, 0.2, 0.2)
    object_anchor: tuple[int, int] = (32, 40)  # (column, row) of the foot point
    object_size: tuple[int, int] = (16, 16)  # (w, h)

    def validate(self) -> None:
        width, height = self.canvas
        w, h = self.object_size
        col, row = self.object_anchor
        if w < 2 or h < 2:
            raise SceneRejected(f"degenerate object size {self.object_size}")
        if w > SPRITE_SIZE or h > SPRITE_SIZE:
            raise SceneRejected(f"object size {self.object_size} exceeds sprite size {SPRITE_SIZE}")
        if self.object_shape not in SHAPES:
            raise SceneRejected(f"unknown shape {self.object_shape!r}")
        x0 = col - w // 2
        if x0 < 0 or x0 + w > width or row - h < 0 or row > height:
            raise SceneRejected(f"object at anchor {self.object_anchor} leaves the canvas")
        if not 0 < self.ground_line < height:
            raise SceneRejected(f"ground line {self.ground_line} outside canvas")
        if self.has_water and row > self.ground_line:
            raise SceneRejected("object must stand above the water line")
        lx, ly = self.light_direction
        if abs(math.hypot(lx, ly) - 1.0) > 1e-6:
            raise SceneRejected(f"light direction {self.light_direction} is not unit length")
        if ly <= 0:
            raise SceneRejected("light must point down onto the ground plane")
        if any(not 0.0 <= c <= 1.0 for c in self.object_color):
            raise SceneRejected("object colour outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=int(d["seed"]),
            canvas=tuple(d["canvas"]),
            ground_line=int(d["ground_line"]),
            has_water=bool(d["has_water"]),
            light_direction=tuple(d["light_direction"]),
            object_shape=d["object_shape"],
            object_color=tuple(d["object_color"]),
            object_anchor=tuple(d["object_anchor"]),
            object_size=tuple(d["object_size"]),
        )


@dataclass
class MaskSet:
    object: np.ndarray
    shadow: np.ndarray
    reflection: np.ndarray
    dilated: np.ndarray

    @classmethod
    def build(cls, obj, shadow, reflection, kernel: int = DILATION_KERNEL) -> "MaskSet":
        return cls(obj, shadow, reflection, dilate(union(obj, shadow, reflection), kernel))


@dataclass
class SceneSample:
    object_image: np.ndarray  # (S, S, 4) float32 RGBA
    background: np.ndarray  # (H, W, 3) float32
    composite: np.ndarray  # (H, W, 3) float32
    masks: MaskSet
    bbox: BBox
    spec: SceneSpec
    id: str = ""


# ---------------------------------------------------------------- sampling


def derive_seed(*parts: int) -> int:
    """64-bit seed from a tuple of integers; independent of call order."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


def sample_spec(seed: int, canvas: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Draw a scene from the declared distribution (see module constants)."""
    rng = np.random.default_rng(seed)
    width, height = canvas
    shape = SHAPES[int(rng.choice(len(SHAPES), p=SHAPE_PROBS))]
    w = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
    h = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
    has_water = bool(rng.random() < WATER_PROB)
    lo, hi = GROUND_RANGE
    ground = int(rng.integers(max(lo, h), min(hi, height - 2) + 1))
    col = int(rng.integers(w // 2 + 1, width - w + w // 2))
    theta = math.radians(rng.uniform(-LIGHT_ANGLE_MAX, LIGHT_ANGLE_MAX))
    color = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))
    return SceneSpec(
        seed=int(seed),
        canvas=(width, height),
        ground_line=ground,
        has_water=has_water,
        light_direction=(math.sin(theta), math.cos(theta)),
        object_shape=shape,
        object_color=color,
        object_anchor=(col, ground),
        object_size=(w, h),
    )


# ---------------------------------------------------------------- rendering


def silhouette(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (yy + 0.5) / h, (xx + 0.5) / w
    if shape == "box":
        m = np.ones((h, w), dtype=bool)
    elif shape == "ellipse":
        m = (cx - 0.5) ** 2 + (cy - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        m = np.abs(cx - 0.5) <= 0.5 * cy
    elif shape == "composite":
        head = (cx - 0.5) ** 2 / 0.25 + (cy - 0.3) ** 2 / 0.09 <= 1.0
        trunk = (np.abs(cx - 0.5) <= 0.25) & (cy >= 0.5)
        m = head | trunk
    else:
        raise SceneRejected(f"unknown shape {shape!r}")
    return m


def make_sprite(spec: SceneSpec) -> np.ndarray:
    """Object on a transparent SPRITE_SIZE square, native scale, centred."""
    w, h = spec.object_size
    sil = silhouette(spec.object_shape, w, h)
    shade = np.linspace(1.0, 0.7, h, dtype=np.float32)[:, None, None]
    rgb = np.asarray(spec.object_color, dtype=np.float32)[None, None, :] * shade
    stripe = np.zeros((h, w, 1), dtype=np.float32)
    stripe[:, ::4] = 0.08
    rgb = np.clip(rgb + stripe * np.where(rgb.mean() > 0.5, -1.0, 1.0), 0.0, 1.0)
    sprite = np.zeros((SPRITE_SIZE, SPRITE_SIZE, 4), dtype=np.float32)
    oy, ox = (SPRITE_SIZE - h) // 2, (SPRITE_SIZE - w) // 2
    sprite[oy:oy + h, ox:ox + w, :3] = rgb * sil[..., None]
    sprite[oy:oy + h, ox:ox + w, 3] = sil
    return sprite


def render_background(spec: SceneSpec) -> np.ndarray:
    width, height = spec.canvas
    rng = np.random.default_rng(derive_seed(spec.seed, 17))
    g = spec.ground_line
    sky_top = rng.uniform(0.45, 0.95, 3)
    sky_bottom = np.clip(sky_top + rng.uniform(-0.25, 0.1, 3), 0, 1)
    img = np.empty((height, width, 3), dtype=np.float32)
    ramp = np.linspace(0.0, 1.0, g)[:, None]
    img[:g] = (sky_top[None, :] * (1 - ramp) + sky_bottom[None, :] * ramp)[:, None, :]
    rows = np.arange(height - g)
    if spec.has_water:
        base = np.array([0.1, 0.3, 0.55]) + rng.uniform(-0.08, 0.08, 3)
        phase = rng.uniform(0, 2 * np.pi)
        xs = np.arange(width)
        ripple = 0.05 * np.sin(xs[None, :] * 0.5 + rows[:, None] * 1.3 + phase)
        img[g:] = np.clip(base[None, None, :] + ripple[..., None], 0, 1)
    else:
        base = rng.uniform(0.15, 0.6, 3)
        stripe = np.where(rows % 4 == 0, 0.05, 0.0)[:, None]
        img[g:] = np.clip(base[None, :] + stripe, 0, 1)[:, None, :]
    return img


def cast_shadow(object_mask: np.ndarray, ground_line: int, light: tuple[float, float]) -> np.ndarray:
    """Shear the silhouette onto the ground plane below ``ground_line``.

    A point at height ``eta`` above the ground line lands at
    ``(x + eta*L*lx, g + eta*L*ly)`` with ``L = SHADOW_LENGTH``.  Rasterised
    by pulling each ground pixel centre back to the silhouette.
    """
    h, w = object_mask.shape
    lx, ly = light
    g = ground_line
    out = np.zeros_like(object_mask, dtype=bool)
    if g >= h:
        return out
    rr, cc = np.mgrid[g:h, 0:w]
    v = rr + 0.5 - g
    eta = v / (SHADOW_LENGTH * ly)
    src_x = np.floor(cc + 0.5 - v * lx / ly).astype(np.int64)
    src_y = np.floor(g - eta).astype(np.int64)
    ok = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    hit = np.zeros(rr.shape, dtype=bool)
    hit[ok] = object_mask[src_y[ok], src_x[ok]]
    out[g:] = hit
    return out & ~object_mask


def composite_sprite(
    background: np.ndarray,
    sprite: np.ndarray,
    anchor: tuple[int, int],
    ground_line: int,
    has_water: bool,
    light: tuple[float, float],
    ripple_seed: int,
) -> tuple[np.ndarray, MaskSet, BBox]:
    """Paste ``sprite`` with its foot at ``anchor`` and render its effects."""
    height, width = background.shape[:2]
    alpha = sprite[..., 3] > 0.5
    tight = BBox.from_mask(alpha)
    crop = sprite[tight.y0:tight.y1, tight.x0:tight.x1]
    sil = alpha[tight.y0:tight.y1, tight.x0:tight.x1]
    h, w = sil.shape
    col, row = anchor
    x0, y0 = col - w // 2, row - h
    if x0 < 0 or y0 < 0 or x0 + w > width or row > height:
        raise SceneRejected(f"sprite at anchor {anchor} leaves the canvas")

    obj = np.zeros((height, width), dtype=bool)
    obj[y0:row, x0:x0 + w] = sil
    obj_rgb = np.zeros((height, width, 3), dtype=np.float32)
    obj_rgb[y0:row, x0:x0 + w] = crop[..., :3]

    comp = background.copy()
    shadow = np.zeros_like(obj)
    reflection = np.zeros_like(obj)
    if has_water:
        rng = np.random.default_rng(derive_seed(ripple_seed, 23))
        jitter = rng.integers(-1, 2, size=height)
        ys, xs = np.nonzero(obj)
        ry = 2 * ground_line - 1 - ys
        rx = xs + jitter[np.clip(ry, 0, height - 1)]
        keep = (ry >= ground_line) & (ry < height) & (rx >= 0) & (rx < width)
        ry, rx, sy, sx = ry[keep], rx[keep], ys[keep], xs[keep]
        reflection[ry, rx] = True
        comp[ry, rx] = (1 - REFLECTION_OPACITY) * background[ry, rx] + REFLECTION_OPACITY * obj_rgb[sy, sx]
    else:
        shadow = cast_shadow(obj, ground_line, light)
        comp[shadow] = background[shadow] * (1.0 - SHADOW_OPACITY)
    comp[obj] = obj_rgb[obj]
    masks = MaskSet.build(obj, shadow, reflection & ~obj)
    return comp, masks, BBox.from_mask(obj)


def render_scene(spec: SceneSpec) -> SceneSample:
    spec.validate()
    background = render_background(spec)
    sprite = make_sprite(spec)
    comp, masks, bbox = composite_sprite(
        background, sprite, spec.object_anchor, spec.ground_line,
        spec.has_water, spec.light_direction, spec.seed,
    )
    return SceneSample(sprite, background, comp, masks, bbox, spec)


# ---------------------------------------------------------------- persistence


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def pack_masks(masks: MaskSet) -> np.ndarray:
    return np.stack([masks.object, masks.shadow, masks.reflection, masks.dilated], -1).astype(np.uint8) * 255


def unpack_masks(arr: np.ndarray) -> MaskSet:
    return MaskSet(arr[..., 0] > 127, arr[..., 1] > 127, arr[..., 2] > 127, arr[..., 3] > 127)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


FILE_KINDS = ("object", "bg", "comp", "masks")


def encode_sample(sample: SceneSample, split: str, extra: dict | None = None) -> dict[str, bytes]:
    """Serialise a sample to ``{filename: bytes}`` (PNG rasters + JSON sidecar)."""
    blobs = {
        f"{sample.id}.object.png": png_bytes(to_u8(sample.object_image)),
        f"{sample.id}.bg.png": png_bytes(to_u8(sample.background)),
        f"{sample.id}.comp.png": png_bytes(to_u8(sample.composite)),
        f"{sample.id}.masks.png": png_bytes(pack_masks(sample.masks)),
    }
    sidecar = {
        "id": sample.id,
        "split": split,
        "spec": sample.spec.to_json(),
        "bbox": list(sample.bbox.as_tuple()),
        "sha256": {name: sha256(b) for name, b in blobs.items()},
    }
    if extra:
        sidecar.update(extra)
    blobs[f"{sample.id}.json"] = json.dumps(sidecar, indent=1, sort_keys=True).encode()
    return blobs


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` items to the three splits."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} must be three non-negative reals summing to 1")
    raw = [n * r for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    split_ratios: tuple[float, float, float]
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format": 1,
            "n": len(self.records),
            "seed": self.seed,
            "split_ratios": list(self.split_ratios),
            "records": self.records,
        }

    def write(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text())
        return cls(root, d["seed"], tuple(d["split_ratios"]), d["records"])


def _render_indexed(args) -> tuple[int, SceneSample]:
    index, seed, canvas = args
    sample = render_scene(sample_spec(derive_seed(seed, index), canvas))
    sample.id = f"{index:06d}"
    return index, sample


def write_blobs(root: Path, split: str, blobs: dict[str, bytes]) -> dict[str, str]:
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, data in blobs.items():
        (d / name).write_bytes(data)
        files[name.split(".", 1)[1]] = f"{split}/{name}"
    return files


def make_dataset(
    n: int,
    seed: int,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    root: Path | str = "data",
    canvas: tuple[int, int] = (64, 64),
    jobs: int = 1,
) -> DatasetManifest:
    """Render ``n`` scenes to ``root`` and write ``manifest.json``.

    Scene ``i`` is drawn from ``derive_seed(seed, i)``, so output does not
    depend on ``jobs`` or completion order.
    """
    counts = split_counts(n, tuple(split_ratios))
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    perm = np.random.default_rng(derive_seed(seed, 0xDA7A)).permutation(n)
    split_of = np.empty(n, dtype=object)
    split_of[perm[: counts[0]]] = "train"
    split_of[perm[counts[0]: counts[0] + counts[1]]] = "val"
    split_of[perm[counts[0] + counts[1]:]] = "test"

    manifest = DatasetManifest(root, int(seed), tuple(split_ratios))
    work = [(i, seed, canvas) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rendered = pool.map(_render_indexed, work, chunksize=16)
            _collect(rendered, split_of, manifest)
    else:
        _collect(map(_render_indexed, work), split_of, manifest)
    manifest.write()
    log.info("wrote %d scenes to %s (%s)", n, root, dict(zip(SPLITS, counts)))
    return manifest


def _collect(rendered, split_of, manifest: DatasetManifest) -> None:
    # Single writer: files and manifest rows are produced here only.
    for index, sample in rendered:
        split = str(split_of[index])
        blobs = encode_sample(sample, split)
        files = write_blobs(manifest.root, split, blobs)
        manifest.records.append({
            "id": sample.id,
            "split": split,
            "files": files,
            "sha256": {k: sha256(blobs[Path(v).name]) for k, v in files.items()},
        })


def load_sample(root: Path | str, record: dict) -> SceneSample:
    root = Path(root)
    files = record["files"]
    meta = json.loads((root / files["json"]).read_text())
    u8 = lambda key: read_png(root / files[key]).astype(np.float32) / 255.0  # noqa: E731
    return SceneSample(
        object_image=u8("object.png"),
        background=u8("bg.png"),
        composite=u8("comp.png"),
        masks=unpack_masks(read_png(root / files["masks.png"])),
        bbox=BBox(*meta["bbox"]),
        spec=SceneSpec.from_json(meta["spec"]),
        id=record["id"],
    )


def load_split(root: Path | str, split: str, limit: int | None = None) -> list[SceneSample]:
    manifest = DatasetManifest.load(root)
    recs = manifest.split(split)
    if limit is not None:
        recs = recs[:limit]
    return [load_sample(root, r) for r in recs]
