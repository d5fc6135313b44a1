import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compositor_lab.datagen import (
    Backends, EntityDetection, IdentityInpainter, InpaintError, InpaintRequest, MeanFillInpainter,
    OracleInpainter, PipelineInput, ShadowDetection, augment_object, augment_object_with_params,
    build_inpaint_mask, entity_verdict, filter_entities, inpaint_background, reflection_axis, reflection_mask,
    run_pipeline, shadow_keep_decision, synthetic_source,
)
from compositor_lab.scene_synth import MaskSet, derive_seed, render_scene, sample_spec
from oracles import dilate_naive, reflection_naive


def det_with_area(area, conf=0.9, side=100):
    """Detection on a side x side canvas covering exactly ``area`` of it."""
    n = int(round(area * side * side))
    m = np.zeros(side * side, bool)
    m[:n] = True
    d = EntityDetection(m.reshape(side, side), conf, "obj")
    assert d.area_fraction == pytest.approx(area, abs=1e-12)
    return d


# ---------------------------------------------------------------- filtering


@pytest.mark.parametrize("conf,area,expected", [
    (0.29, 0.5, "low_confidence"),
    (0.31, 0.5, "kept"),
    (0.9, 0.009, "too_small"),
    (0.9, 0.011, "kept"),
    (0.9, 0.79, "kept"),
    (0.9, 0.81, "too_large"),
    (0.9, 0.005, "too_small"),
    (0.9, 0.50, "kept"),
])
def test_entity_thresholds(conf, area, expected):
    assert entity_verdict(det_with_area(area, conf)) == expected


def test_filter_preserves_order_and_handles_empty():
    dets = [det_with_area(a, c) for a, c in [(0.5, 0.9), (0.005, 0.9), (0.2, 0.95), (0.3, 0.1)]]
    kept = filter_entities(dets)
    assert kept == [dets[0], dets[2]]
    assert filter_entities([]) == []


def test_area_fraction_must_match_mask():
    with pytest.raises(ValueError):
        EntityDetection(np.ones((10, 10), bool), 0.9, "x", area_fraction=0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=8))
def test_filter_is_idempotent(pairs):
    dets = [det_with_area(round(a, 4), c) for a, c in pairs]
    once = filter_entities(dets)
    assert filter_entities(once) == once


# ---------------------------------------------------------------- shadows


def _obj_shadow(area_px, angle_deg, conf, side=64, length=8.0):
    obj = np.zeros((side, side), bool)
    obj.ravel()[:area_px] = True
    ent = EntityDetection(obj, 0.9, "o")
    shadow_mask = np.zeros_like(obj)
    shadow_mask[-1, -1] = True
    vec = (length * math.cos(math.radians(angle_deg)), length * math.sin(math.radians(angle_deg)))
    return ent, ShadowDetection(shadow_mask, conf, vec)


def test_confident_shadow_always_kept():
    e, s = _obj_shadow(100, 90, 0.85)
    assert shadow_keep_decision(s, [(e, s)])
    assert shadow_keep_decision(s, [])


def test_boundary_shadow_confidences():
    e, s = _obj_shadow(100, 90, 0.81)
    assert shadow_keep_decision(s, [(e, s)])
    e, s = _obj_shadow(100, 90, 0.80)
    assert not shadow_keep_decision(s, [(e, s)])


def test_mid_confidence_single_object_dropped():
    e, s = _obj_shadow(100, 90, 0.65)
    assert not shadow_keep_decision(s, [(e, s)])


def test_mid_confidence_exception_applies():
    own = _obj_shadow(100, 89.0, 0.65)
    peer1 = _obj_shadow(110, 90.0, 0.9)
    peer2 = _obj_shadow(95, 91.0, 0.7)
    ctx = [own, peer1, peer2]
    sigma = np.std([89.0, 90.0, 91.0])
    assert sigma < 2
    assert shadow_keep_decision(own[1], ctx)


def test_exception_fails_without_confident_peer():
    own = _obj_shadow(100, 89.0, 0.65)
    ctx = [own, _obj_shadow(110, 90.0, 0.7), _obj_shadow(95, 91.0, 0.75)]
    assert not shadow_keep_decision(own[1], ctx)


def test_exception_fails_on_spread_angles():
    own = _obj_shadow(100, 80.0, 0.65)
    ctx = [own, _obj_shadow(110, 90.0, 0.9), _obj_shadow(95, 100.0, 0.7)]
    assert not shadow_keep_decision(own[1], ctx)


def test_exception_fails_on_dissimilar_sizes():
    own = _obj_shadow(100, 90.0, 0.65)
    ctx = [own, _obj_shadow(300, 90.0, 0.9)]
    assert not shadow_keep_decision(own[1], ctx)


def test_low_confidence_shadow_dropped_even_with_support():
    own = _obj_shadow(100, 90.0, 0.55)
    ctx = [own, _obj_shadow(100, 90.0, 0.9), _obj_shadow(100, 90.0, 0.9)]
    assert not shadow_keep_decision(own[1], ctx)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.8000001, 1.0))
def test_any_confidence_above_bar_is_kept(conf):
    e, s = _obj_shadow(50, 45, conf)
    assert shadow_keep_decision(s, [])


# ---------------------------------------------------------------- reflections


def test_reflection_axis_substitution():
    m = np.zeros((80, 80), bool)
    m[40:71, 30:34] = True
    m[50, 20:50] = True  # widest row
    assert reflection_axis(m, 0.25) == 45.0


def test_reflection_off_without_water():
    m = np.zeros((16, 16), bool)
    m[3:6, 3:6] = True
    assert not reflection_mask(m, False).any()


def test_reflection_of_empty_mask_with_water_raises():
    with pytest.raises(ValueError):
        reflection_mask(np.zeros((8, 8), bool), True)


def test_reflection_matches_pixel_loop(rng):
    for _ in range(30):
        m = np.zeros((64, 64), bool)
        y0, x0 = rng.integers(5, 30, size=2)
        blob = rng.random((int(rng.integers(3, 20)), int(rng.integers(3, 20)))) < 0.6
        m[y0:y0 + blob.shape[0], x0:x0 + blob.shape[1]] = blob
        if not m.any():
            continue
        expected, axis = reflection_naive(m)
        assert reflection_axis(m) == pytest.approx(axis)
        assert np.array_equal(reflection_mask(m, True), expected)


# ---------------------------------------------------------------- dilation


def test_inpaint_mask_matches_oracle(rng):
    for _ in range(10):
        a, b, c = (rng.random((64, 64)) < 0.004 for _ in range(3))
        ms = MaskSet(a, b, c, np.zeros_like(a))
        assert np.array_equal(build_inpaint_mask(ms), dilate_naive(a | b | c, 40))


def test_inpaint_mask_dimension_mismatch():
    ms = MaskSet(np.zeros((8, 8), bool), np.zeros((8, 9), bool), np.zeros((8, 8), bool), None)
    with pytest.raises(ValueError):
        build_inpaint_mask(ms)


# ---------------------------------------------------------------- inpainting


class BlurRemover:
    name = "blur"

    def apply(self, image, mask, strength):
        out = image.copy()
        k = np.ones(5) / 5
        for c in range(image.shape[-1]):
            out[..., c] = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, image[..., c])
        return out


class NoiseRefiner:
    name = "noise"

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def apply(self, image, mask, strength):
        return image + strength * self.rng.normal(size=image.shape).astype(np.float32)


class Broken:
    name = "broken"

    def apply(self, image, mask, strength):
        raise RuntimeError("boom")


def test_oracle_inpainter_restores_clean_background():
    s = render_scene(sample_spec(3))
    oracle = OracleInpainter()
    oracle.register(s.composite, s.background)
    mask = s.masks.dilated
    out = inpaint_background(InpaintRequest(s.composite, mask), oracle, IdentityInpainter())
    assert np.array_equal(out[mask], s.background[mask])
    assert np.array_equal(out[~mask], s.composite[~mask])


def test_identity_refiner_returns_remover_output(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    mask = rng.random((16, 16)) < 0.3
    out = inpaint_background(InpaintRequest(img, mask), MeanFillInpainter(), IdentityInpainter())
    expected = np.where(mask[..., None], MeanFillInpainter().apply(img, mask, 1.0), img)
    assert np.array_equal(out, expected)


def test_refiner_receives_preserve_strength(rng):
    seen = []

    class Spy:
        name = "spy"

        def apply(self, image, mask, strength):
            seen.append(strength)
            return image

    img = rng.random((8, 8, 3)).astype(np.float32)
    inpaint_background(InpaintRequest(img, np.ones((8, 8), bool)), IdentityInpainter(), Spy())
    assert seen == [0.3]


def test_outside_mask_untouched_for_arbitrary_backends(rng):
    for i in range(100):
        img = rng.random((24, 24, 3)).astype(np.float32)
        mask = rng.random((24, 24)) < rng.uniform(0.05, 0.6)
        out = inpaint_background(InpaintRequest(img, mask), BlurRemover(), NoiseRefiner(i))
        assert np.array_equal(out[~mask], img[~mask])


def test_backend_failure_carries_stage(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    req = InpaintRequest(img, np.ones((8, 8), bool))
    with pytest.raises(InpaintError) as e:
        inpaint_background(req, Broken(), IdentityInpainter())
    assert e.value.stage == "remover"
    with pytest.raises(InpaintError) as e:
        inpaint_background(req, IdentityInpainter(), Broken())
    assert e.value.stage == "refiner"


def test_inpaint_request_shape_check():
    with pytest.raises(ValueError):
        InpaintRequest(np.zeros((8, 8, 3)), np.zeros((8, 7), bool))


# ---------------------------------------------------------------- augmentation


def test_zero_strength_is_identity():
    sprite = render_scene(sample_spec(5)).object_image
    assert np.array_equal(augment_object(sprite, 11, 0.0), sprite)


def test_augmentation_is_deterministic():
    sprite = render_scene(sample_spec(5)).object_image
    assert np.array_equal(augment_object(sprite, 11, 0.7), augment_object(sprite, 11, 0.7))
    assert not np.array_equal(augment_object(sprite, 11, 0.7), augment_object(sprite, 12, 0.7))


def test_augmentation_bounds_at_full_strength():
    sprite = render_scene(sample_spec(5)).object_image
    h, w = sprite.shape[:2]
    for seed in range(1000):
        _, p = augment_object_with_params(sprite, seed, 1.0)
        assert np.all(np.abs(p.corner_shift[:, 0]) <= 0.15 * w)
        assert np.all(np.abs(p.corner_shift[:, 1]) <= 0.15 * h)
        assert np.all(np.abs(p.color_shift) <= 0.15)
        assert abs(p.rotation_deg) <= 20.0
        assert 0.8 <= p.scale <= 1.2


def test_alpha_is_transformed_by_geometry_only():
    sprite = render_scene(sample_spec(8)).object_image
    out = augment_object(sprite, 4, 1.0)
    assert set(np.unique(out[..., 3])) <= {0.0, 1.0}
    assert np.all(out[..., :3][out[..., 3] == 0] == 0)


# ---------------------------------------------------------------- pipeline


def _scenes(n, seed=0):
    return [render_scene(sample_spec(derive_seed(seed, i))) for i in range(n)]


def test_pipeline_keeps_every_valid_entity(tmp_path):
    scenes = _scenes(6)
    for i, s in enumerate(scenes):
        s.id = f"s{i}"
    oracle = OracleInpainter()
    m = run_pipeline(synthetic_source(scenes, oracle), Backends(oracle, IdentityInpainter()), tmp_path)
    assert len(m.records) == 6
    lines = (tmp_path / "decisions.jsonl").read_text().splitlines()
    assert len(lines) == 6 and all(json.loads(l)["kept"] for l in lines)
    assert (tmp_path / "manifest.json").exists()


def test_pipeline_records_drop_reason(tmp_path):
    s = render_scene(sample_spec(1))
    tiny = np.zeros((64, 64), bool)
    tiny[0, :20] = True  # 20 / 4096 < 1%
    oracle = OracleInpainter()
    oracle.register(s.composite, s.background)
    item = PipelineInput("x", s.composite, [EntityDetection(s.masks.object, 0.9), EntityDetection(tiny, 0.9)],
                         [None, None], False)
    m = run_pipeline([item], Backends(oracle, IdentityInpainter()), tmp_path)
    reasons = [d["reason"] for d in m.decisions]
    assert reasons == ["kept", "too_small"]
    assert len(m.records) == 1


def test_pipeline_isolates_failures(tmp_path):
    s = render_scene(sample_spec(2))
    good = render_scene(sample_spec(3))
    oracle = OracleInpainter()
    oracle.register(good.composite, good.background)  # the first image is unknown to the oracle
    items = [PipelineInput("bad", s.composite, [EntityDetection(s.masks.object, 0.9)], [None], False),
             PipelineInput("good", good.composite, [EntityDetection(good.masks.object, 0.9)], [None], False)]
    m = run_pipeline(items, Backends(oracle, IdentityInpainter()), tmp_path)
    assert [d["reason"] for d in m.decisions] == ["error", "kept"]
    assert len(m.records) == 1


def test_pipeline_backgrounds_match_clean_inside_mask(tmp_path):
    from compositor_lab.scene_synth import load_split

    scenes = _scenes(50, seed=4)
    for i, s in enumerate(scenes):
        s.id = f"s{i:02d}"
    oracle = OracleInpainter()
    run_pipeline(synthetic_source(scenes, oracle), Backends(oracle, IdentityInpainter(), 0.0), tmp_path)
    emitted = {s.id: s for s in load_split(tmp_path, "train")}
    assert len(emitted) == 50
    for i, scene in enumerate(scenes):
        out = emitted[f"s{i:02d}_00"]
        mask = out.masks.dilated
        assert mask.any()
        assert np.abs(out.background[mask] - scene.background[mask]).max() <= 0.5 / 255 + 1e-6
