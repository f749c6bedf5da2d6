import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cmt.errors import BoxOutsideView, ConfigInvalid, QuarantineError
from cmt.synth_data import (CUTOUT_FILL, FOG_COLOR, AugRecord, DomainParams, GenConfig, Scene, apply_strong,
                            apply_weak, box_iou, generate_dataset, generate_scene, load_dataset, manifest_hash,
                            render_target, resample, save_dataset, strong_from_params, transform_box,
                            weak_from_params)
from cmt.synth_data.dataset import training_guard

IDENTITY = DomainParams(fog_density=0.0, blur_sigma=0.0, brightness_shift=0.0, noise_std=0.0)


def test_single_object_scene():
    s = generate_scene(0, GenConfig(min_objects=1, max_objects=1))
    assert len(s.objects) == 1
    b = s.objects[0].box
    assert (b[2] - b[0]) * (b[3] - b[1]) > 0


def test_scene_determinism():
    a, b = generate_scene(7, scene_id=3), generate_scene(7, scene_id=3)
    assert a.objects == b.objects
    assert np.array_equal(a.image_source, b.image_source) and np.array_equal(a.image_target, b.image_target)
    assert not np.array_equal(a.image_source, generate_scene(8, scene_id=3).image_source)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_scene_invariants(seed, sid):
    cfg = GenConfig()
    s = generate_scene(seed, cfg, scene_id=sid)
    assert cfg.min_objects <= len(s.objects) <= cfg.max_objects
    for o in s.objects:
        x1, y1, x2, y2 = o.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
        assert 0 <= o.class_id < cfg.num_classes
    for i, a in enumerate(s.objects):
        for b in s.objects[i + 1:]:
            assert box_iou(a.box, b.box) < 0.5
    for img in (s.image_source, s.image_target):
        assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1


@pytest.mark.parametrize("sid", range(8))
def test_boxes_are_tight(sid):
    """With one object, the pixels that differ from the bare background span exactly the box."""
    from cmt.synth_data.scene import _background, quantize, scene_rng

    s = generate_scene(3, GenConfig(min_objects=1, max_objects=1), scene_id=sid)
    bg = quantize(_background(scene_rng(3, sid), 64))
    changed = np.abs(s.image_source - bg).max(axis=0) > 0
    rows, cols = np.nonzero(changed.any(axis=1))[0], np.nonzero(changed.any(axis=0))[0]
    assert s.objects[0].box == (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


def test_class_histogram_uniform():
    cfg = GenConfig()
    counts = np.zeros(cfg.num_classes)
    for sid in range(1000):
        for o in generate_scene(0, cfg, scene_id=sid).objects:
            counts[o.class_id] += 1
    expected = counts.sum() / cfg.num_classes
    assert np.all(np.abs(counts - expected) <= 0.1 * expected)
    assert stats.chisquare(counts).pvalue > 0.001


def test_unsatisfiable_config_raises():
    with pytest.raises(ConfigInvalid):
        generate_scene(0, GenConfig(image_size=16, min_objects=6, max_objects=6, min_object_size=10,
                                    max_object_size=12, max_attempts=50))


def _scene(img):
    return Scene(0, [], img, img)


def test_render_identity():
    img = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert np.array_equal(render_target(_scene(img), IDENTITY), img)


def test_render_full_fog():
    img = np.random.default_rng(0).uniform(size=(3, 8, 8))
    out = render_target(_scene(img), DomainParams(fog_density=1.0, blur_sigma=0.0, noise_std=0.0))
    np.testing.assert_allclose(out, np.broadcast_to(FOG_COLOR[:, None, None], img.shape), atol=1e-15)


def test_render_half_fog_arithmetic():
    img = np.full((3, 4, 4), 0.2)
    out = render_target(_scene(img), DomainParams(fog_density=0.5, blur_sigma=0.0, noise_std=0.0))
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_zero_domain_dataset_targets_match_sources():
    ds = generate_dataset(1, GenConfig(domain=IDENTITY), n_train=3, n_eval=2)
    for i, sid in enumerate(ds.target_train.ids):
        assert np.array_equal(ds.target_train.images[i], generate_scene(1, ds.gen_config, sid).image_source)


# ---------------------------------------------------------------- augmentation

def test_flip_formula():
    img = np.zeros((3, 64, 64))
    _, boxes, rec = weak_from_params(img, [(10, 5, 20, 15)], flip=True)
    assert boxes == [(44.0, 5.0, 54.0, 15.0)]


def test_noop_weak():
    img = np.random.default_rng(0).uniform(size=(3, 64, 64))
    out, boxes, rec = weak_from_params(img, [(10, 5, 20, 15)], flip=False)
    assert np.array_equal(out, img) and boxes == [(10, 5, 20, 15)]


def test_crop_translation_and_clamp():
    img = np.zeros((3, 64, 64))
    _, boxes, rec = weak_from_params(img, [(10, 5, 20, 15), (1, 1, 8, 8), (60, 60, 64, 64)],
                                     flip=False, crop_offset=(4, 2))
    assert boxes == [(6.0, 3.0, 16.0, 13.0), (0.0, 0.0, 4.0, 6.0), (56.0, 58.0, 60.0, 62.0)]


def test_dropped_boxes_recorded():
    img = np.zeros((3, 64, 64))
    _, boxes, rec = weak_from_params(img, [(0, 0, 3, 3), (20, 20, 30, 30)], flip=False,
                                     crop_offset=(5, 5), crop_scale=0.9)
    assert rec.dropped == [0] and len(boxes) == 1


def test_affine_composition_oracle():
    teacher = AugRecord(64, 64, crop_offset=(2.0, 2.0))
    student = AugRecord(64, 64, flip=True, crop_offset=(4.0, 0.0))
    # teacher view -> original: +(2,2); original -> student: -(4,0) then x -> 64 - x
    box = (10.0, 10.0, 20.0, 20.0)
    assert transform_box(box, teacher, student) == pytest.approx((46.0, 12.0, 56.0, 22.0), abs=1e-12)
    assert transform_box(box, teacher, teacher) == box
    assert transform_box(box, AugRecord(64, 64), AugRecord(64, 64, flip=True)) == (44.0, 10.0, 54.0, 20.0)


def test_transform_outside_raises():
    with pytest.raises(BoxOutsideView):
        transform_box((0.0, 0.0, 3.0, 3.0), AugRecord(64, 64), AugRecord(64, 64, crop_offset=(5.0, 5.0)))


records = st.builds(
    lambda flip, dx, dy, s: AugRecord(64, 64, flip=flip, crop_offset=(dx * (1 - s) * 64, dy * (1 - s) * 64),
                                      crop_scale=s),
    st.booleans(), st.floats(0, 1), st.floats(0, 1), st.floats(0.9, 1.0))


@settings(max_examples=200, deadline=None)
@given(records, records, st.floats(20, 30), st.floats(20, 30), st.floats(4, 10), st.floats(4, 10))
def test_transform_roundtrip(a, b, x, y, w, h):
    box = (x, y, x + w, y + h)  # central boxes stay inside every 0.9-scale crop
    there = transform_box(box, a, b)
    back = transform_box(there, b, a)
    np.testing.assert_allclose(back, box, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_apply_weak_maps_boxes_exactly(seed):
    rng = np.random.default_rng(seed)
    boxes = [(float(x), float(y), float(x + 10), float(y + 8)) for x, y in rng.uniform(0, 50, (3, 2))]
    _, out, rec = apply_weak(np.zeros((3, 64, 64)), boxes, rng)
    kept = [k for k in range(3) if k not in rec.dropped]
    assert len(out) == len(kept)
    for k, b in zip(kept, out):
        assert box_iou(b, rec.clamp(rec.box_to_view(boxes[k]))) == 1.0


def test_warp_matches_box_mapping():
    """A bright square rendered, then warped, lands where its mapped box says."""
    img = np.zeros((3, 64, 64))
    img[:, 20:30, 10:18] = 1.0
    out, boxes, rec = weak_from_params(img, [(10.0, 20.0, 18.0, 30.0)], flip=True, crop_offset=(3.0, 2.0),
                                       crop_scale=0.95)
    x1, y1, x2, y2 = boxes[0]
    mask = out[0] > 0.5
    ys, xs = np.nonzero(mask)
    assert abs(xs.min() - x1) <= 1 and abs(xs.max() + 1 - x2) <= 1
    assert abs(ys.min() - y1) <= 1 and abs(ys.max() + 1 - y2) <= 1


def test_resample_identity():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    rec = AugRecord(16, 16)
    np.testing.assert_allclose(resample(img, rec, rec), img, atol=1e-12)


def test_strong_identity_and_cutout():
    img = np.random.default_rng(0).uniform(size=(3, 32, 32))
    out, rec = strong_from_params(img)
    assert np.array_equal(out, img) and rec.cutout_rects == []
    out, rec = strong_from_params(img, cutouts=[(4, 4, 20, 20)])
    assert np.all(out[:, 4:20, 4:20] == CUTOUT_FILL) and rec.cutout_rects == [(4.0, 4.0, 20.0, 20.0)]
    assert np.array_equal(out[:, 20:, :], img[:, 20:, :])


def test_brightness_clamps():
    out, _ = strong_from_params(np.full((3, 4, 4), 0.9), brightness=1.2)
    assert np.all(out == 1.0)


def test_apply_strong_ranges():
    rng = np.random.default_rng(5)
    img = np.random.default_rng(0).uniform(size=(3, 64, 64))
    counts = []
    for _ in range(50):
        out, rec = apply_strong(img, rng)
        assert 0.85 <= rec.brightness <= 1.15 and 0.85 <= rec.contrast <= 1.15 and 0 <= rec.blur_sigma <= 1
        assert 0.0 <= out.min() and out.max() <= 1.0
        counts.append(len(rec.cutout_rects))
    assert set(counts) <= {0, 1, 2} and len(set(counts)) > 1


# ---------------------------------------------------------------- dataset

def test_dataset_splits_and_quarantine():
    ds = generate_dataset(2, n_train=4, n_eval=3)
    assert [len(ds.source_train), len(ds.target_train), len(ds.target_eval)] == [4, 4, 3]
    assert ds.source_train.labeled and not ds.target_train.labeled
    assert set(ds.source_train.ids).isdisjoint(ds.target_train.ids)
    with pytest.raises(QuarantineError):
        ds.target_train.objects(0)
    with pytest.raises(QuarantineError):
        ds.target_eval.annotations.unseal()


def test_evaluation_may_unseal_but_not_during_training():
    from cmt.evaluation import target_annotations

    ds = generate_dataset(2, n_train=2, n_eval=2)
    gts = target_annotations(ds.target_eval)
    assert len(gts) == 2
    with training_guard():
        with pytest.raises(QuarantineError):
            target_annotations(ds.target_eval)


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(4, n_train=3, n_eval=2)
    m1 = save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert manifest_hash(back.manifest()) == manifest_hash(m1) == manifest_hash(ds.manifest())
    assert np.array_equal(back.target_eval.images, ds.target_eval.images)
    ann = json.loads((tmp_path / "d" / "source_train" / "annotations.json").read_text())
    assert set(ann) == {str(i) for i in ds.source_train.ids}
    assert back.source_train.objects(0) == ds.source_train.objects(0)


def test_dataset_pure_function():
    a = generate_dataset(9, n_train=3, n_eval=1)
    b = generate_dataset(9, n_train=3, n_eval=1)
    assert manifest_hash(a.manifest()) == manifest_hash(b.manifest())
