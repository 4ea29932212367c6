import json

import numpy as np
import pytest

from ccdet.dataset import (ANNOTATIONS_FILE, APD, HC, AnnotatedImage, BoxLabel, SplitPlan, arc_masks,
                           describe_corpus, generate_synthetic, jitter_slice, load_corpus, sample_box_sizes,
                           sample_subject_geometry, save_corpus, select, split, tight_box)
from ccdet.errors import DatasetError


def _thickness_profile(geom, size, bin_deg=10.0):
    """Mean radial thickness per angular bin: pixel count / arc length at the centre radius."""
    shape, _ = arc_masks(geom, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = (np.degrees(np.arctan2(xx - geom.cx, geom.cy - yy)) + 180.0) % 360.0 - 180.0
    half = geom.span_deg / 2.0
    edges = np.arange(-half, half - bin_deg + 1e-9, bin_deg)
    out = []
    for lo in edges:
        sel = shape & (d >= lo) & (d < lo + bin_deg)
        out.append((lo + bin_deg / 2, sel.sum() / (geom.radius * np.radians(bin_deg))))
    return out


# ---------- generator ----------

def test_generator_is_deterministic():
    a = generate_synthetic(2, 2, 64, seed=11)
    b = generate_synthetic(2, 2, 64, seed=11)
    assert [x.name for x in a] == [x.name for x in b]
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.boxes == y.boxes
        np.testing.assert_array_equal(x.gt_region_mask, y.gt_region_mask)


def test_generator_seed_matters():
    a = generate_synthetic(1, 1, 64, seed=0)
    b = generate_synthetic(1, 1, 64, seed=1)
    assert not np.array_equal(a[0].image, b[0].image)


def test_generator_counts_and_labels():
    corpus = generate_synthetic(3, 4, 64, seed=0)
    assert len(corpus) == 24
    summary = describe_corpus(corpus)
    assert summary.n_subjects == 6
    assert summary.subjects_per_class == {"HC": 3, "APD": 3}
    assert summary.slices_per_subject == {4: 6}
    assert summary.image_size == 64
    assert {x.subtype for x in corpus if x.class_id == APD} == {"MSA", "PSP"}
    assert all(x.subtype is None for x in corpus if x.class_id == HC)
    assert corpus[0].name == "HC001_s00.png"


def test_images_are_quantized_and_in_range():
    for item in generate_synthetic(1, 2, 64, seed=3):
        assert item.image.dtype == np.float32
        assert 0.0 <= item.image.min() and item.image.max() <= 1.0
        assert np.allclose(item.image * 255, np.rint(item.image * 255), atol=1e-3)


def test_box_contains_midbody_region():
    for item in generate_synthetic(2, 1, 128, seed=5):
        b = item.boxes[0]
        x1, y1, x2, y2 = (int(v) for v in b.box)
        assert item.gt_region_mask[:y1].sum() == 0 and item.gt_region_mask[y2:].sum() == 0
        assert 0 <= x1 < x2 <= 128 and 0 <= y1 < y2 <= 128
        assert item.gt_region_mask.any()


def test_tight_box_end_exclusive():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:5, 3:8] = True
    assert tight_box(mask, 1) == BoxLabel(1, 3.0, 2.0, 8.0, 5.0)
    with pytest.raises(DatasetError):
        tight_box(np.zeros((4, 4), dtype=bool), 0)


@pytest.mark.parametrize("seed", range(5))
def test_hc_thickness_is_uniform(seed):
    geom = sample_subject_geometry(np.random.default_rng(seed), 256, HC)
    values = np.array([t for _, t in _thickness_profile(geom, 256)])
    assert values.std() / values.mean() < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_apd_midbody_is_thinner(seed):
    geom = sample_subject_geometry(np.random.default_rng(seed), 256, APD)
    profile = _thickness_profile(geom, 256)
    mid = [t for centre, t in profile if abs(centre) <= geom.span_deg / 6.0 - 5.0]
    outer = [t for centre, t in profile if abs(centre) >= geom.span_deg / 6.0 + 5.0]
    assert mid and outer
    assert np.mean(mid) / np.mean(outer) < 0.7


def test_class_midbody_thickness_overlap_is_small():
    rng = np.random.default_rng(0)
    thickness = {c: np.array([jitter_slice(sample_subject_geometry(rng, 128, c), rng, 128).midbody_thickness
                              for _ in range(500)]) for c in (HC, APD)}
    hc, apd = thickness[HC], thickness[APD]
    overlapping = (apd >= hc.min()).sum() + (hc <= apd.max()).sum()
    assert overlapping / (hc.size + apd.size) < 0.10
    assert apd.mean() < hc.mean()


def test_midbody_mask_lies_in_the_middle_third():
    geom = sample_subject_geometry(np.random.default_rng(0), 128, APD)
    shape, midbody = arc_masks(geom, 128)
    assert midbody.any()
    assert not (midbody & ~shape).any()


def test_sample_box_sizes_shape():
    wh = sample_box_sizes(20, 128, seed=0)
    assert wh.shape == (20, 2)
    assert (wh > 0).all() and (wh <= 128).all()


def test_generator_rejects_bad_size():
    with pytest.raises(DatasetError):
        generate_synthetic(1, 1, 100)


# ---------- split ----------

def _fake_corpus(per_class=20):
    image = np.zeros((32, 32), dtype=np.float32)
    corpus = []
    for c, prefix in ((HC, "HC"), (APD, "APD")):
        for k in range(per_class):
            corpus.append(AnnotatedImage(image, f"{prefix}{k:03d}", 0, [BoxLabel(c, 1, 1, 10, 10)]))
    return corpus


def test_split_sizes():
    plans = split(_fake_corpus(), fraction=0.8, rounds=3, seed=0)
    assert len(plans) == 3
    for plan in plans:
        assert len(plan.train_subjects) == 32 and len(plan.test_subjects) == 8
        assert sum(s.startswith("HC") for s in plan.test_subjects) == 4


@pytest.mark.parametrize("seed", range(100))
def test_split_never_leaks(seed):
    for plan in split(_fake_corpus(5), fraction=0.8, rounds=3, seed=seed):
        assert not set(plan.train_subjects) & set(plan.test_subjects)
        assert len(plan.train_subjects) + len(plan.test_subjects) == 10


def test_split_rounds_differ():
    plans = split(_fake_corpus(), rounds=3, seed=0)
    assert len({tuple(p.test_subjects) for p in plans}) >= 2


def test_split_is_deterministic():
    a = split(_fake_corpus(), rounds=2, seed=4)
    b = split(_fake_corpus(), rounds=2, seed=4)
    assert [p.model_dump() for p in a] == [p.model_dump() for p in b]


def test_split_needs_two_subjects_per_class():
    corpus = _fake_corpus(2)[:3]  # HC000, HC001, APD000
    with pytest.raises(DatasetError, match="APD"):
        split(corpus)


def test_split_needs_two_classes():
    corpus = [x for x in _fake_corpus(3) if x.class_id == HC]
    with pytest.raises(DatasetError, match="2 classes"):
        split(corpus)


def test_split_plan_rejects_overlap():
    with pytest.raises(ValueError):
        SplitPlan(round_id=0, train_subjects=["a", "b"], test_subjects=["b"], fraction=0.5)


def test_select_by_subject():
    corpus = _fake_corpus(3)
    assert [x.subject_id for x in select(corpus, ["HC001", "APD002"])] == ["HC001", "APD002"]


# ---------- on-disk corpus ----------

def test_save_load_round_trip(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert len(loaded) == len(small_corpus)
    for a, b in zip(small_corpus, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt_region_mask, b.gt_region_mask)
        assert (a.subject_id, a.slice_index, a.boxes, a.subtype) == (b.subject_id, b.slice_index, b.boxes, b.subtype)


def test_load_counts_subjects(tmp_path):
    save_corpus(generate_synthetic(4, 8, 32, seed=0), tmp_path)
    summary = describe_corpus(load_corpus(tmp_path))
    assert summary.n_images == 64
    assert summary.n_subjects == 8
    assert summary.slices_per_subject == {8: 8}


def _rewrite_first_record(root, **changes):
    ann = root / ANNOTATIONS_FILE
    lines = ann.read_text(encoding="utf-8").splitlines()
    rec = json.loads(lines[0])
    rec.update(changes)
    lines[0] = json.dumps(rec)
    ann.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_rejects_inverted_box(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    _rewrite_first_record(tmp_path, box=[20, 10, 10, 30])
    with pytest.raises(DatasetError, match=f"{ANNOTATIONS_FILE}:1"):
        load_corpus(tmp_path)


def test_load_rejects_box_out_of_bounds(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    _rewrite_first_record(tmp_path, box=[10, 10, 70, 30])
    with pytest.raises(DatasetError, match="out of bounds"):
        load_corpus(tmp_path)


def test_load_rejects_missing_image(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    _rewrite_first_record(tmp_path, image="images/nope.png")
    with pytest.raises(DatasetError, match="not found"):
        load_corpus(tmp_path)


def test_load_rejects_conflicting_subject_class(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    _rewrite_first_record(tmp_path, **{"class": 1})
    with pytest.raises(DatasetError, match="more than one class"):
        load_corpus(tmp_path)


def test_load_rejects_malformed_json(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    ann = tmp_path / ANNOTATIONS_FILE
    ann.write_text(ann.read_text(encoding="utf-8") + "{not json\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="malformed"):
        load_corpus(tmp_path)


def test_load_missing_annotations(tmp_path):
    with pytest.raises(DatasetError):
        load_corpus(tmp_path)
