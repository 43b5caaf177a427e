import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from hedfsod.data import load_split, render_split
from hedfsod.geometry import Box, iou
from hedfsod.synthbench import (
    BASE_DOMAIN,
    DEFAULT_DOMAINS,
    Annotation,
    AnnotationSet,
    DatasetError,
    KShotError,
    build_cd_mixed,
    check_disjoint,
    coco_dict,
    generate_benchmark,
    generate_domain,
    instance_counts,
    render,
    sample_kshot,
    sets_from_coco,
)


def _pool(spec, n, size=48, seed=0):
    return render_split(spec.with_size(size), seed, "train", range(n)).sets


@pytest.fixture(scope="module")
def pool():
    return _pool(DEFAULT_DOMAINS[0], 160)


def test_generation_is_byte_identical(tmp_path):
    spec = DEFAULT_DOMAINS[1].with_size(32)
    a = generate_domain(spec, tmp_path / "a", 6, 4, seed=3, n_val=2)
    b = generate_domain(spec, tmp_path / "b", 6, 4, seed=3, n_val=2)
    for split in ("train", "val", "test"):
        assert (a / "annotations" / f"{split}.json").read_bytes() == (b / "annotations" / f"{split}.json").read_bytes()
    for f in sorted((a / "images").iterdir()):
        assert f.read_bytes() == (b / "images" / f.name).read_bytes()


def test_render_is_pure_in_its_index():
    spec = DEFAULT_DOMAINS[3].with_size(32)
    later = [render(spec, 1, "test", i)[0] for i in range(5)]
    alone = render(spec, 1, "test", 4)[0]
    assert np.array_equal(later[4], alone)


def test_single_object_range():
    spec = replace(DEFAULT_DOMAINS[2].with_size(32), objects_per_image=(1, 1))
    for i in range(20):
        _, objs = render(spec, 0, "train", i)
        assert len(objs) == 1


@pytest.mark.parametrize("spec", DEFAULT_DOMAINS + (BASE_DOMAIN,), ids=lambda s: s.name)
def test_boxes_agree_with_pixel_mask_oracle(spec):
    """Re-measure each object from the image: exact-colour pixels, connected components inside its box."""
    s = 64
    spec = spec.with_size(s)
    colors = {c.id: np.round(np.asarray(c.color) * 255).astype(np.uint8) for c in spec.categories}
    checked = 0
    for i in range(15):
        img, objs = render(spec, 0, "test", i)
        for box, cat in objs:
            hit = np.all(img == colors[cat], axis=-1)
            labels, _ = ndimage.label(hit)
            x1, y1, x2, y2 = (int(round(v * s)) for v in box.corners())
            ids = np.unique(labels[y1:y2, x1:x2])
            ys, xs = np.nonzero(np.isin(labels, ids[ids > 0]))
            measured = Box.from_corners(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, scale=s)
            assert iou(box, measured) >= 0.95
            checked += 1
    assert checked >= 15


def test_domains_are_disjoint():
    check_disjoint(DEFAULT_DOMAINS + (BASE_DOMAIN,))
    with pytest.raises(DatasetError):
        check_disjoint([DEFAULT_DOMAINS[0], replace(DEFAULT_DOMAINS[1], categories=DEFAULT_DOMAINS[0].categories)])


def test_benchmark_rejects_overlapping_domains(tmp_path):
    clash = replace(DEFAULT_DOMAINS[1], categories=DEFAULT_DOMAINS[0].categories)
    with pytest.raises(DatasetError):
        generate_benchmark(tmp_path, [DEFAULT_DOMAINS[0], clash], 2, 0, 2, image_size=32)


def test_benchmark_layout(tmp_path):
    generate_benchmark(tmp_path, DEFAULT_DOMAINS[:2], 40, 4, 4, seed=0, shots=(1, 2), image_size=32)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [d["name"] for d in manifest["domains"]] == ["filled_noise", "outlined"]
    split = load_split(tmp_path, "outlined", "train_2shot_seed0")
    assert set(instance_counts(split.sets).values()) == {2}
    assert split.images.shape[1:] == (32, 32, 3)


@pytest.mark.parametrize("k", [1, 5, 10])
def test_kshot_counts_are_exact(pool, k):
    cats = DEFAULT_DOMAINS[0].category_ids
    chosen = sample_kshot(pool, cats, k, seed=0)
    assert instance_counts(chosen) == {c: k for c in cats}


def test_kshot_seeds_differ_with_equal_counts(pool):
    cats = DEFAULT_DOMAINS[0].category_ids
    a = sample_kshot(pool, cats, 5, seed=0)
    b = sample_kshot(pool, cats, 5, seed=1)
    assert [s.image_id for s in a] != [s.image_id for s in b]
    assert instance_counts(a) == instance_counts(b)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_kshot_exactness_property(pool, k, seed):
    cats = DEFAULT_DOMAINS[0].category_ids
    chosen = sample_kshot(pool, cats, k, seed)
    assert instance_counts(chosen) == {c: k for c in cats}
    assert len({s.image_id for s in chosen}) == len(chosen)


def test_kshot_insufficient_instances():
    cats = DEFAULT_DOMAINS[0].category_ids
    small = _pool(DEFAULT_DOMAINS[0], 6)
    with pytest.raises(KShotError):
        sample_kshot(small, cats, 10, seed=0)
    foreign = [AnnotationSet(0, "x.png", [Annotation(Box(0.5, 0.5, 0.2, 0.2), 999)])]
    with pytest.raises(DatasetError):
        sample_kshot(foreign, cats, 1, seed=0)


def test_coco_round_trip():
    spec = DEFAULT_DOMAINS[4].with_size(32)
    sets = render_split(spec, 0, "val", range(5)).sets
    back = sets_from_coco(json.loads(json.dumps(coco_dict(spec, sets))))
    assert [s.image_id for s in back] == [s.image_id for s in sets]
    for s, t in zip(sets, back):
        assert [o.category for o in s.objects] == [o.category for o in t.objects]
        for o, p in zip(s.objects, t.objects):
            assert np.allclose(o.box.as_tuple(), p.box.as_tuple(), atol=1e-6)


def _tests(n):
    return [(d.name, d.category_ids, _pool(d, n, size=32)) for d in DEFAULT_DOMAINS]


def test_cd_mixed_single_domain_is_the_clean_set():
    name, cats, test = _tests(3)[0]
    mixed = build_cd_mixed(name, cats, test)
    assert len(mixed.sets) == len(test)
    assert [s.objects for s in mixed.sets] == [s.objects for s in test]


def test_cd_mixed_cardinality():
    doms = [(d.name, d.category_ids, _pool(d, 100, size=16)) for d in DEFAULT_DOMAINS]
    name, cats, test = doms[0]
    mixed = build_cd_mixed(name, cats, test, doms[1:])
    assert len(mixed.sets) == 500
    assert sum(1 for s in mixed.sets if s.objects) == sum(1 for s in test if s.objects)
    assert mixed.sources.count(name) == 100
    assert mixed.num_gt == sum(len(s.objects) for s in test)
    assert len({s.image_id for s in mixed.sets}) == 500


def test_cd_mixed_rejects_overlap():
    doms = _tests(2)
    name, cats, test = doms[0]
    with pytest.raises(DatasetError):
        build_cd_mixed(name, cats, test, [("clash", cats, doms[1][2])])
