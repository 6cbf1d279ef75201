import itertools
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from buildpoly.data import (
    Scene,
    SynthConfig,
    build_targets,
    dataset_hash,
    generate_scene,
    generate_scenes,
    iter_batches,
    load_coco_subset,
    write_coco_dataset,
)
from buildpoly.errors import ContractError, DataFormatError
from buildpoly.geometry import (
    Polygon,
    PolygonSet,
    encode_polygons,
    exact_winding_inside,
    pixel_centers,
    signed_area,
)


def square_scene(size=32):
    sq = np.array([[8, 8], [8, 20], [20, 20], [20, 8]], float) / size
    tri = np.array([[24, 4], [28, 12], [22, 12]], float) / size
    return Scene(np.zeros((size, size, 3)), PolygonSet((Polygon(sq), Polygon(tri)), ((0, 1, 2, 3), (4, 5, 6))))


def is_simple(v):
    """No two non-adjacent edges touch (orientation test on every pair)."""

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            a, b, c, d = v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]
            if cross(a, b, c) * cross(a, b, d) <= 0 and cross(c, d, a) * cross(c, d, b) <= 0:
                return False
    return True


# synthesis -------------------------------------------------------------------------------


def test_generate_is_deterministic():
    cfg = SynthConfig(seed=3)
    a, b = generate_scene(cfg, seed=11), generate_scene(cfg, seed=11)
    assert np.array_equal(a.image, b.image)
    assert len(a.gt_polygons) == len(b.gt_polygons)
    for p, q in zip(a.gt_polygons.polygons, b.gt_polygons.polygons):
        assert np.array_equal(p.vertices, q.vertices)
    assert not np.array_equal(a.image, generate_scene(cfg, seed=12).image)


def test_scenes_depend_only_on_index():
    cfg = SynthConfig(seed=1)
    full = generate_scenes(cfg, 5)
    tail = generate_scenes(cfg, 2, start=3)
    for x, y in zip(full[3:], tail):
        assert np.array_equal(x.image, y.image) and x.image_id == y.image_id


def test_zero_buildings_is_background_only():
    scene = generate_scene(SynthConfig(min_buildings=0, max_buildings=0), seed=0)
    assert len(scene.gt_polygons) == 0
    assert not scene.mask().any()
    assert scene.corners().shape == (0, 2)


@pytest.mark.parametrize("seed", range(6))
def test_scene_invariants(seed):
    cfg = SynthConfig(shapes=("rect", "rotated", "lshape"), max_buildings=4)
    scene = generate_scene(cfg, seed=seed)
    assert scene.image.shape == (64, 64, 3)
    assert scene.image.min() >= 0 and scene.image.max() <= 1
    lo, hi = cfg.margin / 64, 1 - cfg.margin / 64
    for poly in scene.gt_polygons.polygons:
        v = poly.vertices
        assert len(v) >= 3
        assert signed_area(poly) < 0  # clockwise in image (x right, y down)
        assert is_simple(v)
        assert v.min() >= lo - 1e-12 and v.max() <= hi + 1e-12
    masks = [Scene(scene.image, PolygonSet((p,))).mask() for p in scene.gt_polygons.polygons]
    for a, b in itertools.combinations(masks, 2):
        assert not (a & b).any()


def test_mask_matches_exact_winding():
    scene = generate_scene(SynthConfig(shapes=("rotated", "lshape")), seed=4)
    centers = pixel_centers(64, 64).reshape(-1, 2)
    expect = np.array(
        [any(exact_winding_inside(c, p) for p in scene.gt_polygons.polygons) for c in centers]
    ).reshape(64, 64)
    assert np.array_equal(scene.mask(), expect)


def test_buildings_are_visible_in_image():
    cfg = SynthConfig(noise_sigma=0.0, texture=0.0, fill_range=(0.9, 1.0), background_range=(0.0, 0.1))
    scene = generate_scene(cfg, seed=2)
    m = scene.mask()
    assert scene.image[m].mean() > scene.image[~m].mean() + 0.5


def test_config_validation():
    with pytest.raises(ContractError):
        SynthConfig(shapes=("circle",))
    with pytest.raises(ContractError):
        SynthConfig(min_buildings=3, max_buildings=1)
    with pytest.raises(ContractError):
        SynthConfig(size=16, max_side=28)


def test_crowded_config_places_fewer_buildings(caplog):
    cfg = SynthConfig(size=32, min_buildings=8, max_buildings=8, min_side=12, max_side=14, max_tries=10)
    with caplog.at_level(logging.INFO):
        scene = generate_scene(cfg, seed=0)
    assert 1 <= len(scene.gt_polygons) < 8


# targets -------------------------------------------------------------------------------------


def test_targets_exact_detections_reproduce_encoding():
    scene = square_scene()
    corners = scene.corners()
    det = np.concatenate([corners, np.zeros((5, 2))])
    valid = np.r_[np.ones(7, bool), np.zeros(5, bool)]
    gt = build_targets(scene, det, valid)
    want = encode_polygons(scene.gt_polygons, 12)
    assert gt.perm == want
    assert gt.rings == [(0, 1, 2, 3), (4, 5, 6)]
    assert np.all(gt.perm.next_clockwise[7:] == np.arange(7, 12))
    assert gt.heatmap.sum() == 7
    assert gt.heatmap[8, 8] == 1 and gt.heatmap[4, 24] == 1
    assert gt.mask.sum() == 144 + scene.mask()[:, 20:].sum()


def test_targets_no_detection_in_cap_is_identity():
    scene = square_scene()
    det = np.full((10, 2), 0.99)
    gt = build_targets(scene, det)
    assert gt.perm.next_clockwise.tolist() == list(range(10))
    assert gt.unmatched_corners == 7
    assert not gt.matched.any()


def test_targets_shuffled_detections_index_aligned():
    scene = square_scene()
    rng = np.random.default_rng(0)
    corners = scene.corners()
    order = rng.permutation(9)
    det = np.concatenate([corners, [[0.5, 0.9], [0.9, 0.9]]])[order]
    det_j = det + rng.uniform(-0.5, 0.5, det.shape) / 32
    gt = build_targets(scene, det_j)
    inv = np.argsort(order)  # inv[k] = detection holding original point k
    assert gt.rings == [tuple(inv[:4]), tuple(inv[4:7])]
    np.testing.assert_array_equal(gt.positions[inv[:7]], corners)
    assert np.all(np.abs(gt.positions - det_j)[gt.matched] * 32 <= 3.0)
    assert sorted(gt.perm.next_clockwise) == list(range(9))


def test_short_ring_stays_on_diagonal():
    scene = square_scene()
    det = np.concatenate([scene.corners()[[0, 1, 4, 5, 6]], np.full((3, 2), 0.99)])
    gt = build_targets(scene, det)
    assert gt.dropped == 0
    assert gt.rings == [(2, 3, 4)]
    assert gt.perm.next_clockwise[:2].tolist() == [0, 1]
    assert gt.matched[:2].all()


def test_excess_corners_dropped(caplog):
    scene = square_scene()
    with caplog.at_level(logging.WARNING):
        gt = build_targets(scene, scene.corners()[:5])
    assert gt.dropped == 2
    assert "dropping 2" in caplog.text
    assert gt.rings == [(0, 1, 2, 3)]


def brute_force_matching(corners, det, cap):
    """Max matched count first, then min total distance, over all injective maps."""
    k, n = len(corners), len(det)
    d = np.linalg.norm(corners[:, None] - det[None], axis=-1)
    best = (0, 0.0)
    best_map = [-1] * k
    for sel in itertools.product(range(-1, n), repeat=k):
        used = [j for j in sel if j >= 0]
        if len(used) != len(set(used)) or any(j >= 0 and d[i, j] > cap for i, j in enumerate(sel)):
            continue
        key = (-len(used), sum(d[i, j] for i, j in enumerate(sel) if j >= 0))
        if best_map == [-1] * k or key < best:
            best, best_map = key, list(sel)
    return best_map


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_targets_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    size = 32
    corners = np.array([[8, 8], [8, 12], [12, 12], [11, 9], [10, 7.5]], float)
    det = corners[rng.permutation(5)][:4] + rng.uniform(-1, 1, (4, 2))
    det = np.concatenate([det, rng.uniform(6, 14, (2, 2))])
    ring = Polygon(corners / size)
    scene = Scene(np.zeros((size, size, 3)), PolygonSet((ring,), ((0, 1, 2, 3, 4),)))
    gt = build_targets(scene, det / size, cap_px=1.5)
    want = brute_force_matching(corners, det, 1.5)
    got = [-1] * 5
    for k, i in enumerate(range(5)):
        hit = np.nonzero(gt.matched & np.all(gt.positions == corners[k] / size, axis=1))[0]
        got[i] = int(hit[0]) if hit.size else -1
    d = np.linalg.norm(corners[:, None] - det[None], axis=-1)
    cost = lambda m: (sum(j >= 0 for j in m), sum(d[i, j] for i, j in enumerate(m) if j >= 0))  # noqa: E731
    assert cost(got)[0] == cost(want)[0]
    assert cost(got)[1] == pytest.approx(cost(want)[1], abs=1e-9)


def test_greedy_flag_claims_in_corner_order():
    scene = square_scene()
    c = scene.corners()
    # detection 0 sits between corners 0 and 1 but closer to 1
    det = np.array([c[0] * 0.4 + c[1] * 0.6, c[1] + 2.5 / 32 * np.array([1, 0])])
    greedy = build_targets(scene, det, greedy=True)
    optimal = build_targets(scene, det, greedy=False)
    assert greedy.matched.sum() <= optimal.matched.sum()


def test_dilated_heatmap():
    scene = square_scene()
    plain = scene.corner_heatmap()
    soft = scene.corner_heatmap(dilate=True)
    assert np.array_equal(soft == 1.0, plain == 1.0)
    assert soft[8, 9] == pytest.approx(np.exp(-0.5))
    assert soft[9, 9] == pytest.approx(np.exp(-1.0))
    assert soft[0, 0] == 0


# COCO files ---------------------------------------------------------------------------------------


def test_coco_round_trip_is_exact(tmp_path):
    scenes = generate_scenes(SynthConfig(shapes=("rect", "rotated", "lshape")), 6)
    manifest = write_coco_dataset(scenes, tmp_path, {"seed": 0})
    back = load_coco_subset(tmp_path)
    assert manifest["count"] == 6 and dataset_hash(tmp_path) == manifest["hash"]
    assert len(back) == 6
    for a, b in zip(scenes, back):
        assert a.image_id == b.image_id
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-12)
        assert len(a.gt_polygons) == len(b.gt_polygons)
        for p, q in zip(a.gt_polygons.polygons, b.gt_polygons.polygons):
            assert np.array_equal(p.vertices, q.vertices)


def test_manifest_hash_stable(tmp_path):
    cfg = SynthConfig(seed=7)
    h1 = write_coco_dataset(generate_scenes(cfg, 4), tmp_path / "a")["hash"]
    h2 = write_coco_dataset(generate_scenes(cfg, 4), tmp_path / "b")["hash"]
    h3 = write_coco_dataset(generate_scenes(SynthConfig(seed=8), 4), tmp_path / "c")["hash"]
    assert h1 == h2 != h3


def write_fixture(root, annotations, images=None):
    (root / "img").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((8, 8, 3), 200, np.uint8)).save(root / "img" / "a.png")
    Image.fromarray(np.zeros((16, 8, 3), np.uint8)).save(root / "img" / "b.png")
    doc = {
        "images": images if images is not None
        else [
            {"id": 1, "file_name": "img/a.png", "width": 8, "height": 8},
            {"id": 2, "file_name": "img/b.png", "width": 8, "height": 16},
        ],
        "annotations": annotations,
        "categories": [{"id": 1, "name": "building"}],
    }
    (root / "annotations.json").write_text(json.dumps(doc))


def test_hand_built_fixture(tmp_path, caplog):
    anns = [
        # counter-clockwise triangle in image coordinates, closed ring
        {"id": 1, "image_id": 1, "category_id": 1, "segmentation": [[2, 2, 6, 2, 2, 6, 2, 2]]},
        # already clockwise square
        {"id": 2, "image_id": 2, "category_id": 1, "segmentation": [[0, 0, 0, 8, 4, 8, 4, 0]]},
        # with a hole: skipped
        {"id": 3, "image_id": 2, "category_id": 1, "segmentation": [[0, 0, 0, 8, 8, 8, 8, 0], [2, 2, 2, 4, 4, 4]]},
    ]
    write_fixture(tmp_path, anns)
    with caplog.at_level(logging.WARNING):
        scenes = load_coco_subset(tmp_path / "annotations.json")
    assert "skipped" in caplog.text
    a, b = scenes
    assert a.image.shape == (8, 8, 3) and b.image.shape == (16, 8, 3)
    assert a.image[0, 0, 0] == pytest.approx(200 / 255)
    tri = a.gt_polygons.polygons[0].vertices
    assert len(tri) == 3 and signed_area(a.gt_polygons.polygons[0]) < 0
    assert {tuple(v) for v in tri} == {(0.25, 0.25), (0.75, 0.25), (0.25, 0.75)}
    np.testing.assert_array_equal(b.gt_polygons.polygons[0].vertices, [[0, 0], [0, 0.5], [0.5, 0.5], [0.5, 0]])
    assert len(b.gt_polygons) == 1


def test_empty_annotations_and_images(tmp_path):
    write_fixture(tmp_path, [], images=[])
    assert load_coco_subset(tmp_path) == []
    write_fixture(tmp_path / "x", [])
    scenes = load_coco_subset(tmp_path / "x")
    assert [len(s.gt_polygons) for s in scenes] == [0, 0]


@pytest.mark.parametrize(
    "text, needle",
    [
        ('{"images": [], "annotations": [', "line 1"),
        ('{"images": []}', "missing"),
        ('{"images": [], "annotations": [{"image_id": 1, "segmentation": [[1, 2, 3]]}]}', "annotations[0]"),
        ('{"images": [], "annotations": [{"image_id": 1, "segmentation": [["a", 1, 2, 3, 4, 5]]}]}', "non-numeric"),
        ('{"images": [{"id": 1, "file_name": "nope.png", "width": 4, "height": 4}], "annotations": []}', "not found"),
    ],
)
def test_malformed_files(tmp_path, text, needle):
    (tmp_path / "annotations.json").write_text(text)
    with pytest.raises(DataFormatError, match=needle.replace("[", r"\[").replace("]", r"\]")):
        load_coco_subset(tmp_path)


def test_image_size_mismatch(tmp_path):
    write_fixture(tmp_path, [], images=[{"id": 1, "file_name": "img/a.png", "width": 9, "height": 8}])
    with pytest.raises(DataFormatError, match="header"):
        load_coco_subset(tmp_path)


def test_iter_batches_cover_everything():
    scenes = generate_scenes(SynthConfig(), 7)
    batches = list(iter_batches(scenes, 3, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [3, 3, 1]
    assert sorted(s.image_id for b in batches for s in b) == list(range(7))
