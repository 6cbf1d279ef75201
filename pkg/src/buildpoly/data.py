"""Synthetic building scenes, training targets, and COCO-subset datasets on disk."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, gaussian_filter, grey_dilation
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, DataFormatError
from .geometry import (
    Orientation,
    PermutationMatrix,
    Polygon,
    PolygonSet,
    pixel_centers,
    points_in_polygon,
    rasterize_polygons,
)

log = logging.getLogger(__name__)

SHAPES = ("rect", "rotated", "lshape")


@dataclass
class SynthConfig:
    size: int = 64
    min_buildings: int = 1
    max_buildings: int = 3
    shapes: tuple[str, ...] = ("rect", "lshape")
    min_side: float = 12.0
    max_side: float = 28.0
    margin: float = 2.0
    gap: int = 3
    fill_range: tuple[float, float] = (0.35, 1.0)
    background_range: tuple[float, float] = (0.0, 0.45)
    texture: float = 0.06
    noise_sigma: float = 0.02
    supersample: int = 4
    max_tries: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        self.shapes = tuple(self.shapes)
        bad = set(self.shapes) - set(SHAPES)
        if bad:
            raise ContractError(f"unknown shape families {sorted(bad)}")
        if not 0 <= self.min_buildings <= self.max_buildings:
            raise ContractError("need 0 <= min_buildings <= max_buildings")
        if self.max_side + 2 * self.margin > self.size:
            raise ContractError("max_side does not fit in the image")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    gt_polygons: PolygonSet
    image_id: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def corners(self) -> np.ndarray:
        if not len(self.gt_polygons):
            return np.zeros((0, 2))
        return np.concatenate([p.vertices for p in self.gt_polygons.polygons])

    def corner_heatmap(self, dilate: bool = False) -> np.ndarray:
        """1 at the pixel containing each corner, 0 elsewhere.

        With ``dilate`` each corner also spreads a 3x3 Gaussian bump (peak 1,
        unit sigma) onto its neighbours; overlapping bumps keep the maximum.
        """
        hm = np.zeros((self.height, self.width))
        c = self.corners()
        if len(c):
            cols = np.clip(np.floor(c[:, 0] * self.width).astype(int), 0, self.width - 1)
            rows = np.clip(np.floor(c[:, 1] * self.height).astype(int), 0, self.height - 1)
            hm[rows, cols] = 1.0
        if dilate:
            bump = np.exp(-0.5 * (np.arange(-1, 2)[:, None] ** 2 + np.arange(-1, 2)[None, :] ** 2))
            hm = grey_dilation(hm, structure=bump - 1.0)
        return hm

    def mask(self) -> np.ndarray:
        return rasterize_polygons(self.gt_polygons.polygons, self.height, self.width)


@dataclass
class GroundTruth:
    heatmap: np.ndarray  # (H, W) sparse corner targets
    perm: PermutationMatrix  # over detection indices
    positions: np.ndarray  # (N, 2): gt corner for matched detections, else detection
    mask: np.ndarray  # (H, W) bool union of gt polygons
    matched: np.ndarray  # (N,) bool
    rings: list[tuple[int, ...]] = field(default_factory=list)
    dropped: int = 0
    unmatched_corners: int = 0


# scene synthesis --------------------------------------------------------------


def _clockwise(v: np.ndarray) -> np.ndarray:
    poly = Polygon(v)
    return v if poly.orientation is Orientation.CLOCKWISE else v[::-1].copy()


def _make_shape(kind: str, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Vertices in pixel units, clockwise, inside the frame margin."""
    lo, hi = cfg.margin, cfg.size - cfg.margin
    w = rng.uniform(cfg.min_side, cfg.max_side)
    h = rng.uniform(cfg.min_side, cfg.max_side)
    if kind == "rotated":
        theta = rng.uniform(0.1, np.pi / 2 - 0.1)
        c, s = np.cos(theta), np.sin(theta)
        half = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2
        pts = half @ np.array([[c, s], [-s, c]])
        ext = pts.max(axis=0)
        if np.any(2 * ext > hi - lo):
            pts *= (hi - lo) / (2 * ext.max()) * 0.95
            ext = pts.max(axis=0)
        center = rng.uniform(lo + ext, hi - ext)
        return _clockwise(pts + center)
    x0 = rng.uniform(lo, hi - w)
    y0 = rng.uniform(lo, hi - h)
    x1, y1 = x0 + w, y0 + h
    if kind == "rect":
        return _clockwise(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
    cw = rng.uniform(0.3, 0.6) * w
    ch = rng.uniform(0.3, 0.6) * h
    corner = rng.integers(4)
    # rectangle minus one corner block; vertices listed counterclockwise in math terms
    if corner == 0:  # remove top-left (min x, min y)
        v = [[x0 + cw, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0 + ch], [x0 + cw, y0 + ch]]
    elif corner == 1:  # remove min-y, max-x
        v = [[x0, y0], [x1 - cw, y0], [x1 - cw, y0 + ch], [x1, y0 + ch], [x1, y1], [x0, y1]]
    elif corner == 2:  # remove max-x, max-y
        v = [[x0, y0], [x1, y0], [x1, y1 - ch], [x1 - cw, y1 - ch], [x1 - cw, y1], [x0, y1]]
    else:  # remove min-x, max-y
        v = [[x0, y0], [x1, y0], [x1, y1], [x0 + cw, y1], [x0 + cw, y1 - ch], [x0, y1 - ch]]
    return _clockwise(np.array(v, dtype=np.float64))


def _coverage(vertices_px: np.ndarray, size: int, ss: int) -> np.ndarray:
    """Fraction of each pixel covered, by ``ss x ss`` supersampling."""
    centers = pixel_centers(size * ss, size * ss) * size
    inside = points_in_polygon(centers, vertices_px).astype(np.float64)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def generate_scene(cfg: SynthConfig, seed: int | Sequence[int] | None = None, image_id: int = 0) -> Scene:
    """Render 0..max_buildings non-overlapping buildings over a textured background."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    S = cfg.size
    n_target = int(rng.integers(cfg.min_buildings, cfg.max_buildings + 1))
    occupied = np.zeros((S, S), dtype=bool)
    shapes: list[np.ndarray] = []
    tries = 0
    while len(shapes) < n_target and tries < cfg.max_tries:
        tries += 1
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        v = _make_shape(kind, cfg, rng)
        footprint = _coverage(v, S, 2) > 0
        if np.any(binary_dilation(footprint, iterations=cfg.gap) & occupied):
            continue
        occupied |= footprint
        shapes.append(v)
    if len(shapes) < n_target:
        log.debug("placed %d of %d buildings after %d tries", len(shapes), n_target, tries)

    base = rng.uniform(*cfg.background_range, size=3)
    texture = gaussian_filter(rng.normal(0.0, 1.0, (S, S)), 2.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    image = base[None, None, :] + cfg.texture * texture[:, :, None]
    for v in shapes:
        fill = rng.uniform(*cfg.fill_range, size=3)
        cov = _coverage(v, S, cfg.supersample)[:, :, None]
        image = image * (1.0 - cov) + fill[None, None, :] * cov
    image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)

    polys, sources, k = [], [], 0
    for v in shapes:
        polys.append(Polygon(v / S))
        sources.append(tuple(range(k, k + len(v))))
        k += len(v)
    return Scene(image, PolygonSet(tuple(polys), tuple(sources)), image_id)


def generate_scenes(cfg: SynthConfig, count: int, start: int = 0) -> list[Scene]:
    """Scenes ``start .. start+count-1``; scene ``i`` depends only on ``(cfg.seed, i)``."""
    return [generate_scene(cfg, seed=(cfg.seed, i), image_id=i) for i in range(start, start + count)]


# training targets -------------------------------------------------------------------


def _match_corners(
    corners: np.ndarray, detections: np.ndarray, valid: np.ndarray, cap: float, greedy: bool
) -> np.ndarray:
    """For each corner, the matched detection index or -1. Distances in pixels."""
    K = corners.shape[0]
    out = np.full(K, -1, dtype=np.int64)
    if K == 0 or not valid.any():
        return out
    d = np.linalg.norm(corners[:, None, :] - detections[None, :, :], axis=-1)
    d[:, ~valid] = np.inf
    if greedy:
        taken = np.zeros(detections.shape[0], dtype=bool)
        for k in range(K):
            row = np.where(taken, np.inf, d[k])
            j = int(np.argmin(row))
            if row[j] <= cap:
                out[k] = j
                taken[j] = True
        return out
    big = 1e6
    cost = np.where(d <= cap, d, big)
    rows, cols = linear_sum_assignment(cost)
    ok = cost[rows, cols] < big
    out[rows[ok]] = cols[ok]
    return out


def build_targets(
    scene: Scene,
    detected_positions: np.ndarray,
    valid: np.ndarray | None = None,
    cap_px: float = 3.0,
    greedy: bool = False,
    dilate_heatmap: bool = False,
) -> GroundTruth:
    """Align detections to ground-truth corners and build the target permutation.

    Corners and detections are matched one-to-one by minimum total distance,
    ignoring pairs further than ``cap_px`` pixels. Each ring's matched
    detections are linked in ring order; every other detection maps to itself.
    """
    det = np.asarray(detected_positions, dtype=np.float64)
    N = det.shape[0]
    valid = np.ones(N, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    scale = np.array([scene.width, scene.height], dtype=np.float64)
    rings = [np.asarray(p.vertices) for p in scene.gt_polygons.polygons]
    corners = np.concatenate(rings) if rings else np.zeros((0, 2))
    ring_ids = np.concatenate([np.full(len(r), i) for i, r in enumerate(rings)]) if rings else np.zeros(0, int)
    dropped = max(0, corners.shape[0] - N)
    if dropped:
        log.warning("dropping %d ground-truth corners beyond N=%d", dropped, N)
        corners, ring_ids = corners[:N], ring_ids[:N]
    match = _match_corners(corners * scale, det * scale, valid, cap_px, greedy)

    nxt = np.arange(N)
    positions = det.copy()
    matched = np.zeros(N, dtype=bool)
    out_rings = []
    for r in range(len(rings)):
        idx = match[(ring_ids == r) & (match >= 0)]
        sel = (ring_ids == r) & (match >= 0)
        positions[idx] = corners[sel]
        matched[idx] = True
        if idx.size >= 3:
            nxt[idx] = np.roll(idx, -1)
            out_rings.append(tuple(int(i) for i in idx))
    return GroundTruth(
        heatmap=scene.corner_heatmap(dilate_heatmap),
        perm=PermutationMatrix(nxt),
        positions=positions,
        mask=scene.mask(),
        matched=matched,
        rings=out_rings,
        dropped=dropped,
        unmatched_corners=int((match < 0).sum()),
    )


# COCO subset on disk -----------------------------------------------------------------

CATEGORY_ID = 1


def _image_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_coco_dataset(
    scenes: Sequence[Scene], root: str | Path, manifest: dict | None = None
) -> dict:
    """Write PNG images, ``annotations.json`` and ``manifest.json``; return the manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    digest = hashlib.sha256()
    ann_id = 1
    for scene in scenes:
        name = f"images/{scene.image_id:06d}.png"
        pixels = _image_bytes(scene.image)
        Image.fromarray(pixels).save(root / name)
        digest.update(pixels.tobytes())
        images.append(
            {"id": scene.image_id, "file_name": name, "width": scene.width, "height": scene.height}
        )
        for poly in scene.gt_polygons.polygons:
            px = poly.vertices * np.array([scene.width, scene.height])
            xs, ys = px[:, 0], px[:, 1]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": scene.image_id,
                    "category_id": CATEGORY_ID,
                    "segmentation": [px.reshape(-1).tolist()],
                    "area": abs(
                        0.5 * float(np.dot(xs, np.roll(ys, -1)) - np.dot(np.roll(xs, -1), ys))
                    ),
                    "bbox": [float(xs.min()), float(ys.min()), float(np.ptp(xs)), float(np.ptp(ys))],
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    coco = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": CATEGORY_ID, "name": "building"}],
    }
    ann_text = json.dumps(coco, sort_keys=True)
    (root / "annotations.json").write_text(ann_text, encoding="utf-8")
    digest.update(ann_text.encode("utf-8"))
    out = dict(manifest or {})
    out.update({"count": len(scenes), "hash": digest.hexdigest()})
    (root / "manifest.json").write_text(json.dumps(out, indent=2, sort_keys=True), encoding="utf-8")
    return out


def _ring_from_segmentation(seg, where: str) -> np.ndarray | None:
    if not isinstance(seg, list):
        log.warning("%s: non-polygon segmentation skipped", where)
        return None
    if len(seg) != 1:
        log.warning("%s: %d rings (holes or multi-part) skipped", where, len(seg))
        return None
    flat = seg[0]
    if not isinstance(flat, list) or len(flat) % 2 or len(flat) < 6:
        raise DataFormatError(f"{where}: polygon needs an even number (>= 6) of coordinates")
    try:
        ring = np.asarray(flat, dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{where}: non-numeric coordinates") from exc
    if len(ring) > 3 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    return ring


def load_coco_subset(path: str | Path) -> list[Scene]:
    """Read a COCO-style file (or a directory holding ``annotations.json``)."""
    path = Path(path)
    ann_path = path / "annotations.json" if path.is_dir() else path
    root = ann_path.parent
    try:
        coco = json.loads(ann_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{ann_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(coco, dict) or "images" not in coco or "annotations" not in coco:
        raise DataFormatError(f"{ann_path}: missing 'images' or 'annotations'")
    by_image: dict[int, list[np.ndarray]] = {}
    for i, ann in enumerate(coco["annotations"]):
        where = f"{ann_path}: annotations[{i}]"
        try:
            image_id = int(ann["image_id"])
            seg = ann["segmentation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}: {exc!r}") from exc
        ring = _ring_from_segmentation(seg, where)
        if ring is not None:
            by_image.setdefault(image_id, []).append(ring)
    scenes = []
    for i, info in enumerate(coco["images"]):
        where = f"{ann_path}: images[{i}]"
        try:
            image_id, fname = int(info["id"]), info["file_name"]
            width, height = int(info["width"]), int(info["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}: {exc!r}") from exc
        img_path = root / fname
        if not img_path.exists():
            raise DataFormatError(f"{where}: image file {img_path} not found")
        pixels = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        if pixels.shape[:2] != (height, width):
            raise DataFormatError(f"{where}: image is {pixels.shape[:2]}, header says {(height, width)}")
        scale = np.array([width, height], dtype=np.float64)
        polys, sources, k = [], [], 0
        for ring in by_image.get(image_id, []):
            norm = _clockwise(ring / scale)
            polys.append(Polygon(norm))
            sources.append(tuple(range(k, k + len(norm))))
            k += len(norm)
        scenes.append(Scene(pixels, PolygonSet(tuple(polys), tuple(sources)), image_id))
    return scenes


def dataset_hash(root: str | Path) -> str:
    return json.loads((Path(root) / "manifest.json").read_text(encoding="utf-8"))["hash"]


def synth_config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["shapes"] = list(cfg.shapes)
    d["fill_range"] = list(cfg.fill_range)
    d["background_range"] = list(cfg.background_range)
    return d


def iter_batches(scenes: Sequence[Scene], batch_size: int, rng: np.random.Generator | None = None) -> Iterable[list[Scene]]:
    order = np.arange(len(scenes)) if rng is None else rng.permutation(len(scenes))
    for i in range(0, len(order), batch_size):
        yield [scenes[j] for j in order[i : i + batch_size]]
