"""Polygon-aware evaluation: IoU, C-IoU, max tangent angle error, N-ratio, AP/AR."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .geometry import Polygon, PolygonSet, rasterize_polygon, rasterize_polygons

UNMATCHED_ANGLE = 90.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def relative_difference(n_pred: int, n_gt: int) -> float:
    if n_pred < 0 or n_gt < 0:
        raise ContractError("vertex counts must be non-negative")
    total = n_pred + n_gt
    return 0.0 if total == 0 else abs(n_pred - n_gt) / total


def c_iou(a: np.ndarray, b: np.ndarray, n_pred: int, n_gt: int) -> float:
    """Mask IoU discounted by the relative vertex-count difference."""
    return mask_iou(a, b) * (1.0 - relative_difference(n_pred, n_gt))


def n_ratio(pred_vertex_count: int, gt_vertex_count: int) -> float:
    if gt_vertex_count <= 0:
        raise ContractError("ground-truth vertex count must be positive")
    return pred_vertex_count / gt_vertex_count


# max tangent angle error -------------------------------------------------------------


def _ring(poly: Polygon | np.ndarray, scale: np.ndarray) -> np.ndarray:
    v = poly.vertices if isinstance(poly, Polygon) else np.asarray(poly, dtype=np.float64)
    return v * scale


def _sample_contour(v: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Points every ``spacing`` along the closed ring and their edge directions."""
    a, b = v, np.roll(v, -1, axis=0)
    seg = b - a
    length = np.linalg.norm(seg, axis=1)
    keep = length > 0
    a, seg, length = a[keep], seg[keep], length[keep]
    start = np.concatenate([[0.0], np.cumsum(length)[:-1]])
    total = length.sum()
    s = np.arange(0.0, total, spacing)
    edge = np.clip(np.searchsorted(start, s, side="right") - 1, 0, len(length) - 1)
    t = (s - start[edge]) / length[edge]
    pts = a[edge] + seg[edge] * t[:, None]
    return pts, np.arctan2(seg[edge, 1], seg[edge, 0])


def _acute_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.abs(np.degrees(a - b)) % 180.0
    return np.minimum(d, 180.0 - d)


def _contour_error(pred: np.ndarray, gt: np.ndarray, spacing: float, corner_margin: float = 0.0) -> float:
    pts, ang = _sample_contour(pred, spacing)
    a, b = gt, np.roll(gt, -1, axis=0)
    seg = b - a
    len2 = np.einsum("ij,ij->i", seg, seg)
    keep = len2 > 0
    a, seg, len2 = a[keep], seg[keep], len2[keep]
    gt_ang = np.arctan2(seg[:, 1], seg[:, 0])
    rel = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pkj,kj->pk", rel, seg) / len2, 0.0, 1.0)
    near = a[None] + t[..., None] * seg[None]
    dist = np.linalg.norm(pts[:, None, :] - near, axis=-1)
    err = _acute_difference(ang[:, None], gt_ang[None, :])
    # a nearest point at a shared vertex has two tangents; both edges tie on
    # distance and the better-aligned one is taken
    best = dist.min(axis=1, keepdims=True)
    tied = dist <= best + 1e-9 * max(1.0, float(best.max()))
    per_sample = np.where(tied, err, np.inf).min(axis=1)
    if corner_margin > 0:
        to_corner = np.linalg.norm(pts[:, None, :] - gt[None, :, :], axis=-1).min(axis=1)
        per_sample = per_sample[to_corner > corner_margin]
    return float(per_sample.max()) if per_sample.size else 0.0


def _pair_by_iou(
    pred: Sequence[Polygon], gt: Sequence[Polygon], height: int, width: int
) -> list[int]:
    """Index of the best-IoU ground-truth polygon for each prediction, -1 if none overlap."""
    gm = [rasterize_polygon(g, height, width) for g in gt]
    out = []
    for p in pred:
        pm = rasterize_polygon(p, height, width)
        ious = [mask_iou(pm, g) if (pm & g).any() else 0.0 for g in gm]
        out.append(int(np.argmax(ious)) if ious and max(ious) > 0 else -1)
    return out


def tangent_errors(
    pred: PolygonSet,
    gt: PolygonSet,
    shape: tuple[int, int],
    sample_spacing: float = 1.0,
    corner_margin: float = 0.0,
) -> list[float]:
    """Per-predicted-polygon max tangent angle error in degrees.

    Coordinates are normalized; ``shape`` is ``(height, width)`` in pixels and
    ``sample_spacing`` is in pixels. Predictions overlapping no ground truth
    score 90 degrees. With no predictions the list holds a single 90 if there
    is ground truth, else it is empty.

    ``corner_margin`` (pixels) skips samples that close to a ground-truth
    vertex. It is a diagnostic: near a corner the nearest ground-truth point
    can sit on the perpendicular edge, which scores 90 degrees for any
    sub-pixel corner misplacement.
    """
    H, W = shape
    scale = np.array([W, H], dtype=np.float64)
    if not len(pred):
        return [UNMATCHED_ANGLE] if len(gt) else []
    pairs = _pair_by_iou(pred.polygons, gt.polygons, H, W)
    out = []
    for p, j in zip(pred.polygons, pairs):
        if j < 0:
            out.append(UNMATCHED_ANGLE)
        else:
            out.append(
                _contour_error(_ring(p, scale), _ring(gt.polygons[j], scale), sample_spacing, corner_margin)
            )
    return out


def max_tangent_angle_error(
    pred: PolygonSet,
    gt: PolygonSet,
    shape: tuple[int, int],
    sample_spacing: float = 1.0,
) -> float:
    """Mean over predicted polygons of the max tangent angle error, degrees."""
    errs = tangent_errors(pred, gt, shape, sample_spacing)
    return float(np.mean(errs)) if errs else 0.0


# simplified AP / AR --------------------------------------------------------------------


def _instance_ious(pred: PolygonSet, gt: PolygonSet, height: int, width: int) -> np.ndarray:
    pm = [rasterize_polygon(p, height, width) for p in pred.polygons]
    gm = [rasterize_polygon(g, height, width) for g in gt.polygons]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            out[i, j] = mask_iou(a, b)
    return out


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # make precision monotone non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, levels, side="left")
    return float(np.where(idx < tp.size, precision[np.minimum(idx, tp.size - 1)], 0.0).mean())


def simplified_ap_ar(
    preds: Sequence[tuple[PolygonSet, Sequence[float]]],
    gts: Sequence[PolygonSet],
    iou_thresholds: Sequence[float] = (0.5, 0.75),
    shape: tuple[int, int] = (64, 64),
    resolution: int = 1,
) -> dict[float, tuple[float, float]]:
    """``{threshold: (AP, AR)}`` with greedy confidence-ordered matching.

    Predictions across all images are visited by descending confidence; each
    takes the highest-IoU unmatched ground truth of its image if that IoU
    reaches the threshold. Masks are rasterized at ``shape * resolution``.
    """
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    H, W = shape[0] * resolution, shape[1] * resolution
    ious, confs, owner = [], [], []
    for i, ((pset, conf), g) in enumerate(zip(preds, gts)):
        conf = np.asarray(conf, dtype=np.float64).reshape(-1)
        if conf.size != len(pset):
            raise ContractError(f"image {i}: {conf.size} confidences for {len(pset)} polygons")
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise ContractError(f"image {i}: confidences must lie in [0, 1]")
        ious.append(_instance_ious(pset, g, H, W))
        confs.extend(conf.tolist())
        owner.extend((i, k) for k in range(conf.size))
    n_gt = sum(len(g) for g in gts)
    order = np.argsort(-np.asarray(confs), kind="stable")
    out = {}
    for thr in iou_thresholds:
        taken = [np.zeros(len(g), dtype=bool) for g in gts]
        tp = np.zeros(order.size)
        for rank, o in enumerate(order):
            img, k = owner[o]
            row = np.where(taken[img], -1.0, ious[img][k])
            if row.size and row.max() >= thr:
                j = int(np.argmax(row))
                taken[img][j] = True
                tp[rank] = 1.0
        ap = interpolated_ap(tp, n_gt)
        if n_gt == 0:
            ar = 1.0 if order.size == 0 else 0.0
        else:
            ar = float(tp.sum() / n_gt)
        out[float(thr)] = (ap, ar)
    return out


# report ---------------------------------------------------------------------------------


@dataclass
class EvalReport:
    iou: float
    c_iou: float
    mta_degrees: float
    n_ratio: float
    ap50: float
    ap75: float
    ar50: float
    ar75: float
    per_image: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (0 <= self.iou <= 1 and 0 <= self.c_iou <= 1):
            raise ContractError("iou and c_iou must lie in [0, 1]")
        if not 0 <= self.mta_degrees <= 90:
            raise ContractError("mta must lie in [0, 90] degrees")
        if self.n_ratio < 0:
            raise ContractError("n_ratio must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [
            ("IoU", f"{100 * self.iou:.1f}"),
            ("C-IoU", f"{100 * self.c_iou:.1f}"),
            ("MTA (deg)", f"{self.mta_degrees:.1f}"),
            ("N ratio", f"{self.n_ratio:.2f}"),
            ("AP50 (simplified)", f"{100 * self.ap50:.1f}"),
            ("AP75 (simplified)", f"{100 * self.ap75:.1f}"),
            ("AR50 (simplified)", f"{100 * self.ar50:.1f}"),
            ("AR75 (simplified)", f"{100 * self.ar75:.1f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>6}" for k, v in rows)


def _evaluate_image(pred: PolygonSet, gt: PolygonSet, shape: tuple[int, int], spacing: float) -> dict:
    H, W = shape
    pm = rasterize_polygons(pred.polygons, H, W)
    gm = rasterize_polygons(gt.polygons, H, W)
    n_p, n_g = pred.vertex_count, gt.vertex_count
    return {
        "iou": mask_iou(pm, gm),
        "c_iou": c_iou(pm, gm, n_p, n_g),
        "mta": tangent_errors(pred, gt, shape, spacing),
        "n_pred_polygons": len(pred),
        "n_gt_polygons": len(gt),
        "n_pred_vertices": n_p,
        "n_gt_vertices": n_g,
    }


def evaluate(
    preds: Sequence[tuple[PolygonSet, Sequence[float]]],
    gts: Sequence[PolygonSet],
    shape: tuple[int, int],
    sample_spacing: float = 1.0,
    workers: int = 1,
) -> EvalReport:
    """Dataset-level report; IoU and C-IoU are per-image means, MTA a per-polygon mean."""
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    if not gts:
        raise ContractError("nothing to evaluate")

    def one(i: int) -> dict:
        return _evaluate_image(preds[i][0], gts[i], shape, sample_spacing)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per = list(pool.map(one, range(len(gts))))
    else:
        per = [one(i) for i in range(len(gts))]
    for i, row in enumerate(per):
        row["image"] = i
    mta = [e for row in per for e in row["mta"]]
    n_gt = sum(r["n_gt_vertices"] for r in per)
    n_pred = sum(r["n_pred_vertices"] for r in per)
    ap = simplified_ap_ar(preds, gts, (0.5, 0.75), shape)
    return EvalReport(
        iou=float(np.mean([r["iou"] for r in per])),
        c_iou=float(np.mean([r["c_iou"] for r in per])),
        mta_degrees=float(np.mean(mta)) if mta else 0.0,
        n_ratio=n_ratio(n_pred, n_gt) if n_gt else (0.0 if n_pred == 0 else math.inf),
        ap50=ap[0.5][0],
        ap75=ap[0.75][0],
        ar50=ap[0.5][1],
        ar75=ap[0.75][1],
        per_image=per,
    )
