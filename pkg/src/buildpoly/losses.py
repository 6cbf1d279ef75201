"""Training losses and the soft winding-number rasterizer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assignment import SoftAssignment
from .autodiff import Tensor
from .errors import ContractError
from .geometry import PermutationMatrix, PolygonSet, pixel_centers

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    omega: float = 100.0
    sigma: float = 10.0
    lam: float = 1e3
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    detection_reduction: str = "sum"
    mask_combine: str = "sum"
    raster_frame: str = "pixel"

    def __post_init__(self) -> None:
        if min(self.omega, self.sigma, self.lam) <= 0:
            raise ContractError("omega, sigma and lam must be positive")
        if len(self.weights) != 4 or min(self.weights) < 0:
            raise ContractError("weights must be four non-negative reals")


def detection_loss(y, y_true: np.ndarray, omega: float = 100.0, reduction: str = "sum") -> Tensor:
    """Class-weighted binary cross-entropy between heatmap ``y`` and sparse target."""
    y = ad.as_tensor(y)
    t = np.asarray(y_true, dtype=np.float64)
    if t.shape != y.shape:
        raise ContractError(f"heatmap shape {y.shape} != target shape {t.shape}")
    yc = ad.clamp(y, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.sum_(ad.log(yc) * t)
    neg = ad.sum_(ad.log(1.0 - yc) * (1.0 - t))
    loss = -(pos * omega) - neg
    if reduction == "mean":
        loss = loss / t.size
    elif reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return loss


def _target_indices(target) -> np.ndarray:
    if isinstance(target, PermutationMatrix):
        return target.next_clockwise[None]
    arr = np.asarray(target)
    if arr.ndim == 1:
        return arr[None].astype(np.int64)
    return arr.astype(np.int64)


def matching_loss(assignment: SoftAssignment, target) -> Tensor:
    """Negative log-likelihood of the target permutation's 1-entries.

    ``target`` is a :class:`PermutationMatrix`, or an integer array of
    next-vertex indices shaped ``(N,)`` or ``(B, N)`` for batched assignments.
    """
    log_p = assignment.log_p
    idx = _target_indices(target)
    n = log_p.shape[-1]
    if idx.shape[-1] != n:
        raise ContractError(f"target size {idx.shape[-1]} != assignment size {n}")
    rows = np.arange(n)
    if log_p.ndim == 2:
        picked = ad.getitem(log_p, (rows, idx[0]))
    else:
        b = np.arange(log_p.shape[0])[:, None]
        picked = ad.getitem(log_p, (b, rows[None, :], idx))
    return -ad.sum_(picked)


def _angles(pts, iu: np.ndarray, iv: np.ndarray, iw: np.ndarray):
    pts = ad.as_tensor(pts)
    u = ad.getitem(pts, iu)
    v = ad.getitem(pts, iv)
    w = ad.getitem(pts, iw)
    a, b = u - v, w - v
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]
    return ad.atan2(ad.abs_(cross), dot)


def _ring_arrays(polys) -> list:
    if isinstance(polys, PolygonSet):
        return [p.vertices for p in polys.polygons]
    return list(polys)


def angle_loss(
    pred_polys: Sequence | PolygonSet,
    gt_polys: Sequence | PolygonSet,
    sigma: float = 10.0,
    stats: dict | None = None,
) -> Tensor:
    """Sum over corners of ``1 - exp(-sigma * |angle_pred - angle_gt|)``, radians.

    ``pred_polys[k]`` and ``gt_polys[k]`` must list corresponding vertices in
    the same order. Triples with a repeated point in either ring are skipped;
    their number goes to ``stats["skipped"]`` when ``stats`` is given.
    """
    preds, gts = _ring_arrays(pred_polys), _ring_arrays(gt_polys)
    if len(preds) != len(gts):
        raise ContractError("pred and gt polygon counts differ")
    pieces, offset = [], 0
    iu, iv, iw = [], [], []
    for p, g in zip(preds, gts):
        k = p.shape[0]
        if k != np.shape(g)[0]:
            raise ContractError("corresponding polygons differ in vertex count")
        pieces.append((ad.as_tensor(p), np.asarray(g, dtype=np.float64)))
        idx = np.arange(k)
        iu.append(offset + np.roll(idx, 1))
        iv.append(offset + idx)
        iw.append(offset + np.roll(idx, -1))
        offset += k
    if not pieces:
        return Tensor(0.0)
    pred = ad.concat([p for p, _ in pieces], axis=0)
    gt = np.concatenate([g for _, g in pieces], axis=0)
    iu, iv, iw = np.concatenate(iu), np.concatenate(iv), np.concatenate(iw)

    def degenerate(pts):
        return np.all(pts[iu] == pts[iv], axis=1) | np.all(pts[iw] == pts[iv], axis=1)

    ok = ~(degenerate(pred.data) | degenerate(gt))
    skipped = int((~ok).sum())
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    if skipped:
        log.debug("angle loss skipped %d degenerate corners", skipped)
    if not ok.any():
        return Tensor(0.0)
    iu, iv, iw = iu[ok], iv[ok], iw[ok]
    delta = _angles(pred, iu, iv, iw) - _angles(Tensor(gt), iu, iv, iw).data
    return ad.sum_(1.0 - ad.exp(ad.abs_(delta) * -sigma))


def soft_winding(poly, height: int, width: int, lam: float = 1e3, frame: str = "pixel") -> Tensor:
    """Soft winding number at every pixel center divided by 2*pi, ``(H, W)``.

    Each edge contributes its subtended angle times a smooth sign
    ``lam*det / (1 + |lam*det|)``. ``frame`` picks the units the determinant
    is measured in: ``"normalized"`` image coordinates or ``"pixel"``.
    """
    v = ad.as_tensor(poly)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise ContractError(f"polygon needs (k>=3, 2) vertices, got {v.shape}")
    x = pixel_centers(height, width).reshape(-1, 2)
    if frame == "pixel":
        scale = np.array([width, height], dtype=np.float64)
        v = v * scale
        x = x * scale
    elif frame != "normalized":
        raise ContractError(f"unknown frame {frame!r}")
    k = v.shape[0]
    nxt = ad.getitem(v, np.roll(np.arange(k), -1))
    ax = v[:, 0:1] - x[None, :, 0]
    ay = v[:, 1:2] - x[None, :, 1]
    bx = nxt[:, 0:1] - x[None, :, 0]
    by = nxt[:, 1:2] - x[None, :, 1]
    det = ax * by - ay * bx
    dot = ax * bx + ay * by
    angle = ad.atan2(ad.abs_(det), dot)
    ld = det * lam
    soft_sign = ld / (ad.abs_(ld) + 1.0)
    total = ad.sum_(soft_sign * angle, axis=0) / (2 * math.pi)
    return total.reshape(height, width)


def soft_rasterize(poly, height: int, width: int, lam: float = 1e3, frame: str = "pixel") -> Tensor:
    """Soft occupancy mask in ``[0, 1]`` of one polygon, either orientation."""
    return ad.clamp(ad.abs_(soft_winding(poly, height, width, lam, frame)), 0.0, 1.0)


def combine_masks(masks: Sequence[Tensor], how: str = "sum") -> Tensor:
    if how == "sum":
        return ad.clamp(ad.sum_(ad.stack(masks), axis=0), 0.0, 1.0)
    if how == "max":
        return ad.max_(ad.stack(masks), axis=0)
    raise ContractError(f"unknown mask combination {how!r}")


def soft_iou(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    inter = ad.sum_(a * b)
    union = ad.sum_(a + b - a * b)
    return inter / union


def segmentation_loss(
    pred_polys: Sequence | PolygonSet,
    gt_mask: np.ndarray,
    lam: float = 1e3,
    combine: str = "sum",
    frame: str = "pixel",
) -> Tensor:
    """``1 - softIoU(combined soft masks, gt_mask)``."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    H, W = gt.shape
    polys = _ring_arrays(pred_polys)
    if not gt.any():
        return Tensor(0.0 if not polys else 1.0)
    if not polys:
        return Tensor(1.0)
    masks = [soft_rasterize(p, H, W, lam, frame) for p in polys]
    return 1.0 - soft_iou(combine_masks(masks, combine), gt)


def teacher_forced_polygons(positions, rings: Sequence[Sequence[int]]) -> list[Tensor]:
    """Rows of ``positions`` (``(N, 2)``) gathered along each ring."""
    pos = ad.as_tensor(positions)
    return [ad.getitem(pos, np.asarray(r, dtype=np.int64)) for r in rings]


def total_loss(terms: Sequence, config: LossConfig | None = None) -> Tensor:
    """Weighted sum of (detection, matching, angle, segmentation) losses."""
    cfg = config or LossConfig()
    if len(terms) != 4:
        raise ContractError("expected four loss terms")
    out = Tensor(0.0)
    for term, weight in zip(terms, cfg.weights):
        if weight:
            out = out + ad.as_tensor(term) * weight
    return out
