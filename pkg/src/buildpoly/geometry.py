"""Polygon data model, permutation encoding and exact geometric predicates.

Coordinates are normalized image coordinates: ``x`` runs along image columns
and ``y`` along image rows, both in ``[0, 1]`` relative to the image extent.
Orientation follows the mathematical convention on the raw ``(x, y)`` values:
a positive shoelace area is counterclockwise. Because image rows grow
downwards, a "clockwise" ring here appears counterclockwise on screen.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DegenerateGeometryError

__all__ = [
    "Orientation",
    "Point",
    "Polygon",
    "PermutationMatrix",
    "PolygonSet",
    "decode_permutation",
    "encode_polygons",
    "interior_angle",
    "exact_winding_inside",
    "points_in_polygon",
    "rasterize_polygon",
    "rasterize_polygons",
    "signed_area",
    "to_geojson",
    "from_geojson",
    "write_geojson",
    "read_geojson",
]


class Orientation(str, Enum):
    CLOCKWISE = "clockwise"
    COUNTERCLOCKWISE = "counterclockwise"


class Point(NamedTuple):
    x: float
    y: float


def _as_xy(p: Sequence[float]) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,):
        raise ContractError(f"expected a 2-vector, got shape {arr.shape}")
    return arr


def _shoelace(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class Polygon:
    """A closed ring of at least three vertices.

    The ring is implicit: the last vertex connects back to the first.
    """

    vertices: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ContractError(f"polygon needs a (k>=3, 2) vertex array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("polygon vertices must be finite")
        if np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
            raise ContractError("polygon has two equal consecutive vertices")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Polygon):
            return NotImplemented
        return self.vertices.shape == other.vertices.shape and bool(
            np.array_equal(self.vertices, other.vertices)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def orientation(self) -> Orientation:
        if _shoelace(self.vertices) < 0:
            return Orientation.CLOCKWISE
        return Orientation.COUNTERCLOCKWISE

    def reversed(self) -> Polygon:
        return Polygon(self.vertices[::-1])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end points of every edge, each ``(k, 2)``."""
        return self.vertices, np.roll(self.vertices, -1, axis=0)


@dataclass(frozen=True, eq=False)
class PermutationMatrix:
    """Row ``i`` holds a single 1 in column ``next_clockwise[i]``.

    Fixed points mark discarded vertices; the transpose is the counterclockwise
    linkage of the same rings.
    """

    next_clockwise: np.ndarray

    def __post_init__(self) -> None:
        nxt = np.array(self.next_clockwise, dtype=np.int64).reshape(-1)
        n = nxt.size
        if n and (nxt.min() < 0 or nxt.max() >= n or np.unique(nxt).size != n):
            raise ContractError("next_clockwise is not a bijection on 0..N-1")
        nxt.setflags(write=False)
        object.__setattr__(self, "next_clockwise", nxt)

    @classmethod
    def identity(cls, n: int) -> PermutationMatrix:
        return cls(np.arange(n))

    @classmethod
    def from_dense(cls, matrix: np.ndarray) -> PermutationMatrix:
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractError("permutation matrix must be square")
        if not (np.all((m == 0) | (m == 1)) and np.all(m.sum(0) == 1) and np.all(m.sum(1) == 1)):
            raise ContractError("matrix is not a 0/1 permutation matrix")
        return cls(np.argmax(m, axis=1))

    @property
    def size(self) -> int:
        return int(self.next_clockwise.size)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.size, self.size))
        m[np.arange(self.size), self.next_clockwise] = 1.0
        return m

    def transpose(self) -> PermutationMatrix:
        inv = np.empty_like(self.next_clockwise)
        inv[self.next_clockwise] = np.arange(self.size)
        return PermutationMatrix(inv)

    def compose(self, other: PermutationMatrix) -> PermutationMatrix:
        """Follow ``self`` then ``other`` (matrix product ``self @ other``)."""
        if other.size != self.size:
            raise ContractError("size mismatch")
        return PermutationMatrix(other.next_clockwise[self.next_clockwise])

    def fixed_points(self) -> np.ndarray:
        return np.flatnonzero(self.next_clockwise == np.arange(self.size))

    def cycles(self) -> list[list[int]]:
        """All cycles, each starting at its smallest index, ordered by that index."""
        seen = np.zeros(self.size, dtype=bool)
        out = []
        for start in range(self.size):
            if seen[start]:
                continue
            cyc = []
            i = start
            while not seen[i]:
                seen[i] = True
                cyc.append(i)
                i = int(self.next_clockwise[i])
            out.append(cyc)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PermutationMatrix):
            return NotImplemented
        return bool(np.array_equal(self.next_clockwise, other.next_clockwise))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class PolygonSet:
    polygons: tuple[Polygon, ...] = ()
    source_indices: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "polygons", tuple(self.polygons))
        src = tuple(tuple(int(i) for i in s) for s in self.source_indices)
        if src:
            if len(src) != len(self.polygons):
                raise ContractError("source_indices must have one entry per polygon")
            for poly, idx in zip(self.polygons, src):
                if len(idx) != len(poly):
                    raise ContractError("source_indices length differs from polygon length")
            flat = [i for s in src for i in s]
            if len(set(flat)) != len(flat):
                raise ContractError("source_indices overlap across polygons")
        object.__setattr__(self, "source_indices", src)

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    @property
    def vertex_count(self) -> int:
        return sum(len(p) for p in self.polygons)


def decode_permutation(
    positions: np.ndarray | Sequence[Sequence[float]],
    perm: PermutationMatrix,
    min_ring: int = 3,
) -> PolygonSet:
    """Turn vertex positions plus next-vertex links into polygons.

    Every cycle of at least ``min_ring`` vertices becomes one polygon in cycle
    order. Fixed points and short cycles are dropped. Consecutive duplicate
    positions inside a cycle are merged before the length check.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] != perm.size:
        raise ContractError(
            f"positions shape {pos.shape} does not match permutation size {perm.size}"
        )
    if min_ring < 3:
        raise ContractError("min_ring must be at least 3")
    polys, sources = [], []
    for cyc in perm.cycles():
        if len(cyc) < min_ring:
            continue
        ring = [cyc[0]]
        for i in cyc[1:]:
            if not np.array_equal(pos[i], pos[ring[-1]]):
                ring.append(i)
        while len(ring) > 1 and np.array_equal(pos[ring[0]], pos[ring[-1]]):
            ring.pop()
        if len(ring) < min_ring:
            continue
        polys.append(Polygon(pos[ring]))
        sources.append(tuple(ring))
    return PolygonSet(tuple(polys), tuple(sources))


def encode_polygons(polys: PolygonSet, n: int) -> PermutationMatrix:
    """Inverse of :func:`decode_permutation` using the polygons' source indices."""
    nxt = np.arange(n)
    if len(polys) and not polys.source_indices:
        raise ContractError("encoding needs source_indices")
    seen: set[int] = set()
    for ring in polys.source_indices:
        for i in ring:
            if not 0 <= i < n:
                raise ContractError(f"source index {i} out of range for n={n}")
            if i in seen:
                raise ContractError(f"source index {i} used by two polygons")
            seen.add(i)
        for a, b in zip(ring, ring[1:] + ring[:1]):
            nxt[a] = b
    return PermutationMatrix(nxt)


def interior_angle(u: Sequence[float], v: Sequence[float], w: Sequence[float]) -> float:
    """Unsigned angle at ``v`` between the rays towards ``u`` and ``w``, in ``[0, pi]``."""
    u, v, w = _as_xy(u), _as_xy(v), _as_xy(w)
    a, b = u - v, w - v
    if not np.any(a) or not np.any(b):
        raise DegenerateGeometryError("angle undefined at a repeated point")
    cross = a[0] * b[1] - a[1] * b[0]
    return math.atan2(abs(cross), float(a @ b))


def signed_area(poly: Polygon) -> float:
    return _shoelace(poly.vertices)


def _vertices(poly: Polygon | np.ndarray) -> np.ndarray:
    if isinstance(poly, Polygon):
        return poly.vertices
    return np.asarray(poly, dtype=np.float64)


def points_in_polygon(points: np.ndarray, poly: Polygon | np.ndarray) -> np.ndarray:
    """Vectorized even-odd test with a ray towards ``+x``.

    Edges are half-open in ``y``, which makes the result deterministic for
    points lying exactly on an edge or at a vertex height.
    """
    pts = np.asarray(points, dtype=np.float64)
    v = _vertices(poly)
    px, py = pts[..., 0], pts[..., 1]
    inside = np.zeros(px.shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
        if y0 == y1:
            continue
        straddles = (y0 > py) != (y1 > py)
        x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddles & (px < x_cross)
    return inside


def _on_boundary(x: np.ndarray, v: np.ndarray, tol: float = 1e-12) -> bool:
    a, b = v, np.roll(v, -1, axis=0)
    ab = b - a
    ax = x - a
    t = np.clip(np.einsum("ij,ij->i", ax, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    d = np.linalg.norm(a + t[:, None] * ab - x, axis=1)
    return bool(np.any(d <= tol))


def exact_winding_inside(x: Sequence[float], poly: Polygon) -> bool:
    """Inside test by summing the signed angles the edges subtend at ``x``.

    Points on the boundary fall back to :func:`points_in_polygon`.
    """
    p = _as_xy(x)
    v = poly.vertices
    if _on_boundary(p, v):
        return bool(points_in_polygon(p[None], v)[0])
    a = v - p
    b = np.roll(a, -1, axis=0)
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.einsum("ij,ij->i", a, b)
    total = float(np.arctan2(cross, dot).sum())
    return abs(abs(total) - 2 * math.pi) < 1e-6


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized ``(x, y)`` of every pixel center, shape ``(H, W, 2)``."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def rasterize_polygon(poly: Polygon, height: int, width: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of the pixel centers inside ``poly``."""
    return points_in_polygon(pixel_centers(height, width), poly)


def rasterize_polygons(polys: Iterable[Polygon], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    centers = pixel_centers(height, width)
    for poly in polys:
        mask |= points_in_polygon(centers, poly)
    return mask


def to_geojson(
    polys: PolygonSet, width: int, height: int, confidences: Sequence[float] | None = None
) -> dict:
    """FeatureCollection with one Feature per polygon, coordinates in pixels."""
    features = []
    scale = np.array([width, height], dtype=np.float64)
    for k, poly in enumerate(polys.polygons):
        ring = (poly.vertices * scale).tolist()
        ring.append(ring[0])
        props = {"index": k, "orientation": poly.orientation.value}
        if polys.source_indices:
            props["source_indices"] = list(polys.source_indices[k])
        if confidences is not None:
            props["confidence"] = float(confidences[k])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def from_geojson(obj: dict, width: int, height: int) -> PolygonSet:
    scale = np.array([width, height], dtype=np.float64)
    polys, sources = [], []
    for feat in obj.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ContractError(f"unsupported geometry type {geom.get('type')!r}")
        ring = np.asarray(geom["coordinates"][0], dtype=np.float64)
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        polys.append(Polygon(ring / scale))
        src = (feat.get("properties") or {}).get("source_indices")
        if src is not None:
            sources.append(tuple(src))
    if sources and len(sources) != len(polys):
        sources = []
    return PolygonSet(tuple(polys), tuple(sources))


def write_geojson(
    path: str | Path,
    polys: PolygonSet,
    width: int,
    height: int,
    confidences: Sequence[float] | None = None,
) -> None:
    Path(path).write_text(json.dumps(to_geojson(polys, width, height, confidences)), encoding="utf-8")


def read_geojson(path: str | Path, width: int, height: int) -> PolygonSet:
    return from_geojson(json.loads(Path(path).read_text(encoding="utf-8")), width, height)
