"""Planar polygonal domains and their dyadic Whitney coverings.

A :class:`Domain` is a simple polygon.  All cubes live on a single dyadic
lattice anchored at ``Domain.root_origin`` with side ``Domain.root_scale`` at
level 0, so cubes are stored as integer triples ``(level, ix, iy)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import LinearRing, Polygon

__all__ = [
    "CoverError",
    "DomainError",
    "Domain",
    "DyadicCube",
    "WhitneyCover",
    "Violation",
    "load_domain",
    "builtin_domain",
    "distance_to_boundary",
    "build_cover",
    "long_distance",
    "validate_cover",
    "boxes_to_boundary",
    "SUPERPOSITION_BOUND",
    "DEFAULT_C_W",
    "superposition_counts",
    "long_distance_many",
]

# Default Whitney constant.  Below 4*sqrt(2) the absorption property can fail
# for maximal cubes (5Q reaches cubes two levels finer), so repairs are needed.
DEFAULT_C_W = 6.0

# Fixed cap on the number of cubes Q with x in 50Q.  For C_W < 25*sqrt(2) the
# true count creeps up slowly with depth; this cap is four 50x50 lattice blocks.
SUPERPOSITION_BOUND = 4 * 50 * 50

_CHUNK = 1 << 21
_CODE = 1 << 31


class DomainError(ValueError):
    """Malformed polygon description."""


class CoverError(RuntimeError):
    """A Whitney covering cannot be built with the requested parameters."""


# ---------------------------------------------------------------------------
# low level distance kernels (vectorised)


def _point_segment_dist(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    ll = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((px - ax) * dx + (py - ay) * dy) / ll
    t = np.where(ll > 0, np.clip(t, 0.0, 1.0), 0.0)
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    return np.hypot(qx, qy)


def _points_to_edges(points: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Minimum distance from each point to a set of segments ``(E, 4)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(points))
    step = max(1, _CHUNK // max(len(edges), 1))
    ax, ay, bx, by = (edges[:, k][None, :] for k in range(4))
    for lo in range(0, len(points), step):
        p = points[lo:lo + step]
        d = _point_segment_dist(p[:, 0:1], p[:, 1:2], ax, ay, bx, by)
        out[lo:lo + step] = d.min(axis=1)
    return out


def _box_segment_dist(x0, y0, x1, y1, ax, ay, bx, by):
    # zero when the segment meets the closed box (Liang-Barsky clipping)
    dx = bx - ax
    dy = by - ay
    tlo = np.zeros(np.broadcast(x0, ax).shape)
    thi = np.ones_like(tlo)
    ok = np.ones(tlo.shape, dtype=bool)
    for d, p, lo, hi in ((dx, ax, x0, x1), (dy, ay, y0, y1)):
        par = d == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - p) / d
            t2 = (hi - p) / d
        tmin = np.where(par, -np.inf, np.minimum(t1, t2))
        tmax = np.where(par, np.inf, np.maximum(t1, t2))
        ok &= ~par | ((p >= lo) & (p <= hi))
        tlo = np.maximum(tlo, tmin)
        thi = np.minimum(thi, tmax)
    hit = ok & (tlo <= thi)

    def pbox(px, py):
        ex = np.maximum(np.maximum(x0 - px, px - x1), 0.0)
        ey = np.maximum(np.maximum(y0 - py, py - y1), 0.0)
        return np.hypot(ex, ey)

    d = np.minimum(pbox(ax, ay), pbox(bx, by))
    for cx, cy in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
        d = np.minimum(d, _point_segment_dist(cx, cy, ax, ay, bx, by))
    return np.where(hit, 0.0, d)


def boxes_to_boundary(boxes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Euclidean distance from closed boxes ``(n, 4)`` = (x0, y0, x1, y1) to segments."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    out = np.empty(len(boxes))
    step = max(1, _CHUNK // max(len(edges), 1))
    ax, ay, bx, by = (edges[:, k][None, :] for k in range(4))
    for lo in range(0, len(boxes), step):
        b = boxes[lo:lo + step]
        d = _box_segment_dist(b[:, 0:1], b[:, 1:2], b[:, 2:3], b[:, 3:4], ax, ay, bx, by)
        out[lo:lo + step] = d.min(axis=1)
    return out


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True, eq=False)
class Domain:
    """Simple polygon with counterclockwise vertices.

    ``root_scale`` (the level-0 side) is the smallest power of two not below
    the diameter.  The single cube at ``top_level`` (<= 0) contains the
    bounding square dilated by 4; ``box`` is that dilated square snapped
    outward to the lattice three levels below the top (the exterior
    computation box).
    """

    vertices: np.ndarray
    diameter: float
    area: float
    root_origin: np.ndarray
    root_scale: float
    box: tuple[float, float, float, float]
    top_level: int = 0

    @property
    def edges(self) -> np.ndarray:
        v = self.vertices
        return np.hstack([v, np.roll(v, -1, axis=0)])

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        return self.box

    def contains(self, points) -> np.ndarray | bool:
        """Strict containment (the domain is open): boundary points are outside."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        inside = _crossing_parity(pts, self.vertices)
        on_edge = _points_to_edges(pts, self.edges) <= 1e-14 * self.diameter
        res = inside & ~on_edge
        return bool(res[0]) if single else res

    def to_json(self) -> dict:
        return {"type": "polygon", "vertices": self.vertices.tolist()}


def _crossing_parity(pts: np.ndarray, verts: np.ndarray) -> np.ndarray:
    x = pts[:, 0:1]
    y = pts[:, 1:2]
    ax, ay = verts[:, 0][None, :], verts[:, 1][None, :]
    bx, by = np.roll(verts[:, 0], -1)[None, :], np.roll(verts[:, 1], -1)[None, :]
    straddle = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (y - ay) * (bx - ax) / (by - ay)
    cross = straddle & (x < xint)
    return (cross.sum(axis=1) % 2) == 1


def load_domain(spec) -> Domain:
    """Build a validated :class:`Domain` from ``{"type": "polygon", "vertices": [...]}``.

    A bare vertex list is accepted too.  A closing vertex equal to the first
    one is dropped; any other repeated consecutive vertex is an error.
    """
    if isinstance(spec, dict):
        if spec.get("type", "polygon") != "polygon":
            raise DomainError(f"unsupported domain type {spec.get('type')!r}")
        verts = spec.get("vertices")
    else:
        verts = spec
    try:
        v = np.asarray(verts, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"vertices are not numeric: {exc}") from None
    if v.ndim != 2 or v.shape[1] != 2:
        raise DomainError("vertices must be a list of [x, y] pairs")
    if not np.all(np.isfinite(v)):
        raise DomainError("vertices must be finite")
    if len(v) >= 2 and np.array_equal(v[0], v[-1]):
        v = v[:-1]
    if len(v) < 3:
        raise DomainError("a polygon needs at least 3 vertices")
    if np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
        raise DomainError("repeated consecutive vertices")
    if not LinearRing(v).is_simple:
        raise DomainError("polygon is self-intersecting")
    x, y = v[:, 0], v[:, 1]
    signed = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    if signed == 0.0:
        raise DomainError("polygon has zero area")
    if signed < 0:
        v = v[::-1].copy()
    diff = v[:, None, :] - v[None, :, :]
    diameter = float(np.sqrt((diff ** 2).sum(-1)).max())

    lo, hi = v.min(axis=0), v.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    root = 2.0 ** math.floor(math.log2(diameter))
    top = 2.0 ** math.ceil(math.log2(8.0 * half * math.sqrt(2.0)))
    top = max(top, root)
    top_level = -int(round(math.log2(top / root)))
    origin = center - 0.5 * top
    unit = top / 8.0
    blo = origin + np.floor((center - 4 * half - origin) / unit) * unit
    bhi = origin + np.ceil((center + 4 * half - origin) / unit) * unit
    box = (float(blo[0]), float(blo[1]), float(bhi[0]), float(bhi[1]))
    return Domain(v, diameter, abs(signed), origin, float(root), box, top_level)


def builtin_domain(name: str, **kw) -> Domain:
    """Named test domains: ``square``, ``ngon`` (``n``), ``lshape``, ``corridor`` (``w``)."""
    if name == "square":
        return load_domain([[0, 0], [1, 0], [1, 1], [0, 1]])
    if name in ("ngon", "disk"):
        n = int(kw.get("n", 64))
        t = 2 * np.pi * np.arange(n) / n
        return load_domain(np.column_stack([np.cos(t), np.sin(t)]))
    if name == "lshape":
        return load_domain([[0, 0], [1, 0], [1, 0.5], [0.5, 0.5], [0.5, 1], [0, 1]])
    if name == "corridor":
        w = float(kw.get("w", 0.2))
        a, b = 0.5 - w / 2, 0.5 + w / 2
        return load_domain([[0, 0], [1, 0], [1, a], [2, a], [2, 0], [3, 0],
                            [3, 1], [2, 1], [2, b], [1, b], [1, 1], [0, 1]])
    raise DomainError(f"unknown builtin domain {name!r}")


def distance_to_boundary(domain: Domain, p) -> np.ndarray | float:
    """Euclidean distance to the polygon boundary (same formula on both sides)."""
    pts = np.asarray(p, dtype=float)
    d = _points_to_edges(np.atleast_2d(pts), domain.edges)
    return float(d[0]) if pts.ndim == 1 else d


# ---------------------------------------------------------------------------
# dyadic cubes


@dataclass(frozen=True, order=True)
class DyadicCube:
    level: int
    ix: int
    iy: int
    root_scale: float = field(default=1.0, compare=False)
    root_origin: tuple[float, float] = field(default=(0.0, 0.0), compare=False)

    @property
    def side(self) -> float:
        return self.root_scale * 2.0 ** (-self.level)

    @property
    def lower(self) -> np.ndarray:
        h = self.side
        return np.array([self.root_origin[0] + self.ix * h, self.root_origin[1] + self.iy * h])

    @property
    def center(self) -> np.ndarray:
        return self.lower + 0.5 * self.side

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.lower
        h = self.side
        return (lo[0], lo[1], lo[0] + h, lo[1] + h)

    def parent(self) -> "DyadicCube":
        return DyadicCube(self.level - 1, self.ix >> 1, self.iy >> 1, self.root_scale, self.root_origin)

    def children(self) -> list["DyadicCube"]:
        return [DyadicCube(self.level + 1, 2 * self.ix + a, 2 * self.iy + b, self.root_scale, self.root_origin)
                for b in (0, 1) for a in (0, 1)]


def _set_distance(b1, b2) -> float:
    gx = max(b2[0] - b1[2], b1[0] - b2[2], 0.0)
    gy = max(b2[1] - b1[3], b1[1] - b2[3], 0.0)
    return math.hypot(gx, gy)


def long_distance(Q, S) -> float:
    """``l(Q) + dist(Q, S) + l(S)``.  Accepts cubes or ``(x0, y0, x1, y1)`` boxes."""
    b1 = Q.bounds if hasattr(Q, "bounds") else tuple(Q)
    b2 = S.bounds if hasattr(S, "bounds") else tuple(S)
    return (b1[2] - b1[0]) + _set_distance(b1, b2) + (b2[2] - b2[0])


def long_distance_many(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Broadcasting version of :func:`long_distance` on box arrays."""
    a = np.asarray(boxes_a, dtype=float)
    b = np.asarray(boxes_b, dtype=float)
    gx = np.maximum(np.maximum(b[..., 0] - a[..., 2], a[..., 0] - b[..., 2]), 0.0)
    gy = np.maximum(np.maximum(b[..., 1] - a[..., 3], a[..., 1] - b[..., 3]), 0.0)
    return (a[..., 2] - a[..., 0]) + np.hypot(gx, gy) + (b[..., 2] - b[..., 0])


# ---------------------------------------------------------------------------
# Whitney covers


class WhitneyCover:
    """Immutable Whitney covering of the interior or (truncated) exterior of a domain.

    Cubes are stored as integer arrays ``level``, ``ix``, ``iy``.  Besides the
    cubes themselves the cover keeps the *collar* (finest-level cells that are
    too close to the boundary to qualify) and the *discarded* cells lying on
    the wrong side, which together tile the root square.
    """

    def __init__(self, domain: Domain, side: str, c_w: float, max_level: int,
                 level, ix, iy, collar, discarded):
        self.domain = domain
        self.side = side
        self.c_w = float(c_w)
        self.max_level = int(max_level)
        self.level = np.asarray(level, dtype=np.int64)
        self.ix = np.asarray(ix, dtype=np.int64)
        self.iy = np.asarray(iy, dtype=np.int64)
        self.collar = np.asarray(collar, dtype=np.int64).reshape(-1, 3)
        self.discarded = np.asarray(discarded, dtype=np.int64).reshape(-1, 3)
        self.root_scale = domain.root_scale
        self.origin = np.asarray(domain.root_origin, dtype=float)
        self.sides = self.root_scale * np.exp2(-self.level.astype(float))
        lo = self.origin[None, :] + np.column_stack([self.ix, self.iy]) * self.sides[:, None]
        self.boxes = np.column_stack([lo, lo + self.sides[:, None]])
        self.centers = lo + 0.5 * self.sides[:, None]
        self._index = {(int(k), int(a), int(b)): n
                       for n, (k, a, b) in enumerate(zip(self.level, self.ix, self.iy))}
        self._levels = np.unique(self.level)
        self._lookup_cache = None
        self._overlap = None
        self.adjacency = _adjacency(self)
        self.frontier = _frontier_flags(self)
        self.box = None if side == "interior" else domain.box
        region = {"interior": domain.area, "exterior": _box_area(domain.box) - domain.area,
                  "combined": _box_area(domain.box)}[side]
        self.collar_area = max(region - float(np.sum(self.sides ** 2)), 0.0)
        for arr in (self.level, self.ix, self.iy, self.sides, self.boxes, self.centers, self.frontier):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.level)

    @property
    def cubes(self) -> list[DyadicCube]:
        o = (float(self.origin[0]), float(self.origin[1]))
        return [DyadicCube(int(k), int(a), int(b), self.root_scale, o)
                for k, a, b in zip(self.level, self.ix, self.iy)]

    def cube(self, i: int) -> DyadicCube:
        return DyadicCube(int(self.level[i]), int(self.ix[i]), int(self.iy[i]), self.root_scale,
                          (float(self.origin[0]), float(self.origin[1])))

    def index_of(self, cube) -> int:
        key = (cube.level, cube.ix, cube.iy) if hasattr(cube, "level") else tuple(cube)
        return self._index[key]

    def cube_of_point(self, points) -> np.ndarray | int:
        """Index of the cube whose (half-open) square contains each point, -1 if none."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), -1, dtype=np.int64)
        rel = pts - self.origin[None, :]
        for k, codes, order in self._lookup:
            h = self.root_scale * 2.0 ** (-int(k))
            ij = np.floor(rel / h).astype(np.int64)
            q = ij[:, 0] * _CODE + ij[:, 1]
            pos = np.clip(np.searchsorted(codes, q), 0, len(codes) - 1)
            hit = (codes[pos] == q) & (out < 0)
            out[hit] = order[pos[hit]]
        return int(out[0]) if np.ndim(points) == 1 else out

    @property
    def _lookup(self):
        if self._lookup_cache is None:
            tabs = []
            for k in self._levels:
                idx = np.flatnonzero(self.level == k)
                codes = self.ix[idx] * _CODE + self.iy[idx]
                o = np.argsort(codes)
                tabs.append((int(k), codes[o], idx[o]))
            self._lookup_cache = tabs
        return self._lookup_cache

    @property
    def max_overlap(self) -> int:
        """Largest number of cubes Q with x in 50Q over the probe points."""
        if self._overlap is None:
            self._overlap = int(superposition_counts(self).max()) if len(self) else 0
        return self._overlap

    def dist_to_boundary(self) -> np.ndarray:
        return boxes_to_boundary(self.boxes, self.domain.edges)

    def to_json(self) -> dict:
        flags = [["frontier"] if f else [] for f in self.frontier]
        return {
            "header": {
                "c_w": self.c_w,
                "root_scale": self.root_scale,
                "root_origin": self.origin.tolist(),
                "side": self.side,
                "max_level": self.max_level,
                "box": list(self.domain.box) if self.side == "exterior" else None,
                "n_cubes": len(self),
                "collar_cells": int(len(self.collar)),
                "collar_area": self.collar_area,
                "max_overlap_50Q": self.max_overlap,
            },
            "cubes": [{"level": int(k), "ix": int(a), "iy": int(b), "flags": fl}
                      for k, a, b, fl in zip(self.level, self.ix, self.iy, flags)],
        }

    def _replace(self, level, ix, iy) -> "WhitneyCover":
        return WhitneyCover(self.domain, self.side, self.c_w, self.max_level, level, ix, iy,
                            self.collar, self.discarded)


def _box_area(b) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def _int_boxes(level, ix, iy, fine: int) -> np.ndarray:
    """Integer boxes at resolution ``fine`` (exact touch/containment tests)."""
    scale = np.left_shift(np.int64(1), (fine - np.asarray(level)).astype(np.int64))
    x0 = np.asarray(ix) * scale
    y0 = np.asarray(iy) * scale
    return np.column_stack([x0, y0, x0 + scale, y0 + scale])


def _touch_pairs(boxes_a, ib_a, boxes_b, ib_b, same: bool):
    """Pairs (i, j) of boxes whose closures intersect."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.empty((0, 2), dtype=np.int64)
    ca = 0.5 * (boxes_a[:, :2] + boxes_a[:, 2:])
    cb = 0.5 * (boxes_b[:, :2] + boxes_b[:, 2:])
    ha = boxes_a[:, 2] - boxes_a[:, 0]
    hb_max = float((boxes_b[:, 2] - boxes_b[:, 0]).max())
    tree = cKDTree(cb)
    cand = tree.query_ball_point(ca, r=0.5 * (ha + hb_max) * (1 + 1e-9), p=np.inf)
    rows = []
    for i, js in enumerate(cand):
        if not js:
            continue
        js = np.asarray(js, dtype=np.int64)
        a = ib_a[i]
        b = ib_b[js]
        ok = (a[0] <= b[:, 2]) & (b[:, 0] <= a[2]) & (a[1] <= b[:, 3]) & (b[:, 1] <= a[3])
        if same:
            ok &= js != i
        js = js[ok]
        rows.append(np.column_stack([np.full(len(js), i), js]))
    return np.vstack(rows) if rows else np.empty((0, 2), dtype=np.int64)


def _adjacency(cover: WhitneyCover) -> list[np.ndarray]:
    n = len(cover)
    ib = _int_boxes(cover.level, cover.ix, cover.iy, cover.max_level)
    pairs = _touch_pairs(cover.boxes, ib, cover.boxes, ib, same=True)
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs:
        adj[int(i)].append(int(j))
    return [np.array(sorted(a), dtype=np.int64) for a in adj]


def _frontier_flags(cover: WhitneyCover) -> np.ndarray:
    flags = np.zeros(len(cover), dtype=bool)
    if len(cover.collar) == 0 or len(cover) == 0:
        return flags
    c = cover.collar
    h = cover.root_scale * np.exp2(-c[:, 0].astype(float))
    lo = cover.origin[None, :] + c[:, 1:] * h[:, None]
    cboxes = np.column_stack([lo, lo + h[:, None]])
    ib_cov = _int_boxes(cover.level, cover.ix, cover.iy, cover.max_level)
    ib_col = _int_boxes(c[:, 0], c[:, 1], c[:, 2], cover.max_level)
    pairs = _touch_pairs(cover.boxes, ib_cov, cboxes, ib_col, same=False)
    flags[np.unique(pairs[:, 0])] = True
    return flags


def build_cover(domain: Domain, side: str = "interior", c_w: float = DEFAULT_C_W,
                max_level: int = 6) -> WhitneyCover:
    """Top-down Whitney selection followed by a 2:1 / absorption repair.

    A cube is accepted as soon as ``dist(Q, boundary) >= c_w * l(Q)``; too-close
    cubes are split until ``max_level``, where they become collar cells.
    """
    if side not in ("interior", "exterior"):
        raise ValueError(f"side must be 'interior' or 'exterior', got {side!r}")
    if not c_w > 0:
        raise ValueError("c_w must be positive")
    edges = domain.edges
    origin = domain.root_origin
    bx0, by0, bx1, by1 = domain.box
    acc, collar, disc = [], [], []
    cur = np.zeros((1, 2), dtype=np.int64)
    if max_level < domain.top_level:
        raise CoverError(f"no qualifying cube at any level <= {max_level}")
    for k in range(domain.top_level, max_level + 1):
        if len(cur) == 0:
            break
        h = domain.root_scale * 2.0 ** (-k)
        lo = origin[None, :] + cur * h
        boxes = np.column_stack([lo, lo + h])
        dist = boxes_to_boundary(boxes, edges)
        inside = domain.contains(lo + 0.5 * h) if len(cur) else np.zeros(0, bool)
        split = np.zeros(len(cur), dtype=bool)
        if side == "interior":
            wrong = (dist > 0) & ~inside
        else:
            in_box = (boxes[:, 0] >= bx0) & (boxes[:, 1] >= by0) & (boxes[:, 2] <= bx1) & (boxes[:, 3] <= by1)
            out_box = (boxes[:, 2] <= bx0) | (boxes[:, 0] >= bx1) | (boxes[:, 3] <= by0) | (boxes[:, 1] >= by1)
            wrong = ((dist > 0) & inside) | out_box
            split |= ~in_box & ~out_box
        good = ~wrong & ~split & (dist >= c_w * h)
        close = ~wrong & ~split & ~good
        lvl = np.full((len(cur), 1), k, dtype=np.int64)
        acc.append(np.hstack([lvl, cur])[good])
        disc.append(np.hstack([lvl, cur])[wrong])
        split |= close
        if k == max_level:
            if np.any(split & ~close):
                raise CoverError("max_level too small to resolve the computation box")
            collar.append(np.hstack([lvl, cur])[close])
            break
        par = cur[split]
        cur = np.vstack([2 * par + np.array([a, b]) for b in (0, 1) for a in (0, 1)]) if len(par) else par
        if len(cur):
            cur = cur[np.lexsort((cur[:, 0], cur[:, 1]))]
    cubes = np.vstack(acc) if acc else np.empty((0, 3), dtype=np.int64)
    if len(cubes) == 0:
        raise CoverError(f"no qualifying cube at any level <= {max_level}")
    cubes = _repair(domain, cubes, c_w, max_level)
    cubes = cubes[np.lexsort((cubes[:, 1], cubes[:, 2], cubes[:, 0]))]
    return WhitneyCover(domain, side, c_w, max_level, cubes[:, 0], cubes[:, 1], cubes[:, 2],
                        np.vstack(collar) if collar else np.empty((0, 3), np.int64),
                        np.vstack(disc) if disc else np.empty((0, 3), np.int64))


def _repair(domain: Domain, cubes: np.ndarray, c_w: float, max_level: int) -> np.ndarray:
    """Split cubes until neighbour ratio <= 2 and the absorption property hold."""
    while True:
        lv, ix, iy = cubes[:, 0], cubes[:, 1], cubes[:, 2]
        h = domain.root_scale * np.exp2(-lv.astype(float))
        lo = domain.root_origin[None, :] + np.column_stack([ix, iy]) * h[:, None]
        boxes = np.column_stack([lo, lo + h[:, None]])
        ib = _int_boxes(lv, ix, iy, max_level)
        bad = np.zeros(len(cubes), dtype=bool)
        pairs = _touch_pairs(boxes, ib, boxes, ib, same=True)
        if len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            bad[i[lv[j] - lv[i] > 1]] = True
        bad |= _absorption_offenders(boxes, ib, lv)
        if not bad.any():
            return cubes
        par = cubes[bad]
        kids = np.vstack([np.column_stack([par[:, 0] + 1, 2 * par[:, 1] + a, 2 * par[:, 2] + b])
                          for b in (0, 1) for a in (0, 1)])
        if kids[:, 0].max() > max_level:
            raise CoverError("neighbour-ratio repair needs cubes beyond max_level")
        hk = domain.root_scale * np.exp2(-kids[:, 0].astype(float))
        klo = domain.root_origin[None, :] + kids[:, 1:] * hk[:, None]
        kd = boxes_to_boundary(np.column_stack([klo, klo + hk[:, None]]), domain.edges)
        if np.any(kd < c_w * hk) or np.any(kd > 4 * c_w * hk):
            raise CoverError(f"c_w={c_w} incompatible with neighbour-ratio repair "
                             f"(split cube violates the distance bracket)")
        cubes = np.vstack([cubes[~bad], kids])


def _absorption_offenders(boxes, ib, lv) -> np.ndarray:
    """Cubes Q for which some S inside 5Q has l(S) < l(Q)/2."""
    bad = np.zeros(len(boxes), dtype=bool)
    centers = 0.5 * (boxes[:, :2] + boxes[:, 2:])
    h = boxes[:, 2] - boxes[:, 0]
    tree = cKDTree(centers)
    cand = tree.query_ball_point(centers, r=2.5 * h, p=np.inf)
    for i, js in enumerate(cand):
        js = np.asarray(js, dtype=np.int64)
        small = js[lv[js] >= lv[i] + 2]
        if len(small) == 0:
            continue
        a = ib[i]
        w = a[2] - a[0]
        lo0, lo1, hi0, hi1 = a[0] - 2 * w, a[1] - 2 * w, a[2] + 2 * w, a[3] + 2 * w
        b = ib[small]
        inside = (b[:, 0] >= lo0) & (b[:, 1] >= lo1) & (b[:, 2] <= hi0) & (b[:, 3] <= hi1)
        if inside.any():
            bad[i] = True
    return bad


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    cubes: tuple
    detail: str = ""

    def to_json(self) -> dict:
        return {"kind": self.kind, "cubes": [list(c) for c in self.cubes], "detail": self.detail}


def superposition_counts(cover: WhitneyCover, factor: float = 50.0,
                         points: np.ndarray | None = None) -> np.ndarray:
    """Number of cubes Q with ``x in factor*Q`` at each probe point."""
    if points is None:
        points = np.vstack([cover.centers, cover.boxes[:, :2]])
    counts = np.zeros(len(points), dtype=np.int64)
    for k in np.unique(cover.level):
        sel = cover.level == k
        h = cover.root_scale * 2.0 ** (-int(k))
        tree = cKDTree(cover.centers[sel])
        counts += np.asarray(tree.query_ball_point(points, r=0.5 * factor * h * (1 - 1e-12),
                                                   p=np.inf, return_length=True))
    return counts


def validate_cover(cover: WhitneyCover, superposition_bound: int = SUPERPOSITION_BOUND,
                   rtol: float = 1e-12) -> list[Violation]:
    """Check every Whitney invariant; an empty list means the cover is valid.

    Collar cells are allowed holes for the coverage check only.
    """
    out: list[Violation] = []
    key = lambda i: (int(cover.level[i]), int(cover.ix[i]), int(cover.iy[i]))  # noqa: E731
    n = len(cover)
    c = cover.c_w
    dist = cover.dist_to_boundary()
    h = cover.sides
    for i in np.flatnonzero(dist < c * h * (1 - rtol)):
        out.append(Violation("bracket_low", (key(i),), f"dist={dist[i]:.6g} < {c}*l={c * h[i]:.6g}"))
    for i in np.flatnonzero(dist > 4 * c * h * (1 + rtol)):
        out.append(Violation("bracket_high", (key(i),), f"dist={dist[i]:.6g} > 4*{c}*l={4 * c * h[i]:.6g}"))

    # side of the boundary
    inside = cover.domain.contains(cover.centers)
    wrong = ~inside if cover.side == "interior" else inside
    for i in np.flatnonzero(wrong & (dist > 0)):
        out.append(Violation("wrong_side", (key(i),)))

    # disjointness: no cube may have an ancestor in the cover
    keys = set(cover._index)
    top = cover.domain.top_level
    for i in range(n):
        k, a, b = key(i)
        for up in range(1, k - top + 1):
            if (k - up, a >> up, b >> up) in keys:
                out.append(Violation("overlap", ((k - up, a >> up, b >> up), (k, a, b))))
                break

    # coverage: cover, collar and discarded cells must tile the root square
    tiles = set(keys)
    tiles.update(map(tuple, cover.collar.tolist()))
    tiles.update(map(tuple, cover.discarded.tolist()))
    partial = set()
    for (k, a, b) in tiles:
        for up in range(1, k - top + 1):
            anc = (k - up, a >> up, b >> up)
            if anc in partial:
                break
            partial.add(anc)
    stack = [(top, 0, 0)]
    while stack:
        cell = stack.pop()
        if cell in tiles:
            continue
        if cell in partial:
            k, a, b = cell
            stack.extend((k + 1, 2 * a + u, 2 * b + v) for v in (0, 1) for u in (0, 1))
        else:
            out.append(Violation("coverage", (cell,), "hole not covered by any cube"))

    # neighbour ratio
    for i in range(n):
        for j in cover.adjacency[i]:
            if j > i and abs(int(cover.level[i]) - int(cover.level[j])) > 1:
                out.append(Violation("neighbor_ratio", (key(i), key(int(j)))))

    # absorption S in 5Q => l(S) >= l(Q)/2
    ib = _int_boxes(cover.level, cover.ix, cover.iy, cover.max_level)
    for i in np.flatnonzero(_absorption_offenders(cover.boxes, ib, cover.level)):
        out.append(Violation("absorption", (key(i),)))

    if n:
        counts = superposition_counts(cover)
        worst = int(counts.max())
        if worst > superposition_bound:
            out.append(Violation("superposition", (), f"max overlap {worst} > {superposition_bound}"))
    return out
