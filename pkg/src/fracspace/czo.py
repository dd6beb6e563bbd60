"""Convolution Calderon-Zygmund kernels and principal-value quadrature.

A sampled function is read as a density that is constant on each node cell.
The part of the domain not covered by Whitney cubes (the collar) is added as
extra pieces: collar cells inside the polygon stay squares, cells cut by the
boundary are clipped and triangulated.  Each piece is integrated against the
kernel with a rule chosen from its distance to the evaluation point:

* pieces whose closure contains the point: polar quadrature around it with an
  exclusion disc of radius ``delta_j`` (the principal-value part);
* near pieces: adaptive triangle subdivision (tabulated for lattice squares
  when the kernel is homogeneous of degree -2);
* mid-range squares: tensor Gauss-Legendre;
* far pieces: low-order tensor Gauss (squares) or a 7-point rule (triangles).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import shapely
from scipy.spatial import cKDTree

from ._parallel import pmap
from .funcspace import GridFunction, SeminormParams, _chunk_inner, _resolve_variant, _Setup
from .funcspace import fractional_gradient_all, seminorm
from .geometry import WhitneyCover

__all__ = [
    "KernelSpec",
    "KERNELS",
    "get_kernel",
    "custom_kernel",
    "verify_kernel",
    "PVQuadrature",
    "PVResult",
    "pv_apply",
    "truncated_apply",
    "beurling_polygon",
    "t1_check",
    "T1Report",
    "key_lemma_ratio",
    "KernelError",
]


DEFAULT_RHO = 3.0


class KernelError(ValueError):
    """Unknown kernel or invalid kernel constants."""


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class KernelSpec:
    id: str
    evaluate: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    C_K: float
    sigma: float
    degree: float | None = -2.0  # homogeneity degree, None if not homogeneous

    def __call__(self, z):
        return self.evaluate(np.asarray(z, dtype=complex))


def _beurling(z):
    return -1.0 / (np.pi * z * z)


def _riesz1(z):
    return z.real / (2 * np.pi * np.abs(z) ** 3) + 0j


def _riesz2(z):
    return z.imag / (2 * np.pi * np.abs(z) ** 3) + 0j


# smoothness constants: sup over 0 < 2|y| <= |x| of the quotient, attained at |y| = |x|/2
KERNELS = {
    "beurling": KernelSpec("beurling", _beurling, 6 / np.pi, 1.0),
    "riesz1": KernelSpec("riesz1", _riesz1, 3 / np.pi, 1.0),
    "riesz2": KernelSpec("riesz2", _riesz2, 3 / np.pi, 1.0),
}


def get_kernel(name: str) -> KernelSpec:
    try:
        return KERNELS[name]
    except KeyError:
        raise KernelError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)} or a custom kernel") from None


def custom_kernel(fn: Callable, C_K: float, sigma: float, degree: float | None = None,
                  name: str = "custom") -> KernelSpec:
    """Wrap a user kernel; its constants are audited by :func:`verify_kernel`."""
    if not C_K > 0 or not 0 < sigma <= 1:
        raise KernelError("custom kernels need C_K > 0 and sigma in (0, 1]")
    return KernelSpec(name, fn, float(C_K), float(sigma), degree)


def verify_kernel(spec: KernelSpec, n_samples: int = 10_000, seed: int = 0, d: int = 2) -> dict:
    """Sampled size and smoothness quotients against ``C_K``.

    Points x have log-uniform modulus in [0.1, 10]; the perturbation y has
    modulus ``|x|/2 * u**(1/4)`` so the extreme ratio 2|y| = |x| is well sampled.
    """
    rng = np.random.default_rng(seed)
    r = np.exp(rng.uniform(np.log(0.1), np.log(10.0), n_samples))
    x = r * np.exp(1j * rng.uniform(0, 2 * np.pi, n_samples))
    y = 0.5 * r * rng.uniform(0, 1, n_samples) ** 0.25 * np.exp(1j * rng.uniform(0, 2 * np.pi, n_samples))
    y[y == 0] = 0.25 * r[y == 0]
    s = spec.sigma
    size = np.abs(spec(x)) * np.abs(x) ** d
    smooth = np.abs(spec(x - y) - spec(x)) * np.abs(x) ** (d + s) / np.abs(y) ** s
    return {
        "kernel": spec.id, "C_K": spec.C_K, "sigma": s, "n_samples": int(n_samples), "seed": int(seed),
        "size_max": float(size.max()), "smooth_max": float(smooth.max()),
        "size_ok": bool(size.max() <= spec.C_K * (1 + 1e-12)),
        "smooth_ok": bool(smooth.max() <= spec.C_K * (1 + 1e-12)),
    }


# ---------------------------------------------------------------------------
# quadrature settings and density pieces


@dataclass(frozen=True)
class PVQuadrature:
    delta0: float | None = None   # None: half the node-cell side at the point
    J: int = 6
    n_theta: int = 24             # Gauss points per angular sector
    n_rad: int = 12               # Gauss points in log-radius
    tol: float = 1e-8
    eta: float = 0.05             # adaptive leaves: radius <= eta * distance
    near: float = 3.0             # distance/side below which squares are refined
    far: float = 24.0             # distance/side from which the far rules are used
    mid_order: int = 5
    far_order: int = 3            # 1: midpoint and centroid rules
    collar: str = "nearest"       # collar density: value of the nearest node, or "zero"

    def __post_init__(self):
        if self.collar not in ("nearest", "zero"):
            raise ValueError("collar must be 'nearest' or 'zero'")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


@dataclass
class PVResult:
    value: complex
    sequence: list
    converged: bool

    def to_json(self) -> dict:
        return {"value": [self.value.real, self.value.imag],
                "sequence": [[v.real, v.imag] for v in self.sequence], "converged": self.converged}


@dataclass
class _Pieces:
    sq_c: np.ndarray      # complex centres
    sq_h: np.ndarray
    sq_v: np.ndarray
    tri: np.ndarray       # (t, 3) complex vertices
    tri_v: np.ndarray
    n_nodes: int


def _collar_geometry(cover: WhitneyCover):
    """Collar squares inside the domain and triangles of the cut cells (cached)."""
    cache = cover.__dict__.get("_collar_geometry")
    if cache is not None:
        return cache
    c = cover.collar
    if len(c) == 0:
        out = (np.zeros(0, complex), np.zeros(0), np.zeros((0, 3), complex))
    else:
        h = cover.root_scale * np.exp2(-c[:, 0].astype(float))
        lo = cover.origin[None, :] + c[:, 1:] * h[:, None]
        boxes = shapely.box(lo[:, 0], lo[:, 1], lo[:, 0] + h, lo[:, 1] + h)
        poly = shapely.Polygon(cover.domain.vertices)
        inside = shapely.within(boxes, poly)
        sq_c = (lo[inside, 0] + h[inside] / 2) + 1j * (lo[inside, 1] + h[inside] / 2)
        tris = []
        for g in shapely.intersection(boxes[~inside], poly):
            if g.is_empty or g.area == 0:
                continue
            for t in shapely.get_parts(shapely.constrained_delaunay_triangles(g)):
                xy = np.asarray(t.exterior.coords)[:3]
                tris.append(xy[:, 0] + 1j * xy[:, 1])
        tri = np.array(tris, dtype=complex).reshape(-1, 3)
        out = (sq_c, h[inside], tri)
    cover.__dict__["_collar_geometry"] = out
    return out


def _pieces(f: GridFunction, quad: PVQuadrature) -> _Pieces:
    cov = f.cover
    X = f.points
    sq_c = X[:, 0] + 1j * X[:, 1]
    sq_h = np.repeat(cov.sides / f.m, f.m * f.m)
    vals = np.asarray(f.values, dtype=complex)
    cc, ch, tri = _collar_geometry(cov)
    if quad.collar == "zero" or len(X) == 0:
        cv = np.zeros(len(cc), complex)
        tv = np.zeros(len(tri), complex)
    else:
        tree = cKDTree(X)
        cv = vals[tree.query(np.column_stack([cc.real, cc.imag]))[1]] if len(cc) else np.zeros(0, complex)
        g = tri.mean(axis=1)
        tv = vals[tree.query(np.column_stack([g.real, g.imag]))[1]] if len(tri) else np.zeros(0, complex)
    return _Pieces(np.concatenate([sq_c, cc]), np.concatenate([sq_h, ch]), np.concatenate([vals, cv]),
                   tri, tv, len(X))


# ---------------------------------------------------------------------------
# integration rules

_A = (6 - math.sqrt(15)) / 21
_B = (6 + math.sqrt(15)) / 21
_RADON_BARY = np.array([[1 / 3, 1 / 3, 1 / 3],
                        [_A, _A, 1 - 2 * _A], [_A, 1 - 2 * _A, _A], [1 - 2 * _A, _A, _A],
                        [_B, _B, 1 - 2 * _B], [_B, 1 - 2 * _B, _B], [1 - 2 * _B, _B, _B]])
_RADON_W = np.array([9 / 40] + [(155 - math.sqrt(15)) / 1200] * 3 + [(155 + math.sqrt(15)) / 1200] * 3)


def _tri_area(t: np.ndarray) -> np.ndarray:
    a, b, c = t[..., 0], t[..., 1], t[..., 2]
    return 0.5 * np.abs(((b - a).conjugate() * (c - a)).imag)


def _square_tris(c: np.ndarray, h: np.ndarray) -> np.ndarray:
    d = 0.5 * h
    p00, p10 = c - d - 1j * d, c + d - 1j * d
    p01, p11 = c - d + 1j * d, c + d + 1j * d
    return np.concatenate([np.stack([p00, p10, p11], -1), np.stack([p00, p11, p01], -1)])


def _adaptive(K: KernelSpec, x: complex, tri: np.ndarray, val: np.ndarray, eta: float,
              max_depth: int = 40) -> complex:
    """Sum of val * int_T K(x - y) dy over triangles not containing x, refined until small."""
    total = 0.0 + 0.0j
    t, v = tri, val
    for _ in range(max_depth):
        if len(t) == 0:
            return total
        g = t.mean(axis=1)
        R = np.max(np.abs(t - g[:, None]), axis=1)
        dist = np.abs(x - g) - R
        leaf = R <= eta * dist
        if leaf.any():
            tl = t[leaf]
            pts = _RADON_BARY @ tl.T  # (7, n)
            vals = K(x - pts)
            total += np.sum(v[leaf] * _tri_area(tl) * (_RADON_W @ vals))
        t, v = t[~leaf], v[~leaf]
        if len(t):
            a, b, c = t[:, 0], t[:, 1], t[:, 2]
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            t = np.concatenate([np.stack(s, -1) for s in
                                ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
            v = np.tile(v, 4)
    raise RuntimeError("adaptive quadrature did not terminate; point too close to a piece")


def _gauss_square(K: KernelSpec, x: np.ndarray, c: np.ndarray, h: np.ndarray, n: int) -> np.ndarray:
    g, w = np.polynomial.legendre.leggauss(n)
    off = (g[:, None] + 1j * g[None, :]).reshape(-1)
    ww = (w[:, None] * w[None, :]).reshape(-1)
    y = c[:, None] + 0.5 * h[:, None] * off[None, :]
    return (K(x[:, None] - y) @ ww) * (0.25 * h * h)


def _ray_exit(x: complex, poly: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Exit distance of rays x + t*omega from a convex polygon whose closure contains x."""
    p = poly
    q = np.roll(poly, -1)
    e = q - p
    # solve x + t w = p + u e
    w = omega[:, None]
    den = (w.conjugate() * e[None, :]).imag
    r = (p - x)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (r.conjugate() * e[None, :]).imag / den
        u = (r.conjugate() * w).imag / den
    scale = np.max(np.abs(poly - x)) + 1e-300
    ok = (np.abs(den) > 1e-15) & (u >= -1e-12) & (u <= 1 + 1e-12) & (t > 1e-12 * scale)
    t = np.where(ok, t, np.inf)
    out = t.min(axis=1)
    return np.where(np.isfinite(out), out, 0.0)


def _polar(K: KernelSpec, x: complex, poly: np.ndarray, deltas: np.ndarray, quad: PVQuadrature) -> np.ndarray:
    """int over (poly minus B(x, delta)) of K(x - y) dy, for each delta.  x in closure(poly)."""
    ang = np.angle(poly - x)
    ang = ang[np.abs(poly - x) > 1e-14 * np.max(np.abs(poly - x))]
    cuts = np.unique(np.mod(np.concatenate([ang, [0.0]]), 2 * np.pi))
    cuts = np.concatenate([cuts, [cuts[0] + 2 * np.pi]])
    gt, wt = np.polynomial.legendre.leggauss(quad.n_theta)
    gr, wr = np.polynomial.legendre.leggauss(quad.n_rad)
    out = np.zeros(len(deltas), complex)
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a < 1e-15:
            continue
        th = 0.5 * (b - a) * gt + 0.5 * (b + a)
        om = np.exp(1j * th)
        tmax = _ray_exit(x, poly, om)
        for j, dl in enumerate(deltas):
            live = tmax > dl
            if not live.any():
                continue
            lo, hi = np.log(dl), np.log(tmax[live])
            s = 0.5 * (hi - lo)[:, None] * gr[None, :] + 0.5 * (hi + lo)[:, None]
            t = np.exp(s)
            vals = K(-t * om[live][:, None]) * t * t
            radial = (vals @ wr) * 0.5 * (hi - lo)
            out[j] += 0.5 * (b - a) * np.sum(wt[live] * radial)
    return out


def _square_poly(c: complex, h: float) -> np.ndarray:
    d = 0.5 * h
    return np.array([c - d - 1j * d, c + d - 1j * d, c + d + 1j * d, c - d + 1j * d])


def _sq_dist(x: np.ndarray, c: np.ndarray, h: np.ndarray) -> np.ndarray:
    dx = np.maximum(np.abs((x - c).real) - 0.5 * h, 0.0)
    dy = np.maximum(np.abs((x - c).imag) - 0.5 * h, 0.0)
    return np.hypot(dx, dy)


def _in_triangle(x: complex, t: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    a, b, c = t[:, 0], t[:, 1], t[:, 2]

    def cr(p, q):
        return ((q - p).conjugate() * (x - p)).imag
    s1, s2, s3 = cr(a, b), cr(b, c), cr(c, a)
    scale = np.abs(b - a) * np.abs(c - a) * tol
    neg = (s1 < -scale) | (s2 < -scale) | (s3 < -scale)
    pos = (s1 > scale) | (s2 > scale) | (s3 > scale)
    return ~(neg & pos)


def _far_rules(order: int):
    """(offsets, weights) on the unit square and (barycentrics, weights) on triangles."""
    if order <= 1:
        return np.zeros(1, complex), np.ones(1), np.full((1, 3), 1 / 3), np.ones(1)
    g, w = np.polynomial.legendre.leggauss(order)
    off = (g[:, None] + 1j * g[None, :]).reshape(-1)
    ww = (w[:, None] * w[None, :]).reshape(-1) / 4
    return off, ww, _RADON_BARY, _RADON_W


def _tri_far(x: np.ndarray, tri: np.ndarray, far: float) -> np.ndarray:
    g = tri.mean(axis=-1)
    R = np.max(np.abs(tri - g[..., None]), axis=-1)
    return (np.abs(x - g) - R) >= far * 2 * R


# ---------------------------------------------------------------------------
# point evaluation


def _point_apply(K: KernelSpec, x: complex, P: _Pieces, quad: PVQuadrature, h_here: float | None):
    """Regular part and the singular-part sequence at an arbitrary point."""
    d = _sq_dist(np.full(len(P.sq_c), x), P.sq_c, P.sq_h)
    ratio = d / P.sq_h
    sing = d <= 1e-13 * P.sq_h
    near = ~sing & (ratio < quad.near)
    mid = (ratio >= quad.near) & (ratio < quad.far)
    far = ratio >= quad.far
    off, ow, bary, bw = _far_rules(quad.far_order)
    reg = 0.0 + 0.0j
    for o, wo in zip(off, ow):
        reg += np.sum(P.sq_v[far] * K(x - P.sq_c[far] - 0.5 * P.sq_h[far] * o) * P.sq_h[far] ** 2) * wo
    if mid.any():
        reg += np.sum(P.sq_v[mid] * _gauss_square(K, np.full(mid.sum(), x), P.sq_c[mid], P.sq_h[mid],
                                                  quad.mid_order))
    if near.any():
        tri = _square_tris(P.sq_c[near], P.sq_h[near])
        reg += _adaptive(K, x, tri, np.tile(P.sq_v[near], 2), quad.eta)
    tsing = np.zeros(len(P.tri), bool)
    if len(P.tri):
        tsing = _in_triangle(x, P.tri)
        tfar = ~tsing & _tri_far(x, P.tri, quad.far)
        tv = P.tri_v[tfar] * _tri_area(P.tri[tfar])
        for b, wb in zip(bary, bw):
            reg += np.sum(tv * K(x - P.tri[tfar] @ b)) * wb
        rest = ~tsing & ~tfar
        if rest.any():
            reg += _adaptive(K, x, P.tri[rest], P.tri_v[rest], quad.eta)
    # exclusion radii: inside every singular piece and short of every regular piece
    gaps = [d[~sing]]
    if len(P.tri):
        gt = P.tri[~tsing].mean(axis=1)
        Rt = np.max(np.abs(P.tri[~tsing] - gt[:, None]), axis=1)
        gaps.append(np.abs(x - gt) - Rt)
    gap = float(np.min(np.concatenate(gaps))) if sum(len(g) for g in gaps) else np.inf
    if quad.delta0 is not None:
        d0 = quad.delta0
    else:
        hs = P.sq_h[sing]
        d0 = 0.5 * (float(hs.min()) if len(hs) else (h_here or 1.0))
    d0 = min(d0, gap) if gap > 0 else d0
    deltas = d0 * 2.0 ** -np.arange(quad.J + 1)
    seq = np.zeros(len(deltas), complex)
    for i in np.flatnonzero(sing):
        seq += P.sq_v[i] * _polar(K, x, _square_poly(P.sq_c[i], P.sq_h[i]), deltas, quad)
    for i in np.flatnonzero(tsing):
        seq += P.tri_v[i] * _polar(K, x, P.tri[i], deltas, quad)
    return reg, seq


def _converged(seq: np.ndarray, tol: float) -> bool:
    if len(seq) < 2:
        return True
    return bool(abs(seq[-1] - seq[-2]) <= tol * max(1.0, abs(seq[-1])))


def pv_apply(spec: KernelSpec, f: GridFunction, x, quad: PVQuadrature | None = None) -> PVResult:
    """Principal value of ``int K(x - y) f(y) dy`` with f read as a cell-wise constant density."""
    quad = quad or PVQuadrature()
    z = complex(x[0], x[1]) if not np.iscomplexobj(x) and np.ndim(x) == 1 else complex(x)
    P = _pieces(f, quad)
    reg, seq = _point_apply(spec, z, P, quad, None)
    vals = [complex(reg + s) for s in seq]
    return PVResult(vals[-1], vals, _converged(np.array(vals), quad.tol))


# ---------------------------------------------------------------------------
# node evaluation in bulk

_TABLES: dict = {}


def _near_square_table(spec: KernelSpec, quad: PVQuadrature, key) -> complex:
    """Integral over a lattice square near a node, in units of the smaller cell (degree -2 kernels)."""
    full = (spec.id, id(spec.evaluate), quad.eta) + tuple(key)
    hit = _TABLES.get(full)
    if hit is None:
        kx, kp, ox, oy = key
        c = np.array([0.5 * ox + 0.5j * oy])
        tri = _square_tris(c, np.array([2.0 ** kp]))
        hit = _adaptive(spec, 0.0 + 0.0j, tri, np.ones(2, complex), quad.eta)
        _TABLES[full] = hit
    return hit


def _self_sequence(spec: KernelSpec, quad: PVQuadrature, h: float) -> np.ndarray:
    d0 = quad.delta0 if quad.delta0 is not None else 0.5 * h
    deltas = min(d0, 0.5 * h) * 2.0 ** -np.arange(quad.J + 1)
    return _polar(spec, 0.0 + 0.0j, _square_poly(0.0, h), deltas, quad)


def _block_apply(spec: KernelSpec, P: _Pieces, quad: PVQuadrature, nodes: np.ndarray, lattice: bool):
    x = P.sq_c[nodes]
    hx = P.sq_h[nodes]
    c, h, v = P.sq_c, P.sq_h, P.sq_v
    d = _sq_dist(x[:, None], c[None, :], h[None, :])
    ratio = d / h[None, :]
    self_mask = np.zeros(ratio.shape, bool)
    self_mask[np.arange(len(nodes)), nodes] = True
    far = ratio >= quad.far
    off, ow, bary, bw = _far_rules(quad.far_order)
    out = np.zeros(len(nodes), complex)
    for o, wo in zip(off, ow):
        with np.errstate(divide="ignore", invalid="ignore"):
            kern = np.where(far, spec(x[:, None] - (c + 0.5 * h * o)[None, :]), 0.0)
        out += kern @ (v * h * h * wo)
    bi, pj = np.nonzero((ratio >= quad.near) & ~far)
    if len(bi):
        g = _gauss_square(spec, x[bi], c[pj], h[pj], quad.mid_order) * v[pj]
        out += np.bincount(bi, weights=g.real, minlength=len(nodes)) + \
            1j * np.bincount(bi, weights=g.imag, minlength=len(nodes))
    bi, pj = np.nonzero((ratio < quad.near) & ~self_mask)
    if len(bi):
        if lattice:
            hmin = np.minimum(hx[bi], h[pj])
            kx = np.rint(np.log2(hx[bi] / hmin)).astype(np.int64)
            kp = np.rint(np.log2(h[pj] / hmin)).astype(np.int64)
            off = (c[pj] - x[bi]) * 2.0 / hmin
            keys = np.column_stack([kx, kp, np.rint(off.real).astype(np.int64), np.rint(off.imag).astype(np.int64)])
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
            tab = np.array([_near_square_table(spec, quad, tuple(int(t) for t in u)) for u in uniq])
            contrib = tab[inv.reshape(-1)] * v[pj]
            out += np.bincount(bi, weights=contrib.real, minlength=len(nodes)) + \
                1j * np.bincount(bi, weights=contrib.imag, minlength=len(nodes))
        else:
            for b in np.unique(bi):
                sel = pj[bi == b]
                out[b] += _adaptive(spec, x[b], _square_tris(c[sel], h[sel]), np.tile(v[sel], 2), quad.eta)
    if len(P.tri):
        tfar = _tri_far(x[:, None], P.tri[None, :, :], quad.far)
        tv = P.tri_v * _tri_area(P.tri)
        for bb, wb in zip(bary, bw):
            with np.errstate(divide="ignore", invalid="ignore"):
                kt = np.where(tfar, spec(x[:, None] - (P.tri @ bb)[None, :]), 0.0)
            out += kt @ (tv * wb)
        for b in np.flatnonzero(~tfar.all(axis=1)):
            sel = ~tfar[b]
            out[b] += _adaptive(spec, x[b], P.tri[sel], P.tri_v[sel], quad.eta)
    return out


@dataclass
class TruncatedResult:
    values: GridFunction
    sequences: np.ndarray = field(repr=False)
    converged: np.ndarray = field(repr=False)

    @property
    def n_nonconverged(self) -> int:
        return int(np.sum(~self.converged))


def truncated_apply(spec: KernelSpec, f: GridFunction, quad: PVQuadrature | None = None,
                    block: int = 64) -> TruncatedResult:
    """``chi_Omega T(chi_Omega f)`` at every node of f's (interior) cover."""
    quad = quad or PVQuadrature()
    if f.cover.side != "interior":
        raise KernelError("truncated_apply needs a function on an interior cover")
    P = _pieces(f, quad)
    n = P.n_nodes
    lattice = spec.degree == -2.0
    blocks = [np.arange(i, min(i + block, n)) for i in range(0, n, block)]
    reg = np.concatenate(pmap(lambda b: _block_apply(spec, P, quad, b, lattice), blocks)) if n else np.zeros(0, complex)
    seq = np.zeros((n, quad.J + 1), complex)
    if lattice:
        canon = _self_sequence(spec, quad, 1.0)
        seq = P.sq_v[:n, None] * canon[None, :]
    else:
        for i in range(n):
            seq[i] = P.sq_v[i] * _self_sequence(spec, quad, P.sq_h[i])
    tot = reg[:, None] + seq
    conv = np.abs(tot[:, -1] - tot[:, -2]) <= quad.tol * np.maximum(1.0, np.abs(tot[:, -1]))
    vals = tot[:, -1]
    if np.all(vals.imag == 0):
        vals = vals.real
    return TruncatedResult(f.with_values(vals), tot, conv)


# ---------------------------------------------------------------------------
# closed form for the Beurling transform of a polygon indicator


def beurling_polygon(vertices, z) -> np.ndarray:
    """``-(1/pi) p.v. int_P dA(w) / (z - w)^2`` for a simple polygon P.

    Green's formula turns the area integral into boundary terms of
    ``conj(w) / (z - w)^2``; the small circle around z contributes nothing.
    """
    v = np.asarray(vertices, float)
    w = v[:, 0] + 1j * v[:, 1]
    zz = np.atleast_1d(np.asarray(z, dtype=complex))
    a, b = w, np.roll(w, -1)
    beta = (b - a).conjugate() / (b - a)
    alpha = a.conjugate() - beta * a
    za, zb = zz[:, None] - a[None, :], zz[:, None] - b[None, :]
    term = alpha * (1 / zb - 1 / za) + beta * (zz[:, None] * (1 / zb - 1 / za) + np.log(zb / za))
    out = -(1 / np.pi) * term.sum(axis=1) / (2j)
    return out if np.ndim(z) else out[0]


# ---------------------------------------------------------------------------
# T(1) and the key-lemma harness


@dataclass
class T1Report:
    kernel: str
    lp: float
    grad_lp: float
    total: float
    collar_excluded_variant: dict
    worst_cubes: list
    n_nonconverged: int
    params: dict
    rho: float
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _norms(w, g, grad, p, mask):
    lp = float(np.sum(w[mask] * np.abs(g[mask]) ** p) ** (1 / p))
    gl = float(np.sum(w[mask] * grad[mask] ** p) ** (1 / p))
    return lp, gl


def t1_check(spec: KernelSpec, cover: WhitneyCover, params: SeminormParams, index=None,
             rho: float | None = None, quad: PVQuadrature | None = None, m: int = 2,
             n_worst: int = 10) -> T1Report:
    """``||T_Omega 1||_p + ||grad^s_q T_Omega 1||_p`` with the shadow fractional gradient.

    The same norm without the frontier cubes (those touching the collar) is
    reported in ``collar_excluded_variant``.
    """
    notes = []
    if not params.s > params.d / params.p:
        msg = f"s = {params.s} <= d/p = {params.d / params.p}; computing anyway"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    if index is None and rho is None:
        rho = DEFAULT_RHO
    variant, rho = _resolve_variant("shadow", index, rho)
    params.check(variant)
    one = GridFunction(cover, m, np.ones(len(cover) * m * m))
    T = truncated_apply(spec, one, quad)
    g = T.values
    from .chains import ShadowIndex
    idx = index if index is not None else ShadowIndex(cover, rho)
    grad = fractional_gradient_all(g, params, idx)
    w = g.weights
    p = params.p
    allm = np.ones(len(w), bool)
    lp, gl = _norms(w, g.values, grad, p, allm)
    inner = ~np.repeat(cover.frontier, m * m)
    lp2, gl2 = _norms(w, g.values, grad, p, inner)
    per_cube = np.sum((w * grad ** p).reshape(len(cover), -1), axis=1)
    order = np.argsort(-per_cube, kind="stable")[:n_worst]
    worst = [{"cube": [int(cover.level[i]), int(cover.ix[i]), int(cover.iy[i])],
              "contribution": float(per_cube[i]), "frontier": bool(cover.frontier[i])} for i in order]
    return T1Report(spec.id, lp, gl, lp + gl, {"lp": lp2, "grad_lp": gl2, "total": lp2 + gl2}, worst,
                    T.n_nonconverged, {"s": params.s, "p": params.p, "q": params.q, "d": params.d},
                    float(rho), notes)


def key_lemma_ratio(spec: KernelSpec, f: GridFunction, params: SeminormParams, index=None,
                    rho: float | None = None, quad: PVQuadrature | None = None, r: int = 2) -> dict:
    """``sum_Q ||grad^s_q T_Omega(f - f_Q)||_{L^p(Q)}^p`` over the shadow seminorm^p of f.

    ``T_Omega(f - f_Q)`` is assembled as ``T_Omega(f - fbar) + (fbar - f_Q) T_Omega 1``
    with fbar the node mean of f, so a constant f gives exactly zero.
    """
    if index is None and rho is None:
        rho = DEFAULT_RHO
    variant, rho = _resolve_variant("shadow", index, rho)
    params.check(variant)
    cov = f.cover
    v = f.values
    same = bool(np.all(v == v[0])) if len(v) else True
    fbar = v[0] if same else v.mean()
    Tc = truncated_apply(spec, f.with_values(v - fbar), quad).values.values
    T1 = truncated_apply(spec, f.with_values(np.ones(len(v))), quad).values.values
    fq = f.cube_means()
    S = _Setup(f, params, variant, rho, r)
    mm = f.m * f.m
    e = params.p / params.q
    lhs = 0.0
    for Q in range(len(cov)):
        S.v = Tc + (fbar - fq[Q]) * T1
        I = _chunk_inner(S, np.array([Q]))
        lhs += float(np.sum(f.weights[Q * mm:(Q + 1) * mm] * np.mean(I ** e, axis=1)))
    den = seminorm(f, params, "shadow", rho=rho, r=r).seminorm_part ** params.p
    if den == 0:
        return {"lhs": lhs, "denominator": 0.0, "ratio": None,
                "note": "discretely constant f: denominator is zero, lhs must vanish"}
    return {"lhs": lhs, "denominator": den, "ratio": lhs / den, "note": None}
