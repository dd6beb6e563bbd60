"""Sampled functions on Whitney covers and the difference norms built from them.

A :class:`GridFunction` stores ``m*m`` values per cube at the tensor midpoints.
Node ``k = b*m + a`` of cube ``i`` has global index ``i*m*m + k`` and sits at
``lower + ((a + 1/2)/m, (b + 1/2)/m) * l(Q)``.  Integrals use the midpoint rule
with node weight ``(l(Q)/m)**2``.

The inner singular integral of the seminorms is discretised as follows.  Node
pairs in cubes that are equal or touching ("near" pairs) are evaluated on
``4**r`` sub-points of both node cells; all other pairs use one kernel value.
The node cell of ``x`` itself is left out.  For each outer node the inner sum is
formed separately at every sub-point ``x'_a``; the outer sum averages
``I_a**(p/q)`` over the sub-points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from ._parallel import pmap
from .geometry import _CODE, WhitneyCover, _points_to_edges, long_distance_many

__all__ = [
    "FunctionError",
    "GridFunction",
    "SeminormParams",
    "NormReport",
    "sample_function",
    "parse_expression",
    "lp_norm",
    "seminorm",
    "norm",
    "inner_integrals",
    "fractional_gradient",
    "maximal",
    "maximal_all",
    "check_maximal_lemma",
    "sharpness_experiment",
    "bump_profile",
    "random_positive",
]

D = 2


class FunctionError(ValueError):
    """Bad function description or invalid parameters."""


# ---------------------------------------------------------------------------
# sampled functions


class GridFunction:
    """Values at the ``m x m`` tensor midpoints of every cube of a cover."""

    def __init__(self, cover: WhitneyCover, m: int, values):
        if m < 1:
            raise FunctionError("m must be >= 1")
        vals = np.asarray(values)
        n = len(cover) * m * m
        if vals.shape == (len(cover), m * m):
            vals = vals.reshape(-1)
        if vals.shape != (n,):
            raise FunctionError(f"expected {n} node values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise FunctionError(f"non-finite value at node {bad} {tuple(node_points(cover, m)[bad])}")
        self.cover = cover
        self.m = int(m)
        self.is_complex = bool(np.iscomplexobj(vals))
        self.values = vals.astype(complex if self.is_complex else float)
        self.values.setflags(write=False)

    @property
    def points(self) -> np.ndarray:
        return node_points(self.cover, self.m)

    @property
    def weights(self) -> np.ndarray:
        return np.repeat((self.cover.sides / self.m) ** 2, self.m * self.m)

    @property
    def node_cube(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.cover)), self.m * self.m)

    def per_cube(self) -> np.ndarray:
        return self.values.reshape(len(self.cover), self.m * self.m)

    def cube_means(self) -> np.ndarray:
        """f_Q as node means; exact when all node values coincide."""
        v = self.per_cube()
        mean = v.mean(axis=1)
        same = np.all(v == v[:, :1], axis=1)
        mean[same] = v[same, 0]
        return mean

    def node_index(self, cube: int, k: int) -> int:
        return int(cube) * self.m * self.m + int(k)

    def nearest_node(self, point) -> int:
        return int(np.argmin(np.linalg.norm(self.points - np.asarray(point, float), axis=1)))

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.cover, self.m, values)

    def __mul__(self, lam) -> "GridFunction":
        return self.with_values(self.values * lam)

    __rmul__ = __mul__


def node_points(cover: WhitneyCover, m: int) -> np.ndarray:
    cache = cover.__dict__.setdefault("_node_points", {})
    if m not in cache:
        t = (np.arange(m) + 0.5) / m
        a = np.tile(t, m)
        b = np.repeat(t, m)
        lo = cover.boxes[:, :2]
        h = cover.sides[:, None]
        pts = np.stack([lo[:, :1] + a[None, :] * h, lo[:, 1:2] + b[None, :] * h], axis=-1).reshape(-1, 2)
        pts.setflags(write=False)
        cache[m] = pts
    return cache[m]


_SAFE = {name: getattr(np, name) for name in
         ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "arctan2", "hypot", "minimum",
          "maximum", "where", "sinh", "cosh", "tanh", "pi", "e")}


def bump_profile(r):
    """Radial cubic spline ``1 - 3r^2 + 2r^3`` on ``r < 1``, zero outside."""
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, 1.0 - 3.0 * r * r + 2.0 * r ** 3, 0.0)


def random_positive(seed: int, center=(0.0, 0.0), scale: float = 1.0, n_modes: int = 8):
    """Seeded random trigonometric polynomial with values in [0.05, 1.95].

    The same seed gives the same function at every resolution, so ratios
    computed on different covers see one fixed g.
    """
    rng = np.random.default_rng(seed)
    freq = rng.uniform(0.5, 6.0, size=(n_modes, 2)) / float(scale)
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    amp = rng.uniform(-1, 1, size=n_modes)
    amp *= 0.95 / np.sum(np.abs(amp))
    c0 = np.asarray(center, float)

    def f(X):
        return 1.0 + np.cos((X - c0) @ freq.T + phase) @ amp
    return f


def parse_expression(expr, domain=None) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a function description into a callable on ``(n, 2)`` point arrays.

    Builtins: ``const[:c]``, ``x1``, ``x2``, ``bump[:cx,cy,r]``,
    ``holder:a[:cx,cy]`` (``|x - x0|**a``) and ``rand[:seed]`` (see
    :func:`random_positive`).  The default centre is the middle
    of the domain's bounding box and the default bump radius half its larger
    extent.  Anything else is evaluated as a numpy expression in ``x1, x2``.
    """
    if callable(expr):
        return expr
    if not isinstance(expr, str):
        raise FunctionError(f"cannot interpret function {expr!r}")
    if domain is not None:
        lo, hi = domain.vertices.min(axis=0), domain.vertices.max(axis=0)
        center, radius = 0.5 * (lo + hi), 0.5 * float((hi - lo).max())
    else:
        center, radius = np.zeros(2), 1.0
    head, _, rest = expr.strip().partition(":")

    def floats(txt):
        return [float(t) for t in txt.split(",") if t.strip()]

    if head == "const":
        c = float(rest) if rest else 1.0
        return lambda X: np.full(len(X), c)
    if head == "x1" and not rest:
        return lambda X: np.array(X[:, 0], dtype=float)
    if head == "x2" and not rest:
        return lambda X: np.array(X[:, 1], dtype=float)
    if head == "bump":
        if rest:
            cx, cy, r0 = floats(rest)
            center, radius = np.array([cx, cy]), r0
        c0, r0 = np.asarray(center, float), float(radius)
        return lambda X: bump_profile(np.linalg.norm(X - c0, axis=1) / r0)
    if head == "holder":
        a_txt, _, c_txt = rest.partition(":")
        if not a_txt:
            raise FunctionError("holder needs an exponent, e.g. holder:0.7")
        a = float(a_txt)
        c0 = np.array(floats(c_txt)) if c_txt else np.asarray(center, float)
        return lambda X: np.linalg.norm(X - c0, axis=1) ** a
    if head == "rand":
        seed = int(rest) if rest else 0
        return random_positive(seed, center, radius)
    try:
        code = compile(expr, "<function>", "eval")
    except SyntaxError as exc:
        raise FunctionError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    for name in code.co_names:
        if name not in _SAFE and name not in ("x1", "x2", "x", "y"):
            raise FunctionError(f"unknown name {name!r} in expression")

    def f(X):
        env = dict(_SAFE, x1=X[:, 0], x2=X[:, 1], x=X[:, 0], y=X[:, 1])
        with np.errstate(all="ignore"):
            out = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - names are whitelisted
        return np.broadcast_to(np.asarray(out), (len(X),)).copy()

    return f


def sample_function(cover: WhitneyCover, expression, m: int = 2) -> GridFunction:
    """Evaluate a function description at every node of the cover."""
    if m < 1:
        raise FunctionError("m must be >= 1")
    f = parse_expression(expression, cover.domain)
    X = node_points(cover, m)
    with np.errstate(all="ignore"):
        vals = np.asarray(f(np.array(X)))
    return GridFunction(cover, m, vals)


# ---------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class SeminormParams:
    s: float
    p: float
    q: float
    d: int = D

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise FunctionError("s must lie in (0, 1)")
        if not (1 < self.p < math.inf and 1 < self.q < math.inf):
            raise FunctionError("p and q must lie in (1, inf)")
        if self.d != D:
            raise FunctionError("only d = 2 is supported")

    @property
    def valid(self) -> bool:
        return self.s > self.d / self.p - self.d / self.q

    @property
    def k(self) -> float:
        return self.s * self.q + self.d

    def check(self, variant: str) -> None:
        if variant not in ("full", "shadow", "ball"):
            raise FunctionError(f"unknown variant {variant!r}")
        if variant == "ball" and self.q > self.p:
            raise FunctionError("ball variant needs 1<q≤p<∞; use the shadow variant for q > p")
        if not self.valid:
            raise FunctionError(f"(s,p,q)=({self.s},{self.p},{self.q}) violates s > d/p - d/q")


@dataclass
class NormReport:
    lp_part: float
    seminorm_part: float
    variant: str
    m: int
    max_level: int
    r: int
    tail_estimate: float = 0.0
    total: float = 0.0
    rho: float | None = None
    params: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.total = self.lp_part + self.seminorm_part

    def to_json(self) -> dict:
        return asdict(self)


def lp_norm(f: GridFunction, p: float) -> float:
    """Midpoint-rule ``(sum w |f|^p)^(1/p)`` over the covered cubes."""
    if not p >= 1:
        raise FunctionError("p must be >= 1")
    return float(np.sum(f.weights * np.abs(f.values) ** p) ** (1.0 / p))


def _sub_offsets(r: int) -> np.ndarray:
    n = 2 ** r
    t = (np.arange(n) + 0.5) / n - 0.5
    return np.column_stack([np.tile(t, n), np.repeat(t, n)])


_TABLES: dict = {}


def _near_table(r: int, k: float, key: tuple[int, int, int]) -> np.ndarray:
    """Sub-point kernel sums for a near pair, in units of the smaller cell.

    ``key = (dl, ox, oy)`` with ``dl = log2(h_x/h_y)`` and the centre offset
    ``(Y - X)`` equal to ``(ox, oy)/2`` smaller-cell sides.
    """
    full = (r, k) + key
    hit = _TABLES.get(full)
    if hit is None:
        dl, ox, oy = key
        sx, sy = (2.0 ** dl, 1.0) if dl > 0 else (1.0, 2.0 ** (-dl))
        u = _sub_offsets(r)
        xa = sx * u
        yb = np.array([ox, oy]) / 2.0 + sy * u
        dist = np.linalg.norm(xa[:, None, :] - yb[None, :, :], axis=-1)
        hit = sy * sy / len(u) * np.sum(dist ** (-k), axis=1)
        hit.setflags(write=False)
        _TABLES[full] = hit
    return hit


def _near_pairs(cover: WhitneyCover, cubes: np.ndarray, m: int):
    """Node pairs (x, y) with x in ``cubes`` and y in the same or a touching cube."""
    mm = m * m
    cp = [(P, Q) for P in cubes for Q in np.concatenate([[P], cover.adjacency[P]])]
    cp = np.array(cp, dtype=np.int64).reshape(-1, 2)
    a = np.arange(mm)
    px = (cp[:, 0:1, None] * mm + a[None, :, None]) + 0 * a[None, None, :]
    py = (cp[:, 1:2, None] * mm + a[None, None, :]) + 0 * a[None, :, None]
    px, py = px.reshape(-1), py.reshape(-1)
    keep = px != py
    return px[keep], py[keep]


class _Setup:
    """Per-call arrays shared by the seminorm kernels."""

    def __init__(self, f: GridFunction, params: SeminormParams, variant: str, rho, r: int):
        cov = f.cover
        self.f, self.cov, self.params, self.variant, self.r = f, cov, params, variant, r
        self.m = f.m
        self.mm = f.m * f.m
        self.X = node_points(cov, f.m)
        self.w = f.weights
        self.v = f.values
        self.cube = f.node_cube
        self.h = np.repeat(cov.sides / f.m, self.mm)
        self.lvl = np.repeat(cov.level, self.mm)
        self.A = 4 ** r
        self.rho = None if rho is None else float(rho)
        if variant == "ball":
            self.delta = _points_to_edges(self.X, cov.domain.edges)
            self.node_tree = cKDTree(self.X)
        if variant == "shadow":
            self.cube_tree = cKDTree(cov.centers)
        self.max_half = float(np.sqrt(0.5) * cov.sides.max()) if len(cov) else 0.0


def _in_shadow(cov: WhitneyCover, P: np.ndarray, Q: np.ndarray, rho: float) -> np.ndarray:
    far = np.linalg.norm(cov.centers[Q] - cov.centers[P], axis=-1) + math.sqrt(0.5) * cov.sides[Q]
    return far <= rho * cov.sides[P]


def _range_mask(S: _Setup, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Whether node y lies in the integration range of node x (elementwise)."""
    if S.variant == "full":
        return np.ones(np.broadcast(xs, ys).shape, dtype=bool)
    if S.variant == "shadow":
        return _in_shadow(S.cov, S.cube[xs], S.cube[ys], S.rho)
    d = np.linalg.norm(S.X[xs] - S.X[ys], axis=-1)
    return d < S.rho * S.delta[xs]


def _candidates(S: _Setup, cubes: np.ndarray) -> np.ndarray:
    """Node indices that may lie in the range of any node of ``cubes``."""
    cov, mm = S.cov, S.mm
    if S.variant == "full":
        return np.arange(len(S.X))
    if S.variant == "shadow":
        hits = S.cube_tree.query_ball_point(cov.centers[cubes], S.rho * cov.sides[cubes])
        cand = np.unique(np.concatenate([np.asarray(hh, dtype=np.int64) for hh in hits]))
        return (cand[:, None] * mm + np.arange(mm)[None, :]).reshape(-1)
    xs = (cubes[:, None] * mm + np.arange(mm)[None, :]).reshape(-1)
    hits = S.node_tree.query_ball_point(S.X[xs], S.rho * S.delta[xs])
    return np.unique(np.concatenate([np.asarray(hh, dtype=np.int64) for hh in hits]))


def _chunk_inner(S: _Setup, cubes: np.ndarray) -> np.ndarray:
    """Inner sums ``I_a`` for all nodes of ``cubes``: shape (len(cubes)*m*m, A)."""
    cov, mm, q, k = S.cov, S.mm, S.params.q, S.params.k
    xs = (cubes[:, None] * mm + np.arange(mm)[None, :]).reshape(-1)
    pos = np.full(len(cov), -1, dtype=np.int64)
    pos[cubes] = np.arange(len(cubes))

    # far part: single kernel value per node pair
    ys = _candidates(S, cubes)
    near_cube = np.zeros((len(cubes), len(cov)), dtype=bool)
    for j, P in enumerate(cubes):
        near_cube[j, P] = True
        near_cube[j, cov.adjacency[P]] = True
    xrow = np.repeat(np.arange(len(cubes)), mm)
    far = ~near_cube[xrow][:, S.cube[ys]]
    far &= _range_mask(S, xs[:, None], ys[None, :])
    diff = np.abs(S.v[xs][:, None] - S.v[ys][None, :]) ** q
    dist = np.linalg.norm(S.X[xs][:, None, :] - S.X[ys][None, :, :], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = np.where(far, S.w[ys][None, :] * diff * dist ** (-k), 0.0)
    F = kern.sum(axis=1)

    # near part: tabulated sub-point sums
    px, py = _near_pairs(cov, cubes, S.m)
    keep = _range_mask(S, px, py)
    px, py = px[keep], py[keep]
    I = np.repeat(F[:, None], S.A, axis=1)
    if len(px):
        dl = S.lvl[py] - S.lvl[px]  # >0: x cell larger
        hmin = np.minimum(S.h[px], S.h[py])
        off = np.rint(2.0 * (S.X[py] - S.X[px]) / hmin[:, None]).astype(np.int64)
        keys = np.column_stack([dl, off])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        table = np.stack([_near_table(S.r, k, tuple(int(t) for t in u)) for u in uniq])
        vals = np.abs(S.v[px] - S.v[py]) ** q * hmin ** (2.0 - k)
        contrib = vals[:, None] * table[inv.reshape(-1)]
        rows = pos[S.cube[px]] * mm + (px % mm)
        order = np.lexsort((py, rows))
        rows, contrib = rows[order], contrib[order]
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        I[rows[starts]] += np.add.reduceat(contrib, starts, axis=0)
    return I


def inner_integrals(f: GridFunction, params: SeminormParams, variant: str = "full",
                    rho: float | None = None, r: int = 2, chunk: int = 64) -> np.ndarray:
    """Sub-point inner sums ``I_a(x)`` for every node, shape ``(n_nodes, 4**r)``."""
    S = _Setup(f, params, variant, rho, r)
    n = len(f.cover)
    blocks = [np.arange(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    parts = pmap(lambda b: _chunk_inner(S, b), blocks)
    return np.vstack(parts) if parts else np.zeros((0, S.A))


def _resolve_variant(variant, index, rho):
    from .chains import ShadowIndex
    if isinstance(variant, ShadowIndex):
        return "shadow", variant.rho
    if variant == "shadow":
        if index is not None:
            return "shadow", float(index.rho)
        if rho is None:
            raise FunctionError("shadow variant needs a ShadowIndex or rho")
        return "shadow", float(rho)
    if variant == "ball":
        if rho is None:
            raise FunctionError("ball variant needs rho in (0, 1)")
        if not 0 < rho < 1:
            raise FunctionError("ball variant needs rho in (0, 1)")
        return "ball", float(rho)
    return variant, None


def seminorm(f: GridFunction, params: SeminormParams, variant="full", index=None,
             rho: float | None = None, r: int = 2, tail_box=None) -> NormReport:
    """Discretised difference seminorm; see the module docstring for the scheme.

    ``variant`` is ``"full"``, ``"shadow"`` (with ``index`` or ``rho``) or
    ``"ball"`` (with ``rho`` in (0, 1), range ``B(x, rho*dist(x, boundary))``).
    With ``tail_box`` the far-field bound for the region outside that box is
    reported in ``tail_estimate`` (it is not added to the value).
    """
    variant, rho = _resolve_variant(variant, index, rho)
    params.check(variant)
    if r < 0:
        raise FunctionError("r must be >= 0")
    I = inner_integrals(f, params, variant, rho, r)
    e = params.p / params.q
    outer = np.sum(f.weights * np.mean(I ** e, axis=1))
    semi = float(outer ** (1.0 / params.p))
    diag = _diagnostics(f, params, I)
    tail = 0.0
    if tail_box is not None:
        tail = exterior_tail(f, params, tail_box, I)
        diag["tail_box"] = list(map(float, tail_box))
    return NormReport(lp_norm(f, params.p), semi, variant, f.m, f.cover.max_level, r,
                      tail_estimate=tail, rho=rho,
                      params={"s": params.s, "p": params.p, "q": params.q, "d": params.d},
                      diagnostics=diag)


def norm(f: GridFunction, params: SeminormParams, variant="full", **kw) -> NormReport:
    return seminorm(f, params, variant, **kw)


def _diagnostics(f: GridFunction, params: SeminormParams, I: np.ndarray) -> dict:
    cov = f.cover
    s, q = params.s, params.q
    X, v = f.points, f.values
    lip = 0.0
    mm = f.m * f.m
    for P in range(len(cov)):
        nb = np.concatenate([[P], cov.adjacency[P]])
        ys = (nb[:, None] * mm + np.arange(mm)[None, :]).reshape(-1)
        xs = np.arange(P * mm, (P + 1) * mm)
        dv = np.abs(v[xs][:, None] - v[ys][None, :])
        dx = np.linalg.norm(X[xs][:, None, :] - X[ys][None, :, :], axis=-1)
        ok = dx > 0
        if ok.any():
            lip = max(lip, float(np.max(dv[ok] / dx[ok])))
    h = cov.sides.max() / f.m if len(cov) else 0.0
    bound = lip ** q * 2 * math.pi * (h * math.sqrt(0.5)) ** ((1 - s) * q) / ((1 - s) * q)
    med = float(np.median(I)) if I.size else 0.0
    return {
        "n_nodes": int(len(v)),
        "n_cubes": int(len(cov)),
        "collar_area": cov.collar_area,
        "lip_proxy": lip,
        "self_cell_bound": bound,
        "self_cell_bound_rel": bound / med if med > 0 else 0.0,
    }


def exterior_tail(f: GridFunction, params: SeminormParams, box, I: np.ndarray | None = None) -> float:
    """Upper bound for the part of the full seminorm^p involving the outside of ``box``.

    ``f`` is taken to vanish outside the box.  For a node x inside, the inner
    integral over the outside is at most ``|f(x)|^q * 2*pi*R^(-sq)/(sq)`` with
    R the distance from x to the box boundary.  For x outside at distance t
    from the box, the inner integral is at most ``||f||_q^q (t + g)^(-sq-d)``,
    where g is the gap between the support of f and the box boundary.
    Integrating over the outside uses the perimeter-plus-circle growth of the
    level sets of t.
    """
    s, p, q, k = params.s, params.p, params.q, params.k
    x0, y0, x1, y1 = map(float, box)
    X, w, v = f.points, f.weights, np.abs(f.values)
    R = np.minimum.reduce([X[:, 0] - x0, x1 - X[:, 0], X[:, 1] - y0, y1 - X[:, 1]])
    if np.any(R <= 0):
        raise FunctionError("nodes must lie strictly inside the tail box")
    tin = v ** q * 2 * math.pi * R ** (-s * q) / (s * q)
    if I is None:
        I = inner_integrals(f, params, "full", None, 0)
    e = p / q
    part_in = float(np.sum(w * (np.mean((I + tin[:, None]) ** e, axis=1) - np.mean(I ** e, axis=1))))
    nz = v > 0
    if not nz.any():
        return part_in
    h = np.sqrt(w)
    gap = float(np.min(R[nz] - 0.5 * h[nz]))
    Fq = float(np.sum(w * v ** q))
    n = k * e
    if n <= 2 or gap <= 0:
        return math.inf
    perim = 2 * ((x1 - x0) + (y1 - y0))
    part_out = Fq ** e * (perim * gap ** (1 - n) / (n - 1) + 2 * math.pi * gap ** (2 - n) / ((n - 1) * (n - 2)))
    return part_in + part_out


# ---------------------------------------------------------------------------
# fractional gradient


def fractional_gradient(f: GridFunction, params: SeminormParams, index, x: int, r: int = 2) -> float:
    """Shadow-restricted inner integral at node ``x``.

    With sub-point refinement the value is ``(mean_a I_a^(p/q))^(1/p)``, so
    that ``sum_x w_x grad(x)^p`` reproduces the shadow seminorm^p exactly; for
    ``r = 0`` this is ``I^(1/q)``.
    """
    n = len(f.values)
    if not (isinstance(x, (int, np.integer)) and 0 <= x < n):
        raise FunctionError(f"{x!r} is not a node index")
    variant, rho = _resolve_variant("shadow", index, None)
    params.check(variant)
    S = _Setup(f, params, variant, rho, r)
    cube = int(x) // (f.m * f.m)
    I = _chunk_inner(S, np.array([cube]))[int(x) % (f.m * f.m)]
    return float(np.mean(I ** (params.p / params.q)) ** (1.0 / params.p))


def fractional_gradient_all(f: GridFunction, params: SeminormParams, index, r: int = 2) -> np.ndarray:
    I = inner_integrals(f, params, "shadow", index.rho, r)
    return np.mean(I ** (params.p / params.q), axis=1) ** (1.0 / params.p)


__all__.append("fractional_gradient_all")
__all__.append("exterior_tail")
__all__.append("node_points")


# ---------------------------------------------------------------------------
# maximal operator


def _node_lattice(g: GridFunction):
    """Node cells as dyadic squares: (cell level, ix, iy) per node.

    Needs ``m`` a power of two so that node cells sit on the dyadic lattice.
    """
    m = g.m
    lm = m.bit_length() - 1
    if m != 1 << lm:
        raise FunctionError("the maximal operator needs m to be a power of two")
    cov = g.cover
    a = np.tile(np.arange(m), m)
    b = np.repeat(np.arange(m), m)
    lvl = np.repeat(cov.level, m * m) + lm
    ix = (cov.ix[:, None] * m + a[None, :]).reshape(-1)
    iy = (cov.iy[:, None] * m + b[None, :]).reshape(-1)
    return lvl, ix, iy


def _dyadic_integrals(g: GridFunction, cells, j: int, I: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Exact integrals of the cell-wise constant g over dyadic squares (j, I, J)."""
    cov = g.cover
    vals = np.asarray(g.values, dtype=float)
    clvl, cx, cy = cells
    h = cov.root_scale * 2.0 ** (-j)
    want = I * _CODE + J
    uniq, inv = np.unique(want, return_inverse=True)
    out = np.zeros(len(uniq))
    # cells inside the square
    fine = clvl >= j
    sh = clvl[fine] - j
    codes = (cx[fine] >> sh) * _CODE + (cy[fine] >> sh)
    pos = np.clip(np.searchsorted(uniq, codes), 0, max(len(uniq) - 1, 0))
    hit = uniq[pos] == codes
    np.add.at(out, pos[hit], (g.weights[fine] * vals[fine])[hit])
    # a single coarser cell containing the square
    ui, uj = uniq // _CODE, uniq % _CODE
    ctr = cov.origin[None, :] + (np.column_stack([ui, uj]) + 0.5) * h
    Q = cov.cube_of_point(ctr)
    ok = Q >= 0
    lm = g.m.bit_length() - 1
    c = cov.level[Q[ok]] + lm
    coarse = c < j
    Qc, cc = Q[ok][coarse], c[coarse]
    a = (ui[ok][coarse] >> (j - cc)) - cov.ix[Qc] * g.m
    b = (uj[ok][coarse] >> (j - cc)) - cov.iy[Qc] * g.m
    node = Qc * g.m * g.m + b * g.m + a
    idx = np.flatnonzero(ok)[coarse]
    out[idx] += vals[node] * h * h
    return out[inv.reshape(-1)]


def maximal_all(g: GridFunction) -> np.ndarray:
    """Maximal function at every node over the finite search family.

    The family holds, for every level from the top cube down to the level of
    the node's own cube, the dyadic cube containing the node and its three
    copies shifted by half a side.  Cubes are half-open; g is constant on node
    cells and means are exact for that reading.
    """
    vals = np.asarray(g.values)
    if np.iscomplexobj(vals) or np.any(vals < 0):
        raise FunctionError("maximal operator needs g >= 0")
    cov = g.cover
    cells = _node_lattice(g)
    clvl, cx, cy = cells
    lvl = np.repeat(cov.level, g.m * g.m)
    F = int(clvl.max()) + 1
    # node points as integers on level F
    px = (2 * cx + 1) << (F - clvl - 1)
    py = (2 * cy + 1) << (F - clvl - 1)
    out = np.zeros(len(vals))
    for k in range(cov.domain.top_level, int(cov.level.max()) + 1):
        sel = np.flatnonzero(lvl >= k)
        if not len(sel):
            continue
        h = cov.root_scale * 2.0 ** (-k)
        half = 1 << (F - k - 1)
        for sx in (0, 1):
            for sy in (0, 1):
                i = (px[sel] - sx * half) >> (F - k)
                j = (py[sel] - sy * half) >> (F - k)
                tot = np.zeros(len(sel))
                for a in (0, 1):
                    for b in (0, 1):
                        tot += _dyadic_integrals(g, cells, k + 1, 2 * i + sx + a, 2 * j + sy + b)
                out[sel] = np.maximum(out[sel], tot / (h * h))
    return out


def maximal(g: GridFunction, x: int) -> float:
    return float(maximal_all(g)[int(x)])


def _pairwise_D(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    return long_distance_many(boxes_a[:, None, :], boxes_b[None, :, :])


def check_maximal_lemma(cover: WhitneyCover, g: GridFunction, Q=None, eta: float = 0.5,
                        r: float = 0.25, chunk: int = 256) -> dict:
    """LHS/RHS ratios of the cube-sum forms of the three maximal inequalities.

    ``far``:      sum_{D(Q,S) > r} int_S g / D^(d+eta)  vs  inf_Q Mg / r^eta
    ``close``:    sum_{D(Q,S) < r} int_S g / D^(d-eta)  vs  inf_Q Mg * r^eta
    ``all_over``: sum_S l(S)^d / D^(d+eta)              vs  l(Q)^-eta
    A ratio is 0 when its left side is 0.  With ``Q=None`` the maximum over
    all cubes is returned.
    """
    if eta <= 0 or r <= 0:
        raise FunctionError("eta and r must be positive")
    n = len(cover)
    M = maximal_all(g).reshape(n, -1).min(axis=1)
    G = np.sum((g.weights * np.asarray(g.values, float)).reshape(n, -1), axis=1)
    Qs = np.arange(n) if Q is None else np.array([Q if isinstance(Q, (int, np.integer)) else cover.index_of(Q)])
    d = D
    best = {"far": 0.0, "close": 0.0, "all_over": 0.0}
    arg = {"far": -1, "close": -1, "all_over": -1}
    for lo in range(0, len(Qs), chunk):
        qs = Qs[lo:lo + chunk]
        Dm = _pairwise_D(cover.boxes[qs], cover.boxes)
        far = np.where(Dm > r, G[None, :] / Dm ** (d + eta), 0.0).sum(axis=1)
        close = np.where(Dm < r, G[None, :] / Dm ** (d - eta), 0.0).sum(axis=1)
        allo = ((cover.sides[None, :] / Dm) ** d * (cover.sides[qs, None] / Dm) ** eta).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = {
                "far": np.where(far > 0, far / (M[qs] / r ** eta), 0.0),
                "close": np.where(close > 0, close / (M[qs] * r ** eta), 0.0),
                "all_over": allo,
            }
        for key, val in ratios.items():
            j = int(np.argmax(val))
            if val[j] > best[key] or arg[key] < 0:
                best[key], arg[key] = float(val[j]), int(qs[j])
    return {"eta": eta, "r": r, **best, "argmax": arg}


# ---------------------------------------------------------------------------
# divergence of the seminorm for a bump outside the valid regime


def _gauss(n: int, a: float, b: float):
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * t + 0.5 * (b + a), 0.5 * (b - a) * w


def _bump_inner(rho: float, s: float, q: float, n_t: int = 64, n_theta: int = 256) -> float:
    """Inner integral of |phi(x) - phi(y)|^q / |x-y|^(sq+2) over the plane, |x| = rho."""
    k = s * q + 2.0
    if rho >= 1.0:
        # phi(x) = 0: polar coordinates about the origin over the unit disc
        u, wu = _gauss(n_t, 0.0, 1.0)
        th = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
        dist2 = rho * rho + u[:, None] ** 2 - 2 * rho * u[:, None] * np.cos(th)[None, :]
        ang = np.mean(dist2 ** (-k / 2), axis=1) * 2 * np.pi
        return float(np.sum(wu * u * bump_profile(u) ** q * ang))
    phx = float(bump_profile(rho))
    th = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    c, sn = np.cos(th), np.sin(th)
    tstar = -rho * c + np.sqrt(1.0 - (rho * sn) ** 2)  # ray leaves the unit disc
    T = 1.0 + rho
    g, wg = np.polynomial.legendre.leggauss(n_t)
    total = np.zeros(n_theta)
    for a, b in ((np.zeros(n_theta), tstar), (tstar, np.full(n_theta, T))):
        t = 0.5 * (b - a)[:, None] * g[None, :] + 0.5 * (b + a)[:, None]
        wt = 0.5 * (b - a)[:, None] * wg[None, :]
        y = np.sqrt((rho + t * c[:, None]) ** 2 + (t * sn[:, None]) ** 2)
        integrand = np.abs(phx - bump_profile(y)) ** q * t ** (1.0 - k)
        total += np.sum(wt * integrand, axis=1)
    tail = 2 * np.pi * phx ** q * T ** (-s * q) / (s * q)
    return float(np.mean(total) * 2 * np.pi + tail)


def sharpness_experiment(s: float, p: float, q: float, R_list=(4, 8, 16, 32), d: int = D,
                         n_rho: int = 24) -> dict:
    """Growth of the truncated full seminorm^p of a radial bump, outer |x| <= R.

    Only meaningful when ``s <= d/p - d/q``, where the integral diverges with
    predicted rate ``R**(d - s*p - d*p/q)``.
    """
    if d != D:
        raise FunctionError("only d = 2 is supported")
    if s > d / p - d / q:
        raise FunctionError(f"(s,p,q)=({s},{p},{q}) is in the valid regime s > d/p - d/q; "
                            "the seminorm of a bump is finite there")
    R_list = sorted(float(R) for R in R_list)
    if R_list[0] <= 1.0:
        raise FunctionError("radii must exceed the bump radius 1")
    e = p / q
    edges = [0.0, 0.5, 1.0]
    while edges[-1] < R_list[-1]:
        edges.append(edges[-1] * 2)
    cum = [0.0]
    for a, b in zip(edges[:-1], edges[1:]):
        rr, wr = _gauss(n_rho, a, b)
        J = np.array([_bump_inner(x, s, q) for x in rr])
        cum.append(cum[-1] + float(np.sum(wr * 2 * np.pi * rr * J ** e)))
    values = []
    for R in R_list:
        j = int(np.searchsorted(edges, R))
        base = cum[j - 1]
        a = edges[j - 1]
        if R > a:
            rr, wr = _gauss(n_rho, a, R)
            J = np.array([_bump_inner(x, s, q) for x in rr])
            base += float(np.sum(wr * 2 * np.pi * rr * J ** e))
        values.append(base)
    slope = float(np.polyfit(np.log(R_list), np.log(values), 1)[0])
    return {"s": s, "p": p, "q": q, "d": d, "R": R_list, "values": values, "slope": slope,
            "expected_slope": d - s * p - d * p / q}
