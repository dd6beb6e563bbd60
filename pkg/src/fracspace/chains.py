"""Admissible chains between Whitney cubes, uniformity certificates and shadows.

Chains are shortest neighbour paths in the cube adjacency graph.  The default
metric counts cubes (a discrete quasi-hyperbolic length); ``metric="length"``
weights each cube by ``l(Q)`` instead.  Ties are broken towards the lowest cube
index, so every chain is reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .geometry import WhitneyCover, long_distance_many

__all__ = [
    "RHO_GRID",
    "Chain",
    "ChainError",
    "EpsCertificate",
    "ShadowIndex",
    "chain_eps",
    "find_chain",
    "certify_uniform",
    "shadow",
    "check_remark_sums",
    "boundary_diameter_in_ball",
    "node_weights",
    "METRICS",
]

RHO_GRID = (1.5, 2.0, 3.0, 5.0, 8.0, 13.0, 21.0, 34.0)
METRICS = ("hops", "length")
_HALF_DIAG = math.sqrt(2.0) / 2.0


class ChainError(RuntimeError):
    """Chain search or certification failed (disconnected cover, no workable rho)."""


def _as_index(cover: WhitneyCover, c) -> int:
    if isinstance(c, (int, np.integer)):
        if not 0 <= int(c) < len(cover):
            raise IndexError(f"cube index {c} out of range")
        return int(c)
    try:
        return cover.index_of(c)
    except KeyError:
        raise ChainError(f"cube {c} is not in the cover") from None


# ---------------------------------------------------------------------------
# chains


def chain_eps(cover: WhitneyCover, idx) -> tuple[float, int]:
    """Central position and admissibility constant of the chain ``idx``.

    The central cube is the largest one (first occurrence).  The constant is
    the minimum of the length ratio and the growth ratios from both ends.
    """
    idx = np.asarray(idx, dtype=np.int64)
    sides = cover.sides[idx]
    j0 = int(np.argmax(sides))
    boxes = cover.boxes[idx]
    total = float(np.sum(sides))
    first = np.repeat(boxes[:1], len(idx), axis=0)
    last = np.repeat(boxes[-1:], len(idx), axis=0)
    d_first = long_distance_many(first, boxes)
    d_last = long_distance_many(boxes, last)
    eps = float(d_first[-1]) / total
    eps = min(eps, float(np.min(sides[: j0 + 1] / d_first[: j0 + 1])))
    eps = min(eps, float(np.min(sides[j0:] / d_last[j0:])))
    return eps, j0


@dataclass(frozen=True)
class Chain:
    cubes: tuple[int, ...]
    central_index: int
    achieved_eps: float
    length: float
    keys: tuple[tuple[int, int, int], ...] = field(repr=False, default=())

    @property
    def central(self) -> int:
        return self.cubes[self.central_index]

    def to_json(self) -> dict:
        return {
            "cubes": [list(k) for k in self.keys],
            "central_index": self.central_index,
            "achieved_eps": self.achieved_eps,
            "length": self.length,
        }


def _make_chain(cover: WhitneyCover, path) -> Chain:
    eps, j0 = chain_eps(cover, path)
    keys = tuple((int(cover.level[i]), int(cover.ix[i]), int(cover.iy[i])) for i in path)
    return Chain(tuple(int(i) for i in path), j0, eps, float(np.sum(cover.sides[list(path)])), keys)


def node_weights(cover: WhitneyCover, metric: str) -> np.ndarray:
    if metric == "hops":
        return np.ones(len(cover))
    if metric == "length":
        return np.asarray(cover.sides, dtype=float)
    raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def _graph(cover: WhitneyCover, metric: str) -> csr_matrix:
    """Directed adjacency weighted by the target's node weight."""
    cache = cover.__dict__.setdefault("_chain_graphs", {})
    if metric in cache:
        return cache[metric]
    n = len(cover)
    w = node_weights(cover, metric)
    counts = np.array([len(a) for a in cover.adjacency], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(cover.adjacency) if n else np.zeros(0, np.int64)
    g = csr_matrix((w[indices], indices, indptr), shape=(n, n))
    cache[metric] = g
    return g


def _walk(cover: WhitneyCover, w: np.ndarray, dist_to_target: np.ndarray, start: int,
          target: int) -> list[int]:
    """Follow a shortest path from ``start`` to ``target``, lowest index first."""
    if not np.isfinite(dist_to_target[start]):
        raise ChainError(f"cubes {start} and {target} lie in different adjacency components")
    path = [start]
    u = start
    while u != target:
        want = dist_to_target[u] - w[u]
        nb = cover.adjacency[u]
        tol = 1e-12 * max(dist_to_target[u], 1.0)
        ok = nb[np.abs(dist_to_target[nb] - want) <= tol]
        if len(ok) == 0:  # pragma: no cover - guarded by the shortest-path identity
            raise ChainError("inconsistent shortest-path distances")
        u = int(ok.min())
        path.append(u)
    return path


def find_chain(cover: WhitneyCover, Q, S, metric: str = "hops") -> Chain:
    """Shortest neighbour path from Q to S (cube count, or sum of sides)."""
    q, s = _as_index(cover, Q), _as_index(cover, S)
    g = _graph(cover, metric)
    if q == s:
        return _make_chain(cover, [q])
    dist = dijkstra(g, directed=True, indices=s)
    return _make_chain(cover, _walk(cover, node_weights(cover, metric), dist, q, s))


def _chains_for_pairs(cover: WhitneyCover, pairs: np.ndarray, metric: str = "hops",
                      block: int = 64) -> list[Chain]:
    """Chains for many pairs, grouping the shortest-path solves by target cube."""
    out: list[Chain | None] = [None] * len(pairs)
    targets = np.unique(pairs[:, 1])
    g = _graph(cover, metric)
    w = node_weights(cover, metric)
    for b in range(0, len(targets), block):
        tb = targets[b:b + block]
        dist = dijkstra(g, directed=True, indices=tb)
        row = {int(t): r for r, t in enumerate(tb)}
        for n in np.flatnonzero(np.isin(pairs[:, 1], tb)):
            q, s = int(pairs[n, 0]), int(pairs[n, 1])
            path = [q] if q == s else _walk(cover, w, dist[row[s]], q, s)
            out[n] = _make_chain(cover, path)
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# shadows


def _contained(cover: WhitneyCover, P: int, cand: np.ndarray, rho: float) -> np.ndarray:
    far = np.linalg.norm(cover.centers[cand] - cover.centers[P], axis=1) + _HALF_DIAG * cover.sides[cand]
    return far <= rho * cover.sides[P]


class ShadowIndex:
    """Cubes Q of the cover with ``Q`` inside the ball ``B(x_P, rho*l(P))``.

    Member lists are computed on demand and cached.
    """

    def __init__(self, cover: WhitneyCover, rho: float):
        if not rho > 0:
            raise ValueError("rho must be positive")
        self.cover = cover
        self.rho = float(rho)
        self._tree = cKDTree(cover.centers)
        self._cache: dict[int, np.ndarray] = {}

    def members(self, P) -> np.ndarray:
        p = _as_index(self.cover, P)
        hit = self._cache.get(p)
        if hit is None:
            c = self.cover
            cand = np.asarray(self._tree.query_ball_point(c.centers[p], self.rho * c.sides[p]), dtype=np.int64)
            cand.sort()
            hit = cand[_contained(c, p, cand, self.rho)]
            hit.setflags(write=False)
            self._cache[p] = hit
        return hit

    def contains(self, P, Q) -> bool:
        p, q = _as_index(self.cover, P), _as_index(self.cover, Q)
        return bool(_contained(self.cover, p, np.array([q]), self.rho)[0])

    def realization_mask(self, P, points: np.ndarray) -> np.ndarray:
        """Points lying in a cube of the shadow of P."""
        idx = self.cover.cube_of_point(np.atleast_2d(points))
        mem = self.members(P)
        return (idx >= 0) & np.isin(idx, mem)


def shadow(index: ShadowIndex, P) -> list[int]:
    return [int(i) for i in index.members(P)]


# ---------------------------------------------------------------------------
# certification


def boundary_diameter_in_ball(edges: np.ndarray, center, radius: float) -> float:
    """Diameter of (polygon boundary) intersected with a closed disc."""
    a, b = edges[:, :2], edges[:, 2:]
    d = b - a
    f = a - np.asarray(center, float)[None, :]
    A = np.einsum("ij,ij->i", d, d)
    B = 2 * np.einsum("ij,ij->i", f, d)
    C = np.einsum("ij,ij->i", f, f) - radius * radius
    disc = B * B - 4 * A * C
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.clip((-B - sq) / (2 * A), 0.0, 1.0)
    t1 = np.clip((-B + sq) / (2 * A), 0.0, 1.0)
    ok &= t0 <= t1
    if not ok.any():
        return 0.0
    pts = np.vstack([a[ok] + t0[ok, None] * d[ok], a[ok] + t1[ok, None] * d[ok]])
    inside = np.linalg.norm(pts - np.asarray(center, float), axis=1) <= radius * (1 + 1e-12)
    pts = pts[inside]
    if len(pts) == 0:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


@dataclass(frozen=True)
class EpsCertificate:
    eps: float
    pairs_tested: int
    worst_pair: tuple
    rho_eps: float | None
    seed: int
    diameter_ratio: tuple[float, float] = (math.nan, math.nan)
    diameter_ok: bool = False
    comparability_ok: bool = True
    rho_needed: float = 0.0
    rho_failure: tuple = ()

    @property
    def rho_ok(self) -> bool:
        return self.rho_eps is not None

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "rho_eps": self.rho_eps,
            "pairs_tested": self.pairs_tested,
            "worst_pair": [list(k) for k in self.worst_pair],
            "seed": self.seed,
            "rho_needed": self.rho_needed,
            "diameter_ratio": list(self.diameter_ratio),
            "diameter_ok": self.diameter_ok,
            "comparability_ok": self.comparability_ok,
            "rho_failure_chain": [list(k) for k in self.rho_failure],
        }


def _sample_pairs(n: int, n_pairs: int, seed: int) -> np.ndarray:
    if n * (n - 1) // 2 <= n_pairs or n <= 200:
        i, j = np.triu_indices(n, k=1)
        pairs = np.column_stack([i, j])
        return pairs if len(pairs) else np.array([[0, 0]], dtype=np.int64)
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < n_pairs:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            out.append(key)
    return np.array(out, dtype=np.int64)


def _rho_needed(cover: WhitneyCover, ch: Chain) -> float:
    """Smallest ratio making the chain satisfy both shadow containment bullets."""
    idx = np.asarray(ch.cubes)
    j0 = ch.central_index
    c, h = cover.centers, cover.sides

    def need(P, Q):  # rho with Q inside B(x_P, rho l(P))
        return (np.linalg.norm(c[Q] - c[P], axis=-1) + _HALF_DIAG * h[Q]) / h[P]

    r = float(np.max(need(idx[: j0 + 1], idx[0])))
    r = max(r, float(np.max(need(idx[j0:], idx[-1]))))
    r = max(r, float(np.max(need(idx[j0], idx))))
    return r


def certify_uniform(cover: WhitneyCover, n_pairs: int = 200, seed: int = 0,
                    rho_grid=RHO_GRID, diameter_factor: float = 10.0,
                    metric: str = "hops") -> EpsCertificate:
    """Sampling-based uniformity certificate for the cover.

    All unordered pairs are used when the cover has at most 200 cubes.  When
    no grid value of rho makes every tested chain fit its shadows, ``rho_eps``
    is None and the worst chain is kept in ``rho_failure``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n = len(cover)
    pairs = _sample_pairs(n, n_pairs, seed)
    chains = _chains_for_pairs(cover, pairs, metric)
    eps_all = np.array([ch.achieved_eps for ch in chains])
    worst = int(np.argmin(eps_all))
    eps = float(eps_all[worst])
    rho_need = max(_rho_needed(cover, ch) for ch in chains)
    rho = next((r for r in sorted(rho_grid) if rho_need <= r), None)
    failing = ()
    if rho is None:
        failing = max(chains, key=lambda ch: _rho_needed(cover, ch)).keys
    r_diam = rho if rho is not None else max(rho_grid)
    used = np.unique(np.concatenate([np.asarray(ch.cubes) for ch in chains]))
    edges = cover.domain.edges
    ratios = np.array([boundary_diameter_in_ball(edges, cover.centers[P], r_diam * cover.sides[P])
                       / cover.sides[P] for P in used])
    lo, hi = float(ratios.min()), float(ratios.max())
    diam_ok = lo >= 1.0 / diameter_factor and hi <= diameter_factor
    comp_ok = True
    for ch in chains:
        e = ch.achieved_eps
        D = float(long_distance_many(cover.boxes[[ch.cubes[0]]], cover.boxes[[ch.cubes[-1]]])[0])
        if cover.sides[ch.central] < e * e * D / (1 + 2 * e) * (1 - 1e-12):
            comp_ok = False
            break
    wk = chains[worst].keys
    return EpsCertificate(eps, len(pairs), (wk[0], wk[-1]), None if rho is None else float(rho),
                          int(seed), (lo, hi), bool(diam_ok), comp_ok, float(rho_need), failing)


# ---------------------------------------------------------------------------
# Remark-type geometric sums


def check_remark_sums(cover: WhitneyCover, index: ShadowIndex, s: float,
                      n_chains: int = 100, seed: int = 0, metric: str = "hops") -> dict:
    """Max ratios of the ascending shadow sum and the two chain sums.

    ``ascending``: sum over L with Q in SH(L) of l(L)^-s, times l(Q)^s.
    ``path_up`` / ``path_down``: over sampled pairs Q in SH(P), the sums of
    l(L)^s / l(P)^s and l(L)^-s * l(Q)^s along the chain [Q, P].
    """
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    n = len(cover)
    h = cover.sides
    acc = np.zeros(n)
    pairs = []
    for L in range(n):
        mem = index.members(L)
        acc[mem] += (h[mem] / h[L]) ** s
        pairs.extend((int(q), L) for q in mem)
    ascending = float(np.max(acc))
    pairs_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs_arr) > n_chains:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(pairs_arr), size=n_chains, replace=False))
        pairs_arr = pairs_arr[pick]
    up = down = 0.0
    if len(pairs_arr):
        for ch, (q, p) in zip(_chains_for_pairs(cover, pairs_arr, metric), pairs_arr):
            hl = h[list(ch.cubes)]
            up = max(up, float(np.sum((hl / h[p]) ** s)))
            down = max(down, float(np.sum((h[q] / hl) ** s)))
    return {"s": s, "rho": index.rho, "ascending": ascending, "path_up": up, "path_down": down,
            "pairs": int(len(pairs_arr))}
