"""Reflection-type extension of sampled functions across the boundary.

Every small exterior Whitney cube Q gets a same-size interior partner Q*, and
the extension at an exterior point is a bump-weighted average of the means
``f_{Q*}``.  Bumps are tensor products of a cubic smoothstep plateau that
equals 1 on Q and vanishes outside ``(11/10) Q``; they are normalised by
their sum over the whole exterior cover.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .funcspace import GridFunction, SeminormParams, lp_norm, node_points, seminorm
from .geometry import WhitneyCover, long_distance_many

__all__ = [
    "ExtensionError",
    "ExteriorStructure",
    "build_exterior_structure",
    "extend",
    "partition_sums",
    "extension_norm_ratio",
    "long_distance_window",
    "bump_1d",
    "SUPPORT_FACTOR",
]

SUPPORT_FACTOR = 1.1
_RAMP = (SUPPORT_FACTOR - 1.0) / 2.0  # ramp width in units of l(Q)
# smoothstep has slope 3/2 over a ramp of width 0.05 l(Q)
BUMP_LIPSCHITZ = 1.5 / _RAMP


class ExtensionError(ValueError):
    """Structure cannot be built, or a function does not match it."""


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def bump_1d(t, center, side):
    """1 on ``|t - c| <= side/2``, 0 beyond ``1.1 * side/2``, cubic in between."""
    a = np.abs(np.asarray(t, float) - center)
    return 1.0 - _smoothstep((a - 0.5 * side) / (_RAMP * side))


@dataclass
class ExteriorStructure:
    interior: WhitneyCover
    exterior: WhitneyCover
    w3: np.ndarray            # exterior indices, ascending
    partner: np.ndarray       # interior index per W3 cube
    w4: np.ndarray            # exterior indices, subset of w3
    partner_factor: float
    size_cap: float
    overlap_max: int
    _combined: WhitneyCover | None = field(default=None, repr=False)

    @property
    def in_w3(self) -> np.ndarray:
        m = np.zeros(len(self.exterior), bool)
        m[self.w3] = True
        return m

    @property
    def partner_of(self) -> np.ndarray:
        """Partner per exterior cube, -1 outside W3."""
        out = np.full(len(self.exterior), -1, dtype=np.int64)
        out[self.w3] = self.partner
        return out

    @property
    def combined(self) -> WhitneyCover:
        """Interior cubes followed by exterior cubes, as one cover of the box."""
        if self._combined is None:
            a, b = self.interior, self.exterior
            self._combined = WhitneyCover(
                a.domain, "combined", a.c_w, max(a.max_level, b.max_level),
                np.concatenate([a.level, b.level]), np.concatenate([a.ix, b.ix]),
                np.concatenate([a.iy, b.iy]), np.vstack([a.collar, b.collar]), [])
        return self._combined

    def to_json(self) -> dict:
        ext, inn = self.exterior, self.interior

        def key(c, i):
            return [int(c.level[i]), int(c.ix[i]), int(c.iy[i])]
        return {
            "partner_factor": self.partner_factor,
            "size_cap": self.size_cap,
            "support_factor": SUPPORT_FACTOR,
            "bump_lipschitz": BUMP_LIPSCHITZ,
            "n_w2": len(ext),
            "n_w3": int(len(self.w3)),
            "n_w4": int(len(self.w4)),
            "overlap_max": self.overlap_max,
            "partners": [{"cube": key(ext, q), "partner": key(inn, s)}
                         for q, s in zip(self.w3.tolist(), self.partner.tolist())],
        }


def _same_lattice(a: WhitneyCover, b: WhitneyCover) -> bool:
    return (a.root_scale == b.root_scale and np.array_equal(a.origin, b.origin)
            and np.array_equal(a.domain.vertices, b.domain.vertices))


def _partners(interior: WhitneyCover, exterior: WhitneyCover, factor: float) -> np.ndarray:
    """Nearest same-level interior cube with D <= factor * l, else -1."""
    out = np.full(len(exterior), -1, dtype=np.int64)
    for k in np.unique(exterior.level):
        ii = np.flatnonzero(interior.level == k)
        if not len(ii):
            continue
        ie = np.flatnonzero(exterior.level == k)
        h = float(exterior.sides[ie[0]])
        # centre distance never exceeds the long distance
        cand = cKDTree(interior.centers[ii]).query_ball_point(exterior.centers[ie], factor * h)
        for q, c in zip(ie, cand):
            if not c:
                continue
            c = ii[np.sort(np.asarray(c, dtype=np.int64))]
            D = long_distance_many(np.repeat(exterior.boxes[q:q + 1], len(c), 0), interior.boxes[c])
            ok = D <= factor * h * (1 + 1e-12)
            if ok.any():
                out[q] = c[ok][np.argmin(D[ok])]  # argmin keeps the lowest index on ties
    return out


def _cube_name(cover: WhitneyCover, i: int) -> str:
    return f"(level {int(cover.level[i])}, ix {int(cover.ix[i])}, iy {int(cover.iy[i])})"


def build_exterior_structure(interior: WhitneyCover, exterior: WhitneyCover,
                             size_cap_factor: float = 0.5,
                             partner_factor: float | None = None) -> ExteriorStructure:
    """Choose W3, partners and W4.

    ``l_adm`` is the largest side such that every exterior cube of that side
    or smaller has a partner; W3 holds the exterior cubes with side at most
    ``size_cap_factor * l_adm``.  The default partner factor is ``4 * c_w``.
    """
    if interior.side != "interior" or exterior.side != "exterior":
        raise ExtensionError("need an interior and an exterior cover")
    if not _same_lattice(interior, exterior):
        raise ExtensionError("covers are not built on the same domain and lattice")
    if size_cap_factor <= 0:
        raise ExtensionError("size_cap_factor must be positive")
    factor = 4.0 * exterior.c_w if partner_factor is None else float(partner_factor)
    part = _partners(interior, exterior, factor)
    sides = exterior.sides
    l_adm = None
    for k in sorted(np.unique(exterior.level).tolist(), reverse=True):
        at = np.flatnonzero(exterior.level == k)
        bad = at[part[at] < 0]
        if len(bad):
            if l_adm is None:
                raise ExtensionError(
                    f"exterior cube {_cube_name(exterior, int(bad[0]))} next to the boundary has no "
                    f"same-size interior partner within {factor:g} sides; the interior cover is too shallow")
            break
        l_adm = float(sides[at[0]])
    cap = size_cap_factor * l_adm
    w3 = np.flatnonzero(sides <= cap * (1 + 1e-12))
    orphan = w3[part[w3] < 0]
    if len(orphan):
        raise ExtensionError(f"exterior cube {_cube_name(exterior, int(orphan[0]))} has no partner; "
                             f"lower size_cap_factor")
    in3 = np.zeros(len(exterior), bool)
    in3[w3] = True
    w4 = np.array([q for q in w3 if in3[exterior.adjacency[q]].all()], dtype=np.int64)
    counts = np.bincount(part[w3], minlength=len(interior))
    return ExteriorStructure(interior, exterior, w3, part[w3], w4, factor, cap,
                             int(counts.max()) if len(w3) else 0)


def _raw_bumps(cover: WhitneyCover, cubes: np.ndarray, X: np.ndarray) -> np.ndarray:
    c, h = cover.centers[cubes], cover.sides[cubes]
    return bump_1d(X[:, 0], c[:, 0], h) * bump_1d(X[:, 1], c[:, 1], h)


def _psi_terms(structure: ExteriorStructure, m: int):
    """(node, cube, psi) triples for every exterior node and contributing cube.

    Only the node's own cube and its neighbours can reach it: any other cube
    lies at least half its side away.
    """
    ext = structure.exterior
    X = node_points(ext, m)
    mm = m * m
    rows, cols = [], []
    for P in range(len(ext)):
        nb = np.concatenate([[P], ext.adjacency[P]])
        nodes = np.arange(P * mm, (P + 1) * mm)
        rows.append(np.repeat(nodes, len(nb)))
        cols.append(np.tile(nb, mm))
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    phi = _raw_bumps(ext, cols, X[rows])
    total = np.bincount(rows, weights=phi, minlength=len(X))
    return rows, cols, phi / total[rows]


def partition_sums(structure: ExteriorStructure, m: int = 2):
    """Sum of the W3 bumps at each exterior node, and a mask of W4-cube nodes."""
    rows, cols, psi = _psi_terms(structure, m)
    in3 = structure.in_w3
    n = len(structure.exterior) * m * m
    s = np.bincount(rows[in3[cols]], weights=psi[in3[cols]], minlength=n)
    in4 = np.zeros(len(structure.exterior), bool)
    in4[structure.w4] = True
    return s, np.repeat(in4, m * m)


def extend(f: GridFunction, structure: ExteriorStructure) -> GridFunction:
    """Extended function on ``structure.combined``; interior values are copied."""
    if f.cover is not structure.interior:
        raise ExtensionError("function is not sampled on the structure's interior cover")
    rows, cols, psi = _psi_terms(structure, f.m)
    pof = structure.partner_of
    keep = pof[cols] >= 0
    means = f.cube_means()
    n_ext = len(structure.exterior) * f.m * f.m
    contrib = psi[keep] * means[pof[cols[keep]]]
    if f.is_complex:
        ext = (np.bincount(rows[keep], weights=contrib.real, minlength=n_ext)
               + 1j * np.bincount(rows[keep], weights=contrib.imag, minlength=n_ext))
    else:
        ext = np.bincount(rows[keep], weights=contrib, minlength=n_ext)
    return GridFunction(structure.combined, f.m, np.concatenate([f.values, ext]))


def long_distance_window(structure: ExteriorStructure, n_pairs: int = 500, seed: int = 0):
    """Min and max of D(Q1*, Q2*) / D(Q1, Q2) over sampled W3 pairs."""
    n = len(structure.w3)
    if n < 2:
        return (1.0, 1.0)
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=n_pairs)
    b = rng.integers(0, n, size=n_pairs)
    ext, inn = structure.exterior, structure.interior
    Dq = long_distance_many(ext.boxes[structure.w3[a]], ext.boxes[structure.w3[b]])
    Ds = long_distance_many(inn.boxes[structure.partner[a]], inn.boxes[structure.partner[b]])
    r = Ds / Dq
    return float(r.min()), float(r.max())


def extension_norm_ratio(f: GridFunction, params: SeminormParams, structure: ExteriorStructure,
                         r: int = 2) -> dict:
    """Full norm of the extension on the box over the full norm of f on the domain.

    For f with identical node values the ratio of the L^p parts is returned.
    A seminorm of 0 for a non-constant f is flagged instead of divided by.
    """
    ext = extend(f, structure)
    v = f.values
    constant = bool(len(v)) and bool(np.all(v == v[0]))
    if constant:
        den, num = lp_norm(f, params.p), lp_norm(ext, params.p)
        return {"ratio": num / den if den else float("nan"), "constant": True,
                "numerator": num, "denominator": den, "tail": 0.0, "flag": None}
    rep_f = seminorm(f, params, "full", r=r)
    if rep_f.seminorm_part == 0:
        return {"ratio": float("nan"), "constant": False, "numerator": None,
                "denominator": rep_f.total, "tail": None, "flag": "zero seminorm on a non-constant f"}
    rep_e = seminorm(ext, params, "full", r=r, tail_box=structure.exterior.box)
    return {"ratio": rep_e.total / rep_f.total, "constant": False, "numerator": rep_e.total,
            "denominator": rep_f.total, "tail": rep_e.tail_estimate, "flag": None}
