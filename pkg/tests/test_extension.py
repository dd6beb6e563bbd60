import numpy as np
import pytest

from fracspace.extension import (
    ExtensionError,
    build_exterior_structure,
    bump_1d,
    extend,
    extension_norm_ratio,
    long_distance_window,
    partition_sums,
)
from fracspace.funcspace import GridFunction, SeminormParams, sample_function
from fracspace.geometry import build_cover, builtin_domain, long_distance_many


@pytest.fixture(scope="module")
def structure():
    d = builtin_domain("square")
    return build_exterior_structure(build_cover(d, "interior", max_level=5),
                                    build_cover(d, "exterior", max_level=5))


def test_partners_same_level_and_close(structure):
    S = structure
    ext, inn = S.exterior, S.interior
    assert np.array_equal(ext.level[S.w3], inn.level[S.partner])
    D = long_distance_many(ext.boxes[S.w3], inn.boxes[S.partner])
    assert np.all(D <= S.partner_factor * ext.sides[S.w3] * (1 + 1e-12))


def test_partner_is_nearest_candidate(structure):
    S = structure
    ext, inn = S.exterior, S.interior
    for q, s in list(zip(S.w3, S.partner))[::97]:
        same = np.flatnonzero(inn.level == ext.level[q])
        D = long_distance_many(np.repeat(ext.boxes[q:q + 1], len(same), 0), inn.boxes[same])
        assert s == same[np.flatnonzero(D == D.min())[0]]


def test_w4_cubes_have_all_neighbours_in_w3(structure):
    in3 = structure.in_w3
    for q in structure.w4:
        assert in3[structure.exterior.adjacency[q]].all()
    assert set(structure.w4) <= set(structure.w3)


def test_partition_of_unity(structure):
    s, on4 = partition_sums(structure, 2)
    assert on4.any()
    assert np.max(np.abs(s[on4] - 1.0)) < 1e-12
    assert s.min() >= 0 and s.max() <= 1 + 1e-12


def test_bump_profile():
    t = np.array([0.0, 0.5, 0.5 + 1e-9, 0.525, 0.55, 0.6])
    v = bump_1d(t, 0.0, 1.0)
    assert v[0] == v[1] == 1.0 and v[-1] == v[-2] == 0.0
    assert v[3] == pytest.approx(0.5)
    grid = np.linspace(0.4, 0.6, 20001)
    slope = np.max(np.abs(np.diff(bump_1d(grid, 0.0, 1.0)))) / (grid[1] - grid[0])
    assert slope <= 30.0 + 1e-6


def test_interior_values_copied_bit_exactly(structure):
    f = sample_function(structure.interior, "sin(5*x1)*x2")
    e = extend(f, structure)
    n = len(f.values)
    assert np.array_equal(e.values[:n], f.values)


def test_constant_is_reproduced_on_w4(structure):
    f = sample_function(structure.interior, "const:3")
    e = extend(f, structure)
    s, on4 = partition_sums(structure, 2)
    ext = e.values[len(f.values):]
    assert np.max(np.abs(ext[on4] - 3.0)) < 1e-12
    assert np.allclose(ext, 3.0 * s, rtol=1e-14, atol=1e-15)


def test_x1_matches_direct_evaluator(structure):
    S = structure
    f = sample_function(S.interior, "x1")
    e = extend(f, S)
    ext, inn = S.exterior, S.interior
    means = f.per_cube().mean(axis=1)
    X = e.points[len(f.values):]
    for node in (0, 101, 2048, len(X) - 1):
        x = X[node]
        # every exterior cube, no neighbour shortcut
        phi = (bump_1d(x[0], ext.centers[:, 0], ext.sides) * bump_1d(x[1], ext.centers[:, 1], ext.sides))
        want = sum(phi[q] * means[s] for q, s in zip(S.w3, S.partner)) / phi.sum()
        assert e.values[len(f.values) + node] == pytest.approx(want, rel=1e-13, abs=1e-15)


def test_zero_beyond_w3(structure):
    f = sample_function(structure.interior, "const")
    e = extend(f, structure)
    far = np.flatnonzero(structure.exterior.sides > structure.size_cap * 2.5)
    mm = 4
    nodes = (far[:, None] * mm + np.arange(mm)).reshape(-1)
    assert np.all(e.values[len(f.values) + nodes] == 0.0)


def test_linearity(structure):
    f = sample_function(structure.interior, "x1")
    g = sample_function(structure.interior, "x2**2")
    ef, eg = extend(f, structure).values, extend(g, structure).values
    assert np.array_equal(extend(f * 4.0, structure).values, 4.0 * ef)
    h = f.with_values(2.0 * f.values - 3.0 * g.values)
    np.testing.assert_allclose(extend(h, structure).values, 2.0 * ef - 3.0 * eg, rtol=1e-14, atol=1e-14)


def test_cover_mismatch(structure):
    other = build_cover(builtin_domain("square"), "interior", max_level=5)
    with pytest.raises(ExtensionError, match="not sampled"):
        extend(sample_function(other, "x1"), structure)


def test_too_shallow_interior_names_orphan():
    d = builtin_domain("square")
    with pytest.raises(ExtensionError, match=r"exterior cube \(level 7"):
        build_exterior_structure(build_cover(d, "interior", max_level=5),
                                 build_cover(d, "exterior", max_level=7))


def test_overlap_stable_across_levels(structure):
    d = builtin_domain("square")
    S6 = build_exterior_structure(build_cover(d, "interior", max_level=6),
                                  build_cover(d, "exterior", max_level=6))
    assert 0 < structure.overlap_max < np.inf
    assert S6.overlap_max == structure.overlap_max


def test_long_distance_window_recorded(structure):
    lo, hi = long_distance_window(structure, n_pairs=300, seed=2)
    assert 0 < lo <= hi < np.inf


def test_constant_ratio_is_lp_ratio(structure):
    f = sample_function(structure.interior, "const")
    out = extension_norm_ratio(f, SeminormParams(0.5, 3, 2), structure)
    assert out["constant"] and 1 < out["ratio"] < np.inf


def test_zero_function_has_undefined_ratio(structure):
    f = GridFunction(structure.interior, 2, np.zeros(len(structure.interior) * 4))
    out = extension_norm_ratio(f, SeminormParams(0.5, 3, 2), structure)
    assert out["constant"] and np.isnan(out["ratio"])


def test_json(structure):
    js = structure.to_json()
    assert js["n_w3"] == len(js["partners"]) and js["partner_factor"] == 24.0
