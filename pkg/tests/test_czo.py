import numpy as np
import pytest
from scipy.integrate import dblquad

from fracspace.czo import (
    KernelError,
    PVQuadrature,
    beurling_polygon,
    custom_kernel,
    get_kernel,
    key_lemma_ratio,
    pv_apply,
    t1_check,
    truncated_apply,
    verify_kernel,
)
from fracspace.funcspace import SeminormParams, sample_function
from fracspace.geometry import build_cover, builtin_domain

B = get_kernel("beurling")
P32 = SeminormParams(0.5, 3, 2)


@pytest.fixture(scope="module")
def disk5():
    d = builtin_domain("ngon", n=64)
    return d, build_cover(d, "interior", max_level=5)


@pytest.mark.parametrize("name", ["beurling", "riesz1", "riesz2"])
def test_kernel_constants_hold(name):
    out = verify_kernel(get_kernel(name))
    assert out["size_ok"] and out["smooth_ok"]
    # the bound is nearly attained, so the constant is not slack
    assert out["smooth_max"] > 0.95 * out["C_K"]


def test_understated_constant_is_caught():
    k = custom_kernel(B.evaluate, C_K=3 / np.pi, sigma=1.0, degree=-2.0)
    out = verify_kernel(k)
    assert out["size_ok"] and not out["smooth_ok"]


def test_kernel_errors():
    with pytest.raises(KernelError):
        get_kernel("hilbert")
    with pytest.raises(KernelError):
        custom_kernel(B.evaluate, C_K=-1, sigma=1)


def test_polygon_formula_against_direct_quadrature():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    for z in (2.0 + 0.5j, -0.7 - 1.2j):
        re = dblquad(lambda y, x: B(z - (x + 1j * y)).real, 0, 1, 0, 1, epsabs=1e-13)[0]
        im = dblquad(lambda y, x: B(z - (x + 1j * y)).imag, 0, 1, 0, 1, epsabs=1e-13)[0]
        assert abs(beurling_polygon(sq, z) - (re + 1j * im)) < 1e-10


def test_polygon_formula_approaches_disk():
    d = builtin_domain("ngon", n=1024)
    z = np.array([0.0, 0.4 + 0.2j, 2.0, -1.5j])
    want = np.array([0, 0, -1 / 4, 1 / 2.25])
    assert np.max(np.abs(beurling_polygon(d.vertices, z) - want)) < 1e-4


def test_pv_matches_closed_form(disk5):
    d, cov = disk5
    f = sample_function(cov, "const")
    z = np.array([0, 0.5, 0.3 + 0.4j, 2, 1.5j, -2 + 2j])
    exact = beurling_polygon(d.vertices, z)
    for zi, e in zip(z, exact):
        r = pv_apply(B, f, zi)
        assert r.converged
        assert abs(r.value - e) < 1e-9


def test_pv_sequence_at_node_is_flat(disk5):
    _, cov = disk5
    f = sample_function(cov, "x1**2 + x2")
    r = pv_apply(B, f, f.points[10])
    assert len(r.sequence) == 7
    assert max(abs(a - r.value) for a in r.sequence) < 1e-12


def test_bulk_equals_pointwise(disk5):
    _, cov = disk5
    f = sample_function(cov, "x1*x2 + 1")
    T = truncated_apply(B, f)
    assert T.n_nonconverged == 0
    for i in (0, 333, len(f.values) - 1):
        assert abs(pv_apply(B, f, f.points[i]).value - T.values.values[i]) < 1e-12


def test_generic_path_matches_lattice_tables(disk5):
    _, cov = disk5
    f = sample_function(cov, "sin(2*x1)")
    generic = custom_kernel(B.evaluate, 6 / np.pi, 1.0, degree=None)
    a = truncated_apply(B, f).values.values
    b = truncated_apply(generic, f).values.values
    assert np.max(np.abs(a - b)) < 1e-10


def test_riesz_against_direct_quadrature():
    d = builtin_domain("square")
    cov = build_cover(d, "interior", max_level=4)
    f = sample_function(cov, "const")
    R = get_kernel("riesz1")
    z = 1.8 + 0.3j
    want = dblquad(lambda y, x: R(z - (x + 1j * y)).real, 0, 1, 0, 1, epsabs=1e-13)[0]
    assert abs(pv_apply(R, f, z).value - want) < 1e-9


def test_linearity(disk5):
    _, cov = disk5
    f = sample_function(cov, "x1")
    g = sample_function(cov, "x2**2")
    h = f.with_values(2 * f.values - g.values)
    Tf, Tg, Th = (truncated_apply(B, u).values.values for u in (f, g, h))
    assert np.max(np.abs(Th - (2 * Tf - Tg))) < 1e-12


def test_collar_zero_option(disk5):
    _, cov = disk5
    f = sample_function(cov, "const")
    a = pv_apply(B, f, 0.2).value
    b = pv_apply(B, f, 0.2, PVQuadrature(collar="zero")).value
    assert abs(a) < 1e-9 < abs(b)
    with pytest.raises(ValueError):
        PVQuadrature(collar="mirror")


def test_exterior_cover_rejected():
    cov = build_cover(builtin_domain("square"), "exterior", max_level=4)
    with pytest.raises(KernelError):
        truncated_apply(B, sample_function(cov, "const"))


def test_t1_warns_below_critical_smoothness():
    cov = build_cover(builtin_domain("square"), "interior", max_level=4)
    with pytest.warns(UserWarning, match="d/p"):
        rep = t1_check(B, cov, SeminormParams(0.2, 2, 2))
    assert rep.warnings and np.isfinite(rep.total)
    assert rep.collar_excluded_variant["total"] <= rep.total
    assert len(rep.worst_cubes) == 10


def test_t1_decreases_toward_disk():
    params = SeminormParams(0.75, 4, 2)
    out = []
    for n in (64, 128):
        cov = build_cover(builtin_domain("ngon", n=n), "interior", max_level=5)
        out.append(t1_check(B, cov, params).collar_excluded_variant["total"])
    assert out[1] < out[0] < 1e-5


def test_key_lemma_constant_and_scaling():
    cov = build_cover(builtin_domain("square"), "interior", max_level=4)
    c = key_lemma_ratio(B, sample_function(cov, "const:2"), P32)
    assert c["lhs"] == 0.0 and c["ratio"] is None
    f = sample_function(cov, "x1*x2 + sin(3*x1)")
    a = key_lemma_ratio(B, f, P32)["ratio"]
    b = key_lemma_ratio(B, f * 2.0, P32)["ratio"]
    assert 0 < a < np.inf and abs(a - b) <= 1e-12 * a
