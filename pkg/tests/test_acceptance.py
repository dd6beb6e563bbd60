"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line with the measured numbers (also collected in
the terminal summary) and then asserts the same verdict.  Level-to-level
variation is measured as spread = (max - min) / max over levels 5, 6, 7.
"""
import time

import numpy as np
import pytest

from fracspace.chains import certify_uniform
from fracspace.cli import main
from fracspace.czo import beurling_polygon, get_kernel, key_lemma_ratio, pv_apply, t1_check
from fracspace.extension import build_exterior_structure, extend, extension_norm_ratio, partition_sums
from fracspace.funcspace import (
    GridFunction,
    SeminormParams,
    check_maximal_lemma,
    inner_integrals,
    sample_function,
    seminorm,
    sharpness_experiment,
)
from fracspace.geometry import WhitneyCover, build_cover, builtin_domain, validate_cover
from test_funcspace import _dense_inner

LEVELS = (5, 6, 7)
TEST_FUNCTIONS = ("x1", "bump", "holder:0.7")
pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def spread(values) -> float:
    v = np.asarray(values, float)
    return float((v.max() - v.min()) / v.max())


def fmt(values) -> str:
    return "/".join(f"{v:.4g}" for v in values)


@pytest.fixture(scope="module")
def covers():
    cache = {}

    def get(name, level, side="interior", **kw):
        key = (name, level, side, tuple(sorted(kw.items())))
        if key not in cache:
            cache[key] = build_cover(builtin_domain(name, **kw), side, max_level=level)
        return cache[key]

    return get


def test_criterion_1_cover_validity(verdict):
    parts, ok = [], True
    for name, kw in (("square", {}), ("ngon", {"n": 64}), ("lshape", {})):
        t = time.perf_counter()
        cov = build_cover(builtin_domain(name, **kw), "interior", max_level=7)
        viol = validate_cover(cov)
        dt = time.perf_counter() - t
        ok &= not viol and len(cov) <= 20_000 and dt < 10
        parts.append(f"{name} {len(cov)} cubes, {len(viol)} violations, {dt:.1f}s")
    assert verdict(1, ok, "; ".join(parts))


def test_criterion_2_uniformity(verdict, covers):
    t = time.perf_counter()
    sq = [certify_uniform(covers("square", L), 200, seed=0).eps for L in (5, 7)]
    cor = [certify_uniform(covers("corridor", 9, w=w), 200, seed=0).eps for w in (0.4, 0.2, 0.1)]
    dt = time.perf_counter() - t
    ok = (min(sq) > 0 and max(sq) / min(sq) <= 2 and cor[0] > cor[1] > cor[2] > 0 and dt < 60)
    assert verdict(2, ok, f"square eps L5/L7 {fmt(sq)}; corridor eps w=0.4/0.2/0.1 {fmt(cor)}; {dt:.1f}s")


def test_criterion_3_oracle_equivalence(verdict, covers):
    cov = covers("square", 5)
    assert len(cov) <= 500
    f = sample_function(cov, "sin(3*x1) + x2**2", m=1)
    worst = {}
    for variant, rho, params in (("full", None, SeminormParams(0.5, 3, 2)),
                                 ("shadow", 3.0, SeminormParams(0.5, 2, 3)),
                                 ("ball", 0.5, SeminormParams(0.5, 3, 2))):
        fast = inner_integrals(f, params, variant, rho, r=1)
        slow = _dense_inner(f, params, variant, rho, 1)
        worst[variant] = float(np.max(np.abs(fast - slow) / np.abs(slow)))
    ok = max(worst.values()) <= 1e-12
    assert verdict(3, ok, f"{len(cov)} cubes, max relative error " +
                   ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_4_norm_equivalence(verdict, covers):
    t = time.perf_counter()
    p32, p23 = SeminormParams(0.5, 3, 2), SeminormParams(0.5, 2, 3)
    series = {}
    for fn in TEST_FUNCTIONS:
        for L in LEVELS:
            f = sample_function(covers("square", L), fn)
            full32 = seminorm(f, p32).seminorm_part
            full23 = seminorm(f, p23).seminorm_part
            for tag, num, den in (
                ("shadow(0.5,3,2)", seminorm(f, p32, "shadow", rho=3.0).seminorm_part, full32),
                ("shadow(0.5,2,3)", seminorm(f, p23, "shadow", rho=3.0).seminorm_part, full23),
                ("ball(0.5,3,2)", seminorm(f, p32, "ball", rho=0.5).seminorm_part, full32),
            ):
                series.setdefault((fn, tag), []).append(num / den)
    dt = time.perf_counter() - t
    bad = [k for k, v in series.items() if not (all(0 < x <= 1 for x in v) and spread(v) < 0.25)]
    ok = not bad and dt < 300
    detail = "; ".join(f"{fn} {tag} {fmt(v)} (spread {spread(v):.0%})" for (fn, tag), v in series.items())
    assert verdict(4, ok, f"{detail}; {dt:.0f}s" + (f"; outside window: {bad}" if bad else ""))


def test_criterion_5_sharpness(verdict):
    a = sharpness_experiment(0.3, 2, 8)["slope"]
    b = sharpness_experiment(0.1, 2, 8)["slope"]
    ok = abs(a - 0.9) <= 0.15 and abs(b - 1.3) <= 0.2
    assert verdict(5, ok, f"slope (0.3,2,8) {a:.3f} vs 0.9; (0.1,2,8) {b:.3f} vs 1.3")


def test_criterion_6_extension(verdict, covers):
    params = SeminormParams(0.5, 3, 2)
    ratios = {fn: [] for fn in TEST_FUNCTIONS}
    exact, pou = True, 0.0
    for L in LEVELS:
        S = build_exterior_structure(covers("square", L), covers("square", L, "exterior"))
        s, on4 = partition_sums(S, 2)
        pou = max(pou, float(np.max(np.abs(s[on4] - 1.0))))
        for fn in TEST_FUNCTIONS:
            f = sample_function(S.interior, fn)
            exact &= bool(np.array_equal(extend(f, S).values[:len(f.values)], f.values))
            ratios[fn].append(extension_norm_ratio(f, params, S)["ratio"])
    stable = {fn: spread(v) < 0.25 for fn, v in ratios.items()}
    ok = exact and pou < 1e-12 and all(stable.values())
    detail = "; ".join(f"{fn} {fmt(v)} (spread {spread(v):.0%})" for fn, v in ratios.items())
    assert verdict(6, ok, f"interior copy exact {exact}; PoU residual {pou:.1e}; ratios {detail}")


def test_criterion_7_maximal_lemma(verdict, covers, square):
    series = {"far": [], "close": [], "all_over": []}
    for L in LEVELS:
        cov = covers("square", L)
        out = check_maximal_lemma(cov, sample_function(cov, "rand:0"))
        for k in series:
            series[k].append(out[k])
    single = WhitneyCover(square, "interior", 6.0, 3, [3], [28], [28], [], [])
    one = check_maximal_lemma(single, sample_function(single, "const"), Q=0, eta=0.5)["all_over"]
    finite = all(np.isfinite(v).all() and min(v) > 0 for v in series.values())
    ok = finite and all(spread(v) < 0.5 for v in series.values()) and one == 2.0 ** (-2.5)
    detail = "; ".join(f"{k} {fmt(v)} (spread {spread(v):.0%})" for k, v in series.items())
    assert verdict(7, ok, f"{detail}; single cube {one!r} vs 2^-2.5")


def test_criterion_8_beurling_disk(verdict, covers):
    t = time.perf_counter()
    cov = covers("ngon", 6, n=64)
    f = sample_function(cov, "const")
    B = get_kernel("beurling")
    inner = [abs(pv_apply(B, f, z).value) for z in (0, 0.5, 0.3 + 0.4j)]
    outer = [abs(pv_apply(B, f, z).value + 1 / z ** 2) for z in (2, 1.5j, -2 + 2j)]
    dt = time.perf_counter() - t
    poly = max(abs(pv_apply(B, f, z).value - beurling_polygon(cov.domain.vertices, z)) for z in (0.5, 2))
    ok = max(inner) < 5e-3 and max(outer) < 5e-3 and dt < 30
    assert verdict(8, ok, f"interior |T1| max {max(inner):.1e}; exterior |T1 + 1/z^2| max {max(outer):.1e}; "
                   f"vs polygon closed form {poly:.1e}; {dt:.1f}s")


def test_criterion_9_t1(verdict, covers):
    B = get_kernel("beurling")
    theory = SeminormParams(0.75, 4, 2)
    disk = [t1_check(B, covers("ngon", 6, n=n), theory).collar_excluded_variant["total"] for n in (64, 128)]
    p32 = SeminormParams(0.5, 3, 2)
    sq = [t1_check(B, covers("square", L), p32).collar_excluded_variant["total"] for L in LEVELS]
    cov = covers("square", 5)
    const = key_lemma_ratio(B, sample_function(cov, "const:2"), p32)
    f = sample_function(cov, "x1*x2 + sin(3*x1)")
    a = key_lemma_ratio(B, f, p32)["ratio"]
    b = key_lemma_ratio(B, f * 2.0, p32)["ratio"]
    checks = {
        "disk decreasing": disk[1] < disk[0],
        "square stable": np.isfinite(sq).all() and spread(sq) < 0.3,
        "constant lhs 0": const["lhs"] == 0.0,
        "scale invariant": abs(a - b) < 1e-12,
    }
    detail = (f"64/128-gon {disk[0]:.3e} -> {disk[1]:.3e}; square L5/6/7 {fmt(sq)} (spread {spread(sq):.0%}); "
              f"key lemma const lhs {const['lhs']}, ratio {a:.6g} vs doubled {b:.6g}")
    failed = [k for k, v in checks.items() if not v]
    assert verdict(9, not failed, detail + (f"; failed: {failed}" if failed else ""))


def test_criterion_10_determinism(verdict, tmp_path):
    runs = {
        "whitney": ["--max-level", "5", "--svg", "{d}/w.svg"],
        "certify": ["--max-level", "5", "--pairs", "100", "--seed", "42", "--svg", "{d}/c.svg"],
        "norm": ["--max-level", "5", "--variant", "shadow", "--rho", "3", "--csv", "{d}/n.csv"],
        "extend": ["--max-level", "5", "--f", "bump", "--values-out", "{d}/e.json", "--svg", "{d}/e.svg"],
        "t1": ["--max-level", "5", "--values-out", "{d}/t.json"],
        "harness": ["--max-level", "4", "--f", "x1"],
        "sharpness": [],
    }
    differs = []
    for cmd, extra in runs.items():
        outs = []
        for k in (0, 1):
            d = tmp_path / f"{cmd}{k}"
            d.mkdir()
            args = [cmd, *(a.format(d=d) for a in extra), "--out", str(d / "report.json")]
            assert main(args) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        if outs[0] != outs[1]:
            differs.append(cmd)
    assert verdict(10, not differs, f"{len(runs)} commands run twice, artifacts differing: {differs or 'none'}")
