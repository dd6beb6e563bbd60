"""``fracspace`` command line: one subcommand per experiment, JSON reports out.

Exit status: 0 success, 1 a validation check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .chains import RHO_GRID, ChainError, _as_index, certify_uniform, find_chain
from .czo import DEFAULT_RHO, KERNELS, KernelError, PVQuadrature, get_kernel, key_lemma_ratio
from .czo import t1_check, truncated_apply, verify_kernel
from .extension import SUPPORT_FACTOR, ExtensionError, build_exterior_structure, extend
from .extension import extension_norm_ratio
from .funcspace import FunctionError, GridFunction, SeminormParams, sample_function, seminorm
from .funcspace import sharpness_experiment
from .geometry import DEFAULT_C_W, SUPERPOSITION_BOUND, CoverError, DomainError, WhitneyCover
from .geometry import build_cover, builtin_domain, load_domain, validate_cover

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 1, 2
COMMANDS = ("whitney", "certify", "norm", "extend", "t1", "harness", "sharpness")
_OUTPUT_FIELDS = ("out", "svg", "values_out", "csv")


class InputError(ValueError):
    """Bad file, flag or parameter combination."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    command: str
    domain: str = "square"
    side: str = "interior"
    c_w: float = DEFAULT_C_W
    max_level: int = 6
    levels: list = field(default_factory=list)
    m: int = 2
    r: int = 2
    s: float = 0.5
    p: float = 3.0
    q: float = 2.0
    variant: str = "full"
    rho: float | None = None
    f: str = "x1"
    kernel: str = "beurling"
    quad: dict = field(default_factory=dict)
    pairs: int = 200
    radii: list = field(default_factory=lambda: [4, 8, 16, 32])
    seed: int = 0
    out: str | None = None
    svg: str | None = None
    values_out: str | None = None
    csv: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.m < 1 or self.r < 0 or self.pairs < 1:
            raise InputError("need m >= 1, r >= 0 and pairs >= 1")
        if not self.c_w > 0:
            raise InputError("c_w must be positive")
        if self.variant not in ("full", "shadow", "ball"):
            raise InputError(f"unknown variant {self.variant!r}")
        if self.side not in ("interior", "exterior"):
            raise InputError(f"unknown side {self.side!r}")
        try:
            PVQuadrature(**self.quad)
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad quadrature parameters: {exc}") from None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise InputError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    def core(self) -> dict:
        """Everything that determines the results; output paths are left out."""
        return {k: v for k, v in self.to_json().items() if k not in _OUTPUT_FIELDS}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.core(), sort_keys=True).encode()).hexdigest()


def module_defaults() -> dict:
    return {
        "geometry": {"c_w": DEFAULT_C_W, "superposition_bound": SUPERPOSITION_BOUND},
        "chains": {"metric": "hops", "rho_grid": list(RHO_GRID)},
        "funcspace": {"m": 2, "r": 2},
        "extension": {"partner_factor": "4*c_w", "size_cap_factor": 0.5, "support_factor": SUPPORT_FACTOR},
        "czo": {"quadrature": asdict(PVQuadrature()), "shadow_rho": DEFAULT_RHO},
    }


def provenance(cfg: RunConfig) -> dict:
    versions = {name: hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
                for name, d in module_defaults().items()}
    return {"package": "fracspace", "version": __version__, "config_hash": cfg.digest(),
            "seed": cfg.seed, "module_defaults": versions, "config": cfg.core()}


# ---------------------------------------------------------------------------
# inputs


def resolve_domain(spec: str):
    """A JSON file path, or a builtin such as ``square``, ``ngon:128``, ``corridor:0.2``."""
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise InputError(f"cannot read domain file {spec}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"domain file {spec} is not valid JSON: {exc}") from None
        return load_domain(data)
    name, _, arg = spec.partition(":")
    kw = {}
    if arg:
        try:
            kw = {"n": int(arg)} if name in ("ngon", "disk") else {"w": float(arg)}
        except ValueError:
            raise InputError(f"bad builtin domain argument in {spec!r}") from None
    return builtin_domain(name, **kw)


def read_values(path: str, cover: WhitneyCover, m: int) -> GridFunction:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read node-value file {path}: {exc}") from None
    if int(data.get("m", -1)) != m:
        raise InputError(f"node-value file has m={data.get('m')}, expected {m}")
    vals = data.get("values", [])
    v = np.array([complex(a, b) for a, b in vals]) if data.get("complex") else np.asarray(vals, float)
    g = GridFunction(cover, m, v)
    pts = np.asarray(data.get("points", []), float)
    if pts.shape != g.points.shape or not np.allclose(pts, g.points, rtol=0, atol=1e-12):
        raise InputError("node-value file was written for a different cover")
    return g


def node_value_json(g: GridFunction) -> dict:
    cplx = bool(np.iscomplexobj(g.values))
    vals = [[float(z.real), float(z.imag)] for z in g.values] if cplx else g.values.tolist()
    return {"m": g.m, "side": g.cover.side, "max_level": g.cover.max_level, "complex": cplx,
            "points": g.points.tolist(), "values": vals}


def load_function(cfg: RunConfig, cover: WhitneyCover) -> GridFunction:
    if cfg.f.startswith("@"):
        return read_values(cfg.f[1:], cover, cfg.m)
    return sample_function(cover, cfg.f, cfg.m)


def params_of(cfg: RunConfig) -> SeminormParams:
    return SeminormParams(cfg.s, cfg.p, cfg.q)


# ---------------------------------------------------------------------------
# outputs


def _schema(name: str) -> dict:
    return json.loads(resources.files("fracspace.schemas").joinpath(f"{name}.json").read_text())


def validate_report(report: dict, name: str) -> None:
    import jsonschema
    jsonschema.validate(report, _schema(name))


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _level_color(k: int, lo: int, hi: int) -> str:
    t = 0.0 if hi == lo else (k - lo) / (hi - lo)
    return f"hsl({int(220 - 200 * t)},70%,{int(75 - 25 * t)}%)"


def cover_svg(covers, domain, chain=None, arrows=(), width: int = 640) -> str:
    """Cubes coloured by level, the polygon, an optional chain and pairing arrows."""
    covers = [c for c in covers if c is not None and len(c)]
    boxes = np.vstack([c.boxes for c in covers] + [np.hstack([domain.vertices, domain.vertices])])
    x0, y0 = boxes[:, 0].min(), boxes[:, 1].min()
    x1, y1 = boxes[:, 2].max(), boxes[:, 3].max()
    sc = width / max(x1 - x0, y1 - y0)
    height = int(math.ceil((y1 - y0) * sc))

    def X(x):
        return (x - x0) * sc

    def Y(y):
        return (y1 - y) * sc
    lv = np.concatenate([c.level for c in covers])
    lo, hi = int(lv.min()), int(lv.max())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">', '<rect width="100%" height="100%" fill="white"/>']
    for c in covers:
        for b, k in zip(c.boxes, c.level):
            out.append(f'<rect x="{X(b[0]):.3f}" y="{Y(b[3]):.3f}" width="{(b[2] - b[0]) * sc:.3f}" '
                       f'height="{(b[3] - b[1]) * sc:.3f}" fill="{_level_color(int(k), lo, hi)}" '
                       f'stroke="#333" stroke-width="0.3"/>')
    pts = " ".join(f"{X(x):.3f},{Y(y):.3f}" for x, y in domain.vertices)
    out.append(f'<polygon points="{pts}" fill="none" stroke="black" stroke-width="1.2"/>')
    if chain is not None:
        cov, idx, central = chain
        for j, i in enumerate(idx):
            b = cov.boxes[i]
            color = "red" if j in (0, len(idx) - 1) else ("gold" if j == central else "orange")
            out.append(f'<rect x="{X(b[0]):.3f}" y="{Y(b[3]):.3f}" width="{(b[2] - b[0]) * sc:.3f}" '
                       f'height="{(b[3] - b[1]) * sc:.3f}" fill="{color}" fill-opacity="0.7" '
                       f'stroke="black" stroke-width="0.6"/>')
    for (ax, ay), (bx, by) in arrows:
        out.append(f'<line x1="{X(ax):.3f}" y1="{Y(ay):.3f}" x2="{X(bx):.3f}" y2="{Y(by):.3f}" '
                   f'stroke="crimson" stroke-width="0.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# commands


def _cover(cfg: RunConfig, domain, side=None, level=None) -> WhitneyCover:
    return build_cover(domain, side or cfg.side, cfg.c_w, cfg.max_level if level is None else level)


def cmd_whitney(cfg, domain):
    cov = _cover(cfg, domain)
    viol = validate_cover(cov)
    if cfg.svg:
        _write(cfg.svg, cover_svg([cov], domain))
    rep = {"domain": domain.to_json(), "cover": cov.to_json(), "valid": not viol,
           "violations": [v.to_json() for v in viol]}
    return rep, EXIT_VIOLATION if viol else EXIT_OK


def cmd_certify(cfg, domain):
    cov = _cover(cfg, domain)
    cert = certify_uniform(cov, cfg.pairs, cfg.seed)
    if cfg.svg:
        a, b = (_as_index(cov, tuple(k)) for k in cert.worst_pair)
        ch = find_chain(cov, a, b)
        _write(cfg.svg, cover_svg([cov], domain, chain=(cov, list(ch.cubes), ch.central_index)))
    rep = {"certificate": cert.to_json(), "n_cubes": len(cov)}
    return rep, EXIT_OK if cert.rho_ok else EXIT_VIOLATION


def cmd_norm(cfg, domain):
    params = params_of(cfg)
    rho = cfg.rho
    if cfg.variant == "shadow" and rho is None:
        rho = DEFAULT_RHO
    levels = cfg.levels or [cfg.max_level]
    rows, reports = [], []
    for L in levels:
        cov = _cover(cfg, domain, "interior", L)
        f = load_function(cfg, cov)
        rep = seminorm(f, params, cfg.variant, rho=rho, r=cfg.r)
        reports.append(rep.to_json())
        rows.append((L, cfg.m, cfg.r, rep.total, rep.tail_estimate, cov.collar_area))
    if cfg.csv:
        lines = ["level,m,r,value,tail,collar"] + [",".join(repr(x) for x in row) for row in rows]
        _write(cfg.csv, "\n".join(lines) + "\n")
    out = {"report": reports[-1], "f": cfg.f}
    if len(reports) > 1:
        out["levels"] = [{"level": L, "report": r} for L, r in zip(levels, reports)]
    return out, EXIT_OK


def cmd_extend(cfg, domain):
    inner = _cover(cfg, domain, "interior")
    outer = _cover(cfg, domain, "exterior")
    S = build_exterior_structure(inner, outer)
    f = load_function(cfg, inner)
    ext = extend(f, S)
    ratio = extension_norm_ratio(f, params_of(cfg), S, r=cfg.r)
    if cfg.values_out:
        _write(cfg.values_out, dump(node_value_json(ext)))
    if cfg.svg:
        arrows = [(outer.centers[q], inner.centers[s]) for q, s in zip(S.w3, S.partner)]
        _write(cfg.svg, cover_svg([inner, outer], domain, arrows=arrows))
    return {"structure": S.to_json(), "ratio": ratio, "f": cfg.f}, EXIT_OK


def _kernel_and_quad(cfg):
    return get_kernel(cfg.kernel), PVQuadrature(**cfg.quad)


def cmd_t1(cfg, domain):
    K, quad = _kernel_and_quad(cfg)
    cov = _cover(cfg, domain, "interior")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = t1_check(K, cov, params_of(cfg), rho=cfg.rho, quad=quad, m=cfg.m)
    if cfg.values_out:
        T = truncated_apply(K, GridFunction(cov, cfg.m, np.ones(len(cov) * cfg.m ** 2)), quad)
        _write(cfg.values_out, dump(node_value_json(T.values)))
    out = {"t1": rep.to_json(), "kernel_check": verify_kernel(K, seed=cfg.seed)}
    return out, EXIT_OK if rep.n_nonconverged == 0 else EXIT_VIOLATION


def cmd_harness(cfg, domain):
    K, quad = _kernel_and_quad(cfg)
    cov = _cover(cfg, domain, "interior")
    f = load_function(cfg, cov)
    rep = key_lemma_ratio(K, f, params_of(cfg), rho=cfg.rho, quad=quad, r=cfg.r)
    return {"key_lemma": rep, "kernel": K.id, "f": cfg.f}, EXIT_OK


def cmd_sharpness(cfg, domain):
    return {"sharpness": sharpness_experiment(cfg.s, cfg.p, cfg.q, tuple(cfg.radii))}, EXIT_OK


HANDLERS = {"whitney": cmd_whitney, "certify": cmd_certify, "norm": cmd_norm, "extend": cmd_extend,
            "t1": cmd_t1, "harness": cmd_harness, "sharpness": cmd_sharpness}


def run(cfg: RunConfig) -> int:
    """Execute one configuration; returns the exit status."""
    try:
        domain = resolve_domain(cfg.domain)
        report, status = HANDLERS[cfg.command](cfg, domain)
    except ChainError as exc:
        # e.g. a disconnected cover: the uniformity check itself fails
        print(f"fracspace {cfg.command}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (InputError, DomainError, FunctionError, KernelError, ExtensionError, CoverError,
            ValueError) as exc:
        print(f"fracspace {cfg.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report = _clean({"command": cfg.command, "status": status, **report, "provenance": provenance(cfg)})
    validate_report(report, cfg.command)
    _write(cfg.out, dump(report))
    return status


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, params: bool = True) -> None:
    p.add_argument("--domain", default="square", help="polygon JSON file or builtin (square, ngon:N, lshape, corridor:W)")
    p.add_argument("--c-w", dest="c_w", type=float, default=DEFAULT_C_W)
    p.add_argument("--max-level", dest="max_level", type=int, default=6)
    p.add_argument("--m", type=int, default=2, help="nodes per cube side")
    p.add_argument("--r", type=int, default=2, help="near-diagonal refinement generations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default stdout)")
    if params:
        p.add_argument("--s", type=float, default=0.5)
        p.add_argument("--p", type=float, default=3.0)
        p.add_argument("--q", type=float, default=2.0)
        p.add_argument("--rho", type=float)


def _add_kernel(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", default="beurling", choices=sorted(KERNELS))
    p.add_argument("--delta0", type=float)
    p.add_argument("--J", type=int)
    p.add_argument("--collar", choices=("nearest", "zero"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracspace", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fracspace {__version__}")
    ap.add_argument("--config", help="run a saved RunConfig JSON instead of a subcommand")
    ap.add_argument("--save-config", dest="save_config", help="write the effective RunConfig here")
    ap.add_argument("--threads", type=int, help="worker threads (sets FRACSPACE_THREADS)")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("whitney", help="build and validate a Whitney cover")
    _add_common(p, params=False)
    p.add_argument("--side", choices=("interior", "exterior"), default="interior")
    p.add_argument("--svg")

    p = sub.add_parser("certify", help="sampled uniformity certificate")
    _add_common(p, params=False)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--svg")

    p = sub.add_parser("norm", help="difference seminorm of a function")
    _add_common(p)
    p.add_argument("--f", default="x1", help="builtin/expression, or @file.json with node values")
    p.add_argument("--variant", choices=("full", "shadow", "ball"), default="full")
    p.add_argument("--levels", type=int, nargs="+", help="run at several max levels")
    p.add_argument("--csv")

    p = sub.add_parser("extend", help="extension across the boundary and its norm ratio")
    _add_common(p)
    p.add_argument("--f", default="x1")
    p.add_argument("--values-out", dest="values_out")
    p.add_argument("--svg")

    p = sub.add_parser("t1", help="T(1) report for a kernel")
    _add_common(p)
    _add_kernel(p)
    p.add_argument("--values-out", dest="values_out")

    p = sub.add_parser("harness", help="key-lemma ratio for one function")
    _add_common(p)
    _add_kernel(p)
    p.add_argument("--f", default="x1")

    p = sub.add_parser("sharpness", help="divergence rate outside the valid regime")
    p.add_argument("--s", type=float, default=0.3)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--q", type=float, default=8.0)
    p.add_argument("--radii", type=float, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    d = vars(ns).copy()
    for k in ("config", "save_config", "threads"):
        d.pop(k, None)
    quad = {k: d.pop(k) for k in ("delta0", "J", "collar") if k in d}
    d["quad"] = {k: v for k, v in quad.items() if v is not None}
    d["levels"] = d.get("levels") or []
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in d.items() if k in known})


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    if ns.threads is not None:
        os.environ["FRACSPACE_THREADS"] = str(ns.threads)
    try:
        if ns.config:
            try:
                cfg = RunConfig.from_json(json.loads(Path(ns.config).read_text()))
            except (OSError, json.JSONDecodeError, TypeError) as exc:
                raise InputError(f"cannot load config {ns.config}: {exc}") from None
        elif ns.command is None:
            ap.print_usage(sys.stderr)
            print("fracspace: a subcommand or --config is required", file=sys.stderr)
            return EXIT_INPUT
        else:
            cfg = config_from_args(ns)
    except InputError as exc:
        print(f"fracspace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if ns.save_config:
        Path(ns.save_config).write_text(dump(cfg.to_json()))
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
