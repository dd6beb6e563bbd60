"""Whitney covers, chains, difference seminorms, extension and CZ operators on planar polygons."""

__version__ = "0.1.0"

from .geometry import Domain, WhitneyCover, build_cover, builtin_domain, load_domain, validate_cover  # noqa: E402
from .chains import ShadowIndex, certify_uniform, find_chain  # noqa: E402
from .funcspace import GridFunction, SeminormParams, sample_function, seminorm  # noqa: E402
from .extension import build_exterior_structure, extend  # noqa: E402
from .czo import get_kernel, key_lemma_ratio, pv_apply, t1_check, truncated_apply  # noqa: E402

__all__ = [
    "__version__",
    "Domain", "WhitneyCover", "build_cover", "builtin_domain", "load_domain", "validate_cover",
    "ShadowIndex", "certify_uniform", "find_chain",
    "GridFunction", "SeminormParams", "sample_function", "seminorm",
    "build_exterior_structure", "extend",
    "get_kernel", "key_lemma_ratio", "pv_apply", "t1_check", "truncated_apply",
]
