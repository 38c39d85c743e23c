"""Scattering kernels, scene composition, detector corruption and tagging."""

from .kernels import *  # noqa: F401,F403
from .kernels import __all__ as _kernels_all
from .scene import (
    NoiseSpec,
    SceneRecipe,
    compose_scene,
    corrupt_and_quantize,
    module_digest,
    poisson_counts,
    render,
)
from .tags import CANONICAL_ATTRIBUTES, AttributeSet, TagThresholds, derive_tags, signal_ratio

__all__ = list(_kernels_all) + [
    "NoiseSpec",
    "SceneRecipe",
    "compose_scene",
    "corrupt_and_quantize",
    "module_digest",
    "poisson_counts",
    "render",
    "CANONICAL_ATTRIBUTES",
    "AttributeSet",
    "TagThresholds",
    "derive_tags",
    "signal_ratio",
]
