"""Rule-based attribute tagging of scene recipes."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import ConfigError
from ..geometry import QMap, beam_on_image, build_qmap, rasterize_mask
from .kernels import (
    DebyeCloud,
    DiffuseHighQ,
    DiffuseLowQ,
    Halo,
    Lattice,
    PeakSet,
    Ring,
    SphereFF,
    lattice_peak_positions,
)
from .scene import SceneRecipe, compose_scene

CANONICAL_ATTRIBUTES = (
    "BCC",
    "Beam Off Image",
    "Circ. Beamstop",
    "Diffuse high-q",
    "Diffuse low-q",
    "FCC",
    "Halo",
    "High background",
    "Higher orders",
    "Linear beamstop",
    "Many rings",
    "Polycrystalline",
    "Ring",
    "Strong scattering",
    "Structure factor",
    "Weak scattering",
    "Wedge beamstop",
)

_BEAMSTOP_TAGS = {"Linear": "Linear beamstop", "Circular": "Circ. Beamstop", "Wedge": "Wedge beamstop"}


@dataclass(frozen=True)
class TagThresholds:
    ring_many_threshold: int = 5
    hb_threshold: float = 50.0
    strong_threshold: float = 20.0
    weak_threshold: float = 2.0
    halo_breadth_ratio: float = 0.35
    signal_percentile: float = 99.9

    def __post_init__(self):
        if self.strong_threshold <= self.weak_threshold:
            raise ConfigError("thresholds.strong_threshold", "must exceed weak_threshold")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TagThresholds":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (d or {}).items() if k in known})


@dataclass(frozen=True)
class AttributeSet:
    canonical: frozenset = field(default_factory=frozenset)
    extended: tuple = ()

    def __post_init__(self):
        unknown = set(self.canonical) - set(CANONICAL_ATTRIBUTES)
        if unknown:
            raise ValueError(f"not canonical attributes: {sorted(unknown)}")
        object.__setattr__(self, "canonical", frozenset(self.canonical))
        object.__setattr__(self, "extended", tuple(sorted(set(self.extended))))

    def __contains__(self, name):
        return name in self.canonical or name in self.extended

    def sorted_canonical(self) -> list[str]:
        return [a for a in CANONICAL_ATTRIBUTES if a in self.canonical]


def _visible(positions, qmap: QMap) -> list[float]:
    lo, hi = qmap.q_min, qmap.q_max
    return [q for q in positions if lo <= q <= hi]


def signal_ratio(recipe: SceneRecipe, intensity: np.ndarray, mask: np.ndarray, percentile: float = 99.9) -> float:
    """``S = percentile(expected signal counts on unmasked pixels) / (background + 1)``."""
    vals = intensity[~mask]
    if vals.size == 0:
        return 0.0
    signal = recipe.noise.exposure_scale * float(np.percentile(vals, percentile))
    return signal / (recipe.noise.background_level + 1.0)


def derive_tags(
    recipe: SceneRecipe,
    thresholds: TagThresholds | None = None,
    intensity: np.ndarray | None = None,
    qmap: QMap | None = None,
) -> AttributeSet:
    """Apply the tagging rule table to a recipe.

    ``intensity`` (the composed pre-noise grid) may be passed to avoid
    recomposing the scene.  An empty canonical set is returned as is; the
    dataset sampler treats that as a rejection.
    """
    th = thresholds or TagThresholds()
    if qmap is None:
        qmap = build_qmap(recipe.detector)
    tags: set[str] = set()
    ext: set[str] = set()
    orders: set[float] = set()

    for m in recipe.modules:
        if isinstance(m, Ring):
            tags.add("Ring")
            ext.add("Ring: Anisotropic" if m.anisotropy else "Ring: Isotropic")
            vis = _visible([n * m.q0 for n in range(1, m.n_orders + 1)], qmap)
            orders.update(round(q, 9) for q in vis)
            if len(vis) >= 2:
                tags.add("Higher orders")
        elif isinstance(m, Halo):
            tags.add("Halo")
            ext.add("Halo: Anisotropic" if m.anisotropy else "Halo: Isotropic")
        elif isinstance(m, Lattice):
            tags.update(("Structure factor", m.symmetry))
            if m.powder:
                tags.add("Polycrystalline")
            else:
                ext.add("Lattice: Spots")
            vis = _visible(lattice_peak_positions(m.symmetry, m.lattice_const_A, m.n_orders), qmap)
            orders.update(round(q, 9) for q in vis)
            if len(vis) >= 2:
                tags.add("Higher orders")
        elif isinstance(m, DiffuseLowQ):
            tags.add("Diffuse low-q")
        elif isinstance(m, DiffuseHighQ):
            tags.add("Diffuse high-q")
        elif isinstance(m, SphereFF):
            ext.add("Sphere form factor")
        elif isinstance(m, DebyeCloud):
            ext.add("Debye cloud")
        elif isinstance(m, PeakSet):
            ext.add("Peaks")

    if len(orders) >= th.ring_many_threshold:
        tags.add("Many rings")
    if recipe.mask.beamstop_kind is not None:
        tags.add(_BEAMSTOP_TAGS[recipe.mask.beamstop_kind])
    if recipe.mask.gaps:
        ext.add("Detector gaps")
    if not beam_on_image(recipe.detector):
        tags.add("Beam Off Image")
    if recipe.noise.background_level >= th.hb_threshold:
        tags.add("High background")

    if recipe.modules:
        if intensity is None:
            intensity = compose_scene(recipe, qmap)
        mask = rasterize_mask(recipe.detector, recipe.mask)
        s = signal_ratio(recipe, intensity, mask, th.signal_percentile)
        if s >= th.strong_threshold:
            tags.add("Strong scattering")
        elif s <= th.weak_threshold:
            tags.add("Weak scattering")
    return AttributeSet(frozenset(tags), tuple(ext))
