"""Detector geometry: pixel -> reciprocal-space maps and shadow masks.

Conventions
-----------
* Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)`` in
  detector coordinates ``(x, y)``; the beam center is real valued.
* ``phi`` is measured from +x, counterclockwise as seen on screen (rows
  increase downward), in ``(-pi, pi]``.
* ``q = (4 pi / wavelength) sin(theta / 2)`` with
  ``theta = atan(r * pixel_size / distance)``, no small-angle approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "DetectorConfig",
    "QMap",
    "LinearBeamstop",
    "CircularBeamstop",
    "WedgeBeamstop",
    "GapBand",
    "MaskSpec",
    "PRESETS",
    "preset_config",
    "pixel_radius",
    "build_qmap",
    "rasterize_mask",
    "beam_on_image",
]


@dataclass(frozen=True)
class DetectorConfig:
    width_px: int
    height_px: int
    pixel_size_mm: float
    sample_distance_mm: float
    wavelength_A: float
    beam_center: tuple[float, float]

    def __post_init__(self):
        for name in ("width_px", "height_px"):
            v = getattr(self, name)
            if int(v) != v or v < 16:
                raise ConfigError(name, f"must be an integer >= 16, got {v!r}")
        for name in ("pixel_size_mm", "sample_distance_mm", "wavelength_A"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be a positive finite number, got {v!r}")
        if self.sample_distance_mm <= self.pixel_size_mm:
            raise ConfigError("sample_distance_mm", "must exceed pixel_size_mm")
        if len(self.beam_center) != 2 or not all(math.isfinite(c) for c in self.beam_center):
            raise ConfigError("beam_center", f"must be a finite (cx, cy) pair, got {self.beam_center!r}")
        object.__setattr__(self, "width_px", int(self.width_px))
        object.__setattr__(self, "height_px", int(self.height_px))
        object.__setattr__(self, "beam_center", (float(self.beam_center[0]), float(self.beam_center[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "pixel_size_mm": self.pixel_size_mm,
            "sample_distance_mm": self.sample_distance_mm,
            "wavelength_A": self.wavelength_A,
            "beam_center": list(self.beam_center),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            width_px=d["width_px"],
            height_px=d["height_px"],
            pixel_size_mm=d["pixel_size_mm"],
            sample_distance_mm=d["sample_distance_mm"],
            wavelength_A=d["wavelength_A"],
            beam_center=tuple(d["beam_center"]),
        )


# Not taken from any real beamline: a 170 mm square detector at two distances.
PRESETS = {
    "saxs": {"sample_distance_mm": 1000.0, "wavelength_A": 1.0, "extent_mm": 170.0},
    "waxs": {"sample_distance_mm": 200.0, "wavelength_A": 1.0, "extent_mm": 170.0},
}


def preset_config(name: str, size: int, beam_center=None) -> DetectorConfig:
    """Square detector of ``size`` pixels covering the preset's physical extent."""
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigError("detector_preset", f"unknown preset {name!r}") from None
    if beam_center is None:
        beam_center = (size / 2.0, size / 2.0)
    return DetectorConfig(
        width_px=size,
        height_px=size,
        pixel_size_mm=p["extent_mm"] / size,
        sample_distance_mm=p["sample_distance_mm"],
        wavelength_A=p["wavelength_A"],
        beam_center=beam_center,
    )


@dataclass(frozen=True)
class QMap:
    q: np.ndarray
    phi: np.ndarray

    @property
    def shape(self):
        return self.q.shape

    @property
    def q_min(self) -> float:
        return float(self.q.min())

    @property
    def q_max(self) -> float:
        return float(self.q.max())


def _offsets(cfg: DetectorConfig):
    cx, cy = cfg.beam_center
    dx = np.arange(cfg.width_px, dtype=np.float64) + 0.5 - cx
    dy = np.arange(cfg.height_px, dtype=np.float64) + 0.5 - cy
    return dx[None, :], dy[:, None]


def pixel_radius(cfg: DetectorConfig) -> np.ndarray:
    dx, dy = _offsets(cfg)
    return np.hypot(dx, dy)


def build_qmap(cfg: DetectorConfig) -> QMap:
    dx, dy = _offsets(cfg)
    r = np.hypot(dx, dy)
    theta = np.arctan(r * cfg.pixel_size_mm / cfg.sample_distance_mm)
    q = (4.0 * np.pi / cfg.wavelength_A) * np.sin(theta / 2.0)
    # screen "up" is -y
    phi = np.arctan2(-dy + np.zeros_like(dx), dx + np.zeros_like(dy))
    phi[phi <= -np.pi] = np.pi
    phi[r == 0.0] = 0.0
    q.setflags(write=False)
    phi.setflags(write=False)
    return QMap(q=q, phi=phi)


# -- masks -------------------------------------------------------------------


@dataclass(frozen=True)
class LinearBeamstop:
    width_px: float
    angle_rad: float

    def __post_init__(self):
        if not self.width_px > 0:
            raise ConfigError("beamstop.width_px", "must be > 0")


@dataclass(frozen=True)
class CircularBeamstop:
    radius_px: float

    def __post_init__(self):
        if not self.radius_px > 0:
            raise ConfigError("beamstop.radius_px", "must be > 0")


@dataclass(frozen=True)
class WedgeBeamstop:
    half_angle_rad: float
    orientation_rad: float
    radius_px: float

    def __post_init__(self):
        if not (0 < self.half_angle_rad <= math.pi / 2):
            raise ConfigError("beamstop.half_angle_rad", "must lie in (0, pi/2]")
        if not self.radius_px > 0:
            raise ConfigError("beamstop.radius_px", "must be > 0")


@dataclass(frozen=True)
class GapBand:
    start_px: int
    width_px: int
    axis: str = "rows"

    def __post_init__(self):
        if self.width_px <= 0:
            raise ConfigError("gap.width_px", "must be > 0")
        if self.axis not in ("rows", "cols"):
            raise ConfigError("gap.axis", f"must be 'rows' or 'cols', got {self.axis!r}")


_BEAMSTOPS = {"Linear": LinearBeamstop, "Circular": CircularBeamstop, "Wedge": WedgeBeamstop}
_BEAMSTOP_NAMES = {v: k for k, v in _BEAMSTOPS.items()}


@dataclass(frozen=True)
class MaskSpec:
    beamstop: LinearBeamstop | CircularBeamstop | WedgeBeamstop | None = None
    gaps: tuple[GapBand, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "gaps", tuple(self.gaps))

    @property
    def beamstop_kind(self) -> str | None:
        return None if self.beamstop is None else _BEAMSTOP_NAMES[type(self.beamstop)]

    def to_dict(self) -> dict:
        bs = None
        if self.beamstop is not None:
            bs = {"type": self.beamstop_kind, **self.beamstop.__dict__}
        return {"beamstop": bs, "gaps": [dict(g.__dict__) for g in self.gaps]}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        bs = d.get("beamstop")
        if bs is not None:
            bs = dict(bs)
            kind = bs.pop("type")
            if kind not in _BEAMSTOPS:
                raise ConfigError("beamstop.type", f"unknown beamstop {kind!r}")
            bs = _BEAMSTOPS[kind](**bs)
        return cls(beamstop=bs, gaps=tuple(GapBand(**g) for g in d.get("gaps", [])))


def _wrap(a):
    """Wrap angles to [-pi, pi)."""
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def rasterize_mask(cfg: DetectorConfig, spec: MaskSpec) -> np.ndarray:
    """Boolean shadow grid, True where the detector sees no photons."""
    dx, dy = _offsets(cfg)
    mask = np.zeros(cfg.shape, dtype=bool)
    bs = spec.beamstop
    if isinstance(bs, CircularBeamstop):
        mask |= np.hypot(dx, dy) <= bs.radius_px
    elif isinstance(bs, LinearBeamstop):
        ux, uy = math.cos(bs.angle_rad), -math.sin(bs.angle_rad)
        along = dx * ux + dy * uy
        across = np.abs(-dx * uy + dy * ux)
        half = bs.width_px / 2.0
        mask |= ((along >= 0) & (across <= half)) | (np.hypot(dx, dy) <= half)
    elif isinstance(bs, WedgeBeamstop):
        r = np.hypot(dx, dy)
        phi = np.arctan2(-dy + np.zeros_like(dx), dx + np.zeros_like(dy))
        mask |= (np.abs(_wrap(phi - bs.orientation_rad)) <= bs.half_angle_rad) & (r <= bs.radius_px)
    for gap in spec.gaps:
        lo = max(gap.start_px, 0)
        hi = max(gap.start_px + gap.width_px, 0)
        if gap.axis == "rows":
            mask[lo:hi, :] = True
        else:
            mask[:, lo:hi] = True
    return mask


def beam_on_image(cfg: DetectorConfig) -> bool:
    cx, cy = cfg.beam_center
    return 0.0 <= cx < cfg.width_px and 0.0 <= cy < cfg.height_px
