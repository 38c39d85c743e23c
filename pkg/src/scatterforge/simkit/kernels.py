"""Scattering-pattern kernels.

Each module spec is a small frozen dataclass; ``eval_module`` turns one into
a non-negative intensity grid on a :class:`~scatterforge.geometry.QMap`.
Intensities are unit-less; the noise stage maps them to detector counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import expit

from ..errors import ConfigError
from ..geometry import QMap

__all__ = [
    "Anisotropy",
    "Ring",
    "Halo",
    "DiffuseLowQ",
    "DiffuseHighQ",
    "SphereFF",
    "SpotTexture",
    "Lattice",
    "DebyeCloud",
    "Peak",
    "PeakSet",
    "MODULE_TYPES",
    "module_to_dict",
    "module_from_dict",
    "anisotropy_envelope",
    "eval_ring",
    "eval_diffuse",
    "sinc",
    "sphere_form_factor",
    "sphere_intensity",
    "eval_sphere",
    "lattice_peak_positions",
    "eval_lattice",
    "debye_intensity",
    "eval_debye",
    "eval_peaks",
    "eval_module",
]


def _need(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(name, msg)


@dataclass(frozen=True)
class Anisotropy:
    kappa: float
    phi0: float

    def __post_init__(self):
        _need(self.kappa >= 0, "anisotropy.kappa", "must be >= 0")


@dataclass(frozen=True)
class Ring:
    q0: float
    sigma_q: float
    amplitude: float = 1.0
    anisotropy: Anisotropy | None = None
    n_orders: int = 1
    order_decay: float = 1.0

    def __post_init__(self):
        _need(self.q0 > 0, "ring.q0", "must be > 0")
        _need(self.sigma_q > 0, "ring.sigma_q", "must be > 0")
        _need(self.amplitude >= 0, "ring.amplitude", "must be >= 0")
        _need(int(self.n_orders) == self.n_orders and self.n_orders >= 1, "ring.n_orders", "must be an integer >= 1")
        _need(0 < self.order_decay <= 1, "ring.order_decay", "must lie in (0, 1]")


@dataclass(frozen=True)
class Halo:
    q0: float
    sigma_q: float
    amplitude: float = 1.0
    anisotropy: Anisotropy | None = None

    def __post_init__(self):
        _need(self.q0 >= 0, "halo.q0", "must be >= 0")
        _need(self.sigma_q > 0, "halo.sigma_q", "must be > 0")
        _need(self.amplitude >= 0, "halo.amplitude", "must be >= 0")

    def breadth(self) -> float:
        return self.sigma_q / max(self.q0, self.sigma_q)


@dataclass(frozen=True)
class DiffuseLowQ:
    amplitude: float
    power: float
    q_floor: float

    def __post_init__(self):
        _need(self.amplitude >= 0, "diffuse_low_q.amplitude", "must be >= 0")
        _need(2 <= self.power <= 4, "diffuse_low_q.power", "must lie in [2, 4]")
        _need(self.q_floor > 0, "diffuse_low_q.q_floor", "must be > 0")


@dataclass(frozen=True)
class DiffuseHighQ:
    amplitude: float
    q_onset: float
    softness: float

    def __post_init__(self):
        _need(self.amplitude >= 0, "diffuse_high_q.amplitude", "must be >= 0")
        _need(self.q_onset > 0, "diffuse_high_q.q_onset", "must be > 0")
        _need(self.softness > 0, "diffuse_high_q.softness", "must be > 0")


@dataclass(frozen=True)
class SphereFF:
    radius_A: float
    amplitude: float = 1.0
    polydispersity: float = 0.0

    def __post_init__(self):
        _need(self.radius_A > 0, "sphere.radius_A", "must be > 0")
        _need(self.amplitude >= 0, "sphere.amplitude", "must be >= 0")
        _need(0 <= self.polydispersity <= 0.3, "sphere.polydispersity", "must lie in [0, 0.3]")


@dataclass(frozen=True)
class SpotTexture:
    n_spots: int
    spot_sigma_phi: float

    def __post_init__(self):
        _need(2 <= self.n_spots <= 24, "texture.n_spots", "must lie in [2, 24]")
        _need(self.spot_sigma_phi > 0, "texture.spot_sigma_phi", "must be > 0")


@dataclass(frozen=True)
class Lattice:
    symmetry: str
    lattice_const_A: float
    peak_sigma_q: float
    n_orders: int = 3
    texture: str | SpotTexture = "powder"
    dw_factor: float = 0.0
    amplitude: float = 1.0
    # None: drawn from the scene seed at composition time
    rotation_rad: float | None = None

    def __post_init__(self):
        _need(self.symmetry in ("BCC", "FCC"), "lattice.symmetry", "must be 'BCC' or 'FCC'")
        _need(self.lattice_const_A > 0, "lattice.lattice_const_A", "must be > 0")
        _need(self.peak_sigma_q > 0, "lattice.peak_sigma_q", "must be > 0")
        _need(int(self.n_orders) == self.n_orders and 1 <= self.n_orders <= 8, "lattice.n_orders", "must lie in [1, 8]")
        _need(self.texture == "powder" or isinstance(self.texture, SpotTexture), "lattice.texture",
              "must be 'powder' or a SpotTexture")
        _need(self.dw_factor >= 0, "lattice.dw_factor", "must be >= 0")
        _need(self.amplitude >= 0, "lattice.amplitude", "must be >= 0")

    @property
    def powder(self) -> bool:
        return self.texture == "powder"


@dataclass(frozen=True)
class DebyeCloud:
    points: tuple[tuple[float, float, float], ...]
    strength: float = 1.0
    q_samples: int = 128

    def __post_init__(self):
        pts = tuple(tuple(float(c) for c in p) for p in self.points)
        _need(len(pts) >= 1 and all(len(p) == 3 for p in pts), "debye.points", "need >= 1 three-dimensional point")
        _need(self.strength >= 0, "debye.strength", "must be >= 0")
        _need(self.q_samples >= 64, "debye.q_samples", "must be >= 64")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Peak:
    q: float
    phi: float
    sigma_q: float
    sigma_phi: float
    amplitude: float

    def __post_init__(self):
        _need(self.q >= 0, "peak.q", "must be >= 0")
        _need(self.sigma_q > 0 and self.sigma_phi > 0, "peak.sigma", "widths must be > 0")
        _need(self.amplitude >= 0, "peak.amplitude", "must be >= 0")


@dataclass(frozen=True)
class PeakSet:
    peaks: tuple[Peak, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple(self.peaks))


MODULE_TYPES = {
    "Ring": Ring,
    "Halo": Halo,
    "DiffuseLowQ": DiffuseLowQ,
    "DiffuseHighQ": DiffuseHighQ,
    "SphereFF": SphereFF,
    "Lattice": Lattice,
    "DebyeCloud": DebyeCloud,
    "PeakSet": PeakSet,
}
_TYPE_NAMES = {v: k for k, v in MODULE_TYPES.items()}


def module_to_dict(spec) -> dict:
    name = _TYPE_NAMES[type(spec)]
    out = {"type": name}
    for key, val in spec.__dict__.items():
        if isinstance(val, (Anisotropy, SpotTexture)):
            val = dict(val.__dict__)
        elif key == "peaks":
            val = [dict(p.__dict__) for p in val]
        elif key == "points":
            val = [list(p) for p in val]
        out[key] = val
    return out


def module_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in MODULE_TYPES:
        raise ConfigError("module.type", f"unknown module type {kind!r}")
    if d.get("anisotropy") is not None:
        d["anisotropy"] = Anisotropy(**d["anisotropy"])
    if kind == "Lattice" and isinstance(d.get("texture"), dict):
        d["texture"] = SpotTexture(**d["texture"])
    if kind == "PeakSet":
        d["peaks"] = tuple(Peak(**p) for p in d.get("peaks", []))
    if kind == "DebyeCloud":
        d["points"] = tuple(tuple(p) for p in d["points"])
    return MODULE_TYPES[kind](**d)


# -- rings and diffuse terms ----------------------------------------------


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def anisotropy_envelope(aniso: Anisotropy | None, phi: np.ndarray) -> np.ndarray | float:
    """Two-fold envelope ``exp(kappa (cos 2(phi - phi0) - 1))``, peak value 1."""
    if aniso is None:
        return 1.0
    return np.exp(aniso.kappa * (np.cos(2.0 * (phi - aniso.phi0)) - 1.0))


def eval_ring(spec: Ring | Halo, qmap: QMap) -> np.ndarray:
    q = qmap.q
    n_orders = spec.n_orders if isinstance(spec, Ring) else 1
    decay = spec.order_decay if isinstance(spec, Ring) else 1.0
    two_s2 = 2.0 * spec.sigma_q**2
    out = np.zeros_like(q)
    for n in range(1, n_orders + 1):
        out += (decay ** (n - 1)) * np.exp(-((q - n * spec.q0) ** 2) / two_s2)
    out *= spec.amplitude
    return out * anisotropy_envelope(spec.anisotropy, qmap.phi)


def eval_diffuse(spec: DiffuseLowQ | DiffuseHighQ, qmap: QMap) -> np.ndarray:
    q = qmap.q
    if isinstance(spec, DiffuseLowQ):
        return spec.amplitude * np.maximum(q, spec.q_floor) ** (-spec.power)
    return spec.amplitude * expit((q - spec.q_onset) / spec.softness)


# -- sphere form factor ------------------------------------------------------


def sinc(x):
    """``sin(x)/x`` with a series branch for ``|x| < 1e-4``."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(safe) / safe)


def sphere_form_factor(q, R):
    """Normalized amplitude ``3 (sin qR - qR cos qR) / (qR)^3``; 1 at q = 0."""
    x = np.asarray(q, dtype=np.float64) * R
    small = np.abs(x) < 1e-3
    safe = np.where(small, 1.0, x)
    x2 = x * x
    series = 1.0 - x2 / 10.0 + x2 * x2 / 280.0
    full = 3.0 * (np.sin(safe) - safe * np.cos(safe)) / safe**3
    out = np.where(small, series, full)
    return out if out.ndim else float(out)


_SPHERE_NODES = 31


def sphere_intensity(q, R: float, sigma_R: float = 0.0):
    """``<F^2>`` over a Gaussian radius distribution truncated at ``R +- 3 sigma``."""
    q = np.asarray(q, dtype=np.float64)
    if sigma_R <= 0:
        return sphere_form_factor(q, R) ** 2
    radii = np.linspace(R - 3.0 * sigma_R, R + 3.0 * sigma_R, _SPHERE_NODES)
    weights = np.exp(-0.5 * ((radii - R) / sigma_R) ** 2)
    keep = radii > 0
    radii, weights = radii[keep], weights[keep]
    weights = weights / weights.sum()
    out = np.zeros_like(q)
    for r, w in zip(radii, weights):
        out += w * sphere_form_factor(q, r) ** 2
    return out


def eval_sphere(spec: SphereFF, qmap: QMap) -> np.ndarray:
    # radial profile on a 1-D grid, then interpolated: same intensity at same q
    qs = np.linspace(qmap.q_min, qmap.q_max, 1024)
    prof = sphere_intensity(qs, spec.radius_A, spec.polydispersity * spec.radius_A)
    return spec.amplitude * np.interp(qmap.q, qs, prof)


# -- cubic lattices ------------------------------------------------------------


def _allowed(symmetry: str, h: int, k: int, l: int) -> bool:
    if symmetry == "BCC":
        return (h + k + l) % 2 == 0
    parities = {h % 2, k % 2, l % 2}
    return len(parities) == 1


def lattice_peak_positions(symmetry: str, lattice_const_A: float, n_orders: int) -> list[float]:
    """Distinct allowed ``q_hkl = (2 pi / a) sqrt(h^2 + k^2 + l^2)``, ascending."""
    if symmetry not in ("BCC", "FCC"):
        raise ConfigError("lattice.symmetry", f"must be 'BCC' or 'FCC', got {symmetry!r}")
    out = []
    s = 0
    while len(out) < n_orders:
        s += 1
        hmax = math.isqrt(s)
        found = False
        for h in range(hmax + 1):
            for k in range(h + 1):
                rest = s - h * h - k * k
                if rest < 0:
                    break
                l = math.isqrt(rest)
                if l * l == rest and l <= k and _allowed(symmetry, h, k, l):
                    found = True
                    break
            if found:
                break
        if found:
            out.append(2.0 * math.pi / lattice_const_A * math.sqrt(s))
    return out


def _spot_envelope(phi: np.ndarray, texture: SpotTexture, rotation: float) -> np.ndarray:
    env = np.zeros_like(phi)
    two_s2 = 2.0 * texture.spot_sigma_phi**2
    for k in range(texture.n_spots):
        center = rotation + 2.0 * np.pi * k / texture.n_spots
        env += np.exp(-(_wrap(phi - center) ** 2) / two_s2)
    return env


def eval_lattice(spec: Lattice, qmap: QMap, rotation: float | None = None) -> np.ndarray:
    if rotation is None:
        rotation = spec.rotation_rad if spec.rotation_rad is not None else 0.0
    q = qmap.q
    two_s2 = 2.0 * spec.peak_sigma_q**2
    out = np.zeros_like(q)
    for qn in lattice_peak_positions(spec.symmetry, spec.lattice_const_A, spec.n_orders):
        out += math.exp(-spec.dw_factor * qn * qn) * np.exp(-((q - qn) ** 2) / two_s2)
    out *= spec.amplitude
    if not spec.powder:
        out *= _spot_envelope(qmap.phi, spec.texture, rotation)
    return out


# -- Debye summation -------------------------------------------------------------


def debye_intensity(points, q_values) -> np.ndarray:
    """Orientation-averaged ``sum_i sum_j sinc(q r_ij)`` for unit scatterers."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.atleast_1d(np.asarray(q_values, dtype=np.float64))
    n = len(pts)
    out = np.full(q.shape, float(n))
    if n < 2:
        return out
    r = pdist(pts)
    # bound the q x pair temporary to ~4M entries
    step = max(1, 4_000_000 // len(r))
    for i in range(0, len(q), step):
        out[i : i + step] += 2.0 * sinc(np.outer(q[i : i + step], r)).sum(axis=1)
    return out


def eval_debye(spec: DebyeCloud, qmap: QMap) -> np.ndarray:
    """Debye profile on ``q_samples`` points, scaled so ``I(0) = strength``."""
    qs = np.linspace(qmap.q_min, qmap.q_max, spec.q_samples)
    n = len(spec.points)
    prof = debye_intensity(spec.points, qs) / float(n * n)
    return spec.strength * np.maximum(np.interp(qmap.q, qs, prof), 0.0)


def eval_peaks(spec: PeakSet, qmap: QMap) -> np.ndarray:
    out = np.zeros_like(qmap.q)
    for p in spec.peaks:
        radial = np.exp(-((qmap.q - p.q) ** 2) / (2.0 * p.sigma_q**2))
        angular = np.exp(-(_wrap(qmap.phi - p.phi) ** 2) / (2.0 * p.sigma_phi**2))
        out += p.amplitude * radial * angular
    return out


def eval_module(spec, qmap: QMap, rotation: float | None = None) -> np.ndarray:
    if isinstance(spec, (Ring, Halo)):
        return eval_ring(spec, qmap)
    if isinstance(spec, (DiffuseLowQ, DiffuseHighQ)):
        return eval_diffuse(spec, qmap)
    if isinstance(spec, SphereFF):
        return eval_sphere(spec, qmap)
    if isinstance(spec, Lattice):
        return eval_lattice(spec, qmap, rotation)
    if isinstance(spec, DebyeCloud):
        return eval_debye(spec, qmap)
    if isinstance(spec, PeakSet):
        return eval_peaks(spec, qmap)
    raise TypeError(f"not a module spec: {spec!r}")
