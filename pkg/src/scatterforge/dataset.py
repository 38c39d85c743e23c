"""Recipe sampling, synthetic measurement runs, and dataset serialization.

A dataset directory looks like::

    DIR/config.json       resolved GenerationConfig
    DIR/runs.json         one run template per run (detector preset + sub-ranges)
    DIR/manifest.jsonl    one ManifestEntry per image, ordered by index
    DIR/images/img000000.xsim ...

Each run draws a 30%-wide sub-interval of every parameter range once, so
images inside a run resemble each other more than images across runs.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .formats import write_image
from .geometry import (
    CircularBeamstop,
    GapBand,
    LinearBeamstop,
    MaskSpec,
    WedgeBeamstop,
    build_qmap,
    preset_config,
    rasterize_mask,
)
from .rng import mix64, substream
from .simkit.kernels import (
    Anisotropy,
    DebyeCloud,
    DiffuseHighQ,
    DiffuseLowQ,
    Halo,
    Lattice,
    Peak,
    PeakSet,
    Ring,
    SphereFF,
    SpotTexture,
)
from .simkit.scene import NoiseSpec, SceneRecipe, compose_scene, corrupt_and_quantize
from .simkit.tags import AttributeSet, TagThresholds, derive_tags

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 64
RUN_RANGE_FRACTION = 0.3
MANIFEST_NAME = "manifest.jsonl"
RUNS_NAME = "runs.json"


@dataclass(frozen=True)
class ParamRange:
    low: float
    high: float
    scale: str = "linear"  # or "log"
    integer: bool = False

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise ConfigError("range.scale", f"must be 'linear' or 'log', got {self.scale!r}")
        if self.high < self.low:
            raise ConfigError("range", f"high {self.high} < low {self.low}")
        if self.scale == "log" and not (0 < self.low < self.high):
            raise ConfigError("range", "log ranges need 0 < low < high")

    def _bounds(self) -> tuple[float, float]:
        lo, hi = self.low, self.high + (1.0 if self.integer else 0.0)
        if self.scale == "log":
            return math.log(lo), math.log(hi)
        return lo, hi

    def _value(self, t: float):
        v = math.exp(t) if self.scale == "log" else t
        if self.integer:
            return int(min(max(math.floor(v), self.low), self.high))
        return v

    def narrowed(self, rng: np.random.Generator, fraction: float = RUN_RANGE_FRACTION) -> tuple[float, float]:
        """Random sub-interval of ``fraction`` width, in the range's own scale."""
        a, b = self._bounds()
        width = (b - a) * fraction
        start = rng.uniform(a, b - width) if b > a else a
        return (start, start + width)

    def sample(self, rng: np.random.Generator, bounds: tuple[float, float] | None = None):
        a, b = bounds if bounds is not None else self._bounds()
        return self._value(rng.uniform(a, b) if b > a else a)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _r(lo, hi, scale="linear", integer=False):
    return ParamRange(lo, hi, scale, integer)


# "frac" parameters are relative to the detector's q extent, "level" ones are
# peak intensities before exposure scaling.
DEFAULT_RANGES: dict[str, ParamRange] = {
    "beam.offset_frac": _r(-0.1, 0.1),
    "beam.off_distance_frac": _r(0.03, 0.4),
    "ring.q0_frac": _r(0.1, 0.7),
    "ring.sigma_frac": _r(0.004, 0.015, "log"),
    "ring.level": _r(0.5, 20.0, "log"),
    "ring.kappa": _r(0.7, 6.0, "log"),
    "ring.n_orders": _r(1, 4, integer=True),
    "ring.order_decay": _r(0.4, 1.0),
    "halo.q0_frac": _r(0.15, 0.6),
    "halo.breadth": _r(0.35, 0.7),
    "halo.level": _r(0.5, 10.0, "log"),
    "halo.kappa": _r(0.7, 6.0, "log"),
    "dlow.power": _r(2.0, 4.0),
    "dlow.floor_frac": _r(0.01, 0.03, "log"),
    "dlow.level": _r(0.5, 20.0, "log"),
    "dhigh.onset_frac": _r(0.35, 0.8),
    "dhigh.softness_frac": _r(0.03, 0.12, "log"),
    "dhigh.level": _r(0.5, 10.0, "log"),
    "sphere.qr_max": _r(8.0, 40.0),
    "sphere.polydispersity": _r(0.0, 0.3),
    "sphere.level": _r(0.5, 20.0, "log"),
    "lattice.q1_frac": _r(0.08, 0.3),
    "lattice.n_orders": _r(1, 8, integer=True),
    "lattice.sigma_frac": _r(0.004, 0.012, "log"),
    "lattice.dw_damp": _r(0.2, 1.0),
    "lattice.level": _r(0.5, 20.0, "log"),
    "lattice.n_spots": _r(2, 24, integer=True),
    "lattice.spot_sigma_phi": _r(0.03, 0.12, "log"),
    "debye.n_points": _r(10, 60, integer=True),
    "debye.qr_max": _r(5.0, 30.0),
    "debye.level": _r(0.5, 10.0, "log"),
    "peaks.count": _r(1, 6, integer=True),
    "peaks.q_frac": _r(0.1, 0.9),
    "peaks.sigma_frac": _r(0.005, 0.02, "log"),
    "peaks.sigma_phi": _r(0.03, 0.2, "log"),
    "peaks.level": _r(0.5, 20.0, "log"),
    "noise.background": _r(0.3, 200.0, "log"),
    "noise.read_sigma": _r(0.0, 4.0),
    "noise.exposure": _r(2.0, 300.0, "log"),
    "mask.circ_radius_frac": _r(0.03, 0.1),
    "mask.linear_width_frac": _r(0.02, 0.06),
    "mask.wedge_half_angle": _r(0.15, 0.6),
    "mask.wedge_radius_frac": _r(0.3, 0.8),
    "mask.gap_count": _r(1, 2, integer=True),
    "mask.gap_width_frac": _r(0.01, 0.03),
}

DEFAULT_MODULE_PROBS = {
    "Ring": 0.35,
    "Halo": 0.25,
    "DiffuseLowQ": 0.35,
    "DiffuseHighQ": 0.2,
    "SphereFF": 0.12,
    "Lattice": 0.35,
    "DebyeCloud": 0.1,
    "PeakSet": 0.15,
}

DEFAULT_EVENT_PROBS = {
    "anisotropy": 0.4,
    "beam_off": 0.12,
    "beamstop.Linear": 0.22,
    "beamstop.Circular": 0.22,
    "beamstop.Wedge": 0.22,
    "gaps": 0.25,
    "shot_noise": 0.9,
    "lattice.fcc": 0.5,
    "lattice.spots": 0.35,
    "detector.waxs": 0.5,
}


@dataclass
class GenerationConfig:
    master_seed: int = 0
    image_count: int = 100
    image_size: int = 256
    run_count: int = 13
    module_probs: dict = field(default_factory=dict)
    event_probs: dict = field(default_factory=dict)
    ranges: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        self.module_probs = {**DEFAULT_MODULE_PROBS, **self.module_probs}
        self.event_probs = {**DEFAULT_EVENT_PROBS, **self.event_probs}
        merged = dict(DEFAULT_RANGES)
        for name, r in self.ranges.items():
            merged[name] = r if isinstance(r, ParamRange) else ParamRange(**r)
        self.ranges = merged
        self.validate()

    def validate(self):
        if not (1 <= self.run_count <= self.image_count):
            raise ConfigError("run_count", "need 1 <= run_count <= image_count")
        if self.image_size < 32:
            raise ConfigError("image_size", "must be >= 32")
        for group in ("module_probs", "event_probs"):
            for k, p in getattr(self, group).items():
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"{group}.{k}", f"probability {p} outside [0, 1]")
        unknown = set(self.module_probs) - set(DEFAULT_MODULE_PROBS)
        if unknown:
            raise ConfigError("module_probs", f"unknown module variants {sorted(unknown)}")
        unknown = set(self.ranges) - set(DEFAULT_RANGES)
        if unknown:
            raise ConfigError("ranges", f"unknown parameters {sorted(unknown)}")
        bs = sum(self.event_probs[f"beamstop.{k}"] for k in ("Linear", "Circular", "Wedge"))
        if bs > 1.0 + 1e-12:
            raise ConfigError("event_probs", "beamstop probabilities sum above 1")
        self.tag_thresholds  # validates threshold overrides

    @property
    def tag_thresholds(self) -> TagThresholds:
        return TagThresholds.from_dict(self.thresholds)

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "image_count": self.image_count,
            "image_size": self.image_size,
            "run_count": self.run_count,
            "module_probs": dict(self.module_probs),
            "event_probs": dict(self.event_probs),
            "ranges": {k: v.to_dict() for k, v in sorted(self.ranges.items())},
            "thresholds": dict(self.thresholds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown configuration key")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "GenerationConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None


# -- run templates ------------------------------------------------------------


@dataclass(frozen=True)
class RunTemplate:
    run_id: int
    detector_preset: str
    bounds: dict  # name -> (a, b) in the range's sampling scale

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "detector_preset": self.detector_preset,
            "bounds": {k: list(v) for k, v in sorted(self.bounds.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTemplate":
        return cls(d["run_id"], d["detector_preset"], {k: tuple(v) for k, v in d["bounds"].items()})


def make_run_template(cfg: GenerationConfig, run_id: int) -> RunTemplate:
    rng = substream(cfg.master_seed, "run-template", run_id)
    preset = "waxs" if rng.random() < cfg.event_probs["detector.waxs"] else "saxs"
    bounds = {name: cfg.ranges[name].narrowed(rng) for name in sorted(cfg.ranges)}
    return RunTemplate(run_id, preset, bounds)


def full_template(cfg: GenerationConfig, preset: str = "saxs") -> RunTemplate:
    """Template spanning the full configured ranges (no run narrowing)."""
    return RunTemplate(-1, preset, {n: r._bounds() for n, r in cfg.ranges.items()})


# -- recipe sampling ------------------------------------------------------------


class _Draw:
    def __init__(self, cfg: GenerationConfig, template: RunTemplate, rng: np.random.Generator):
        self.cfg, self.template, self.rng = cfg, template, rng

    def __call__(self, name: str):
        return self.cfg.ranges[name].sample(self.rng, self.template.bounds.get(name))

    def event(self, name: str) -> bool:
        return self.rng.random() < self.cfg.event_probs[name]


def _sample_detector(draw: _Draw, size: int, preset: str):
    rng = draw.rng
    cx = size / 2.0 + draw("beam.offset_frac") * size
    cy = size / 2.0 + draw("beam.offset_frac") * size
    if draw.event("beam_off"):
        side = int(rng.integers(4))
        d = draw("beam.off_distance_frac") * size
        if side == 0:
            cx = -d
        elif side == 1:
            cx = size + d
        elif side == 2:
            cy = -d
        else:
            cy = size + d
    return preset_config(preset, size, (cx, cy))


def _sample_mask(draw: _Draw, size: int) -> MaskSpec:
    rng = draw.rng
    u = rng.random()
    p = draw.cfg.event_probs
    beamstop = None
    edges = np.cumsum([p["beamstop.Linear"], p["beamstop.Circular"], p["beamstop.Wedge"]])
    if u < edges[0]:
        beamstop = LinearBeamstop(draw("mask.linear_width_frac") * size, rng.uniform(-math.pi, math.pi))
    elif u < edges[1]:
        beamstop = CircularBeamstop(draw("mask.circ_radius_frac") * size)
    elif u < edges[2]:
        beamstop = WedgeBeamstop(
            draw("mask.wedge_half_angle"), rng.uniform(-math.pi, math.pi), draw("mask.wedge_radius_frac") * size
        )
    gaps = []
    if draw.event("gaps"):
        for _ in range(draw("mask.gap_count")):
            width = max(1, int(round(draw("mask.gap_width_frac") * size)))
            start = int(rng.integers(0, size - width))
            gaps.append(GapBand(start, width, "rows" if rng.random() < 0.5 else "cols"))
    return MaskSpec(beamstop, tuple(gaps))


def _aniso(draw: _Draw, kappa_name: str):
    if draw.event("anisotropy"):
        return Anisotropy(draw(kappa_name), draw.rng.uniform(-math.pi / 2, math.pi / 2))
    return None


def _sample_ring(draw: _Draw, q_lo: float, q_hi: float) -> Ring:
    return Ring(
        q0=q_lo + draw("ring.q0_frac") * (q_hi - q_lo),
        sigma_q=draw("ring.sigma_frac") * q_hi,
        amplitude=draw("ring.level"),
        anisotropy=_aniso(draw, "ring.kappa"),
        n_orders=draw("ring.n_orders"),
        order_decay=draw("ring.order_decay"),
    )


def _sample_modules(draw: _Draw, q_lo: float, q_hi: float) -> list:
    rng = draw.rng
    probs = draw.cfg.module_probs
    span = q_hi - q_lo
    out = []
    if rng.random() < probs["Ring"]:
        out.append(_sample_ring(draw, q_lo, q_hi))
    if rng.random() < probs["Halo"]:
        q0 = q_lo + draw("halo.q0_frac") * span
        out.append(Halo(q0, draw("halo.breadth") * q0, draw("halo.level"), _aniso(draw, "halo.kappa")))
    if rng.random() < probs["DiffuseLowQ"]:
        p = draw("dlow.power")
        q_floor = draw("dlow.floor_frac") * q_hi
        q_ref = max(0.05 * q_hi, q_floor)
        out.append(DiffuseLowQ(draw("dlow.level") * q_ref**p, p, q_floor))
    if rng.random() < probs["DiffuseHighQ"]:
        out.append(
            DiffuseHighQ(
                draw("dhigh.level"), q_lo + draw("dhigh.onset_frac") * span, draw("dhigh.softness_frac") * q_hi
            )
        )
    if rng.random() < probs["SphereFF"]:
        out.append(SphereFF(draw("sphere.qr_max") / q_hi, draw("sphere.level"), draw("sphere.polydispersity")))
    if rng.random() < probs["Lattice"]:
        symmetry = "FCC" if draw.event("lattice.fcc") else "BCC"
        first = math.sqrt(2.0 if symmetry == "BCC" else 3.0)
        q1 = q_lo + draw("lattice.q1_frac") * span
        texture = "powder"
        if draw.event("lattice.spots"):
            texture = SpotTexture(draw("lattice.n_spots"), draw("lattice.spot_sigma_phi"))
        out.append(
            Lattice(
                symmetry=symmetry,
                lattice_const_A=2.0 * math.pi * first / q1,
                peak_sigma_q=draw("lattice.sigma_frac") * q_hi,
                n_orders=draw("lattice.n_orders"),
                texture=texture,
                dw_factor=-math.log(draw("lattice.dw_damp")) / q_hi**2,
                amplitude=draw("lattice.level"),
                rotation_rad=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
        )
    if rng.random() < probs["DebyeCloud"]:
        n = draw("debye.n_points")
        radius = draw("debye.qr_max") / q_hi
        pts = rng.normal(size=(n, 3))
        pts *= (radius * rng.random(n) ** (1.0 / 3.0) / np.linalg.norm(pts, axis=1))[:, None]
        out.append(DebyeCloud(tuple(map(tuple, pts.tolist())), draw("debye.level")))
    if rng.random() < probs["PeakSet"]:
        peaks = [
            Peak(
                q=q_lo + draw("peaks.q_frac") * span,
                phi=float(rng.uniform(-math.pi, math.pi)),
                sigma_q=draw("peaks.sigma_frac") * q_hi,
                sigma_phi=draw("peaks.sigma_phi"),
                amplitude=draw("peaks.level"),
            )
            for _ in range(draw("peaks.count"))
        ]
        out.append(PeakSet(tuple(peaks)))
    return out


def _sample_noise(draw: _Draw) -> NoiseSpec:
    return NoiseSpec(
        background_level=draw("noise.background"),
        read_sigma=draw("noise.read_sigma"),
        shot_noise=draw.event("shot_noise"),
        exposure_scale=draw("noise.exposure"),
    )


@dataclass
class SampledScene:
    recipe: SceneRecipe
    tags: AttributeSet
    intensity: np.ndarray
    attempts: int
    forced_ring: bool = False


def sample_scene(cfg: GenerationConfig, template: RunTemplate, image_seed: int) -> SampledScene:
    """Draw a recipe, rejecting those with no module or no canonical tag.

    After ``MAX_ATTEMPTS`` rejections the last attempt's detector, mask and
    noise are kept and a single Ring module is forced in.
    """
    th = cfg.tag_thresholds
    size = cfg.image_size
    for attempt in range(MAX_ATTEMPTS):
        draw = _Draw(cfg, template, substream(image_seed, "recipe", attempt))
        detector = _sample_detector(draw, size, template.detector_preset)
        qmap = build_qmap(detector)
        mask = _sample_mask(draw, size)
        noise = _sample_noise(draw)
        modules = _sample_modules(draw, qmap.q_min, qmap.q_max)
        if not modules:
            continue
        recipe = SceneRecipe(tuple(modules), noise, detector, mask, image_seed)
        intensity = compose_scene(recipe, qmap)
        tags = derive_tags(recipe, th, intensity, qmap)
        if tags.canonical:
            return SampledScene(recipe, tags, intensity, attempt + 1)
    # ``draw``/``detector``/``qmap`` are those of the final attempt
    ring = _sample_ring(draw, qmap.q_min, qmap.q_max)
    recipe = SceneRecipe((ring,), noise, detector, mask, image_seed)
    intensity = compose_scene(recipe, qmap)
    tags = derive_tags(recipe, th, intensity, qmap)
    if not tags.canonical:
        raise GenerationError(f"seed {image_seed}: {MAX_ATTEMPTS} empty-tag rejections and fallback failed")
    return SampledScene(recipe, tags, intensity, MAX_ATTEMPTS, forced_ring=True)


def sample_recipe(cfg: GenerationConfig, run_template: RunTemplate, image_seed: int) -> SceneRecipe:
    return sample_scene(cfg, run_template, image_seed).recipe


# -- manifest -------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    path: str
    run_id: int
    seed: int
    attributes: list[str]
    extended_attributes: list[str] = field(default_factory=list)
    recipe_digest: str = ""
    extra: dict = field(default_factory=dict)

    _KEYS = ("id", "path", "run_id", "seed", "attributes", "extended_attributes", "recipe_digest")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self._KEYS}
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        missing = [k for k in ("id", "path", "run_id", "seed", "attributes") if k not in d]
        if missing:
            raise KeyError(", ".join(missing))
        extra = {k: v for k, v in d.items() if k not in cls._KEYS}
        return cls(
            id=str(d["id"]),
            path=str(d["path"]),
            run_id=int(d["run_id"]),
            seed=int(d["seed"]),
            attributes=list(d["attributes"]),
            extended_attributes=list(d.get("extended_attributes", [])),
            recipe_digest=str(d.get("recipe_digest", "")),
            extra=extra,
        )


def write_manifest(path, entries) -> None:
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate manifest ids", path=path)
    lines = [json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for e in entries]
    tmp = Path(str(path) + ".part")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(path)


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed manifest line {lineno}: {exc}", offset=lineno, path=path) from None
    return out


def run_assignment(image_count: int, run_count: int) -> list[int]:
    """Contiguous, near-equal blocks of images per run."""
    return [i * run_count // image_count for i in range(image_count)]


def _render_one(cfg: GenerationConfig, template: RunTemplate, index: int, root: Path) -> ManifestEntry:
    seed = mix64(cfg.master_seed, index)
    scene = sample_scene(cfg, template, seed)
    mask = rasterize_mask(scene.recipe.detector, scene.recipe.mask)
    image = corrupt_and_quantize(scene.intensity, scene.recipe.noise, mask, substream(seed, "noise"))
    image_id = f"img{index:06d}"
    rel = f"images/{image_id}.xsim"
    try:
        write_image(root / rel, image)
    except OSError as exc:
        raise GenerationError(f"cannot write {root / rel}: {exc}") from exc
    return ManifestEntry(
        id=image_id,
        path=rel,
        run_id=template.run_id,
        seed=seed,
        attributes=scene.tags.sorted_canonical(),
        extended_attributes=list(scene.tags.extended),
        recipe_digest=scene.recipe.digest(),
    )


def generate_dataset(cfg: GenerationConfig, out_dir=None, workers: int = 1) -> list[ManifestEntry]:
    """Render ``cfg.image_count`` images plus manifest, run table and config.

    Parallel rendering changes nothing in the output: every image has its own
    seed and the manifest is assembled in index order.  On failure the
    partially written ``images/`` directory and manifest are removed.
    """
    root = Path(out_dir if out_dir is not None else cfg.output_dir or ".")
    (root / "images").mkdir(parents=True, exist_ok=True)
    templates = [make_run_template(cfg, r) for r in range(cfg.run_count)]
    runs = run_assignment(cfg.image_count, cfg.run_count)
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                entries = list(
                    pool.map(lambda i: _render_one(cfg, templates[runs[i]], i, root), range(cfg.image_count))
                )
        else:
            entries = [_render_one(cfg, templates[runs[i]], i, root) for i in range(cfg.image_count)]
        (root / RUNS_NAME).write_text(
            json.dumps([t.to_dict() for t in templates], indent=1, sort_keys=True), encoding="utf-8"
        )
        (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
        write_manifest(root / MANIFEST_NAME, entries)
    except BaseException:
        shutil.rmtree(root / "images", ignore_errors=True)
        (root / MANIFEST_NAME).unlink(missing_ok=True)
        raise
    log.info("wrote %d images to %s", len(entries), root)
    return entries


def load_run_templates(root) -> list[RunTemplate]:
    with open(Path(root) / RUNS_NAME, encoding="utf-8") as fh:
        return [RunTemplate.from_dict(d) for d in json.load(fh)]
