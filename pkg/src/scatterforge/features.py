"""Patch descriptors, k-means codebook, and spatial-pyramid pooled image features.

Descriptors are raw patch pixels after ``log1p`` and per-patch
standardization.  Image features are computed on a fixed dense grid over 15
crops (3 scales x center + 4 corners) and averaged, so inference has no
randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, DimensionError
from .formats import read_codebook_file, write_codebook_file
from .rng import substream

__all__ = [
    "PatchSet",
    "Codebook",
    "FeatureConfig",
    "standardize",
    "extract_patches",
    "train_codebook",
    "assign",
    "hard_assign",
    "spm_pool",
    "crop_boxes",
    "image_feature",
    "image_features",
    "sample_training_patches",
    "write_codebook",
    "read_codebook",
    "SPM_CELLS",
]

SPM_LEVELS = 3
SPM_CELLS = sum(4**lvl for lvl in range(SPM_LEVELS))  # 21
STD_EPS = 1e-6


@dataclass
class PatchSet:
    patches: np.ndarray  # (n, p, p) standardized
    centers: np.ndarray  # (n, 2) row, col in source resolution
    source_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.patches)

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    def vectors(self) -> np.ndarray:
        return self.patches.reshape(len(self.patches), -1)

    @classmethod
    def concat(cls, sets) -> "PatchSet":
        sets = list(sets)
        return cls(
            np.concatenate([s.patches for s in sets]),
            np.concatenate([s.centers for s in sets]),
            [i for s in sets for i in s.source_ids],
        )


def standardize(raw: np.ndarray) -> np.ndarray:
    """log1p, then per-patch zero mean and unit(ish) std over the last two axes."""
    x = np.log1p(np.asarray(raw, dtype=np.float64))
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return (x - mean) / (std + STD_EPS)


def _standardize_logged(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=(-2, -1), keepdims=True, dtype=np.float64)
    std = x.std(axis=(-2, -1), keepdims=True, dtype=np.float64)
    return ((x - mean) / (std + STD_EPS)).astype(x.dtype)


def extract_patches(
    image: np.ndarray,
    count: int,
    patch_size: int = 32,
    rng: np.random.Generator | None = None,
    source_id: str = "",
) -> PatchSet:
    """``count`` patches at uniformly random top-left corners."""
    img = np.asarray(image)
    h, w = img.shape
    if h < patch_size or w < patch_size:
        raise DimensionError(f"image {h}x{w} smaller than patch size {patch_size}")
    if rng is None:
        rng = substream(0, "patches")
    rows = rng.integers(0, h - patch_size + 1, size=count)
    cols = rng.integers(0, w - patch_size + 1, size=count)
    win = sliding_window_view(img, (patch_size, patch_size))
    raw = win[rows, cols]
    centers = np.stack([rows + patch_size / 2.0, cols + patch_size / 2.0], axis=1)
    return PatchSet(standardize(raw), centers, [source_id] * count)


# -- k-means ----------------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray
    counts: np.ndarray | None = None
    objective: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("centroids must be a (K, d) array")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def encode(self, patches: np.ndarray) -> np.ndarray:
        return hard_assign(patches, self)


def _as_matrix(patches) -> np.ndarray:
    if isinstance(patches, PatchSet):
        return patches.vectors().astype(np.float64)
    x = np.asarray(patches, dtype=np.float64)
    return x.reshape(len(x), -1)


def _sqdist(x, c, xx=None):
    if xx is None:
        xx = np.einsum("ij,ij->i", x, x)
    cc = np.einsum("ij,ij->i", c, c)
    return xx[:, None] - 2.0 * (x @ c.T) + cc[None, :]


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[centers].copy()


def _point_cost(x, c, labels):
    diff = x - c[labels]
    return np.einsum("ij,ij->i", diff, diff)


def train_codebook(patches, k: int = 256, max_iters: int = 100, tol: float = 1e-4, seed: int = 0) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    A point only changes cluster when its exact squared distance strictly
    drops, and empty clusters are re-seeded at the currently worst-fit point,
    so the logged objective (mean squared distance) never increases.  Stops
    when no assignment changes, the relative decrease falls below ``tol``,
    or after ``max_iters`` updates.
    """
    x = _as_matrix(patches)
    n = len(x)
    if k < 1:
        raise ConfigError("k", "must be >= 1")
    if n < k:
        raise ConfigError("k", f"need at least k={k} patches, got {n}")
    rng = substream(seed, "kmeans")
    c = _kmeanspp(x, k, rng)
    xx = np.einsum("ij,ij->i", x, x)
    labels = np.argmin(_sqdist(x, c, xx), axis=1)
    cost = _point_cost(x, c, labels)
    objective = [float(cost.mean())]
    rows = np.arange(n)

    for _ in range(max_iters):
        onehot = sp.csr_matrix((np.ones(n), (labels, rows)), shape=(k, n))
        sizes = np.bincount(labels, minlength=k)
        sums = onehot @ x
        filled = sizes > 0
        c[filled] = sums[filled] / sizes[filled, None]
        cost = _point_cost(x, c, labels)
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(cost))
            c[j] = x[far]
            labels[far] = j
            cost[far] = 0.0

        cand = np.argmin(_sqdist(x, c, xx), axis=1)
        moved = np.flatnonzero(cand != labels)
        if moved.size:
            new_cost = _point_cost(x[moved], c, cand[moved])
            better = new_cost < cost[moved]
            moved = moved[better]
            labels[moved] = cand[moved]
            cost[moved] = new_cost[better]
        objective.append(float(cost.mean()))
        prev, cur = objective[-2], objective[-1]
        if moved.size == 0 and filled.all():
            break
        if prev > 0 and (prev - cur) / prev < tol:
            break
    counts = np.bincount(labels, minlength=k)
    return Codebook(c, counts, objective)


def hard_assign(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """One-hot rows at the nearest centroid; ties go to the lowest index."""
    v = np.asarray(vectors)
    v = v.reshape(len(v), -1)
    if v.shape[1] != codebook.dim:
        raise DimensionError(f"descriptor length {v.shape[1]} != codebook dim {codebook.dim}")
    c = codebook.centroids.astype(v.dtype, copy=False) if v.dtype == np.float32 else codebook.centroids
    idx = np.argmin(_sqdist(v, c), axis=1)
    out = np.zeros((len(v), codebook.k))
    out[np.arange(len(v)), idx] = 1.0
    return out


def assign(patch: np.ndarray, model, mode: str = "hard") -> np.ndarray:
    """Assignment vector of one standardized patch.

    ``hard`` needs a :class:`Codebook` and uses exact distances; ``soft`` needs
    an autoencoder model and returns its softmax bottleneck.
    """
    if mode == "hard":
        x = np.asarray(patch, dtype=np.float64).ravel()
        if x.size != model.dim:
            raise DimensionError(f"descriptor length {x.size} != codebook dim {model.dim}")
        d2 = ((model.centroids - x) ** 2).sum(axis=1)
        out = np.zeros(model.k)
        out[int(np.argmin(d2))] = 1.0
        return out
    if mode == "soft":
        p = np.asarray(patch)
        size = model.arch.patch_size
        if p.size != size * size:
            raise DimensionError(f"patch has {p.size} values, model expects {size}x{size}")
        return model.encode(p.reshape(1, size, size))[0]
    raise ConfigError("mode", f"unknown assignment mode {mode!r}")


class ArgmaxCodes:
    """Hard counts from a soft encoder: one-hot at the largest code entry (lowest index on ties)."""

    def __init__(self, model):
        self.model = model

    def encode(self, patches: np.ndarray) -> np.ndarray:
        s = np.asarray(self.model.encode(patches))
        out = np.zeros_like(s)
        out[np.arange(len(s)), np.argmax(s, axis=1)] = 1.0
        return out


def spm_pool(assignments: np.ndarray, centers: np.ndarray, crop_shape: tuple[int, int], levels: int = SPM_LEVELS):
    """Sum-pool assignment vectors over a 1x1, 2x2, 4x4, ... pyramid.

    ``centers`` are (row, col) relative to the crop.  Blocks are ordered by
    level, then row-major by cell; each level block is L1-normalized on its
    own (an all-zero block stays zero).
    """
    a = np.asarray(assignments, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    k = a.shape[1]
    h, w = crop_shape
    blocks = []
    for lvl in range(levels):
        g = 2**lvl
        r = np.minimum((centers[:, 0] * g / h).astype(int), g - 1)
        c = np.minimum((centers[:, 1] * g / w).astype(int), g - 1)
        cell = r * g + c
        onehot = sp.csr_matrix((np.ones(len(cell)), (cell, np.arange(len(cell)))), shape=(g * g, len(cell)))
        block = np.asarray(onehot @ a).ravel()
        total = block.sum()
        blocks.append(block / total if total > 0 else block)
    return np.concatenate(blocks)


# -- image features --------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    patch_size: int = 32
    scales: tuple = (1.0, 1.5, 2.0)
    crop_size: int | None = None  # default: 224 at 256 px, proportional otherwise
    stride: int | None = None  # default: patch_size // 2

    def crop_for(self, image_size: int) -> int:
        return self.crop_size if self.crop_size is not None else int(round(224 * image_size / 256))

    def stride_px(self) -> int:
        return self.stride if self.stride is not None else self.patch_size // 2


def _resize(img: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return img
    h, w = img.shape
    out_shape = (int(round(h * scale)), int(round(w * scale)))
    zoom = (out_shape[0] / h, out_shape[1] / w)
    return ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)


def crop_boxes(size: tuple[int, int], crop: int) -> list[tuple[int, int]]:
    """Top-left corners of the center and four corner crops."""
    h, w = size
    if crop > min(h, w):
        raise DimensionError(f"crop {crop} larger than resized image {h}x{w}")
    return [((h - crop) // 2, (w - crop) // 2), (0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]


def image_feature(image: np.ndarray, model, cfg: FeatureConfig | None = None, dtype=np.float32) -> np.ndarray:
    """Average of the 15 crop-level SPM vectors of one image.

    ``model`` is anything with ``encode(patches) -> (n, K)`` rows summing to
    one: a :class:`Codebook` (hard) or an autoencoder (soft).  The patch grid
    is anchored at each crop's corner; patches shared by several crops of a
    scale are encoded once.
    """
    cfg = cfg or FeatureConfig()
    p, stride = cfg.patch_size, cfg.stride_px()
    img = np.asarray(image, dtype=np.float64)
    crop = cfg.crop_for(min(img.shape))
    offs = np.arange(0, crop - p + 1, stride)
    rr, cc = np.meshgrid(offs, offs, indexing="ij")
    centers = np.stack([rr.ravel() + p / 2.0, cc.ravel() + p / 2.0], axis=1)
    acc = None
    n_crops = 0
    for s in cfg.scales:
        scaled = np.log1p(_resize(img, s)).astype(dtype)
        win = sliding_window_view(scaled, (p, p))
        boxes = crop_boxes(scaled.shape, crop)
        corners = np.concatenate([np.stack([rr.ravel() + t, cc.ravel() + l], axis=1) for t, l in boxes])
        uniq, inverse = np.unique(corners, axis=0, return_inverse=True)
        patches = _standardize_logged(win[uniq[:, 0], uniq[:, 1]])
        codes = np.asarray(model.encode(patches))[inverse.ravel()]
        per_crop = len(centers)
        for i in range(len(boxes)):
            vec = spm_pool(codes[i * per_crop:(i + 1) * per_crop], centers, (crop, crop))
            acc = vec if acc is None else acc + vec
            n_crops += 1
    return acc / n_crops


def image_features(images, model, cfg: FeatureConfig | None = None) -> np.ndarray:
    return np.stack([image_feature(img, model, cfg) for img in images])


def sample_training_patches(images, per_image: int, cfg: FeatureConfig | None = None, seed: int = 0, ids=None) -> PatchSet:
    """Random patches for codebook/autoencoder training, spread over all scales."""
    cfg = cfg or FeatureConfig()
    sets = []
    for n, img in enumerate(images):
        rng = substream(seed, "training-patches", n)
        scale_idx = rng.integers(len(cfg.scales), size=per_image)
        for si, s in enumerate(cfg.scales):
            cnt = int((scale_idx == si).sum())
            if cnt == 0:
                continue
            scaled = _resize(np.asarray(img, dtype=np.float64), s)
            ps = extract_patches(scaled, cnt, cfg.patch_size, rng, ids[n] if ids else str(n))
            ps.centers = ps.centers / s
            sets.append(ps)
    return PatchSet.concat(sets)


def write_codebook(path, codebook: Codebook):
    write_codebook_file(path, codebook.centroids)


def read_codebook(path) -> Codebook:
    return Codebook(read_codebook_file(path))
