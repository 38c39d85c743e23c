"""Convolutional patch autoencoder with a softmax bottleneck.

Encoder::

    conv5x5(c1) -> relu -> avgpool2 -> conv5x5(c2) -> relu -> avgpool2
    -> dense(B) -> softmax

Decoder::

    dense(c2 * (P/4)^2) -> relu -> upsample2 -> conv5x5(c1) -> relu
    -> upsample2 -> conv5x5(1), linear output

The softmax output is a soft cluster membership over ``B`` clusters and is
used in place of a hard codebook assignment for spatial-pyramid features.
Backpropagation is written out by hand; :func:`numeric_gradient` is the
finite-difference reference used to check it.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .errors import ConfigError, DimensionError, TrainingError
from .formats import BinaryReader, atomic_write
from .rng import substream

log = logging.getLogger(__name__)

XAEM_MAGIC = b"XAEM"
XAEM_VERSION = 1

PARAM_ORDER = (
    "enc_conv1_w",
    "enc_conv1_b",
    "enc_conv2_w",
    "enc_conv2_b",
    "enc_fc_w",
    "enc_fc_b",
    "dec_fc_w",
    "dec_fc_b",
    "dec_conv1_w",
    "dec_conv1_b",
    "dec_conv2_w",
    "dec_conv2_b",
)


@dataclass(frozen=True)
class AEArchitecture:
    c1: int = 16
    c2: int = 32
    bottleneck: int = 64
    patch_size: int = 32
    kernel: int = 5

    def __post_init__(self):
        for name in ("c1", "c2", "bottleneck", "patch_size", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"arch.{name}", "must be >= 1")
        if self.patch_size % 4:
            raise ConfigError("arch.patch_size", "must be divisible by 4")
        if self.kernel % 2 == 0:
            raise ConfigError("arch.kernel", "must be odd")

    @property
    def code_side(self) -> int:
        return self.patch_size // 4

    @property
    def flat(self) -> int:
        return self.c2 * self.code_side**2

    def shapes(self) -> dict:
        k = self.kernel
        return {
            "enc_conv1_w": (self.c1, 1, k, k),
            "enc_conv1_b": (self.c1,),
            "enc_conv2_w": (self.c2, self.c1, k, k),
            "enc_conv2_b": (self.c2,),
            "enc_fc_w": (self.bottleneck, self.flat),
            "enc_fc_b": (self.bottleneck,),
            "dec_fc_w": (self.flat, self.bottleneck),
            "dec_fc_b": (self.flat,),
            "dec_conv1_w": (self.c1, self.c2, k, k),
            "dec_conv1_b": (self.c1,),
            "dec_conv2_w": (1, self.c1, k, k),
            "dec_conv2_b": (1,),
        }


@dataclass
class AEModel:
    arch: AEArchitecture
    params: dict
    loss_log: list = field(default_factory=list)

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(self.params) != set(shapes):
            raise ConfigError("params", f"expected tensors {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return self.params["enc_conv1_w"].dtype

    def copy(self) -> "AEModel":
        return AEModel(self.arch, {k: v.copy() for k, v in self.params.items()}, list(self.loss_log))

    def encode(self, patches: np.ndarray) -> np.ndarray:
        """Softmax bottleneck for a stack of standardized patches."""
        return forward(self, patches)["bottleneck"]


def init_model(arch: AEArchitecture | None = None, seed: int = 0, dtype=np.float64,
               zero_bottleneck: bool = False) -> AEModel:
    """He-normal weights, zero biases; drawn from the ``"ae-init"`` substream."""
    arch = arch or AEArchitecture()
    rng = substream(seed, "ae-init")
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 1.0 if name in ("enc_fc_w", "dec_conv2_w") else 2.0
        params[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
    if zero_bottleneck:
        params["enc_fc_w"][:] = 0.0
    return AEModel(arch, params)


# -- layers ---------------------------------------------------------------------------
# Activations are channels-last (N, H, W, C); weights keep the (out, in, k, k)
# layout.  Dense layers flatten in (h, w, c) order.


@numba.njit(cache=True)
def _scatter_single(g, wk, wp, dxf):
    # input gradient of a single-output-channel layer on the flattened padded grid
    k = wk.shape[0]
    c = wk.shape[2]
    for p in range(g.shape[0]):
        gv = g[p]
        if gv == 0.0:
            continue
        for i in range(k):
            for j in range(k):
                q = p + i * wp + j
                for ch in range(c):
                    dxf[q, ch] += wk[i, j, ch] * gv


def _conv(x, w, b):
    """Same-padded convolution; returns the output and a cache for the backward pass.

    Single-channel inputs use an explicit im2col buffer.  Otherwise the padded
    input is flattened to (pixels, channels) and each kernel tap becomes one
    matrix product against a shifted contiguous view; outputs land on the
    padded grid and the valid block is sliced out.
    """
    n, h, wd, c = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    hp, wp = h + 2 * pad, wd + 2 * pad
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    if c == 1:
        xp = np.zeros((n, hp, wp), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + wd] = x[..., 0]
        cols = np.empty((n, h, wd, k, k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j] = xp[:, i : i + h, j : j + wd]
        cols = cols.reshape(n * h * wd, k * k)
        out = (cols @ wt.reshape(k * k, o)).reshape(n, h, wd, o)
        return out + b, ("cols", cols)
    L = n * hp * wp
    xf = np.zeros((L + (k - 1) * (wp + 1), c), dtype=x.dtype)
    xf[:L].reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((L, o), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            out += xf[off : off + L] @ wt[i, j]
    out = out.reshape(n, hp, wp, o)[:, :h, :wd]
    return out + b, ("shift", xf)


def _conv_backward(dout, cache, w, need_dx=True):
    n, h, wd, o = dout.shape
    _, c, k, _ = w.shape
    pad = k // 2
    hp, wp = h + 2 * pad, wd + 2 * pad
    db = dout.sum(axis=(0, 1, 2))
    kind, buf = cache
    if kind == "cols":
        dwt = buf.T @ dout.reshape(-1, o)
        return dwt.reshape(k, k, 1, o).transpose(3, 2, 0, 1), db, None
    L = n * hp * wp
    gf = np.zeros((n, hp, wp, o), dtype=dout.dtype)
    gf[:, :h, :wd] = dout
    gf = gf.reshape(L, o)
    wtt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    dwt = np.empty((k, k, c, o), dtype=dout.dtype)
    dxf = np.zeros_like(buf) if need_dx else None
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            dwt[i, j] = buf[off : off + L].T @ gf
            if need_dx and o > 1:
                dxf[off : off + L] += gf @ wtt[i, j]
    if need_dx and o == 1:
        _scatter_single(gf[:, 0], np.ascontiguousarray(wtt[:, :, 0, :]), wp, dxf)
    dx = None
    if need_dx:
        dx = dxf[:L].reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + wd]
    return dwt.transpose(3, 2, 0, 1), db, dx


def _pool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _fold(dx):
    """Adjoint of nearest-neighbour upsampling: sum each 2x2 block."""
    n, h, w, c = dx.shape
    return dx.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(model: AEModel, patches) -> np.ndarray:
    p = model.arch.patch_size
    x = np.asarray(patches, dtype=model.dtype)
    if x.size % (p * p):
        raise DimensionError(f"patch data of size {x.size} is not a stack of {p}x{p} patches")
    if x.ndim == 2 and x.shape == (p, p):
        x = x[None]
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.shape[-2:] != (p, p):
        raise DimensionError(f"expected {p}x{p} patches, got trailing shape {x.shape[-2:]}")
    return x.reshape(-1, p, p, 1)


def _decode(model: AEModel, s, cache=None):
    P = model.params
    a = model.arch
    d = s @ P["dec_fc_w"].T + P["dec_fc_b"]
    hd = np.maximum(d, 0.0).reshape(len(s), a.code_side, a.code_side, a.c2)
    a5, cols5 = _conv(_upsample(hd), P["dec_conv1_w"], P["dec_conv1_b"])
    out, cols6 = _conv(_upsample(np.maximum(a5, 0.0)), P["dec_conv2_w"], P["dec_conv2_b"])
    if cache is not None:
        cache.update(d=d, a5=a5, cols5=cols5, cols6=cols6)
    return out


def _forward(model: AEModel, x, cache=None):
    P = model.params
    a1, cols1 = _conv(x, P["enc_conv1_w"], P["enc_conv1_b"])
    p1 = _pool(np.maximum(a1, 0.0))
    a2, cols2 = _conv(p1, P["enc_conv2_w"], P["enc_conv2_b"])
    f = _pool(np.maximum(a2, 0.0)).reshape(len(x), -1)
    s = _softmax(f @ P["enc_fc_w"].T + P["enc_fc_b"])
    out = _decode(model, s, cache)
    if cache is not None:
        cache.update(a1=a1, cols1=cols1, a2=a2, cols2=cols2, f=f, s=s)
    return s, out


def forward(model: AEModel, patches) -> dict:
    """Bottleneck (N, B) and reconstruction (N, P, P) for standardized patches."""
    x = _as_batch(model, patches)
    s, out = _forward(model, x)
    return {"bottleneck": s, "reconstruction": out[..., 0]}


def loss_and_gradient(model: AEModel, patches) -> tuple[float, dict]:
    """Mean over the batch of per-patch mean squared reconstruction error, and its gradient."""
    x = _as_batch(model, patches)
    if len(x) == 0:
        raise DimensionError("empty batch")
    P = model.params
    c: dict = {}
    s, out = _forward(model, x, c)
    diff = out - x
    loss = float(np.mean(diff * diff))
    g = {}

    dout = (2.0 / diff.size) * diff
    g["dec_conv2_w"], g["dec_conv2_b"], du2 = _conv_backward(dout, c["cols6"], P["dec_conv2_w"])
    da5 = _fold(du2) * (c["a5"] > 0)
    g["dec_conv1_w"], g["dec_conv1_b"], du1 = _conv_backward(da5, c["cols5"], P["dec_conv1_w"])
    dd = _fold(du1).reshape(len(x), -1) * (c["d"] > 0)
    g["dec_fc_w"] = dd.T @ s
    g["dec_fc_b"] = dd.sum(axis=0)
    ds = dd @ P["dec_fc_w"]
    dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
    g["enc_fc_w"] = dz.T @ c["f"]
    g["enc_fc_b"] = dz.sum(axis=0)
    n, h2, w2, c2 = c["a2"].shape
    dp2 = (dz @ P["enc_fc_w"]).reshape(n, h2 // 2, w2 // 2, c2)
    da2 = _upsample(dp2) * 0.25 * (c["a2"] > 0)
    g["enc_conv2_w"], g["enc_conv2_b"], dp1 = _conv_backward(da2, c["cols2"], P["enc_conv2_w"])
    da1 = _upsample(dp1) * 0.25 * (c["a1"] > 0)
    g["enc_conv1_w"], g["enc_conv1_b"], _ = _conv_backward(da1, c["cols1"], P["enc_conv1_w"], need_dx=False)
    return loss, {k: g[k].astype(model.dtype, copy=False) for k in PARAM_ORDER}


def batch_loss(model: AEModel, patches) -> float:
    x = _as_batch(model, patches)
    _, out = _forward(model, x)
    return float(np.mean((out - x) ** 2))


def numeric_gradient(model: AEModel, patches, h: float = 1e-5) -> dict:
    """Central finite differences of :func:`batch_loss` for every parameter."""
    grads = {}
    for name in PARAM_ORDER:
        p = model.params[name]
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(model, patches)
            flat[i] = orig - h
            down = batch_loss(model, patches)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relu_margin(model: AEModel, patches) -> float:
    """Smallest |pre-activation| over all ReLU units for this batch.

    A finite-difference check is only meaningful when no unit crosses zero
    within the probe step, i.e. when this margin dominates the step's effect.
    """
    c: dict = {}
    _forward(model, _as_batch(model, patches), c)
    return float(min(np.abs(c[k]).min() for k in ("a1", "a2", "d", "a5")))


class TensorCheck(NamedTuple):
    rel: float  # max relative error over coordinates whose absolute error exceeds atol
    abs: float  # max absolute error
    rel_strict: float  # max relative error over every coordinate with a nonzero gradient


def gradient_check(model: AEModel, patches, h: float = 1e-5, atol: float = 1e-8) -> dict:
    """Compare backprop with central differences, tensor by tensor.

    A coordinate whose absolute error is at most ``atol`` counts as matching
    (scored 0); this covers near-zero gradients, where the finite-difference
    roundoff dominates any relative measure.
    """
    _, analytic = loss_and_gradient(model, patches)
    numeric = numeric_gradient(model, patches, h)
    report = {}
    for name in PARAM_ORDER:
        a, n = analytic[name].astype(np.float64), numeric[name]
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel_all = np.where(scale > 0, err / np.maximum(scale, 1e-300), 0.0)
        rel = np.where(err <= atol, 0.0, rel_all)
        report[name] = TensorCheck(float(rel.max()), float(err.max()), float(rel_all.max()))
    return report


# -- training -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32
    decay: float = 0.5
    patience: int = 10
    plateau_tol: float = 1e-4
    seed: int = 0


def train(model: AEModel, patches, cfg: TrainConfig | None = None, callback=None) -> AEModel:
    """Mini-batch SGD with momentum; halves the step after ``patience`` flat epochs.

    Returns a new model; ``loss_log`` holds the mean training loss of each
    epoch.  Batch order comes from the ``"ae-train"`` substream of
    ``cfg.seed``, so two runs with the same seed are identical.
    """
    cfg = cfg or TrainConfig()
    model = model.copy()
    data = _as_batch(model, patches.patches if hasattr(patches, "patches") else patches)
    n = len(data)
    if n == 0:
        raise DimensionError("no training patches")
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    lr = cfg.lr
    best = np.inf
    flat_epochs = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "ae-train", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_gradient(model, data[idx])
            if not np.isfinite(loss):
                raise TrainingError("autoencoder loss diverged", epoch)
            total += loss * len(idx)
            for k in PARAM_ORDER:
                v = velocity[k]
                v *= cfg.momentum
                v -= lr * grad[k]
                model.params[k] += v
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingError("autoencoder loss diverged", epoch)
        model.loss_log.append(epoch_loss)
        if epoch_loss < best * (1.0 - cfg.plateau_tol):
            best = epoch_loss
            flat_epochs = 0
        else:
            flat_epochs += 1
            if flat_epochs >= cfg.patience:
                lr *= cfg.decay
                flat_epochs = 0
        log.debug("epoch %d loss %.5f lr %.2e", epoch, epoch_loss, lr)
        if callback is not None:
            callback(epoch, epoch_loss, lr)
    return model


def reconstruction_errors(model: AEModel, patches, batch_size: int = 256) -> np.ndarray:
    data = _as_batch(model, patches.patches if hasattr(patches, "patches") else patches)
    errs = []
    for start in range(0, len(data), batch_size):
        x = data[start : start + batch_size]
        _, out = _forward(model, x)
        errs.append(((out - x) ** 2).mean(axis=(1, 2, 3)))
    return np.concatenate(errs)


@dataclass(frozen=True)
class ReconstructionStats:
    min: float
    max: float
    mean: float

    def __str__(self):
        return (f"minimum reconstruction error {self.min:.4f}, maximum {self.max:.4f}, "
                f"average {self.mean:.4f}")


def reconstruction_stats(model: AEModel, patches) -> ReconstructionStats:
    e = reconstruction_errors(model, patches)
    return ReconstructionStats(float(e.min()), float(e.max()), float(e.mean()))


def probe_cluster(model: AEModel, j: int, rescale: bool = False) -> np.ndarray:
    """Decode the one-hot code ``e_j``.

    With ``rescale`` the grid is mapped affinely onto [0, 65535] (uint16) for
    viewing; otherwise raw decoder output is returned.
    """
    b = model.arch.bottleneck
    if not 0 <= j < b:
        raise IndexError(f"cluster index {j} outside [0, {b})")
    code = np.zeros((1, b), dtype=model.dtype)
    code[0, j] = 1.0
    grid = _decode(model, code)[0, :, :, 0]
    if not rescale:
        return grid
    lo, hi = float(grid.min()), float(grid.max())
    scaled = (grid - lo) / (hi - lo) * 65535.0 if hi > lo else np.zeros_like(grid)
    return np.rint(scaled).astype(np.uint16)


# -- XAEM -------------------------------------------------------------------------------
# b"XAEM" | u8 version | u32 c1, c2, B, patch, kernel | u32 n_tensors
# | per tensor: u8 name_len, name, u8 ndim, u32 dims[ndim] | f64 data in PARAM_ORDER


def write_model(path, model: AEModel):
    a = model.arch
    head = [XAEM_MAGIC, struct.pack("<B5II", XAEM_VERSION, a.c1, a.c2, a.bottleneck, a.patch_size, a.kernel,
                                    len(PARAM_ORDER))]
    body = []
    for name in PARAM_ORDER:
        t = model.params[name]
        enc = name.encode("ascii")
        head.append(struct.pack(f"<B{len(enc)}sB{t.ndim}I", len(enc), enc, t.ndim, *t.shape))
        body.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    atomic_write(path, b"".join(head + body))


def read_model(path, dtype=np.float64) -> AEModel:
    with open(path, "rb") as fh:
        r = BinaryReader(fh.read(), path)
    r.magic(XAEM_MAGIC)
    r.version(XAEM_VERSION)
    c1, c2, b, patch, kernel, n_tensors = r.unpack("5II")
    arch = AEArchitecture(c1, c2, b, patch, kernel)
    descs = []
    for _ in range(n_tensors):
        length = r.unpack("B")
        name = bytes(r.array("u1", length)).decode("ascii")
        ndim = r.unpack("B")
        shape = tuple(int(d) for d in r.array("<u4", ndim))
        descs.append((name, shape))
    params = {}
    for name, shape in descs:
        params[name] = r.array("<f8", int(np.prod(shape))).reshape(shape).astype(dtype)
    r.end()
    return AEModel(arch, params)
