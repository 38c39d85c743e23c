"""Binary file formats.

All integers and floats are little-endian.

XSIM  image     ``b"XSIM" | u8 version=1 | u32 width | u32 height | u16[h*w]`` row-major
XCBK  codebook  ``b"XCBK" | u8 version=1 | u32 K | u32 d | f64[K*d]``
XFTR  features  ``b"XFTR" | u32 rows | u32 cols | f64[rows*cols]`` row-major;
                row ids live in a sidecar ``<path>.ids`` text file, one per line
XAEM  / XSVM    see :mod:`scatterforge.autoencoder` and :mod:`scatterforge.learneval`
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

XSIM_MAGIC = b"XSIM"
XCBK_MAGIC = b"XCBK"
XFTR_MAGIC = b"XFTR"
VERSION = 1
MAX_ELEMENTS = 1 << 31


@dataclass(frozen=True, eq=False)
class SyntheticImage:
    """16-bit detector image, shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint16)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, SyntheticImage) and np.array_equal(self.data, other.data)


class BinaryReader:
    """Cursor over a byte buffer that reports the offset of any failure."""

    def __init__(self, buf: bytes, path=None):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: int | None = None):
        raise FormatError(message, self.pos if offset is None else offset, self.path)

    def magic(self, expected: bytes):
        if self.buf[: len(expected)] != expected:
            self.fail("bad magic", 0)
        self.pos = len(expected)

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            self.fail("truncated header")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def version(self, expected: int = VERSION):
        v = self.unpack("B")
        if v != expected:
            self.fail(f"unsupported version {v}", self.pos - 1)

    def array(self, dtype: str, count: int) -> np.ndarray:
        if count > MAX_ELEMENTS:
            self.fail(f"dimension overflow ({count} elements)")
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.buf):
            self.fail(f"truncated payload: need {nbytes} bytes, have {len(self.buf) - self.pos}")
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += nbytes
        return arr

    def end(self):
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} trailing bytes")


def atomic_write(path, payload: bytes):
    """Write via a temporary sibling so a failed write leaves no partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# -- XSIM ------------------------------------------------------------------------


def encode_image(img: SyntheticImage) -> bytes:
    header = XSIM_MAGIC + struct.pack("<BII", VERSION, img.width, img.height)
    return header + img.data.astype("<u2").tobytes()


def decode_image(buf: bytes, path=None) -> SyntheticImage:
    r = BinaryReader(buf, path)
    r.magic(XSIM_MAGIC)
    r.version()
    width, height = r.unpack("II")
    n = width * height
    if n > MAX_ELEMENTS:
        r.fail(f"dimension overflow ({width}x{height})", 5)
    if len(buf) - r.pos != 2 * n:
        r.fail(f"truncated: header says {width}x{height} ({2 * n} bytes), payload has {len(buf) - r.pos}")
    data = r.array("<u2", n).reshape(height, width)
    return SyntheticImage(data)


def write_image(path, img: SyntheticImage):
    atomic_write(path, encode_image(img))


def read_image(path) -> SyntheticImage:
    return decode_image(_read(path), path)


# -- XCBK ------------------------------------------------------------------------


def write_codebook_file(path, centroids: np.ndarray):
    c = np.ascontiguousarray(centroids, dtype="<f8")
    k, d = c.shape
    atomic_write(path, XCBK_MAGIC + struct.pack("<BII", VERSION, k, d) + c.tobytes())


def read_codebook_file(path) -> np.ndarray:
    r = BinaryReader(_read(path), path)
    r.magic(XCBK_MAGIC)
    r.version()
    k, d = r.unpack("II")
    c = r.array("<f8", k * d).reshape(k, d)
    r.end()
    return c


# -- XFTR ------------------------------------------------------------------------


@dataclass
class FeatureMatrix:
    ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError("feature matrix rows must match ids")

    def rows(self, ids) -> np.ndarray:
        index = {i: n for n, i in enumerate(self.ids)}
        try:
            return self.matrix[[index[i] for i in ids]]
        except KeyError as exc:
            raise FormatError(f"id {exc.args[0]!r} has no feature row") from None


def write_features(path, feats: FeatureMatrix):
    m = np.ascontiguousarray(feats.matrix, dtype="<f8")
    rows, cols = m.shape
    atomic_write(path, XFTR_MAGIC + struct.pack("<II", rows, cols) + m.tobytes())
    atomic_write(Path(str(path) + ".ids"), "".join(i + "\n" for i in feats.ids).encode("utf-8"))


def read_features(path) -> FeatureMatrix:
    r = BinaryReader(_read(path), path)
    r.magic(XFTR_MAGIC)
    rows, cols = r.unpack("II")
    m = r.array("<f8", rows * cols).reshape(rows, cols)
    r.end()
    ids_path = Path(str(path) + ".ids")
    if ids_path.exists():
        ids = ids_path.read_text(encoding="utf-8").splitlines()
    else:
        ids = [str(i) for i in range(rows)]
    if len(ids) != rows:
        raise FormatError(f"{ids_path} lists {len(ids)} ids for {rows} rows", path=ids_path)
    return FeatureMatrix(ids, m)
