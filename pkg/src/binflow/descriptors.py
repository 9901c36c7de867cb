"""Per-pixel descriptor fields: census, quantization, and a tiny extractor.

A float descriptor field is an (H, W, 64) array; a binary field packs the
64 sign bits of each pixel into one uint64 (bit k = 1 iff component k >= 0,
so sign(0) counts as +1). All operations are pure per-pixel maps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .io import FormatError

M = 64

# census window: 7 rows x 9 columns, center excluded -> 62 bits, the top
# two bits of the packed word stay zero. Offsets are scanned row-major.
CENSUS_ROWS = 7
CENSUS_COLS = 9
CENSUS_OFFSETS = tuple(
    (dy, dx)
    for dy in range(-(CENSUS_ROWS // 2), CENSUS_ROWS // 2 + 1)
    for dx in range(-(CENSUS_COLS // 2), CENSUS_COLS // 2 + 1)
    if not (dy == 0 and dx == 0)
)


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) image."""
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def census_transform(image: np.ndarray) -> np.ndarray:
    """Census words over a 7x9 neighborhood of the luminance image.

    Bit j is set iff the luminance at offset j (row-major scan, center
    excluded) is >= the center luminance; out-of-image neighbors replicate
    the border pixel. Returns (H, W) uint64 with bits 62-63 zero.
    """
    lum = luminance(image)
    h, w = lum.shape
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    words = np.zeros((h, w), dtype=np.uint64)
    for bit, (dy, dx) in enumerate(CENSUS_OFFSETS):
        ny = np.clip(ys + dy, 0, h - 1)
        nx = np.clip(xs + dx, 0, w - 1)
        ge = lum[ny, nx] >= lum
        words |= ge.astype(np.uint64) << np.uint64(bit)
    return words


def quantize(field: np.ndarray) -> np.ndarray:
    """Pack the sign pattern of an (H, W, 64) float field into uint64 words."""
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[2] != M:
        raise ValueError(f"expected (H, W, {M}) descriptor field, got {field.shape}")
    bits = (field >= 0.0).astype(np.uint64)
    shifts = np.arange(M, dtype=np.uint64)
    return (bits << shifts).sum(axis=2, dtype=np.uint64)


def unpack_signs(words: np.ndarray) -> np.ndarray:
    """Expand packed words back to +-1.0 components (bit k -> component k)."""
    words = np.asarray(words, dtype=np.uint64)
    shifts = np.arange(M, dtype=np.uint64)
    bits = (words[..., None] >> shifts) & np.uint64(1)
    return np.where(bits == 1, 1.0, -1.0)


def dot_cost(a: np.ndarray, b: np.ndarray) -> float:
    """Negative scalar product of two m-vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"descriptor length mismatch: {a.shape} vs {b.shape}")
    return float(-np.dot(a, b))


def hamming_cost(wa: int | np.uint64, wb: int | np.uint64) -> int:
    """2 * popcount(wa XOR wb) - 64; equals dot_cost of the +-1 embeddings."""
    x = np.uint64(wa) ^ np.uint64(wb)
    return 2 * int(np.bitwise_count(x)) - M


@dataclass
class ThetaParams:
    """Parameters of the 2-layer descriptor extractor.

    Layer 1: 3x3 convolution over RGB into k channels, tanh.
    Layer 2: 1x1 convolution from k channels to 64, tanh.
    """

    w1: np.ndarray  # (3, 3, 3, k)
    b1: np.ndarray  # (k,)
    w2: np.ndarray  # (k, 64)
    b2: np.ndarray  # (64,)

    @property
    def k(self) -> int:
        return self.w1.shape[3]

    @staticmethod
    def zeros(k: int = 16) -> "ThetaParams":
        return ThetaParams(
            w1=np.zeros((3, 3, 3, k)),
            b1=np.zeros(k),
            w2=np.zeros((k, M)),
            b2=np.zeros(M),
        )

    @staticmethod
    def random(k: int = 16, seed: int = 0, scale: float = 2.0) -> "ThetaParams":
        # the default scale saturates tanh enough to equalize descriptor
        # norms, which keeps the scalar-product cost discriminative
        rng = np.random.default_rng(seed)
        return ThetaParams(
            w1=rng.normal(0.0, scale / 3.0, (3, 3, 3, k)),
            b1=rng.normal(0.0, scale / 3.0, k),
            w2=rng.normal(0.0, scale / np.sqrt(k), (k, M)),
            b2=rng.normal(0.0, scale / np.sqrt(k), M),
        )

    def copy(self) -> "ThetaParams":
        return ThetaParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1.ravel(), self.w2.ravel(), self.b2.ravel()])

    def validate(self) -> None:
        for name, arr in (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite extractor parameter {name}")


def tiny_extractor_forward(image: np.ndarray, theta: ThetaParams, with_hidden: bool = False):
    """Run the 2-layer extractor; returns an (H, W, 64) field in (-1, 1).

    Layer 1 is a zero-padded stride-1 3x3 convolution followed by tanh;
    layer 2 is a 1x1 convolution followed by tanh. With ``with_hidden``
    the pre-activations and hidden field needed for backprop are returned
    as well.
    """
    theta.validate()
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image {h}x{w} too small for a 3x3 convolution")
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    k = theta.k
    pre1 = np.tile(theta.b1, (h, w, 1))
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + h, dx : dx + w, :]
            pre1 += patch @ theta.w1[dy, dx]
    hid = np.tanh(pre1)
    pre2 = hid @ theta.w2 + theta.b2
    out = np.tanh(pre2)
    if with_hidden:
        return out, hid, pre1, pre2
    return out


FDF_MAGIC = b"FDF1"
THT_MAGIC = b"THT1"


def write_descriptor_field(path: str | os.PathLike, field: np.ndarray) -> None:
    """Write an (H, W, 64) float field: magic 'FDF1', int32 h/w/m, float32 data."""
    field = np.asarray(field, dtype="<f4")
    h, w, m = field.shape
    with open(os.fspath(path), "wb") as f:
        f.write(FDF_MAGIC)
        f.write(np.array([h, w, m], dtype="<i4").tobytes())
        f.write(field.tobytes())


def load_descriptor_field(path: str | os.PathLike) -> np.ndarray:
    """Read an FDF1 descriptor file; m must be 64."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FDF_MAGIC:
            raise FormatError(f"bad descriptor magic {magic!r} in {path!r}, expected {FDF_MAGIC!r}")
        dims = np.frombuffer(f.read(12), dtype="<i4")
        if dims.size != 3:
            raise FormatError(f"truncated descriptor header in {path!r}")
        h, w, m = (int(x) for x in dims)
        if m != M:
            raise FormatError(f"descriptor dimensionality {m} in {path!r}, this build fixes m={M}")
        if h <= 0 or w <= 0:
            raise FormatError(f"bad descriptor dimensions {h}x{w} in {path!r}")
        payload = f.read(4 * h * w * m)
        if len(payload) != 4 * h * w * m:
            raise FormatError(f"truncated descriptor payload in {path!r}")
        return np.frombuffer(payload, dtype="<f4").reshape(h, w, m).astype(np.float64)


def write_theta(path: str | os.PathLike, theta: ThetaParams) -> None:
    """Write extractor parameters: magic 'THT1', int32 k, float32 params in order."""
    with open(os.fspath(path), "wb") as f:
        f.write(THT_MAGIC)
        f.write(np.array([theta.k], dtype="<i4").tobytes())
        for arr in (theta.w1, theta.b1, theta.w2, theta.b2):
            f.write(np.asarray(arr, dtype="<f4").tobytes())


def load_theta(path: str | os.PathLike) -> ThetaParams:
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != THT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} in {path!r}, expected {THT_MAGIC!r}")
        kraw = f.read(4)
        if len(kraw) != 4:
            raise FormatError(f"truncated checkpoint header in {path!r}")
        k = int(np.frombuffer(kraw, dtype="<i4")[0])
        if k <= 0:
            raise FormatError(f"bad channel count {k} in {path!r}")
        counts = [(3, 3, 3, k), (k,), (k, M), (M,)]
        arrays = []
        for shape in counts:
            n = int(np.prod(shape))
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise FormatError(f"truncated checkpoint payload in {path!r}")
            arrays.append(np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64))
    return ThetaParams(*arrays)
