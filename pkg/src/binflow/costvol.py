"""Min-projected matching cost volumes and the local winner-takes-all model.

The 4D matching cost over a D x D displacement window is never stored;
it is reduced on the fly to two (H, W, D) volumes c_u and c_v together
with the inner argmin tables, so memory stays linear in D.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .descriptors import M
from .io import FormatError

COST_OUTSIDE = kernels.COST_OUTSIDE

VARIANTS = ("FF", "FQ", "QQ")


@dataclass(frozen=True)
class SearchWindow:
    """Square displacement window S x S with S = {-D/2, ..., D/2-1}."""

    d: int

    def __post_init__(self):
        if self.d <= 0 or self.d % 2 != 0:
            raise ValueError(f"search window size must be even and positive, got {self.d}")

    @property
    def radius(self) -> int:
        return self.d // 2

    def labels_to_disp(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels, dtype=np.int64) - self.radius

    def disp_to_labels(self, disp: np.ndarray) -> np.ndarray:
        return np.asarray(disp, dtype=np.int64) + self.radius


def variant_modes(variant: str) -> tuple[str, str]:
    """(outer, inner) cost modes of a variant name: FF, FQ or QQ."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return variant[0], variant[1]


@dataclass
class CostProjectionPair:
    """The two projected volumes plus the inner argmin tables.

    c_u[y, x, ul] holds the outer-mode cost of (ul, argmin_v[y, x, ul]),
    where the argmin was taken under the inner mode; symmetrically for
    c_v / argmin_u. Storage is 2*|pixels|*D cost entries.
    """

    c_u: np.ndarray
    c_v: np.ndarray
    argmin_v: np.ndarray
    argmin_u: np.ndarray
    window: SearchWindow
    outer_mode: str
    inner_mode: str

    @property
    def variant(self) -> str:
        return self.outer_mode + self.inner_mode

    def nbytes(self) -> int:
        return self.c_u.nbytes + self.c_v.nbytes + self.argmin_v.nbytes + self.argmin_u.nbytes


def local_cost(
    desc1,
    desc2,
    pixel: tuple[int, int],
    disp: tuple[int, int],
    mode: str,
) -> float:
    """Matching cost of one pixel/displacement; COST_OUTSIDE off-image.

    ``desc1``/``desc2`` are float fields for mode 'F' or packed words for
    mode 'Q'; ``pixel`` is (y, x) and ``disp`` is (u, v) with u horizontal.
    """
    y, x = pixel
    du, dv = disp
    ty, tx = y + dv, x + du
    if mode == "F":
        h, w = desc1.shape[:2]
        if not (0 <= ty < h and 0 <= tx < w):
            return COST_OUTSIDE
        return float(-np.dot(desc1[y, x].astype(np.float64), desc2[ty, tx].astype(np.float64)))
    if mode == "Q":
        h, w = desc1.shape
        if not (0 <= ty < h and 0 <= tx < w):
            return COST_OUTSIDE
        return float(2 * int(np.bitwise_count(desc1[y, x] ^ desc2[ty, tx])) - M)
    raise ValueError(f"unknown cost mode {mode!r}, expected 'F' or 'Q'")


def min_project(
    desc1_f: np.ndarray | None,
    desc2_f: np.ndarray | None,
    window: SearchWindow,
    variant: str = "QQ",
    desc1_q: np.ndarray | None = None,
    desc2_q: np.ndarray | None = None,
) -> CostProjectionPair:
    """Reduce the 4D cost to c_u/c_v by minimizing out the other component.

    Ties resolve to the smallest displacement. Float fields are required
    for an F outer or inner mode, packed fields for a Q mode; for FQ both
    are needed. No allocation grows with D^2.
    """
    outer, inner = variant_modes(variant)
    need_f = "F" in (outer, inner)
    need_q = "Q" in (outer, inner)
    if need_f and (desc1_f is None or desc2_f is None):
        raise ValueError(f"variant {variant} needs float descriptor fields")
    if need_q:
        if desc1_q is None:
            from .descriptors import quantize

            desc1_q = quantize(desc1_f)
            desc2_q = quantize(desc2_f)
        if desc1_q.shape != desc2_q.shape:
            raise ValueError("descriptor fields must share one shape")
    if need_f:
        desc1_f = np.ascontiguousarray(desc1_f, dtype=np.float64)
        desc2_f = np.ascontiguousarray(desc2_f, dtype=np.float64)
        if desc1_f.shape != desc2_f.shape:
            raise ValueError("descriptor fields must share one shape")
        h, w = desc1_f.shape[:2]
    else:
        h, w = desc1_q.shape
    d = window.d

    arg_v = np.empty((h, w, d), dtype=np.int16)
    arg_u = np.empty((h, w, d), dtype=np.int16)
    if variant == "QQ":
        c_u = np.empty((h, w, d), dtype=np.float64)
        c_v = np.empty((h, w, d), dtype=np.float64)
        kernels.minproj_q(desc1_q, desc2_q, d, c_u, c_v, arg_v, arg_u)
        c_u = c_u.astype(np.int16)
        c_v = c_v.astype(np.int16)
    elif variant == "FF":
        c_u = np.empty((h, w, d), dtype=np.float64)
        c_v = np.empty((h, w, d), dtype=np.float64)
        kernels.minproj_f(desc1_f, desc2_f, d, c_u, c_v, arg_v, arg_u)
    else:  # FQ
        c_u = np.empty((h, w, d), dtype=np.float64)
        c_v = np.empty((h, w, d), dtype=np.float64)
        kernels.minproj_fq(desc1_f, desc2_f, desc1_q, desc2_q, d, c_u, c_v, arg_v, arg_u)
    return CostProjectionPair(
        c_u=c_u, c_v=c_v, argmin_v=arg_v, argmin_u=arg_u,
        window=window, outer_mode=outer, inner_mode=inner,
    )


def wta(pair: CostProjectionPair) -> tuple[np.ndarray, np.ndarray]:
    """Winner-takes-all flow from a projection pair.

    Returns float32 (u, v) displacement planes; per-pixel ties resolve to
    the smallest displacement (argmin over ascending labels).
    """
    ul = np.argmin(pair.c_u, axis=2)
    vl = np.argmin(pair.c_v, axis=2)
    u = pair.window.labels_to_disp(ul).astype(np.float32)
    v = pair.window.labels_to_disp(vl).astype(np.float32)
    return u, v


def projected_bytes(height: int, width: int, d: int, bytes_per_entry: int) -> tuple[int, int]:
    """(full 4D bytes, split bytes) = (H*W*D^2*b, 2*H*W*D*b), exact integers."""
    if min(height, width, d, bytes_per_entry) <= 0:
        raise ValueError("all arguments must be positive")
    full = height * width * d * d * bytes_per_entry
    split = 2 * height * width * d * bytes_per_entry
    return full, split


CPV_MAGIC = b"CPV1"


def write_cost_volumes(path: str | os.PathLike, pair: CostProjectionPair) -> None:
    """Debug dump of c_u/c_v: magic 'CPV1', int32 h/w/D, float32 entries."""
    h, w, d = pair.c_u.shape
    with open(os.fspath(path), "wb") as f:
        f.write(CPV_MAGIC)
        f.write(np.array([h, w, d], dtype="<i4").tobytes())
        f.write(np.asarray(pair.c_u, dtype="<f4").tobytes())
        f.write(np.asarray(pair.c_v, dtype="<f4").tobytes())


def read_cost_volumes(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    path = os.fspath(path)
    with open(path, "rb") as f:
        if f.read(4) != CPV_MAGIC:
            raise FormatError(f"bad cost-volume magic in {path!r}")
        h, w, d = (int(x) for x in np.frombuffer(f.read(12), dtype="<i4"))
        n = h * w * d
        c_u = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(h, w, d)
        c_v = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(h, w, d)
    return c_u.astype(np.float64), c_v.astype(np.float64)
