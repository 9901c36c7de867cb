"""Image and flow-field I/O, error metrics, and flow visualization.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
Flow fields use the Middlebury ``.flo`` interchange layout and carry the
horizontal component ``u`` and vertical component ``v`` as float32 planes.
All functions here are pure and thread-safe.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


@dataclass(frozen=True)
class EpeStats:
    """Endpoint-error summary over a flow/ground-truth pair."""

    epe_all: float
    epe_noc: float
    count_all: int
    count_noc: int

    def __str__(self) -> str:
        return f"{self.epe_noc:.2f} ({self.epe_all:.2f})"


def _read_ppm_token(f) -> bytes:
    # PPM headers allow '#' comments between whitespace-separated tokens.
    token = b""
    while True:
        c = f.read(1)
        if not c:
            raise FormatError("truncated PPM header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit PPM (P6) or PNG image as float64 RGB in [0, 1].

    Grayscale inputs are replicated to three channels. Values are mapped
    from [0, 255] by division with 255.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P6":
            width = int(_read_ppm_token(f))
            height = int(_read_ppm_token(f))
            maxval = int(_read_ppm_token(f))
            if maxval != 255:
                raise FormatError(f"unsupported PPM maxval {maxval} in {path!r}, expected 255")
            if width <= 0 or height <= 0:
                raise FormatError(f"bad PPM dimensions {width}x{height} in {path!r}")
            payload = f.read(height * width * 3)
            if len(payload) != height * width * 3:
                raise FormatError(f"truncated PPM payload in {path!r}")
            data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
            return data.astype(np.float64) / 255.0
    # not PPM: try PNG through Pillow
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            if im.mode not in ("RGB", "L"):
                if im.mode in ("RGBA", "P", "LA", "I;16", "I"):
                    if im.mode in ("I;16", "I"):
                        raise FormatError(f"unsupported bit depth {im.mode!r} in {path!r}, expected 8-bit")
                    im = im.convert("RGB")
                else:
                    raise FormatError(f"unsupported image mode {im.mode!r} in {path!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"unreadable image file {path!r}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.astype(np.float64) / 255.0


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an RGB image in [0, 1] as binary PPM (P6) or PNG by suffix."""
    path = os.fspath(path)
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    h, w, _ = data.shape
    if path.lower().endswith(".png"):
        from PIL import Image as PILImage

        PILImage.fromarray(data, mode="RGB").save(path)
        return
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_flo(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read a Middlebury ``.flo`` file.

    Layout: float32 magic 202021.25, int32 width, int32 height, then
    height*width interleaved (u, v) float32 pairs, row-major,
    little-endian throughout.

    Returns (u, v) float32 arrays of shape (H, W).
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"truncated .flo header in {path!r}")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r} in {path!r}, expected {FLO_MAGIC}")
    w, h = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FormatError(f"bad .flo dimensions {w}x{h} in {path!r}")
    expected = 12 + 8 * h * w
    if len(raw) < expected:
        raise FormatError(f"truncated .flo payload in {path!r}: {len(raw)} < {expected} bytes")
    data = np.frombuffer(raw, dtype="<f4", count=2 * h * w, offset=12).reshape(h, w, 2)
    return data[:, :, 0].copy(), data[:, :, 1].copy()


def write_flo(path: str | os.PathLike, u: np.ndarray, v: np.ndarray) -> None:
    """Write a flow field in the exact ``.flo`` byte layout read_flo expects."""
    u = np.asarray(u, dtype="<f4")
    v = np.asarray(v, dtype="<f4")
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError(f"u and v must be 2-D and equal-shaped, got {u.shape} and {v.shape}")
    h, w = u.shape
    with open(os.fspath(path), "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.stack([u, v], axis=2).astype("<f4").tobytes())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a non-occlusion mask from a PNG/PPM: nonzero pixels count as valid."""
    img = load_image(path)
    return img.sum(axis=2) > 0


def endpoint_error(
    u: np.ndarray,
    v: np.ndarray,
    gt_u: np.ndarray,
    gt_v: np.ndarray,
    mask: np.ndarray | None = None,
) -> EpeStats:
    """Mean Euclidean endpoint error, over all pixels and over mask-true pixels.

    ``mask`` marks non-occluded pixels; when omitted every pixel counts and
    the two means coincide.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gt_u = np.asarray(gt_u, dtype=np.float64)
    gt_v = np.asarray(gt_v, dtype=np.float64)
    if not (u.shape == v.shape == gt_u.shape == gt_v.shape):
        raise ValueError(
            f"dimension mismatch: flow {u.shape}/{v.shape} vs ground truth {gt_u.shape}/{gt_v.shape}"
        )
    if mask is None:
        mask = np.ones(u.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != u.shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow shape {u.shape}")
    err = np.hypot(u - gt_u, v - gt_v)
    count_all = err.size
    count_noc = int(mask.sum())
    epe_all = float(err.mean()) if count_all else 0.0
    epe_noc = float(err[mask].mean()) if count_noc else epe_all
    return EpeStats(epe_all=epe_all, epe_noc=epe_noc, count_all=count_all, count_noc=count_noc)


def flow_to_color(u: np.ndarray, v: np.ndarray, max_radius: float | None = None) -> np.ndarray:
    """Render a flow field on the color wheel.

    Hue encodes atan2(v, u), saturation is magnitude / max_radius clipped
    to 1, value is 1, so zero flow maps to white. ``max_radius=None``
    scales by the largest finite magnitude. Non-finite vectors render black.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    finite = np.isfinite(u) & np.isfinite(v)
    us = np.where(finite, u, 0.0)
    vs = np.where(finite, v, 0.0)
    rad = np.hypot(us, vs)
    if max_radius is None:
        max_radius = float(rad.max())
    if max_radius <= 0:
        max_radius = 1.0
    sat = np.clip(rad / max_radius, 0.0, 1.0)
    hue = (np.arctan2(vs, us) / (2.0 * np.pi)) % 1.0

    # classic HSV -> RGB with V = 1
    k = hue * 6.0
    sector = np.floor(k).astype(np.int64) % 6
    f = k - np.floor(k)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    rgb_by_sector = [
        (one, t, p),
        (q, one, p),
        (p, one, t),
        (p, q, one),
        (t, p, one),
        (one, p, q),
    ]
    out = np.zeros(u.shape + (3,), dtype=np.float64)
    for s, (r, g, b) in enumerate(rgb_by_sector):
        sel = sector == s
        out[sel, 0] = r[sel]
        out[sel, 1] = g[sel]
        out[sel, 2] = b[sel]
    out[~finite] = 0.0
    return out
