"""Image arrays, rectangles, seeded random streams and raster I/O.

Images are plain numpy arrays of shape ``(height, width, channels)`` with
``channels`` equal to 1 or 3. The dtype carries the form:

* ``uint8``   -- integer storage form, samples in [0, 255]
* ``float64`` -- normalized working form, samples in [0, 1]

Conversions between the two are explicit (:func:`to_normalized`,
:func:`to_uint8`).
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""


@dataclass(frozen=True, order=True)
class Rect:
    """Half-open pixel rectangle ``[x, x+w) x [y, y+h)``, origin top-left."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rect must have positive size, got {self}")

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height

    def intersection_area(self, other: "Rect") -> int:
        iw = min(self.x1, other.x1) - max(self.x, other.x)
        ih = min(self.y1, other.y1) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0
        return iw * ih

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y1), slice(self.x, self.x1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


# ---------------------------------------------------------------------------
# deterministic randomness


def stable_id(text: str) -> int:
    """64-bit stream id derived from a string (stable across runs/platforms)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def rng_stream(seed: int, *stream: int | str) -> np.random.Generator:
    """Independent generator for ``(seed, stream-id...)``.

    Each component is reduced to a 64-bit word; the words key a Philox
    counter-based generator through a SeedSequence, so streams for different
    items never depend on the order in which they are created.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        words.append(stable_id(s) if isinstance(s, str) else int(s) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# ---------------------------------------------------------------------------
# forms


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] not in (1, 3):
        shape = getattr(img, "shape", None)
        raise ValueError(f"expected an (H, W, 1|3) image array, got shape {shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("zero-dimension image")
    return img


def to_normalized(img: np.ndarray) -> np.ndarray:
    """uint8 image -> float64 image in [0, 1]. Float input is returned as float64."""
    check_image(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64, copy=False)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float image in [0, 1] -> uint8, rounding half away from zero then clamping."""
    check_image(img)
    if img.dtype == np.uint8:
        return img
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def as_rgb(img: np.ndarray) -> np.ndarray:
    return img if img.shape[2] == 3 else np.repeat(img, 3, axis=2)


# ---------------------------------------------------------------------------
# I/O


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG or JPEG file into an integer-form image (alpha dropped)."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageIOError(f"unsupported format {im.format!r}: {path}")
            im.load()
            if im.mode in ("L", "LA", "I;16", "I", "1"):
                arr = np.asarray(im.convert("L"))[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"))
    except ImageIOError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"unreadable image file {path}: {exc}") from exc
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageIOError(f"zero-dimension image: {path}")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike, format: str = "png", quality: int = 95) -> None:
    """Write an integer-form image as PNG (lossless) or baseline JPEG."""
    check_image(img)
    if img.dtype != np.uint8:
        raise ValueError("save_image expects an integer-form (uint8) image")
    fmt = format.lower()
    if fmt not in ("png", "jpeg", "jpg"):
        raise ValueError(f"unsupported output format {format!r}")
    if fmt != "png" and not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    pil = PILImage.fromarray(img[:, :, 0] if img.shape[2] == 1 else img)
    try:
        if fmt == "png":
            pil.save(path, format="PNG")
        else:
            pil.save(path, format="JPEG", quality=int(quality))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# geometry


def center_crop(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    check_image(img)
    h, w = img.shape[:2]
    if out_w > w or out_h > h or out_w <= 0 or out_h <= 0:
        raise ValueError(f"cannot crop {w}x{h} image to {out_w}x{out_h}")
    x0 = (w - out_w) // 2
    y0 = (h - out_h) // 2
    return img[y0:y0 + out_h, x0:x0 + out_w].copy()


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a normalized image (align-corners off)."""
    check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fy = fy[:, None, None]
    rows = src[y0] * (1.0 - fy) + src[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()
