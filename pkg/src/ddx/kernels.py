"""Hot kernels with a compiled path and a numpy fallback.

The compiled extension ``ddx._nlm_ext`` is used when it imports; setting
``DDX_PURE_PYTHON=1`` forces the numpy fallback. ``BACKEND`` names the
active implementation.
"""
from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("DDX_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from ddx import _nlm_ext
except ImportError:
    _nlm_ext = None

BACKEND = "cython" if _nlm_ext is not None else "numpy"


def default_threads() -> int:
    """Worker count from ``DDX_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("DDX_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DDX_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def _box_sum(a: np.ndarray, size: int) -> np.ndarray:
    # sliding sums of width `size` along both axes of a 2-D array ("valid" extent)
    c = np.cumsum(a, axis=0)
    c = np.concatenate([c[size - 1:size], c[size:] - c[:-size]], axis=0)
    c = np.cumsum(c, axis=1)
    return np.concatenate([c[:, size - 1:size], c[:, size:] - c[:, :-size]], axis=1)


def nlm_padded_numpy(padded: np.ndarray, height: int, width: int,
                     patch_radius: int, search_radius: int, h: float) -> np.ndarray:
    r, s = patch_radius, search_radius
    psize = 2 * r + 1
    nch = padded.shape[2]
    norm = 1.0 / (nch * psize * psize)
    ext_h, ext_w = height + 2 * r, width + 2 * r
    base = padded[s:s + ext_h, s:s + ext_w]
    out = np.zeros((height, width, nch))
    den = np.zeros((height, width))
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            shifted = padded[s + dy:s + dy + ext_h, s + dx:s + dx + ext_w]
            dist = ((base - shifted) ** 2).sum(axis=2)
            d2 = _box_sum(dist, psize) * norm
            w = np.exp(-d2 / (h * h))
            den += w
            out += w[:, :, None] * shifted[r:r + height, r:r + width]
    return out / den[:, :, None]


def nlm_denoise(img: np.ndarray, h: float, patch_size: int = 7, patch_distance: int = 11,
                threads: int | None = None, backend: str | None = None) -> np.ndarray:
    """Non-local means with uniform patch weights and ``exp(-d2 / h**2)`` weights.

    ``d2`` is the mean squared difference between the ``patch_size`` square
    patches around two pixels, averaged over channels. Candidates range over
    the ``(2 * patch_distance + 1)**2`` window; borders are reflect padded.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    if patch_size < 1 or patch_size % 2 == 0 or patch_distance < 0:
        raise ValueError(f"invalid patch geometry: size={patch_size}, distance={patch_distance}")
    height, width = img.shape[:2]
    if height <= patch_size or width <= patch_size:
        raise ValueError(f"image {width}x{height} must be larger than the {patch_size}px patch")
    r = patch_size // 2
    pad = patch_distance + r
    padded = np.ascontiguousarray(
        np.pad(np.asarray(img, dtype=np.float64), ((pad, pad), (pad, pad), (0, 0)), mode="reflect"))
    backend = backend or BACKEND
    if backend == "cython":
        if _nlm_ext is None:
            raise RuntimeError("compiled NLM kernel is not available")
        n = threads if threads is not None else default_threads()
        return _nlm_ext.nlm_padded(padded, height, width, r, patch_distance, float(h), int(n))
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    return nlm_padded_numpy(padded, height, width, r, patch_distance, float(h))
