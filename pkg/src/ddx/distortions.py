"""The eight distortion operators, their level grids and region-restricted application.

All operators take and return normalized float images (H, W, C) in [0, 1].
Randomized operators take an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ddx import kernels
from ddx.imgcore import Rect, check_image, resize_bilinear


class DistortionClass(enum.IntEnum):
    GWN = 0
    GaussianBlur = 1
    SaltPepper = 2
    Quantization = 3
    Jpeg = 4
    LowPass = 5
    Denoise = 6
    FNoise = 7
    Pristine = 8

    @property
    def slug(self) -> str:
        return _SLUGS[self]

    @classmethod
    def parse(cls, value) -> "DistortionClass":
        """Accept a class, integer code, member name or CLI slug."""
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls(int(value))
        if isinstance(value, str):
            key = value.strip()
            for member in cls:
                if key == member.name or key.lower() == member.slug:
                    return member
        raise ValueError(f"unknown distortion class {value!r}")


_SLUGS = {
    DistortionClass.GWN: "gwn",
    DistortionClass.GaussianBlur: "blur",
    DistortionClass.SaltPepper: "sp",
    DistortionClass.Quantization: "quant",
    DistortionClass.Jpeg: "jpeg",
    DistortionClass.LowPass: "lowpass",
    DistortionClass.Denoise: "denoise",
    DistortionClass.FNoise: "fnoise",
    DistortionClass.Pristine: "pristine",
}

DISTORTIONS = tuple(c for c in DistortionClass if c is not DistortionClass.Pristine)

# severity-ascending; JPEG quality and low-pass ratio fall as severity rises
LEVEL_GRIDS: dict[DistortionClass, tuple[float, float, float]] = {
    DistortionClass.GWN: (0.0125, 0.025, 0.05),
    DistortionClass.GaussianBlur: (1.5, 3.0, 6.0),
    DistortionClass.SaltPepper: (0.0125, 0.025, 0.05),
    DistortionClass.Quantization: (16, 8, 4),
    DistortionClass.Jpeg: (20, 10, 5),
    DistortionClass.LowPass: (0.3, 0.1, 0.03),
    DistortionClass.Denoise: (0.04, 0.06, 0.08),
    DistortionClass.FNoise: (2.5, 5.0, 10.0),
}

INTEGER_PARAMS = frozenset({DistortionClass.Quantization, DistortionClass.Jpeg})

NLM_PATCH_SIZE = 7
NLM_PATCH_DISTANCE = 11


def level_grid(cls) -> tuple[tuple[float, float, float], tuple[float, float]]:
    """Return ``(levels, (min, max))`` for a distortion class."""
    cls = DistortionClass.parse(cls)
    if cls is DistortionClass.Pristine:
        raise ValueError("Pristine has no distortion levels")
    levels = LEVEL_GRIDS[cls]
    return levels, (min(levels), max(levels))


@dataclass(frozen=True)
class DistortionSpec:
    cls: DistortionClass
    param: float | None = None

    def __post_init__(self):
        cls = DistortionClass.parse(self.cls)
        object.__setattr__(self, "cls", cls)
        if cls is DistortionClass.Pristine:
            if self.param is not None:
                raise ValueError("Pristine takes no parameter")
            return
        if self.param is None:
            raise ValueError(f"{cls.name} requires a parameter")
        _, (lo, hi) = level_grid(cls)
        p = float(self.param)
        if not lo - 1e-12 <= p <= hi + 1e-12:
            raise ValueError(f"{cls.name} parameter {p} outside [{lo}, {hi}]")
        if cls in INTEGER_PARAMS:
            if p != round(p):
                raise ValueError(f"{cls.name} parameter must be an integer, got {p}")
            p = int(round(p))
        object.__setattr__(self, "param", p)

    @classmethod
    def at_level(cls, dclass, level: int) -> "DistortionSpec":
        """Spec at grid level 1, 2 or 3 (severity ascending)."""
        levels, _ = level_grid(dclass)
        if level not in (1, 2, 3):
            raise ValueError(f"level must be 1, 2 or 3, got {level}")
        return cls(DistortionClass.parse(dclass), levels[level - 1])


# ---------------------------------------------------------------------------
# operators


def apply_gwn(img: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    check_image(img)
    noise = rng.normal(0.0, math.sqrt(variance), size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def apply_salt_pepper(img: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt each pixel (all channels jointly) with probability ``amount``."""
    if not 0 < amount <= 1:
        raise ValueError(f"amount must be in (0, 1], got {amount}")
    check_image(img)
    h, w = img.shape[:2]
    hit = rng.random((h, w)) < amount
    salt = rng.random((h, w)) < 0.5
    out = np.array(img, dtype=np.float64, copy=True)
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_pad(img: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")


def apply_gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    check_image(img)
    k = gaussian_kernel1d(sigma)
    radius = len(k) // 2
    # np.pad repeats the reflection when radius exceeds the image, unlike a single mirror
    padded = _reflect_pad(np.asarray(img, dtype=np.float64), radius)
    tmp = ndimage.correlate1d(padded, k, axis=0, mode="constant")
    out = ndimage.correlate1d(tmp, k, axis=1, mode="constant")
    return out[radius:-radius, radius:-radius]


def apply_quantization(img: np.ndarray, levels: int) -> np.ndarray:
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    check_image(img)
    n = int(levels) - 1
    return np.round(np.asarray(img, dtype=np.float64) * n) / n


# Annex K tables
_LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def jpeg_quant_table(quality: int, chroma: bool = False) -> np.ndarray:
    """libjpeg-style quality scaling of the standard tables."""
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    quality = int(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    base = _CHROMA_Q if chroma else _LUMA_Q
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT8 = dct_matrix(8)


def _rint_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _jpeg_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    H, W = p.shape
    blocks = p.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = _DCT8 @ blocks @ _DCT8.T
    # snap float noise so exact .5 ties (e.g. constant blocks) round away from zero
    coef = _rint_away(np.round(coef / table, 9)) * table
    rec = _DCT8.T @ coef @ _DCT8
    return rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w] + 128.0


def apply_jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    """DCT quantization round trip at a libjpeg quality (4:4:4, no entropy coding)."""
    check_image(img)
    luma = jpeg_quant_table(quality)
    x = np.asarray(img, dtype=np.float64) * 255.0
    if x.shape[2] == 1:
        out = _jpeg_plane(x[:, :, 0], luma)[:, :, None]
        return np.clip(out / 255.0, 0.0, 1.0)
    chroma = jpeg_quant_table(quality, chroma=True)
    r, g, b = x[:, :, 0], x[:, :, 1], x[:, :, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    y, cb, cr = _jpeg_plane(y, luma), _jpeg_plane(cb, chroma), _jpeg_plane(cr, chroma)
    out = np.stack([
        y + 1.402 * (cr - 128.0),
        y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    ], axis=2)
    return np.clip(out / 255.0, 0.0, 1.0)


def apply_lowpass(img: np.ndarray, ratio: float) -> np.ndarray:
    check_image(img)
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    h, w = img.shape[:2]
    # intermediate size floors at 1px so small detection regions stay legal
    small = resize_bilinear(img, max(1, round(w * ratio)), max(1, round(h * ratio)))
    return resize_bilinear(small, w, h)


def apply_nlm_denoise(img: np.ndarray, h: float, patch_size: int = NLM_PATCH_SIZE,
                      patch_distance: int = NLM_PATCH_DISTANCE) -> np.ndarray:
    check_image(img)
    return np.clip(kernels.nlm_denoise(img, h, patch_size, patch_distance), 0.0, 1.0)


def pink_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 2-D field whose spectral amplitude falls as 1/frequency."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.hypot(fy, fx)
    scale = np.zeros_like(radius)
    np.divide(1.0, radius, out=scale, where=radius > 0)
    spectrum = (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) * scale
    field = np.fft.ifft2(spectrum).real
    std = field.std()
    if std == 0:  # 1x1 has only a DC term
        return np.zeros((h, w))
    return (field - field.mean()) / std


def apply_fnoise(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    """Add an independent pink field per channel with amplitude ``1 / factor``."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    check_image(img)
    h, w, c = img.shape
    noise = np.stack([pink_field((h, w), rng) for _ in range(c)], axis=2)
    return np.clip(img + noise / factor, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dispatch


def apply(img: np.ndarray, spec: DistortionSpec, rng: np.random.Generator) -> np.ndarray:
    check_image(img)
    img = np.asarray(img, dtype=np.float64)
    c, p = spec.cls, spec.param
    if c is DistortionClass.Pristine:
        return img.copy()
    if c is DistortionClass.GWN:
        return apply_gwn(img, p, rng)
    if c is DistortionClass.GaussianBlur:
        return apply_gaussian_blur(img, p)
    if c is DistortionClass.SaltPepper:
        return apply_salt_pepper(img, p, rng)
    if c is DistortionClass.Quantization:
        return apply_quantization(img, int(p))
    if c is DistortionClass.Jpeg:
        return apply_jpeg(img, int(p))
    if c is DistortionClass.LowPass:
        return apply_lowpass(img, p)
    if c is DistortionClass.Denoise:
        return apply_nlm_denoise(img, p)
    if c is DistortionClass.FNoise:
        return apply_fnoise(img, p, rng)
    raise ValueError(f"unhandled distortion class {c!r}")


def apply_region(img: np.ndarray, rect: Rect, spec: DistortionSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Distort only ``rect``; the region is processed as its own sub-image."""
    check_image(img)
    h, w = img.shape[:2]
    if not rect.inside(w, h):
        raise ValueError(f"{rect} is out of bounds for a {w}x{h} image")
    out = np.array(img, dtype=np.float64, copy=True)
    sl = rect.slices()
    out[sl] = apply(out[sl], spec, rng)
    return out
