"""Image containers, colour-space conversions and tissue masking.

Images are plain numpy arrays:

* RGB images: ``(H, W, 3)`` float64 in ``[0, 1]``.
* Optical-density images: ``(H, W, C)`` nonnegative floats.
* LAB images: ``(H, W, 3)`` with L in ``[0, 100]``.
* Tissue masks: ``(H, W)`` bool, ``True`` on tissue.

Colour constants (sRGB primaries, D65 white):

* linearisation: ``c/12.92`` for ``c <= 0.04045`` else ``((c + 0.055)/1.055)**2.4``
* linear RGB -> XYZ uses ``SRGB_TO_XYZ`` below
* the reference white is ``SRGB_TO_XYZ @ (1, 1, 1)`` so that RGB white maps to
  L=100, a=b=0 exactly
* ``f(t) = t**(1/3)`` for ``t > (6/29)**3`` else ``t/(3*(6/29)**2) + 4/29``
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateHistogramError, DimensionError, InputValidationError

DEFAULT_EPS = 1.0 / 255.0

SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
WHITE_XYZ = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def check_rgb(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an RGB image and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name}: expected H x W x 3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name}: empty image")
    if not np.all(np.isfinite(arr)):
        raise InputValidationError(f"{name}: non-finite sample")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputValidationError(f"{name}: samples must lie in [0, 1]")
    return arr


def rgb_to_od(img: np.ndarray, i0: float = 1.0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Beer-Lambert optical density, ``-log10((v + eps) / i0)`` clamped at 0."""
    if not i0 > 0:
        raise InputValidationError("i0 must be positive")
    if eps < 0:
        raise InputValidationError("eps must be nonnegative")
    arr = check_rgb(img)
    with np.errstate(divide="ignore"):
        od = -np.log10((arr + eps) / i0)
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray, i0: float = 1.0) -> np.ndarray:
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise DimensionError(f"optical density image must have 3 channels, got shape {od.shape}")
    if not np.all(np.isfinite(od)):
        raise InputValidationError("optical density contains non-finite values")
    return np.clip(i0 * np.power(10.0, -od), 0.0, 1.0)


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    arr = check_rgb(img)
    xyz = _srgb_to_linear(arr) @ SRGB_TO_XYZ.T
    t = xyz / WHITE_XYZ
    f = np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut colours are clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))
    lin = (t * WHITE_XYZ) @ XYZ_TO_SRGB.T
    return np.clip(_linear_to_srgb(lin), 0.0, 1.0)


def downsample_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter mean over ``factor x factor`` blocks; edge blocks use the available pixels."""
    if factor < 1:
        raise InputValidationError("downsample factor must be >= 1")
    arr = np.asarray(arr, dtype=np.float64)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    pad = [(0, oh * factor - h), (0, ow * factor - w)] + [(0, 0)] * (arr.ndim - 2)
    ones = np.pad(np.ones((h, w)), pad[:2])
    summed = np.pad(arr, pad).reshape(oh, factor, ow, factor, *arr.shape[2:]).sum(axis=(1, 3))
    counts = ones.reshape(oh, factor, ow, factor).sum(axis=(1, 3))
    return summed / counts.reshape(oh, ow, *([1] * (arr.ndim - 2)))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a 1-D sample; raises if all values are equal."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12:
        raise DegenerateHistogramError("single-valued histogram: no tissue/background separation")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = hist / hist.sum()
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu0_sum = np.cumsum(p * centers)
    mu_total = mu0_sum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - mu0_sum) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    # threshold sits on the upper edge of the lower class
    return float(edges[k + 1])


def tissue_mask(img: np.ndarray, downsample: int = 1) -> np.ndarray:
    """Boolean mask of pixels darker than the Otsu threshold of the LAB L channel."""
    lightness = rgb_to_lab(img)[..., 0]
    small = downsample_mean(lightness, downsample)
    thr = otsu_threshold(small)
    return small < thr


def upsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Expand a (possibly downsampled) mask to full resolution ``shape``."""
    mask = np.asarray(mask, dtype=bool)
    h, w = shape
    mh, mw = mask.shape
    if (mh, mw) == (h, w):
        return mask
    for factor in range(2, max(h, w) + 1):
        if math.ceil(h / factor) == mh and math.ceil(w / factor) == mw:
            return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)[:h, :w]
    raise DimensionError(f"mask shape {mask.shape} does not match image shape {shape}")


def read_png(path) -> np.ndarray:
    path = Path(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise InputValidationError(f"{path}: not a PNG file")
        if im.mode != "RGB":
            raise InputValidationError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(check_rgb(img) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")
