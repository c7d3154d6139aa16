"""Staining Dice Coefficient and Frechet distance over pluggable image features."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    InputValidationError,
    InsufficientSamplesError,
    ParseError,
)
from .image import check_rgb, rgb_to_od
from .stain import StainMatrix, concentrations

DEFAULT_THRESHOLDS = (0.15, 0.15)
STAIN_NAMES = ("haematoxylin", "target")


def stain_masks(cm: np.ndarray, thresholds) -> list[np.ndarray]:
    cm = np.asarray(cm, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if thresholds.size != cm.shape[-1]:
        raise DimensionError(f"need {cm.shape[-1]} thresholds, got {thresholds.size}")
    if np.any(thresholds <= 0):
        raise InputValidationError("stain thresholds must be positive")
    return [cm[..., r] >= thresholds[r] for r in range(cm.shape[-1])]


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """Sorensen-Dice overlap ``2|X & Y| / (|X| + |Y|)``.

    Two empty masks agree perfectly and score 1.0.
    """
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise DimensionError(f"mask shapes differ: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


@dataclass
class StainDice:
    stain: str
    threshold: float
    target_count: int
    virtual_count: int
    intersection: int
    dice: float


@dataclass
class SdcReport:
    stains: list[StainDice]

    def dice_values(self) -> list[float]:
        return [s.dice for s in self.stains]

    def to_dict(self) -> dict:
        return {"stains": [asdict(s) for s in self.stains]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def sdc_from_concentrations(virtual_cm, target_cm, thresholds=DEFAULT_THRESHOLDS) -> SdcReport:
    virtual_cm = np.asarray(virtual_cm)
    target_cm = np.asarray(target_cm)
    if virtual_cm.shape != target_cm.shape:
        raise DimensionError(f"image shapes differ: {virtual_cm.shape} vs {target_cm.shape}")
    vm = stain_masks(virtual_cm, thresholds)
    tm = stain_masks(target_cm, thresholds)
    thr = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    rows = []
    for r, (v, t) in enumerate(zip(vm, tm)):
        rows.append(
            StainDice(
                stain=STAIN_NAMES[r] if r < len(STAIN_NAMES) else f"stain{r}",
                threshold=float(thr[r]),
                target_count=int(t.sum()),
                virtual_count=int(v.sum()),
                intersection=int(np.logical_and(v, t).sum()),
                dice=dice(v, t),
            )
        )
    return SdcReport(rows)


def staining_dice_coefficient(
    virtual: np.ndarray, target: np.ndarray, sm: StainMatrix, thresholds=DEFAULT_THRESHOLDS
) -> SdcReport:
    """Deconvolve both images through ``sm`` and compare thresholded stain masks."""
    virtual = check_rgb(virtual, "virtual")
    target = check_rgb(target, "target")
    if virtual.shape != target.shape:
        raise DimensionError(f"image shapes differ: {virtual.shape} vs {target.shape}")
    return sdc_from_concentrations(
        concentrations(rgb_to_od(virtual), sm), concentrations(rgb_to_od(target), sm), thresholds
    )


@dataclass
class FeatureCollection:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"features must be n x d, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InputValidationError("features contain non-finite values")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(f: FeatureCollection) -> GaussianStats:
    if f.n < 2:
        raise InsufficientSamplesError(f"need at least 2 feature vectors, got {f.n}")
    mean = f.data.mean(axis=0)
    centred = f.data - mean
    cov = centred.T @ centred / (f.n - 1)
    return GaussianStats(mean=mean, cov=0.5 * (cov + cov.T))


def sqrtm_psd(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > tol:
        raise InputValidationError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    mu1, mu2 = np.atleast_1d(g1.mean), np.atleast_1d(g2.mean)
    s1, s2 = np.atleast_2d(g1.cov), np.atleast_2d(g2.cov)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise DimensionError(f"feature dimensions differ: {mu1.shape} vs {mu2.shape}")
    root1 = sqrtm_psd(s1)
    middle = root1 @ s2 @ root1
    cross = sqrtm_psd(0.5 * (middle + middle.T))
    diff = mu1 - mu2
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def _pool_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Mean-pool an image onto a ``size x size`` grid (nearest repeat when smaller)."""
    h, w = img.shape[:2]
    rows = (np.arange(h) * size) // h
    cols = (np.arange(w) * size) // w
    out = np.zeros((size, size, img.shape[2]))
    counts = np.zeros((size, size, 1))
    np.add.at(out, (rows[:, None], cols[None, :]), img)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    if np.any(counts == 0):
        # upsampling: fill from the nearest source pixel
        ri = np.minimum((np.arange(size) * h) // size, h - 1)
        ci = np.minimum((np.arange(size) * w) // size, w - 1)
        return img[ri][:, ci]
    return out / counts


def toy_features(imgs, out_dim: int = 64, seed: int = 0) -> FeatureCollection:
    """Deterministic stand-in for a pretrained feature extractor.

    Per image: 16-bin histograms of each channel plus the 32x32 mean-pooled
    pixels, projected by a seeded Gaussian matrix to ``out_dim`` values.
    """
    imgs = list(imgs)
    if not imgs:
        raise InputValidationError("no images given")
    if out_dim < 8:
        raise InputValidationError("out_dim must be >= 8")
    shape = np.shape(imgs[0])
    raw = []
    for img in imgs:
        img = check_rgb(img)
        if img.shape != shape:
            raise DimensionError("all images must share one size")
        hists = [np.histogram(img[..., c], bins=16, range=(0.0, 1.0))[0] / img[..., c].size for c in range(3)]
        raw.append(np.concatenate(hists + [_pool_resize(img, 32).ravel()]))
    raw = np.asarray(raw)
    proj = np.random.default_rng(seed).standard_normal((raw.shape[1], out_dim)) / math.sqrt(raw.shape[1])
    return FeatureCollection(raw @ proj)


def write_features(path, f: FeatureCollection) -> None:
    """CSV: a first line ``n,d`` with the sizes, then ``n`` rows of ``d`` values."""
    lines = [f"{f.n},{f.d}"]
    lines += [",".join(f"{x:.17g}" for x in row) for row in f.data]
    Path(path).write_text("\n".join(lines) + "\n")


def read_features(path) -> FeatureCollection:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file") from exc
    if not lines:
        raise ParseError(f"{path}:1: empty file, expected header 'n,d'")
    try:
        n, d = (int(x) for x in lines[0].split(","))
    except ValueError as exc:
        raise ParseError(f"{path}:1: malformed header {lines[0]!r}, expected 'n,d'") from exc
    if n < 0 or d < 1:
        raise ParseError(f"{path}:1: invalid sizes n={n}, d={d}")
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != n:
        raise ParseError(f"{path}: header declares {n} rows, found {len(body)}")
    data = np.empty((n, d))
    for r, (lineno, ln) in enumerate(body):
        parts = ln.split(",")
        if len(parts) != d:
            raise ParseError(f"{path}:{lineno}: row {r + 1} has {len(parts)} values, expected {d}")
        try:
            data[r] = [float(x) for x in parts]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: row {r + 1} is not numeric") from exc
    return FeatureCollection(data)
