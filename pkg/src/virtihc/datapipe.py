"""Paired patch extraction, dataset splits, synthetic stain pairs and stitching.

On-disk patch layout written by :func:`write_dataset`::

    <root>/manifest.json
    <root>/<split>/<slide_id>_x<x>_y<y>_he.png
    <root>/<split>/<slide_id>_x<x>_y<y>_ihc.png

``manifest.json`` is a list of ``{slide_id, origin: [x, y], he_path, ihc_path, split}``
with paths relative to the manifest.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateHistogramError, DimensionError, InputValidationError, ParseError
from .image import check_rgb, read_png, rgb_to_lab, tissue_mask, write_png
from .stain import StainMatrix, render

HAEMATOXYLIN = (0.65, 0.70, 0.29)
EOSIN = (0.07, 0.99, 0.11)
DAB = (0.27, 0.57, 0.78)

SPLITS = ("train", "val", "test")


@dataclass
class PatchPair:
    he: np.ndarray
    ihc: np.ndarray
    origin: tuple[int, int]
    slide_id: str = "slide0"


@dataclass
class DatasetSplit:
    train: list[PatchPair]
    val: list[PatchPair]
    test: list[PatchPair]
    ratios: tuple[float, float, float]
    by_slide: bool

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _mask_or_empty(img: np.ndarray) -> np.ndarray:
    try:
        return tissue_mask(img)
    except DegenerateHistogramError:
        # a flat image is all background if it is light, all tissue otherwise
        light = rgb_to_lab(img[:1, :1])[0, 0, 0] > 50.0
        return np.full(img.shape[:2], not light)


def patchify(
    he: np.ndarray,
    ihc: np.ndarray,
    patch: int,
    stride: int | None = None,
    min_tissue_fraction: float = 0.0,
    slide_id: str = "slide0",
) -> list[PatchPair]:
    """Cut aligned patch pairs on a regular row-major grid.

    A pair is kept when the H&E tissue fraction inside its window is at least
    ``min_tissue_fraction``.
    """
    he = check_rgb(he, "he")
    ihc = check_rgb(ihc, "ihc")
    if he.shape != ihc.shape:
        raise DimensionError(f"H&E {he.shape} and IHC {ihc.shape} dimensions differ")
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise InputValidationError("min_tissue_fraction must be in [0, 1]")
    stride = stride or patch
    if patch < 1 or stride < 1:
        raise InputValidationError("patch and stride must be positive")
    h, w = he.shape[:2]
    mask = _mask_or_empty(he) if min_tissue_fraction > 0 else None
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            if mask is not None and mask[y : y + patch, x : x + patch].mean() < min_tissue_fraction:
                continue
            out.append(
                PatchPair(
                    he[y : y + patch, x : x + patch].copy(),
                    ihc[y : y + patch, x : x + patch].copy(),
                    (x, y),
                    slide_id,
                )
            )
    return out


def _partition(units: list, ratios, rng) -> tuple[list, list, list]:
    order = rng.permutation(len(units))
    n = len(units)
    n_val = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    n_train = n - n_val - n_test
    shuffled = [units[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def split_dataset(
    pairs: list[PatchPair], ratios=(0.8, 0.1, 0.1), seed: int = 0, by_slide: bool = True
) -> DatasetSplit:
    """Seeded shuffle and partition; val/test sizes are floored, the remainder goes to train.

    With ``by_slide`` and more than one slide id, whole slides are assigned to
    partitions so no slide leaks across them.
    """
    if not pairs:
        raise InputValidationError("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise InputValidationError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    slides = sorted({p.slide_id for p in pairs})
    grouped = by_slide and len(slides) > 1
    if grouped:
        tr, va, te = _partition(slides, ratios, rng)
        pick = lambda ids: [p for p in pairs if p.slide_id in set(ids)]  # noqa: E731
        return DatasetSplit(pick(tr), pick(va), pick(te), ratios, True)
    tr, va, te = _partition(list(pairs), ratios, rng)
    return DatasetSplit(tr, va, te, ratios, False)


@dataclass
class SyntheticConfig:
    height: int = 256
    width: int = 256
    n_stromal: int = 10
    n_epithelial: int = 8
    stromal_radius: tuple[float, float] = (10.0, 30.0)
    epithelial_radius: tuple[float, float] = (8.0, 22.0)
    he_stains: tuple = (HAEMATOXYLIN, EOSIN)
    ihc_stains: tuple = (HAEMATOXYLIN, DAB)
    # per class (stroma, epithelium) concentration pairs for each render
    he_profiles: tuple = ((0.25, 0.80), (0.75, 0.35))
    ihc_profiles: tuple = ((0.45, 0.0), (0.20, 0.90))
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InputValidationError("canvas dimensions must be positive")
        if self.noise < 0:
            raise InputValidationError("noise must be nonnegative")
        StainMatrix.from_vectors(self.he_stains)
        StainMatrix.from_vectors(self.ihc_stains)

    def he_matrix(self) -> StainMatrix:
        return StainMatrix.from_vectors(self.he_stains)

    def ihc_matrix(self) -> StainMatrix:
        return StainMatrix.from_vectors(self.ihc_stains)


@dataclass
class SyntheticSlide:
    he: np.ndarray
    ihc: np.ndarray
    labels: np.ndarray  # 0 background, 1 stroma, 2 epithelium
    he_conc: np.ndarray
    ihc_conc: np.ndarray
    config: SyntheticConfig = field(repr=False)


def _draw_ellipses(labels, rng, count, radius, value, elongation):
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*radius)
        a, b = r * elongation, r
        theta = rng.uniform(0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        labels[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = value


def render_synthetic(cfg: SyntheticConfig) -> SyntheticSlide:
    """Render one geometry through the H&E-like and IHC-like stain models."""
    rng = np.random.default_rng(cfg.seed)
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int8)
    # stroma as elongated tubules, epithelium as rounder blobs on top
    _draw_ellipses(labels, rng, cfg.n_stromal, cfg.stromal_radius, 1, elongation=2.5)
    _draw_ellipses(labels, rng, cfg.n_epithelial, cfg.epithelial_radius, 2, elongation=1.3)

    def concentrations_for(profiles):
        table = np.zeros((3, 2))
        table[1:] = np.asarray(profiles, dtype=np.float64)
        return table[labels]

    he_conc = concentrations_for(cfg.he_profiles)
    ihc_conc = concentrations_for(cfg.ihc_profiles)
    he = render(he_conc, cfg.he_matrix())
    ihc = render(ihc_conc, cfg.ihc_matrix())
    if cfg.noise > 0:
        he = np.clip(he + rng.normal(0.0, cfg.noise, he.shape), 0.0, 1.0)
        ihc = np.clip(ihc + rng.normal(0.0, cfg.noise, ihc.shape), 0.0, 1.0)
    return SyntheticSlide(he, ihc, labels, he_conc, ihc_conc, cfg)


def synth_paired_dataset(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    slide = render_synthetic(cfg)
    return slide.he, slide.ihc


def stitch(patches, canvas: tuple[int, int]) -> np.ndarray:
    """Place ``(image, (x, y))`` patches on a white canvas, averaging overlaps."""
    h, w = canvas
    acc = np.zeros((h, w, 3))
    count = np.zeros((h, w, 1))
    for img, (x, y) in patches:
        img = np.asarray(img, dtype=np.float64)
        ph, pw = img.shape[:2]
        if x < 0 or y < 0 or x + pw > w or y + ph > h:
            raise DimensionError(f"patch at origin {(x, y)} of size {ph}x{pw} exceeds canvas {h}x{w}")
        acc[y : y + ph, x : x + pw] += img
        count[y : y + ph, x : x + pw] += 1
    out = np.ones((h, w, 3))
    covered = count[..., 0] > 0
    out[covered] = acc[covered] / count[covered]
    return out


def write_dataset(split: DatasetSplit, root) -> Path:
    root = Path(root)
    entries = []
    for name, pairs in split.parts().items():
        (root / name).mkdir(parents=True, exist_ok=True)
        for p in pairs:
            stem = f"{p.slide_id}_x{p.origin[0]}_y{p.origin[1]}"
            he_rel = f"{name}/{stem}_he.png"
            ihc_rel = f"{name}/{stem}_ihc.png"
            write_png(root / he_rel, p.he)
            write_png(root / ihc_rel, p.ihc)
            entries.append(
                {"slide_id": p.slide_id, "origin": list(p.origin), "he_path": he_rel, "ihc_path": ihc_rel, "split": name}
            )
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n")
    return manifest


def read_manifest(path) -> dict[str, list[PatchPair]]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed manifest ({exc})") from exc
    out: dict[str, list[PatchPair]] = {s: [] for s in SPLITS}
    base = path.parent
    for i, e in enumerate(entries):
        try:
            split = e["split"]
            pair = PatchPair(
                read_png(base / e["he_path"]),
                read_png(base / e["ihc_path"]),
                tuple(int(v) for v in e["origin"]),
                str(e["slide_id"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: entry {i} is malformed ({exc})") from exc
        if split not in out:
            raise ParseError(f"{path}: entry {i} has unknown split {split!r}")
        out[split].append(pair)
    return out
