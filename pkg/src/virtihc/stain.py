"""Stain-matrix estimation, deconvolution and normalisation in optical-density space.

The stain matrix is estimated with plain (non-sparse) multiplicative-update NMF
over optical-density pixels sampled from the whole tissue area.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    DegenerateValueWarning,
    DimensionError,
    InputValidationError,
    InsufficientTissueError,
    ParseError,
    SingularMatrixError,
)
from .image import check_rgb, lab_to_rgb, od_to_rgb, rgb_to_lab, rgb_to_od, upsample_mask

OD_BACKGROUND = 0.05
MIN_TISSUE_PIXELS = 100
MAX_CONDITION = 1e8
_TINY = 1e-12


@dataclass(frozen=True)
class StainMatrix:
    """Two unit-norm OD colour vectors, haematoxylin-like row first."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.shape != (2, 3):
            raise DimensionError(f"stain matrix must be 2 x 3, got {rows.shape}")
        if not np.all(np.isfinite(rows)) or rows.min() < 0:
            raise InputValidationError("stain matrix entries must be finite and nonnegative")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InputValidationError(f"stain rows must have unit norm, got {norms}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_vectors(cls, vectors) -> "StainMatrix":
        """Normalise arbitrary nonnegative vectors and put them in canonical order."""
        v = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms <= 0):
            raise DegenerateInputError("stain vector with zero norm")
        return cls(canonical_order(v / norms))

    def condition(self) -> float:
        return float(np.linalg.cond(self.rows))


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Order rows so the one absorbing the most red light (haematoxylin) comes first."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows[1, 0] > rows[0, 0]:
        return rows[::-1].copy()
    return rows.copy()


@dataclass(frozen=True)
class NormalizationReference:
    stain_matrix: StainMatrix
    max_concentration: np.ndarray

    def __post_init__(self):
        mc = np.array(self.max_concentration, dtype=np.float64).reshape(-1)
        if mc.shape != (2,) or not np.all(np.isfinite(mc)) or np.any(mc <= 0):
            raise InputValidationError("max_concentration must be two positive floats")
        object.__setattr__(self, "max_concentration", mc)

    def to_json(self) -> str:
        return json.dumps(
            {
                "stains": [[float(x) for x in r] for r in self.stain_matrix.rows],
                "max_concentration": [float(x) for x in self.max_concentration],
            },
            indent=2,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> "NormalizationReference":
        try:
            doc = json.loads(text)
            stains = doc["stains"]
            mc = doc.get("max_concentration", [1.0, 1.0])
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"{source}: malformed stain document ({exc})") from exc
        try:
            return cls(StainMatrix(np.asarray(stains, dtype=np.float64)), mc)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"{source}: invalid stain document ({exc})") from exc

    @classmethod
    def load(cls, path) -> "NormalizationReference":
        path = Path(path)
        return cls.from_json(path.read_text(), source=str(path))


@dataclass(frozen=True)
class ReinhardStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        std = np.asarray(self.std, dtype=np.float64)
        if std.shape != (3,) or np.any(std <= 0):
            raise InputValidationError("Reinhard std must be three positive floats")


@dataclass
class NMFResult:
    w: np.ndarray
    h: np.ndarray
    error: float
    objective: list[float] = field(default_factory=list)
    n_iter: int = 0


def _objective(v, w, h) -> float:
    r = v - w @ h
    return 0.5 * float(np.sum(r * r))


def _extreme_rows(v: np.ndarray, q: float = 0.5) -> np.ndarray:
    """Two rows of ``v`` spanning (robustly) the widest angle among its directions."""
    nz = v[np.linalg.norm(v, axis=1) > 0]
    u = nz / np.linalg.norm(nz, axis=1, keepdims=True)
    centre = u.mean(axis=0)
    centre /= np.linalg.norm(centre)
    k = int(q / 100.0 * len(u))
    first = np.argsort(u @ centre, kind="stable")[k]
    second = np.argsort(u @ u[first], kind="stable")[k]
    return np.stack([nz[first], nz[second]]).astype(np.float64)


def nmf_factorize(
    v: np.ndarray,
    rank: int = 2,
    max_iters: int = 2000,
    tol: float = 1e-7,
    seed: int = 0,
    init: str = "random",
) -> NMFResult:
    """Lee-Seung multiplicative updates for ``v ~= w @ h`` under the Frobenius loss.

    Stops when the relative decrease of ``0.5*||v - w h||^2`` falls below ``tol``
    or after ``max_iters`` iterations. ``error`` is the final Frobenius norm of
    the residual; ``objective`` holds the loss before the first and after every
    iteration.

    ``init="random"`` is the seeded uniform-positive start. ``init="extreme"``
    (rank 2 only) starts ``h`` from the two most divergent
    data directions and ``w`` from their least-squares fit, floored by small
    seeded uniform values so no entry starts at zero. Multiplicative updates move slowly along the flat valley of
    equally good cones, so a random start often stops on a cone that is too
    wide; stain estimation therefore uses the extreme start.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise DimensionError("nmf input must be a matrix")
    if not np.all(np.isfinite(v)) or v.min() < 0:
        raise InputValidationError("nmf input must be finite and nonnegative")
    p, q = v.shape
    if p < rank:
        raise DimensionError(f"need at least rank={rank} rows, got {p}")
    if not np.any(v > 0):
        raise DegenerateInputError("nmf input is all zeros")

    rng = np.random.default_rng(seed)
    scale = math.sqrt(float(v.mean()) / rank)
    if init == "extreme" and rank == 2:
        h = _extreme_rows(v)
        w = np.maximum(v @ np.linalg.pinv(h), rng.uniform(0.001, 0.002, size=(p, rank)) * scale)
    elif init in ("random", "extreme"):
        w = rng.uniform(0.1, 1.0, size=(p, rank)) * scale
        h = rng.uniform(0.1, 1.0, size=(rank, q)) * scale
    else:
        raise InputValidationError(f"unknown nmf init {init!r}")

    history = [_objective(v, w, h)]
    it = 0
    for it in range(1, max_iters + 1):
        h *= (w.T @ v) / (w.T @ w @ h + _TINY)
        w *= (v @ h.T) / (w @ (h @ h.T) + _TINY)
        history.append(_objective(v, w, h))
        prev, cur = history[-2], history[-1]
        if prev <= 0 or (prev - cur) / prev < tol:
            break
    err = float(np.linalg.norm(v - w @ h))
    return NMFResult(w=w, h=h, error=err, objective=history, n_iter=it)


def sample_tissue_od(
    img: np.ndarray, mask: np.ndarray, sample_count: int, seed: int
) -> np.ndarray:
    """Seeded uniform subsample of tissue pixels in OD, with near-background pixels dropped."""
    img = check_rgb(img)
    full = upsample_mask(mask, img.shape[:2])
    idx = np.flatnonzero(full.ravel())
    if idx.size < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(f"mask has {idx.size} tissue pixels, need {MIN_TISSUE_PIXELS}")
    rng = np.random.default_rng(seed)
    take = min(sample_count, idx.size)
    chosen = np.sort(rng.choice(idx, size=take, replace=False))
    od = rgb_to_od(img.reshape(-1, 1, 3)[chosen]).reshape(-1, 3)
    od = od[od.max(axis=1) >= OD_BACKGROUND]
    if od.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"only {od.shape[0]} stained pixels after background filtering, need {MIN_TISSUE_PIXELS}"
        )
    return od


def estimate_stain_matrix(
    img: np.ndarray, mask: np.ndarray, sample_count: int = 20000, seed: int = 0
) -> StainMatrix:
    if sample_count < MIN_TISSUE_PIXELS:
        raise InputValidationError(f"sample_count must be >= {MIN_TISSUE_PIXELS}")
    od = sample_tissue_od(img, mask, sample_count, seed)
    result = nmf_factorize(od, rank=2, seed=seed, init="extreme")
    return StainMatrix.from_vectors(result.h)


def concentrations(od: np.ndarray, sm: StainMatrix) -> np.ndarray:
    """Per-pixel stain intensities via the pseudo-inverse of the stain matrix, clamped at 0."""
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise DimensionError(f"optical density image must have 3 channels, got shape {od.shape}")
    if sm.condition() > MAX_CONDITION:
        raise SingularMatrixError("stain matrix rows are linearly dependent")
    pinv = np.linalg.pinv(sm.rows)  # 3 x 2
    c = od.reshape(-1, 3) @ pinv
    return np.maximum(c, 0.0).reshape(od.shape[0], od.shape[1], 2)


def render(conc: np.ndarray, sm: StainMatrix, i0: float = 1.0) -> np.ndarray:
    """RGB image from stain concentrations through ``sm``."""
    conc = np.asarray(conc, dtype=np.float64)
    od = conc.reshape(-1, 2) @ sm.rows
    return od_to_rgb(od.reshape(conc.shape[0], conc.shape[1], 3), i0)


def max_concentration(cm: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Robust per-stain concentration scale (nearest-rank percentile over stained pixels)."""
    if not 0 < percentile <= 100:
        raise InputValidationError("percentile must be in (0, 100]")
    cm = np.asarray(cm, dtype=np.float64)
    flat = cm.reshape(-1, cm.shape[-1])
    out = np.empty(flat.shape[1])
    for s in range(flat.shape[1]):
        col = flat[:, s]
        stained = np.sort(col[col > 0.01])
        if stained.size >= MIN_TISSUE_PIXELS:
            rank = max(1, math.ceil(percentile / 100.0 * stained.size))
            out[s] = stained[rank - 1]
        else:
            out[s] = float(col.max()) if col.size else 0.0
        if out[s] <= 0:
            warnings.warn(
                f"stain {s}: zero concentration scale replaced by 1.0", DegenerateValueWarning, stacklevel=2
            )
            out[s] = 1.0
    return out


def make_reference(
    img: np.ndarray, mask: np.ndarray, sample_count: int = 20000, seed: int = 0, percentile: float = 99.0
) -> NormalizationReference:
    sm = estimate_stain_matrix(img, mask, sample_count, seed)
    cm = concentrations(rgb_to_od(img), sm)
    return NormalizationReference(sm, max_concentration(cm, percentile))


def normalize_vahadane(
    src: np.ndarray,
    src_mask: np.ndarray,
    ref: NormalizationReference,
    seed: int = 0,
    sample_count: int = 20000,
    percentile: float = 99.0,
) -> np.ndarray:
    """Re-render ``src`` through the reference stain colours at the reference intensity scale."""
    src = check_rgb(src, "source")
    own = make_reference(src, src_mask, sample_count, seed, percentile)
    cm = concentrations(rgb_to_od(src), own.stain_matrix)
    cm = cm * (ref.max_concentration / own.max_concentration)
    return render(cm, ref.stain_matrix)


def reinhard_stats(img: np.ndarray, mask: np.ndarray) -> ReinhardStats:
    img = check_rgb(img)
    full = upsample_mask(mask, img.shape[:2])
    if full.sum() < 2:
        raise InsufficientTissueError("Reinhard statistics need at least 2 tissue pixels")
    lab = rgb_to_lab(img)[full]
    mean = lab.mean(axis=0)
    std = lab.std(axis=0)
    flat = std < 1e-9
    if np.any(flat):
        warnings.warn("zero LAB standard deviation replaced by 1e-6", DegenerateValueWarning, stacklevel=2)
        std = np.where(flat, 1e-6, std)
    return ReinhardStats(mean=mean, std=std)


def reinhard_normalize(src: np.ndarray, src_mask: np.ndarray, target: ReinhardStats) -> np.ndarray:
    src = check_rgb(src, "source")
    full = upsample_mask(src_mask, src.shape[:2])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateValueWarning)
        own = reinhard_stats(src, full)
    lab = rgb_to_lab(src)
    shifted = (lab[full] - own.mean) * (target.std / own.std) + target.mean
    out = src.copy()
    out[full] = lab_to_rgb(shifted)
    return out
