"""CycleGAN with an optional mid-cycle L1 term for paired stain translation.

Domains: X is H&E, Y is the IHC target stain. ``g_ae`` maps X -> Y, ``g_he``
maps Y -> X, ``d_ae`` judges Y images and ``d_he`` judges X images.

The total generator objective is::

    gan_ae + gan_he + lambda1 * cyc + lambda2 * midcyc

where ``gan_*`` use the non-saturating form ``-mean(log D(G(.)))`` and the
``midcyc`` term (``mean |G_AE(x) - y|``) is only present in the ``mid_cycle``
variant. Neither variant has an identity loss.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DimensionError, InputValidationError, NumericError
from .nnet import (
    Adam,
    BatchNorm,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    LeakyReLU,
    LrSchedule,
    ReLU,
    Sequential,
    Sigmoid,
    Tanh,
    cosine_lr,
)
from .nnet import checkpoint

VARIANTS = ("unaltered", "mid_cycle")
PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 50.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputValidationError("loss weights must be nonnegative")


@dataclass
class ModelConfig:
    patch_size: int = 64
    blocks: int = 4
    base_filters: int = 64
    filter_cap: int = 256
    disc_filters: tuple[int, int, int] = (64, 128, 256)
    seed: int = 0

    def __post_init__(self):
        self.disc_filters = tuple(self.disc_filters)
        if self.blocks < 1 or self.base_filters < 1 or self.filter_cap < 1:
            raise InputValidationError("blocks and filter counts must be positive")
        if self.patch_size % (2**self.blocks):
            raise InputValidationError(f"patch_size must be divisible by 2**blocks = {2**self.blocks}")
        if len(self.disc_filters) != 3:
            raise InputValidationError("discriminator needs exactly three filter counts")

    def encoder_filters(self) -> list[int]:
        return [min(self.base_filters * 2**i, self.filter_cap) for i in range(self.blocks)]


# paper scale: 512px patches, first block 256x256x64, bottleneck 1x1x512
PAPER_MODEL = ModelConfig(patch_size=512, blocks=9, base_filters=64, filter_cap=512)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.5
    variant: str = "mid_cycle"
    max_steps: int | None = None
    thresholds: tuple[float, float] = (0.15, 0.15)
    fid_dim: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InputValidationError("epochs, batch_size and lr must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise InputValidationError("max_steps must be positive")
        self.thresholds = tuple(self.thresholds)


def to_tensor(imgs) -> np.ndarray:
    """Stack [0, 1] RGB images into an NHWC float32 tensor in [-1, 1]."""
    return (np.stack([np.asarray(i, dtype=np.float32) for i in imgs]) * 2.0 - 1.0).astype(np.float32)


def to_images(t: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(t, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


class Generator:
    """Encoder of stride-2 conv blocks, mirrored conv-transpose decoder, tanh output."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32, name="g"):
        self.cfg = cfg
        self.name = name
        filters = cfg.encoder_filters()
        layers = []
        c_in = 3
        for i, f in enumerate(filters):
            layers += [
                Conv2D(c_in, f, rng, dtype=dtype, name=f"{name}.enc{i}.conv"),
                BatchNorm(f, dtype=dtype, name=f"{name}.enc{i}.bn"),
                LeakyReLU(0.2),
            ]
            c_in = f
        for j, f in enumerate(reversed(filters[:-1])):
            layers += [
                ConvTranspose2D(c_in, f, rng, dtype=dtype, name=f"{name}.dec{j}.deconv"),
                BatchNorm(f, dtype=dtype, name=f"{name}.dec{j}.bn"),
                ReLU(),
            ]
            c_in = f
        layers += [ConvTranspose2D(c_in, 3, rng, dtype=dtype, name=f"{name}.out.deconv"), Tanh()]
        self.net = Sequential(layers, name=name)

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[3] != 3:
            raise DimensionError(f"{self.name}: expected N x H x W x 3, got {x.shape}")
        step = 2**self.cfg.blocks
        if x.shape[1] % step or x.shape[2] % step:
            raise DimensionError(f"{self.name}: spatial size must be divisible by {step}, got {x.shape[1:3]}")
        return self.net.forward(x, training)

    def backward(self, g):
        return self.net.backward(g)

    def params(self):
        return self.net.params()

    def buffers(self):
        return self.net.buffers()

    def translate(self, img: np.ndarray) -> np.ndarray:
        """Map one [0, 1] RGB patch with running batch-norm statistics."""
        dtype = self.params()[0].value.dtype
        out = self.forward(to_tensor([img]).astype(dtype), training=False)
        return to_images(out[0])


class Discriminator:
    """Three conv + batch-norm + ReLU blocks, then dense -> sigmoid."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32, name="d"):
        self.name = name
        layers = []
        c_in = 3
        for i, f in enumerate(cfg.disc_filters):
            layers += [
                Conv2D(c_in, f, rng, dtype=dtype, name=f"{name}.b{i}.conv"),
                BatchNorm(f, dtype=dtype, name=f"{name}.b{i}.bn"),
                ReLU(),
            ]
            c_in = f
        side = cfg.patch_size
        for _ in range(3):
            side = math.ceil(side / 2)
        layers += [Flatten(), Dense(side * side * c_in, 1, rng, dtype=dtype, name=f"{name}.dense"), Sigmoid()]
        self.net = Sequential(layers, name=name)

    def forward(self, x, training=True):
        return self.net.forward(x, training)[:, 0]

    def backward(self, g):
        return self.net.backward(np.asarray(g).reshape(-1, 1))

    def params(self):
        return self.net.params()

    def buffers(self):
        return self.net.buffers()


class CycleGanModel:
    def __init__(self, cfg: ModelConfig | None = None, weights: LossWeights | None = None, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.weights = weights or LossWeights()
        self.dtype = dtype
        rng = np.random.default_rng(self.cfg.seed)
        self.g_ae = Generator(self.cfg, rng, dtype, "g_ae")
        self.g_he = Generator(self.cfg, rng, dtype, "g_he")
        self.d_ae = Discriminator(self.cfg, rng, dtype, "d_ae")
        self.d_he = Discriminator(self.cfg, rng, dtype, "d_he")

    def generator_params(self):
        return self.g_ae.params() + self.g_he.params()

    def discriminator_params(self):
        return self.d_ae.params() + self.d_he.params()

    def state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for net in (self.g_ae, self.g_he, self.d_ae, self.d_he):
            out += [(p.name, p.value) for p in net.params()]
            out += list(net.buffers())
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.state())

    def load(self, path) -> None:
        checkpoint.assign(self.state(), checkpoint.load(path), str(path))


# ---------------------------------------------------------------- losses


def adversarial_loss(d_real, d_fake) -> tuple[float, float]:
    """Discriminator and (non-saturating) generator losses from probabilities."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    if d_real.size == 0 or d_fake.size == 0:
        raise InputValidationError("empty batch")
    r = np.clip(d_real, PROB_CLAMP, 1 - PROB_CLAMP)
    f = np.clip(d_fake, PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = -np.mean(np.log(r)) - np.mean(np.log(1 - f))
    g_loss = -np.mean(np.log(f))
    return float(d_loss), float(g_loss)


def generator_adversarial_loss(d_fake) -> float:
    f = np.clip(np.asarray(d_fake, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(np.log(f)))


def _inside(p):
    return ((p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)).astype(np.float64)


def adversarial_grads(d_real, d_fake):
    """Gradients of (d_loss wrt real, d_loss wrt fake, g_loss wrt fake) probabilities."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    nr, nf = d_real.size, d_fake.size
    r = np.clip(d_real, PROB_CLAMP, 1 - PROB_CLAMP)
    f = np.clip(d_fake, PROB_CLAMP, 1 - PROB_CLAMP)
    return (
        -_inside(d_real) / (nr * r),
        _inside(d_fake) / (nf * (1 - f)),
        -_inside(d_fake) / (nf * f),
    )


def l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> np.ndarray:
    """Gradient of ``mean |a - b|`` with respect to ``a``."""
    return np.sign(a - b) / a.size


def cycle_consistency_loss(x, x_rec, y, y_rec) -> float:
    return l1(x_rec, x) + l1(y_rec, y)


def mid_cycle_loss(g_of_x, y) -> float:
    """``mean |G(x) - y|``; needs the aligned ground-truth target ``y``."""
    if y is None:
        raise InputValidationError("mid-cycle loss needs a paired ground-truth target")
    return l1(g_of_x, y)


@dataclass
class LossBreakdown:
    gan_ae: float
    gan_he: float
    cyc: float
    midcyc: float
    total: float


def combine_losses(gan_ae, gan_he, cyc, midcyc, weights: LossWeights, variant: str) -> LossBreakdown:
    if variant not in VARIANTS:
        raise InputValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    total = gan_ae + gan_he + weights.lambda1 * cyc
    if variant == "mid_cycle":
        total += weights.lambda2 * midcyc
    return LossBreakdown(gan_ae, gan_he, cyc, midcyc, total)


def _d_on_pair(d: Discriminator, real, fake):
    """Run ``d`` on a 50/50 real/fake batch; returns (p_real, p_fake)."""
    p = d.forward(np.concatenate([real, fake]))
    n = real.shape[0]
    return p[:n], p[n:]


def generator_pass(model: CycleGanModel, x, y, variant: str, backward: bool = True) -> LossBreakdown:
    """Forward both cycles, and optionally accumulate generator gradients.

    Discriminator gradients are accumulated as a side effect; callers must zero
    them before the discriminator update.
    """
    w = model.weights
    mid_on = variant == "mid_cycle"
    # X -> Y -> X
    fake_y = model.g_ae.forward(x)
    rec_x = model.g_he.forward(fake_y)
    _, p_fake = _d_on_pair(model.d_ae, y, fake_y)
    gan_ae = generator_adversarial_loss(p_fake)
    cyc_x = l1(rec_x, x)
    mid = mid_cycle_loss(fake_y, y)
    if backward:
        _, _, g_fake = adversarial_grads(p_fake, p_fake)
        dp = np.concatenate([np.zeros(y.shape[0]), g_fake]).astype(x.dtype)
        d_fake_y = model.d_ae.backward(dp)[y.shape[0]:]
        d_fake_y = d_fake_y + model.g_he.backward((w.lambda1 * l1_grad(rec_x, x)).astype(x.dtype))
        if mid_on:
            d_fake_y = d_fake_y + (w.lambda2 * l1_grad(fake_y, y)).astype(x.dtype)
        model.g_ae.backward(d_fake_y)
    # Y -> X -> Y
    fake_x = model.g_he.forward(y)
    rec_y = model.g_ae.forward(fake_x)
    _, p_fake = _d_on_pair(model.d_he, x, fake_x)
    gan_he = generator_adversarial_loss(p_fake)
    cyc_y = l1(rec_y, y)
    if backward:
        _, _, g_fake = adversarial_grads(p_fake, p_fake)
        dp = np.concatenate([np.zeros(x.shape[0]), g_fake]).astype(x.dtype)
        d_fake_x = model.d_he.backward(dp)[x.shape[0]:]
        d_fake_x = d_fake_x + model.g_ae.backward((w.lambda1 * l1_grad(rec_y, y)).astype(x.dtype))
        model.g_he.backward(d_fake_x)
    return combine_losses(gan_ae, gan_he, cyc_x + cyc_y, mid, w, variant)


def discriminator_pass(model: CycleGanModel, x, y, backward: bool = True) -> tuple[float, float]:
    fake_y = model.g_ae.forward(x)
    fake_x = model.g_he.forward(y)
    losses = []
    for d, real, fake in ((model.d_ae, y, fake_y), (model.d_he, x, fake_x)):
        p_real, p_fake = _d_on_pair(d, real, fake)
        d_loss, _ = adversarial_loss(p_real, p_fake)
        losses.append(d_loss)
        if backward:
            g_real, g_fake, _ = adversarial_grads(p_real, p_fake)
            d.backward(np.concatenate([g_real, g_fake]).astype(x.dtype))
    return losses[0], losses[1]


def total_loss(model: CycleGanModel, batch, variant: str) -> LossBreakdown:
    """Loss breakdown for ``batch = (x, y)`` tensors without touching any gradients."""
    x, y = batch
    return generator_pass(model, x, y, variant, backward=False)


def _zero(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- training

HISTORY_FIELDS = [
    "step",
    "epoch",
    "lr",
    "d_ae",
    "d_he",
    "gan_ae",
    "gan_he",
    "cyc",
    "midcyc",
    "total",
    "val_sdc_h",
    "val_sdc_target",
    "val_fid",
    "val_midcyc",
]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in HISTORY_FIELDS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def select_best(epochs: list[dict]) -> int | None:
    """Epoch with the best rank sum of (lowest loss, highest target SDC, lowest FID)."""
    scored = [e for e in epochs if e.get("val_sdc_target") is not None]
    if not scored:
        return None

    def ranks(key, reverse):
        order = sorted(range(len(scored)), key=lambda i: scored[i][key], reverse=reverse)
        r = [0] * len(scored)
        for pos, i in enumerate(order):
            r[i] = pos
        return r

    total = [a + b + c for a, b, c in zip(ranks("total", False), ranks("val_sdc_target", True), ranks("val_fid", False))]
    best = min(range(len(scored)), key=lambda i: (total[i], scored[i]["epoch"]))
    return scored[best]["epoch"]


def evaluate(model: CycleGanModel, pairs, stain_matrix, thresholds=(0.15, 0.15), fid_dim=32, seed=0) -> dict:
    """Validation metrics of ``g_ae`` on ``(he, ihc)`` pairs.

    SDC counts are pooled over all patches; FID uses the toy feature extractor.
    """
    from .metrics import frechet_distance, gaussian_stats, staining_dice_coefficient, toy_features

    he = [p[0] for p in pairs]
    ihc = [p[1] for p in pairs]
    dtype = model.g_ae.params()[0].value.dtype
    out_t = model.g_ae.forward(to_tensor(he).astype(dtype), training=False)
    virtual = list(to_images(out_t))
    report = staining_dice_coefficient(np.concatenate(virtual), np.concatenate(ihc), stain_matrix, thresholds)
    out = {
        "val_sdc_h": report.stains[0].dice,
        "val_sdc_target": report.stains[1].dice,
        "val_midcyc": l1(out_t, to_tensor(ihc)),
        "val_fid": None,
    }
    if len(pairs) >= 2:
        fr = toy_features(ihc, fid_dim, seed)
        fv = toy_features(virtual, fid_dim, seed)
        out["val_fid"] = frechet_distance(gaussian_stats(fr), gaussian_stats(fv))
    out["report"] = report
    return out


def train(
    model: CycleGanModel,
    pairs,
    cfg: TrainConfig,
    val_pairs=None,
    stain_matrix=None,
    out_dir=None,
    log: Callable[[str], None] | None = None,
) -> History:
    """Alternate discriminator and generator Adam updates over paired patches.

    ``pairs`` and ``val_pairs`` are sequences of ``(he, ihc)`` [0, 1] RGB
    arrays. Checkpoints go to ``out_dir/checkpoints`` after every epoch, plus
    ``best.bin`` for the selected epoch.
    """
    if not pairs:
        raise InputValidationError("training set is empty")
    if cfg.variant not in VARIANTS:
        raise InputValidationError(f"unknown variant {cfg.variant!r}")
    x_all = to_tensor([p[0] for p in pairs]).astype(model.dtype)
    y_all = to_tensor([p[1] for p in pairs]).astype(model.dtype)
    n = len(pairs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = cfg.max_steps
    epochs = math.ceil(total_steps / steps_per_epoch)
    sched = LrSchedule(cfg.lr, total_steps)
    opt_g = Adam(model.generator_params(), beta1=cfg.beta1)
    opt_d = Adam(model.discriminator_params(), beta1=cfg.beta1)
    rng = np.random.default_rng(cfg.seed)
    if val_pairs and stain_matrix is None:
        from .image import tissue_mask
        from .stain import estimate_stain_matrix

        target = np.concatenate([p[1] for p in pairs])
        stain_matrix = estimate_stain_matrix(target, tissue_mask(target), seed=cfg.seed)

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = History()
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        epoch_totals = []
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            lr = cosine_lr(step, sched)

            d_ae, d_he = discriminator_pass(model, x, y)
            opt_d.step(lr)
            parts = generator_pass(model, x, y, cfg.variant)
            _zero(model.discriminator_params())
            row = {"step": step, "epoch": epoch, "lr": lr, "d_ae": d_ae, "d_he": d_he, **asdict(parts)}
            for key in ("d_ae", "d_he", "gan_ae", "gan_he", "cyc", "midcyc", "total"):
                if not math.isfinite(row[key]):
                    raise NumericError(f"step {step}: non-finite {key} loss ({row[key]})")
            opt_g.step(lr)
            history.rows.append(row)
            epoch_totals.append(parts.total)
            step += 1

        summary = {"epoch": epoch, "step": step, "total": float(np.mean(epoch_totals))}
        if val_pairs:
            metrics = evaluate(model, val_pairs, stain_matrix, cfg.thresholds, cfg.fid_dim, cfg.seed)
            metrics.pop("report")
            summary.update(metrics)
            history.rows[-1].update(metrics)
        history.epochs.append(summary)
        if ckpt_dir is not None:
            model.save(ckpt_dir / f"epoch_{epoch:03d}.bin")
        if log:
            log(
                f"epoch {epoch}/{epochs} step {step} total={summary['total']:.4f}"
                + (f" sdc_target={summary['val_sdc_target']:.4f}" if val_pairs else "")
            )

    history.best_epoch = select_best(history.epochs)
    if ckpt_dir is not None and history.best_epoch is not None:
        best = ckpt_dir / f"epoch_{history.best_epoch:03d}.bin"
        (ckpt_dir / "best.bin").write_bytes(best.read_bytes())
    return history


# ---------------------------------------------------------------- inference


def _tile_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def feather_weights(patch: int, overlap: int) -> np.ndarray:
    """Separable ramp that is 1 in the interior and falls off over ``overlap`` pixels."""
    i = np.arange(patch)
    ramp = np.minimum(np.minimum(i + 1, patch - i), overlap + 1) / (overlap + 1)
    return np.outer(ramp, ramp)


def infer(generator, src: np.ndarray, patch: int, overlap: int = 0) -> np.ndarray:
    """Translate a whole image tile by tile, feather-blending overlapping tiles.

    ``generator`` only needs a ``translate(patch_image) -> patch_image`` method.
    """
    from .image import check_rgb

    src = check_rgb(src, "source")
    h, w = src.shape[:2]
    if patch > h or patch > w:
        raise InputValidationError(f"patch {patch} larger than image {h}x{w}")
    if not 0 <= overlap < patch:
        raise InputValidationError("overlap must be in [0, patch)")
    stride = patch - overlap
    weight = feather_weights(patch, overlap)[..., None]
    acc = np.zeros((h, w, 3))
    norm = np.zeros((h, w, 1))
    for y0 in _tile_starts(h, patch, stride):
        for x0 in _tile_starts(w, patch, stride):
            out = generator.translate(src[y0 : y0 + patch, x0 : x0 + patch])
            acc[y0 : y0 + patch, x0 : x0 + patch] += weight * out
            norm[y0 : y0 + patch, x0 : x0 + patch] += weight
    return np.clip(acc / norm, 0.0, 1.0)
