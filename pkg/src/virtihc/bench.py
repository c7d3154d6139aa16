"""Synthetic A/B benchmark: the same paired data and seed, trained with and without the mid-cycle term."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .cyclegan import CycleGanModel, LossWeights, ModelConfig, TrainConfig, evaluate, to_images, to_tensor, train
from .datapipe import SyntheticConfig, patchify, split_dataset, stitch, synth_paired_dataset
from .errors import InputValidationError
from .image import write_png

RESULT_FIELDS = ["variant", "sdc_h", "sdc_target", "fid", "val_midcyc_init", "val_midcyc_final"]


@dataclass
class ABConfig:
    seed: int = 0
    steps: int = 300
    slides: int = 10
    canvas: int = 192
    n_stromal: int = 6
    n_epithelial: int = 5
    noise: float = 0.01
    patch: int = 64
    blocks: int = 2
    base_filters: int = 8
    filter_cap: int = 32
    disc_filters: tuple[int, int, int] = (8, 16, 32)
    batch_size: int = 8
    lr: float = 1e-3
    lambda1: float = 10.0
    lambda2: float = 50.0
    thresholds: tuple[float, float] = (0.15, 0.15)
    fid_dim: int = 32
    variants: tuple[str, ...] = ("mid_cycle", "unaltered")

    def __post_init__(self):
        self.disc_filters = tuple(self.disc_filters)
        self.thresholds = tuple(self.thresholds)
        self.variants = tuple(self.variants)
        if self.slides < 10:
            raise InputValidationError("need at least 10 slides so the 10% val and test splits are non-empty")
        if self.canvas < self.patch:
            raise InputValidationError("canvas must be at least one patch wide")
        if self.steps < 1:
            raise InputValidationError("steps must be positive")

    def synthetic(self, index: int) -> SyntheticConfig:
        return SyntheticConfig(
            height=self.canvas,
            width=self.canvas,
            n_stromal=self.n_stromal,
            n_epithelial=self.n_epithelial,
            noise=self.noise,
            seed=1000 * self.seed + index,
        )

    def model(self) -> ModelConfig:
        return ModelConfig(self.patch, self.blocks, self.base_filters, self.filter_cap, self.disc_filters, self.seed)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def run_ab_bench(cfg: ABConfig, out_dir, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train every variant on one seeded synthetic dataset and score it on the held-out slides.

    Scores use the final weights after ``cfg.steps`` updates, deconvolved
    through the true IHC stain matrix of the generator.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)

    pairs = []
    slides = {}
    for i in range(cfg.slides):
        he, ihc = synth_paired_dataset(cfg.synthetic(i))
        slides[f"s{i:02d}"] = (he, ihc)
        pairs += patchify(he, ihc, cfg.patch, cfg.patch, 0.0, f"s{i:02d}")
    split = split_dataset(pairs, (0.8, 0.1, 0.1), seed=cfg.seed, by_slide=True)
    as_tuples = lambda ps: [(p.he, p.ihc) for p in ps]  # noqa: E731
    train_pairs, val_pairs, test_pairs = as_tuples(split.train), as_tuples(split.val), as_tuples(split.test)
    stain_matrix = cfg.synthetic(0).ihc_matrix()
    test_ids = sorted({p.slide_id for p in split.test})
    log(f"dataset: {len(train_pairs)} train / {len(val_pairs)} val / {len(test_pairs)} test patches")

    for sid in test_ids:
        write_png(out / f"test_{sid}_he.png", slides[sid][0])
        write_png(out / f"test_{sid}_ihc.png", slides[sid][1])

    results = []
    for variant in cfg.variants:
        t0 = time.perf_counter()
        model = CycleGanModel(cfg.model(), LossWeights(cfg.lambda1, cfg.lambda2))
        init = evaluate(model, val_pairs, stain_matrix, cfg.thresholds, cfg.fid_dim, cfg.seed)["val_midcyc"]
        tcfg = TrainConfig(
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            lr=cfg.lr,
            variant=variant,
            max_steps=cfg.steps,
            thresholds=cfg.thresholds,
            fid_dim=cfg.fid_dim,
        )
        vdir = out / variant
        history = train(model, train_pairs, tcfg, val_pairs, stain_matrix, vdir)
        history.write_csv(vdir / "history.csv")
        final_val = evaluate(model, val_pairs, stain_matrix, cfg.thresholds, cfg.fid_dim, cfg.seed)["val_midcyc"]
        test = evaluate(model, test_pairs, stain_matrix, cfg.thresholds, cfg.fid_dim, cfg.seed)
        (vdir / "sdc_report.json").write_text(test["report"].to_json() + "\n")

        for sid in test_ids:
            own = [p for p in split.test if p.slide_id == sid]
            fake = to_images(model.g_ae.forward(to_tensor([p.he for p in own]).astype(model.dtype), training=False))
            canvas = slides[sid][0].shape[:2]
            write_png(vdir / f"virtual_{sid}.png", stitch(list(zip(fake, [p.origin for p in own])), canvas))

        row = {
            "variant": variant,
            "sdc_h": test["val_sdc_h"],
            "sdc_target": test["val_sdc_target"],
            "fid": test["val_fid"],
            "val_midcyc_init": init,
            "val_midcyc_final": final_val,
        }
        results.append(row)
        log(
            f"{variant}: sdc_h={row['sdc_h']:.4f} sdc_target={row['sdc_target']:.4f} "
            f"fid={_fmt(row['fid'])} midcyc {init:.4f}->{final_val:.4f} ({time.perf_counter() - t0:.1f}s)"
        )

    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in results:
            writer.writerow({k: row[k] if k == "variant" else _fmt(row[k]) for k in RESULT_FIELDS})
    (out / "results.json").write_text(json.dumps({"config": asdict(cfg), "results": results}, indent=2) + "\n")
    (out / "summary.txt").write_text(summary_text(cfg, results))
    return results


def summary_text(cfg: ABConfig, results: list[dict]) -> str:
    lines = [
        f"A/B benchmark, seed {cfg.seed}, {cfg.steps} steps, {cfg.patch}x{cfg.patch} patches",
        "",
        f"{'variant':<12}{'SDC-H':>10}{'SDC-target':>12}{'FID':>10}",
    ]
    for r in results:
        lines.append(f"{r['variant']:<12}{r['sdc_h']:>10.4f}{r['sdc_target']:>12.4f}{_fmt(r['fid']):>10}")
    by = {r["variant"]: r for r in results}
    if "mid_cycle" in by and "unaltered" in by:
        diff = by["mid_cycle"]["sdc_target"] - by["unaltered"]["sdc_target"]
        verdict = "at least" if diff >= 0 else "below"
        lines += ["", f"mid-cycle target-stain SDC is {verdict} the unaltered score ({diff:+.4f})"]
    return "\n".join(lines) + "\n"
