"""Command-line entry point: ``virtihc <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 unreadable or malformed data, 3
numeric failure. Every command that writes files echoes its full effective
configuration to ``effective-config.json`` in the output directory.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import NumericError, ParseError, VirtIHCError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "effective-config.json"
MODEL_NAME = "model.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


# ---------------------------------------------------------------- helpers


def _echo_config(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **{k: v for k, v in cfg.items() if k not in ("out", "func")}}
    (out_dir / CONFIG_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return doc


def _merge(args, explicit: set[str], fields) -> dict:
    """Defaults < config file < flags given on the command line."""
    cfg = {k: getattr(args, k) for k in fields}
    from_file = _load_config(getattr(args, "config", None))
    unknown = set(from_file) - set(fields)
    if unknown:
        raise ParseError(f"{args.config}: unknown config keys {sorted(unknown)}")
    for k, v in from_file.items():
        if k not in explicit:
            cfg[k] = v
    return cfg


def _read_image(path):
    from .image import read_png

    return read_png(path)


def _write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(path, format="PNG")


def _thresholds(args):
    return (args.threshold_h, args.threshold_target)


def _stain_matrix(args):
    from .datapipe import DAB, HAEMATOXYLIN
    from .stain import NormalizationReference, StainMatrix

    if args.stains:
        return NormalizationReference.load(args.stains).stain_matrix
    return StainMatrix.from_vectors([HAEMATOXYLIN, DAB])


# ---------------------------------------------------------------- commands


def cmd_synth(args, explicit):
    from .datapipe import SyntheticConfig, render_synthetic
    from .image import write_png

    fields = ["height", "width", "n_stromal", "n_epithelial", "noise", "seed"]
    cfg = SyntheticConfig(**_merge(args, explicit, fields))
    slide = render_synthetic(cfg)
    out = Path(args.out)
    _echo_config(out, "synth", asdict(cfg))
    write_png(out / "he.png", slide.he)
    write_png(out / "ihc.png", slide.ihc)
    Image.fromarray(slide.labels.astype(np.uint8) * 127).save(out / "labels.png", format="PNG")
    print(f"wrote {out / 'he.png'} and {out / 'ihc.png'}")


def cmd_mask(args, explicit):
    from .image import tissue_mask

    img = _read_image(args.image)
    mask = tissue_mask(img, args.downsample)
    out = Path(args.out)
    _echo_config(out.parent, "mask", vars(args))
    _write_mask(out, mask)
    print(f"tissue fraction {mask.mean():.4f}")


def cmd_fit_stains(args, explicit):
    from .image import tissue_mask
    from .stain import make_reference

    img = _read_image(args.image)
    ref = make_reference(img, tissue_mask(img), args.sample_count, args.seed, args.percentile)
    out = Path(args.out)
    _echo_config(out.parent, "fit-stains", vars(args))
    ref.save(out)
    print(ref.to_json())


def cmd_normalize(args, explicit):
    from .image import tissue_mask, write_png
    from .stain import NormalizationReference, make_reference, normalize_vahadane, reinhard_normalize, reinhard_stats

    src = _read_image(args.src)
    mask = tissue_mask(src)
    if args.method == "reinhard":
        if not args.reference_image:
            raise UsageError("reinhard needs --reference-image")
        ref_img = _read_image(args.reference_image)
        out_img = reinhard_normalize(src, mask, reinhard_stats(ref_img, tissue_mask(ref_img)))
    else:
        if args.reference:
            ref = NormalizationReference.load(args.reference)
        elif args.reference_image:
            ref_img = _read_image(args.reference_image)
            ref = make_reference(ref_img, tissue_mask(ref_img), args.sample_count, args.seed, args.percentile)
        else:
            raise UsageError("vahadane needs --reference or --reference-image")
        out_img = normalize_vahadane(src, mask, ref, args.seed, args.sample_count, args.percentile)
    out = Path(args.out)
    _echo_config(out.parent, "normalize", vars(args))
    write_png(out, out_img)


def cmd_patchify(args, explicit):
    from .datapipe import DatasetSplit, patchify, write_dataset

    he, ihc = _read_image(args.he), _read_image(args.ihc)
    pairs = patchify(he, ihc, args.patch, args.stride, args.min_tissue, args.slide_id)
    out = Path(args.out)
    _echo_config(out, "patchify", vars(args))
    write_dataset(DatasetSplit(pairs, [], [], (1.0, 0.0, 0.0), False), out)
    print(f"{len(pairs)} patch pairs")


def cmd_split(args, explicit):
    from .datapipe import read_manifest, split_dataset, write_dataset

    parts = [read_manifest(m) for m in args.manifest]
    pairs = [p for doc in parts for name in ("train", "val", "test") for p in doc[name]]
    sp = split_dataset(pairs, tuple(args.ratios), args.seed, not args.patch_level)
    out = Path(args.out)
    _echo_config(out, "split", vars(args))
    write_dataset(sp, out)
    print(f"train {len(sp.train)} / val {len(sp.val)} / test {len(sp.test)}")


TRAIN_FIELDS = [
    "loss",
    "lambda1",
    "lambda2",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "max_steps",
    "patch",
    "blocks",
    "base_filters",
    "filter_cap",
    "disc_filters",
    "threshold_h",
    "threshold_target",
    "fid_dim",
]


def _model_config(cfg: dict):
    from .cyclegan import ModelConfig

    return ModelConfig(cfg["patch"], cfg["blocks"], cfg["base_filters"], cfg["filter_cap"], tuple(cfg["disc_filters"]), cfg["seed"])


def cmd_train(args, explicit):
    from .cyclegan import CycleGanModel, LossWeights, TrainConfig, train
    from .datapipe import read_manifest

    cfg = _merge(args, explicit, TRAIN_FIELDS)
    if cfg["loss"] not in ("unaltered", "mid-cycle"):
        raise UsageError(f"--loss must be unaltered or mid-cycle, got {cfg['loss']!r}")
    data = read_manifest(args.data)
    pairs = [(p.he, p.ihc) for p in data["train"]]
    val = [(p.he, p.ihc) for p in data["val"]] or None
    model = CycleGanModel(_model_config(cfg), LossWeights(cfg["lambda1"], cfg["lambda2"]))
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        variant=cfg["loss"].replace("-", "_"),
        max_steps=cfg["max_steps"],
        thresholds=(cfg["threshold_h"], cfg["threshold_target"]),
        fid_dim=cfg["fid_dim"],
    )
    out = Path(args.out)
    _echo_config(out, "train", {**cfg, "data": str(args.data)})
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints" / MODEL_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    stains = _stain_matrix(args) if val else None
    history = train(model, pairs, tcfg, val, stains, out, log=lambda m: print(m, file=sys.stderr))
    history.write_csv(out / "history.csv")
    (out / "epochs.json").write_text(json.dumps({"best_epoch": history.best_epoch, "epochs": history.epochs}, indent=2) + "\n")
    print(f"best epoch {history.best_epoch}")


def cmd_infer(args, explicit):
    from .cyclegan import CycleGanModel, infer
    from .image import write_png

    run = Path(args.run)
    cfg_path = run / "checkpoints" / MODEL_NAME
    try:
        cfg = json.loads(cfg_path.read_text())
        model = CycleGanModel(_model_config(cfg))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{cfg_path}: not a model config ({exc})") from exc
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / "best.bin"
    model.load(ckpt)
    src = _read_image(args.src)
    out_img = infer(model.g_ae, src, args.patch or cfg["patch"], args.overlap)
    out = Path(args.out)
    _echo_config(out.parent, "infer", {**vars(args), "checkpoint": str(ckpt)})
    write_png(out, out_img)


def cmd_sdc(args, explicit):
    from .metrics import staining_dice_coefficient

    report = staining_dice_coefficient(_read_image(args.virtual), _read_image(args.target), _stain_matrix(args), _thresholds(args))
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        _echo_config(out.parent, "sdc", vars(args))
        out.write_text(text + "\n")
    print(text)


def cmd_fid(args, explicit):
    from .metrics import frechet_distance, gaussian_stats, read_features, toy_features

    if args.features and args.toy_extractor:
        raise UsageError("use either --features or --toy-extractor, not both")
    if args.features:
        fa, fb = (read_features(p) for p in args.features)
    elif args.toy_extractor:
        if not (args.images_a and args.images_b):
            raise UsageError("--toy-extractor needs --images-a and --images-b")
        fa = toy_features([_read_image(p) for p in args.images_a], args.dim, args.seed)
        fb = toy_features([_read_image(p) for p in args.images_b], args.dim, args.seed)
    else:
        raise UsageError("one of --features or --toy-extractor is required")
    d = frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
    if args.out:
        out = Path(args.out)
        _echo_config(out.parent, "fid", vars(args))
        out.write_text(json.dumps({"fid": d, "n_a": fa.n, "n_b": fb.n, "d": fa.d}, indent=2) + "\n")
    print(f"{d:.10g}")


AB_FIELDS = ["seed", "steps", "slides", "canvas", "patch", "blocks", "base_filters", "lambda1", "lambda2"]


def cmd_ab_bench(args, explicit):
    from .bench import ABConfig, run_ab_bench, summary_text

    cfg = ABConfig(**_merge(args, explicit, AB_FIELDS))
    out = Path(args.out)
    _echo_config(out, "ab-bench", asdict(cfg))
    results = run_ab_bench(cfg, out, log=lambda m: print(m, file=sys.stderr))
    print(summary_text(cfg, results), end="")


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    p = Parser(prog="virtihc", description=__doc__, formatter_class=Formatter)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    cmds = {}

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=Formatter)
        sp.set_defaults(func=func)
        cmds[name] = sp
        return sp

    def seed(sp):
        sp.add_argument("--seed", type=int, default=0, help="random seed")

    def thresholds(sp):
        sp.add_argument("--threshold-h", type=float, default=0.15, help="haematoxylin concentration threshold")
        sp.add_argument("--threshold-target", type=float, default=0.15, help="target stain concentration threshold")

    def stains(sp):
        sp.add_argument("--stains", help="stain reference JSON from fit-stains (default: standard H and DAB vectors)")

    def nmf(sp):
        sp.add_argument("--sample-count", type=int, default=20000, help="tissue pixels sampled for NMF")
        sp.add_argument("--percentile", type=float, default=99.0, help="concentration percentile used for scaling")

    sp = add("synth", cmd_synth, "render a synthetic paired H&E / IHC slide")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--height", type=int, default=256, help="canvas height")
    sp.add_argument("--width", type=int, default=256, help="canvas width")
    sp.add_argument("--n-stromal", type=int, default=10, help="number of stromal shapes")
    sp.add_argument("--n-epithelial", type=int, default=8, help="number of epithelial shapes")
    sp.add_argument("--noise", type=float, default=0.01, help="per-pixel Gaussian noise std")
    sp.add_argument("--config", help="JSON config; flags given on the command line win")
    seed(sp)

    sp = add("mask", cmd_mask, "Otsu tissue mask on the LAB lightness channel")
    sp.add_argument("--image", required=True, help="RGB PNG")
    sp.add_argument("--out", required=True, help="output mask PNG")
    sp.add_argument("--downsample", type=int, default=1, help="mean-pool factor before thresholding")

    sp = add("fit-stains", cmd_fit_stains, "estimate stain vectors and intensity scale with NMF")
    sp.add_argument("--image", required=True, help="RGB PNG")
    sp.add_argument("--out", required=True, help="output reference JSON")
    nmf(sp)
    seed(sp)

    sp = add("normalize", cmd_normalize, "stain-normalise an image to a reference")
    sp.add_argument("--method", choices=["vahadane", "reinhard"], default="vahadane", help="normalisation method")
    sp.add_argument("--src", required=True, help="source RGB PNG")
    sp.add_argument("--reference", help="reference JSON from fit-stains (vahadane)")
    sp.add_argument("--reference-image", help="reference RGB PNG")
    sp.add_argument("--out", required=True, help="output PNG")
    nmf(sp)
    seed(sp)

    sp = add("patchify", cmd_patchify, "cut aligned H&E / IHC patch pairs into a dataset directory")
    sp.add_argument("--he", required=True, help="H&E RGB PNG")
    sp.add_argument("--ihc", required=True, help="IHC RGB PNG, aligned with --he")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--patch", type=int, default=64, help="patch size in pixels")
    sp.add_argument("--stride", type=int, default=None, help="grid stride (default: patch size)")
    sp.add_argument("--min-tissue", type=float, default=0.0, help="minimum H&E tissue fraction per patch")
    sp.add_argument("--slide-id", default="slide0", help="slide identifier recorded per patch")

    sp = add("split", cmd_split, "seeded train/val/test split of one or more patch datasets")
    sp.add_argument("--manifest", nargs="+", required=True, help="manifest.json files to pool")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1], help="train val test fractions")
    sp.add_argument("--patch-level", action="store_true", help="split patches instead of whole slides")
    seed(sp)

    sp = add("train", cmd_train, "train the CycleGAN on a split patch dataset")
    sp.add_argument("--data", required=True, help="manifest.json with train (and optional val) patches")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--config", help="JSON config; flags given on the command line win")
    sp.add_argument("--loss", default="mid-cycle", choices=["unaltered", "mid-cycle"], help="loss variant")
    sp.add_argument("--lambda1", type=float, default=10.0, help="cycle-consistency weight")
    sp.add_argument("--lambda2", type=float, default=50.0, help="mid-cycle weight")
    sp.add_argument("--epochs", type=int, default=200, help="training epochs")
    sp.add_argument("--batch-size", type=int, default=8, help="batch size")
    sp.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (cosine decay to 0)")
    sp.add_argument("--beta1", type=float, default=0.5, help="Adam beta1")
    sp.add_argument("--max-steps", type=int, default=None, help="cap on optimiser steps (overrides epochs)")
    sp.add_argument("--patch", type=int, default=64, help="patch size")
    sp.add_argument("--blocks", type=int, default=4, help="encoder blocks")
    sp.add_argument("--base-filters", type=int, default=64, help="filters in the first encoder block")
    sp.add_argument("--filter-cap", type=int, default=256, help="maximum filters per block")
    sp.add_argument("--disc-filters", type=int, nargs=3, default=[64, 128, 256], help="discriminator filters")
    sp.add_argument("--fid-dim", type=int, default=32, help="toy feature dimension for validation FID")
    thresholds(sp)
    stains(sp)
    seed(sp)

    sp = add("infer", cmd_infer, "translate a whole H&E image with a trained generator")
    sp.add_argument("--run", required=True, help="training run directory")
    sp.add_argument("--checkpoint", help="checkpoint file (default: <run>/checkpoints/best.bin)")
    sp.add_argument("--src", required=True, help="H&E RGB PNG")
    sp.add_argument("--out", required=True, help="output PNG")
    sp.add_argument("--patch", type=int, default=None, help="tile size (default: training patch size)")
    sp.add_argument("--overlap", type=int, default=16, help="tile overlap in pixels")

    sp = add("sdc", cmd_sdc, "Staining Dice Coefficient between a virtual and a real stained image")
    sp.add_argument("--virtual", required=True, help="virtual RGB PNG")
    sp.add_argument("--target", required=True, help="real RGB PNG")
    sp.add_argument("--out", help="also write the JSON report here")
    thresholds(sp)
    stains(sp)

    sp = add("fid", cmd_fid, "Frechet distance between two feature sets")
    sp.add_argument("--features", nargs=2, metavar=("A_CSV", "B_CSV"), help="feature CSV files")
    sp.add_argument("--toy-extractor", action="store_true", help="compute toy features from images")
    sp.add_argument("--images-a", nargs="+", help="first image set (with --toy-extractor)")
    sp.add_argument("--images-b", nargs="+", help="second image set (with --toy-extractor)")
    sp.add_argument("--dim", type=int, default=64, help="toy feature dimension")
    sp.add_argument("--out", help="also write a JSON result here")
    seed(sp)

    sp = add("ab-bench", cmd_ab_bench, "synthetic A/B benchmark: mid-cycle vs unaltered CycleGAN")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--config", help="JSON config; flags given on the command line win")
    sp.add_argument("--steps", type=int, default=300, help="optimiser steps per variant")
    sp.add_argument("--slides", type=int, default=10, help="synthetic slides")
    sp.add_argument("--canvas", type=int, default=192, help="synthetic slide size")
    sp.add_argument("--patch", type=int, default=64, help="patch size")
    sp.add_argument("--blocks", type=int, default=2, help="generator encoder blocks")
    sp.add_argument("--base-filters", type=int, default=8, help="filters in the first encoder block")
    sp.add_argument("--lambda1", type=float, default=10.0, help="cycle-consistency weight")
    sp.add_argument("--lambda2", type=float, default=50.0, help="mid-cycle weight")
    seed(sp)

    p.commands = cmds
    return p


def _explicit(sp: Parser, argv: list[str]) -> set[str]:
    """Names of options that were actually given on the command line."""
    saved = [(a, a.default) for a in sp._actions]
    try:
        for a, _ in saved:
            a.default = argparse.SUPPRESS
        ns, _ = sp.parse_known_args(argv)
    finally:
        for a, d in saved:
            a.default = d
    return set(vars(ns))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    explicit = _explicit(parser.commands[args.command], argv[1:])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            args.func(args, explicit)
    except UsageError as exc:
        print(f"virtihc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"virtihc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VirtIHCError, OSError) as exc:
        print(f"virtihc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"virtihc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
