import json

import numpy as np
import pytest
from PIL import Image

from virtihc import cli
from virtihc.image import read_png
from virtihc.metrics import FeatureCollection, write_features


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def slide(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--height", 96, "--width", 96, "--seed", 3) == 0
    return out


def test_train_help_documents_loss_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    assert "cycle-consistency weight (default: 10.0)" in text
    assert "mid-cycle weight (default: 50.0)" in text
    assert "(default: mid-cycle)" in text


def test_synth_is_byte_deterministic(slide, tmp_path):
    assert run("synth", "--out", tmp_path, "--height", 96, "--width", 96, "--seed", 3) == 0
    for name in ("he.png", "ihc.png", "labels.png"):
        assert (slide / name).read_bytes() == (tmp_path / name).read_bytes()
    doc = json.loads((tmp_path / cli.CONFIG_NAME).read_text())
    assert doc["command"] == "synth"


def test_sdc_identical_images(slide, tmp_path, capsys):
    out = tmp_path / "sdc.json"
    assert run("sdc", "--virtual", slide / "ihc.png", "--target", slide / "ihc.png", "--out", out) == 0
    report = json.loads(out.read_text())
    assert [s["dice"] for s in report["stains"]] == [1.0, 1.0]
    assert (tmp_path / cli.CONFIG_NAME).exists()


def test_fid_identical_features(tmp_path, capsys):
    path = tmp_path / "a.csv"
    write_features(path, FeatureCollection(np.random.default_rng(0).normal(size=(40, 3))))
    assert run("fid", "--features", path, path) == 0
    assert abs(float(capsys.readouterr().out)) < 1e-6


def test_fid_toy_extractor(slide, capsys):
    assert run("fid", "--toy-extractor", "--images-a", slide / "he.png", slide / "ihc.png",
               "--images-b", slide / "ihc.png", slide / "he.png", "--dim", 8) == 0
    assert abs(float(capsys.readouterr().out)) < 1e-6


def test_mask_fit_and_normalize(slide, tmp_path, capsys):
    assert run("mask", "--image", slide / "he.png", "--out", tmp_path / "mask.png") == 0
    with Image.open(tmp_path / "mask.png") as im:
        assert set(np.unique(np.asarray(im))) <= {0, 255}
    ref = tmp_path / "ref.json"
    assert run("fit-stains", "--image", slide / "he.png", "--out", ref, "--sample-count", 2000) == 0
    assert run("normalize", "--src", slide / "he.png", "--reference", ref, "--out", tmp_path / "v.png") == 0
    assert run("normalize", "--method", "reinhard", "--src", slide / "he.png",
               "--reference-image", slide / "he.png", "--out", tmp_path / "r.png") == 0
    assert read_png(tmp_path / "v.png").shape == (96, 96, 3)


def test_pipeline_train_and_infer(slide, tmp_path):
    data = tmp_path / "patches"
    assert run("patchify", "--he", slide / "he.png", "--ihc", slide / "ihc.png", "--out", data, "--patch", 16) == 0
    split = tmp_path / "split"
    assert run("split", "--manifest", data / "manifest.json", "--out", split, "--patch-level") == 0
    runs = tmp_path / "run"
    code = run("train", "--data", split / "manifest.json", "--out", runs, "--max-steps", 2, "--patch", 16,
               "--blocks", 2, "--base-filters", 2, "--filter-cap", 4, "--disc-filters", 2, 2, 2, "--batch-size", 2)
    assert code == 0
    for name in ("history.csv", "epochs.json", cli.CONFIG_NAME, "checkpoints/best.bin"):
        assert (runs / name).exists()
    assert run("infer", "--run", runs, "--src", slide / "he.png", "--out", tmp_path / "virt.png", "--overlap", 4) == 0
    assert read_png(tmp_path / "virt.png").shape == (96, 96, 3)


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"noise": 0.0, "seed": 5}))
    out = tmp_path / "o"
    assert run("synth", "--out", out, "--config", cfg, "--seed", 9, "--height", 32, "--width", 32) == 0
    doc = json.loads((out / cli.CONFIG_NAME).read_text())
    assert doc["noise"] == 0.0 and doc["seed"] == 9


def test_exit_codes(tmp_path, slide):
    assert run("train") == cli.EXIT_USAGE
    assert run("no-such-command") == cli.EXIT_USAGE
    assert run("fid", "--features", tmp_path / "missing.csv", tmp_path / "missing.csv") == cli.EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("2,2\n1,2\n3\n")
    assert run("fid", "--features", bad, bad) == cli.EXIT_DATA
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("synth", "--out", tmp_path / "o", "--config", cfg) == cli.EXIT_DATA
    assert run("fid") == cli.EXIT_USAGE
