import filecmp
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from warpgan import baselines, cubes, lie, metrics, training
from warpgan import warp as wp
from warpgan.cli import main
from warpgan.config import TrainConfig, PerturbationModel


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    cubes.make_dataset(6, cubes.CubesConfig(resolution=(32, 32)), out, seed=21)
    return out


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "identity.ckpt"
    cfg = TrainConfig(
        n_stages=2, iters_per_stage=0, batch_size=2, resolution=(32, 32),
        width_mult=0.25, depth=4, seed=0,
    )
    trainer = training.Trainer(cfg)
    for g in trainer.stack.generators:
        g.zero_head()
    trainer.save(path)
    return path


def test_gen_cubes_empty(runner, tmp_path):
    r = runner.invoke(main, ["gen-cubes", "--n", "0", "--out", str(tmp_path / "e")])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "e" / "manifest.jsonl").exists()
    assert len(cubes.load_dataset(tmp_path / "e")) == 0


def test_gen_cubes_deterministic(runner, tmp_path):
    for name in ("a", "b"):
        r = runner.invoke(main, [
            "gen-cubes", "--n", "3", "--seed", "7",
            "--resolution", "32x32", "--out", str(tmp_path / name),
        ])
        assert r.exit_code == 0, r.output
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == sorted(os.listdir(tmp_path / "b"))
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b", files, shallow=False
    )
    assert not mismatch and not errors


def test_gen_cubes_resolution_on_disk(runner, tmp_path):
    r = runner.invoke(main, [
        "gen-cubes", "--n", "1", "--resolution", "30x40",
        "--out", str(tmp_path / "r"),
    ])
    assert r.exit_code == 0, r.output
    with Image.open(tmp_path / "r" / "000000_bg.png") as img:
        assert img.size == (40, 30)  # PIL reports (W, H)


def test_gen_cubes_bad_resolution(runner, tmp_path):
    r = runner.invoke(main, [
        "gen-cubes", "--n", "1", "--resolution", "large",
        "--out", str(tmp_path / "x"),
    ])
    assert r.exit_code == 2


def test_train_config_preset_conflict(runner, data_dir, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text("{}")
    r = runner.invoke(main, [
        "train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
        "--config", str(cfg_file), "--preset", "desk",
    ])
    assert r.exit_code == 2


def test_train_rejects_unknown_config_field(runner, data_dir, tmp_path):
    cfg_file = tmp_path / "bad.json"
    cfg_file.write_text(json.dumps({"learning_rate": 1e-3}))
    r = runner.invoke(main, [
        "train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
        "--config", str(cfg_file),
    ])
    assert r.exit_code == 2
    assert "learning_rate" in r.output


def test_train_zero_iters_writes_initial_checkpoint(runner, data_dir, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({
        "n_stages": 1, "resolution": [32, 32], "width_mult": 0.25,
        "depth": 4, "batch_size": 2,
    }))
    out = tmp_path / "run"
    r = runner.invoke(main, [
        "train", "--data", str(data_dir), "--out", str(out),
        "--config", str(cfg_file), "--iters", "0",
    ])
    assert r.exit_code == 0, r.output
    assert (out / "final.ckpt").exists()
    stack = baselines.load_model(out / "final.ckpt")
    assert stack.stages_trained == 1


def test_train_homnet_mode(runner, data_dir, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({
        "n_stages": 1, "resolution": [32, 32], "width_mult": 0.25,
        "depth": 4, "batch_size": 2,
    }))
    out = tmp_path / "hn"
    r = runner.invoke(main, [
        "train", "--data", str(data_dir), "--out", str(out),
        "--config", str(cfg_file), "--mode", "homnet", "--iters", "2",
    ])
    assert r.exit_code == 0, r.output
    assert (out / "homnet.ckpt").exists()
    losses = json.loads((out / "homnet_losses.json").read_text())
    assert len(losses) == 2


def test_train_sdm_mode(runner, data_dir, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({
        "n_stages": 1, "resolution": [32, 32], "width_mult": 0.25,
        "depth": 4,
    }))
    out = tmp_path / "sdm"
    r = runner.invoke(main, [
        "train", "--data", str(data_dir), "--out", str(out),
        "--config", str(cfg_file), "--mode", "sdm",
    ])
    assert r.exit_code == 0, r.output
    cascade = baselines.load_model(out / "sdm.ckpt")
    assert isinstance(cascade, baselines.SdmCascade)
    assert cascade.n_stages == 1


def test_eval_writes_report_and_rows(runner, data_dir, identity_ckpt, tmp_path):
    report_path = tmp_path / "report.json"
    r = runner.invoke(main, [
        "eval", "--ckpt", str(identity_ckpt), "--data", str(data_dir),
        "--out", str(report_path), "--sigma", "0.05",
    ])
    assert r.exit_code == 0, r.output
    report = metrics.EvalReport.load(report_path)
    assert report.sample_count == 6
    assert len(report.stages) == 3  # stage 0 plus two corrections
    # identity model: every stage equals the initial statistics
    for s in report.stages[1:]:
        assert s.median_corner_error == pytest.approx(
            report.stages[0].median_corner_error
        )
    rows = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 6  # header plus one row per sample


def test_infer_identity_matches_direct_composite(runner, data_dir,
                                                 identity_ckpt, tmp_path):
    out = tmp_path / "inf"
    p0 = lie.similarity_params(1.0, 0.1, -0.05)
    p0_text = ",".join(f"{v:.17g}" for v in p0)
    r = runner.invoke(main, [
        "infer", "--ckpt", str(identity_ckpt),
        "--fg", str(data_dir / "000000_fg.png"),
        "--bg", str(data_dir / "000000_bg.png"),
        "--p0", p0_text, "--out", str(out),
    ])
    assert r.exit_code == 0, r.output
    doc = json.loads((out / "states.json").read_text())
    assert len(doc["states"]) == 3
    np.testing.assert_allclose(doc["states"][2], p0, atol=1e-12)

    # identity corrections: every stage renders the p0 composite
    assert (out / "stage0.png").read_bytes() == (out / "stage2.png").read_bytes()
    fg = wp.load_foreground(data_dir / "000000_fg.png")
    bg = wp.read_png(data_dir / "000000_bg.png")
    frame = bg.frame()
    want = wp.composite(wp.warp_foreground(fg, p0, frame), bg)
    got = wp.read_png(out / "stage0.png")
    assert np.abs(got.values - want.values).max() <= 1.0 / 255.0 + 1e-6


def test_infer_full_res_output(runner, data_dir, identity_ckpt, tmp_path):
    fg = wp.load_foreground(data_dir / "000001_fg.png")
    bg = wp.read_png(data_dir / "000001_bg.png")
    fg2 = wp.bilinear_resize(wp.Raster(fg.rgba()), (64, 64))
    bg2 = wp.bilinear_resize(bg, (64, 64))
    wp.write_png(fg2, tmp_path / "fg2x.png")
    wp.write_png(bg2, tmp_path / "bg2x.png")
    out = tmp_path / "inf2"
    r = runner.invoke(main, [
        "infer", "--ckpt", str(identity_ckpt),
        "--fg", str(data_dir / "000001_fg.png"),
        "--bg", str(data_dir / "000001_bg.png"),
        "--p0", "0.02,0,0.05,0,-0.03,0,0,0.01",
        "--out", str(out),
        "--full-res", str(tmp_path / "fg2x.png"), str(tmp_path / "bg2x.png"),
    ])
    assert r.exit_code == 0, r.output
    with Image.open(out / "fullres.png") as img:
        assert img.size == (64, 64)


def test_infer_bad_p0(runner, data_dir, identity_ckpt, tmp_path):
    r = runner.invoke(main, [
        "infer", "--ckpt", str(identity_ckpt),
        "--fg", str(data_dir / "000000_fg.png"),
        "--bg", str(data_dir / "000000_bg.png"),
        "--p0", "1,2,3", "--out", str(tmp_path / "x"),
    ])
    assert r.exit_code == 2


def test_eval_missing_checkpoint(runner, data_dir, tmp_path):
    r = runner.invoke(main, [
        "eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", str(data_dir),
        "--out", str(tmp_path / "r.json"),
    ])
    assert r.exit_code == 2  # click validates existence
