import json
import subprocess
import sys

import numpy as np
import pytest

from vrcodec.checkpoint import save_model
from vrcodec.cli import main
from vrcodec.data import load_image, save_image
from vrcodec.model import ArchitectureConfig, VariableRateModel


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = VariableRateModel(ArchitectureConfig(n_lambdas=2, trunk_channels=8, latent_channels=4,
                                                 hyper_channels=8, hyper_latent_channels=2, context_channels=8))
    save_model(root / "m.vrckpt", model, lambdas=(1e-2, 1e-3))
    images = root / "images"
    images.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        save_image(images / f"img{i}.png", rng.random((3, 24, 40)))
    return root


def test_compress_decompress(workspace, capsys):
    src = workspace / "images" / "img0.png"
    out = workspace / "img0.vrc1"
    assert main(["compress", str(src), "--checkpoint", str(workspace / "m.vrckpt"), "--output", str(out),
                 "--lambda-index", "1", "--delta", "1.5"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["bytes"] == out.stat().st_size and info["lambda_index"] == 1
    assert info["bpp"] == pytest.approx(8 * info["bytes"] / (24 * 40))
    rec = workspace / "img0_rec.png"
    assert main(["decompress", str(out), "--checkpoint", str(workspace / "m.vrckpt"), "--output", str(rec)]) == 0
    assert load_image(rec).shape == (3, 24, 40)


def test_compress_target_rate(workspace, capsys):
    src = workspace / "images" / "img1.png"
    assert main(["compress", str(src), "--checkpoint", str(workspace / "m.vrckpt"),
                 "--output", str(workspace / "t.vrc1"), "--target-bpp", "1000"]) == 0
    assert json.loads(capsys.readouterr().out)["outside_envelope"] is True


def test_compress_requires_knobs(workspace):
    with pytest.raises(SystemExit):
        main(["compress", str(workspace / "images" / "img0.png"), "--checkpoint", str(workspace / "m.vrckpt"),
              "--output", str(workspace / "x.vrc1")])


def test_eval(workspace, capsys):
    a = str(workspace / "images" / "img0.png")
    b = str(workspace / "images" / "img1.png")
    assert main(["eval", a, a, a, b]) == 0
    results = json.loads(capsys.readouterr().out)
    assert results[0]["psnr_db"] is None and results[0]["ms_ssim"] == 1.0
    assert results[1]["psnr_db"] > 0
    with pytest.raises(SystemExit):
        main(["eval", a])


def test_sweep(workspace, capsys):
    spec = workspace / "sweep.cfg"
    spec.write_text(f"images={workspace / 'images'}\ndeltas=0.5,2.0\noutput={workspace / 'rd'}\n")
    assert main(["sweep", "--checkpoint", str(workspace / "m.vrckpt"), "--spec", str(spec)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    assert (workspace / "rd.csv").exists() and (workspace / "rd.json").exists()


def test_codelength_map(workspace, capsys):
    out = workspace / "maps"
    assert main(["codelength-map", str(workspace / "images" / "img0.png"), "--checkpoint",
                 str(workspace / "m.vrckpt"), "--lambda-index", "0", "--out", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["z_bits"] > 0
    assert (out / "summary.json").exists()


def test_train_and_resume(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("steps=4\npretrain_steps=2\nbatch_size=1\npatch_size=16\nsynthetic_images=2\n"
                   "synthetic_size=32\nlog_every=2\ncheckpoint_every=2\narch.trunk_channels=6\n"
                   "arch.latent_channels=4\narch.hyper_channels=6\narch.hyper_latent_channels=2\n"
                   "arch.context_channels=6\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--steps", "2", "--quiet"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["steps"] == 2
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"),
                 "--resume", str(tmp_path / "run" / "final.vrckpt")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("step") and json.loads(lines[-1])["steps"] == 4


def test_selfcheck_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vrcodec", "selfcheck"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 4
