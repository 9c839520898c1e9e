import os
import subprocess
import sys

import numpy as np
import pytest

from panforge.cli import main
from panforge.config import RunConfig, load_config, parse_text
from panforge.datakit.imageio import read_pixels
from panforge.errors import ConfigError
from panforge.metrics import read_report

SMALL = ["--width-mult", "1/16", "--batch", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def log_lines(run_dir):
    with open(os.path.join(run_dir, "logs.tsv")) as fh:
        return fh.read().splitlines()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("gendata", "--out", out, "--n-train", 4, "--n-test", 3, "--seed", 2) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli") / "run"
    rc = run("train", "--data", dataset, "--out", run_dir, "--iters", 4, "--checkpoint-every", 2, *SMALL)
    assert rc == 0
    return run_dir


# -- gendata ----------------------------------------------------------------


def test_gendata_writes_manifest(dataset, capsys):
    assert os.path.isfile(dataset / "manifest.tsv")
    assert len(os.listdir(dataset / "train")) == 8 and len(os.listdir(dataset / "test")) == 6


def test_gendata_missing_out_dir(capsys):
    assert run("gendata", "--n-train", 2) == 2
    assert "out_dir" in capsys.readouterr().err


def test_gendata_rerun_is_identical(dataset, tmp_path):
    again = tmp_path / "data"
    assert run("gendata", "--out", again, "--n-train", 4, "--n-test", 3, "--seed", 2) == 0
    for split in ("train", "test"):
        for name in sorted(os.listdir(dataset / split)):
            assert (dataset / split / name).read_bytes() == (again / split / name).read_bytes()
    # and a second run into the same directory leaves the bytes unchanged
    before = (again / "test" / "test-0000_in.png").read_bytes()
    assert run("gendata", "--out", again, "--n-train", 4, "--n-test", 3, "--seed", 2) == 0
    assert (again / "test" / "test-0000_in.png").read_bytes() == before


def test_gendata_bad_size(tmp_path, capsys):
    assert run("gendata", "--out", tmp_path / "d", "--size", 100) == 2
    assert "size" in capsys.readouterr().err


# -- train ------------------------------------------------------------------


def test_train_run_directory_layout(trained):
    assert sorted(os.listdir(trained)) == ["checkpoints", "config.txt", "logs.tsv", "reports"]
    assert sorted(os.listdir(trained / "checkpoints")) == ["final.ckpt", "iter-000002.ckpt", "iter-000004.ckpt"]
    lines = log_lines(trained)
    assert lines[0] == "iter\tJ_T\tJ_D\ts\tprob_real\tprob_fake"
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0", "1", "2", "3"]


def test_config_echo_reloads_to_the_same_config(trained, dataset):
    cfg = load_config(trained / "config.txt")
    assert cfg.iters == 4 and cfg.width_mult == "1/16" and cfg.data == str(dataset)
    assert cfg.to_text() == (trained / "config.txt").read_text()


def test_single_layer_lambda_override(dataset, tmp_path):
    run_dir = tmp_path / "p1"
    rc = run("train", "--data", dataset, "--out", run_dir, "--iters", 2, "--lambda", "2=0", "--lambda", "3=0",
             "--lambda", "4=0", *SMALL)
    assert rc == 0
    assert load_config(run_dir / "config.txt").lambdas == (5.0, 0.0, 0.0, 0.0)


def test_bad_lambda_override(dataset, tmp_path, capsys):
    assert run("train", "--data", dataset, "--out", tmp_path / "r", "--lambda", "5=1") == 2
    assert "lambda" in capsys.readouterr().err


def test_zero_lr_logs_repeat(dataset, tmp_path):
    run_dir = tmp_path / "lr0"
    # batch = n_train, so every iteration sees the same (sorted) batch
    rc = run("train", "--data", dataset, "--out", run_dir, "--iters", 3, "--lr", 0, "--width-mult", "1/16",
             "--batch", 4)
    assert rc == 0
    rows = [ln.split("\t") for ln in log_lines(run_dir)[1:]]
    assert rows[0][1] == rows[-1][1]


def test_resume_matches_uninterrupted_log(dataset, trained, tmp_path):
    straight = tmp_path / "straight"
    assert run("train", "--data", dataset, "--out", straight, "--iters", 14, "--checkpoint-every", 0, *SMALL) == 0
    resumed = tmp_path / "resumed"
    rc = run("train", "--data", dataset, "--out", resumed, "--iters", 14, "--checkpoint-every", 0,
             "--resume", trained / "checkpoints" / "iter-000004.ckpt", *SMALL)
    assert rc == 0
    tail = log_lines(resumed)[1:]
    assert len(tail) == 10
    assert tail == log_lines(straight)[5:]


def test_l2_logs_nan_for_discriminator(dataset, tmp_path):
    run_dir = tmp_path / "l2"
    assert run("train", "--data", dataset, "--out", run_dir, "--iters", 1, "--loss", "l2", *SMALL) == 0
    row = log_lines(run_dir)[1].split("\t")
    assert row[2] == "nan" and row[4] == "nan"


def test_nan_abort_exit_code(dataset, tmp_path, capsys):
    run_dir = tmp_path / "boom"
    rc = run("train", "--data", dataset, "--out", run_dir, "--iters", 50, "--lr", 1e30, *SMALL)
    assert rc == 3
    err = capsys.readouterr().err
    assert "numerical abort" in err and "first non-finite op" in err
    assert os.path.isfile(run_dir / "checkpoints" / "aborted.ckpt")


def test_train_without_data(tmp_path, capsys):
    assert run("train", "--out", tmp_path / "r") == 2
    assert "data" in capsys.readouterr().err


def test_train_size_must_match_data(dataset, tmp_path, capsys):
    assert run("train", "--data", dataset, "--out", tmp_path / "r", "--size", 128) == 2
    assert "size" in capsys.readouterr().err


# -- infer ------------------------------------------------------------------


def test_infer_outputs(trained, dataset, tmp_path):
    ckpt = trained / "checkpoints" / "final.ckpt"
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("infer", "--checkpoint", ckpt, "--out", a, dataset / "test") == 0
    assert run("infer", "--checkpoint", ckpt, "--out", b, dataset / "test") == 0
    names = sorted(os.listdir(a))
    assert len(names) == len(os.listdir(dataset / "test"))
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
        pix = read_pixels(a / name)
        assert pix.dtype == np.uint8 and pix.shape == (64, 64, 3)


def test_infer_size_rule(trained, tmp_path, capsys):
    from panforge.datakit.imageio import save_image

    save_image(np.zeros((3, 64, 70)), tmp_path / "odd.png")
    rc = run("infer", "--checkpoint", trained / "checkpoints" / "final.ckpt", "--out", tmp_path / "o",
             tmp_path / "odd.png")
    assert rc == 2
    assert "multiples of 64" in capsys.readouterr().err


def test_infer_missing_checkpoint(tmp_path, dataset):
    assert run("infer", "--checkpoint", tmp_path / "none.ckpt", "--out", tmp_path / "o", dataset / "test") == 2


# -- eval -------------------------------------------------------------------


def test_eval_report(trained, dataset, capsys):
    rc = run("eval", "--checkpoint", trained / "checkpoints" / "final.ckpt", "--data", dataset)
    assert rc == 0
    rows = read_report(trained / "reports" / "eval.tsv")
    assert len(rows) == 3 + 1 and rows[-1].id == "mean"
    assert capsys.readouterr().out.startswith("mean\t")


def test_eval_target_against_itself(dataset, tmp_path):
    assert run("eval", "--data", dataset, "--baseline", "target", "--report", tmp_path / "r.tsv") == 0
    mean = read_report(tmp_path / "r.tsv")[-1]
    assert mean.ssim == pytest.approx(1.0, abs=1e-12) and mean.uqi == pytest.approx(1.0, abs=1e-12)
    assert mean.psnr == float("inf")


def test_eval_input_baseline_matches_direct_computation(dataset, tmp_path):
    from panforge.datakit.manifest import load_manifest
    from panforge.metrics import psnr

    assert run("eval", "--data", dataset, "--baseline", "input", "--report", tmp_path / "r.tsv") == 0
    x, y, _ = load_manifest(dataset).load_split("test")
    direct = np.mean([psnr((a.astype(np.float64) + 1) / 2, (b.astype(np.float64) + 1) / 2) for a, b in zip(x, y)])
    assert read_report(tmp_path / "r.tsv")[-1].psnr == pytest.approx(direct, abs=1e-9)


def test_eval_missing_data(tmp_path):
    assert run("eval", "--data", tmp_path / "nowhere", "--baseline", "input") == 2


# -- config -----------------------------------------------------------------


def test_config_text_roundtrip():
    cfg = RunConfig(task="inpaint", lambdas=(1.0, 0.0, 0.25, 3.0), lr=1e-3, width_mult="1/8", out_dir="x y")
    assert parse_text(cfg.to_text()) == cfg


def test_flags_override_config_file(dataset, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("iters = 1\nbatch = 2\nwidth_mult = 1/16\nseed = 5\n")
    run_dir = tmp_path / "r"
    assert run("train", "--config", conf, "--data", dataset, "--out", run_dir, "--iters", 2) == 0
    cfg = load_config(run_dir / "config.txt")
    assert (cfg.iters, cfg.batch, cfg.seed) == (2, 2, 5)


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_text("colour = red\n")
    assert err.value.field == "colour"


def test_thread_cap_env(dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PANFORGE_THREADS", "zero")
    assert run("eval", "--data", dataset, "--baseline", "input", "--report", tmp_path / "r.tsv") == 2
    assert "PANFORGE_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("PANFORGE_THREADS", "1")
    assert run("eval", "--data", dataset, "--baseline", "input", "--report", tmp_path / "r.tsv") == 0


def test_console_entry_point(dataset):
    proc = subprocess.run([sys.executable, "-m", "panforge.cli", "eval", "--data", str(dataset), "--baseline",
                           "target", "--report", os.devnull], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("mean\tinf\t1.0\t1.0")
