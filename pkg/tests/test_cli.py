import csv

import numpy as np
import pytest

from film.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, reflect_pad
from film.data import pan_sequence, read_image, write_image
from film.metrics import read_report_csv

DESK_CONFIG = """\
levels = 3
base_width = 4
batch_size = 2
crop_size = 16
total_steps = 6
decay_steps = 6
loss = l1
aug_rotate = false
checkpoint_every = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic dataset and one short training run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "desk.cfg").write_text(DESK_CONFIG)
    assert main(["synth", "--out", str(root / "synth"), "--count", "4", "--size", "16",
                 "--disparity", "0", "4", "--seed", "3"]) == EXIT_OK
    assert main(["train", "--config", str(root / "desk.cfg"), "--data", str(root / "synth"),
                 "--out", str(root / "run1")]) == EXIT_OK
    return root


def test_train_outputs(workspace):
    run = workspace / "run1"
    for name in ("ckpt_0003", "ckpt_0006", "ckpt_final", "loss.csv", "loss.png", "manifest.txt"):
        assert (run / name).exists(), name
    rows = list(csv.reader((run / "loss.csv").open()))
    assert rows[0] == ["step", "loss", "lr"] and [r[0] for r in rows[1:]] == [str(i) for i in range(6)]
    manifest = (run / "manifest.txt").read_text()
    assert "seed = 0" in manifest and "config.levels = 3" in manifest and "version.numpy" in manifest


def test_resume_continues_bit_identically(workspace, tmp_path):
    cfg, data = str(workspace / "desk.cfg"), str(workspace / "synth")
    assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path), "--steps", "3"]) == EXIT_OK
    assert main(["train", "--resume", str(tmp_path / "ckpt_0003"), "--data", data,
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "ckpt_final").read_bytes() == (workspace / "run1" / "ckpt_final").read_bytes()
    assert (tmp_path / "loss.csv").read_text() == (workspace / "run1" / "loss.csv").read_text()


def test_resume_rejects_conflicting_seed(workspace, tmp_path):
    code = main(["train", "--resume", str(workspace / "run1" / "ckpt_0003"), "--data",
                 str(workspace / "synth"), "--out", str(tmp_path), "--seed", "9"])
    assert code == EXIT_USAGE


def test_training_errors(workspace, tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--config", str(workspace / "desk.cfg"), "--data", str(missing),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text(DESK_CONFIG + "warp_speed = 9\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "synth"),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "warp_speed" in capsys.readouterr().err


def test_numerical_failure_exit_code(workspace, tmp_path):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text(DESK_CONFIG.replace("loss = l1", "loss = l1\nbase_lr = 1e30"))
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--data", str(workspace / "synth"), "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    assert (tmp_path / "diagnostics.txt").exists() and (tmp_path / "ckpt_failed").exists()


@pytest.mark.parametrize("times,count", [(1, 1), (3, 7)])
def test_interpolate_frame_files(workspace, tmp_path, times, count):
    rec = workspace / "synth" / "records" / "synth_00000"
    code = main(["interpolate", str(workspace / "run1" / "ckpt_final"), str(rec / "frame_0.png"),
                 str(rec / "frame_1.png"), "--out", str(tmp_path), "--times", str(times)])
    assert code == EXIT_OK
    frames = sorted(p.name for p in tmp_path.glob("frame_*.png"))
    assert frames == [f"frame_{i:03d}.png" for i in range(1, count + 1)]
    assert read_image(tmp_path / frames[0]).shape == (16, 16, 3)


def test_interpolate_pads_odd_sizes(workspace, tmp_path):
    a, b = pan_sequence(2, (70, 70), (2, 0), rng=0)
    write_image(tmp_path / "a.png", a)
    write_image(tmp_path / "b.png", b)
    code = main(["interpolate", str(workspace / "run1" / "ckpt_final"), str(tmp_path / "a.png"),
                 str(tmp_path / "b.png"), "--out", str(tmp_path / "o"), "--levels", "7", "--dump-flows"])
    assert code == EXIT_OK
    assert read_image(tmp_path / "o" / "frame_001.png").shape == (70, 70, 3)
    manifest = (tmp_path / "o" / "manifest.txt").read_text()
    assert "config.padded_shape = 128x128" in manifest
    assert (tmp_path / "o" / "flow_to0.flo").exists() and (tmp_path / "o" / "flow_to1.png").exists()


def test_interpolate_rejects_mismatched_frames(workspace, tmp_path):
    write_image(tmp_path / "a.png", np.zeros((16, 16, 3)))
    write_image(tmp_path / "b.png", np.zeros((24, 16, 3)))
    code = main(["interpolate", str(workspace / "run1" / "ckpt_final"), str(tmp_path / "a.png"),
                 str(tmp_path / "b.png"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_reflect_pad_arithmetic():
    img = np.arange(70 * 70 * 3, dtype=np.float32).reshape(70, 70, 3)
    padded, (h, w) = reflect_pad(img, 64)
    assert padded.shape == (128, 128, 3) and (h, w) == (70, 70)
    np.testing.assert_array_equal(padded[:70, :70], img)
    np.testing.assert_array_equal(padded[70, :70], img[68])
    same, _ = reflect_pad(img[:64, :64], 64)
    assert same.shape == (64, 64, 3)


def test_eval_report_matches_recomputation(workspace, tmp_path):
    report = tmp_path / "eval.csv"
    assert main(["eval", str(workspace / "run1" / "ckpt_final"), "--data", str(workspace / "synth"),
                 "--report", str(report)]) == EXIT_OK
    rows = read_report_csv(report)
    assert len(rows) == 4
    summary = list(csv.DictReader((tmp_path / "eval_summary.csv").open()))
    assert float(summary[0]["psnr_db"]) == pytest.approx(np.mean([r["psnr_db"] for r in rows]), rel=1e-12)
    assert (tmp_path / "eval.png").exists() and (tmp_path / "eval_manifest.txt").exists()


def test_mine_toy_sequence(tmp_path):
    seq = tmp_path / "frames" / "toy"
    seq.mkdir(parents=True)
    for i, f in enumerate(pan_sequence(3, (96, 96), (15, 0), rng=0)):
        write_image(seq / f"{i:02d}.png", f)
    out = tmp_path / "mined"
    assert main(["mine", str(tmp_path / "frames"), "--out", str(out), "--strides", "1"]) == EXIT_OK
    rows = list(csv.DictReader((out / "index.csv").open()))
    assert [r["bracket"] for r in rows] == ["20-40"]
    for name in ("bracket_counts.csv", "bracket_counts.png", "motion_histogram.csv",
                 "motion_histogram.png", "manifest.txt"):
        assert (out / name).exists(), name
    assert main(["histogram", str(out), "--out", str(tmp_path / "h")]) == EXIT_OK
    assert (tmp_path / "h" / "motion_histogram.png").exists()


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["mine", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path), "--report", "r.csv"]) == EXIT_USAGE
    assert main(["selfcheck", "--suite", "nonsense"]) == EXIT_USAGE


def test_selfcheck_passes(capsys):
    assert main(["selfcheck", "--suite", "warp", "--suite", "losses", "--suite", "schedule",
                 "--suite", "sharing"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "warp:" in out and "passed" in out
