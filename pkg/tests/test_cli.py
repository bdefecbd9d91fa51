import numpy as np
import pytest

from msdcnet import data
from msdcnet.cli import main, read_config, resolve
from msdcnet.render import render_colormap
from msdcnet.train import load_checkpoint, predict

TINY_FLAGS = ["--max-disparity", "16", "--base-channels", "4", "--levels-3d", "2"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", "--out", str(out), "--count", "2", "--height", "32", "--width", "64",
                 "--max-disparity", "16", "--seed", "7"]) == 0
    return out


def test_synth_writes_complete_samples(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", "--out", str(out), "--count", "8", "--height", "64", "--width", "128",
                 "--seed", "7"]) == 0
    assert data.dataset_indices(out) == list(range(8))
    for i in range(8):
        assert all(p.exists() for p in data.sample_paths(out, i))
    assert data.load_sample(out, 0).left.shape == (3, 64, 128)


def test_usage_errors_exit_1(capsys):
    assert main(["info", "--bogus"]) == 1
    assert main(["synth"]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_help_exits_0():
    assert main(["info", "--help"]) == 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for the tiny model\nbase-channels = 8\nmax_disparity = 16  # quarter 4\n")
    _, s = resolve(["info", "--config", str(cfg), "--base-channels", "4"])
    assert s["base_channels"] == 4 and s["max_disparity"] == 16 and s["levels_3d"] == 4
    assert read_config(cfg) == {"base_channels": 8, "max_disparity": 16}


def test_config_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate_schedule = cosine\n")
    assert main(["info", "--config", str(cfg)]) == 1
    assert "unknown setting" in capsys.readouterr().err


def test_info_reports_count_and_reference(capsys):
    assert main(["info", "--max-disparity", "192", "--base-channels", "32"]) == 0
    out = capsys.readouterr().out
    assert "4,927,265" in out and "4.6M" in out and "dsfe.s1.down" in out


def test_train_predict_eval(tmp_path, dataset, capsys):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), "--data", str(dataset), "--steps", "2",
                 "--checkpoint-every", "1"] + TINY_FLAGS) == 0
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,loss,epe,seconds" and len(log) == 3
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [
        "step_000001.msdc", "step_000002.msdc"]

    pred_dir = tmp_path / "pred"
    ckpt_path = run / "checkpoint.msdc"
    assert main(["predict", "--checkpoint", str(ckpt_path), "--data", str(dataset),
                 "--out", str(pred_dir), "--colormap"]) == 0
    net = load_checkpoint(ckpt_path.read_bytes()).restore_params()
    s = data.load_sample(dataset, 1)
    mem = predict(net, s.left, s.right)
    disk, _ = data.decode_kitti_disparity(data.read_png16(pred_dir / "disp" / "0001.png"))
    assert np.abs(disk - mem).max() <= 1 / 512 + 1e-6
    assert data.read_rgb8(pred_dir / "color" / "0001.png").shape == (32, 64, 3)

    csv = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(ckpt_path), "--data", str(dataset), "--out", str(csv)]) == 0
    rows = csv.read_text().splitlines()
    assert rows[0] == "sample,mae,rms,gt1,gt2,gt3,gt4,gt5,d1,n"
    assert [r.split(",")[0] for r in rows[1:]] == ["0000", "0001", "mean"]


def test_resume_from_checkpoint(tmp_path, dataset):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(a), "--data", str(dataset), "--steps", "4"] + TINY_FLAGS) == 0
    assert main(["train", "--out", str(b), "--data", str(dataset), "--steps", "2"] + TINY_FLAGS) == 0
    assert main(["train", "--out", str(b), "--data", str(dataset), "--steps", "4",
                 "--checkpoint", str(b / "checkpoint.msdc")]) == 0
    assert (a / "checkpoint.msdc").read_bytes() == (b / "checkpoint.msdc").read_bytes()


def test_missing_checkpoint_is_usage_error(tmp_path, dataset):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(dataset)]) == 1


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck", "--tolerance", "1e-4"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "end_to_end" in out


def test_gradcheck_failure_exits_2(monkeypatch):
    from msdcnet import verify
    from msdcnet.gradcheck import GradCheckReport

    def failing(*a, **k):
        return [("x", GradCheckReport(1e-4, {"x": 1.0}), 0.0, 1e-4)]

    monkeypatch.setattr(verify, "gradient_suite", failing)
    assert main(["gradcheck"]) == 2


# ---------------------------------------------------------------- colormap

def test_colormap_endpoints_and_sentinel():
    d = np.array([[0.0, 32.0, 16.0, np.nan]])
    valid = np.array([[True, True, False, True]])
    rgb = render_colormap(d, 32, valid)
    assert tuple(rgb[0, 0]) == (0, 0, 255)
    assert tuple(rgb[0, 1]) == (255, 0, 0)
    assert tuple(rgb[0, 2]) == (0, 0, 0) and tuple(rgb[0, 3]) == (0, 0, 0)
    assert np.array_equal(render_colormap(d, 32, valid), rgb)
