import numpy as np
import pytest

from himosa.cli import main
from himosa.config import dump_config
from himosa.data import ImageBuffer, load_image, save_image

from conftest import SMOKE_MODEL, SMOKE_TRAIN, synth_hr


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(tmp_path, smoke_config, dataset, capsys):
    out = tmp_path / "run"
    code, _, err = _run(capsys, "train", "--config", str(smoke_config), "--data", str(dataset), "--out", str(out))
    assert code == 0, err
    return out


def test_train_outputs(trained):
    log = (trained / "train.log").read_text().splitlines()
    assert len(log) == SMOKE_TRAIN.total_iters
    t, loss, lr = log[1].split("\t")
    assert int(t) == 1 and float(loss) > 0 and float(lr) == pytest.approx(5e-4)
    assert sorted(p.name for p in trained.glob("*.himo")) == ["ckpt_000003.himo", "ckpt_000006.himo", "final.himo"]


def test_resume_matches_uninterrupted_log(tmp_path, trained, smoke_config, dataset, capsys):
    out = tmp_path / "resumed"
    code, _, err = _run(capsys, "train", "--config", str(smoke_config), "--data", str(dataset), "--out", str(out),
                        "--resume", str(trained / "ckpt_000003.himo"))
    assert code == 0, err
    full = (trained / "train.log").read_text().splitlines()
    assert (out / "train.log").read_text().splitlines() == full[3:]
    assert (out / "final.himo").read_bytes() == (trained / "final.himo").read_bytes()


def test_sr_shape_and_scale_check(tmp_path, trained, smoke_config, capsys):
    save_image(synth_hr(12, 5), tmp_path / "in.png")
    ck = str(trained / "final.himo")
    code, _, err = _run(capsys, "sr", "--config", str(smoke_config), "--ckpt", ck, "--in", str(tmp_path / "in.png"),
                        "--out", str(tmp_path / "out.png"), "--scale", "2")
    assert code == 0, err
    assert load_image(tmp_path / "out.png").data.shape == (24, 24, 3)
    code, _, err = _run(capsys, "sr", "--config", str(smoke_config), "--ckpt", ck, "--in", str(tmp_path / "in.png"),
                        "--out", str(tmp_path / "o.png"), "--scale", "4")
    assert code == 1 and "does not match" in err and err.count("\n") == 1


def test_eval_table(trained, smoke_config, dataset, capsys):
    code, out, err = _run(capsys, "eval", "--config", str(smoke_config), "--ckpt", str(trained / "final.himo"),
                          "--data", str(dataset))
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0] == "image\tpsnr\tssim" and lines[1].startswith("a.png\t") and lines[-1].startswith("mean\t")
    assert len(lines) == 4


def test_flops_prints_cost_report(smoke_config, capsys):
    code, out, _ = _run(capsys, "flops", "--config", str(smoke_config), "--size", "8x12")
    assert code == 0
    body = [line for line in out.splitlines() if not line.startswith("#")]
    assert body[-1].startswith("total\t") and all(len(line.split("\t")) == 3 for line in body)
    assert "139.58G" in out


def test_routes_writes_one_mask_per_block_layer_expert(tmp_path, trained, smoke_config, capsys):
    save_image(synth_hr(6, 2), tmp_path / "in.png")
    out = tmp_path / "masks"
    code, _, err = _run(capsys, "routes", "--config", str(smoke_config), "--ckpt", str(trained / "final.himo"),
                        "--in", str(tmp_path / "in.png"), "--out", str(out))
    assert code == 0, err
    names = sorted(p.name for p in out.iterdir())
    assert names == ["b0_l0_e0.png", "b0_l0_e1.png", "b0_l1_e0.png", "b0_l1_e1.png"]
    # layer 1: ws=4 window over a padded 8x8 map, rho=2 -> half of each window selected
    mask = load_image(out / "b0_l1_e0.png").data
    assert mask.shape == (6, 6, 3)
    red = (mask[..., 0] > mask[..., 1])
    assert 0 < red.sum() < 36
    # layer 0 has rho=1: every token selected
    assert (load_image(out / "b0_l0_e1.png").data[..., 0] > load_image(out / "b0_l0_e1.png").data[..., 1]).all()


def test_ablate_selection_table(tmp_path, dataset, capsys):
    cfg = tmp_path / "ab.cfg"
    cfg.write_text(dump_config(SMOKE_MODEL, SMOKE_TRAIN.replace(total_iters=3, decay_points=(), warmup_iters=1)))
    code, out, err = _run(capsys, "ablate", "--config", str(cfg), "--sweep", "selection", "--data", str(dataset))
    assert code == 0, err
    rows = [line.split("\t")[0] for line in out.splitlines()[1:] if not line.startswith("#")]
    assert rows == ["content_aware", "random", "sequential"]
    assert "30.80" in out


@pytest.mark.parametrize("sweep,n", [("experts", 3), ("sparsity", 3)])
def test_ablate_other_sweeps(tmp_path, dataset, capsys, sweep, n):
    cfg = tmp_path / "ab.cfg"
    cfg.write_text(dump_config(SMOKE_MODEL, SMOKE_TRAIN.replace(total_iters=2, decay_points=(), warmup_iters=1)))
    code, out, err = _run(capsys, "ablate", "--config", str(cfg), "--sweep", sweep, "--data", str(dataset))
    assert code == 0, err
    assert len([line for line in out.splitlines()[1:] if not line.startswith("#")]) == n


def test_check_oracle_suite(capsys):
    code, out, _ = _run(capsys, "check", "--suite", "oracle")
    assert code == 0
    lines = [line for line in out.splitlines() if not line.startswith("#")]
    assert all(line.endswith("\tPASS") and len(line.split("\t")) == 4 for line in lines)


def test_errors_are_single_line(tmp_path, smoke_config, capsys):
    code, _, err = _run(capsys, "train", "--config", str(tmp_path / "none.cfg"), "--data", "x", "--out", "y")
    assert code == 1 and err.count("\n") == 1 and err.startswith("himosa: error:")
    bad = tmp_path / "bad.cfg"
    bad.write_text("channels = sixty\n")
    code, _, err = _run(capsys, "flops", "--config", str(bad))
    assert code == 1 and "channels" in err and err.count("\n") == 1
    code, _, err = _run(capsys, "eval", "--config", str(smoke_config), "--ckpt", str(tmp_path / "no.himo"),
                        "--data", "m.txt")
    assert code == 1 and err.count("\n") == 1


def test_corrupt_checkpoint_reported(tmp_path, trained, smoke_config, capsys):
    raw = bytearray((trained / "final.himo").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "bad.himo").write_bytes(bytes(raw))
    save_image(ImageBuffer.from_array(np.zeros((4, 4, 3), np.uint8)), tmp_path / "in.png")
    code, _, err = _run(capsys, "sr", "--config", str(smoke_config), "--ckpt", str(tmp_path / "bad.himo"),
                        "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png"))
    assert code == 1 and "CRC" in err


def test_unknown_flag_rejected_with_usage(capsys):
    code, _, err = _run(capsys, "flops", "--config", "x.cfg", "--bogus")
    assert code == 2 and "usage:" in err and "--bogus" in err


def test_bad_thread_env(monkeypatch, smoke_config, capsys):
    monkeypatch.setenv("HIMOSA_THREADS", "lots")
    code, _, err = _run(capsys, "flops", "--config", str(smoke_config))
    assert code == 1 and "HIMOSA_THREADS" in err
