import numpy as np
import pytest

from macunet import cli, data, verify
from macunet.data import LabeledSample, save_sample

TINY_CFG = """\
# small enough for a unit test
model = macu
levels = 3
base_width = 4
cab_ratio = 4
epochs = 2
batch_size = 4
seed = 3
"""


def run(capsys, *argv):
    code = cli.main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def workspace(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY_CFG)
    assert run(capsys, "synth", "--out", tmp_path / "d", "--count", 10, "--size", 16,
               "--seed", 1)[0] == 0
    code, out, _ = run(capsys, "split", "--data", tmp_path / "d", "--seed", 1, "--out",
                       tmp_path / "s.txt")
    assert code == 0 and out.strip() == "train=6 val=2 test=2"
    return tmp_path


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    code, _, err = run(capsys, "split", "--data", "x")
    assert code == 1 and "required" in err


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("flavour = mint\n")
    code, _, err = run(capsys, "params", "--config", bad)
    assert code == 2 and "unknown key" in err
    code, _, _ = run(capsys, "split", "--data", tmp_path / "empty", "--out", tmp_path / "s.txt")
    assert code == 2
    notckpt = tmp_path / "x.ckpt"
    notckpt.write_bytes(b"hello world, not a checkpoint")
    assert run(capsys, "fuse", "--ckpt", notckpt, "--out", tmp_path / "y")[0] == 2


def test_split_prints_counts_for_4940(tmp_path, capsys):
    (tmp_path / "images").mkdir()
    for i in range(4940):
        (tmp_path / "images" / f"p{i:05d}.ppm").touch()
    code, out, _ = run(capsys, "split", "--data", tmp_path, "--seed", 1, "--out", tmp_path / "s.txt")
    assert code == 0 and out.strip() == "train=2964 val=988 test=988"


def test_tile_prints_patch_total(tmp_path, capsys):
    # fifteen scenes whose grid is 28 x 26 patches of side 8 (plus discarded edges)
    for i in range(15):
        h, w = 26 * 8 + 3, 28 * 8 + 5
        save_sample(tmp_path / "raw", LabeledSample(np.zeros((1, 3, h, w)),
                                                    np.zeros((h, w), dtype=np.uint8), f"g{i:02d}"))
    code, out, _ = run(capsys, "tile", "--in", tmp_path / "raw", "--out", tmp_path / "t",
                       "--patch", 8)
    assert code == 0 and out.strip() == "patches=10920"
    assert len(data.list_stems(tmp_path / "t")) == 10920


def test_train_eval_infer_fuse(workspace, capsys):
    w = workspace
    code, _, err = run(capsys, "train", "--config", w / "run.cfg", "--data", w / "d", "--split",
                       w / "s.txt", "--out", w / "m.ckpt", "--log", w / "log.csv")
    assert code == 0
    assert "model = macu\nlevels = 3\nbase_width = 4\n" in err
    assert (w / "log.csv").read_text().splitlines()[0] == "epoch,step,lr,train_loss,val_miou"

    code, out, _ = run(capsys, "eval", "--ckpt", w / "m.ckpt", "--data", w / "d", "--split",
                       w / "s.txt", "--subset", "test", "--report", w / "r.txt")
    assert code == 0 and out.startswith("oa=") and (w / "r.txt").read_text() == out

    image = data.list_stems(w / "d")[0]
    code, out, _ = run(capsys, "infer", "--ckpt", w / "m.ckpt", "--image",
                       w / "d" / "images" / f"{image}.ppm", "--out", w / "p.pgm", "--color",
                       w / "p.ppm", "--fused")
    assert code == 0 and "fused_mismatch=" in out
    mask = data.decode_image((w / "p.pgm").read_bytes(), classes=6)
    assert mask.shape == (16, 16)
    np.testing.assert_array_equal(data.decolorize((w / "p.ppm").read_bytes(), data.palette(6)), mask)

    code, out, _ = run(capsys, "fuse", "--ckpt", w / "m.ckpt", "--out", w / "f.ckpt", "--size", 16)
    assert code == 0 and "acb_mac_ratio=9/15" in out
    before, after = [int(t.split("=")[1]) for t in out.splitlines()[0].split()]
    assert after < before
    assert run(capsys, "infer", "--ckpt", w / "f.ckpt", "--image", w / "d" / "images" /
               f"{image}.ppm", "--out", w / "q.pgm")[0] == 0
    plain = data.decode_image((w / "p.pgm").read_bytes())
    fused = data.decode_image((w / "q.pgm").read_bytes())
    assert np.mean(plain == fused) >= 0.99


def test_outputs_are_reproducible(workspace, capsys):
    w = workspace
    for tag in ("a", "b"):
        assert run(capsys, "train", "--config", w / "run.cfg", "--data", w / "d", "--split",
                   w / "s.txt", "--out", w / f"{tag}.ckpt", "--log", w / f"{tag}.csv")[0] == 0
    assert (w / "a.ckpt").read_bytes() == (w / "b.ckpt").read_bytes()
    assert (w / "a.csv").read_bytes() == (w / "b.csv").read_bytes()


def test_params_table(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    lines = out.splitlines()
    assert lines[-1] == "total=5385298 (5.385M)"
    assert lines[0].split()[0] == "enc1.conv1"


def test_bench_prints_ratio(workspace, capsys):
    code, out, _ = run(capsys, "bench", "--config", workspace / "run.cfg", "--size", 16, "--reps", 2)
    assert code == 0
    assert "acb_mac_ratio=9/15 (0.600000) for every conv block" in out
    assert out.startswith("forward_median_s unfused=")


def test_gradcheck_failure_exit_3(monkeypatch, capsys):
    monkeypatch.setattr(verify, "run_all", lambda tol: [verify.CheckResult("fake", 1.0, tol)])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 3 and out.startswith("FAIL fake")
