import csv

import numpy as np
import pytest

from vdsde.cli import EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, load_config, main

CONFIG = """\
[model]
d_z = 3
hidden = 8
embed = 8
width = 16
gap_width = 8
n_substeps = 2

[train]
batch_size = 4
lr = 0.003
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "conf.ini").write_text(CONFIG)
    conf = str(d / "conf.ini")
    assert main(["gen-data", "--n", "6", "--seq-len", "20", "--dx", "2", "--seed", "1",
                 "--out", str(d / "data.npz")]) == EXIT_OK
    assert main(["--config", conf, "train", "--data", str(d / "data.npz"), "--iters", "6",
                 "--out", str(d / "model.ckpt")]) == EXIT_OK
    assert main(["--config", conf, "train", "--data", str(d / "data.npz"), "--iters", "4", "--seed", "7",
                 "--out", str(d / "other.ckpt")]) == EXIT_OK
    return d


def test_train_writes_log(work):
    with open(work / "model.log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and {"loss", "M_mean", "nu_min"} <= set(rows[0])


def test_compress_decompress(work, capsys):
    args = ["--model", str(work / "model.ckpt"), str(work / "data.npz"), "--index", "2"]
    assert main(["compress", *args, "--out", str(work / "a.bin")]) == EXIT_OK
    assert main(["decompress", "--model", str(work / "model.ckpt"), str(work / "a.bin"),
                 "--out", str(work / "a.csv")]) == EXIT_OK
    out = np.loadtxt(work / "a.csv", delimiter=",")
    assert out.shape == (20, 2)
    assert "20 frames" in capsys.readouterr().out


def test_arbitrary_query_grid(work):
    assert main(["compress", "--model", str(work / "model.ckpt"), str(work / "data.npz"),
                 "--out", str(work / "b.bin")]) == EXIT_OK
    assert main(["decompress", "--model", str(work / "model.ckpt"), str(work / "b.bin"),
                 "--times", "0:10:0.05", "--out", str(work / "b.csv")]) == EXIT_OK
    assert np.loadtxt(work / "b.csv", delimiter=",").shape == (201, 2)


def test_compress_csv_input(work):
    frames = np.random.default_rng(0).normal(size=(15, 2))
    np.savetxt(work / "frames.csv", frames, delimiter=",")
    assert main(["compress", "--model", str(work / "model.ckpt"), str(work / "frames.csv"),
                 "--times-mode", "astar", "--out", str(work / "c.bin")]) == EXIT_OK
    assert main(["decompress", "--model", str(work / "model.ckpt"), str(work / "c.bin"),
                 "--out", str(work / "c.csv")]) == EXIT_OK
    assert np.loadtxt(work / "c.csv", delimiter=",").shape == (15, 2)


def test_ingest(work):
    np.savetxt(work / "long.csv", np.random.default_rng(1).normal(size=(50, 3)), delimiter=",")
    assert main(["ingest", str(work / "long.csv"), "--seq-len", "10", "--out", str(work / "ing.npz")]) == EXIT_OK
    assert np.load(work / "ing.npz")["sequences"].shape == (5, 10, 3)


def test_rd_sweep_rate_grows_with_precision(work):
    out = work / "rd.csv"
    assert main(["rd-sweep", "--model", str(work / "model.ckpt"), "--data", str(work / "data.npz"),
                 "--precisions", "16,256,4096", "--limit", "3", "--out", str(out)]) == EXIT_OK
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    bits = [float(r["bits_latents"]) for r in rows]
    assert [int(r["precision"]) for r in rows] == [16, 256, 4096]
    assert bits[0] < bits[1] < bits[2]


def test_exit_codes(work, tmp_path):
    ckpt = str(work / "model.ckpt")
    assert main(["compress", "--model", ckpt, str(work / "data.npz"), "--index", "99",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["decompress", "--model", ckpt, str(work / "a.bin"), "--times", "1:0:0.1",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["compress", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert main(["compress", "--model", str(tmp_path / "missing.ckpt"), str(work / "data.npz"),
                 "--out", str(tmp_path / "x")]) == EXIT_IO
    (tmp_path / "junk.bin").write_bytes(b"not a container")
    assert main(["decompress", "--model", ckpt, str(tmp_path / "junk.bin"),
                 "--out", str(tmp_path / "x")]) == EXIT_IO
    assert main(["decompress", "--model", str(work / "other.ckpt"), str(work / "a.bin"),
                 "--out", str(tmp_path / "x")]) == EXIT_MISMATCH


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd_z = lots\n")
    assert main(["--config", str(bad), "gen-data", "--out", str(tmp_path / "d.npz")]) == EXIT_USAGE
    bad.write_text("[model]\ncolour = red\n")
    assert main(["--config", str(bad), "gen-data", "--out", str(tmp_path / "d.npz")]) == EXIT_USAGE


def test_load_config_types(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(CONFIG + "\n[codec]\nprecision = 64\nprune = no\n")
    conf = load_config(p)
    assert conf["model"]["d_z"] == 3 and conf["train"]["lr"] == 0.003
    assert conf["codec"] == {"precision": 64, "prune": False}
