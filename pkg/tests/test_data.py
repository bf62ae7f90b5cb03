import numpy as np
import pytest

from vdsde.data import DataError, SequenceDataset, gen_synthetic, ingest_csv


@pytest.mark.parametrize("kind,D", [("sinusoid-mix", 3), ("bounce-2d", 2), ("piecewise-erratic", 2)])
def test_seed_determinism(kind, D):
    a = gen_synthetic(kind, 4, 30, D, seed=5)
    b = gen_synthetic(kind, 4, 30, D, seed=5)
    c = gen_synthetic(kind, 4, 30, D, seed=6)
    assert np.array_equal(a.sequences, b.sequences)
    assert not np.array_equal(a.sequences, c.sequences)
    assert a.shape == (4, 30, D)


def test_sinusoid_channel_variance_range():
    ds = gen_synthetic("sinusoid-mix", 1000, 100, 2, seed=0)
    var = ds.sequences.var(axis=1)
    assert var.min() >= 0.3 and var.max() <= 2.5


def test_bounce_stays_in_unit_box():
    x = gen_synthetic("bounce-2d", 50, 200, 2, seed=1).sequences
    assert x.min() >= 0.0 and x.max() <= 1.0
    with pytest.raises(DataError):
        gen_synthetic("bounce-2d", 4, 10, 3, seed=0)


def test_generator_errors():
    with pytest.raises(DataError):
        gen_synthetic("sinusoid-mix", 1, 10, 2, seed=0)
    with pytest.raises(DataError):
        gen_synthetic("spirals", 4, 10, 2, seed=0)


def test_normalisation_statistics_and_roundtrip():
    ds = gen_synthetic("piecewise-erratic", 8, 40, 3, seed=2)
    z = ds.normalized().reshape(-1, 3)
    assert np.all(np.abs(z.mean(0)) < 1e-6) and np.all(np.abs(z.std(0) - 1) < 1e-6)
    assert np.allclose(ds.denormalize(ds.normalize(ds.sequences)), ds.sequences, atol=1e-12, rtol=0)


def test_save_load(tmp_path):
    ds = gen_synthetic("sinusoid-mix", 3, 10, 2, seed=3)
    ds.save(tmp_path / "d.npz")
    back = SequenceDataset.load(tmp_path / "d.npz")
    assert np.array_equal(back.sequences, ds.sequences) and back.provenance == ds.provenance


def test_csv_windows(tmp_path):
    rows = np.random.default_rng(0).normal(size=(200, 4))
    path = tmp_path / "x.csv"
    np.savetxt(path, rows, delimiter=",", header="a,b,c,d", comments="")
    ds = ingest_csv(path, 100)
    assert ds.shape == (2, 100, 4)
    assert np.allclose(ds.sequences.reshape(200, 4), rows)


def test_csv_zero_variance(tmp_path):
    rows = np.ones((20, 2))
    rows[:, 0] = np.arange(20)
    path = tmp_path / "c.csv"
    np.savetxt(path, rows, delimiter=",")
    with pytest.raises(DataError, match="zero variance"):
        ingest_csv(path, 10)


@pytest.mark.parametrize("text,line", [("1,2\n3\n", 2), ("1,2\n3,x\n", 2), ("h1,h2\n1,2\n1,nan\n", 3)])
def test_csv_errors_carry_line_numbers(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataError, match=f"line {line}"):
        ingest_csv(path, 1)


def test_csv_too_short(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("1,2\n3,4\n")
    with pytest.raises(DataError, match="fewer than"):
        ingest_csv(path, 5)
