"""Sequence datasets: synthetic generators and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

KINDS = ("sinusoid-mix", "bounce-2d", "piecewise-erratic")


class DataError(ValueError):
    pass


@dataclass
class SequenceDataset:
    """Raw sequences (N, T, D_x) plus per-channel normalisation statistics."""

    sequences: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    frame_dt: float = 0.1
    provenance: str = ""

    @classmethod
    def from_raw(cls, sequences, frame_dt: float = 0.1, provenance: str = "") -> "SequenceDataset":
        seq = np.asarray(sequences, dtype=np.float64)
        if seq.ndim != 3 or seq.shape[0] < 1 or seq.shape[1] < 2:
            raise DataError("sequences must have shape (N >= 1, T >= 2, D)")
        flat = seq.reshape(-1, seq.shape[-1])
        mean = flat.mean(0)
        std = flat.std(0)
        if np.any(std <= 1e-12 * np.maximum(1.0, np.abs(mean))):
            bad = np.nonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))[0].tolist()
            raise DataError(f"zero variance channel(s): {bad}")
        return cls(seq, mean, std, frame_dt, provenance)

    @property
    def shape(self):
        return self.sequences.shape

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def normalized(self) -> np.ndarray:
        return self.normalize(self.sequences)

    def save(self, path) -> None:
        np.savez(path, sequences=self.sequences, mean=self.mean, std=self.std,
                 frame_dt=self.frame_dt, provenance=self.provenance)

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        with np.load(path, allow_pickle=False) as f:
            return cls(f["sequences"], f["mean"], f["std"], float(f["frame_dt"]), str(f["provenance"]))


def _sinusoid_mix(rng, N, T, D, t):
    # a dominant slow component and a weaker fast one, in disjoint bands
    amp = np.stack([rng.uniform(0.9, 1.3, (N, 1, D)), rng.uniform(0.3, 0.7, (N, 1, D))], -1)
    freq = np.stack([rng.uniform(1.5, 3.0, (N, 1, D)), rng.uniform(3.5, 6.0, (N, 1, D))], -1)
    phase = rng.uniform(0.0, 2 * np.pi, size=(N, 1, D, 2))
    clean = (amp * np.sin(freq * t[None, :, None, None] + phase)).sum(-1)
    return clean + rng.normal(0.0, 0.1, size=(N, T, D))


def _bounce(rng, N, T, D, t):
    if D != 2:
        raise DataError("bounce-2d has exactly 2 channels")
    p0 = rng.uniform(0.0, 1.0, size=(N, 1, 2))
    v = rng.uniform(0.2, 0.6, size=(N, 1, 2)) * rng.choice([-1.0, 1.0], size=(N, 1, 2))
    y = np.mod(p0 + v * t[None, :, None], 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def _erratic(rng, N, T, D, t):
    amp = rng.uniform(0.6, 1.2, size=(N, 1, D))
    freq = rng.uniform(1.0, 3.0, size=(N, 1, D))
    phase = rng.uniform(0.0, 2 * np.pi, size=(N, 1, D))
    x = amp * np.sin(freq * t[None, :, None] + phase)
    jumps = rng.uniform(t[0], t[-1], size=(N, 3))
    sizes = rng.normal(0.0, 1.0, size=(N, 3, D))
    for j in range(3):
        x = x + (t[None, :, None] >= jumps[:, j, None, None]) * sizes[:, j, None, :]
    return x


def gen_synthetic(kind: str, N: int, T: int, D_x: int, seed: int, frame_dt: float = 0.1) -> SequenceDataset:
    """Deterministic synthetic sequences of frames at t_i = i * frame_dt."""
    if N < 2 or T < 2:
        raise DataError("need N >= 2 and T >= 2")
    makers = {"sinusoid-mix": _sinusoid_mix, "bounce-2d": _bounce, "piecewise-erratic": _erratic}
    if kind not in makers:
        raise DataError(f"unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    rng = np.random.default_rng(seed)
    t = frame_dt * np.arange(1, T + 1)
    x = makers[kind](rng, N, T, D_x, t)
    return SequenceDataset.from_raw(x, frame_dt, f"{kind}:seed={seed}")


def ingest_csv(path, T: int, frame_dt: float = 0.1) -> SequenceDataset:
    """Cut a frames-by-channels CSV into non-overlapping windows of ``T`` rows.

    A first row with no numeric cells is treated as a header.
    """
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1 and not any(_is_number(c) for c in row):
                    continue
                bad = next(c for c in row if not _is_number(c))
                raise DataError(f"line {lineno}: non-numeric cell {bad!r}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataError(f"line {lineno}: expected {width} columns, found {len(vals)}")
            if not all(np.isfinite(vals)):
                raise DataError(f"line {lineno}: non-finite value")
            rows.append(vals)
    n = len(rows) // T
    if n < 1:
        raise DataError(f"file has {len(rows)} frames, fewer than T={T}")
    arr = np.asarray(rows[: n * T], dtype=np.float64).reshape(n, T, width)
    return SequenceDataset.from_raw(arr, frame_dt, f"csv:{path}")


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True
