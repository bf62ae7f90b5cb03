"""Two-stage training of the latent SDE.

Stage 1 fixes the discretization to every frame and trains the SDE parts;
stage 2 samples knot sets from the gap model and trains everything, the gap
model through the score-function surrogate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import nn as vnn
from .model import LatentVDSDE, ModelConfig

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    iters: int = 500
    stage1_frac: float = 0.4
    stage1_iters: Optional[int] = None
    stage2_iters: Optional[int] = None
    batch_size: int = 16
    lr: float = 3e-4
    lambda_frac: float = 0.5
    seed: int = 0
    rate: str = "auto"  # "lossy", "lossless", or chosen by the observation model
    model: dict = field(default_factory=dict)

    def stages(self) -> tuple[int, int]:
        if self.stage1_iters is not None or self.stage2_iters is not None:
            s1 = self.stage1_iters if self.stage1_iters is not None else 0
            s2 = self.stage2_iters if self.stage2_iters is not None else 0
        else:
            s1 = int(round(self.stage1_frac * self.iters))
            s2 = self.iters - s1
        if s1 < 0 or s2 < 0 or s1 + s2 < 1:
            raise ValueError("iteration counts must be non-negative and not both zero")
        return s1, s2

    def __post_init__(self):
        if not 0 < self.lambda_frac <= 1:
            raise ValueError("lambda_frac must lie in (0, 1]")
        if self.rate not in ("auto", "lossy", "lossless"):
            raise ValueError(f"unknown rate {self.rate!r}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")


def build_model(data: np.ndarray, cfg: TrainConfig, frame_dt: float = 0.1, **extra) -> LatentVDSDE:
    """Model sized for ``data`` (N, T, D_x) with lambda = lambda_frac / frame_dt."""
    torch.manual_seed(cfg.seed)
    options = {**cfg.model, **extra}
    options.update(d_x=data.shape[-1], frame_dt=frame_dt, lam=cfg.lambda_frac / frame_dt)
    return LatentVDSDE(ModelConfig.from_dict(options))


def _summary(it, stage, out, model) -> dict:
    nu = model.nu.detach().numpy()
    val = {k: float(out[k].detach()) for k in ("loss", "recon", "latent_rate", "times_rate")}
    return {"iter": it, "stage": stage, **val,
            "M_mean": out["M"], "nu_min": float(nu.min()), "nu_median": float(np.median(nu)),
            "nu_max": float(nu.max()), "n_global": int((nu <= model.config.prune_threshold).sum())}


def train(data: np.ndarray, cfg: TrainConfig, frame_dt: float = 0.1,
          model: Optional[LatentVDSDE] = None, checkpoint: Optional[Path] = None):
    """Train on normalised sequences (N, T, D_x); returns (model, per-iteration log).

    Every iteration draws its batch and noise from a generator seeded by
    (seed, iteration), so runs are reproducible and resumable.
    """
    data = np.asarray(data, dtype=np.float64)
    if model is None:
        model = build_model(data, cfg, frame_dt)
    s1, s2 = cfg.stages()
    opt = vnn.Adam(model.parameters(), lr=cfg.lr)
    history = []
    N = data.shape[0]
    B = min(cfg.batch_size, N)
    rate = cfg.rate
    if rate == "auto":
        rate = "lossless" if model.config.obs == "logistic-mixture" else "lossy"
    for it in range(s1 + s2):
        stage = 1 if it < s1 else 2
        rng = np.random.default_rng([cfg.seed, it])
        batch = torch.from_numpy(data[rng.choice(N, size=B, replace=False)])
        opt.zero_grad()
        out = model.objective(batch, rng, stage, rate=rate)
        if float(out["loss"].detach()) > DIVERGENCE_LIMIT:
            if checkpoint is not None:
                Path(checkpoint).write_bytes(model.to_bytes())
            raise vnn.TrainingError(f"diverged at iteration {it}: loss {float(out['loss'].detach()):.4g}")
        out["train_loss"].backward()
        vnn.check_gradients(model.named_parameters())
        opt.step()
        row = _summary(it, stage, out, model)
        history.append(row)
        if it % 25 == 0 or it == s1 + s2 - 1:
            log.info("iter %d stage %d loss %.2f M %.1f", it, stage, row["loss"], row["M_mean"])
    return model, history
