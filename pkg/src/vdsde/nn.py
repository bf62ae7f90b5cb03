"""Neural-network substrate on top of torch autograd (float64 throughout).

Dense layers use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation and
GRU biases start at zero.  The checkpoint format is a small versioned binary
blob of named little-endian float64 tensors.
"""

from __future__ import annotations

import io
import json
import math
import struct
import warnings
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

torch.set_default_dtype(torch.float64)


class TrainingError(RuntimeError):
    pass


def init_dense(layer: nn.Linear) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound)


def mlp(sizes: list[int], activation=nn.Tanh) -> nn.Sequential:
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with no final activation."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = nn.Linear(a, b)
        init_dense(lin)
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class BiGRU(nn.Module):
    """Bidirectional single-layer GRU; output at step i is [forward_i, backward_i]."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.gru = nn.GRU(input_size, hidden_size, bidirectional=True)
        with torch.no_grad():
            for name, p in self.gru.named_parameters():
                if name.startswith("bias"):
                    p.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is (T, B, D) or (T, D); returns (T, B, 2H) or (T, 2H)."""
        unbatched = x.dim() == 2
        if unbatched:
            x = x.unsqueeze(1)
        out, _ = self.gru(x)
        return out[:, 0] if unbatched else out


def gru_bidirectional(inputs: torch.Tensor, module: BiGRU) -> torch.Tensor:
    return module(inputs)


class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.copy_(adam_step(p, p.grad, self.m[i], self.v[i], self.lr, self.t, self.betas, self.eps))


def adam_step(param, grad, m, v, lr: float, t: int, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update; ``m`` and ``v`` are updated in place, the new parameter returned."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = betas
    m.mul_(b1).add_(grad, alpha=1 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (v_hat.sqrt() + eps)


def reinforce_surrogate(losses: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Score-function surrogate with a leave-one-out batch-mean baseline.

    Its gradient is mean_b (L_b - mean_{b' != b} L_b') * grad log q_b.  The
    losses are detached; only ``log_q`` carries gradient.
    """
    L = losses.detach()
    B = L.shape[0]
    if B < 2:
        warnings.warn("batch of one: REINFORCE runs without a baseline", RuntimeWarning)
        baseline = torch.zeros_like(L)
    else:
        baseline = (L.sum() - L) / (B - 1)
    return ((L - baseline) * log_q).sum() / B


def check_gradients(named_params: Iterable[tuple[str, torch.Tensor]]) -> None:
    for name, p in named_params:
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise TrainingError(f"non-finite gradient in {name}")


# --- checkpoint blob -------------------------------------------------------

CKPT_MAGIC = b"VDSK"
CKPT_VERSION = 1


def save_tensors(tensors: Mapping[str, torch.Tensor], header: dict | None = None) -> bytes:
    """Serialise named tensors: magic, version, JSON header, then tensors."""
    buf = io.BytesIO()
    head = json.dumps(header or {}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f8", copy=False)
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def load_tensors(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    view = memoryview(blob)
    if bytes(view[:4]) != CKPT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", view, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(bytes(view[pos:pos + hlen]))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + klen]).decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").reshape(shape)
        pos += 8 * n
        out[name] = torch.from_numpy(arr.astype(np.float64))
    return out, header
