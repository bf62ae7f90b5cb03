"""On-disk layout of a compressed sequence.

All integers are little-endian and fixed width::

    magic      4s   b"CTSQ"
    version    u8
    mode       u8   0 lossy, 1 lossless
    times_mode u8   0 estimate (raw f64 times), 1 A* coded, 2 every frame
    flags      u8   bit 0: pruned inference
    model_hash u64
    lam        f64
    frame_dt   f64
    T          u32
    M          u32
    precision  u32
    seed       u64
    init_words u32  random words seeding the bits-back message (0 if lossy)
    times      u32 length + bytes
    latents    u32 length + bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"CTSQ"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBQddIIIQI")

MODE_LOSSY, MODE_LOSSLESS = 0, 1
TIMES_ESTIMATE, TIMES_ASTAR, TIMES_FULL = 0, 1, 2
TIMES_MODES = {"estimate": TIMES_ESTIMATE, "astar": TIMES_ASTAR, "full": TIMES_FULL}
FLAG_PRUNED = 1


class ContainerError(ValueError):
    pass


class TruncatedContainer(ContainerError):
    pass


class VersionMismatch(ContainerError):
    pass


class ModelMismatch(ContainerError):
    pass


@dataclass
class Container:
    mode: int
    times_mode: int
    flags: int
    model_hash: int
    lam: float
    frame_dt: float
    T: int
    M: int
    precision: int
    seed: int
    init_words: int
    times_block: bytes
    latents_block: bytes

    @property
    def pruned(self) -> bool:
        return bool(self.flags & FLAG_PRUNED)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.mode, self.times_mode, self.flags, self.model_hash,
                            self.lam, self.frame_dt, self.T, self.M, self.precision, self.seed,
                            self.init_words)
        return b"".join([head, struct.pack("<I", len(self.times_block)), self.times_block,
                         struct.pack("<I", len(self.latents_block)), self.latents_block])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Container":
        if len(blob) < 4 or blob[:4] != MAGIC:
            raise ContainerError("not a compressed sequence (bad magic)")
        if len(blob) < 5:
            raise TruncatedContainer("container ends inside the header")
        if blob[4] != VERSION:
            raise VersionMismatch(f"container version {blob[4]}, reader supports {VERSION}")
        if len(blob) < _HEADER.size:
            raise TruncatedContainer("container ends inside the header")
        (_, _, mode, times_mode, flags, model_hash, lam, frame_dt, T, M, precision, seed,
         init_words) = _HEADER.unpack_from(blob, 0)
        if mode not in (MODE_LOSSY, MODE_LOSSLESS) or times_mode not in TIMES_MODES.values():
            raise ContainerError("unknown coding mode")
        pos = _HEADER.size
        blocks = []
        for name in ("times", "latents"):
            if pos + 4 > len(blob):
                raise TruncatedContainer(f"missing {name} block")
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + n > len(blob):
                raise TruncatedContainer(f"{name} block is truncated")
            blocks.append(bytes(blob[pos:pos + n]))
            pos += n
        if pos != len(blob):
            raise ContainerError("trailing bytes after the latents block")
        return cls(mode, times_mode, flags, model_hash, lam, frame_dt, T, M, precision, seed,
                   init_words, *blocks)
