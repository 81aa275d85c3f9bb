"""Binary model checkpoints.

Layout, all little-endian:

    magic           4 bytes  "DGDT"
    version         u16      currently 1
    config          8 x u32  blocks, hidden, heads, grid_h, grid_w,
                             data_dim, classes, t_embed_dim
    t_max           f64
    tensor count    u32
    per tensor:
        name length u16, name bytes (utf-8)
        rank        u8
        extents     rank x u32
        payload     IEEE-754 binary32, row-major

Compute runs in float64; payloads are stored as float32 and upcast on load,
so round-trips are bitwise at the stored precision.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from ..dit import BlockWeights, DiTConfig, DiTWeights
from ..numerics import Tensor

MAGIC = b"DGDT"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(weights: DiTWeights, path) -> None:
    cfg = weights.config
    records = list(weights.named_tensors())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack(
            "<8I", cfg.num_blocks, cfg.hidden_size, cfg.num_heads,
            cfg.token_grid[0], cfg.token_grid[1], cfg.data_dim,
            cfg.num_classes, cfg.t_embed_dim))
        fh.write(struct.pack("<d", cfg.t_max))
        fh.write(struct.pack("<I", len(records)))
        for name, tensor in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.array.ndim))
            fh.write(struct.pack(f"<{tensor.array.ndim}I", *tensor.array.shape))
            fh.write(np.ascontiguousarray(
                tensor.array, dtype="<f4").tobytes())


def _read_exactly(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedCheckpointError(
            f"checkpoint truncated while reading {what} "
            f"(wanted {n} bytes, got {len(buf)})")
    return buf


def load_checkpoint(path) -> DiTWeights:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exactly(fh, 2, "version"))
        if version != VERSION:
            raise VersionMismatchError(
                f"checkpoint version {version}, expected {VERSION}")
        fields = struct.unpack("<8I", _read_exactly(fh, 32, "config"))
        (t_max,) = struct.unpack("<d", _read_exactly(fh, 8, "t_max"))
        config = DiTConfig(
            num_blocks=fields[0], hidden_size=fields[1], num_heads=fields[2],
            token_grid=(fields[3], fields[4]), data_dim=fields[5],
            num_classes=fields[6], t_embed_dim=fields[7], t_max=t_max)
        (count,) = struct.unpack("<I", _read_exactly(fh, 4, "tensor count"))
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack(
                "<H", _read_exactly(fh, 2, "tensor name length"))
            name = _read_exactly(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack(
                "<B", _read_exactly(fh, 1, f"rank of {name}"))
            extents = struct.unpack(
                f"<{rank}I", _read_exactly(fh, 4 * rank, f"extents of {name}"))
            n_values = int(np.prod(extents)) if rank else 1
            payload = _read_exactly(fh, 4 * n_values, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            tensors[name] = Tensor(arr.reshape(extents), requires_grad=True)
    return _assemble(config, tensors)


def _assemble(config: DiTConfig, tensors: dict[str, Tensor]) -> DiTWeights:
    def take(name: str) -> Tensor:
        if name not in tensors:
            raise TruncatedCheckpointError(f"checkpoint missing tensor {name}")
        return tensors.pop(name)

    top = {k: take(k) for k in
           ("in_w", "in_b", "pos", "class_embed", "out_w", "out_b")}
    blocks = []
    for k in range(config.num_blocks):
        fields = {f: take(f"block{k}.{f}")
                  for f in BlockWeights.__dataclass_fields__}
        blocks.append(BlockWeights(**fields))
    if tensors:
        extra = ", ".join(sorted(tensors))
        raise CheckpointError(f"checkpoint holds unexpected tensors: {extra}")
    return DiTWeights(config, blocks=blocks, **top)
