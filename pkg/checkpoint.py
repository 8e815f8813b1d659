"""Portable binary checkpoints of named float32 tensors.

Layout (all integers little-endian)::

    magic        8 bytes  b"ETSTPM01"
    entry_count  u32
    entries      repeated:
                   name_length u16, name (UTF-8),
                   rank u8, dims rank x u32,
                   data row-major float32
    crc32        u32 over every preceding byte
"""

import logging
import re
import struct
import zlib

import numpy as np
import torch

from backbone import Backbone
from config import BackboneConfig
from errors import CheckpointCorruptError, ConfigError, DatasetIOError

logger = logging.getLogger(__name__)

MAGIC = b"ETSTPM01"
_FLOAT = np.dtype("<f4")


def encode_state(state: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ConfigError(f"Entry name too long for the checkpoint format: {name[:40]}...")
        arr = np.ascontiguousarray(tensor.detach().cpu().to(torch.float32).numpy(), dtype=_FLOAT)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_state(data: bytes) -> dict[str, np.ndarray]:
    """Parse and validate checkpoint bytes into named float32 arrays."""
    if len(data) < len(MAGIC) + 8:
        raise CheckpointCorruptError("Checkpoint is truncated")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("Bad checkpoint magic")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointCorruptError("Checkpoint CRC mismatch")

    body = data[:-4]
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(body):
            raise CheckpointCorruptError("Checkpoint entry runs past the end of the file")
        chunk = body[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointCorruptError(f"Entry name is not UTF-8: {e}") from e
        if name in entries:
            raise CheckpointCorruptError(f"Duplicate checkpoint entry: {name}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_values = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(n_values * _FLOAT.itemsize), dtype=_FLOAT)
        entries[name] = values.reshape(dims).copy()
    if offset != len(body):
        raise CheckpointCorruptError("Trailing bytes after the last checkpoint entry")
    return entries


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DatasetIOError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_state(data)


def save_checkpoint(b: Backbone, path: str) -> None:
    """Write every parameter and buffer of ``b``."""
    data = encode_state(b.state_dict())
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise DatasetIOError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(b.state_dict())} entries to {path}")


def load_checkpoint(path: str, cfg: BackboneConfig) -> Backbone:
    """Rebuild a backbone from ``path``; every entry must match ``cfg``'s channel plan."""
    entries = read_checkpoint(path)
    model = Backbone(cfg)
    expected = model.state_dict()

    for name in expected:
        if name not in entries:
            raise ConfigError(f"Checkpoint {path} lacks entry '{name}' required by the config")
    for name, arr in entries.items():
        if name not in expected:
            raise ConfigError(f"Checkpoint entry '{name}' has no place in the configured backbone")
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ConfigError(
                f"Checkpoint entry '{name}' has shape {tuple(arr.shape)}, "
                f"config expects {tuple(expected[name].shape)}"
            )

    state = {name: torch.from_numpy(entries[name]).to(expected[name].dtype) for name in expected}
    model.load_state_dict(state, strict=True)
    model.eval()
    logger.info(f"Loaded checkpoint {path}")
    return model


def infer_backbone_config(entries: dict[str, np.ndarray], input_size: int) -> BackboneConfig:
    """Recover the channel plan stored in a checkpoint (depth_scale folded to 1)."""
    try:
        stem = entries["conv1.weight"].shape[0]
        widths = [entries[f"layer{i}.0.conv2.weight"].shape[0] for i in (1, 2, 3)]
    except KeyError as e:
        raise ConfigError(f"Checkpoint lacks entry {e} needed to infer its channel plan") from e
    blocks = {m.group(1) for name in entries if (m := re.match(r"layer1\.(\d+)\.", name))}
    head = entries.get("fc.weight")
    return BackboneConfig(
        input_size=input_size,
        stem_channels=stem,
        block_channels=widths,
        blocks_per_stage=len(blocks),
        num_classes=head.shape[0] if head is not None else 0,
        depth_scale=1.0,
        include_stage4_for_finetune=any(name.startswith("layer4.") for name in entries),
    )


def head_classes(path: str) -> int:
    """Output width of the stored head, 0 when the checkpoint has none."""
    head = read_checkpoint(path).get("fc.weight")
    return 0 if head is None else int(head.shape[0])
