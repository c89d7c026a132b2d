# utils/checkpoint.py
"""Named-slot binary checkpoints shared by backbone and adaptor models.

Layout (little-endian):
    magic  b"CODACKPT"
    u32    format version
    u32    metadata length, then UTF-8 JSON metadata
    u32    slot count
    per slot: u32 name length, UTF-8 name, u32 ndim, u64 * ndim shape,
              row-major float64 values
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import torch

from src.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"CODACKPT"
VERSION = 1


def save_checkpoint(
    path: Union[str, Path],
    slots: Mapping[str, torch.Tensor],
    metadata: Dict[str, Any],
) -> None:
    """
    Write named tensors and metadata to a checkpoint file.

    Args:
        path: Destination file
        slots: Ordered mapping of slot name to tensor
        metadata: JSON-serialisable model description
    """
    meta = json.dumps(metadata, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(slots))]
    for name, tensor in slots.items():
        values = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info("Saved checkpoint with %d slots to %s", len(slots), path)


def load_checkpoint(path: Union[str, Path]) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file

    Returns:
        (slots, metadata)

    Raises:
        CheckpointError: On bad magic, unknown version or truncation
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[offset:offset + size]
        offset += size
        return chunk

    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    metadata = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))

    slots: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n_values = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8").reshape(shape)
        slots[name] = torch.from_numpy(values.astype(np.float64))
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last slot")
    return slots, metadata
