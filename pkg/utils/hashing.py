# utils/hashing.py
"""Hashing helpers for feature hashing and parameter fingerprints."""

import hashlib
import logging
from typing import Iterable, Tuple

import torch

logger = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """
    64-bit FNV-1a hash.

    Args:
        data: Bytes to hash

    Returns:
        Unsigned 64-bit hash value
    """
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tensor_digest(named_tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """
    SHA-256 fingerprint of named tensors, sensitive to every bit.

    Args:
        named_tensors: (name, tensor) pairs in a stable order

    Returns:
        Hex digest string
    """
    sha = hashlib.sha256()
    for name, tensor in named_tensors:
        data = tensor.detach().cpu().contiguous()
        sha.update(name.encode())
        sha.update(str(tuple(data.shape)).encode())
        sha.update(str(data.dtype).encode())
        sha.update(data.numpy().tobytes())
    return sha.hexdigest()
