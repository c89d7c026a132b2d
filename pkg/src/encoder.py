"""Code-embedding providers: feature hashing and precomputed vector files."""

import logging
import re
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from src.errors import ConfigurationError, EmbeddingError
from src.numerics import DTYPE
from src.schemas import EncoderConfig
from utils.hashing import fnv1a_64

logger = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[^0-9A-Za-z]+")
HEADER_BYTES = 16


def tokenize(code: str) -> List[str]:
    return [tok for tok in _TOKEN_SPLIT.split(code) if tok]


class EmbeddingProvider:
    kind = "base"

    def __init__(self, dim: int):
        if dim < 1:
            raise ConfigurationError(f"embedding dim must be positive, got {dim}")
        self.dim = dim

    def encode(self, code: str) -> torch.Tensor:
        raise NotImplementedError

    def encode_many(self, codes: Sequence[str]) -> torch.Tensor:
        if not codes:
            return torch.zeros((0, self.dim), dtype=DTYPE)
        return torch.stack([self.encode(code) for code in codes])


class HashEmbeddingProvider(EmbeddingProvider):
    """Signed feature hashing of alphanumeric tokens, L2-normalised."""

    kind = "hash"

    def encode(self, code: str) -> torch.Tensor:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(code):
            h = fnv1a_64(token.encode("utf-8"))
            sign = -1.0 if (h >> 63) & 1 else 1.0
            vec[h % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return torch.from_numpy(vec)


class FileEmbeddingProvider(EmbeddingProvider):
    """Exact lookups of precomputed vectors by code key."""

    kind = "file"

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int):
        super().__init__(dim)
        self._vectors: Dict[str, np.ndarray] = {}
        for key, vec in vectors.items():
            # stored at float32 precision, matching the on-disk rows
            arr = np.asarray(vec, dtype=np.float32).astype(np.float64).reshape(-1)
            if arr.shape[0] != dim:
                raise ConfigurationError(f"vector for {key!r} has dim {arr.shape[0]}, expected {dim}")
            arr.setflags(write=False)
            self._vectors[key] = arr

    def __len__(self) -> int:
        return len(self._vectors)

    def keys(self) -> List[str]:
        return list(self._vectors)

    def matrix(self, keys: Sequence[str]) -> np.ndarray:
        if not keys:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self._vectors[k] for k in keys])

    def encode(self, code: str) -> torch.Tensor:
        try:
            vec = self._vectors[code]
        except KeyError:
            raise EmbeddingError(f"no embedding for code key {code!r}") from None
        return torch.tensor(vec, dtype=DTYPE)


def _default_keys_path(path: Path) -> Path:
    return path.with_name(path.name + ".keys")


def save_embeddings(
    provider: FileEmbeddingProvider,
    path: Union[str, Path],
    keys_path: Optional[Union[str, Path]] = None,
) -> None:
    """Write vectors as [u64 count][u64 dim] + float32 rows, keys to a sidecar file."""
    path = Path(path)
    keys_path = Path(keys_path) if keys_path else _default_keys_path(path)
    keys = provider.keys()
    rows = provider.matrix(keys).astype("<f4")
    header = np.array([len(keys), provider.dim], dtype="<u8")
    path.write_bytes(header.tobytes() + rows.tobytes())
    keys_path.write_text("".join(f"{k}\n" for k in keys), encoding="utf-8")
    logger.info("Saved %d embeddings (dim %d) to %s", len(keys), provider.dim, path)


def load_embeddings(
    path: Union[str, Path],
    keys_path: Optional[Union[str, Path]] = None,
    expected_dim: Optional[int] = None,
) -> FileEmbeddingProvider:
    """
    Load a binary embedding file and its sidecar key list.

    Raises:
        EmbeddingError: Truncated file or key count mismatch
        ConfigurationError: Header dim differs from expected_dim
    """
    path = Path(path)
    keys_path = Path(keys_path) if keys_path else _default_keys_path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise EmbeddingError(f"{path}: truncated header")
    count, dim = (int(v) for v in np.frombuffer(raw[:HEADER_BYTES], dtype="<u8"))
    if expected_dim is not None and dim != expected_dim:
        raise ConfigurationError(f"{path}: embedding dim {dim} does not match configured dim {expected_dim}")
    expected_bytes = HEADER_BYTES + count * dim * 4
    if len(raw) != expected_bytes:
        raise EmbeddingError(f"{path}: expected {expected_bytes} bytes, found {len(raw)}")
    rows = np.frombuffer(raw[HEADER_BYTES:], dtype="<f4").reshape(count, dim)

    keys = keys_path.read_text(encoding="utf-8").splitlines() if keys_path.exists() else []
    if len(keys) != count:
        raise EmbeddingError(f"{keys_path}: {len(keys)} keys for {count} rows")
    return FileEmbeddingProvider({k: rows[i] for i, k in enumerate(keys)}, dim)


def build_provider(config: EncoderConfig) -> EmbeddingProvider:
    if config.kind == "hash":
        return HashEmbeddingProvider(config.dim)
    return load_embeddings(config.path, config.keys_path, expected_dim=config.dim)
