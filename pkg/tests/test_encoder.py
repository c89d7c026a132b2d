import numpy as np
import pytest
import torch

from src.encoder import (
    FileEmbeddingProvider,
    HashEmbeddingProvider,
    build_provider,
    load_embeddings,
    save_embeddings,
    tokenize,
)
from src.errors import ConfigurationError, EmbeddingError
from src.schemas import EncoderConfig


def test_tokenize_splits_on_non_alphanumerics():
    assert tokenize("int a;") == ["int", "a"]
    assert tokenize("for(i=0;i<n;i++)") == ["for", "i", "0", "i", "n", "i"]


def test_hash_encode_empty_is_zero():
    vec = HashEmbeddingProvider(32).encode("")
    assert vec.shape == (32,)
    assert torch.count_nonzero(vec) == 0


def test_hash_encode_deterministic_and_token_equivalent():
    enc = HashEmbeddingProvider(16)
    assert torch.equal(enc.encode("print(x)"), enc.encode("print(x)"))
    assert torch.equal(enc.encode("int a;"), enc.encode("int a ;"))


@pytest.mark.parametrize("code", ["", "a", "while True: pass", "x = y + z * 2"])
def test_hash_encode_norm_is_zero_or_one(code):
    norm = float(torch.linalg.vector_norm(HashEmbeddingProvider(8).encode(code)))
    assert norm == pytest.approx(0.0) or norm == pytest.approx(1.0)


def test_hash_provider_rejects_bad_dim():
    with pytest.raises(ConfigurationError):
        HashEmbeddingProvider(0)


def test_file_provider_missing_key_names_it():
    provider = FileEmbeddingProvider({"k1": np.ones(4)}, 4)
    with pytest.raises(EmbeddingError, match="k2"):
        provider.encode("k2")


def test_file_provider_encode_many():
    provider = FileEmbeddingProvider({"a": np.zeros(3), "b": np.ones(3)}, 3)
    out = provider.encode_many(["b", "a"])
    assert out.shape == (2, 3)
    assert torch.equal(out[0], torch.ones(3, dtype=torch.float64))


def test_save_load_round_trip(tmp_path):
    vectors = {"a": np.array([0.5, -1.25, 3.0]), "b": np.array([1.0, 2.0, -0.125])}
    provider = FileEmbeddingProvider(vectors, 3)
    path = tmp_path / "emb.bin"
    save_embeddings(provider, path)
    loaded = load_embeddings(path, expected_dim=3)
    assert loaded.keys() == ["a", "b"]
    for key in vectors:
        assert torch.equal(loaded.encode(key), provider.encode(key))


def test_saved_rows_are_little_endian_float32(tmp_path):
    provider = FileEmbeddingProvider({"a": np.array([0.5, -1.25, 3.0]), "b": np.array([1.0, 2.0, -0.125])}, 3)
    path = tmp_path / "emb.bin"
    save_embeddings(provider, path)
    raw = path.read_bytes()
    assert len(raw) == 16 + 2 * 3 * 4
    assert np.frombuffer(raw[:16], dtype="<u8").tolist() == [2, 3]
    rows = np.frombuffer(raw[16:], dtype="<f4").reshape(2, 3)
    assert rows[0].tolist() == [0.5, -1.25, 3.0]


def test_empty_file_provider_errors_on_any_key(tmp_path):
    path = tmp_path / "empty.bin"
    save_embeddings(FileEmbeddingProvider({}, 4), path)
    loaded = load_embeddings(path)
    assert len(loaded) == 0
    with pytest.raises(EmbeddingError):
        loaded.encode("anything")


def test_load_dim_mismatch(tmp_path):
    path = tmp_path / "wide.bin"
    save_embeddings(FileEmbeddingProvider({"a": np.zeros(768)}, 768), path)
    with pytest.raises(ConfigurationError):
        load_embeddings(path, expected_dim=32)


def test_load_truncated_file(tmp_path):
    path = tmp_path / "emb.bin"
    save_embeddings(FileEmbeddingProvider({"a": np.ones(4), "b": np.ones(4)}, 4), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(EmbeddingError):
        load_embeddings(path)


def test_load_key_count_mismatch(tmp_path):
    path = tmp_path / "emb.bin"
    save_embeddings(FileEmbeddingProvider({"a": np.ones(2)}, 2), path)
    (tmp_path / "emb.bin.keys").write_text("a\nb\n", encoding="utf-8")
    with pytest.raises(EmbeddingError):
        load_embeddings(path)


def test_build_provider(tmp_path):
    assert isinstance(build_provider(EncoderConfig(kind="hash", dim=8)), HashEmbeddingProvider)
    path = tmp_path / "emb.bin"
    save_embeddings(FileEmbeddingProvider({"a": np.ones(8)}, 8), path)
    provider = build_provider(EncoderConfig(kind="file", dim=8, path=str(path)))
    assert provider.dim == 8
