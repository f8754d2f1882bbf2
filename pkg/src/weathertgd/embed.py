"""Text embeddings and cosine similarity for fragments and captions.

Two providers share one interface: a remote HTTP embedding endpoint, and a
deterministic local fallback (hashed bag-of-words) that makes fusion and
convergence fully testable offline. Local vectors are nonnegative, so local
cosine lives in [0, 1] and the consensus/uniqueness thresholds keep their
meaning.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
import requests

from .errors import DimensionMismatch, ProviderError, ZeroVector

LOCAL_DIMENSION = 256

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(eq=False)
class EmbeddingVector:
    """Unit-normalized embedding; all-zero only for empty text."""

    values: np.ndarray
    provider_id: str

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def _normalized(values: np.ndarray, provider_id: str) -> EmbeddingVector:
    values = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if norm > 0.0:
        values = values / norm
    return EmbeddingVector(values=values, provider_id=provider_id)


def _fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _FNV_MASK
    return h


class LocalEmbedder:
    """Deterministic hashed bag-of-words embedder.

    Lowercases, strips punctuation, splits on whitespace, buckets each token
    by 64-bit FNV-1a into a fixed-dimension count vector, and L2-normalizes.
    A test/offline device with the remote interface, not a semantic model.
    """

    def __init__(self, dimension: int = LOCAL_DIMENSION):
        self.dimension = dimension
        self.provider_id = f"local-bow-{dimension}"

    def embed_text(self, text: str) -> EmbeddingVector:
        counts = np.zeros(self.dimension, dtype=np.float64)
        for token in text.lower().translate(_PUNCT_TABLE).split():
            counts[_fnv1a64(token) % self.dimension] += 1.0
        return _normalized(counts, self.provider_id)

    def embed_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        return [self.embed_text(t) for t in texts]


class RemoteEmbedder:
    """HTTP embedding provider: POST {model, input: [texts]} -> list of vectors."""

    MAX_BATCH = 64

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout_s: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.provider_id = f"remote:{model}"

    def _post(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "input": texts},
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise ProviderError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProviderError("embedding endpoint returned non-JSON body") from exc
        if not isinstance(payload, list) or len(payload) != len(texts):
            raise ProviderError("embedding endpoint returned a malformed vector list")
        return payload

    def embed_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        vectors: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.MAX_BATCH):
            chunk = texts[start : start + self.MAX_BATCH]
            for raw in self._post(chunk):
                vectors.append(_normalized(np.asarray(raw, dtype=np.float64), self.provider_id))
        return vectors

    def embed_text(self, text: str) -> EmbeddingVector:
        return self.embed_batch([text])[0]


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity, clamped to [-1, 1]; exactly symmetric."""
    if a.provider_id != b.provider_id or a.dimension != b.dimension:
        raise DimensionMismatch(
            f"cannot compare {a.provider_id}/{a.dimension} with {b.provider_id}/{b.dimension}"
        )
    norm_a = float(np.linalg.norm(a.values))
    norm_b = float(np.linalg.norm(b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine against an all-zero embedding")
    value = float(np.dot(a.values, b.values)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))
