from __future__ import annotations

import hashlib
import logging
import time
from abc import ABC, abstractmethod
from collections import Counter
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
import requests
from numpy.typing import NDArray

from config import RuntimeConfig

logger = logging.getLogger(__name__)

# Unit-norm float32 vector of length embedding_dim
EmbeddingVector = NDArray[np.float32]

NORM_TOLERANCE = 1e-6


class EmbeddingError(Exception):
    pass


class EmbeddingTransportError(EmbeddingError):
    def __init__(self, message: str, retries: int):
        super().__init__(message)
        self.retries = retries


class EmbeddingProtocolError(EmbeddingError):
    pass


class DegenerateVectorError(ValueError):
    pass


def normalize(values: Sequence[float] | np.ndarray) -> EmbeddingVector:
    """Scale a raw vector to unit L2 norm"""
    raw = np.asarray(values, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0:
        raise DegenerateVectorError(f"expected a non-empty 1-D vector, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise DegenerateVectorError("vector contains non-finite entries")
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize the zero vector")
    return (raw / norm).astype(np.float32)


def _char_trigrams(text: str) -> Counter:
    padded = f" {text} "
    if len(padded) < 3:
        return Counter([padded])
    return Counter(padded[i:i + 3] for i in range(len(padded) - 2))


@lru_cache(maxsize=65536)
def _trigram_direction(gram: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(gram.encode('utf-8'), digest_size=8).digest(), 'little')
    return np.random.default_rng(seed).standard_normal(dim)


def mock_embed(text: str, dim: int) -> EmbeddingVector:
    """
    Deterministic offline embedding.

    Every character 3-gram of the space-padded text maps, through a BLAKE2b
    seed, to a fixed Gaussian direction; the vector is the count-weighted sum
    of those directions, normalized. Texts sharing more 3-grams score higher.
    """
    if dim < 2:
        raise ValueError(f"dim must be at least 2, got {dim}")
    total = np.zeros(dim, dtype=np.float64)
    for gram, count in sorted(_char_trigrams(text).items()):
        total += count * _trigram_direction(gram, dim)
    return normalize(total)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    return float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


class EmbeddingProvider(ABC):
    """Turns texts into vectors of a fixed dimension"""

    name = 'provider'

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def embed_raw(self, texts: List[str]) -> List[Sequence[float]]:
        """One raw (not necessarily normalized) vector per text, in order"""


class MockEmbeddingProvider(EmbeddingProvider):
    name = 'mock-trigram'

    def __init__(self, dim: int = 384):
        if dim < 2:
            raise ValueError(f"dim must be at least 2, got {dim}")
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def embed_raw(self, texts: List[str]) -> List[Sequence[float]]:
        return [mock_embed(text, self._dim) for text in texts]


class RemoteEmbeddingProvider(EmbeddingProvider):
    """
    Client for a local embedding server.

    POST {endpoint}/embed with {"texts": [...]} and expect
    {"vectors": [[float, ...], ...]}.
    """

    name = 'remote'

    def __init__(self, endpoint: str, dim: int, max_retries: int = 3,
                 backoff_s: float = 0.5, timeout_s: float = 60.0,
                 session: Optional[requests.Session] = None):
        self.url = f"{endpoint.rstrip('/')}/embed"
        self._dim = dim
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    @property
    def dim(self) -> int:
        return self._dim

    def _post(self, texts: List[str]) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                response = self.session.post(self.url, json={'texts': texts}, timeout=self.timeout_s)
                if response.status_code >= 500:
                    last_error = EmbeddingError(f"embedding server returned HTTP {response.status_code}")
                    logger.warning(f"⚠️ Embedding request failed (attempt {attempt + 1}): HTTP {response.status_code}")
                    continue
                response.raise_for_status()
                return response.json()
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = e
                logger.warning(f"⚠️ Embedding request failed (attempt {attempt + 1}): {e}")
            except requests.HTTPError as e:
                raise EmbeddingProtocolError(f"embedding server rejected the request: {e}") from e
            except ValueError as e:
                raise EmbeddingProtocolError(f"embedding server sent invalid JSON: {e}") from e
        raise EmbeddingTransportError(
            f"embedding server at {self.url} unreachable after {self.max_retries} retries: {last_error}",
            retries=self.max_retries,
        )

    def embed_raw(self, texts: List[str]) -> List[Sequence[float]]:
        body = self._post(texts)
        vectors = body.get('vectors') if isinstance(body, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise EmbeddingProtocolError(
                f"expected {len(texts)} vectors, got {len(vectors) if isinstance(vectors, list) else 'none'}"
            )
        for vector in vectors:
            if not isinstance(vector, list) or len(vector) != self._dim:
                got = len(vector) if isinstance(vector, list) else type(vector).__name__
                raise EmbeddingProtocolError(f"expected vectors of dim {self._dim}, got {got}")
        return vectors


def embed_texts(provider: EmbeddingProvider, texts: List[str]) -> List[EmbeddingVector]:
    """Embed texts through a provider; every returned vector has unit norm"""
    for i, text in enumerate(texts):
        if not text:
            raise ValueError(f"text at position {i} is empty")
    if not texts:
        return []

    raw_vectors = provider.embed_raw(list(texts))
    if len(raw_vectors) != len(texts):
        raise EmbeddingProtocolError(f"provider returned {len(raw_vectors)} vectors for {len(texts)} texts")

    vectors = []
    for raw in raw_vectors:
        if len(raw) != provider.dim:
            raise EmbeddingProtocolError(f"expected dim {provider.dim}, got {len(raw)}")
        try:
            vectors.append(normalize(raw))
        except DegenerateVectorError as e:
            raise EmbeddingProtocolError(f"provider returned an unusable vector: {e}") from e
    return vectors


def create_embedding_provider(config: RuntimeConfig) -> EmbeddingProvider:
    endpoint = config.effective_embedding_endpoint
    if endpoint:
        logger.info(f"Using remote embeddings at {endpoint}")
        return RemoteEmbeddingProvider(endpoint, config.embedding_dim)
    logger.info("Using offline trigram embeddings (no embedding endpoint configured)")
    return MockEmbeddingProvider(config.embedding_dim)
