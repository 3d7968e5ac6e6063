import hashlib
import logging
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np
import requests

from rewritehub.errors import PreconditionError, ProviderError

__all__ = [
    'EmbeddingVector',
    'IndexEntry',
    'EmbeddingProvider',
    'HashingEmbedder',
    'RemoteEmbedder',
    'VectorIndex',
    'embed',
    'euclidean',
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingVector:
    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise PreconditionError('Embedding vector is empty.')
        if not all(np.isfinite(self.values)):
            raise PreconditionError('Embedding vector holds non-finite entries.')

    @staticmethod
    def of(values) -> 'EmbeddingVector':
        return EmbeddingVector(tuple(float(v) for v in values))

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def euclidean(a: EmbeddingVector, b: EmbeddingVector) -> float:
    return float(np.linalg.norm(a.as_array() - b.as_array()))


@dataclass(frozen=True)
class IndexEntry:
    id: Hashable
    vector: EmbeddingVector
    dedup_key: Optional[Hashable] = None


class EmbeddingProvider(ABC):
    """
    Maps text to fixed-dimension vectors.
    """
    dim: int

    @abstractmethod
    def embed_many(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        """
        :raises ProviderError: If the provider fails.
        """
        pass

    def embed(self, text: str) -> EmbeddingVector:
        return embed(text, self)


def embed(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    """
    Embed one text.

    :raises PreconditionError: If `text` is empty.
    :raises ProviderError: If the provider fails or answers with the wrong dimension.
    """
    if not text or not text.strip():
        raise PreconditionError('Cannot embed empty text.')
    vectors = provider.embed_many([text])
    if len(vectors) != 1 or vectors[0].dim != provider.dim:
        raise ProviderError(f'Provider returned {len(vectors)} vector(s) of unexpected shape.')
    return vectors[0]


class HashingEmbedder(EmbeddingProvider):
    """
    Deterministic local embedder: a signed bag of hashed word unigrams and bigrams, L2-normalized. Texts sharing
    many words land close together; identical texts map to identical vectors in every process.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise PreconditionError('Embedding dimension must be positive.')
        self.dim = dim

    def _bucket(self, feature: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(feature.encode('utf-8'), digest_size=8).digest()
        value = int.from_bytes(digest, 'little')
        return value % self.dim, 1.0 if (value >> 63) & 1 else -1.0

    def embed_one(self, text: str) -> EmbeddingVector:
        words = re.findall(r'[a-z0-9]+', text.lower())
        features = words + [f'{a} {b}' for a, b in zip(words, words[1:])]
        vector = np.zeros(self.dim, dtype=np.float64)
        for feature in features:
            index, sign = self._bucket(feature)
            vector[index] += sign
        norm = np.linalg.norm(vector)
        if norm > 0:
            vector /= norm
        return EmbeddingVector.of(vector)

    def embed_many(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        return [self.embed_one(text) for text in texts]


class RemoteEmbedder(EmbeddingProvider):
    """
    HTTP embedding endpoint: POST {"texts": [...], "model": ...} -> {"vectors": [[...], ...]}.
    """

    def __init__(self, endpoint: str, dim: int, model: str | None = None, timeout: float = 60.0,
                 session: requests.Session | None = None):
        """
        :param endpoint: URL of the embedding service.
        :param dim: Expected vector dimension; answers of another size are rejected.
        :param model: Model name forwarded to the service (e.g. a BERT model for rules, a long-input model for
        queries).
        :param timeout: Request timeout in seconds.
        """
        self.endpoint = endpoint
        self.dim = dim
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()

    def embed_many(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        payload = {'texts': list(texts)}
        if self.model:
            payload['model'] = self.model
        try:
            response = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
            response.raise_for_status()
            vectors = response.json()['vectors']
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ProviderError(f'Embedding request to {self.endpoint} failed: {e}') from e
        if len(vectors) != len(texts):
            raise ProviderError(f'Embedding service returned {len(vectors)} vectors for {len(texts)} texts.')
        result = []
        for values in vectors:
            if len(values) != self.dim:
                raise ProviderError(f'Embedding service returned dimension {len(values)}, expected {self.dim}.')
            try:
                result.append(EmbeddingVector.of(values))
            except PreconditionError as e:
                raise ProviderError(str(e)) from e
        return result


class VectorIndex:
    """
    Brute-force Euclidean index. Insertions are serialized; searches read an immutable snapshot, so they can run
    concurrently with each other and with writers.
    """

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._lock = threading.Lock()
        self._entries: Tuple[IndexEntry, ...] = ()
        self._matrix = np.zeros((0, dim or 0), dtype=np.float64)
        self._positions = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id) -> bool:
        return entry_id in self._positions

    def add(self, entry_id: Hashable, vector: EmbeddingVector, dedup_key: Hashable | None = None) -> None:
        """
        :raises PreconditionError: If the id already exists or the dimension does not match.
        """
        with self._lock:
            if entry_id in self._positions:
                raise PreconditionError(f'Index already holds an entry {entry_id}.')
            if self.dim is None:
                self.dim = vector.dim
                self._matrix = np.zeros((0, self.dim), dtype=np.float64)
            if vector.dim != self.dim:
                raise PreconditionError(f'Vector dimension {vector.dim} does not match index dimension {self.dim}.')
            self._positions = {**self._positions, entry_id: len(self._entries)}
            self._entries = self._entries + (IndexEntry(entry_id, vector, dedup_key),)
            self._matrix = np.vstack([self._matrix, vector.as_array()[np.newaxis, :]])

    def set_dedup_key(self, entry_id: Hashable, dedup_key: Hashable | None) -> None:
        with self._lock:
            position = self._positions[entry_id]
            entries = list(self._entries)
            entries[position] = IndexEntry(entry_id, entries[position].vector, dedup_key)
            self._entries = tuple(entries)

    def get(self, entry_id: Hashable) -> IndexEntry:
        return self._entries[self._positions[entry_id]]

    def entries(self) -> Tuple[IndexEntry, ...]:
        return self._entries

    def knn(self, target: EmbeddingVector, k: int, dedup: bool = False) -> List[Tuple[Hashable, float]]:
        """
        Nearest entries by Euclidean distance, ascending; ties keep insertion order. With `dedup`, at most one entry
        per dedup key is returned (entries without a key are never deduplicated against each other).

        :param target: Query vector.
        :param k: Maximum number of results (fewer if the index is smaller).
        :param dedup: Whether to keep only the nearest entry of each dedup key.
        :raises PreconditionError: If `k` < 1 or the dimension does not match.
        """
        if k < 1:
            raise PreconditionError('k must be at least 1.')
        with self._lock:
            entries, matrix = self._entries, self._matrix
        if not entries:
            return []
        if target.dim != matrix.shape[1]:
            raise PreconditionError(f'Vector dimension {target.dim} does not match index dimension {matrix.shape[1]}.')

        distances = np.linalg.norm(matrix - target.as_array()[np.newaxis, :], axis=1)
        order = np.argsort(distances, kind='stable')
        result = []
        seen = set()
        for position in order:
            entry = entries[position]
            if dedup and entry.dedup_key is not None:
                if entry.dedup_key in seen:
                    continue
                seen.add(entry.dedup_key)
            result.append((entry.id, float(distances[position])))
            if len(result) == k:
                break
        return result
