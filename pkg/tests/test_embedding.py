import numpy as np
import pytest
import requests

from rewritehub.embedding import EmbeddingVector, HashingEmbedder, RemoteEmbedder, VectorIndex, embed, euclidean
from rewritehub.errors import PreconditionError, ProviderError


class FakeResponse:
    def __init__(self, body, status_code=200):
        self._body = body
        self.status_code = status_code

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f'{self.status_code}')

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, response):
        self.response = response
        self.payloads = []

    def post(self, url, json=None, timeout=None):
        self.payloads.append(json)
        return self.response


def test_hashing_embedder_is_deterministic_and_normalized(embedder):
    first = embedder.embed('Replace implicit joins with explicit joins.')
    second = HashingEmbedder(dim=256).embed('Replace implicit joins with explicit joins.')
    assert first == second
    assert first.dim == 256
    assert np.linalg.norm(first.as_array()) == pytest.approx(1.0)


def test_shared_words_land_closer(embedder):
    rule = embedder.embed('Replace implicit joins with explicit joins.')
    similar = embedder.embed('Replace implicit joins with explicit join syntax.')
    unrelated = embedder.embed('Compute both aggregates in a single pass over the fact table.')
    assert euclidean(rule, similar) < euclidean(rule, unrelated)


def test_embed_rejects_empty_text(embedder):
    with pytest.raises(PreconditionError):
        embed('  ', embedder)


def test_remote_embedder_posts_model_and_checks_dimension():
    session = FakeSession(FakeResponse({'vectors': [[0.6, 0.8]]}))
    provider = RemoteEmbedder('http://embed.invalid', dim=2, model='bert-base-uncased', session=session)
    assert provider.embed('text').values == (0.6, 0.8)
    assert session.payloads == [{'texts': ['text'], 'model': 'bert-base-uncased'}]

    wrong = RemoteEmbedder('http://embed.invalid', dim=3, session=session)
    with pytest.raises(ProviderError):
        wrong.embed('text')


def test_remote_embedder_wraps_http_errors():
    provider = RemoteEmbedder('http://embed.invalid', dim=2, session=FakeSession(FakeResponse({}, 500)))
    with pytest.raises(ProviderError):
        provider.embed('text')


def test_index_rejects_duplicates_and_dimension_mismatch():
    index = VectorIndex()
    index.add('a', EmbeddingVector.of([0.0, 1.0]))
    with pytest.raises(PreconditionError):
        index.add('a', EmbeddingVector.of([1.0, 0.0]))
    with pytest.raises(PreconditionError):
        index.add('b', EmbeddingVector.of([1.0, 0.0, 0.0]))
    with pytest.raises(PreconditionError):
        index.knn(EmbeddingVector.of([0.0, 1.0]), k=0)


def test_knn_ties_keep_insertion_order():
    index = VectorIndex()
    for name in ('first', 'second', 'third'):
        index.add(name, EmbeddingVector.of([1.0, 0.0]))
    assert [entry_id for entry_id, _ in index.knn(EmbeddingVector.of([0.0, 0.0]), k=2)] == ['first', 'second']
    assert VectorIndex().knn(EmbeddingVector.of([0.0]), k=3) == []


def test_knn_dedup_on_random_indexes():
    rng = np.random.default_rng(7)
    for _ in range(500):
        dim = int(rng.integers(1, 6))
        size = int(rng.integers(1, 30))
        keys = int(rng.integers(1, 8))
        index = VectorIndex()
        for position in range(size):
            key = None if rng.random() < 0.2 else f'g{int(rng.integers(0, keys))}'
            index.add(position, EmbeddingVector.of(rng.normal(size=dim)), key)
        target = EmbeddingVector.of(rng.normal(size=dim))
        k = int(rng.integers(1, 12))
        result = index.knn(target, k=k, dedup=True)

        distances = [distance for _, distance in result]
        assert distances == sorted(distances)
        returned_keys = [index.get(entry_id).dedup_key for entry_id, _ in result]
        keyed = [key for key in returned_keys if key is not None]
        assert len(keyed) == len(set(keyed))

        available = len({entry.dedup_key for entry in index.entries() if entry.dedup_key is not None}) + \
            sum(1 for entry in index.entries() if entry.dedup_key is None)
        assert len(result) == min(k, available)

        for (entry_id, distance), key in zip(result, returned_keys):
            if key is None:
                continue
            nearest = min(euclidean(target, entry.vector) for entry in index.entries() if entry.dedup_key == key)
            assert distance == pytest.approx(nearest)
