# Copyright 2023-2024 ehrfusion developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Test Embeddings
===============

Random walks, skip-gram, tables, the embedding cache and the providers.
"""

import warnings
from itertools import combinations
from typing import Sequence

import numpy as np
import pytest
import requests
import torch
from urllib3.exceptions import ConnectTimeoutError
from urllib3.exceptions import MaxRetryError
from urllib3.util import Retry

from ehrfusion.config import EmbeddingConfig
from ehrfusion.config import ProviderConfig
from ehrfusion.embeddings import EmbeddingCache
from ehrfusion.embeddings import EmbeddingProvider
from ehrfusion.embeddings import EmbeddingTable
from ehrfusion.embeddings import EmbeddingTables
from ehrfusion.embeddings import FallbackProvider
from ehrfusion.embeddings import RemoteProvider
from ehrfusion.embeddings import TableKind
from ehrfusion.embeddings import build_provider
from ehrfusion.embeddings import dump_table
from ehrfusion.embeddings import embed_concepts
from ehrfusion.embeddings import embed_notes
from ehrfusion.embeddings import embed_texts
from ehrfusion.embeddings import load_table
from ehrfusion.embeddings import random_walks
from ehrfusion.embeddings import retrying_session
from ehrfusion.embeddings import structural_embeddings
from ehrfusion.embeddings import tokenize
from ehrfusion.embeddings import train_skipgram
from ehrfusion.errors import DataError
from ehrfusion.errors import ProviderError
from ehrfusion.hypergraph import WeightedGraph


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def two_cliques(size: int = 5) -> WeightedGraph:
    first = list(combinations(range(size), 2))
    second = list(combinations(range(size, 2 * size), 2))
    edges = tuple((i, j, 1.0) for i, j in first + second)
    return WeightedGraph(n_nodes=2 * size, edges=edges)


def test_random_walks_shape_and_determinism():
    g = two_cliques()
    walks = random_walks(g, walks_per_node=3, walk_length=7, seed=0)
    assert len(walks) == 30
    assert all(len(walk) == 7 for walk in walks)
    assert [walk[0] for walk in walks[:10]] == list(range(10))
    assert walks == random_walks(g, walks_per_node=3, walk_length=7, seed=0)
    assert walks != random_walks(g, walks_per_node=3, walk_length=7, seed=1)
    # walks never leave their clique
    assert all(len({node < 5 for node in walk}) == 1 for walk in walks)


def test_random_walks_follow_weights():
    g = WeightedGraph(n_nodes=3, edges=((0, 1, 2.0), (0, 2, 1.0)))
    walks = random_walks(g, walks_per_node=3000, walk_length=2, seed=0)
    steps = [walk[1] for walk in walks if walk[0] == 0]
    assert np.mean(np.asarray(steps) == 1) == pytest.approx(2 / 3, abs=0.05)


def test_random_walks_isolated_node():
    g = WeightedGraph(n_nodes=3, edges=((0, 1, 1.0),))
    walks = random_walks(g, walks_per_node=2, walk_length=5, seed=0)
    assert [walk for walk in walks if walk[0] == 2] == [[2], [2]]


@pytest.mark.parametrize("walks_per_node, walk_length", [(1, 1), (0, 5)])
def test_random_walks_bad_arguments(walks_per_node, walk_length):
    with pytest.raises(ValueError):
        random_walks(two_cliques(), walks_per_node, walk_length, seed=0)


def test_skipgram_separates_barbell_cliques():
    cliques = two_cliques()
    barbell = WeightedGraph(n_nodes=10, edges=cliques.edges + ((4, 5, 1.0),))
    keys = [f"n{i}" for i in range(10)]
    within = []
    across = []
    for seed in range(3):
        walks = random_walks(barbell, walks_per_node=20, walk_length=10, seed=seed)
        table = train_skipgram(
            walks, keys, 8, window=2, epochs=20, seed=seed, batch_size=256, learning_rate=0.05
        )
        assert table.vectors.shape == (10, 8)
        v = table.vectors
        within.extend(cosine(v[i], v[j]) for i, j, _ in cliques.edges)
        across.extend(cosine(v[i], v[j]) for i in range(5) for j in range(5, 10))
    assert np.mean(within) > np.mean(across)


def test_skipgram_isolated_node_keeps_initial_vector():
    g = WeightedGraph(n_nodes=3, edges=((0, 1, 1.0),))
    walks = random_walks(g, walks_per_node=5, walk_length=4, seed=0)
    table = train_skipgram(walks, ["a", "b", "c"], 4, window=2, epochs=2, seed=11)
    generator = torch.Generator().manual_seed(11)
    initial = (torch.rand(3, 4, generator=generator, dtype=torch.float64) - 0.5) / 4
    np.testing.assert_array_equal(table.row("c"), initial[2].numpy())
    assert not np.array_equal(table.row("a"), initial[0].numpy())


def test_skipgram_reads_losses_without_warnings():
    g = WeightedGraph(n_nodes=3, edges=((0, 1, 1.0), (1, 2, 1.0)))
    walks = random_walks(g, walks_per_node=4, walk_length=5, seed=0)
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad")
        table = train_skipgram(walks, ["a", "b", "c"], 4, window=2, epochs=2, seed=3)
    assert np.isfinite(table.vectors).all()


def test_skipgram_bad_arguments():
    with pytest.raises(ValueError):
        train_skipgram([[0, 1]], ["a", "b"], 1)
    with pytest.raises(DataError):
        train_skipgram([], ["a", "b"], 4)


@pytest.mark.parametrize("substrate", ["clique", "star"])
def test_structural_embeddings(tiny_hypergraph, substrate):
    cfg = EmbeddingConfig(substrate=substrate, walks_per_node=3, walk_length=5, epochs=1)
    table = structural_embeddings(tiny_hypergraph, cfg, 4)
    assert table.kind is TableKind.STRUCTURAL
    assert table.keys == ("A", "B", "C")
    assert table.vectors.shape == (3, 4)
    assert table.equals(structural_embeddings(tiny_hypergraph, cfg, 4))


def test_embedding_table_validation():
    with pytest.raises(DataError):
        EmbeddingTable(TableKind.CONCEPT, 4, ("A", "B"), np.zeros((2, 3)))
    with pytest.raises(DataError):
        EmbeddingTable(TableKind.CONCEPT, 2, ("A", "A"), np.zeros((2, 2)))
    with pytest.raises(DataError):
        EmbeddingTable(TableKind.CONCEPT, 2, ("A",), np.full((1, 2), np.nan))
    table = EmbeddingTable(TableKind.CONCEPT, 2, ("A", "B"), np.arange(4.0).reshape(2, 2))
    assert "A" in table and "Z" not in table
    np.testing.assert_array_equal(table.lookup(["B", "A"]), [[2.0, 3.0], [0.0, 1.0]])
    with pytest.raises(DataError, match="'Z'"):
        table.lookup(["A", "Z"])


def test_dump_and_load_table(tmp_path):
    rng = np.random.default_rng(0)
    table = EmbeddingTable(TableKind.NOTE, 3, ("v1", "v2"), rng.standard_normal((2, 3)))
    path = dump_table(table, tmp_path / "note.tsv")
    assert path.read_text(encoding="utf-8").startswith("# kind=note dim=3\n")
    assert load_table(path).equals(table)


def test_load_table_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("# kind=concept\nA\t0.1,0.2\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        load_table(path)


def test_load_tables_names_the_embed_step(tmp_path):
    with pytest.raises(DataError, match="embed step"):
        EmbeddingTables.load(tmp_path)


def test_tokenize():
    assert tokenize("Heart failure, chronic.") == ["heart", "failure", "chronic"]
    assert tokenize(" -- ") == []


def test_fallback_provider():
    provider = FallbackProvider(8, seed=0)
    vectors = provider.embed(["heart failure", "heart failure", "HEART failure!", ""])
    assert vectors.shape == (4, 8)
    assert np.linalg.norm(vectors[0]) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_array_equal(vectors[0], vectors[1])
    np.testing.assert_array_equal(vectors[0], vectors[2])
    np.testing.assert_array_equal(vectors[3], np.zeros(8))
    other = FallbackProvider(8, seed=1).embed(["heart failure"])[0]
    assert not np.allclose(vectors[0], other)
    assert provider.calls == 1


def test_fallback_provider_token_overlap():
    provider = build_provider(ProviderConfig())
    a, b, c = provider.embed(["heart failure", "heart failure chronic", "zolpidem tartrate"])
    assert cosine(a, b) > cosine(a, c)


def test_embed_texts_uses_the_cache(tmp_path):
    path = tmp_path / "cache.tsv"
    texts = {"A": "chest pain", "B": "heart failure", "C": "chest pain", "D": ""}
    provider = FallbackProvider(8)
    table = embed_texts(provider, texts, TableKind.CONCEPT, cache=EmbeddingCache(path))
    assert table.keys == ("A", "B", "C", "D")
    np.testing.assert_array_equal(table.row("A"), table.row("C"))
    np.testing.assert_array_equal(table.row("D"), np.zeros(8))
    assert provider.calls == 1

    cache = EmbeddingCache(path)
    assert len(cache) == 2
    again = FallbackProvider(8)
    assert embed_texts(again, texts, TableKind.CONCEPT, cache=cache).equals(table)
    assert again.calls == 0


def test_embed_texts_cache_key_includes_kind(tmp_path):
    cache = EmbeddingCache()
    provider = FallbackProvider(8)
    embed_texts(provider, {"A": "chest pain"}, TableKind.CONCEPT, cache=cache)
    embed_texts(provider, {"v1": "chest pain"}, TableKind.NOTE, cache=cache)
    assert provider.calls == 2
    assert len(cache) == 2


def test_embed_texts_truncates():
    provider = FallbackProvider(8)
    table = embed_texts(provider, {"a": "abc def"}, TableKind.NOTE, max_chars=3)
    np.testing.assert_array_equal(table.row("a"), provider.embed_text("abc"))


def test_cache_skips_malformed_lines(tmp_path):
    path = tmp_path / "cache.tsv"
    path.write_text("garbage\nkey\t3\t0.1,0.2\nok\t2\t0.5,0.25\n", encoding="utf-8")
    cache = EmbeddingCache(path)
    assert len(cache) == 1
    np.testing.assert_array_equal(cache.get("ok", 2), [0.5, 0.25])
    assert cache.get("ok", 3) is None


class FlakyProvider(EmbeddingProvider):
    """Fails every batch holding the text 'boom'"""

    kind = "flaky"
    batch_size = 1

    @property
    def model_name(self) -> str:
        return "flaky-v1"

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        if "boom" in texts:
            raise ProviderError("endpoint exploded")
        return np.ones((len(texts), self.dim))


def test_embed_texts_reports_failed_keys():
    cache = EmbeddingCache()
    with pytest.raises(ProviderError) as error:
        embed_texts(FlakyProvider(4), {"a": "fine", "b": "boom"}, TableKind.NOTE, cache=cache)
    assert error.value.failed_keys == ("b",)
    assert error.value.exit_code == 3
    assert len(cache) == 1


def test_embed_concepts_and_notes(tiny_ds):
    provider = FallbackProvider(16)
    concepts = embed_concepts(provider, tiny_ds.codes)
    assert concepts.kind is TableKind.CONCEPT
    assert concepts.vectors.shape == (3, 16)
    np.testing.assert_array_equal(concepts.row("A"), provider.embed_text("chest pain"))
    notes = embed_notes(provider, tiny_ds, ["Hospital Course"])
    assert notes.keys == ("v1", "v2")
    np.testing.assert_array_equal(notes.vectors, np.zeros((2, 16)))


class FakeResponse:
    def __init__(self, payload):
        self.payload = payload

    def raise_for_status(self):
        pass

    def json(self):
        return self.payload


class FakeSession:
    """Answers with ``raw_dim``-wide vectors after ``failures`` connection errors"""

    def __init__(self, raw_dim: int = 6, failures: int = 0):
        self.raw_dim = raw_dim
        self.failures = failures
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        if self.failures:
            self.failures -= 1
            raise requests.ConnectionError("connection refused")
        data = [
            {"index": i, "embedding": [float(len(text) + k) for k in range(self.raw_dim)]}
            for i, text in enumerate(json["input"])
        ]
        return FakeResponse({"data": data[::-1]})


@pytest.fixture
def remote_cfg() -> ProviderConfig:
    return ProviderConfig(
        kind="remote",
        endpoint="http://embeddings.invalid/v1/embeddings",
        model="text-embed-small",
        dim=4,
        backoff=0.0,
        max_retries=2,
        max_in_flight=1,
    )


def test_remote_provider(remote_cfg, monkeypatch):
    monkeypatch.setenv("EMBEDDING_API_KEY", "secret")
    session = FakeSession()
    provider = RemoteProvider(remote_cfg, session=session)
    vectors = provider.embed(["ab", "abc"])
    raw = np.asarray([[2.0 + k for k in range(6)], [3.0 + k for k in range(6)]])
    np.testing.assert_allclose(vectors, raw @ provider.projection(6))
    assert vectors.shape == (2, 4)
    assert session.requests[0]["json"] == {"model": "text-embed-small", "input": ["ab", "abc"]}
    assert session.requests[0]["headers"]["Authorization"] == "Bearer secret"


def test_retrying_session_mounts_retry_policy(remote_cfg):
    session = retrying_session(remote_cfg)
    for url in (remote_cfg.endpoint, "https://embeddings.invalid/v1"):
        retry = session.get_adapter(url).max_retries
        assert isinstance(retry, Retry)
        assert retry.total == 2
        assert retry.backoff_factor == 0.0
        assert retry.is_retry("POST", 503)
        assert retry.is_retry("POST", 429)
        assert not retry.is_retry("POST", 400)
        assert not retry.is_retry("GET", 503)

    retry = session.get_adapter(remote_cfg.endpoint).max_retries
    for _ in range(remote_cfg.max_retries):
        retry = retry.increment("POST", remote_cfg.endpoint, error=ConnectTimeoutError())
    with pytest.raises(MaxRetryError):
        retry.increment("POST", remote_cfg.endpoint, error=ConnectTimeoutError())


def test_remote_provider_uses_retrying_session(remote_cfg):
    provider = RemoteProvider(remote_cfg)
    assert provider.session.get_adapter(remote_cfg.endpoint).max_retries.total == 2


def test_remote_provider_wraps_request_errors(remote_cfg, monkeypatch):
    monkeypatch.setenv("EMBEDDING_API_KEY", "secret")
    session = FakeSession(failures=1)
    provider = RemoteProvider(remote_cfg, session=session)
    with pytest.raises(ProviderError, match="embedding request failed"):
        provider.embed(["ab"])
    assert len(session.requests) == 1
    assert provider.embed(["ab"]).shape == (1, 4)


def test_remote_provider_width_mismatch(remote_cfg, monkeypatch):
    monkeypatch.setenv("EMBEDDING_API_KEY", "secret")
    cfg = remote_cfg.copy(update=dict(raw_dim=5))
    with pytest.raises(ProviderError, match="width 6"):
        RemoteProvider(cfg, session=FakeSession(raw_dim=6)).embed(["ab"])


def test_remote_provider_needs_api_key(remote_cfg, monkeypatch):
    monkeypatch.delenv("EMBEDDING_API_KEY", raising=False)
    with pytest.raises(ProviderError, match="EMBEDDING_API_KEY"):
        RemoteProvider(remote_cfg, session=FakeSession()).embed(["ab"])
