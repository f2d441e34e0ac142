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
Embeddings
==========

Structural node embeddings come from random walks over the hypergraph
and a skip-gram model with negative sampling.  Semantic embeddings of
concept names and clinical notes come from a text embedding provider:

- :py:class:`FallbackProvider` is offline and deterministic; every token is
  hashed to a unit vector and a text is the normalized mean of its tokens
- :py:class:`RemoteProvider` posts batches to an embeddings endpoint and
  projects the raw vectors to ``d2`` with a seeded random linear map

Provider results are kept in an :py:class:`EmbeddingCache`, a line-record
file keyed by ``sha256(kind|provider|model|text)``.

.. code-block::

    provider = build_provider(ProviderConfig(dim=32))
    cache = EmbeddingCache("cache.tsv")
    concepts = embed_concepts(provider, ds.codes, cache=cache)
    notes = embed_notes(provider, ds, ["Admission Date", "Service"], cache=cache)

"""

import hashlib
import os
import string
import threading
from abc import ABC
from abc import abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import requests
import torch
import torch.nn.functional as F
from requests.adapters import HTTPAdapter
from urllib3.util import Retry

from ehrfusion.config import EmbeddingConfig
from ehrfusion.config import ProviderConfig
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import MedicalCode
from ehrfusion.ehr_data import filter_note_sections
from ehrfusion.errors import DataError
from ehrfusion.errors import ProviderError
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.hypergraph import WeightedGraph
from ehrfusion.hypergraph import clique_expansion
from ehrfusion.hypergraph import star_expansion
from ehrfusion.logger import get_logger

LOGGER = get_logger()


class TableKind(str, Enum):
    STRUCTURAL = "structural"
    CONCEPT = "concept"
    NOTE = "note"


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """
    Named vectors: row ``i`` of ``vectors`` belongs to ``keys[i]``

    Keys are code_ids (structural and concept tables) or visit_ids
    (note tables).
    """

    kind: TableKind
    dim: int
    keys: Tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DataError(f"{self.kind.value} table dim must be positive, got {self.dim}")
        if self.vectors.shape != (len(self.keys), self.dim):
            raise DataError(
                f"{self.kind.value} table has shape {self.vectors.shape}, "
                f"expected {(len(self.keys), self.dim)}"
            )
        if len(set(self.keys)) != len(self.keys):
            raise DataError(f"{self.kind.value} table has duplicate keys")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError(f"{self.kind.value} table has non-finite values")

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    @property
    def _index(self) -> Dict[str, int]:
        return {key: i for i, key in enumerate(self.keys)}

    @property
    def rows(self) -> Dict[str, np.ndarray]:
        return {key: self.vectors[i] for i, key in enumerate(self.keys)}

    def row(self, key: str) -> np.ndarray:
        return self.lookup([key])[0]

    def lookup(self, keys: Sequence[str]) -> np.ndarray:
        """
        :return: a (len(keys), dim) matrix in the order of ``keys``
        :raises DataError: when a key is missing
        """
        index = self._index
        missing = [key for key in keys if key not in index]
        if missing:
            raise DataError(
                f"{self.kind.value} table is missing {len(missing)} keys, e.g. '{missing[0]}'"
            )
        return self.vectors[[index[key] for key in keys]].reshape(len(keys), self.dim)

    def subset(self, keys: Sequence[str]) -> "EmbeddingTable":
        return EmbeddingTable(self.kind, self.dim, tuple(keys), self.lookup(keys))

    def equals(self, other: "EmbeddingTable") -> bool:
        return (
            self.kind == other.kind
            and self.dim == other.dim
            and self.keys == other.keys
            and np.array_equal(self.vectors, other.vectors)
        )


def _format_vector(vector: Iterable[float]) -> str:
    return ",".join(repr(float(x)) for x in vector)


def _parse_vector(text: str) -> np.ndarray:
    return np.asarray([float(x) for x in text.split(",")], dtype=np.float64)


def dump_table(table: EmbeddingTable, path: Union[Path, str]) -> Path:
    """
    Write a ``# kind=<kind> dim=<dim>`` header, then one
    ``key<TAB>comma-separated floats`` line per row at full precision
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as dst:
        dst.write(f"# kind={table.kind.value} dim={table.dim}\n")
        for key, vector in zip(table.keys, table.vectors):
            dst.write(f"{key}\t{_format_vector(vector)}\n")
    LOGGER.info("Wrote {} {} vectors (dim {}) to {}", len(table), table.kind.value, table.dim, path)
    return path


def load_table(path: Union[Path, str]) -> EmbeddingTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embedding table not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing '# kind=... dim=...' header")
    try:
        header = dict(item.split("=", 1) for item in lines[0][1:].split())
        kind = TableKind(header["kind"])
        dim = int(header["dim"])
    except (KeyError, ValueError) as error:
        raise DataError(f"{path}: bad table header '{lines[0]}'") from error
    keys = []
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, _, values = line.partition("\t")
        try:
            rows.append(_parse_vector(values))
        except ValueError as error:
            raise DataError(f"{path} line {line_no}: bad vector") from error
        keys.append(key)
    vectors = np.vstack(rows) if rows else np.zeros((0, dim))
    return EmbeddingTable(kind=kind, dim=dim, keys=tuple(keys), vectors=vectors)


TABLE_FILES = {
    TableKind.STRUCTURAL: "structural.tsv",
    TableKind.CONCEPT: "concept.tsv",
    TableKind.NOTE: "note.tsv",
}


@dataclass(frozen=True, eq=False)
class EmbeddingTables:
    """The structural, concept and note tables of one dataset"""

    structural: EmbeddingTable
    concept: EmbeddingTable
    note: EmbeddingTable

    @property
    def d1(self) -> int:
        return self.structural.dim

    @property
    def d2(self) -> int:
        return self.concept.dim

    def with_structural(self, structural: EmbeddingTable) -> "EmbeddingTables":
        return replace(self, structural=structural)

    def dump(self, directory: Union[Path, str]) -> Dict[str, Path]:
        directory = Path(directory)
        return {
            kind.value: dump_table(getattr(self, kind.value), directory / name)
            for kind, name in TABLE_FILES.items()
        }

    @classmethod
    def load(cls, directory: Union[Path, str]) -> "EmbeddingTables":
        """
        :raises DataError: naming the embed step when a table file is missing
        """
        directory = Path(directory)
        tables = {}
        for kind, name in TABLE_FILES.items():
            path = directory / name
            if not path.is_file():
                raise DataError(f"missing embedding table {path}; run the embed step first")
            tables[kind.value] = load_table(path)
        return cls(**tables)


def random_walks(
    g: WeightedGraph, walks_per_node: int, walk_length: int, seed: int
) -> List[List[int]]:
    """
    Weighted random walks, ``walks_per_node`` passes over all nodes

    The next step is sampled proportional to the edge weight; a walk from
    an isolated node stops at once (a walk of length 1).
    """
    if walk_length < 2:
        raise ValueError(f"walk_length must be >= 2, got {walk_length}")
    if walks_per_node < 1:
        raise ValueError(f"walks_per_node must be >= 1, got {walks_per_node}")
    adjacency = g.adjacency()
    cumulative = [np.cumsum(weights) for _, weights in adjacency]
    rng = np.random.default_rng(seed)
    walks = []
    for _ in range(walks_per_node):
        for start in range(g.n_nodes):
            walk = [start]
            if len(adjacency[start][0]):
                while len(walk) < walk_length:
                    neighbors, _ = adjacency[walk[-1]]
                    cum = cumulative[walk[-1]]
                    step = np.searchsorted(cum, rng.random() * cum[-1], side="right")
                    walk.append(int(neighbors[step]))
            walks.append(walk)
    return walks


def _skipgram_pairs(walks: Sequence[Sequence[int]], window: int) -> np.ndarray:
    pairs = []
    for walk in walks:
        for i, center in enumerate(walk):
            lo = max(0, i - window)
            hi = min(len(walk), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    pairs.append((center, walk[j]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def train_skipgram(
    walks: Sequence[Sequence[int]],
    node_ids: Sequence[str],
    d1: int,
    window: int = 5,
    epochs: int = 5,
    seed: int = 0,
    negatives: int = 5,
    learning_rate: float = 0.01,
    batch_size: int = 1024,
) -> EmbeddingTable:
    """
    Skip-gram with negative sampling over a walk corpus

    Negatives are drawn from the unigram distribution of context nodes to
    the 3/4 power, so isolated nodes are never sampled and keep their
    seeded initialization vector.

    :param walks: node index sequences, e.g. from :py:func:`random_walks`
    :param node_ids: the key of every node index
    :param d1: embedding width, at least 2
    :return: a structural EmbeddingTable with one row per node
    """
    if d1 < 2:
        raise ValueError(f"d1 must be >= 2, got {d1}")
    if not walks:
        raise DataError("empty walk corpus")
    n_nodes = len(node_ids)
    generator = torch.Generator().manual_seed(seed)
    center = (torch.rand(n_nodes, d1, generator=generator, dtype=torch.float64) - 0.5) / d1
    context = torch.zeros(n_nodes, d1, dtype=torch.float64)

    pairs = torch.from_numpy(_skipgram_pairs(walks, window))
    if len(pairs) == 0:
        LOGGER.warning("Walk corpus has no context pairs, returning initial vectors")
        return EmbeddingTable(TableKind.STRUCTURAL, d1, tuple(node_ids), center.numpy().copy())

    counts = torch.bincount(pairs[:, 1], minlength=n_nodes).to(torch.float64)
    noise = counts.pow(0.75)
    noise = noise / noise.sum()

    center = torch.nn.Parameter(center)
    context = torch.nn.Parameter(context)
    optimizer = torch.optim.Adam([center, context], lr=learning_rate)
    for epoch in range(epochs):
        order = torch.randperm(len(pairs), generator=generator)
        total = 0.0
        for start in range(0, len(pairs), batch_size):
            batch = pairs[order[start : start + batch_size]]
            c_vec = center[batch[:, 0]]
            o_vec = context[batch[:, 1]]
            neg = torch.multinomial(
                noise, len(batch) * negatives, replacement=True, generator=generator
            ).view(len(batch), negatives)
            pos_score = (c_vec * o_vec).sum(-1)
            neg_score = torch.bmm(context[neg], c_vec.unsqueeze(-1)).squeeze(-1)
            loss = -(F.logsigmoid(pos_score).mean() + F.logsigmoid(-neg_score).sum(-1).mean())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        LOGGER.debug("skip-gram epoch {}: loss {:.4f}", epoch + 1, total / len(pairs))

    vectors = center.detach().numpy().copy()
    return EmbeddingTable(TableKind.STRUCTURAL, d1, tuple(node_ids), vectors)


def structural_embeddings(h: Hypergraph, cfg: EmbeddingConfig, d1: int) -> EmbeddingTable:
    """
    DeepWalk over the configured substrate: the weighted clique expansion
    of visit hyperedges, or the code/visit star expansion whose walks are
    trained over both kinds of nodes and then keep the code rows
    """
    if cfg.substrate == "star":
        g = star_expansion(h)
        keys = list(h.node_ids) + [f"visit:{vid}" for vid in h.visit_ids]
    else:
        g = clique_expansion(h)
        keys = list(h.node_ids)
    LOGGER.info(
        "DeepWalk on {} expansion: {} nodes, {} edges", cfg.substrate, g.n_nodes, len(g.edges)
    )
    walks = random_walks(g, cfg.walks_per_node, cfg.walk_length, cfg.seed)
    table = train_skipgram(
        walks,
        keys,
        d1,
        window=cfg.window,
        epochs=cfg.epochs,
        seed=cfg.seed,
        negatives=cfg.negatives,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
    )
    return table.subset(list(h.node_ids))


class EmbeddingCache:
    """
    Provider vectors keyed by ``sha256(kind|provider|model|text)``

    Lines are ``key<TAB>d2<TAB>comma-separated floats``; reads are served
    from memory and writes are appended under a lock.  Without a path the
    cache lives in memory only.
    """

    def __init__(self, path: Optional[Union[Path, str]] = None):
        self.path = Path(path) if path is not None else None
        self._rows: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.is_file():
            self._load()

    def __len__(self) -> int:
        return len(self._rows)

    @staticmethod
    def key(kind: str, provider: str, model: str, text: str) -> str:
        return hashlib.sha256(f"{kind}|{provider}|{model}|{text}".encode("utf-8")).hexdigest()

    def _load(self):
        with open(self.path, "r", encoding="utf-8") as src:
            for line_no, line in enumerate(src, start=1):
                parts = line.rstrip("\n").split("\t")
                try:
                    key, dim, values = parts
                    vector = _parse_vector(values)
                    if len(vector) != int(dim):
                        raise ValueError("dimension mismatch")
                except ValueError:
                    LOGGER.warning("Skipping malformed cache line {} in {}", line_no, self.path)
                    continue
                self._rows[key] = vector
        LOGGER.info("Loaded {} cached embeddings from {}", len(self._rows), self.path)

    def get(self, key: str, dim: int) -> Optional[np.ndarray]:
        vector = self._rows.get(key)
        if vector is not None and len(vector) != dim:
            LOGGER.warning("Ignoring cached vector of width {} (expected {})", len(vector), dim)
            return None
        return vector

    def put(self, vectors: Mapping[str, np.ndarray]) -> None:
        with self._lock:
            self._rows.update({key: np.asarray(v, dtype=np.float64) for key, v in vectors.items()})
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as dst:
                for key, vector in vectors.items():
                    dst.write(f"{key}\t{len(vector)}\t{_format_vector(vector)}\n")


class EmbeddingProvider(ABC):
    """
    A text embedding backend producing ``dim``-wide vectors

    ``calls`` counts :py:meth:`embed` invocations, so cache hits are
    observable.
    """

    kind: str = ""
    batch_size: int = 64
    max_in_flight: int = 1

    def __init__(self, dim: int):
        self.dim = dim
        self.calls = 0
        self._calls_lock = threading.Lock()

    @property
    @abstractmethod
    def model_name(self) -> str:
        ...

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """
        :return: a (len(texts), dim) matrix
        """
        with self._calls_lock:
            self.calls += 1
        return self._embed(texts)

    @abstractmethod
    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        ...


def tokenize(text: str) -> List[str]:
    """Whitespace tokens, case-folded, with surrounding punctuation stripped"""
    tokens = (t.strip(string.punctuation).casefold() for t in text.split())
    return [t for t in tokens if t]


class FallbackProvider(EmbeddingProvider):
    """
    Offline deterministic embeddings: each token hashes (with the seed) to a
    point on the unit sphere, a text is the L2-normalized mean of its token
    vectors, and a text without tokens is the zero vector
    """

    kind = "fallback"
    batch_size = 256

    def __init__(self, dim: int, seed: int = 0):
        super().__init__(dim)
        self.seed = seed
        self._tokens: Dict[str, np.ndarray] = {}

    @property
    def model_name(self) -> str:
        return f"token-hash-v1/seed={self.seed}"

    def token_vector(self, token: str) -> np.ndarray:
        vector = self._tokens.get(token)
        if vector is None:
            digest = hashlib.sha256(f"{self.seed}|{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vector = rng.standard_normal(self.dim)
            vector /= np.linalg.norm(vector)
            self._tokens[token] = vector
        return vector

    def embed_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.dim)
        mean = np.mean([self.token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            return np.zeros(self.dim)
        return mean / norm

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self.embed_text(t) for t in texts]).reshape(len(texts), self.dim)


RETRY_STATUSES = (429, 500, 502, 503, 504)


def retrying_session(cfg: ProviderConfig) -> requests.Session:
    """
    A session whose adapters retry connection errors and the
    ``RETRY_STATUSES`` answers up to ``cfg.max_retries`` times with an exponential
    backoff of factor ``cfg.backoff``
    """
    retry = Retry(
        total=cfg.max_retries,
        backoff_factor=cfg.backoff,
        status_forcelist=RETRY_STATUSES,
        allowed_methods=frozenset({"POST"}),
        raise_on_status=True,
    )
    adapter = HTTPAdapter(max_retries=retry)
    session = requests.Session()
    session.mount("https://", adapter)
    session.mount("http://", adapter)
    return session


class RemoteProvider(EmbeddingProvider):
    """
    An OpenAI-style embeddings endpoint: POST ``{"model", "input"}`` and read
    ``data[i].embedding``; raw vectors are projected to ``dim`` with a
    fixed random map drawn from the seed
    """

    kind = "remote"

    def __init__(self, cfg: ProviderConfig, session: Optional[requests.Session] = None):
        super().__init__(cfg.dim)
        self.cfg = cfg
        self.batch_size = cfg.batch_size
        self.max_in_flight = cfg.max_in_flight
        self.session = session or retrying_session(cfg)
        self._raw_dim = cfg.raw_dim
        self._projection: Optional[np.ndarray] = None
        self._projection_lock = threading.Lock()

    @property
    def model_name(self) -> str:
        return str(self.cfg.model)

    def _headers(self) -> Dict[str, str]:
        api_key = os.environ.get(self.cfg.api_key_env)
        if not api_key:
            raise ProviderError(f"environment variable {self.cfg.api_key_env} is not set")
        return {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}

    def projection(self, raw_dim: int) -> np.ndarray:
        with self._projection_lock:
            if self._raw_dim is None:
                self._raw_dim = raw_dim
            if raw_dim != self._raw_dim:
                raise ProviderError(
                    f"endpoint returned vectors of width {raw_dim}, expected {self._raw_dim}"
                )
            if self._projection is None:
                rng = np.random.default_rng(self.cfg.seed)
                self._projection = rng.standard_normal((raw_dim, self.dim)) / np.sqrt(self.dim)
            return self._projection

    def _post(self, texts: Sequence[str]) -> np.ndarray:
        response = self.session.post(
            self.cfg.endpoint,
            json={"model": self.cfg.model, "input": list(texts)},
            headers=self._headers(),
            timeout=self.cfg.timeout,
        )
        response.raise_for_status()
        data = sorted(response.json()["data"], key=lambda item: item.get("index", 0))
        if len(data) != len(texts):
            raise ValueError(f"endpoint returned {len(data)} vectors for {len(texts)} texts")
        widths = {len(item["embedding"]) for item in data}
        if len(widths) != 1:
            raise ProviderError(f"endpoint returned vectors of mixed widths {sorted(widths)}")
        return np.asarray([item["embedding"] for item in data], dtype=np.float64)

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        try:
            raw = self._post(texts)
        except (requests.RequestException, ValueError, KeyError) as error:
            raise ProviderError(f"embedding request failed: {error}") from error
        return raw @ self.projection(raw.shape[1])


def build_provider(cfg: ProviderConfig) -> EmbeddingProvider:
    if cfg.kind == "remote":
        return RemoteProvider(cfg)
    return FallbackProvider(cfg.dim, seed=cfg.seed)


def embed_texts(
    p: EmbeddingProvider,
    texts: Mapping[str, str],
    kind: TableKind,
    cache: Optional[EmbeddingCache] = None,
    max_chars: Optional[int] = None,
) -> EmbeddingTable:
    """
    Embed keyed texts with a provider, consulting the cache first

    Empty texts get the zero vector.  Misses are de-duplicated by text and
    sent in batches of ``p.batch_size`` with at most ``p.max_in_flight``
    batches in flight; each batch is cached as soon as it is back, so a
    failure keeps the finished batches.

    :param p: the provider
    :param texts: a mapping of key (code_id or visit_id) to text
    :param kind: the table kind, also part of the cache key
    :param cache: an optional EmbeddingCache
    :param max_chars: texts longer than this are truncated, with a warning
    :return: an EmbeddingTable in the key order of ``texts``
    :raises ProviderError: naming the keys whose batches failed
    """
    keys = list(texts)
    vectors = np.zeros((len(keys), p.dim))
    pending: Dict[str, List[int]] = {}
    unique: Dict[str, str] = {}
    n_truncated = 0
    for row, key in enumerate(keys):
        text = texts[key] or ""
        if max_chars is not None and len(text) > max_chars:
            text = text[:max_chars]
            n_truncated += 1
        if not text.strip():
            continue
        cache_key = EmbeddingCache.key(kind.value, p.kind, p.model_name, text)
        hit = cache.get(cache_key, p.dim) if cache is not None else None
        if hit is not None:
            vectors[row] = hit
            continue
        pending.setdefault(cache_key, []).append(row)
        unique[cache_key] = text
    if n_truncated:
        LOGGER.warning("Truncated {} {} texts to {} characters", n_truncated, kind.value, max_chars)

    items = list(unique.items())
    batches = [items[i : i + p.batch_size] for i in range(0, len(items), p.batch_size)]
    LOGGER.info(
        "Embedding {} {} texts: {} cached, {} to compute in {} batches",
        len(keys),
        kind.value,
        len(keys) - sum(len(rows) for rows in pending.values()),
        len(items),
        len(batches),
    )

    failed: List[str] = []
    with ThreadPoolExecutor(max_workers=p.max_in_flight) as executor:
        futures = [executor.submit(p.embed, [text for _, text in batch]) for batch in batches]
        for future, batch in zip(futures, batches):
            try:
                matrix = future.result()
            except ProviderError as error:
                LOGGER.error("Embedding batch failed: {}", error)
                failed.extend(cache_key for cache_key, _ in batch)
                continue
            if matrix.shape != (len(batch), p.dim):
                raise ProviderError(
                    f"provider returned shape {matrix.shape}, expected {(len(batch), p.dim)}",
                    failed_keys=[keys[row] for cache_key, _ in batch for row in pending[cache_key]],
                )
            computed = {cache_key: matrix[i] for i, (cache_key, _) in enumerate(batch)}
            if cache is not None:
                cache.put(computed)
            for cache_key, vector in computed.items():
                for row in pending[cache_key]:
                    vectors[row] = vector

    if failed:
        raise ProviderError(
            f"{len(failed)} {kind.value} texts could not be embedded",
            failed_keys=[keys[row] for cache_key in failed for row in pending[cache_key]],
        )
    return EmbeddingTable(kind=kind, dim=p.dim, keys=tuple(keys), vectors=vectors)


def embed_concepts(
    p: EmbeddingProvider,
    registry: Mapping[str, MedicalCode],
    cache: Optional[EmbeddingCache] = None,
) -> EmbeddingTable:
    """Embed the concept name of every code, keyed by code_id"""
    texts = {code_id: code.concept_name for code_id, code in registry.items()}
    return embed_texts(p, texts, TableKind.CONCEPT, cache=cache)


def embed_notes(
    p: EmbeddingProvider,
    ds: Dataset,
    blocked_sections: Sequence[str],
    cache: Optional[EmbeddingCache] = None,
    max_chars: Optional[int] = None,
) -> EmbeddingTable:
    """
    Embed the filtered note of every visit, keyed by visit_id; visits whose
    note is empty, or empty after filtering, get the zero vector
    """
    texts = {v.visit_id: filter_note_sections(v.note_text, blocked_sections) for v in ds.visits}
    return embed_texts(p, texts, TableKind.NOTE, cache=cache, max_chars=max_chars)
