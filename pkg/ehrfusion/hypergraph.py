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
Hypergraph
==========

Medical codes are nodes and each visit is a hyperedge spanning the codes
of that visit.  Self-loop hyperedges (one per node) carry concept
semantics into the hyperedge pathway; a weighted clique expansion (or a
star expansion) of the visit hyperedges is the substrate of random walks.

.. code-block::

    h = add_self_loops(build_hypergraph(ds))
    node_edges, edge_nodes = incidence(h)
    g = clique_expansion(h)

"""

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from ehrfusion.ehr_data import Dataset
from ehrfusion.errors import DataError
from ehrfusion.logger import get_logger

LOGGER = get_logger()


class EdgeKind(str, Enum):
    VISIT = "visit"
    SELFLOOP = "selfloop"


@dataclass(frozen=True)
class Hyperedge:
    edge_id: str
    members: Tuple[int, ...]
    kind: EdgeKind
    visit_id: Optional[str] = None

    def __post_init__(self):
        if not self.members:
            raise DataError(f"hyperedge '{self.edge_id}' is empty")
        if self.kind is EdgeKind.SELFLOOP and len(self.members) != 1:
            raise DataError(f"self-loop '{self.edge_id}' must have exactly one member")


@dataclass(frozen=True)
class Hypergraph:
    """
    Nodes are code_ids sorted by id (index = node index); visit
    hyperedges are sorted by visit_id and self-loops follow in node order.
    """

    node_ids: Tuple[str, ...]
    hyperedges: Tuple[Hyperedge, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.hyperedges)

    @property
    def node_index(self) -> Dict[str, int]:
        return {node_id: i for i, node_id in enumerate(self.node_ids)}

    @property
    def visit_edge_indices(self) -> List[int]:
        return [i for i, e in enumerate(self.hyperedges) if e.kind is EdgeKind.VISIT]

    @property
    def visit_ids(self) -> List[str]:
        return [e.visit_id for e in self.hyperedges if e.kind is EdgeKind.VISIT]

    @property
    def has_self_loops(self) -> bool:
        return any(e.kind is EdgeKind.SELFLOOP for e in self.hyperedges)

    def edge_index_of_visit(self) -> Dict[str, int]:
        return {
            e.visit_id: i for i, e in enumerate(self.hyperedges) if e.kind is EdgeKind.VISIT
        }


@dataclass(frozen=True)
class WeightedGraph:
    """
    An undirected graph; ``edges`` holds each pair once with i < j and a
    co-occurrence weight >= 1
    """

    n_nodes: int
    edges: Tuple[Tuple[int, int, float], ...]

    def weight(self, i: int, j: int) -> float:
        a, b = (i, j) if i < j else (j, i)
        for u, v, w in self.edges:
            if u == a and v == b:
                return w
        return 0.0

    def adjacency(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        :return: per node, the (neighbor indices, weights) arrays, both
            directions of every edge included
        """
        neighbors: List[List[int]] = [[] for _ in range(self.n_nodes)]
        weights: List[List[float]] = [[] for _ in range(self.n_nodes)]
        for i, j, w in self.edges:
            neighbors[i].append(j)
            weights[i].append(w)
            neighbors[j].append(i)
            weights[j].append(w)
        return [
            (np.asarray(n, dtype=np.int64), np.asarray(w, dtype=np.float64))
            for n, w in zip(neighbors, weights)
        ]


def build_hypergraph(ds: Dataset) -> Hypergraph:
    """
    One visit hyperedge per visit, spanning exactly its codes; the node
    set is the union of all codes that appear in a visit, so registry
    codes never used in a visit are not nodes.
    """
    used = sorted({code_id for v in ds.visits for code_id in v.codes})
    unused = len(ds.codes) - len(used)
    if unused:
        LOGGER.warning("{} registry codes appear in no visit and are not nodes", unused)
    index = {node_id: i for i, node_id in enumerate(used)}
    edges = []
    for visit in sorted(ds.visits, key=lambda v: v.visit_id):
        if not visit.codes:
            raise DataError(f"empty visit '{visit.visit_id}'")
        members = tuple(sorted({index[c] for c in visit.codes}))
        edges.append(
            Hyperedge(
                edge_id=f"visit:{visit.visit_id}",
                members=members,
                kind=EdgeKind.VISIT,
                visit_id=visit.visit_id,
            )
        )
    h = Hypergraph(node_ids=tuple(used), hyperedges=tuple(edges))
    LOGGER.info("Built hypergraph with {} nodes and {} visit hyperedges", h.n_nodes, h.n_edges)
    return h


def add_self_loops(h: Hypergraph) -> Hypergraph:
    """Append one self-loop hyperedge per node; nodes that have one keep it"""
    looped = {e.members[0] for e in h.hyperedges if e.kind is EdgeKind.SELFLOOP}
    extra = tuple(
        Hyperedge(edge_id=f"self:{node_id}", members=(i,), kind=EdgeKind.SELFLOOP)
        for i, node_id in enumerate(h.node_ids)
        if i not in looped
    )
    if not extra:
        return h
    return Hypergraph(node_ids=h.node_ids, hyperedges=h.hyperedges + extra)


def incidence(h: Hypergraph) -> Tuple[List[Tuple[int, ...]], List[Tuple[int, ...]]]:
    """
    :return: (node -> incident edge indices, edge -> member node indices)
    """
    node_edges: List[List[int]] = [[] for _ in range(h.n_nodes)]
    for e, edge in enumerate(h.hyperedges):
        for v in edge.members:
            node_edges[v].append(e)
    edge_nodes = [edge.members for edge in h.hyperedges]
    return [tuple(edges) for edges in node_edges], edge_nodes


def incidence_index(h: Hypergraph) -> Tuple[np.ndarray, np.ndarray]:
    """
    The incidence pairs as two aligned index arrays, ordered by edge then
    by member node, for vectorized message passing

    :return: (node indices, edge indices), both of length nnz
    """
    nodes = [v for edge in h.hyperedges for v in edge.members]
    edges = [e for e, edge in enumerate(h.hyperedges) for _ in edge.members]
    return np.asarray(nodes, dtype=np.int64), np.asarray(edges, dtype=np.int64)


def clique_expansion(h: Hypergraph) -> WeightedGraph:
    """
    Every pair of members of a visit hyperedge gets weight +1; self-loops
    contribute nothing, so a node only in its self-loop is isolated
    """
    counts: Counter = Counter()
    for edge in h.hyperedges:
        if edge.kind is not EdgeKind.VISIT:
            continue
        for i, j in combinations(edge.members, 2):
            counts[(i, j)] += 1
    edges = tuple((i, j, float(w)) for (i, j), w in sorted(counts.items()))
    return WeightedGraph(n_nodes=h.n_nodes, edges=edges)


def star_expansion(h: Hypergraph) -> WeightedGraph:
    """
    The bipartite code/visit graph: graph nodes ``0 .. n_nodes - 1`` are the
    codes and ``n_nodes + k`` is the k-th visit hyperedge
    """
    edges = []
    for k, e in enumerate(h.visit_edge_indices):
        for v in h.hyperedges[e].members:
            edges.append((v, h.n_nodes + k, 1.0))
    return WeightedGraph(n_nodes=h.n_nodes + len(h.visit_edge_indices), edges=tuple(sorted(edges)))


def dump_hypergraph(h: Hypergraph, path: Union[Path, str]) -> Path:
    """Write ``edge_id<TAB>kind<TAB>node_id,node_id,...`` lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as dst:
        for edge in h.hyperedges:
            members = ",".join(h.node_ids[v] for v in edge.members)
            dst.write(f"{edge.edge_id}\t{edge.kind.value}\t{members}\n")
    LOGGER.debug("Wrote hypergraph edge list to {}", path)
    return path
