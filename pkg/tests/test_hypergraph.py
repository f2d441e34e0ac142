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
Test Hypergraph
===============
"""

import dataclasses
from itertools import combinations

import numpy as np
import pytest

from ehrfusion.config import TaskKind
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import MedicalCode
from ehrfusion.ehr_data import VisitRecord
from ehrfusion.errors import DataError
from ehrfusion.hypergraph import EdgeKind
from ehrfusion.hypergraph import Hyperedge
from ehrfusion.hypergraph import add_self_loops
from ehrfusion.hypergraph import build_hypergraph
from ehrfusion.hypergraph import clique_expansion
from ehrfusion.hypergraph import dump_hypergraph
from ehrfusion.hypergraph import incidence
from ehrfusion.hypergraph import incidence_index
from ehrfusion.hypergraph import star_expansion


def test_build_hypergraph(tiny_ds):
    h = build_hypergraph(tiny_ds)
    assert h.node_ids == ("A", "B", "C")
    assert [e.members for e in h.hyperedges] == [(0, 1), (1, 2)]
    assert h.visit_ids == ["v1", "v2"]
    assert not h.has_self_loops
    assert h.edge_index_of_visit() == {"v1": 0, "v2": 1}


def test_build_hypergraph_skips_unused_codes(tiny_ds):
    codes = dict(tiny_ds.codes, D=MedicalCode("D", "CPT", "chest x-ray"))
    h = build_hypergraph(dataclasses.replace(tiny_ds, codes=codes))
    assert h.node_ids == ("A", "B", "C")


def test_visit_edges_sorted_by_visit_id(tiny_ds):
    visits = (VisitRecord("v0", ("C",), label=(0,)),) + tiny_ds.visits[::-1]
    h = build_hypergraph(dataclasses.replace(tiny_ds, visits=visits))
    assert h.visit_ids == ["v0", "v1", "v2"]


def test_add_self_loops(tiny_ds):
    h = add_self_loops(build_hypergraph(tiny_ds))
    assert h.n_edges == 5
    assert h.has_self_loops
    loops = [e for e in h.hyperedges if e.kind is EdgeKind.SELFLOOP]
    assert [e.members for e in loops] == [(0,), (1,), (2,)]
    assert [e.edge_id for e in loops] == ["self:A", "self:B", "self:C"]
    assert add_self_loops(h) == h
    assert h.visit_edge_indices == [0, 1]


def test_incidence(tiny_hypergraph):
    node_edges, edge_nodes = incidence(tiny_hypergraph)
    assert node_edges == [(0, 2), (0, 1, 3), (1, 4)]
    assert edge_nodes == [(0, 1), (1, 2), (0,), (1,), (2,)]
    nodes, edges = incidence_index(tiny_hypergraph)
    assert nodes.tolist() == [0, 1, 1, 2, 0, 1, 2]
    assert edges.tolist() == [0, 0, 1, 1, 2, 3, 4]


def test_clique_expansion(tiny_ds):
    visits = tiny_ds.visits + (VisitRecord("v3", ("A", "B"), label=(1,)),)
    h = add_self_loops(build_hypergraph(dataclasses.replace(tiny_ds, visits=visits)))
    g = clique_expansion(h)
    assert g.n_nodes == 3
    assert g.edges == ((0, 1, 2.0), (1, 2, 1.0))
    assert g.weight(1, 0) == 2.0
    assert g.weight(0, 2) == 0.0


def test_clique_expansion_isolated_node(tiny_ds):
    codes = dict(tiny_ds.codes, D=MedicalCode("D", "CPT", "chest x-ray"))
    visits = tiny_ds.visits + (VisitRecord("v3", ("D",), label=(0,)),)
    h = add_self_loops(build_hypergraph(dataclasses.replace(tiny_ds, codes=codes, visits=visits)))
    adjacency = clique_expansion(h).adjacency()
    assert len(adjacency[3][0]) == 0
    assert sorted(adjacency[1][0].tolist()) == [0, 2]


def test_star_expansion(tiny_hypergraph):
    g = star_expansion(tiny_hypergraph)
    assert g.n_nodes == 5
    assert g.edges == ((0, 3, 1.0), (1, 3, 1.0), (1, 4, 1.0), (2, 4, 1.0))


def test_empty_hyperedge():
    with pytest.raises(DataError):
        Hyperedge(edge_id="visit:v0", members=(), kind=EdgeKind.VISIT, visit_id="v0")
    with pytest.raises(DataError):
        Hyperedge(edge_id="self:A", members=(0, 1), kind=EdgeKind.SELFLOOP)


def test_dump_hypergraph(tiny_hypergraph, tmp_path):
    path = dump_hypergraph(tiny_hypergraph, tmp_path / "hypergraph.tsv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "visit:v1\tvisit\tA,B"
    assert lines[-1] == "self:C\tselfloop\tC"
    assert len(lines) == 5


def random_dataset(seed: int, n_visits: int = 50, n_codes: int = 20) -> Dataset:
    rng = np.random.default_rng(seed)
    codes = {
        f"c{i:02d}": MedicalCode(f"c{i:02d}", "ICD9", f"concept {i}") for i in range(n_codes)
    }
    visits = []
    for k in range(n_visits):
        members = rng.choice(n_codes, size=int(rng.integers(1, 7)), replace=False)
        visits.append(
            VisitRecord(
                f"v{k:03d}",
                tuple(sorted(f"c{i:02d}" for i in members)),
                label=(int(rng.integers(2)),),
            )
        )
    return Dataset(codes=codes, visits=tuple(visits), task_kind=TaskKind.BINARY)


@pytest.mark.parametrize("seed", range(10))
def test_build_hypergraph_ignores_input_order(seed):
    ds = random_dataset(seed)
    rng = np.random.default_rng(seed + 100)
    shuffled = tuple(
        dataclasses.replace(ds.visits[i], codes=ds.visits[i].codes[::-1])
        for i in rng.permutation(len(ds.visits))
    )
    h = build_hypergraph(ds)
    reordered = build_hypergraph(dataclasses.replace(ds, visits=shuffled))
    assert reordered == h
    assert add_self_loops(reordered) == add_self_loops(h)


@pytest.mark.parametrize("seed", range(10))
def test_incidence_views_agree(seed):
    h = add_self_loops(build_hypergraph(random_dataset(seed)))
    node_edges, edge_nodes = incidence(h)
    nodes, edges = incidence_index(h)

    pairs = list(zip(nodes.tolist(), edges.tolist()))
    assert len(pairs) == len(set(pairs)) == sum(len(m) for m in edge_nodes)
    assert set(pairs) == {(v, e) for e, members in enumerate(edge_nodes) for v in members}
    assert set(pairs) == {(v, e) for v, incident in enumerate(node_edges) for e in incident}
    # ordered by edge, then by member node
    assert pairs == sorted(pairs, key=lambda pair: (pair[1], pair[0]))
    for e, edge in enumerate(h.hyperedges):
        assert tuple(nodes[edges == e].tolist()) == edge.members
    for v in range(h.n_nodes):
        assert tuple(edges[nodes == v].tolist()) == node_edges[v]


@pytest.mark.parametrize("n_visits", [1, 20, 200])
def test_clique_expansion_counts_shared_visits(n_visits):
    ds = random_dataset(n_visits, n_visits=n_visits, n_codes=15)
    h = add_self_loops(build_hypergraph(ds))
    g = clique_expansion(h)
    member_sets = [set(e.members) for e in h.hyperedges if e.kind is EdgeKind.VISIT]
    expected = {}
    for i, j in combinations(range(h.n_nodes), 2):
        shared = sum(1 for members in member_sets if i in members and j in members)
        if shared:
            expected[(i, j)] = float(shared)
    assert {(i, j): w for i, j, w in g.edges} == expected
    assert [(i, j) for i, j, _ in g.edges] == sorted(expected)
    assert sum(w for _, _, w in g.edges) == sum(len(m) * (len(m) - 1) / 2 for m in member_sets)
