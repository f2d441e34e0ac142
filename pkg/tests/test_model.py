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
Test the hypergraph fusion network
==================================
"""

import math
from typing import Dict

import numpy as np
import pytest
import torch

from ehrfusion.config import ModelConfig
from ehrfusion.config import TaskKind
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import MedicalCode
from ehrfusion.ehr_data import VisitRecord
from ehrfusion.embeddings import EmbeddingTable
from ehrfusion.embeddings import TableKind
from ehrfusion.errors import DataError
from ehrfusion.errors import NumericError
from ehrfusion.gradient_check import tiny_dataset
from ehrfusion.gradient_check import tiny_instance
from ehrfusion.hypergraph import add_self_loops
from ehrfusion.hypergraph import build_hypergraph
from ehrfusion.model import HypergraphFusionNet
from ehrfusion.model import bce_loss
from ehrfusion.model import edges_to_node
from ehrfusion.model import flatten_parameters
from ehrfusion.model import fused_edge_update
from ehrfusion.model import load_checkpoint
from ehrfusion.model import nodes_to_edge
from ehrfusion.model import prepare_inputs
from ehrfusion.model import reset_parameters
from ehrfusion.model import save_checkpoint
from ehrfusion.model import segment_softmax


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def oracle_probs(model: HypergraphFusionNet, x0: np.ndarray, sem: np.ndarray) -> np.ndarray:
    """Edge by edge, node by node, head by head forward pass on the tiny hypergraph"""
    weights: Dict[str, np.ndarray] = {
        name: value.detach().numpy() for name, value in model.state_dict().items()
    }

    def linear(name: str, x: np.ndarray) -> np.ndarray:
        return x @ weights[f"{name}.weight"].T + weights[f"{name}.bias"]

    def mlp(name: str, x: np.ndarray) -> np.ndarray:
        return linear(f"{name}.2", relu(linear(f"{name}.0", x)))

    def attend(name: str, query: np.ndarray, sources: np.ndarray) -> np.ndarray:
        n_heads = model.cfg.n_heads
        head_dim = model.cfg.hidden_dim // n_heads
        q = linear(f"{name}.query", query)
        k = linear(f"{name}.key", sources)
        v = linear(f"{name}.value", sources)
        pooled = np.zeros_like(q)
        for head in range(n_heads):
            cols = slice(head * head_dim, (head + 1) * head_dim)
            scores = k[:, cols] @ q[cols] / math.sqrt(head_dim)
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            pooled[cols] = alpha @ v[:, cols]
        return relu(linear(f"{name}.output", pooled))

    h = add_self_loops(build_hypergraph(tiny_dataset()))
    members = [list(edge.members) for edge in h.hyperedges]
    incident = [[j for j, m in enumerate(members) if i in m] for i in range(h.n_nodes)]

    x = relu(linear("input_projection", x0))
    e = np.stack([linear("edge_init", x[m].mean(axis=0)) for m in members])
    H = mlp("mlp1", sem) if model.cfg.use_note_semantics else np.zeros_like(e)
    layers = []
    for layer in range(model.cfg.n_layers):
        aggregated = np.stack(
            [attend(f"nodes_to_edges.{layer}", e[j], x[m]) for j, m in enumerate(members)]
        )
        e = mlp("mlp2", np.hstack([aggregated, H]))
        x = np.stack(
            [attend(f"edges_to_nodes.{layer}", x[i], e[inc]) for i, inc in enumerate(incident)]
        )
        layers.append(e[h.visit_edge_indices])
    logits = mlp("mlp_cls", np.hstack(layers))
    return 1.0 / (1.0 + np.exp(-logits))


@pytest.mark.parametrize("n_layers", [1, 2])
@pytest.mark.parametrize("use_note_semantics", [True, False])
def test_forward_matches_oracle(n_layers, use_note_semantics):
    model, inputs, _ = tiny_instance(n_layers, seed=3, use_note_semantics=use_note_semantics)
    probs, _ = model(inputs)
    expected = oracle_probs(model, inputs.x0.numpy(), inputs.semantic_inputs.numpy())
    assert probs.shape == (2, 1)
    np.testing.assert_allclose(probs.detach().numpy(), expected, rtol=0, atol=1e-10)


def test_attention_rows_are_distributions():
    model, inputs, _ = tiny_instance(2, seed=1)
    _, state = model(inputs)
    assert state.n_layers == 2
    assert len(state.X) == len(state.E) == 3
    for alphas, groups, n_groups in (
        (state.edge_attention, inputs.edge_index, inputs.n_edges),
        (state.node_attention, inputs.node_index, inputs.n_nodes),
    ):
        for alpha in alphas:
            assert torch.all(alpha >= 0)
            totals = torch.zeros(n_groups, dtype=alpha.dtype).index_add_(0, groups, alpha)
            np.testing.assert_allclose(totals.detach().numpy(), 1.0, atol=1e-12)
    nodes, weights = state.edge_attention_row(1, 0)
    assert nodes.tolist() == [0, 1]
    assert weights.sum() == pytest.approx(1.0)
    with pytest.raises(DataError):
        state.edge_attention_row(3, 0)


def test_nodes_to_edge_is_permutation_invariant():
    model, _, _ = tiny_instance(1, seed=2)
    generator = torch.Generator().manual_seed(0)
    members = torch.randn(4, 8, generator=generator, dtype=torch.float64)
    query = torch.randn(8, generator=generator, dtype=torch.float64)
    out = nodes_to_edge(members, query, model, 1)
    shuffled = nodes_to_edge(members[[2, 0, 3, 1]], query, model, 1)
    assert out.shape == (8,)
    torch.testing.assert_close(out, shuffled)
    incident = edges_to_node(members, query, model, 1)
    torch.testing.assert_close(incident, edges_to_node(members.flip(0), query, model, 1))


def test_note_semantics_off_ignores_notes():
    model, inputs, _ = tiny_instance(2, seed=0, use_note_semantics=False)
    probs, state = model(inputs)
    assert torch.count_nonzero(state.H) == 0
    inputs.semantic_inputs = torch.randn_like(inputs.semantic_inputs)
    again, _ = model(inputs)
    torch.testing.assert_close(probs, again)


def test_concept_semantics_off_zeroes_concepts():
    _, inputs, _ = tiny_instance(1, use_concept_semantics=False)
    assert torch.count_nonzero(inputs.x0[:, 4:]) == 0
    assert torch.count_nonzero(inputs.x0[:, :4]) > 0
    # visit edges keep their note rows, self-loops lose their concept rows
    assert torch.count_nonzero(inputs.semantic_inputs[:2]) > 0
    assert torch.count_nonzero(inputs.semantic_inputs[2:]) == 0


def test_zero_classifier_gives_one_half():
    model, inputs, _ = tiny_instance(2)
    with torch.no_grad():
        model.mlp_cls[2].weight.zero_()
        model.mlp_cls[2].bias.zero_()
    probs, _ = model(inputs)
    torch.testing.assert_close(probs, torch.full((2, 1), 0.5, dtype=torch.float64))


def test_bce_loss():
    half = torch.full((3, 2), 0.5, dtype=torch.float64)
    labels = torch.tensor([[1, 0], [0, 0], [1, 1]])
    assert bce_loss(half, labels).item() == pytest.approx(math.log(2))
    wrong = bce_loss(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([1, 0]))
    assert math.isfinite(wrong.item())
    assert wrong.item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_segment_softmax_is_stable():
    scores = torch.tensor([[1000.0], [1001.0], [5.0]], dtype=torch.float64)
    alpha = segment_softmax(scores, torch.tensor([0, 0, 1]), 2)
    expected = [1 / (1 + math.e), math.e / (1 + math.e), 1.0]
    np.testing.assert_allclose(alpha[:, 0].numpy(), expected)


def test_prepare_inputs_needs_self_loops(tiny_ds):
    h = build_hypergraph(tiny_ds)
    S = EmbeddingTable(TableKind.STRUCTURAL, 4, ("A", "B", "C"), np.ones((3, 4)))
    C = EmbeddingTable(TableKind.CONCEPT, 4, ("A", "B", "C"), np.ones((3, 4)))
    N = EmbeddingTable(TableKind.NOTE, 4, ("v1", "v2"), np.ones((2, 4)))
    model, _, _ = tiny_instance(1)
    with pytest.raises(DataError, match="self-loops"):
        prepare_inputs(h, S, C, N, model.cfg)
    short = EmbeddingTable(TableKind.NOTE, 4, ("v1",), np.ones((1, 4)))
    with pytest.raises(DataError):
        prepare_inputs(add_self_loops(h), S, C, short, model.cfg)


def test_non_finite_inputs_raise():
    model, inputs, _ = tiny_instance(1)
    inputs.x0[0, 0] = float("nan")
    with pytest.raises(NumericError, match="layer 0"):
        model(inputs)


def test_update_functions_check_their_inputs():
    model, _, _ = tiny_instance(1)
    with pytest.raises(DataError, match="width-8"):
        fused_edge_update(torch.zeros(2, 8), torch.zeros(2, 4), model)
    with pytest.raises(DataError):
        nodes_to_edge(torch.zeros(0, 8), torch.zeros(8), model, 1)
    with pytest.raises(DataError):
        edges_to_node(torch.zeros(0, 8), torch.zeros(8), model, 1)


def test_reset_parameters_is_seeded():
    first, _, _ = tiny_instance(2, seed=5)
    again, _, _ = tiny_instance(2, seed=5)
    torch.testing.assert_close(flatten_parameters(first), flatten_parameters(again))
    reset_parameters(again, 6)
    assert not torch.equal(flatten_parameters(first), flatten_parameters(again))
    fan_in = first.input_projection.in_features
    assert torch.all(first.input_projection.weight.abs() <= math.sqrt(6 / fan_in))
    assert torch.all(first.input_projection.bias.abs() <= 1 / math.sqrt(fan_in))
    assert first.input_projection.weight.abs().max() > 1 / math.sqrt(fan_in)


def test_checkpoint_round_trip(tmp_path):
    model, inputs, _ = tiny_instance(2, seed=4, residual=True, layer_norm=True)
    path = save_checkpoint(model, tmp_path / "run" / "model.pt", extra={"selected_epoch": 7})
    restored, extra = load_checkpoint(path)
    assert extra == {"selected_epoch": 7}
    assert restored.cfg == model.cfg
    probs, _ = model(inputs)
    again, _ = restored(inputs)
    torch.testing.assert_close(probs, again)


def test_load_checkpoint_missing(tmp_path):
    with pytest.raises(DataError, match="no checkpoint at"):
        load_checkpoint(tmp_path / "model.pt")


@pytest.mark.parametrize("seed", range(20))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    n_codes = int(rng.integers(3, 15))
    n_visits = int(rng.integers(2, 50))
    memberships = [
        rng.choice(n_codes, size=int(rng.integers(1, min(n_codes, 6) + 1)), replace=False)
        for _ in range(n_visits)
    ]
    structural = rng.standard_normal((n_codes, 4))
    concepts = rng.standard_normal((n_codes, 4))
    notes = rng.standard_normal((n_visits, 4))
    code_perm = rng.permutation(n_codes)
    visit_perm = rng.permutation(n_visits)
    cfg = ModelConfig(hidden_dim=8, n_layers=2, n_heads=2, d1=4, d2=4, seed=seed)

    def probs_by_visit(code_name, visit_name) -> Dict[str, float]:
        code_ids = tuple(code_name(i) for i in range(n_codes))
        visit_ids = tuple(visit_name(j) for j in range(n_visits))
        codes = {c: MedicalCode(c, "ICD9", f"concept {c}") for c in code_ids}
        visits = tuple(
            VisitRecord(visit_ids[j], tuple(code_ids[i] for i in m), label=(j % 2,))
            for j, m in enumerate(memberships)
        )
        h = add_self_loops(build_hypergraph(Dataset(codes, visits, TaskKind.BINARY)))
        inputs = prepare_inputs(
            h,
            EmbeddingTable(TableKind.STRUCTURAL, 4, code_ids, structural),
            EmbeddingTable(TableKind.CONCEPT, 4, code_ids, concepts),
            EmbeddingTable(TableKind.NOTE, 4, visit_ids, notes),
            cfg,
            dtype=torch.float64,
        )
        probs, state = HypergraphFusionNet(cfg).to(torch.float64)(inputs)
        for alpha in state.edge_attention:
            totals = torch.zeros(inputs.n_edges, dtype=alpha.dtype).index_add_(
                0, inputs.edge_index, alpha
            )
            assert torch.all(alpha >= 0)
            np.testing.assert_allclose(totals.detach().numpy(), 1.0, atol=1e-6)
        return dict(zip(inputs.visit_ids, probs[:, 0].tolist()))

    original = probs_by_visit(lambda i: f"c{i:02d}", lambda j: f"v{j:02d}")
    relabeled = probs_by_visit(
        lambda i: f"z{code_perm[i]:02d}", lambda j: f"w{visit_perm[j]:02d}"
    )
    for j in range(n_visits):
        assert relabeled[f"w{visit_perm[j]:02d}"] == pytest.approx(
            original[f"v{j:02d}"], abs=1e-9
        )
