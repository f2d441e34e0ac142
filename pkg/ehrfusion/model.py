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
Hypergraph fusion network
=========================

Message passing over the visit/code hypergraph with semantic infusion:

- node inputs are ``[S_v ; C_v]`` (structural and concept vectors) projected
  to the hidden width ``d``
- every hyperedge has a semantics row ``H_e = MLP1(N_e)`` for a visit edge
  (its note vector) or ``MLP1(C_v)`` for the self-loop of node ``v``
- each layer first updates edges from their member nodes with multi-head
  set attention, fuses the result with ``H_e`` through ``MLP2``, then
  updates nodes from their incident edges
- a visit's probability is ``sigmoid(MLP_CLS(E^1 || ... || E^L))``

.. code-block::

    inputs = prepare_inputs(h, structural, concepts, notes, cfg)
    model = HypergraphFusionNet(cfg)
    probs, state = model(inputs)
    loss = bce_loss(probs[train_rows], labels[train_rows])

"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
import torch
from torch import Tensor
from torch import nn

from ehrfusion.config import ModelConfig
from ehrfusion.embeddings import EmbeddingTable
from ehrfusion.errors import DataError
from ehrfusion.errors import NumericError
from ehrfusion.hypergraph import EdgeKind
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.hypergraph import incidence_index
from ehrfusion.logger import get_logger

LOGGER = get_logger()

CHECKPOINT_FORMAT_VERSION = 1

BCE_EPSILON = 1e-7

WEIGHT_GAIN = 6.0


def init_node_features(
    S: EmbeddingTable, C: EmbeddingTable, node_ids, cfg: ModelConfig
) -> np.ndarray:
    """
    Stack ``[S_v ; C_v]`` for every node, before the learned projection

    :param S: structural table of width d1, keyed by code_id
    :param C: concept table of width d2, keyed by code_id
    :param node_ids: the hypergraph node order
    :param cfg: C_v is replaced by zeros when ``use_concept_semantics`` is off
    :return: an (n_nodes, d1 + d2) array
    :raises DataError: when a node is missing from a table or a width is off
    """
    if S.dim != cfg.d1 or C.dim != cfg.d2:
        raise DataError(
            f"table widths (d1={S.dim}, d2={C.dim}) differ from "
            f"the model (d1={cfg.d1}, d2={cfg.d2})"
        )
    structural = S.lookup(list(node_ids))
    concept = C.lookup(list(node_ids))
    if not cfg.use_concept_semantics:
        concept = np.zeros_like(concept)
    return np.hstack([structural, concept])


def hyperedge_semantic_inputs(
    N: EmbeddingTable, C: EmbeddingTable, h: Hypergraph, cfg: ModelConfig
) -> np.ndarray:
    """
    The stacked d2-wide MLP1 input: the note vector of the visit for a visit
    edge, the concept vector of the node for a self-loop

    Self-loop rows are zero when ``use_concept_semantics`` is off.
    """
    rows = np.zeros((h.n_edges, cfg.d2))
    visit_edges = [(i, e.visit_id) for i, e in enumerate(h.hyperedges) if e.kind is EdgeKind.VISIT]
    loop_edges = [
        (i, h.node_ids[e.members[0]])
        for i, e in enumerate(h.hyperedges)
        if e.kind is EdgeKind.SELFLOOP
    ]
    if visit_edges:
        if N.dim != cfg.d2:
            raise DataError(f"note table width {N.dim} differs from d2={cfg.d2}")
        rows[[i for i, _ in visit_edges]] = N.lookup([key for _, key in visit_edges])
    if loop_edges and cfg.use_concept_semantics:
        rows[[i for i, _ in loop_edges]] = C.lookup([key for _, key in loop_edges])
    return rows


@dataclass
class ModelInputs:
    """Everything a forward pass needs, as tensors of one dtype"""

    x0: Tensor
    semantic_inputs: Tensor
    node_index: Tensor
    edge_index: Tensor
    n_nodes: int
    n_edges: int
    visit_edges: Tensor
    visit_ids: List[str]

    def to(self, dtype: torch.dtype) -> "ModelInputs":
        return ModelInputs(
            x0=self.x0.to(dtype),
            semantic_inputs=self.semantic_inputs.to(dtype),
            node_index=self.node_index,
            edge_index=self.edge_index,
            n_nodes=self.n_nodes,
            n_edges=self.n_edges,
            visit_edges=self.visit_edges,
            visit_ids=list(self.visit_ids),
        )


def prepare_inputs(
    h: Hypergraph,
    S: EmbeddingTable,
    C: EmbeddingTable,
    N: EmbeddingTable,
    cfg: ModelConfig,
    dtype: torch.dtype = torch.float32,
) -> ModelInputs:
    """
    :param h: a hypergraph with self-loops
    :raises DataError: without self-loops, or when a table misses a key
    """
    if not h.has_self_loops:
        raise DataError("the model needs a hypergraph with self-loops, see add_self_loops")
    node_index, edge_index = incidence_index(h)
    return ModelInputs(
        x0=torch.as_tensor(init_node_features(S, C, h.node_ids, cfg), dtype=dtype),
        semantic_inputs=torch.as_tensor(hyperedge_semantic_inputs(N, C, h, cfg), dtype=dtype),
        node_index=torch.as_tensor(node_index),
        edge_index=torch.as_tensor(edge_index),
        n_nodes=h.n_nodes,
        n_edges=h.n_edges,
        visit_edges=torch.as_tensor(h.visit_edge_indices, dtype=torch.int64),
        visit_ids=h.visit_ids,
    )


def segment_softmax(scores: Tensor, segments: Tensor, n_segments: int) -> Tensor:
    """
    Softmax of ``scores`` (nnz x heads) within each group of equal ``segments``
    """
    index = segments.unsqueeze(-1).expand_as(scores)
    shift = torch.full(
        (n_segments, scores.shape[-1]), -math.inf, dtype=scores.dtype
    ).scatter_reduce(0, index, scores.detach(), reduce="amax", include_self=True)
    weights = torch.exp(scores - shift[segments])
    totals = torch.zeros(n_segments, scores.shape[-1], dtype=scores.dtype).index_add_(
        0, segments, weights
    )
    return weights / totals[segments]


class SetAttention(nn.Module):
    """
    Multi-head scaled dot-product attention of each target over its set of
    sources: the target's previous embedding is the query, the sources give
    keys and values, heads are concatenated and projected, then ReLU
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.d = d
        self.n_heads = n_heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.output = nn.Linear(d, d)

    def forward(
        self, targets: Tensor, sources: Tensor, target_index: Tensor, source_index: Tensor
    ) -> Tuple[Tensor, Tensor]:
        """
        :param targets: (n_targets, d) query embeddings
        :param sources: (n_sources, d) key/value embeddings
        :param target_index: (nnz,) target of every incidence pair
        :param source_index: (nnz,) source of every incidence pair
        :return: the (n_targets, d) update and the (nnz,) head-averaged
            attention weight of every pair
        """
        n_targets = targets.shape[0]
        head_dim = self.d // self.n_heads
        q = self.query(targets)[target_index].view(-1, self.n_heads, head_dim)
        k = self.key(sources)[source_index].view(-1, self.n_heads, head_dim)
        v = self.value(sources)[source_index].view(-1, self.n_heads, head_dim)
        scores = (q * k).sum(-1) / math.sqrt(head_dim)
        alpha = segment_softmax(scores, target_index, n_targets)
        pooled = torch.zeros(n_targets, self.n_heads, head_dim, dtype=v.dtype).index_add_(
            0, target_index, alpha.unsqueeze(-1) * v
        )
        out = torch.relu(self.output(pooled.reshape(n_targets, self.d)))
        return out, alpha.mean(-1)


def _mlp(d_in: int, d: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d), nn.ReLU(), nn.Linear(d, d_out))


@dataclass
class LayerState:
    """
    Node and hyperedge embeddings of every layer ``0 .. L`` and the attention
    of every layer ``1 .. L`` (stored at list index ``l - 1``)

    ``edge_attention[l - 1][p]`` is the head-averaged weight of node
    ``node_index[p]`` in the update of edge ``edge_index[p]``;
    ``node_attention`` holds the reverse direction over the same pairs.
    """

    X: List[Tensor]
    E: List[Tensor]
    H: Tensor
    edge_attention: List[Tensor]
    node_attention: List[Tensor]
    node_index: Tensor
    edge_index: Tensor

    @property
    def n_layers(self) -> int:
        return len(self.edge_attention)

    def edge_attention_row(self, layer: int, edge: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        :param layer: 1-based layer index
        :return: (member node indices, attention weights) of one hyperedge
        """
        if not 1 <= layer <= self.n_layers:
            raise DataError(f"layer must be in 1..{self.n_layers}, got {layer}")
        mask = (self.edge_index == edge).numpy()
        weights = self.edge_attention[layer - 1].detach().numpy()[mask]
        return self.node_index.numpy()[mask], weights.astype(np.float64)


class HypergraphFusionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.input_projection = nn.Linear(cfg.d1 + cfg.d2, d)
        self.edge_init = nn.Linear(d, d)
        self.mlp1 = _mlp(cfg.d2, d, d)
        self.mlp2 = _mlp(2 * d, d, d)
        self.nodes_to_edges = nn.ModuleList(
            [SetAttention(d, cfg.n_heads) for _ in range(cfg.n_layers)]
        )
        self.edges_to_nodes = nn.ModuleList(
            [SetAttention(d, cfg.n_heads) for _ in range(cfg.n_layers)]
        )
        if cfg.layer_norm:
            self.edge_norms = nn.ModuleList([nn.LayerNorm(d) for _ in range(cfg.n_layers)])
            self.node_norms = nn.ModuleList([nn.LayerNorm(d) for _ in range(cfg.n_layers)])
        self.mlp_cls = _mlp(cfg.n_layers * d, d, cfg.n_labels)
        self.register_parameter("node_features", None)
        reset_parameters(self, cfg.seed)

    def attach_features(self, x0: Tensor) -> None:
        """Make the ``[S;C]`` input matrix a trainable parameter"""
        self.node_features = nn.Parameter(x0.detach().clone())

    def project_nodes(self, x0: Tensor) -> Tensor:
        return torch.relu(self.input_projection(x0))

    def hyperedge_semantics(self, inputs: ModelInputs) -> Tensor:
        if not self.cfg.use_note_semantics:
            return torch.zeros(inputs.n_edges, self.cfg.hidden_dim, dtype=inputs.x0.dtype)
        return self.mlp1(inputs.semantic_inputs)

    def initial_edges(self, x: Tensor, inputs: ModelInputs) -> Tensor:
        sums = torch.zeros(inputs.n_edges, x.shape[1], dtype=x.dtype).index_add_(
            0, inputs.edge_index, x[inputs.node_index]
        )
        sizes = torch.bincount(inputs.edge_index, minlength=inputs.n_edges).to(x.dtype)
        return self.edge_init(sums / sizes.unsqueeze(-1))

    def propagate(self, inputs: ModelInputs) -> LayerState:
        x0 = self.node_features if self.node_features is not None else inputs.x0
        x = self.project_nodes(x0)
        e = self.initial_edges(x, inputs)
        H = self.hyperedge_semantics(inputs)
        state = LayerState(
            X=[x],
            E=[e],
            H=H,
            edge_attention=[],
            node_attention=[],
            node_index=inputs.node_index,
            edge_index=inputs.edge_index,
        )
        _check_finite(0, x, e, H)
        for layer in range(self.cfg.n_layers):
            aggregated, edge_alpha = self.nodes_to_edges[layer](
                e, x, inputs.edge_index, inputs.node_index
            )
            e_next = fused_edge_update(aggregated, H, self)
            if self.cfg.residual:
                e_next = e_next + e
            if self.cfg.layer_norm:
                e_next = self.edge_norms[layer](e_next)
            x_next, node_alpha = self.edges_to_nodes[layer](
                x, e_next, inputs.node_index, inputs.edge_index
            )
            if self.cfg.residual:
                x_next = x_next + x
            if self.cfg.layer_norm:
                x_next = self.node_norms[layer](x_next)
            _check_finite(layer + 1, x_next, e_next)
            x, e = x_next, e_next
            state.X.append(x)
            state.E.append(e)
            state.edge_attention.append(edge_alpha)
            state.node_attention.append(node_alpha)
        return state

    def classify(self, state: LayerState, visit_edges: Tensor) -> Tensor:
        """
        :return: (n_visits, n_labels) probabilities of the visit hyperedges
        """
        stacked = torch.cat([E[visit_edges] for E in state.E[1:]], dim=1)
        return torch.sigmoid(self.mlp_cls(stacked))

    def forward(self, inputs: ModelInputs) -> Tuple[Tensor, LayerState]:
        state = self.propagate(inputs)
        return self.classify(state, inputs.visit_edges), state


def _check_finite(layer: int, *tensors: Tensor) -> None:
    for tensor in tensors:
        if not torch.all(torch.isfinite(tensor)):
            raise NumericError(f"non-finite values in layer {layer}")


def reset_parameters(model: nn.Module, seed: int) -> None:
    """
    Uniform fan-in initialization drawn from a seeded generator: weights of
    every Linear from ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` (ReLU gain),
    biases from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; LayerNorms start as
    the identity
    """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                fan_in = module.in_features
                for tensor, bound in (
                    (module.weight, math.sqrt(WEIGHT_GAIN / fan_in)),
                    (module.bias, 1.0 / math.sqrt(fan_in)),
                ):
                    draw = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
                    tensor.copy_((2 * draw - 1) * bound)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)


def nodes_to_edge(members: Tensor, query: Tensor, model: HypergraphFusionNet, layer: int) -> Tensor:
    """
    Update one hyperedge from its member node embeddings

    :param members: (m, d) member node embeddings, m >= 1
    :param query: (d,) the edge's previous embedding
    :param layer: 1-based layer index
    """
    if members.shape[0] == 0:
        raise DataError("a hyperedge needs at least one member node")
    index = torch.zeros(members.shape[0], dtype=torch.int64)
    attention = model.nodes_to_edges[layer - 1]
    out, _ = attention(query.unsqueeze(0), members, index, torch.arange(members.shape[0]))
    return out[0]


def edges_to_node(
    incident: Tensor, query: Tensor, model: HypergraphFusionNet, layer: int
) -> Tensor:
    """Update one node from its incident hyperedge embeddings"""
    if incident.shape[0] == 0:
        raise DataError("a node needs at least one incident hyperedge")
    index = torch.zeros(incident.shape[0], dtype=torch.int64)
    attention = model.edges_to_nodes[layer - 1]
    out, _ = attention(query.unsqueeze(0), incident, index, torch.arange(incident.shape[0]))
    return out[0]


def fused_edge_update(aggregated: Tensor, he: Tensor, model: HypergraphFusionNet) -> Tensor:
    """
    ``MLP2([aggregated ; H_e])``, row-wise for matrices or for single rows

    :raises DataError: when either input is not ``hidden_dim`` wide
    """
    d = model.cfg.hidden_dim
    if aggregated.shape[-1] != d or he.shape[-1] != d:
        raise DataError(
            f"fused update needs two width-{d} inputs, "
            f"got {aggregated.shape[-1]} and {he.shape[-1]}"
        )
    return model.mlp2(torch.cat([aggregated, he], dim=-1))


def bce_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """
    Binary cross-entropy averaged over visits and labels, with the
    probabilities clamped to ``[1e-7, 1 - 1e-7]``
    """
    p = probs.clamp(BCE_EPSILON, 1 - BCE_EPSILON)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def flatten_parameters(model: nn.Module) -> Tensor:
    return nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def unflatten_parameters(model: nn.Module, vector: Tensor) -> None:
    with torch.no_grad():
        nn.utils.vector_to_parameters(vector, model.parameters())


def save_checkpoint(
    model: HypergraphFusionNet, path: Union[Path, str], extra: Optional[Dict] = None
) -> Path:
    """
    Save ``{"format_version", "config", "state_dict"}`` (plus ``extra``
    metadata) with :py:func:`torch.save`
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.dict(),
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    payload["config"]["task_kind"] = model.cfg.task_kind.value
    torch.save(payload, path)
    LOGGER.debug("Saved checkpoint {}", path)
    return path


def load_checkpoint(path: Union[Path, str]) -> Tuple[HypergraphFusionNet, Dict]:
    """
    :return: the restored model and the checkpoint's extra metadata
    :raises DataError: for a missing file or an unknown format version
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}")
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    cfg = ModelConfig.parse_obj(payload["config"])
    model = HypergraphFusionNet(cfg)
    state_dict = payload["state_dict"]
    dtype = state_dict["input_projection.weight"].dtype
    model.to(dtype)
    if "node_features" in state_dict:
        model.attach_features(state_dict["node_features"])
    model.load_state_dict(state_dict)
    return model, payload.get("extra", {})
