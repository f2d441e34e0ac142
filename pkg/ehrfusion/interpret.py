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
Important medical codes of a visit, read from the node-to-hyperedge
attention of a trained model: the importance of code ``v`` for visit ``e``
is the head-averaged attention weight of ``v`` in the update of ``e``.
"""

from dataclasses import dataclass
from typing import List
from typing import Mapping
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from ehrfusion.ehr_data import MedicalCode
from ehrfusion.errors import DataError
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.logger import get_logger
from ehrfusion.model import LayerState

LOGGER = get_logger()

Layer = Union[int, str]


@dataclass(frozen=True)
class RankedCode:
    code_id: str
    concept_name: str
    score: float


@dataclass(frozen=True)
class NodeImportanceReport:
    visit_id: str
    entries: Tuple[RankedCode, ...]
    layer: Layer
    variant: str

    def top(self, k: Optional[int] = None) -> List[str]:
        return [entry.code_id for entry in self.entries[:k]]


@dataclass(frozen=True)
class VariantComparison:
    visit_id: str
    k: int
    shared: Tuple[str, ...]
    only_first: Tuple[str, ...]
    only_second: Tuple[str, ...]
    variants: Tuple[str, str]

    @property
    def overlap(self) -> int:
        return len(self.shared)


def node_importance(
    state: LayerState,
    h: Hypergraph,
    registry: Mapping[str, MedicalCode],
    visit_id: str,
    layer: Layer = "final",
    variant: str = "full",
) -> NodeImportanceReport:
    """
    Rank the codes of one visit by attention

    :param state: the LayerState of a forward pass over ``h``
    :param h: the hypergraph
    :param registry: code_id -> MedicalCode, for concept names
    :param visit_id: the visit
    :param layer: ``"final"``, ``"mean"`` (averaged over layers) or a
        1-based layer index
    :param variant: the model variant, recorded in the report
    :return: codes ranked by descending score, ties broken by code_id
    :raises DataError: for an unknown visit or layer
    """
    edge = h.edge_index_of_visit().get(visit_id)
    if edge is None:
        raise DataError(f"unknown visit '{visit_id}'")
    if layer == "mean":
        rows = [state.edge_attention_row(i, edge) for i in range(1, state.n_layers + 1)]
        nodes = rows[0][0]
        scores = np.mean([weights for _, weights in rows], axis=0)
    else:
        index = state.n_layers if layer == "final" else int(layer)
        nodes, scores = state.edge_attention_row(index, edge)
    entries = [
        RankedCode(
            code_id=h.node_ids[v],
            concept_name=registry[h.node_ids[v]].concept_name,
            score=float(s),
        )
        for v, s in zip(nodes, scores)
    ]
    entries.sort(key=lambda entry: (-entry.score, entry.code_id))
    return NodeImportanceReport(
        visit_id=visit_id, entries=tuple(entries), layer=layer, variant=variant
    )


def compare_variants(
    first: NodeImportanceReport, second: NodeImportanceReport, k: int
) -> VariantComparison:
    """
    Shared and variant-specific codes among the top-k of two reports of
    one visit; ``k`` is clipped to the visit size
    """
    if first.visit_id != second.visit_id:
        raise DataError(f"reports are for different visits: {first.visit_id}, {second.visit_id}")
    k = min(k, len(first.entries), len(second.entries))
    top_first = first.top(k)
    top_second = second.top(k)
    return VariantComparison(
        visit_id=first.visit_id,
        k=k,
        shared=tuple(c for c in top_first if c in top_second),
        only_first=tuple(c for c in top_first if c not in top_second),
        only_second=tuple(c for c in top_second if c not in top_first),
        variants=(first.variant, second.variant),
    )


def format_report(
    report: NodeImportanceReport,
    note_text: Optional[str] = None,
    comparison: Optional[VariantComparison] = None,
    k: Optional[int] = None,
) -> str:
    """
    :param k: list only the top-k codes; the header then records ``k``, the
        visit size and the attention mass the listed codes hold
    """
    header = f"visit {report.visit_id} (variant {report.variant}, layer {report.layer})"
    entries = report.entries
    if k is not None and k < len(entries):
        entries = entries[:k]
        mass = sum(entry.score for entry in entries)
        header += f": top {k} of {len(report.entries)} codes, attention mass {mass:.6f}"
    lines = [header]
    for rank, entry in enumerate(entries, start=1):
        lines.append(f"  {rank:>3}. {entry.code_id}\t{entry.score:.6f}\t{entry.concept_name}")
    if comparison is not None:
        a, b = comparison.variants
        shared = ", ".join(comparison.shared) or "-"
        lines.append(f"  top-{comparison.k} shared by {a} and {b}: {shared}")
        lines.append(f"  only {a}: {', '.join(comparison.only_first) or '-'}")
        lines.append(f"  only {b}: {', '.join(comparison.only_second) or '-'}")
    if note_text:
        lines.append("  note:")
        lines.extend(f"    {line}" for line in note_text.splitlines())
    return "\n".join(lines) + "\n"
