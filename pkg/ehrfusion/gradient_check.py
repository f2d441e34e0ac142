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
Finite-difference gradient check
================================

Compares the autograd gradient of ``bce_loss(classify(forward(...)))``
against central differences, parameter by parameter, on a tiny instance:
codes A, B and C, visits ``{A, B}`` and ``{B, C}``, ``d = 8``, two heads, in
double precision.

.. code-block::

    model, inputs, labels = tiny_instance(n_layers=2)
    result = gradient_check(model, inputs, labels)
    assert result.max_relative_error < 1e-4

"""

from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import Tuple

import numpy as np
import torch
from torch import Tensor

from ehrfusion.config import ModelConfig
from ehrfusion.config import TaskKind
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import MedicalCode
from ehrfusion.ehr_data import VisitRecord
from ehrfusion.embeddings import EmbeddingTable
from ehrfusion.embeddings import TableKind
from ehrfusion.errors import NumericError
from ehrfusion.hypergraph import add_self_loops
from ehrfusion.hypergraph import build_hypergraph
from ehrfusion.logger import get_logger
from ehrfusion.model import HypergraphFusionNet
from ehrfusion.model import ModelInputs
from ehrfusion.model import bce_loss
from ehrfusion.model import prepare_inputs

LOGGER = get_logger()

GRADIENT_TOLERANCE = 1e-4


@dataclass
class GradientCheckResult:
    max_relative_error: float
    per_parameter: Dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tolerance: float = GRADIENT_TOLERANCE) -> bool:
        return self.max_relative_error < tolerance


def tiny_dataset() -> Dataset:
    codes = {
        "A": MedicalCode("A", "ICD9", "chest pain"),
        "B": MedicalCode("B", "ICD9", "heart failure"),
        "C": MedicalCode("C", "NDC", "metformin"),
    }
    visits = (
        VisitRecord("v1", ("A", "B"), "Hospital Course: chest pain resolved", (1,)),
        VisitRecord("v2", ("B", "C"), "Hospital Course: glucose controlled", (0,)),
    )
    return Dataset(codes=codes, visits=visits, task_kind=TaskKind.BINARY)


def tiny_instance(
    n_layers: int = 1, seed: int = 0, **flags
) -> Tuple[HypergraphFusionNet, ModelInputs, Tensor]:
    """
    The canonical gradient check instance: 3 codes, 2 visits, ``d = 8``,
    two heads, ``d1 = d2 = 4``, random tables drawn from ``seed``

    :param flags: extra ModelConfig fields, e.g. ``use_note_semantics=False``
    :return: a double precision model, its inputs and the (2, 1) labels
    """
    ds = tiny_dataset()
    h = add_self_loops(build_hypergraph(ds))
    cfg = ModelConfig(hidden_dim=8, n_layers=n_layers, n_heads=2, d1=4, d2=4, seed=seed, **flags)
    rng = np.random.default_rng(seed)
    codes = tuple(sorted(ds.codes))
    S = EmbeddingTable(TableKind.STRUCTURAL, 4, codes, rng.standard_normal((3, 4)))
    C = EmbeddingTable(TableKind.CONCEPT, 4, codes, rng.standard_normal((3, 4)))
    N = EmbeddingTable(TableKind.NOTE, 4, ("v1", "v2"), rng.standard_normal((2, 4)))
    inputs = prepare_inputs(h, S, C, N, cfg, dtype=torch.float64)
    model = HypergraphFusionNet(cfg).to(torch.float64)
    labels = torch.as_tensor(ds.label_matrix(h.visit_ids), dtype=torch.float64)
    return model, inputs, labels


def gradient_check(
    model: HypergraphFusionNet,
    inputs: ModelInputs,
    labels: Tensor,
    eps: float = 1e-5,
    max_entries: int = 1000,
    seed: int = 0,
) -> GradientCheckResult:
    """
    Central finite differences against autograd for every parameter tensor

    The relative error of one entry is ``|a - n| / max(|a| + |n|, 1e-6)``;
    tensors larger than ``max_entries`` are checked on a seeded sample.

    :raises NumericError: on a single precision instance or a non-finite
        gradient
    """
    if inputs.x0.dtype != torch.float64:
        raise NumericError("gradient checks need double precision inputs")

    def loss_value() -> Tensor:
        probs, _ = model(inputs)
        return bce_loss(probs, labels)

    model.zero_grad()
    loss_value().backward()
    rng = np.random.default_rng(seed)
    result = GradientCheckResult(max_relative_error=0.0)
    for name, param in model.named_parameters():
        analytic = (
            param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
        ).view(-1)
        if not torch.all(torch.isfinite(analytic)):
            raise NumericError(f"non-finite gradient for {name}")
        flat = param.data.view(-1)
        n = flat.numel()
        entries = range(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        worst = 0.0
        with torch.no_grad():
            for i in entries:
                original = flat[i].item()
                flat[i] = original + eps
                plus = loss_value().item()
                flat[i] = original - eps
                minus = loss_value().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                a = analytic[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
                result.n_checked += 1
        result.per_parameter[name] = worst
        result.max_relative_error = max(result.max_relative_error, worst)
    LOGGER.info(
        "Gradient check: {} entries, max relative error {:.3e}",
        result.n_checked,
        result.max_relative_error,
    )
    return result
