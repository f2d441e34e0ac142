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
Common test fixtures

pytest --fixtures
"""

from pathlib import Path
from typing import Dict

import pytest

from ehrfusion.config import EmbeddingConfig
from ehrfusion.config import ModelConfig
from ehrfusion.config import SignalSpec
from ehrfusion.config import TrainConfig
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import split_dataset
from ehrfusion.embeddings import EmbeddingTables
from ehrfusion.embeddings import FallbackProvider
from ehrfusion.embeddings import embed_concepts
from ehrfusion.embeddings import embed_notes
from ehrfusion.embeddings import structural_embeddings
from ehrfusion.gradient_check import tiny_dataset
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.hypergraph import add_self_loops
from ehrfusion.hypergraph import build_hypergraph
from ehrfusion.synthetic import generate_synthetic_dataset


@pytest.fixture
def tiny_ds() -> Dataset:
    """Codes A, B, C; visits v1 = {A, B} (positive) and v2 = {B, C}"""
    return tiny_dataset()


@pytest.fixture
def tiny_hypergraph(tiny_ds) -> Hypergraph:
    return add_self_loops(build_hypergraph(tiny_ds))


@pytest.fixture
def dataset_files(tmp_path) -> Dict[str, Path]:
    """A codes, records and notes file; v3 is unlabeled and code D is unused"""
    files = {
        "codes": tmp_path / "codes.tsv",
        "records": tmp_path / "records.tsv",
        "notes": tmp_path / "notes.tsv",
    }
    files["codes"].write_text(
        "A\tICD9\tchest pain\n"
        "B\tICD9\theart failure\n"
        "C\tNDC\tmetformin\n"
        "D\tCPT\tchest x-ray\n",
        encoding="utf-8",
    )
    files["records"].write_text(
        "v1\t1\tB,A\n"
        "v2\t0\tB,C,B\n"
        "v3\t-\tC\n",
        encoding="utf-8",
    )
    files["notes"].write_text(
        "v1\tAdmission Date: 2101-3-4\\nHistory: chest pain\n",
        encoding="utf-8",
    )
    return files


@pytest.fixture(scope="module")
def structure_ds() -> Dataset:
    """200 split visits over 30 codes, labels planted through code-pair motifs"""
    ds = generate_synthetic_dataset(
        200, 30, signal_spec=SignalSpec.preset("structure"), seed=0
    )
    return split_dataset(ds, seed=0, stratify=True)


@pytest.fixture(scope="module")
def structure_hypergraph(structure_ds) -> Hypergraph:
    return add_self_loops(build_hypergraph(structure_ds))


@pytest.fixture(scope="module")
def structure_tables(structure_ds, structure_hypergraph) -> EmbeddingTables:
    provider = FallbackProvider(8, seed=0)
    cfg = EmbeddingConfig(walks_per_node=2, walk_length=6, epochs=1)
    return EmbeddingTables(
        structural=structural_embeddings(structure_hypergraph, cfg, 8),
        concept=embed_concepts(provider, structure_ds.codes),
        note=embed_notes(provider, structure_ds, ["Admission Date", "Discharge Date"]),
    )


@pytest.fixture
def small_model_cfg() -> ModelConfig:
    return ModelConfig(hidden_dim=8, n_layers=1, n_heads=2, d1=8, d2=8)


@pytest.fixture
def short_train_cfg() -> TrainConfig:
    return TrainConfig(learning_rate=1e-2, max_epochs=4, patience=4, n_seeds=2)
