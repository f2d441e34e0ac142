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
Training
========

Full-batch training of :py:class:`ehrfusion.model.HypergraphFusionNet`:

- AdamW (decoupled weight decay) on all parameters
- the loss covers the train-split visits only, while every hyperedge
  (unlabeled visits and self-loops included) propagates messages
- the epoch with the best validation AUROC is selected (ties go to the
  earliest epoch) and its parameters are restored; without a defined
  validation AUROC the validation loss decides
- after ``min_epochs``, training stops at the ``patience + 1``-th epoch in
  a row that fails to improve (``patience=0`` stops at the first one)

Suites run variants x seeds on a thread pool and write one directory per
run, e.g.

.. code-block::

    records = run_suite(ds, h, tables, model_cfg, train_cfg, variants=["full", "no_note"])

"""

import copy
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd
import torch
from marshmallow import Schema
from marshmallow import fields
from marshmallow import post_load

from ehrfusion.config import ModelConfig
from ehrfusion.config import SuiteConfig
from ehrfusion.config import TrainConfig
from ehrfusion.ehr_data import Dataset
from ehrfusion.embeddings import EmbeddingTable
from ehrfusion.embeddings import EmbeddingTables
from ehrfusion.errors import DataError
from ehrfusion.errors import MetricError
from ehrfusion.errors import NumericError
from ehrfusion.evaluation import auroc
from ehrfusion.evaluation import compute_metrics
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.logger import get_logger
from ehrfusion.model import HypergraphFusionNet
from ehrfusion.model import ModelInputs
from ehrfusion.model import bce_loss
from ehrfusion.model import prepare_inputs
from ehrfusion.model import save_checkpoint

LOGGER = get_logger()

SUITE_SUMMARY = "suite_summary.jsonl"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: Optional[float] = None


@dataclass
class RunRecord:
    variant: str
    seed: int
    hidden_dim: int
    n_layers: int
    d1: int
    d2: int
    epochs: List[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0
    val_metrics: Dict[str, float] = field(default_factory=dict)
    test_metrics: Dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def run_dir(self) -> Path:
        return Path("runs") / self.variant / f"seed-{self.seed}"


class EpochRecordSchema(Schema):
    epoch = fields.Int(required=True)
    train_loss = fields.Float(required=True)
    val_loss = fields.Float(required=True)
    val_auroc = fields.Float(allow_none=True, load_default=None)

    @post_load
    def make_obj(self, data, **kwargs) -> EpochRecord:
        return EpochRecord(**data)


class RunRecordSchema(Schema):
    variant = fields.Str(required=True)
    seed = fields.Int(required=True)
    hidden_dim = fields.Int(required=True)
    n_layers = fields.Int(required=True)
    d1 = fields.Int(required=True)
    d2 = fields.Int(required=True)
    epochs = fields.List(fields.Nested(EpochRecordSchema), load_default=list)
    selected_epoch = fields.Int(required=True)
    val_metrics = fields.Dict(keys=fields.Str(), values=fields.Float(), load_default=dict)
    test_metrics = fields.Dict(keys=fields.Str(), values=fields.Float(), load_default=dict)
    wall_clock = fields.Float(load_default=0.0)

    @post_load
    def make_obj(self, data, **kwargs) -> RunRecord:
        return RunRecord(**data)


def dump_records(records: Sequence[RunRecord], path: Union[Path, str]) -> Path:
    """Write one JSON record per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    schema = RunRecordSchema()
    with open(path, "w", encoding="utf-8", newline="\n") as dst:
        for record in records:
            dst.write(json.dumps(schema.dump(record), sort_keys=True) + "\n")
    return path


def load_records(path: Union[Path, str]) -> List[RunRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no checkpoint: missing suite summary {path}; run the train step first")
    schema = RunRecordSchema()
    records = []
    with open(path, "r", encoding="utf-8") as src:
        for line in src:
            if line.strip():
                records.append(schema.load(json.loads(line)))
    return records


def write_run_log(record: RunRecord, path: Union[Path, str]) -> Path:
    """
    Line records ``epoch, split, metric, value``: the train and validation
    loss and the validation AUROC of every epoch
    """
    rows = []
    for e in record.epochs:
        rows.append((e.epoch, "train", "loss", e.train_loss))
        rows.append((e.epoch, "val", "loss", e.val_loss))
        if e.val_auroc is not None:
            rows.append((e.epoch, "val", "auroc", e.val_auroc))
    for metric, value in record.test_metrics.items():
        rows.append((record.selected_epoch, "test", metric, value))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=["epoch", "split", "metric", "value"])
    frame.to_csv(path, sep="\t", index=False, float_format="%.10g")
    return path


@dataclass
class TrainingData:
    inputs: ModelInputs
    labels: torch.Tensor
    rows: Dict[str, torch.Tensor]


def prepare_training_data(
    ds: Dataset,
    h: Hypergraph,
    tables: EmbeddingTables,
    cfg: ModelConfig,
    dtype: torch.dtype = torch.float32,
) -> TrainingData:
    """
    Model inputs, the (n_visits, n_labels) label matrix in hypergraph visit
    order (zeros for unlabeled visits) and the visit rows of every split
    """
    inputs = prepare_inputs(h, tables.structural, tables.concept, tables.note, cfg, dtype=dtype)
    position = {visit_id: i for i, visit_id in enumerate(inputs.visit_ids)}
    labels = torch.zeros(len(inputs.visit_ids), cfg.n_labels, dtype=dtype)
    rows = {}
    for split in ("train", "val", "test"):
        visit_ids = ds.split_visit_ids(split)
        if not visit_ids:
            raise DataError(f"the {split} split is empty")
        index = torch.as_tensor([position[v] for v in visit_ids], dtype=torch.int64)
        labels[index] = torch.as_tensor(ds.label_matrix(visit_ids), dtype=dtype)
        rows[split] = index
    return TrainingData(inputs=inputs, labels=labels, rows=rows)


def _validation_auroc(probs: np.ndarray, labels: np.ndarray) -> Optional[float]:
    try:
        return auroc(probs, labels)
    except MetricError:
        return None


def train_one(
    ds: Dataset,
    h: Hypergraph,
    tables: EmbeddingTables,
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    restore_best: bool = True,
) -> Tuple[HypergraphFusionNet, RunRecord]:
    """
    Train one model on a split dataset

    :param ds: a dataset with a split assignment
    :param h: its hypergraph with self-loops
    :param tables: structural, concept and note tables covering ``h``
    :param cfg: the model config; its seed is replaced by ``seed``
    :param train_cfg: optimizer and stopping settings
    :param seed: the run seed
    :param restore_best: restore the selected epoch's parameters
    :return: the trained model and its RunRecord
    :raises NumericError: naming the epoch of a non-finite loss
    """
    started = time.perf_counter()
    cfg = cfg.copy(update=dict(seed=seed))
    dtype = torch.float64 if train_cfg.precision == "double" else torch.float32
    data = prepare_training_data(ds, h, tables, cfg, dtype=dtype)
    model = HypergraphFusionNet(cfg).to(dtype)
    if not cfg.freeze_features:
        model.attach_features(data.inputs.x0)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay
    )
    train_rows = data.rows["train"]
    val_rows = data.rows["val"]
    val_labels = data.labels[val_rows].numpy()

    record = RunRecord(
        variant=cfg.variant,
        seed=seed,
        hidden_dim=cfg.hidden_dim,
        n_layers=cfg.n_layers,
        d1=cfg.d1,
        d2=cfg.d2,
    )
    best_score = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    bad_epochs = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        model.train()
        optimizer.zero_grad()
        probs, _ = model(data.inputs)
        loss = bce_loss(probs[train_rows], data.labels[train_rows])
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        optimizer.step()

        model.eval()
        with torch.no_grad():
            probs, _ = model(data.inputs)
            val_loss = bce_loss(probs[val_rows], data.labels[val_rows]).item()
        val_auroc = _validation_auroc(probs[val_rows].numpy(), val_labels)
        record.epochs.append(EpochRecord(epoch, loss.item(), val_loss, val_auroc))

        score = val_auroc if val_auroc is not None else -val_loss
        if score > best_score:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
            record.selected_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if epoch % train_cfg.log_every == 0:
            LOGGER.debug(
                "{} seed {} epoch {}: train loss {:.4f}, val loss {:.4f}, val auroc {}",
                record.variant,
                seed,
                epoch,
                loss.item(),
                val_loss,
                "n/a" if val_auroc is None else f"{val_auroc:.4f}",
            )
        if epoch >= train_cfg.min_epochs and bad_epochs > train_cfg.patience:
            break

    if restore_best:
        model.load_state_dict(best_state)
    model.eval()
    with torch.no_grad():
        probs, _ = model(data.inputs)
    probs = probs.numpy()
    labels = data.labels.numpy()
    record.val_metrics = compute_metrics(probs[val_rows.numpy()], labels[val_rows.numpy()])
    test_rows = data.rows["test"].numpy()
    record.test_metrics = compute_metrics(probs[test_rows], labels[test_rows])
    record.wall_clock = time.perf_counter() - started
    LOGGER.info(
        "{} seed {}: {} epochs, selected {}, test auroc {:.4f}",
        record.variant,
        seed,
        len(record.epochs),
        record.selected_epoch,
        record.test_metrics["auroc"],
    )
    return model, record


def run_suite(
    ds: Dataset,
    h: Hypergraph,
    tables: EmbeddingTables,
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    variants: Sequence[str] = ("full",),
    workers: int = 1,
    output_dir: Optional[Union[Path, str]] = None,
) -> List[RunRecord]:
    """
    Train every variant with every seed of ``train_cfg``

    With an ``output_dir``, each run writes ``runs/<variant>/seed-<n>/``
    holding ``model.pt`` and ``run_log.tsv``.

    :return: RunRecords in variant-major, seed-minor order
    """
    jobs = [(variant, seed) for variant in variants for seed in train_cfg.seeds]
    LOGGER.info(
        "Running {} jobs over variants {} with {} workers", len(jobs), list(variants), workers
    )

    def run(job: Tuple[str, int]) -> RunRecord:
        variant, seed = job
        model, record = train_one(ds, h, tables, cfg.for_variant(variant), train_cfg, seed)
        if output_dir is not None:
            run_dir = Path(output_dir) / record.run_dir
            save_checkpoint(
                model,
                run_dir / "model.pt",
                extra={"variant": variant, "seed": seed, "selected_epoch": record.selected_epoch},
            )
            write_run_log(record, run_dir / "run_log.tsv")
        return record

    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, jobs))


def records_by_variant(records: Sequence[RunRecord]) -> Dict[str, List[Dict[str, float]]]:
    grouped: Dict[str, List[Dict[str, float]]] = {}
    for record in records:
        grouped.setdefault(record.variant, []).append(record.test_metrics)
    return grouped


def enumerate_grid(suite: SuiteConfig) -> List[Tuple[int, int]]:
    """All (hidden_dim, n_layers) pairs of the grid"""
    return [(d, n_layers) for d in suite.hidden_dims for n_layers in suite.layers]


def run_grid(
    ds: Dataset,
    h: Hypergraph,
    tables: EmbeddingTables,
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    suite: SuiteConfig,
    structural_for_ratio: Optional[Callable[[float], EmbeddingTable]] = None,
) -> pd.DataFrame:
    """
    Train the full model over the hidden width x depth grid and, when a
    structural table builder is given, over the structural:semantic width
    ratios (re-embedding the structural table for every ratio)

    :return: one row per configuration with mean and std of the
        validation and test AUROC over the seeds
    """
    configs = [
        ("dims", cfg.copy(update=dict(hidden_dim=d, n_layers=n_layers)), tables, None)
        for d, n_layers in enumerate_grid(suite)
    ]
    if structural_for_ratio is not None:
        for ratio in suite.ratios:
            structural = structural_for_ratio(ratio)
            configs.append(
                (
                    "ratio",
                    cfg.copy(update=dict(d1=structural.dim)),
                    tables.with_structural(structural),
                    ratio,
                )
            )
    rows = []
    for kind, grid_cfg, grid_tables, ratio in configs:
        records = run_suite(ds, h, grid_tables, grid_cfg, train_cfg, workers=suite.workers)
        val = [r.val_metrics["auroc"] for r in records]
        test = [r.test_metrics["auroc"] for r in records]
        rows.append(
            {
                "sweep": kind,
                "hidden_dim": grid_cfg.hidden_dim,
                "n_layers": grid_cfg.n_layers,
                "ratio": ratio,
                "d1": grid_cfg.d1,
                "d2": grid_cfg.d2,
                "val_auroc_mean": float(np.mean(val)),
                "val_auroc_std": float(np.std(val, ddof=1)) if len(val) > 1 else 0.0,
                "test_auroc_mean": float(np.mean(test)),
                "test_auroc_std": float(np.std(test, ddof=1)) if len(test) > 1 else 0.0,
            }
        )
        LOGGER.info(
            "Grid {} d={} L={} d1={}: val auroc {:.4f}",
            kind,
            grid_cfg.hidden_dim,
            grid_cfg.n_layers,
            grid_cfg.d1,
            rows[-1]["val_auroc_mean"],
        )
    return pd.DataFrame(rows)
