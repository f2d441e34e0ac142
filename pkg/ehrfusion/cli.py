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
Command line
============

One YAML config drives every stage; ``--set section.key=value`` overrides
single keys.  Each stage reads what the previous one wrote under
``output_dir``:

.. code-block::

    ehrfusion generate --config experiment.yaml
    ehrfusion embed --config experiment.yaml
    ehrfusion train --config experiment.yaml --set suite.ablation=true
    ehrfusion evaluate --config experiment.yaml
    ehrfusion explain --config experiment.yaml --visit V00042 --k 3

Exit codes: 0 success, 1 usage, 2 data, 3 provider, 4 numeric failure.
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np
import torch

from ehrfusion.config import EmbeddingConfig
from ehrfusion.config import ExperimentConfig
from ehrfusion.config import TaskKind
from ehrfusion.config import describe_config_keys
from ehrfusion.config import load_config
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import filter_note_sections
from ehrfusion.ehr_data import load_dataset
from ehrfusion.ehr_data import split_dataset
from ehrfusion.ehr_data import textualize_dataset
from ehrfusion.ehr_data import write_dataset
from ehrfusion.embeddings import EmbeddingCache
from ehrfusion.embeddings import EmbeddingTables
from ehrfusion.embeddings import build_provider
from ehrfusion.embeddings import embed_concepts
from ehrfusion.embeddings import embed_notes
from ehrfusion.embeddings import structural_embeddings
from ehrfusion.errors import DataError
from ehrfusion.errors import EhrFusionError
from ehrfusion.errors import NumericError
from ehrfusion.errors import UsageError
from ehrfusion.evaluation import aggregate
from ehrfusion.evaluation import per_label_metrics
from ehrfusion.gradient_check import gradient_check
from ehrfusion.gradient_check import tiny_instance
from ehrfusion.hypergraph import Hypergraph
from ehrfusion.hypergraph import add_self_loops
from ehrfusion.hypergraph import build_hypergraph
from ehrfusion.hypergraph import dump_hypergraph
from ehrfusion.interpret import compare_variants
from ehrfusion.interpret import format_report
from ehrfusion.interpret import node_importance
from ehrfusion.logger import configure_logging
from ehrfusion.logger import get_logger
from ehrfusion.model import HypergraphFusionNet
from ehrfusion.model import load_checkpoint
from ehrfusion.model import prepare_inputs
from ehrfusion.synthetic import generate_synthetic_dataset
from ehrfusion.training import SUITE_SUMMARY
from ehrfusion.training import dump_records
from ehrfusion.training import load_records
from ehrfusion.training import records_by_variant
from ehrfusion.training import run_grid
from ehrfusion.training import run_suite
from ehrfusion.version import __version__

LOGGER = get_logger()

EXPLAIN_DEFAULT_VISITS = 10


@dataclass(frozen=True)
class Layout:
    """Artifact locations under the output directory"""

    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings"

    @property
    def suite_summary(self) -> Path:
        return self.root / SUITE_SUMMARY

    @property
    def report(self) -> Path:
        return self.root / "report"

    @property
    def explain(self) -> Path:
        return self.root / "explain"

    @property
    def grid(self) -> Path:
        return self.root / "grid"

    def checkpoint(self, variant: str, seed: int) -> Path:
        return self.root / "runs" / variant / f"seed-{seed}" / "model.pt"


def load_experiment_dataset(cfg: ExperimentConfig, split: bool = True) -> Dataset:
    """
    Load the configured dataset files (or the generated ones under
    ``output_dir/data``) and assign the split
    """
    layout = Layout(cfg.output_dir)
    records = cfg.data.records_path or layout.data / "records.tsv"
    codes = cfg.data.codes_path or layout.data / "codes.tsv"
    notes = cfg.data.notes_path
    if notes is None and cfg.data.records_path is None and (layout.data / "notes.tsv").is_file():
        notes = layout.data / "notes.tsv"
    for path in (records, codes):
        if not Path(path).is_file():
            raise DataError(f"missing dataset file {path}; run the generate step first")
    ds = load_dataset(records, codes, notes_path=notes, labels_path=cfg.data.labels_path)
    if cfg.data.textualize_missing_notes:
        ds = textualize_dataset(ds)
    if split:
        ds = split_dataset(ds, cfg.data.split_seed, stratify=cfg.data.stratify)
    return ds


def experiment_hypergraph(ds: Dataset) -> Hypergraph:
    return add_self_loops(build_hypergraph(ds))


def cmd_generate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if cfg.synthetic is None:
        raise UsageError("generate needs a 'synthetic' section in the config")
    spec = cfg.synthetic
    ds = generate_synthetic_dataset(
        spec.n_visits,
        spec.n_codes,
        task_kind=spec.task_kind,
        signal_spec=spec.signal,
        seed=spec.seed,
    )
    paths = write_dataset(ds, Layout(cfg.output_dir).data)
    rate = float(np.mean([v.label for v in ds.visits]))
    print(
        f"{len(ds.visits)} visits, {len(ds.codes)} codes, {ds.task_kind.value}, "
        f"positive rate {rate:.3f}"
    )
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_embed(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    layout = Layout(cfg.output_dir)
    ds = load_experiment_dataset(cfg, split=False)
    h = experiment_hypergraph(ds)
    dump_hypergraph(h, layout.embeddings / "hypergraph.tsv")
    structural = structural_embeddings(h, cfg.embedding, cfg.d1)
    provider = build_provider(cfg.provider)
    cache = EmbeddingCache(cfg.provider.cache_path or layout.embeddings / "cache.tsv")
    concept = embed_concepts(provider, ds.codes, cache=cache)
    note = embed_notes(
        provider, ds, cfg.data.blocked_sections, cache=cache, max_chars=cfg.provider.max_chars
    )
    tables = EmbeddingTables(structural=structural, concept=concept, note=note)
    tables.dump(layout.embeddings)
    print(
        f"tables d1={tables.d1} d2={tables.d2}: {len(structural)} structural, "
        f"{len(concept)} concept, {len(note)} note rows; provider calls: {provider.calls}"
    )
    return 0


def _model_config(cfg: ExperimentConfig, ds: Dataset, tables: EmbeddingTables):
    model_cfg = cfg.resolved_model_config(ds.task_kind)
    return model_cfg.copy(update=dict(d1=tables.d1, d2=tables.d2))


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    layout = Layout(cfg.output_dir)
    ds = load_experiment_dataset(cfg)
    h = experiment_hypergraph(ds)
    tables = EmbeddingTables.load(layout.embeddings)
    records = run_suite(
        ds,
        h,
        tables,
        _model_config(cfg, ds, tables),
        cfg.train,
        variants=cfg.suite.variants,
        workers=cfg.suite.workers,
        output_dir=layout.root,
    )
    dump_records(records, layout.suite_summary)
    print(f"{len(records)} runs written to {layout.suite_summary}")
    return 0


def _forward_probs(model: HypergraphFusionNet, h: Hypergraph, tables: EmbeddingTables):
    dtype = model.input_projection.weight.dtype
    inputs = prepare_inputs(
        h, tables.structural, tables.concept, tables.note, model.cfg, dtype=dtype
    )
    with torch.no_grad():
        probs, state = model(inputs)
    return probs.numpy(), state, inputs


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    layout = Layout(cfg.output_dir)
    records = load_records(layout.suite_summary)
    if not records:
        raise DataError(f"no checkpoint: {layout.suite_summary} holds no runs")
    report = aggregate(records_by_variant(records))
    report.write(layout.report)
    print(report.format_table(), end="")

    first = records[0]
    checkpoint = layout.checkpoint(first.variant, first.seed)
    ds = load_experiment_dataset(cfg)
    if ds.task_kind is TaskKind.MULTILABEL and checkpoint.is_file():
        model, _ = load_checkpoint(checkpoint)
        h = experiment_hypergraph(ds)
        probs, _, inputs = _forward_probs(model, h, EmbeddingTables.load(layout.embeddings))
        position = {v: i for i, v in enumerate(inputs.visit_ids)}
        test_ids = ds.split_visit_ids("test")
        frame = per_label_metrics(probs[[position[v] for v in test_ids]], ds.label_matrix(test_ids))
        frame.to_csv(layout.report / "per_label.tsv", sep="\t", index=False, float_format="%.10g")
    return 0


def _default_explain_visits(ds: Dataset) -> List[str]:
    positives = [v for v in ds.split_visit_ids("test") if any(ds.visit(v).label)]
    return positives[:EXPLAIN_DEFAULT_VISITS]


def cmd_explain(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    layout = Layout(cfg.output_dir)
    seed = cfg.train.base_seed
    checkpoint = layout.checkpoint("full", seed)
    if not checkpoint.is_file():
        raise DataError(f"no checkpoint at {checkpoint}; run the train step first")
    ds = load_experiment_dataset(cfg)
    h = experiment_hypergraph(ds)
    tables = EmbeddingTables.load(layout.embeddings)
    k = args.k if args.k is not None else cfg.explain.k
    layer = args.layer if args.layer is not None else cfg.explain.layer
    if isinstance(layer, str) and layer.isdigit():
        layer = int(layer)

    model, _ = load_checkpoint(checkpoint)
    _, state, _ = _forward_probs(model, h, tables)
    other_state = None
    other_checkpoint = layout.checkpoint(cfg.explain.compare_with, seed)
    if other_checkpoint.is_file():
        other, _ = load_checkpoint(other_checkpoint)
        _, other_state, _ = _forward_probs(other, h, tables)
    else:
        LOGGER.warning(
            "No {} checkpoint at {}, skipping the comparison",
            cfg.explain.compare_with,
            other_checkpoint,
        )

    visit_ids = args.visit or _default_explain_visits(ds)
    layout.explain.mkdir(parents=True, exist_ok=True)
    for visit_id in visit_ids:
        report = node_importance(state, h, ds.codes, visit_id, layer=layer, variant="full")
        comparison = None
        if other_state is not None:
            other_report = node_importance(
                other_state, h, ds.codes, visit_id, layer=layer, variant=cfg.explain.compare_with
            )
            comparison = compare_variants(report, other_report, k)
        note = filter_note_sections(ds.visit(visit_id).note_text, cfg.data.blocked_sections)
        # the file keeps the full ranking, the console shows the top-k
        text = format_report(report, note_text=note, comparison=comparison)
        (layout.explain / f"{visit_id}.txt").write_text(text, encoding="utf-8")
        print(format_report(report, note_text=note, comparison=comparison, k=k), end="")
    return 0


def cmd_gridsearch(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    layout = Layout(cfg.output_dir)
    ds = load_experiment_dataset(cfg)
    h = experiment_hypergraph(ds)
    tables = EmbeddingTables.load(layout.embeddings)

    def structural_for_ratio(ratio: float):
        embedding = EmbeddingConfig(**{**cfg.embedding.dict(), "d1": None, "ratio": ratio})
        return structural_embeddings(h, embedding, embedding.resolve_d1(tables.d2))

    frame = run_grid(
        ds,
        h,
        tables,
        _model_config(cfg, ds, tables),
        cfg.train,
        cfg.suite,
        structural_for_ratio=None if args.skip_ratios else structural_for_ratio,
    )
    layout.grid.mkdir(parents=True, exist_ok=True)
    path = layout.grid / "grid_summary.tsv"
    frame.to_csv(path, sep="\t", index=False, float_format="%.10g")
    print(frame.to_string(index=False))
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    failed = []
    for n_layers in args.layers:
        model, inputs, labels = tiny_instance(n_layers=n_layers, seed=args.seed)
        result = gradient_check(model, inputs, labels)
        status = "ok" if result.passed() else "FAILED"
        print(
            f"L={n_layers}: {result.n_checked} entries, "
            f"max relative error {result.max_relative_error:.3e} {status}"
        )
        if not result.passed():
            failed.append(n_layers)
    if failed:
        raise NumericError(f"gradient check failed for layers {failed}")
    return 0


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace], int]] = {
    "generate": cmd_generate,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "gridsearch": cmd_gridsearch,
    "gradcheck": cmd_gradcheck,
}


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def config_keys_epilog() -> str:
    lines = ["configuration keys (override with --set section.key=value):"]
    lines.extend(f"  {line}" for line in describe_config_keys())
    return "\n".join(lines)


def create_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config key; repeatable",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = ArgumentParser(
        prog="ehrfusion",
        description="Multimodal EHR hypergraph fusion experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=config_keys_epilog(),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True
    helps = {
        "generate": "write a synthetic dataset",
        "embed": "build the hypergraph and the structural, concept and note tables",
        "train": "train the configured variants over all seeds",
        "evaluate": "aggregate the runs into a metrics report",
        "explain": "rank the important codes of visits by attention",
        "gridsearch": "sweep hidden width x depth and the structural:semantic ratio",
        "gradcheck": "finite-difference gradient check on a tiny instance",
    }
    subparsers = {}
    for name, text in helps.items():
        subparsers[name] = commands.add_parser(
            name,
            parents=[common],
            help=text,
            description=text,
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog=config_keys_epilog(),
        )
    subparsers["explain"].add_argument(
        "--visit", action="append", help="visit_id to explain; repeatable"
    )
    subparsers["explain"].add_argument(
        "--k", type=int, help="top-k codes compared between variants"
    )
    subparsers["explain"].add_argument("--layer", help="final, mean or a 1-based layer index")
    subparsers["gridsearch"].add_argument(
        "--skip-ratios", action="store_true", help="only sweep hidden width x depth"
    )
    subparsers["gradcheck"].add_argument(
        "--layers", type=int, nargs="+", default=[1, 2], help="layer counts to check"
    )
    subparsers["gradcheck"].add_argument("--seed", type=int, default=0, help="instance seed")
    return parser


def log_level(cfg: Optional[ExperimentConfig], args: argparse.Namespace) -> str:
    if args.verbose:
        return "DEBUG"
    if args.quiet:
        return "WARNING"
    return cfg.log_level if cfg is not None else "INFO"


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = create_parser().parse_args(argv)
        cfg = load_config(args.config, args.overrides)
        configure_logging(log_level(cfg, args))
        return COMMANDS[args.command](cfg, args)
    except EhrFusionError as error:
        LOGGER.error("{}", error)
        print(f"error: {error}", file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
