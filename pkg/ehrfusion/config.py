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
Configuration
=============

Pydantic models for every configurable part of the pipeline, e.g.

.. code-block::

    from ehrfusion.config import load_config

    cfg = load_config("experiment.yaml", overrides=["model.hidden_dim=72"])
    cfg.model.hidden_dim  # -> 72

A single YAML file drives all the command line stages; each top-level
section maps to one of the models below.
"""

from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Type
from typing import Union

import yaml
from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError
from pydantic import root_validator
from pydantic import validator

from ehrfusion.errors import UsageError
from ehrfusion.logger import get_logger

LOGGER = get_logger()

N_PHENOTYPES = 25

HIDDEN_DIM_GRID = (24, 48, 72, 96)
LAYER_GRID = (1, 2, 3, 4)
RATIO_GRID = (0.5, 0.67, 1.0, 1.5, 2.0)

DEFAULT_BLOCKED_SECTIONS = [
    "Admission Date",
    "Discharge Date",
    "Date of Birth",
    "Service",
    "Attending",
    "Sex",
    "JOB#",
    "Unit No",
]


class TaskKind(str, Enum):
    BINARY = "binary"
    MULTILABEL = "multilabel-25"

    @property
    def n_labels(self) -> int:
        return 1 if self is TaskKind.BINARY else N_PHENOTYPES


# Variant name -> (use_concept_semantics, use_note_semantics)
VARIANTS: Dict[str, Tuple[bool, bool]] = {
    "full": (True, True),
    "no_concept": (False, True),
    "no_note": (True, False),
    "backbone": (False, False),
}


class SignalSpec(BaseModel):
    """
    Planted label signal for synthetic datasets

    A positive label is planted through one of three channels, chosen with
    probability proportional to the channel weights:

    - structure: a motif pair of codes co-occurs in the visit
    - concept: the visit holds a rare "risk family" code whose concept
      name shares a condition token with the rest of its family
    - note: a trigger phrase is written into the visit note
    """

    structure_weight: float = Field(1.0, ge=0, description="weight of the code-pair motif channel")
    concept_weight: float = Field(0.0, ge=0, description="weight of the risk-family concept channel")
    note_weight: float = Field(0.0, ge=0, description="weight of the note trigger channel")
    base_rate: float = Field(0.3, gt=0, lt=1, description="probability that a label is positive")
    n_clusters: int = Field(5, ge=1, description="latent disease clusters of co-occurring codes")
    codes_per_visit_min: int = Field(3, ge=1, description="fewest background codes per visit")
    codes_per_visit_max: int = Field(8, ge=1, description="most background codes per visit")
    cluster_affinity: float = Field(0.8, ge=0, le=1, description="chance a background code comes from the visit cluster")
    motif_pairs_per_label: int = Field(3, ge=1, description="code-pair motifs planted per label, fewer when the registry is small")
    risk_codes_per_label: int = Field(40, ge=1, description="risk-family codes planted per label, fewer when the registry is small")
    decoy_rate: float = Field(0.3, ge=0, le=1, description="chance a negative visit holds one half of a motif")

    class Config:
        frozen = True

    @root_validator(skip_on_failure=True)
    def signal_validator(cls, values):
        weights = [values["structure_weight"], values["concept_weight"], values["note_weight"]]
        if sum(weights) <= 0:
            raise ValueError("at least one signal channel weight must be positive")
        if values["codes_per_visit_min"] > values["codes_per_visit_max"]:
            raise ValueError("codes_per_visit_min must be <= codes_per_visit_max")
        return values

    @property
    def uses_structure(self) -> bool:
        return self.structure_weight > 0

    @property
    def uses_concept(self) -> bool:
        return self.concept_weight > 0

    @property
    def uses_note(self) -> bool:
        return self.note_weight > 0

    @classmethod
    def preset(cls, name: str) -> "SignalSpec":
        presets = {
            "structure": dict(structure_weight=1.0, concept_weight=0.0, note_weight=0.0),
            "semantics": dict(structure_weight=0.0, concept_weight=0.0, note_weight=1.0),
            "mixed": dict(structure_weight=1.0, concept_weight=1.0, note_weight=1.0),
        }
        if name not in presets:
            raise ValueError(f"unknown signal preset '{name}', expected one of {sorted(presets)}")
        return cls(**presets[name])


class SyntheticConfig(BaseModel):
    n_visits: int = Field(2000, ge=20, description="number of synthetic visits")
    n_codes: int = Field(200, ge=10, description="size of the synthetic code registry")
    task_kind: TaskKind = Field(TaskKind.BINARY, description="binary or multilabel-25")
    signal: SignalSpec = Field(
        default_factory=lambda: SignalSpec.preset("mixed"),
        description="a preset name (structure, semantics, mixed) or a signal mapping",
    )
    seed: int = Field(0, description="generator seed")

    @validator("signal", pre=True)
    def validate_signal(cls, value):
        if isinstance(value, str):
            return SignalSpec.preset(value)
        return value


class DataConfig(BaseModel):
    records_path: Optional[Path] = Field(None, description="visit records file; defaults to <output_dir>/data/records.tsv")
    codes_path: Optional[Path] = Field(None, description="code registry file; defaults to <output_dir>/data/codes.tsv")
    notes_path: Optional[Path] = Field(None, description="optional notes file")
    labels_path: Optional[Path] = Field(None, description="optional labels file overriding record labels")
    blocked_sections: List[str] = Field(
        default_factory=lambda: list(DEFAULT_BLOCKED_SECTIONS),
        description="note section headers removed before embedding",
    )
    textualize_missing_notes: bool = Field(False, description="write a textualized visit as the note when a visit has none")
    split_seed: int = Field(0, description="seed of the 7:1:2 train/val/test shuffle")
    stratify: bool = Field(False, description="stratify the split by label")


class ProviderConfig(BaseModel):
    kind: str = Field("fallback", description="fallback (offline hashing) or remote (HTTP endpoint)")
    dim: int = Field(32, ge=1, description="semantic embedding width d2")
    seed: int = Field(0, description="seed of token hashing and of the remote projection")
    endpoint: Optional[str] = Field(None, description="remote embeddings URL")
    model: Optional[str] = Field(None, description="remote embedding model name")
    raw_dim: Optional[int] = Field(None, ge=1, description="expected remote vector width before projection")
    api_key_env: str = Field("EMBEDDING_API_KEY", description="environment variable holding the remote API key")
    batch_size: int = Field(64, ge=1, description="texts per remote request")
    timeout: float = Field(30.0, gt=0, description="remote request timeout in seconds")
    max_in_flight: int = Field(4, ge=1, description="concurrent remote requests")
    max_retries: int = Field(3, ge=0, description="retries per failed remote batch")
    backoff: float = Field(
        1.0, ge=0, description="factor of the exponential retry backoff in seconds"
    )
    max_chars: int = Field(8000, ge=1, description="texts longer than this are truncated")
    cache_path: Optional[Path] = Field(None, description="embedding cache; defaults to <output_dir>/embeddings/cache.tsv")

    @validator("kind")
    def validate_kind(cls, value):
        if value not in ("fallback", "remote"):
            raise ValueError("provider kind must be 'fallback' or 'remote'")
        return value

    @root_validator(skip_on_failure=True)
    def remote_validator(cls, values):
        if values["kind"] == "remote" and not (values.get("endpoint") and values.get("model")):
            raise ValueError("a remote provider needs an endpoint and a model")
        return values


class EmbeddingConfig(BaseModel):
    d1: Optional[int] = Field(None, ge=2, description="structural embedding width; exclusive with ratio")
    ratio: Optional[float] = Field(None, gt=0, description="structural:semantic width ratio, d1 = round(ratio * d2)")
    substrate: str = Field("clique", description="random walk substrate: clique or star expansion")
    walks_per_node: int = Field(10, ge=1, description="random walks started from each node")
    walk_length: int = Field(20, ge=2, description="nodes per random walk")
    window: int = Field(5, ge=1, description="skip-gram context window")
    negatives: int = Field(5, ge=1, description="negative samples per positive pair")
    epochs: int = Field(5, ge=1, description="skip-gram epochs")
    learning_rate: float = Field(0.01, gt=0, description="skip-gram learning rate")
    batch_size: int = Field(1024, ge=1, description="skip-gram pairs per step")
    seed: int = Field(0, description="seed of walks and skip-gram")

    @validator("substrate")
    def validate_substrate(cls, value):
        if value not in ("clique", "star"):
            raise ValueError("substrate must be 'clique' or 'star'")
        return value

    @root_validator(skip_on_failure=True)
    def width_validator(cls, values):
        if values.get("d1") is not None and values.get("ratio") is not None:
            raise ValueError("set either embedding.d1 or embedding.ratio, not both")
        return values

    def resolve_d1(self, d2: int) -> int:
        if self.ratio is not None:
            return max(2, int(round(self.ratio * d2)))
        if self.d1 is not None:
            return self.d1
        return d2


class ModelConfig(BaseModel):
    hidden_dim: int = Field(48, ge=1, description="hidden width d")
    n_layers: int = Field(2, ge=1, le=4, description="message passing layers L")
    n_heads: int = Field(4, ge=1, description="attention heads h")
    d1: int = Field(32, ge=2, description="structural width (set from the embedding section)")
    d2: int = Field(32, ge=1, description="semantic width (set from the provider section)")
    task_kind: TaskKind = Field(TaskKind.BINARY, description="binary or multilabel-25")
    use_concept_semantics: bool = Field(True, description="infuse concept-name embeddings")
    use_note_semantics: bool = Field(True, description="infuse note embeddings into hyperedge updates")
    residual: bool = Field(False, description="residual connections in message passing")
    layer_norm: bool = Field(False, description="LayerNorm after each message passing step")
    freeze_features: bool = Field(True, description="keep [S;C] node inputs fixed during training")
    seed: int = Field(0, description="parameter initialization seed")

    class Config:
        frozen = True

    @root_validator(skip_on_failure=True)
    def heads_validator(cls, values):
        if values["hidden_dim"] % values["n_heads"]:
            raise ValueError("hidden_dim must be divisible by n_heads")
        return values

    @property
    def n_labels(self) -> int:
        return self.task_kind.n_labels

    @property
    def variant(self) -> str:
        flags = (self.use_concept_semantics, self.use_note_semantics)
        for name, variant_flags in VARIANTS.items():
            if variant_flags == flags:
                return name
        raise AssertionError("unreachable")

    def for_variant(self, variant: str) -> "ModelConfig":
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant '{variant}', expected one of {list(VARIANTS)}")
        use_concept, use_note = VARIANTS[variant]
        return self.copy(update=dict(use_concept_semantics=use_concept, use_note_semantics=use_note))


class TrainConfig(BaseModel):
    learning_rate: float = Field(1e-3, gt=0, description="Adam learning rate")
    weight_decay: float = Field(1e-3, ge=0, description="decoupled weight decay")
    max_epochs: int = Field(200, ge=1, description="maximum number of epochs")
    patience: int = Field(20, ge=0, description="epochs without validation AUROC gain before stopping")
    min_epochs: int = Field(50, ge=0, description="epochs trained before early stopping may end a run")
    n_seeds: int = Field(5, ge=1, description="runs per configuration")
    base_seed: int = Field(0, description="first seed; runs use base_seed .. base_seed + n_seeds - 1")
    precision: str = Field("single", description="single or double")
    log_every: int = Field(10, ge=1, description="epochs between progress log lines")

    class Config:
        frozen = True

    @validator("precision")
    def validate_precision(cls, value):
        if value not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        return value

    @root_validator(skip_on_failure=True)
    def patience_validator(cls, values):
        if values["patience"] > values["max_epochs"]:
            raise ValueError("patience must be <= max_epochs")
        return values

    @property
    def seeds(self) -> List[int]:
        return list(range(self.base_seed, self.base_seed + self.n_seeds))


class SuiteConfig(BaseModel):
    ablation: bool = Field(False, description="run full, no_concept and no_note variants")
    include_backbone: bool = Field(False, description="also run the backbone (both semantics off)")
    hidden_dims: List[int] = Field(list(HIDDEN_DIM_GRID), description="grid of hidden widths")
    layers: List[int] = Field(list(LAYER_GRID), description="grid of layer counts")
    ratios: List[float] = Field(list(RATIO_GRID), description="grid of structural:semantic ratios")
    workers: int = Field(1, ge=1, description="concurrent training runs")

    @property
    def variants(self) -> List[str]:
        variants = ["full", "no_concept", "no_note"] if self.ablation else ["full"]
        if self.include_backbone:
            variants.append("backbone")
        return variants


class ExplainConfig(BaseModel):
    layer: Union[int, str] = Field("final", description="attention layer: final, mean or a 1-based index")
    k: int = Field(5, ge=1, description="top-k codes compared between variants")
    compare_with: str = Field("backbone", description="variant compared against the full model")

    @validator("layer")
    def validate_layer(cls, value):
        if isinstance(value, str) and value not in ("final", "mean"):
            if value.isdigit():
                return int(value)
            raise ValueError("layer must be 'final', 'mean' or a layer index")
        return value


class ExperimentConfig(BaseModel):
    output_dir: Path = Field(Path("experiment"), description="root directory of all artifacts")
    log_level: str = Field("INFO", description="log level of the command line")
    data: DataConfig = Field(default_factory=DataConfig)
    synthetic: Optional[SyntheticConfig] = Field(None, description="synthetic dataset spec used by generate")
    provider: ProviderConfig = Field(default_factory=ProviderConfig)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)

    @property
    def d1(self) -> int:
        return self.embedding.resolve_d1(self.provider.dim)

    @property
    def d2(self) -> int:
        return self.provider.dim

    def resolved_model_config(self, task_kind: TaskKind) -> ModelConfig:
        """The model section with widths from the embedding tables"""
        return self.model.copy(update=dict(d1=self.d1, d2=self.d2, task_kind=task_kind))


def parse_override(override: str) -> Tuple[List[str], Any]:
    """
    Parse a ``section.key=value`` override; the value is read as a
    YAML scalar, so ``true``, ``3`` and ``0.5`` keep their types.
    """
    if "=" not in override:
        raise UsageError(f"override '{override}' is not of the form section.key=value")
    key, raw_value = override.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise UsageError(f"override '{override}' has an empty key")
    return keys, yaml.safe_load(raw_value)


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for override in overrides:
        keys, value = parse_override(override)
        node = data
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = {}
                node[key] = child
            if not isinstance(child, dict):
                raise UsageError(f"override '{override}' descends into a scalar key '{key}'")
            node = child
        node[keys[-1]] = value
    return data


def load_config(
    config_file: Optional[Union[Path, str]] = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    """
    Read an experiment YAML file and apply ``section.key=value`` overrides

    :param config_file: a YAML file; when None, only the defaults and the
        overrides are used
    :param overrides: a sequence of ``section.key=value`` strings
    :return: a validated ExperimentConfig
    :raises UsageError: when the file is missing or does not validate
    """
    data: Dict[str, Any] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        LOGGER.info("Reading config: {}", path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a mapping of sections")
    data = apply_overrides(data, overrides)
    try:
        return ExperimentConfig.parse_obj(data)
    except ValidationError as error:
        raise UsageError(f"invalid configuration:\n{error}") from error


def describe_config_keys(
    model: Type[BaseModel] = ExperimentConfig, prefix: str = ""
) -> List[str]:
    """
    List every config key as ``section.key (default): description`` lines

    The command line help is built from this, so every key is documented.
    """
    lines = []
    for name, field in model.__fields__.items():
        key = f"{prefix}{name}"
        field_type = field.outer_type_
        if isinstance(field_type, type) and issubclass(field_type, BaseModel) and field_type is not SignalSpec:
            lines.extend(describe_config_keys(field_type, prefix=f"{key}."))
            continue
        default = field.default
        if default is None and field.default_factory is not None:
            default = field.default_factory()
        if isinstance(default, BaseModel):
            default = "mixed"
        if isinstance(default, Enum):
            default = default.value
        description = field.field_info.description or ""
        lines.append(f"{key} ({default}): {description}")
        if field_type is SignalSpec:
            lines.extend(describe_config_keys(SignalSpec, prefix=f"{key}."))
    return lines
