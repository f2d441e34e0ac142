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
Synthetic EHR datasets
======================

Visits are drawn around a few latent disease clusters of co-occurring
codes, and labels are planted through up to three channels (see
:py:class:`ehrfusion.config.SignalSpec`):

- structure: a motif pair of codes co-occurs in the visit
- concept: the visit holds a rare risk-family code; every code of a
  family shares one condition token in its concept name, and each risk
  code only turns up in the visits of one cluster
- note: a trigger phrase is written into the visit's hospital course

A label is positive exactly when one of its planted signals is present in
the visit, so the label is a deterministic function of the visit content.
The motif and risk pools take at most half of the registry; small
registries share them across labels.
"""

from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple

import numpy as np

from ehrfusion.config import SignalSpec
from ehrfusion.config import TaskKind
from ehrfusion.ehr_data import Dataset
from ehrfusion.ehr_data import MedicalCode
from ehrfusion.ehr_data import VisitRecord
from ehrfusion.errors import DataError
from ehrfusion.logger import get_logger

LOGGER = get_logger()
CONDITION_TOKENS = (
    "cardiac", "renal", "hepatic", "pulmonary", "septic",
    "neural", "gastric", "endocrine", "hematologic", "vascular",
    "thyroid", "pancreatic", "dermal", "ocular", "skeletal",
    "lymphatic", "urinary", "bronchial", "adrenal", "splenic",
    "biliary", "colonic", "esophageal", "pleural", "pericardial",
)  # fmt: skip

CODE_WORDS = (
    "acute", "chronic", "lesion", "infection", "syndrome", "deficiency",
    "injury", "disorder", "fracture", "obstruction", "stenosis", "cyst",
    "tablet", "injection", "suspension", "capsule", "ointment", "infusion",
    "panel", "culture", "biopsy", "imaging", "screening", "transfusion",
    "anemia", "edema", "pain", "fever", "cough", "nausea",
    "hypertension", "hyperlipidemia", "obesity", "insomnia", "anxiety", "depression",
)  # fmt: skip

NOTE_WORDS = (
    "patient", "reports", "denies", "stable", "overnight", "improved",
    "tolerated", "diet", "ambulating", "afebrile", "vitals", "reviewed",
    "family", "discussed", "plan", "continued", "monitoring", "comfortable",
    "labs", "unremarkable", "follow", "clinic", "weeks", "outpatient",
)  # fmt: skip

SERVICES = ("MEDICINE", "SURGERY", "CARDIOLOGY", "NEUROLOGY", "ORTHOPEDICS")

CODE_SYSTEMS = ("ICD9", "NDC", "CPT")

TRIGGER_TEMPLATE = "{condition} decompensation alert"


@dataclass(frozen=True)
class PlantedSignal:
    """
    The label-determining codes and phrases of a synthetic dataset

    ``risk_clusters`` maps every risk code to the latent cluster whose
    visits receive it.
    """

    motif_pairs: Tuple[Tuple[Tuple[str, str], ...], ...]
    risk_codes: Tuple[Tuple[str, ...], ...]
    triggers: Tuple[str, ...]
    background: Tuple[str, ...]
    risk_clusters: Dict[str, int] = field(default_factory=dict, compare=False)

    def label_codes(self, label: int = 0) -> Set[str]:
        codes = {c for pair in self.motif_pairs[label] for c in pair}
        return codes | set(self.risk_codes[label])

    def fired(self, label: int, codes: Set[str], triggers: Sequence[str]) -> bool:
        """Whether a visit holding ``codes`` and ``triggers`` is positive for ``label``"""
        if any(a in codes and b in codes for a, b in self.motif_pairs[label]):
            return True
        if any(c in codes for c in self.risk_codes[label]):
            return True
        return self.triggers[label] in triggers


@dataclass(frozen=True)
class _Layout:
    pairs_per_label: int
    n_pairs: int
    family_size: int
    n_families: int


def _layout(n_codes: int, n_labels: int, signal: SignalSpec) -> _Layout:
    """
    Size the motif and risk pools to at most half of the registry; labels
    share pools cyclically when the registry is too small for disjoint ones
    """
    budget = n_codes // 2
    pairs_per_label = n_pairs = 0
    if signal.uses_structure:
        cap = budget // 2 if signal.uses_concept else budget
        available = max(1, cap // 2)
        pairs_per_label = min(signal.motif_pairs_per_label, max(1, available // n_labels))
        n_pairs = min(available, pairs_per_label * n_labels)
    family_size = n_families = 0
    if signal.uses_concept:
        available = max(1, budget - 2 * n_pairs)
        family_size = min(signal.risk_codes_per_label, max(1, available // n_labels))
        n_families = max(1, min(n_labels, available // family_size))
    return _Layout(pairs_per_label, n_pairs, family_size, n_families)


def _plan_codes(
    rng: np.random.Generator, n_codes: int, task_kind: TaskKind, signal: SignalSpec
) -> Tuple[PlantedSignal, Dict[str, MedicalCode], List[List[str]]]:
    n_labels = task_kind.n_labels
    layout = _layout(n_codes, n_labels, signal)
    n_motif = 2 * layout.n_pairs
    n_risk = layout.family_size * layout.n_families

    code_ids = [f"C{i:04d}" for i in range(n_codes)]
    shuffled = [code_ids[i] for i in rng.permutation(n_codes)]
    motif_ids = shuffled[:n_motif]
    risk_ids = shuffled[n_motif : n_motif + n_risk]
    background_ids = sorted(shuffled[n_motif + n_risk :])

    names: Dict[str, str] = {}
    for code_id in motif_ids + background_ids:
        first, second = rng.choice(len(CODE_WORDS), size=2, replace=False)
        names[code_id] = f"{CODE_WORDS[first]} {CODE_WORDS[second]}"

    pairs = [(motif_ids[i], motif_ids[i + 1]) for i in range(0, n_motif, 2)]
    families = []
    for f in range(layout.n_families):
        block = risk_ids[f * layout.family_size : (f + 1) * layout.family_size]
        for code_id in block:
            names[code_id] = f"{CONDITION_TOKENS[f]} {CODE_WORDS[rng.integers(len(CODE_WORDS))]}"
        families.append(tuple(block))

    motif_pairs = []
    risk_codes = []
    for label in range(n_labels):
        motif_pairs.append(
            tuple(
                pairs[(label * layout.pairs_per_label + i) % layout.n_pairs]
                for i in range(layout.pairs_per_label)
            )
        )
        risk_codes.append(families[label % layout.n_families] if families else ())

    registry = {
        code_id: MedicalCode(
            code_id=code_id,
            system=CODE_SYSTEMS[int(code_id[1:]) % len(CODE_SYSTEMS)],
            concept_name=names[code_id],
        )
        for code_id in code_ids
    }
    cluster_of = rng.integers(signal.n_clusters, size=len(background_ids))
    clusters = [
        [background_ids[i] for i in np.flatnonzero(cluster_of == k)]
        for k in range(signal.n_clusters)
    ]
    clusters = [c if c else background_ids for c in clusters]
    risk_cluster_of = rng.integers(signal.n_clusters, size=n_risk)
    planted = PlantedSignal(
        motif_pairs=tuple(motif_pairs),
        risk_codes=tuple(risk_codes),
        triggers=tuple(
            TRIGGER_TEMPLATE.format(condition=CONDITION_TOKENS[label]) for label in range(n_labels)
        ),
        background=tuple(background_ids),
        risk_clusters={c: int(k) for c, k in zip(risk_ids, risk_cluster_of)},
    )
    LOGGER.debug(
        "Planted {} motif pairs and {} risk families of {} codes over {} labels",
        layout.n_pairs,
        layout.n_families,
        layout.family_size,
        n_labels,
    )
    return planted, registry, clusters


def _note_sentence(rng: np.random.Generator, n_min: int = 5, n_max: int = 9) -> str:
    n_words = rng.integers(n_min, n_max + 1)
    words = [NOTE_WORDS[i] for i in rng.integers(len(NOTE_WORDS), size=n_words)]
    return " ".join(words).capitalize() + "."


def _discharge_note(rng: np.random.Generator, triggers: List[str]) -> str:
    year = rng.integers(2100, 2200)
    month = rng.integers(1, 13)
    day = rng.integers(1, 29)
    stay = rng.integers(1, 15)
    course = _note_sentence(rng)
    if triggers:
        course += " " + " ".join(f"Noted {t}." for t in triggers)
    lines = [
        f"Admission Date: {year}-{month}-{day}",
        f"Discharge Date: {year}-{month}-{min(day + stay, 28)}",
        f"Service: {SERVICES[rng.integers(len(SERVICES))]}",
        f"History of Present Illness: {_note_sentence(rng)}",
        f"Hospital Course: {course}",
        f"Discharge Instructions: {_note_sentence(rng)}",
    ]
    return "\n".join(lines)


def planted_signal(
    n_codes: int, task_kind: TaskKind, signal_spec: SignalSpec, seed: int
) -> PlantedSignal:
    """
    The label-determining codes and trigger phrases that
    :py:func:`generate_synthetic_dataset` plants for the same arguments
    """
    planted, _, _ = _plan_codes(np.random.default_rng(seed), n_codes, task_kind, signal_spec)
    return planted


def generate_synthetic_dataset(
    n_visits: int,
    n_codes: int,
    task_kind: TaskKind = TaskKind.BINARY,
    signal_spec: Optional[SignalSpec] = None,
    seed: int = 0,
) -> Dataset:
    """
    Generate a labeled synthetic dataset with planted structural and
    semantic label signal

    :param n_visits: number of visits, at least 20
    :param n_codes: size of the code registry, at least 10
    :param task_kind: binary or multilabel-25
    :param signal_spec: planted channels and their mixing weights;
        defaults to the "mixed" preset
    :param seed: generator seed; the dataset is a pure function of the
        arguments
    :return: a Dataset (no split assigned) whose visits all carry a label
        and a discharge-summary style note
    """
    if n_visits < 20:
        raise DataError(f"n_visits must be >= 20, got {n_visits}")
    if n_codes < 10:
        raise DataError(f"n_codes must be >= 10, got {n_codes}")
    signal = signal_spec if signal_spec is not None else SignalSpec.preset("mixed")

    rng = np.random.default_rng(seed)
    planted, registry, clusters = _plan_codes(rng, n_codes, task_kind, signal)
    background = list(planted.background)

    channels = []
    weights = []
    for name, weight in (
        ("structure", signal.structure_weight),
        ("concept", signal.concept_weight),
        ("note", signal.note_weight),
    ):
        if weight > 0:
            channels.append(name)
            weights.append(weight)
    probs = np.asarray(weights) / np.sum(weights)

    visits = []
    for i in range(n_visits):
        k = int(rng.integers(len(clusters)))
        cluster = clusters[k]
        n_background = int(rng.integers(signal.codes_per_visit_min, signal.codes_per_visit_max + 1))
        n_background = min(
            n_background, len(cluster) if signal.cluster_affinity >= 1 else len(background)
        )
        codes: Set[str] = set()
        while len(codes) < n_background:
            pool = cluster if rng.random() < signal.cluster_affinity else background
            codes.add(pool[rng.integers(len(pool))])

        triggers = []
        for j in range(task_kind.n_labels):
            if rng.random() < signal.base_rate:
                channel = channels[rng.choice(len(channels), p=probs)]
                if channel == "structure":
                    pairs = planted.motif_pairs[j]
                    codes.update(pairs[rng.integers(len(pairs))])
                elif channel == "concept":
                    family = planted.risk_codes[j]
                    local = [c for c in family if planted.risk_clusters[c] == k] or list(family)
                    codes.add(local[rng.integers(len(local))])
                elif planted.triggers[j] not in triggers:
                    triggers.append(planted.triggers[j])
            elif signal.uses_structure and rng.random() < signal.decoy_rate:
                pairs = planted.motif_pairs[j]
                pair = pairs[rng.integers(len(pairs))]
                codes.add(pair[rng.integers(2)])
        label = tuple(int(planted.fired(j, codes, triggers)) for j in range(task_kind.n_labels))

        visits.append(
            VisitRecord(
                visit_id=f"V{i:05d}",
                codes=tuple(sorted(codes)),
                note_text=_discharge_note(rng, triggers),
                label=label,
            )
        )

    ds = Dataset(codes=registry, visits=tuple(visits), task_kind=task_kind)
    rate = float(np.mean([v.label for v in visits]))
    LOGGER.info(
        "Generated {} synthetic visits over {} codes (channels {}, positive rate {:.3f})",
        n_visits,
        n_codes,
        ",".join(channels),
        rate,
    )
    return ds
