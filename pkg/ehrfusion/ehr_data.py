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
EHR Data
========

Load, split, textualize and clean multimodal EHR datasets: structured
visit records (a set of medical codes per visit), a code registry with
concept names, optional clinical notes and labels.

File formats (UTF-8, tab separated, no header):

- codes file: ``code_id<TAB>system<TAB>concept_name``
- records file: ``visit_id<TAB>label_spec<TAB>code_id,code_id,...``
  where ``label_spec`` is ``0``, ``1``, 25 binary digits or ``-`` for an
  unlabeled visit
- notes file: ``visit_id<TAB>note_text`` with ``\\n``, ``\\t`` and
  ``\\\\`` escapes
- labels file: ``visit_id<TAB>label_spec``, overriding record labels

.. code-block::

    from ehrfusion.ehr_data import load_dataset
    from ehrfusion.ehr_data import split_dataset

    ds = load_dataset("records.tsv", "codes.tsv", notes_path="notes.tsv")
    ds = split_dataset(ds, seed=0)
    ds.split_visit_ids("train")

"""

import csv
import dataclasses
import re
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd
from marshmallow import Schema
from marshmallow import ValidationError
from marshmallow import fields
from marshmallow import post_load
from marshmallow import validate

from ehrfusion.config import N_PHENOTYPES
from ehrfusion.config import TaskKind
from ehrfusion.errors import DataError
from ehrfusion.logger import get_logger

LOGGER = get_logger()

SPLITS = ("train", "val", "test")

UNLABELED = "-"

TEXTUALIZE_PREFIX = "Patient visit with: "

Label = Tuple[int, ...]


@dataclass(frozen=True)
class MedicalCode:
    code_id: str
    system: str
    concept_name: str


@dataclass(frozen=True)
class VisitRecord:
    """
    One patient visit; the codes are a sorted, de-duplicated tuple
    and the label is None for an unlabeled visit
    """

    visit_id: str
    codes: Tuple[str, ...]
    note_text: str = ""
    label: Optional[Label] = None

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class Dataset:
    codes: Dict[str, MedicalCode]
    visits: Tuple[VisitRecord, ...]
    task_kind: TaskKind
    splits: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        n_labels = self.task_kind.n_labels
        for visit in self.visits:
            if visit.visit_id in seen:
                raise DataError(f"duplicate visit_id '{visit.visit_id}'")
            seen.add(visit.visit_id)
            if not visit.codes:
                raise DataError(f"empty visit '{visit.visit_id}'")
            for code_id in visit.codes:
                if code_id not in self.codes:
                    raise DataError(
                        f"visit '{visit.visit_id}' has unknown code_id '{code_id}'"
                    )
            if visit.label is not None and len(visit.label) != n_labels:
                raise DataError(
                    f"visit '{visit.visit_id}' has {len(visit.label)} labels, "
                    f"expected {n_labels} for a {self.task_kind.value} task"
                )

    @property
    def n_labels(self) -> int:
        return self.task_kind.n_labels

    @property
    def visit_ids(self) -> List[str]:
        return [v.visit_id for v in self.visits]

    @property
    def labeled_visits(self) -> List[VisitRecord]:
        return [v for v in self.visits if v.labeled]

    def visit(self, visit_id: str) -> VisitRecord:
        for visit in self.visits:
            if visit.visit_id == visit_id:
                return visit
        raise DataError(f"unknown visit '{visit_id}'")

    def split_visit_ids(self, split: str) -> List[str]:
        if not self.splits:
            raise DataError("dataset has no split assignment, run split_dataset first")
        return [v.visit_id for v in self.visits if self.splits.get(v.visit_id) == split]

    def label_matrix(self, visit_ids: Sequence[str]) -> np.ndarray:
        """
        :return: a (len(visit_ids), n_labels) float array of 0/1 labels
        """
        by_id = {v.visit_id: v for v in self.visits}
        rows = []
        for visit_id in visit_ids:
            visit = by_id.get(visit_id)
            if visit is None or visit.label is None:
                raise DataError(f"visit '{visit_id}' has no label")
            rows.append(visit.label)
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), self.n_labels)

    def notes(self) -> Dict[str, str]:
        return {v.visit_id: v.note_text for v in self.visits}


class LabelField(fields.Field):
    """
    A label spec: ``0``/``1``, 25 binary digits, or ``-`` (unlabeled)
    """

    def _serialize(self, value, attr, obj, **kwargs):
        return format_label(value)

    def _deserialize(self, value, attr, data, **kwargs) -> Optional[Label]:
        return parse_label(value)


class CodeListField(fields.Field):
    """A comma separated list of code_ids, de-duplicated and sorted"""

    def _serialize(self, value, attr, obj, **kwargs):
        return ",".join(value)

    def _deserialize(self, value, attr, data, **kwargs) -> Tuple[str, ...]:
        codes = sorted({c.strip() for c in str(value).split(",") if c.strip()})
        if not codes:
            raise ValidationError("empty visit")
        return tuple(codes)


class MedicalCodeSchema(Schema):
    code_id = fields.Str(required=True, validate=validate.Length(min=1))
    system = fields.Str(required=True)
    concept_name = fields.Str(required=True, validate=validate.Length(min=1))

    @post_load
    def make_obj(self, data, **kwargs) -> MedicalCode:
        return MedicalCode(**data)


class VisitRowSchema(Schema):
    visit_id = fields.Str(required=True, validate=validate.Length(min=1))
    label_spec = LabelField(required=True, data_key="label_spec", attribute="label")
    codes = CodeListField(required=True)

    @post_load
    def make_obj(self, data, **kwargs) -> VisitRecord:
        return VisitRecord(visit_id=data["visit_id"], codes=data["codes"], label=data["label"])


class NoteRowSchema(Schema):
    visit_id = fields.Str(required=True, validate=validate.Length(min=1))
    note_text = fields.Str(required=True)

    @post_load
    def unescape(self, data, **kwargs) -> Tuple[str, str]:
        return data["visit_id"], unescape_note(data["note_text"])


class LabelRowSchema(Schema):
    visit_id = fields.Str(required=True, validate=validate.Length(min=1))
    label_spec = LabelField(required=True)

    @post_load
    def make_obj(self, data, **kwargs) -> Tuple[str, Optional[Label]]:
        return data["visit_id"], data["label_spec"]


def parse_label(value: str) -> Optional[Label]:
    value = str(value).strip()
    if value in ("", UNLABELED):
        return None
    if not set(value) <= {"0", "1"}:
        raise ValidationError(f"label spec '{value}' must hold only 0/1 digits")
    if len(value) not in (1, N_PHENOTYPES):
        raise ValidationError(
            f"label spec '{value}' must have 1 or {N_PHENOTYPES} digits"
        )
    return tuple(int(c) for c in value)


def format_label(label: Optional[Label]) -> str:
    if label is None:
        return UNLABELED
    return "".join(str(int(v)) for v in label)


_NOTE_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\"}

_NOTE_ESCAPE_PATTERN = re.compile(r"\\([nt\\])")


def escape_note(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def unescape_note(text: str) -> str:
    return _NOTE_ESCAPE_PATTERN.sub(lambda m: _NOTE_ESCAPES[m.group(1)], text)


def _read_tsv(path: Union[Path, str], columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    LOGGER.info("Reading: {}", path)
    try:
        df = pd.read_csv(
            path,
            sep="\t",
            header=None,
            names=columns,
            dtype=str,
            keep_default_na=False,
            quoting=csv.QUOTE_NONE,
            encoding="utf-8",
            skip_blank_lines=True,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except (pd.errors.ParserError, UnicodeDecodeError) as error:
        raise DataError(f"{path}: cannot parse tab separated records: {error}") from error
    return df.fillna("")


def _load_rows(path: Union[Path, str], schema: Schema) -> List:
    """
    Validate every row of a tab separated file with a marshmallow schema;
    errors name the file and the 1-based line of the offending row
    """
    columns = list(schema.fields)
    columns = [schema.fields[name].data_key or name for name in columns]
    df = _read_tsv(path, columns)
    rows = []
    keys = set()
    for line_no, row in enumerate(df.to_dict(orient="records"), start=1):
        try:
            obj = schema.load(row)
        except ValidationError as error:
            raise DataError(f"{path} line {line_no}: {error.messages}") from error
        key = row[columns[0]]
        if key in keys:
            raise DataError(f"{path} line {line_no}: duplicate key '{key}'")
        keys.add(key)
        rows.append(obj)
    return rows


def load_codes(codes_path: Union[Path, str]) -> Dict[str, MedicalCode]:
    codes = _load_rows(codes_path, MedicalCodeSchema())
    return {code.code_id: code for code in codes}


def load_dataset(
    records_path: Union[Path, str],
    codes_path: Union[Path, str],
    notes_path: Optional[Union[Path, str]] = None,
    labels_path: Optional[Union[Path, str]] = None,
) -> Dataset:
    """
    Load a dataset from the records, codes, notes and labels files

    :param records_path: the visit records file
    :param codes_path: the code registry file
    :param notes_path: an optional notes file; visits without a note
        (or all visits, when the file is not given) have empty note_text
    :param labels_path: an optional labels file; its labels replace the
        record labels of the visits it names
    :return: a Dataset with a resolved code registry
    :raises DataError: for unresolvable code_ids, empty visits, duplicate
        keys or a label arity mismatch; the message names the offending row
    """
    registry = load_codes(codes_path)
    visits: List[VisitRecord] = _load_rows(records_path, VisitRowSchema())
    if not visits:
        raise DataError(f"{records_path}: no visits")

    for line_no, visit in enumerate(visits, start=1):
        for code_id in visit.codes:
            if code_id not in registry:
                raise DataError(
                    f"{records_path} line {line_no}: unknown code_id '{code_id}' "
                    f"in visit '{visit.visit_id}'"
                )

    visit_ids = {v.visit_id for v in visits}

    if notes_path is not None:
        notes = dict(_load_rows(notes_path, NoteRowSchema()))
        unknown = sorted(set(notes) - visit_ids)
        if unknown:
            LOGGER.warning("{} notes name unknown visits, e.g. '{}'", len(unknown), unknown[0])
        visits = [dataclasses.replace(v, note_text=notes.get(v.visit_id, "")) for v in visits]

    if labels_path is not None:
        labels = dict(_load_rows(labels_path, LabelRowSchema()))
        unknown = sorted(set(labels) - visit_ids)
        if unknown:
            raise DataError(f"{labels_path}: labels for unknown visit '{unknown[0]}'")
        visits = [
            dataclasses.replace(v, label=labels[v.visit_id]) if v.visit_id in labels else v
            for v in visits
        ]

    arities = {len(v.label) for v in visits if v.label is not None}
    if not arities:
        raise DataError(f"{records_path}: no labeled visits")
    if len(arities) > 1:
        raise DataError(f"label arity mismatch across visits: {sorted(arities)}")
    task_kind = TaskKind.BINARY if arities.pop() == 1 else TaskKind.MULTILABEL

    used = {code_id for v in visits for code_id in v.codes}
    unused = [code_id for code_id in registry if code_id not in used]
    if unused:
        LOGGER.warning(
            "{} registry codes never appear in a visit and will not be nodes, e.g. '{}'",
            len(unused),
            unused[0],
        )

    ds = Dataset(codes=registry, visits=tuple(visits), task_kind=task_kind)
    LOGGER.info(
        "Loaded {} visits ({} labeled), {} codes, task {}",
        len(ds.visits),
        len(ds.labeled_visits),
        len(ds.codes),
        task_kind.value,
    )
    return ds


def write_dataset(ds: Dataset, directory: Union[Path, str]) -> Dict[str, Path]:
    """
    Write the records, codes and notes files of a dataset

    :return: a mapping of "records", "codes", "notes" to the files written
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": directory / "records.tsv",
        "codes": directory / "codes.tsv",
        "notes": directory / "notes.tsv",
    }
    code_lines = [f"{c.code_id}\t{c.system}\t{c.concept_name}\n" for c in ds.codes.values()]
    record_lines = [
        f"{v.visit_id}\t{format_label(v.label)}\t{','.join(v.codes)}\n" for v in ds.visits
    ]
    note_lines = [f"{v.visit_id}\t{escape_note(v.note_text)}\n" for v in ds.visits if v.note_text]
    for key, lines in (("codes", code_lines), ("records", record_lines), ("notes", note_lines)):
        with open(paths[key], "w", encoding="utf-8", newline="\n") as dst:
            dst.writelines(lines)
        LOGGER.info("Wrote {} lines to {}", len(lines), paths[key])
    return paths


def _systematic_mask(n_total: int, n_pick: int) -> np.ndarray:
    """Pick exactly n_pick of n_total positions, evenly spread"""
    i = np.arange(n_total)
    return ((i + 1) * n_pick // n_total) > (i * n_pick // n_total)


def split_dataset(ds: Dataset, seed: int, stratify: bool = False) -> Dataset:
    """
    Assign labeled visits to train/val/test at 7:1:2

    |val| = floor(0.1 P), |test| = floor(0.2 P) and the remainder is train,
    for P labeled visits.  The shuffle is a pure function of the seed and
    the labeled visit ids, so the same seed gives the same assignment
    whatever the visit order.

    :param ds: a dataset with at least 10 labeled visits
    :param seed: the shuffle seed
    :param stratify: spread every label value evenly over the splits
    :return: a copy of the dataset with ``splits`` assigned
    """
    visit_ids = sorted(v.visit_id for v in ds.labeled_visits)
    n_total = len(visit_ids)
    if n_total < 10:
        raise DataError(f"split needs at least 10 labeled visits, got {n_total}")
    n_val = n_total // 10
    n_test = n_total // 5

    rng = np.random.default_rng(seed)
    order = [visit_ids[i] for i in rng.permutation(n_total)]

    if stratify:
        labels = {v.visit_id: format_label(v.label) for v in ds.labeled_visits}
        order = sorted(order, key=lambda visit_id: labels[visit_id])
        test_mask = _systematic_mask(n_total, n_test)
        test = [vid for vid, m in zip(order, test_mask) if m]
        rest = [vid for vid, m in zip(order, test_mask) if not m]
        val_mask = _systematic_mask(len(rest), n_val)
        val = [vid for vid, m in zip(rest, val_mask) if m]
        train = [vid for vid, m in zip(rest, val_mask) if not m]
    else:
        test = order[:n_test]
        val = order[n_test : n_test + n_val]
        train = order[n_test + n_val :]

    splits = {vid: "train" for vid in train}
    splits.update({vid: "val" for vid in val})
    splits.update({vid: "test" for vid in test})
    LOGGER.info(
        "Split {} labeled visits: {} train, {} val, {} test",
        n_total,
        len(train),
        len(val),
        len(test),
    )
    return dataclasses.replace(ds, splits=splits)


def textualize_visit(v: VisitRecord, registry: Mapping[str, MedicalCode]) -> str:
    """
    Describe a visit in one sentence, concept names in registry order, e.g.
    ``Patient visit with: hypertension; metformin``
    """
    for code_id in v.codes:
        if code_id not in registry:
            raise DataError(f"visit '{v.visit_id}' has unknown code_id '{code_id}'")
    members = set(v.codes)
    names = [code.concept_name for code_id, code in registry.items() if code_id in members]
    return TEXTUALIZE_PREFIX + "; ".join(names)


def textualize_dataset(ds: Dataset) -> Dataset:
    """Give every visit without a note its textualized description"""
    visits = tuple(
        v if v.note_text else dataclasses.replace(v, note_text=textualize_visit(v, ds.codes))
        for v in ds.visits
    )
    return dataclasses.replace(ds, visits=visits)


# A section header starts a line and ends at the first colon.
SECTION_HEADER = re.compile(
    r"^[ \t]*(?P<name>[A-Za-z][A-Za-z0-9 #&/(),.'-]{0,59}?)[ \t]*:", re.MULTILINE
)


def note_sections(note: str) -> List[Tuple[Optional[str], str]]:
    """
    Split a note into (header name, section text) pairs; text before the
    first header is returned with a None header.  Joining the section
    texts gives back the note.
    """
    starts = [(m.start(), m.group("name")) for m in SECTION_HEADER.finditer(note)]
    sections: List[Tuple[Optional[str], str]] = []
    first = starts[0][0] if starts else len(note)
    if first > 0:
        sections.append((None, note[:first]))
    for i, (start, name) in enumerate(starts):
        end = starts[i + 1][0] if i + 1 < len(starts) else len(note)
        sections.append((name, note[start:end]))
    return sections


def filter_note_sections(note: str, blocked_sections: Iterable[str]) -> str:
    """
    Remove the blocked sections of a note

    A section runs from its header line (e.g. ``Admission Date:``) to the
    next header or the end of the note; headers match case-insensitively.
    Everything else is kept verbatim.

    .. code-block::

        >>> filter_note_sections(
        ...     "Admission Date: 2101-3-4\\nService: SURGERY\\nHistory: chest pain",
        ...     ["Admission Date", "Service"],
        ... )
        'History: chest pain'

    """
    if not note:
        return ""
    blocked = {name.strip().casefold() for name in blocked_sections}
    kept = [
        text
        for name, text in note_sections(note)
        if name is None or name.strip().casefold() not in blocked
    ]
    return "".join(kept)
