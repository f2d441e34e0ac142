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
Evaluation
==========

Classification metrics at threshold 0.5 (a probability of exactly 0.5 is
a positive prediction), and aggregation of per-seed runs into a report of
mean and sample standard deviation per variant, with a significance flag
from Welch's two-sided t-test against the full model.

Probabilities and labels are (n_visits,) or (n_visits, n_labels) arrays.
For several labels, AUROC, AUPR and macro-F1 are unweighted means over the
labels; a label without both classes is skipped by AUROC (with a warning)
and a label without positives is skipped by AUPR.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import average_precision_score
from sklearn.metrics import f1_score
from sklearn.metrics import roc_auc_score

from ehrfusion.errors import MetricError
from ehrfusion.logger import get_logger

LOGGER = get_logger()

METRICS = ("accuracy", "auroc", "aupr", "macro_f1")

THRESHOLD = 0.5

SIGNIFICANCE_LEVEL = 0.05

REPORT_CONVENTIONS = (
    "# threshold 0.5, a probability of exactly 0.5 is a positive prediction",
    "# macro_f1: binary = mean F1 of both classes; multilabel = mean positive-class F1 over labels",
    "# accuracy and macro_f1 are macro-averaged over labels (micro-averaging is not reported)",
    "# * = Welch two-sided t-test against full, p < 0.05",
)


def _as_matrix(probs, labels) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(-1, 1)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if p.shape != y.shape:
        raise MetricError(f"probabilities {p.shape} and labels {y.shape} are not aligned")
    if p.size == 0:
        raise MetricError("empty input")
    return p, y


def accuracy(probs, labels, threshold: float = THRESHOLD) -> float:
    p, y = _as_matrix(probs, labels)
    return float(np.mean((p >= threshold) == (y == 1)))


def _binary_auroc(scores: np.ndarray, y: np.ndarray) -> float:
    return float(roc_auc_score(y == 1, scores))


def auroc(probs, labels) -> float:
    """
    Mann-Whitney AUROC with midranks for ties

    :raises MetricError: when no label has both classes
    """
    p, y = _as_matrix(probs, labels)
    values = []
    skipped = []
    for k in range(y.shape[1]):
        n_pos = int(np.sum(y[:, k] == 1))
        if n_pos == 0 or n_pos == len(y):
            skipped.append(k)
            continue
        values.append(_binary_auroc(p[:, k], y[:, k]))
    if not values:
        raise MetricError("AUROC is undefined: labels hold a single class")
    if skipped:
        LOGGER.warning("AUROC skipped {} single-class labels: {}", len(skipped), skipped)
    return float(np.mean(values))


def _average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    return float(average_precision_score(y == 1, scores))


def aupr(probs, labels) -> float:
    """
    Area under the precision-recall curve in the average precision form,
    a step function over the distinct score thresholds

    :raises MetricError: when no label has a positive
    """
    p, y = _as_matrix(probs, labels)
    values = [
        _average_precision(p[:, k], y[:, k]) for k in range(y.shape[1]) if np.any(y[:, k] == 1)
    ]
    if not values:
        raise MetricError("AUPR is undefined: no positive labels")
    return float(np.mean(values))


def _f1(predicted: np.ndarray, actual: np.ndarray) -> float:
    return float(f1_score(actual, predicted, zero_division=0))


def macro_f1(probs, labels, threshold: float = THRESHOLD) -> float:
    """
    Binary task: the mean of the F1 of both classes; several labels: the
    mean of the positive-class F1 of every label.  An F1 with no predicted
    and no actual members is 0.
    """
    p, y = _as_matrix(probs, labels)
    predicted = p >= threshold
    actual = y == 1
    if y.shape[1] == 1:
        return 0.5 * (_f1(predicted[:, 0], actual[:, 0]) + _f1(~predicted[:, 0], ~actual[:, 0]))
    return float(np.mean([_f1(predicted[:, k], actual[:, k]) for k in range(y.shape[1])]))


def compute_metrics(probs, labels) -> Dict[str, float]:
    return {
        "accuracy": accuracy(probs, labels),
        "auroc": auroc(probs, labels),
        "aupr": aupr(probs, labels),
        "macro_f1": macro_f1(probs, labels),
    }


def per_label_metrics(probs, labels) -> pd.DataFrame:
    """
    One row per label with its positive count and metrics; undefined
    metrics are NaN.  A debug artifact for multi-label runs.
    """
    p, y = _as_matrix(probs, labels)
    rows = []
    for k in range(y.shape[1]):
        n_pos = int(np.sum(y[:, k] == 1))
        both = 0 < n_pos < len(y)
        rows.append(
            {
                "label": k,
                "n_positive": n_pos,
                "accuracy": accuracy(p[:, k], y[:, k]),
                "auroc": _binary_auroc(p[:, k], y[:, k]) if both else np.nan,
                "aupr": _average_precision(p[:, k], y[:, k]) if n_pos else np.nan,
                "f1": _f1(p[:, k] >= THRESHOLD, y[:, k] == 1),
            }
        )
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class MetricRow:
    variant: str
    metric: str
    mean: float
    std: float
    n_runs: int
    flag: Optional[bool] = None

    @property
    def flag_text(self) -> str:
        if self.flag is None:
            return ""
        return "*" if self.flag else "ns"


@dataclass
class MetricsReport:
    rows: List[MetricRow]

    @property
    def variants(self) -> List[str]:
        return list(dict.fromkeys(row.variant for row in self.rows))

    @property
    def n_runs(self) -> Dict[str, int]:
        return {row.variant: row.n_runs for row in self.rows}

    def row(self, variant: str, metric: str) -> MetricRow:
        for row in self.rows:
            if row.variant == variant and row.metric == metric:
                return row
        raise KeyError(f"{variant}/{metric}")

    def mean(self, variant: str, metric: str) -> float:
        return self.row(variant, metric).mean

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "variant": r.variant,
                    "metric": r.metric,
                    "mean": r.mean,
                    "std": r.std,
                    "flag": r.flag_text,
                }
                for r in self.rows
            ],
            columns=["variant", "metric", "mean", "std", "flag"],
        )

    def format_table(self) -> str:
        """
        An aligned table: one row per variant, one ``mean ± std`` column per
        metric (percentages), ``*`` on significant differences
        """
        table = pd.DataFrame(index=self.variants, columns=list(METRICS), dtype=object)
        for r in self.rows:
            mark = "*" if r.flag else ""
            table.loc[r.variant, r.metric] = f"{100 * r.mean:.2f} ± {100 * r.std:.2f}{mark}"
        table.insert(0, "runs", [self.n_runs[v] for v in self.variants])
        table.index.name = "variant"
        return "\n".join(REPORT_CONVENTIONS) + "\n" + table.fillna("").to_string() + "\n"

    def write(self, directory: Union[Path, str]) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tsv = directory / "report.tsv"
        txt = directory / "report.txt"
        self.to_frame().to_csv(tsv, sep="\t", index=False, float_format="%.10g")
        txt.write_text(self.format_table(), encoding="utf-8")
        LOGGER.info("Wrote metrics report {} and {}", tsv, txt)
        return {"tsv": tsv, "txt": txt}


def _sample_std(values: Sequence[float]) -> float:
    if len(values) < 2 or np.ptp(values) == 0:
        return 0.0
    return float(np.std(values, ddof=1))


def _welch_significant(reference: Sequence[float], other: Sequence[float]) -> bool:
    a = np.asarray(reference)
    b = np.asarray(other)
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return bool(a[0] != b[0])
    _, p_value = stats.ttest_ind(a, b, equal_var=False)
    return bool(p_value < SIGNIFICANCE_LEVEL)


def aggregate(
    records: Mapping[str, Sequence[Mapping[str, float]]],
    reference: str = "full",
    metrics: Sequence[str] = METRICS,
) -> MetricsReport:
    """
    Mean and sample standard deviation of every metric per variant

    :param records: variant -> one metrics mapping per run
    :param reference: the variant the others are tested against
    :return: a MetricsReport; flags are set only for variants with the same
        number of runs (at least 2) as the reference
    """
    ref_runs = records.get(reference, ())
    rows = []
    for variant, runs in records.items():
        if not runs:
            continue
        comparable = variant != reference and len(runs) >= 2 and len(ref_runs) >= 2
        if comparable and len(runs) != len(ref_runs):
            LOGGER.warning(
                "Variant {} has {} runs and {} has {}, significance flags omitted",
                variant,
                len(runs),
                reference,
                len(ref_runs),
            )
            comparable = False
        for metric in metrics:
            values = sorted(float(run[metric]) for run in runs)
            flag = None
            if comparable:
                ref_values = sorted(float(run[metric]) for run in ref_runs)
                flag = _welch_significant(ref_values, values)
            rows.append(
                MetricRow(
                    variant=variant,
                    metric=metric,
                    mean=float(np.mean(values)),
                    std=_sample_std(values),
                    n_runs=len(values),
                    flag=flag,
                )
            )
    return MetricsReport(rows=rows)
