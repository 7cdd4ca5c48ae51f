#!/usr/bin/env python3
"""
Evaluation Metrics
Integer confusion tallies and the derived IoU / pixel accuracy / accuracy /
macro F1 values. Tallies are exact int64 counts; ratios are taken only when
a report is built, so streaming and one-shot accumulation agree exactly.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .core_model import DAMAGE_TABLE, CodeTable, MaskLayer, output_path, write_json
from .errors import CodeTableError, DataError, DimensionMismatchError, EmptyInputError

logger = logging.getLogger(__name__)

CONVENTIONS = {
    "means_over": "classes present in ground truth",
    "pixel_accuracy": "per-class recall TP/(TP+FN)",
    "iou_absent_from_both": 1.0,
    "f1_when_precision_plus_recall_is_zero": 0.0,
}


class ConfusionMatrix:
    """counts[gt_index, pred_index] over the codes of a table."""

    def __init__(self, table: CodeTable, counts: Optional[np.ndarray] = None):
        n = len(table)
        self.table = table
        if counts is None:
            counts = np.zeros((n, n), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n, n):
            raise DimensionMismatchError("confusion counts", (n, n), counts.shape)
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.table != self.table:
            raise DataError(f"cannot merge '{self.table.name}' and '{other.table.name}' tallies")
        return type(self)(self.table, self.counts + other.counts)

    __add__ = merge

    def tp_fp_fn(self, code: int) -> Tuple[int, int, int]:
        i = self.table.index_of(code)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        return tp, fp, fn

    def gt_count(self, code: int) -> int:
        return int(self.counts[self.table.index_of(code), :].sum())

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


class PixelConfusion(ConfusionMatrix):
    """Per-pixel tally between a predicted and a ground-truth mask."""


def _index_lookup(table: CodeTable) -> np.ndarray:
    lookup = np.full(256, -1, dtype=np.int64)
    lookup[list(table.codes)] = np.arange(len(table))
    return lookup


def _tally(gt_codes: np.ndarray, pred_codes: np.ndarray, table: CodeTable) -> np.ndarray:
    lookup = _index_lookup(table)
    gt_idx = lookup[np.asarray(gt_codes, dtype=np.int64).ravel()]
    pred_idx = lookup[np.asarray(pred_codes, dtype=np.int64).ravel()]
    if (gt_idx < 0).any() or (pred_idx < 0).any():
        raise CodeTableError(f"codes outside table '{table.name}'")
    n = len(table)
    return np.bincount(gt_idx * n + pred_idx, minlength=n * n).reshape(n, n).astype(np.int64)


def accumulate_confusion(pred: Union[MaskLayer, np.ndarray], gt: Union[MaskLayer, np.ndarray],
                         table: CodeTable) -> PixelConfusion:
    """Exact per-pixel tally of one mask pair."""
    pred_codes = pred.codes if isinstance(pred, MaskLayer) else np.asarray(pred)
    gt_codes = gt.codes if isinstance(gt, MaskLayer) else np.asarray(gt)
    if pred_codes.shape != gt_codes.shape:
        raise DimensionMismatchError("prediction vs ground truth", gt_codes.shape, pred_codes.shape)
    return PixelConfusion(table, _tally(gt_codes, pred_codes, table))


def iou(conf: ConfusionMatrix, code: int) -> float:
    tp, fp, fn = conf.tp_fp_fn(code)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def pixel_accuracy(conf: ConfusionMatrix, code: int) -> float:
    """Per-class recall."""
    tp, fp, fn = conf.tp_fp_fn(code)
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def precision(conf: ConfusionMatrix, code: int) -> float:
    tp, fp, _ = conf.tp_fp_fn(code)
    return tp / (tp + fp) if tp + fp else 0.0


def f1_score(conf: ConfusionMatrix, code: int) -> float:
    tp, fp, fn = conf.tp_fp_fn(code)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def _mean(values: Iterable[float]) -> Optional[float]:
    values = list(values)
    return sum(values) / len(values) if values else None


@dataclass
class MetricsReport:
    kind: str                                   # "segmentation" | "classification"
    table: str
    class_names: Tuple[str, ...]
    included_classes: Tuple[str, ...]
    confusion: List[List[int]]
    per_class_iou: Dict[str, float] = field(default_factory=dict)
    per_class_pixel_accuracy: Dict[str, float] = field(default_factory=dict)
    mean_iou: Optional[float] = None
    mean_pixel_accuracy: Optional[float] = None
    per_class_accuracy: Dict[str, Optional[float]] = field(default_factory=dict)
    per_class_f1: Dict[str, Optional[float]] = field(default_factory=dict)
    average_accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    sample_count: int = 0
    conventions: Dict[str, object] = field(default_factory=lambda: dict(CONVENTIONS))

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "table": self.table,
            "class_names": list(self.class_names),
            "included_classes": list(self.included_classes),
            "sample_count": self.sample_count,
            "confusion": self.confusion,
            "conventions": self.conventions,
        }
        if self.kind == "segmentation":
            out.update(per_class_iou=self.per_class_iou,
                       per_class_pixel_accuracy=self.per_class_pixel_accuracy,
                       mean_iou=self.mean_iou, mean_pixel_accuracy=self.mean_pixel_accuracy)
        else:
            out.update(per_class_accuracy=self.per_class_accuracy, per_class_f1=self.per_class_f1,
                       average_accuracy=self.average_accuracy, macro_f1=self.macro_f1)
        return out

    def headline(self) -> Dict[str, Optional[float]]:
        if self.kind == "segmentation":
            return {"mean_iou": self.mean_iou, "mean_pixel_accuracy": self.mean_pixel_accuracy}
        return {"average_accuracy": self.average_accuracy, "macro_f1": self.macro_f1}


def segmentation_report(conf: ConfusionMatrix) -> MetricsReport:
    table = conf.table
    included = [c for c in table.codes if conf.gt_count(c) > 0]
    ious = {table.name_of(c): iou(conf, c) for c in table.codes}
    accs = {table.name_of(c): pixel_accuracy(conf, c) for c in table.codes}
    return MetricsReport(
        kind="segmentation",
        table=table.name,
        class_names=table.names,
        included_classes=tuple(table.name_of(c) for c in included),
        confusion=conf.to_list(),
        per_class_iou=ious,
        per_class_pixel_accuracy=accs,
        mean_iou=_mean(ious[table.name_of(c)] for c in included),
        mean_pixel_accuracy=_mean(accs[table.name_of(c)] for c in included),
        sample_count=conf.total,
    )


def classification_confusion(preds: Sequence[int], gts: Sequence[int],
                             table: CodeTable = DAMAGE_TABLE) -> ConfusionMatrix:
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions for {len(gts)} ground-truth labels")
    if len(gts) == 0:
        raise EmptyInputError("classification metrics need at least one sample")
    return ConfusionMatrix(table, _tally(np.asarray(gts, dtype=np.int64),
                                         np.asarray(preds, dtype=np.int64), table))


def classification_report(conf: ConfusionMatrix) -> MetricsReport:
    table = conf.table
    included = [c for c in table.codes if conf.gt_count(c) > 0]
    per_class_accuracy = {table.name_of(c): (pixel_accuracy(conf, c) if c in included else None)
                          for c in table.codes}
    per_class_f1 = {table.name_of(c): (f1_score(conf, c) if c in included else None)
                    for c in table.codes}
    return MetricsReport(
        kind="classification",
        table=table.name,
        class_names=table.names,
        included_classes=tuple(table.name_of(c) for c in included),
        confusion=conf.to_list(),
        per_class_accuracy=per_class_accuracy,
        per_class_f1=per_class_f1,
        average_accuracy=int(np.trace(conf.counts)) / conf.total if conf.total else None,
        macro_f1=_mean(per_class_f1[table.name_of(c)] for c in included),
        sample_count=conf.total,
    )


def classification_metrics(preds: Sequence[int], gts: Sequence[int],
                           table: CodeTable = DAMAGE_TABLE) -> MetricsReport:
    """Per-class accuracy (recall), overall accuracy and macro F1 over gt-present classes."""
    return classification_report(classification_confusion(preds, gts, table))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report_json(reports: Mapping[str, MetricsReport], path: str,
                      extra: Optional[dict] = None) -> None:
    document = {"stages": {stage: report.to_dict() for stage, report in reports.items()}}
    if extra:
        document.update(extra)
    write_json(path, document)
    logger.info("Metrics report saved to %s", path)


def report_table(report: MetricsReport) -> pd.DataFrame:
    """Percentages laid out one column per class plus the mean/average columns."""
    def pct(value):
        return None if value is None else round(100.0 * value, 2)

    if report.kind == "segmentation":
        rows = {
            "IoU [%]": {**{n: pct(v) for n, v in report.per_class_iou.items()}, "Mean": pct(report.mean_iou)},
            "Pixel accuracy [%]": {**{n: pct(v) for n, v in report.per_class_pixel_accuracy.items()},
                                   "Mean": pct(report.mean_pixel_accuracy)},
        }
        columns = list(report.class_names) + ["Mean"]
    else:
        rows = {"Accuracy [%]": {**{n: pct(v) for n, v in report.per_class_accuracy.items()},
                                 "Average accuracy": pct(report.average_accuracy),
                                 "Average F1": pct(report.macro_f1)}}
        columns = list(report.class_names) + ["Average accuracy", "Average F1"]
    return pd.DataFrame.from_dict(rows, orient="index", columns=columns)


def write_table_csv(report: MetricsReport, path: str) -> None:
    with output_path(path):
        report_table(report).to_csv(path, index_label="Metric")
