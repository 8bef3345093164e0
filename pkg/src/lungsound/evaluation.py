"""Four-task label mappings, challenge metrics, reports, and the
focusing-parameter sweep.

Scoring follows the respiratory sound challenge convention: specificity
(SP) is the recall of the Normal class alone; sensitivity (SE) pools
every other class into one micro-averaged ratio (correct non-Normal over
total non-Normal), with Poor Quality counting as non-Normal for the
record tasks.  AS is the arithmetic mean of SE and SP, HS the harmonic
mean (0 when SE + SP = 0), and the final Score the mean of AS and HS.
"""

from __future__ import annotations

import enum
import io
import json
import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, UsageError
from .ingest import EventLabel, RecordLabel
from .objective import LabelOutOfRangeError

__all__ = [
    "TaskId", "ConfusionMatrix", "ScoreReport",
    "LevelMismatchError", "UndefinedMetricError",
    "map_labels", "task_class_names", "confusion", "challenge_scores",
    "check_scores", "gamma_sweep", "report", "parse_report",
]


class LevelMismatchError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class TaskId(enum.Enum):
    """The four classification tasks: event-level binary and 7-class,
    record-level 3-class and 5-class."""
    Task1_1 = "1-1"
    Task1_2 = "1-2"
    Task2_1 = "2-1"
    Task2_2 = "2-2"

    @staticmethod
    def parse(value) -> "TaskId":
        if isinstance(value, TaskId):
            return value
        try:
            return TaskId(str(value))
        except ValueError:
            raise UsageError(
                f"unknown task {value!r}; expected one of 1-1, 1-2, 2-1, 2-2") from None

    @property
    def level(self) -> str:
        return "event" if self.value.startswith("1") else "record"

    @property
    def n_classes(self) -> int:
        return {"1-1": 2, "1-2": 7, "2-1": 3, "2-2": 5}[self.value]


def task_class_names(task) -> tuple:
    task = TaskId.parse(task)
    if task is TaskId.Task1_1:
        return ("Normal", "Adventitious")
    if task is TaskId.Task1_2:
        return tuple(l.name for l in EventLabel)
    if task is TaskId.Task2_1:
        return ("Normal", "Adventitious", "PoorQuality")
    return tuple(l.name for l in RecordLabel)


def map_labels(task, label) -> int:
    """Raw event/record label -> class index for the task.

    Normal is index 0 for every task, which the scorer relies on.
    """
    task = TaskId.parse(task)
    if task.level == "event":
        if not isinstance(label, EventLabel):
            raise LevelMismatchError(
                f"task {task.value} scores event labels, got {label!r}")
        if task is TaskId.Task1_2:
            return int(label)
        return 0 if label is EventLabel.Normal else 1
    if not isinstance(label, RecordLabel):
        raise LevelMismatchError(
            f"task {task.value} scores record labels, got {label!r}")
    if task is TaskId.Task2_2:
        return int(label)
    if label is RecordLabel.Normal:
        return 0
    if label is RecordLabel.PoorQuality:
        return 2
    return 1


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; rows = truth, columns = prediction
    class_names: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, truths, n_classes: int,
              class_names: tuple | None = None) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64)
    trues = np.asarray(truths, dtype=np.int64)
    if preds.shape != trues.shape or preds.ndim != 1:
        raise DataError(
            f"predictions and truths must be equal-length vectors, "
            f"got {preds.shape} and {trues.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes
                       or trues.min() < 0 or trues.max() >= n_classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (trues, preds), 1)
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(n_classes))
    return ConfusionMatrix(counts=counts, class_names=class_names)


@dataclass
class ScoreReport:
    task: TaskId
    se: float
    sp: float
    as_: float
    hs: float
    score: float
    per_class_recall: tuple
    n_samples: int
    gamma: float | None = None


def challenge_scores(matrix: ConfusionMatrix, task, macro: bool = False,
                     gamma: float | None = None,
                     exclude_pq: bool = False) -> ScoreReport:
    """SE/SP/AS/HS/Score from a confusion matrix whose class 0 is Normal.

    ``macro`` switches SE from the pooled ratio to the mean of per-class
    recalls over non-Normal classes with at least one sample (sensitivity
    analysis only; the pooled form is the challenge definition).
    ``exclude_pq`` drops the Poor Quality class from SE on the record
    tasks, for comparison with scorers that treat PQ as unscorable; the
    default keeps PQ pooled with the other non-Normal classes.  The flag
    is a no-op on event tasks, which have no PQ class.
    """
    task = TaskId.parse(task)
    counts = matrix.counts
    row_totals = counts.sum(axis=1)
    diag = np.diag(counts)
    se_classes = np.arange(1, counts.shape[0])
    if exclude_pq and task.level == "record":
        se_classes = se_classes[:-1]  # PQ is the last class on both record tasks
    n_normal = int(row_totals[0])
    n_other = int(row_totals[se_classes].sum())
    if n_normal == 0 or n_other == 0:
        raise UndefinedMetricError(
            "scores need at least one Normal and one scorable non-Normal sample")
    sp = counts[0, 0] / n_normal
    if macro:
        present = se_classes[row_totals[se_classes] > 0]
        se = float(np.mean(diag[present] / row_totals[present]))
    else:
        se = float(diag[se_classes].sum() / n_other)
    as_ = (se + sp) / 2.0
    hs = 0.0 if se + sp == 0 else 2.0 * se * sp / (se + sp)
    score = (as_ + hs) / 2.0
    recalls = tuple(float(diag[i] / row_totals[i]) if row_totals[i] else 0.0
                    for i in range(counts.shape[0]))
    return ScoreReport(task=task, se=float(se), sp=float(sp), as_=float(as_),
                       hs=float(hs), score=float(score),
                       per_class_recall=recalls, n_samples=matrix.total,
                       gamma=gamma)


def check_scores(se: float, sp: float, as_: float, hs: float, score: float,
                 tol: float = 0.005) -> list:
    """Cross-check a published results row against the metric identities.

    Recomputes AS, HS, and Score from the row's own SE/SP and returns a
    message per field that disagrees beyond ``tol`` (which covers the
    rounding of SE/SP to 3 decimals).  An empty list means consistent.
    """
    expect_as = (se + sp) / 2.0
    expect_hs = 0.0 if se + sp == 0 else 2.0 * se * sp / (se + sp)
    problems = []
    if abs(as_ - expect_as) > tol:
        problems.append(f"as: stated {as_:.4f} but SE/SP give {expect_as:.4f}")
    if abs(hs - expect_hs) > tol:
        problems.append(f"hs: stated {hs:.4f} but SE/SP give {expect_hs:.4f}")
    expect_score = ((as_ if abs(as_ - expect_as) <= tol else expect_as)
                    + (hs if abs(hs - expect_hs) <= tol else expect_hs)) / 2.0
    if abs(score - expect_score) > tol:
        problems.append(
            f"score: stated {score:.4f} but components give {expect_score:.4f}")
    return problems


_REPORT_FIELDS = ("task", "gamma", "se", "sp", "as", "hs", "score", "n_samples")


def _report_row(r: ScoreReport) -> dict:
    return {
        "task": r.task.value,
        "gamma": None if r.gamma is None else round(float(r.gamma), 4),
        "se": round(r.se, 4), "sp": round(r.sp, 4), "as": round(r.as_, 4),
        "hs": round(r.hs, 4), "score": round(r.score, 4),
        "n_samples": r.n_samples,
    }


def report(reports, fmt: str = "json") -> str:
    """Render reports as a JSON or CSV document with a fixed field order
    and 4-decimal metric values."""
    rows = [_report_row(r) for r in reports]
    if fmt == "json":
        return json.dumps({"reports": rows}, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_REPORT_FIELDS)
        for row in rows:
            writer.writerow(
                ["" if row[f] is None else
                 (f"{row[f]:.4f}" if isinstance(row[f], float) else row[f])
                 for f in _REPORT_FIELDS])
        return buf.getvalue()
    raise UsageError(f"unknown report format {fmt!r}; expected json or csv")


def parse_report(document: str, fmt: str = "json") -> list:
    """Inverse of report(); per-class recalls are not serialized and come
    back empty."""
    out = []
    if fmt == "json":
        rows = json.loads(document)["reports"]
    elif fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(document)))
    else:
        raise UsageError(f"unknown report format {fmt!r}; expected json or csv")
    for row in rows:
        gamma = row.get("gamma")
        gamma = None if gamma in (None, "") else float(gamma)
        out.append(ScoreReport(
            task=TaskId.parse(row["task"]), se=float(row["se"]),
            sp=float(row["sp"]), as_=float(row["as"]), hs=float(row["hs"]),
            score=float(row["score"]), per_class_recall=(),
            n_samples=int(row["n_samples"]), gamma=gamma))
    return out


def gamma_sweep(task, gammas, train_manifest, val_manifest, config,
                model_config=None, cache_dir=None) -> list:
    """Train and score once per focusing value, sharing seeds and data.

    Every leg rebuilds the model from the same init seed so the rows
    differ only through the loss's focusing parameter.
    """
    from . import trainer as _trainer  # deferred: trainer imports this module

    task = TaskId.parse(task)
    out = []
    for gamma in gammas:
        leg_cfg = replace(config, task=task.value, gamma=float(gamma))
        model, _ = _trainer.train_task(train_manifest, val_manifest, leg_cfg,
                                       model_config=model_config,
                                       cache_dir=cache_dir)
        rep = _trainer.evaluate(model, val_manifest, leg_cfg.task,
                                cache_dir=cache_dir)
        out.append(replace(rep, gamma=float(gamma)))
    return out
