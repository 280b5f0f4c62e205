"""Confusion matrices, per-class and aggregate metrics, and calibration error."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .schema import STAGE_ORDER, Stage

STAGE_NAMES = tuple(s.value for s in STAGE_ORDER)
DEFAULT_ECE_BINS = 15


@dataclasses.dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (len(self.classes), len(self.classes)) or (c < 0).any():
            raise ValueError("confusion matrix must be square, non-negative and match the class list")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *(int(v) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        classes = tuple(rows[0][1:])
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), classes)


def _as_names(labels: Sequence[Any]) -> list[str]:
    return [v.value if isinstance(v, Stage) else str(v) for v in labels]


def confusion_matrix(true: Sequence[Any], pred: Sequence[Any], classes: Sequence[str] = STAGE_NAMES
                     ) -> ConfusionMatrix:
    if len(true) != len(pred):
        raise ValueError(f"label lists differ in length: {len(true)} vs {len(pred)}")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    try:
        ti = np.array([index[v] for v in _as_names(true)], dtype=np.int64)
        pi = np.array([index[v] for v in _as_names(pred)], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not one of {list(classes)}") from None
    np.add.at(counts, (ti, pi), 1)
    return ConfusionMatrix(counts, tuple(classes))


def confusion_from_indices(true: np.ndarray, pred: np.ndarray, n_classes: int) -> ConfusionMatrix:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return ConfusionMatrix(counts, tuple(str(i) for i in range(n_classes)))


@dataclasses.dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    tp: int
    fp: int
    fn: int
    flags: tuple[str, ...] = ()


def _safe_div(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def per_class_metrics(cm: ConfusionMatrix) -> dict[str, ClassMetrics]:
    """Precision/recall/F1 per class; zero denominators give 0 and a flag."""
    c = cm.counts
    out = {}
    for i, name in enumerate(cm.classes):
        tp = int(c[i, i])
        fp = int(c[:, i].sum() - tp)
        fn = int(c[i, :].sum() - tp)
        flags: list[str] = []
        p = _safe_div(tp, tp + fp, "precision_undefined", flags)
        r = _safe_div(tp, tp + fn, "recall_undefined", flags)
        f1 = _safe_div(2 * p * r, p + r, "f1_undefined", flags)
        out[name] = ClassMetrics(p, r, f1, tp + fn, tp, fp, fn, tuple(flags))
    return out


def aggregate_metrics(cm: ConfusionMatrix, balanced: str = "mean_recall") -> dict[str, float]:
    """Accuracy, balanced accuracy, macro F1 and support-weighted F1.

    ``balanced="mean_recall"`` (default) averages per-class recall;
    ``balanced="literal"`` averages the per-class one-vs-rest accuracy
    ``(TP_c + TN_c) / N``.
    """
    per = per_class_metrics(cm)
    n = cm.total
    if n == 0:
        raise ValueError("empty confusion matrix")
    support = cm.support()
    f1 = np.array([per[c].f1 for c in cm.classes])
    if balanced == "mean_recall":
        present = support > 0
        recalls = np.array([per[c].recall for c in cm.classes])
        bal = float(recalls[present].mean()) if present.any() else 0.0
    elif balanced == "literal":
        tn = np.array([n - per[c].tp - per[c].fp - per[c].fn for c in cm.classes])
        tp = np.array([per[c].tp for c in cm.classes])
        bal = float(np.mean((tp + tn) / n))
    else:
        raise ValueError(f"unknown balanced-accuracy mode {balanced!r}")
    return {
        "accuracy": float(np.trace(cm.counts) / n),
        "balanced_accuracy": bal,
        "macro_f1": float(f1.mean()),
        "weighted_f1": float(np.sum(support / n * f1)),
        "macro_precision": float(np.mean([per[c].precision for c in cm.classes])),
        "macro_recall": float(np.mean([per[c].recall for c in cm.classes])),
        "weighted_precision": float(np.sum(support / n * np.array([per[c].precision for c in cm.classes]))),
        "weighted_recall": float(np.sum(support / n * np.array([per[c].recall for c in cm.classes]))),
    }


def classification_scores(true: np.ndarray, pred: np.ndarray, n_classes: int) -> dict[str, float]:
    """Aggregate metrics from integer label arrays."""
    return aggregate_metrics(confusion_from_indices(true, pred, n_classes))


@dataclasses.dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


def ece(confidences: Sequence[float], correct: Sequence[bool], n_bins: int = DEFAULT_ECE_BINS
        ) -> tuple[float, list[CalibrationBin]]:
    """Expected calibration error over equal-width, right-inclusive bins on [0, 1].

    Bin m covers ``((m-1)/M, m/M]``; a confidence of exactly 0 falls in the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if conf.shape != ok.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    n = conf.size
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    table = []
    for m in range(n_bins):
        sel = idx == m
        cnt = int(sel.sum())
        if cnt:
            mc, acc = float(conf[sel].mean()), float(ok[sel].mean())
            total += cnt / n * abs(acc - mc)
        else:
            mc = acc = 0.0
        table.append(CalibrationBin(m / n_bins, (m + 1) / n_bins, cnt, mc, acc))
    return float(total), table


@dataclasses.dataclass
class MetricReport:
    accuracy: float
    balanced_accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: dict[str, ClassMetrics]
    ece: float | None = None
    ece_bins: list[CalibrationBin] = dataclasses.field(default_factory=list)
    extra: dict[str, float] = dataclasses.field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "per_class": {k: dataclasses.asdict(v) | {"flags": list(v.flags)} for k, v in self.per_class.items()},
            "ece": self.ece,
            "ece_bins": [dataclasses.asdict(b) for b in self.ece_bins],
            "extra": dict(self.extra),
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["class", "precision", "recall", "f1", "support"])
                for name, m in self.per_class.items():
                    w.writerow([name, repr(m.precision), repr(m.recall), repr(m.f1), m.support])
                for key in ("accuracy", "balanced_accuracy", "macro_f1", "weighted_f1"):
                    w.writerow([key, "", "", repr(getattr(self, key)), ""])


def metric_report(cm: ConfusionMatrix, confidences: Sequence[float] | None = None,
                  correct: Sequence[bool] | None = None, n_bins: int = DEFAULT_ECE_BINS,
                  balanced: str = "mean_recall") -> MetricReport:
    agg = aggregate_metrics(cm, balanced)
    rep = MetricReport(agg["accuracy"], agg["balanced_accuracy"], agg["macro_f1"], agg["weighted_f1"],
                       per_class_metrics(cm), extra={k: v for k, v in agg.items() if k not in (
                           "accuracy", "balanced_accuracy", "macro_f1", "weighted_f1")})
    if confidences is not None and correct is not None:
        rep.ece, rep.ece_bins = ece(confidences, correct, n_bins)
    return rep


def report_from_json(obj: Mapping[str, Any]) -> MetricReport:
    per = {k: ClassMetrics(**{**v, "flags": tuple(v.get("flags", ()))}) for k, v in obj["per_class"].items()}
    return MetricReport(obj["accuracy"], obj["balanced_accuracy"], obj["macro_f1"], obj["weighted_f1"], per,
                        obj.get("ece"), [CalibrationBin(**b) for b in obj.get("ece_bins", [])],
                        dict(obj.get("extra", {})))
