"""Glue for whole-hierarchy training, the flat baseline and evaluation on feature sets."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .evaluation import ConfusionMatrix, MetricReport, STAGE_NAMES, confusion_matrix, metric_report
from .features import FeatureSet
from .nn.models import MLP, MlpConfig, HeavyConfig, predict_proba
from .pipeline import MODEL_NAMES, BatchResult, HierarchyModels, RoutingThresholds, calibrate, predict_batch
from .schema import STAGE_ORDER, Stage
from .training import TASKS, TaskDataset, TrainConfig, TrainResult, build_task_dataset, default_model_config, \
    train_model

log = logging.getLogger(__name__)


@dataclasses.dataclass
class HierarchyTraining:
    models: HierarchyModels
    results: dict[str, TrainResult]

    def metadata(self) -> dict[str, dict[str, Any]]:
        return {name: r.metadata() for name, r in self.results.items()}


def train_hierarchy(train: FeatureSet, val: FeatureSet, seed: int = 0,
                    overrides: Mapping[str, Mapping[str, Any]] | None = None,
                    model_configs: Mapping[str, MlpConfig | HeavyConfig] | None = None,
                    tasks: tuple[str, ...] = TASKS, log_dir: str | Path | None = None,
                    calibrate_heads: bool = False,
                    on_epoch: Callable[[str, Any], None] | None = None) -> HierarchyTraining:
    """Train the models independently; each gets ``seed + position in TASKS`` unless overridden."""
    overrides = overrides or {}
    model_configs = model_configs or {}
    dim = train.tabular.shape[1]
    results = {}
    for task in tasks:
        tr, va = build_task_dataset(train, task), build_task_dataset(val, task)
        kw = {"seed": seed + TASKS.index(task), **overrides.get(task, {})}
        cfg = TrainConfig.for_task(task, **kw)
        mcfg = model_configs.get(task) or default_model_config(task, dim)
        path = Path(log_dir) / f"{task}_training_log.csv" if log_dir is not None else None
        cb = (lambda rec, _t=task: on_epoch(_t, rec)) if on_epoch else None
        results[task] = train_model(tr, va, mcfg, cfg, log_path=path, on_epoch=cb)
        if calibrate_heads:
            calibrate(results[task].model, va.inputs, va.targets)
        log.info("%s: best epoch %d, val acc %.4f", task, results[task].log.best_epoch,
                 results[task].log.best.val_accuracy)
    models = HierarchyModels(**{t: results[t].model for t in MODEL_NAMES}, calibrated=calibrate_heads) \
        if set(MODEL_NAMES) <= set(results) else None
    return HierarchyTraining(models, results)


def flat_task_dataset(fs: FeatureSet) -> TaskDataset:
    """All four stages as one softmax task over the tabular features, in reporting order."""
    names = tuple(s.value for s in STAGE_ORDER)
    targets = np.array([STAGE_ORDER.index(lbl) for lbl in fs.labels], dtype=np.int64)
    return TaskDataset("flat", list(fs.repo_ids), (fs.tabular,), targets, names)


def train_flat_baseline(train: FeatureSet, val: FeatureSet, seed: int = 0, **overrides) -> TrainResult:
    """Single MLP with the Light architecture, plain cross-entropy and uniform sampling."""
    cfg = TrainConfig(**{"learning_rate": 8e-4, "seed": seed, "loss": "cross_entropy", "class_weighting": False,
                         "weighted_sampling": False, "smote": False, **overrides})
    mcfg = default_model_config("flat", train.tabular.shape[1])
    return train_model(flat_task_dataset(train), flat_task_dataset(val), mcfg, cfg)


def predict_flat(model: MLP, fs: FeatureSet) -> list[Stage]:
    p = predict_proba(model, (fs.tabular,))
    return [STAGE_ORDER[k] for k in p.argmax(axis=1)]


@dataclasses.dataclass
class Evaluation:
    report: MetricReport
    confusion: ConfusionMatrix
    batch: BatchResult


def evaluate_pipeline(fs: FeatureSet, models: HierarchyModels,
                      thresholds: RoutingThresholds = RoutingThresholds(), n_bins: int = 15,
                      balanced: str = "mean_recall") -> Evaluation:
    """Run the hierarchy over a labeled feature set and score it."""
    batch = predict_batch(fs, models, thresholds)
    truth = dict(zip(fs.repo_ids, fs.labels))
    true = [truth[t.repo_id] for t in batch.traces]
    pred = [t.final for t in batch.traces]
    cm = confusion_matrix(true, pred, STAGE_NAMES)
    conf = [t.confidence for t in batch.traces]
    ok = [a is b for a, b in zip(true, pred)]
    rep = metric_report(cm, conf, ok, n_bins, balanced)
    routes: dict[str, int] = {}
    for t in batch.traces:
        routes[t.route] = routes.get(t.route, 0) + 1
    rep.extra.update({f"route:{k}": float(v) for k, v in sorted(routes.items())})
    return Evaluation(rep, cm, batch)


def mean_test_accuracy(train: FeatureSet, val: FeatureSet, test: FeatureSet, seeds: tuple[int, ...] = (0,),
                       model_configs: Mapping[str, MlpConfig | HeavyConfig] | None = None,
                       thresholds: RoutingThresholds = RoutingThresholds(), calibrate_heads: bool = False) -> float:
    """Test accuracy of the hierarchy trained once per seed, averaged.

    Used as the ablation scorer: a single training run moves accuracy by about
    as much as removing a weak category does, so several seeds are pooled.
    """
    accs = []
    for s in seeds:
        h = train_hierarchy(train, val, seed=s, model_configs=model_configs, calibrate_heads=calibrate_heads)
        accs.append(evaluate_pipeline(test, h.models, thresholds).report.accuracy)
    return float(np.mean(accs))


def score_labels(true: list[Stage], pred: list[Stage]) -> MetricReport:
    return metric_report(confusion_matrix(true, pred, STAGE_NAMES))
