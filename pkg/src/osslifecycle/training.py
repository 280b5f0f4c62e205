"""Training: imbalance handling, AdamW, early stopping and grid search for the four models."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import time
import warnings
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .evaluation import classification_scores
from .features import FeatureSet
from .nn.grad import forward_backward
from .nn.losses import FocalLossConfig, focal_loss
from .nn.models import HeavyConfig, HeavyModel, MLP, MlpConfig, build_model, expert_config, heavy_config, \
    light_config, predict_proba, stage1_config
from .schema import STAGE2_CLASSES, STAGE_ORDER, Stage

log = logging.getLogger(__name__)

TASKS = ("stage1", "heavy", "light", "expert")
DEFAULT_LEARNING_RATES = {"stage1": 8e-4, "heavy": 6e-4, "light": 8e-4, "expert": 8e-4}
SMOTE_TASKS = ("light", "expert")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergedError(FloatingPointError):
    pass


# --- task datasets -----------------------------------------------------------

@dataclasses.dataclass
class TaskDataset:
    """Inputs and relabeled integer targets for one model."""

    task: str
    repo_ids: list[str]
    inputs: tuple[np.ndarray, ...]
    targets: np.ndarray
    classes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def counts(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.n_classes)

    def subset(self, idx: np.ndarray) -> "TaskDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TaskDataset(self.task, [self.repo_ids[i] for i in idx], tuple(x[idx] for x in self.inputs),
                           self.targets[idx], self.classes)


TASK_CLASSES = {
    "stage1": ("rest", "contribMid"),
    "heavy": tuple(s.value for s in STAGE2_CLASSES),
    "light": tuple(s.value for s in STAGE2_CLASSES),
    "expert": ("federation", "club"),
    "flat": tuple(s.value for s in STAGE_ORDER),  # the single-model baseline
}


def _task_target(task: str, label: Stage) -> int | None:
    if task == "stage1":
        return int(label is Stage.CONTRIB_MID)
    if task in ("heavy", "light"):
        return None if label is Stage.CONTRIB_MID else STAGE2_CLASSES.index(label)
    if task == "expert":
        if label is Stage.CLUB:
            return 1
        return 0 if label is Stage.FEDERATION else None
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def build_task_dataset(fs: FeatureSet, task: str) -> TaskDataset:
    """Select and relabel rows for ``task``; Heavy gets (sequence, tabular), the others tabular."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    keep, targets = [], []
    for i, label in enumerate(fs.labels):
        if label is None:
            raise ValueError(f"repository {fs.repo_ids[i]} has no label")
        t = _task_target(task, label)
        if t is not None:
            keep.append(i)
            targets.append(t)
    idx = np.asarray(keep, dtype=np.int64)
    inputs = (fs.sequences[idx], fs.tabular[idx]) if task == "heavy" else (fs.tabular[idx],)
    return TaskDataset(task, [fs.repo_ids[i] for i in idx], inputs, np.asarray(targets, dtype=np.int64),
                       TASK_CLASSES[task])


def default_model_config(task: str, input_dim: int = 263, **kw) -> MlpConfig | HeavyConfig:
    if task == "flat":
        return light_config(input_dim, n_classes=len(STAGE_ORDER), **kw)
    factories = {"stage1": stage1_config, "heavy": heavy_config, "light": light_config, "expert": expert_config}
    return factories[task](input_dim, **kw)


def with_dropout(cfg: MlpConfig | HeavyConfig, p: float) -> MlpConfig | HeavyConfig:
    if isinstance(cfg, HeavyConfig):
        return dataclasses.replace(cfg, transformer=dataclasses.replace(cfg.transformer, dropout=p),
                                   tabular=dataclasses.replace(cfg.tabular, dropout=p))
    return dataclasses.replace(cfg, dropout=p)


# --- imbalance handling ------------------------------------------------------

def make_class_weights(counts: Sequence[int] | np.ndarray) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``."""
    n_c = np.asarray(counts, dtype=np.float64)
    if n_c.ndim != 1 or n_c.size == 0:
        raise ValueError("need a 1-D array of class counts")
    if (n_c <= 0).any():
        raise ValueError(f"every class needs at least one sample, got counts {n_c.astype(int).tolist()}")
    return n_c.sum() / (n_c.size * n_c)


@dataclasses.dataclass(frozen=True)
class SmoteProvenance:
    base: np.ndarray  # index of the real row each synthetic row starts from
    neighbor: np.ndarray
    lam: np.ndarray


def apply_smote(rows: np.ndarray, target_count: int, k: int = 5, seed: int = 0,
                return_provenance: bool = False):
    """Oversample one class to ``target_count`` rows by interpolating towards nearest neighbours.

    The real rows come first, unchanged. Each synthetic row is
    ``a + lam * (b - a)`` with ``a`` a random real row, ``b`` one of its ``k``
    nearest same-class neighbours and ``lam ~ U[0, 1)``.
    """
    rows = np.asarray(rows)
    n = len(rows)
    if n < 2:
        raise ValueError(f"SMOTE needs at least 2 rows in the class, got {n}")
    if k >= n:
        warnings.warn(f"SMOTE k={k} lowered to {n - 1} for a class of {n} rows", RuntimeWarning, stacklevel=2)
        k = n - 1
    n_new = max(0, int(target_count) - n)
    rng = np.random.default_rng(seed)
    if n_new == 0:
        empty = SmoteProvenance(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        return (rows.copy(), empty) if return_provenance else rows.copy()
    _, nn = cKDTree(rows.astype(np.float64)).query(rows.astype(np.float64), k=k + 1)
    # drop self; with duplicate rows the self index may not be first, so filter explicitly
    neigh = np.array([[j for j in r if j != i][:k] for i, r in enumerate(nn)], dtype=np.int64)
    base = rng.integers(0, n, size=n_new)
    pick = neigh[base, rng.integers(0, k, size=n_new)]
    lam = rng.random(n_new)
    synth = rows[base] + lam[:, None].astype(rows.dtype) * (rows[pick] - rows[base])
    out = np.concatenate([rows, synth.astype(rows.dtype)], axis=0)
    if return_provenance:
        return out, SmoteProvenance(base, pick, lam)
    return out


def smote_task_dataset(ds: TaskDataset, k: int = 5, seed: int = 0) -> TaskDataset:
    """Oversample every minority class of a tabular task up to the majority count."""
    if len(ds.inputs) != 1:
        raise ValueError("SMOTE applies to tabular-only tasks")
    counts = ds.counts()
    target = int(counts.max())
    xs, ys, ids = [], [], []
    for c in range(ds.n_classes):
        sel = np.flatnonzero(ds.targets == c)
        rows = ds.inputs[0][sel]
        if counts[c] < target:
            rows = apply_smote(rows, target, k, seed + 7919 * (c + 1))
        xs.append(rows)
        ys.append(np.full(len(rows), c, dtype=np.int64))
        ids.extend(ds.repo_ids[i] for i in sel)
        ids.extend(f"smote:{ds.classes[c]}:{j}" for j in range(len(rows) - len(sel)))
    return TaskDataset(ds.task, ids, (np.concatenate(xs),), np.concatenate(ys), ds.classes)


def weighted_sampler(labels: Sequence[int] | np.ndarray, weights: Sequence[float] | np.ndarray, batch_size: int,
                     seed: int, n_draws: int | None = None) -> Iterator[np.ndarray]:
    """Yield batches of indices drawn with replacement, P(i) proportional to ``weights[labels[i]]``.

    ``n_draws`` defaults to one pass worth of draws (``len(labels)``).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    w = np.asarray(weights, dtype=np.float64)[labels]
    p = w / w.sum()
    rng = np.random.default_rng(seed)
    remaining = labels.size if n_draws is None else int(n_draws)
    while remaining > 0:
        size = min(batch_size, remaining)
        yield rng.choice(labels.size, size=size, replace=True, p=p)
        remaining -= size


# --- optimisation ------------------------------------------------------------

class AdamW:
    """Adam moments with decoupled weight decay: ``p <- p(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, model: MLP | HeavyModel, lr: float, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.model = model
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in model.named_parameters()}
        self.v = {n: np.zeros_like(p) for n, p in model.named_parameters()}

    def step(self, loss_lr: float | None = None) -> None:
        """One update; ``loss_lr`` overrides the step size of the gradient term only."""
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        glr = self.lr if loss_lr is None else loss_lr
        grads = dict(self.model.named_grads())
        for name, p in self.model.named_parameters():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= (glr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict[str, Any]:
        return {"name": "adamw", "lr": self.lr, "weight_decay": self.weight_decay,
                "beta1": self.betas[0], "beta2": self.betas[1], "eps": self.eps}


def global_grad_norm(model: MLP | HeavyModel) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for _, g in model.named_grads()))


def clip_grad_norm(model: MLP | HeavyModel, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(model)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, g in model.named_grads():
            g *= scale
    return norm


# --- training loop -----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    dropout: float = 0.1
    clip_norm: float = 1.0
    patience: int = 6
    max_epochs: int = 200
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    class_weighting: bool = True
    weighted_sampling: bool = True
    smote: bool | None = None  # None: on for the tabular-only Light and Expert tasks
    smote_k: int = 5
    loss: str = "focal"  # or "cross_entropy" (focal with alpha=1, gamma=0, used by the flat baseline)
    # "accuracy": strict validation-accuracy gains only; "accuracy_then_loss": equal accuracy with lower
    # validation loss also counts, so saturated accuracy does not freeze an under-trained model
    early_stop: str = "accuracy_then_loss"
    # an epoch draws max(N, min_batches * batch_size) weighted samples, so tiny training sets still
    # get several updates per epoch and patience is not spent after a handful of steps
    min_batches: int = 8

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalisation)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        if self.loss not in ("focal", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.early_stop not in ("accuracy", "accuracy_then_loss"):
            raise ValueError(f"unknown early-stop rule {self.early_stop!r}")

    @classmethod
    def for_task(cls, task: str, **kw) -> "TrainConfig":
        kw.setdefault("learning_rate", DEFAULT_LEARNING_RATES[task])
        return cls(**kw)

    def uses_smote(self, task: str) -> bool:
        return task in SMOTE_TASKS if self.smote is None else bool(self.smote)


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_balanced_accuracy: float
    val_macro_f1: float
    val_loss: float = 0.0
    seconds: float = 0.0


LOG_FIELDS = ("epoch", "train_loss", "val_accuracy", "val_balanced_accuracy", "val_macro_f1", "val_loss")


@dataclasses.dataclass
class TrainingLog:
    task: str
    epochs: list[EpochRecord] = dataclasses.field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    class_weights: list[float] = dataclasses.field(default_factory=list)
    train_size: int = 0

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.epochs:
                w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in LOG_FIELDS[1:]])


@dataclasses.dataclass
class TrainResult:
    model: MLP | HeavyModel
    log: TrainingLog
    train_config: TrainConfig

    def metadata(self) -> dict[str, Any]:
        return {"task": self.log.task, "best_epoch": self.log.best_epoch, "stop_reason": self.log.stop_reason,
                "train_config": dataclasses.asdict(self.train_config),
                "optimizer": {"name": "adamw", "beta1": ADAM_BETAS[0], "beta2": ADAM_BETAS[1], "eps": ADAM_EPS},
                "class_weights": self.log.class_weights, "classes": list(TASK_CLASSES[self.log.task])}


def predict_classes(model: MLP | HeavyModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    return _classes(predict_proba(model, inputs))


def _classes(p: np.ndarray) -> np.ndarray:
    return (p >= 0.5).astype(np.int64) if p.ndim == 1 else p.argmax(axis=1)


def _snapshot(model: MLP | HeavyModel) -> dict[str, np.ndarray]:
    return {n: v.copy() for n, v in itertools.chain(model.named_parameters(), model.named_buffers())}


def _restore(model: MLP | HeavyModel, snap: Mapping[str, np.ndarray]) -> None:
    for n, v in itertools.chain(model.named_parameters(), model.named_buffers()):
        v[...] = snap[n]


def train_model(train: TaskDataset, val: TaskDataset, model_cfg: MlpConfig | HeavyConfig,
                cfg: TrainConfig, log_path: str | Path | None = None,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit one model with early stopping on validation accuracy; returns the best-epoch weights."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation partitions must both be non-empty")
    if train.task != val.task:
        raise ValueError(f"train task {train.task!r} does not match validation task {val.task!r}")
    task = train.task
    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    if cfg.uses_smote(task):
        train = smote_task_dataset(train, cfg.smote_k, int(seeds[0]))
    counts = train.counts()
    weights = make_class_weights(counts)
    if cfg.loss == "focal":
        loss_cfg = FocalLossConfig(cfg.focal_alpha, cfg.focal_gamma,
                                   tuple(weights) if cfg.class_weighting else None)
    else:
        loss_cfg = FocalLossConfig(1.0, 0.0, tuple(weights) if cfg.class_weighting else None)
    sample_w = weights if cfg.weighted_sampling else np.ones_like(weights)

    model = build_model(with_dropout(model_cfg, cfg.dropout), seed=int(seeds[1]))
    opt = AdamW(model, cfg.learning_rate, cfg.weight_decay)
    drop_rng = np.random.default_rng(int(seeds[2]))
    sample_seed = int(seeds[3])

    tlog = TrainingLog(task, class_weights=[float(w) for w in weights], train_size=len(train))
    best_acc, best_loss, best_snap, since_best = -1.0, math.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses, sizes = [], []
        draws = max(len(train), cfg.min_batches * cfg.batch_size)
        for step, idx in enumerate(weighted_sampler(train.targets, sample_w, cfg.batch_size,
                                                    sample_seed + epoch, n_draws=draws)):
            if len(idx) < 2:
                continue
            xb = tuple(x[idx] for x in train.inputs)
            loss, _ = forward_backward(model, xb, targets=train.targets[idx], loss=loss_cfg,
                                       training=True, rng=drop_rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"{task}: non-finite loss at epoch {epoch}, step {step}; gradient norm "
                    f"{global_grad_norm(model):.3g}, learning rate {cfg.learning_rate}")
            clip_grad_norm(model, cfg.clip_norm)
            opt.step()
            losses.append(loss)
            sizes.append(len(idx))
        probs = predict_proba(model, val.inputs)
        scores = classification_scores(val.targets, _classes(probs), val.n_classes)
        val_loss = focal_loss(probs, val.targets, loss_cfg)
        rec = EpochRecord(epoch, float(np.average(losses, weights=sizes)), scores["accuracy"],
                          scores["balanced_accuracy"], scores["macro_f1"], val_loss, time.perf_counter() - t0)
        tlog.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("%s epoch %d loss %.5f val_acc %.4f", task, epoch, rec.train_loss, rec.val_accuracy)
        better = rec.val_accuracy > best_acc or (
            cfg.early_stop == "accuracy_then_loss" and rec.val_accuracy == best_acc and val_loss < best_loss)
        if better:
            best_acc, best_loss, best_snap, since_best = rec.val_accuracy, val_loss, _snapshot(model), 0
            tlog.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                tlog.stop_reason = f"no validation improvement for {cfg.patience} epochs"
                break
    else:
        tlog.stop_reason = f"epoch cap {cfg.max_epochs} reached"
    _restore(model, best_snap)
    if log_path is not None:
        tlog.to_csv(log_path)
    return TrainResult(model, tlog, cfg)


# --- grid search -------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Trial:
    index: int
    params: dict[str, Any]
    balanced_accuracy: float
    macro_f1: float
    best_epoch: int


@dataclasses.dataclass
class TuneResult:
    best_config: TrainConfig
    best_index: int
    trials: list[Trial]

    def to_csv(self, path: str | Path) -> None:
        keys = sorted({k for t in self.trials for k in t.params})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", *keys, "val_balanced_accuracy", "val_macro_f1", "best_epoch", "selected"])
            for t in self.trials:
                w.writerow([t.index, *(t.params.get(k, "") for k in keys), repr(t.balanced_accuracy),
                            repr(t.macro_f1), t.best_epoch, int(t.index == self.best_index)])


def expand_grid(space: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("hyperparameter grid is empty")
    unknown = set(space) - {f.name for f in dataclasses.fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown hyperparameters in grid: {sorted(unknown)}")
    keys = sorted(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def tune_hyperparameters(space: Mapping[str, Sequence[Any]], train: TaskDataset, val: TaskDataset,
                         model_cfg: MlpConfig | HeavyConfig, base: TrainConfig,
                         trial_path: str | Path | None = None,
                         trainer: Callable[..., TrainResult] = train_model) -> TuneResult:
    """Evaluate every grid point; pick the highest validation balanced accuracy, then macro F1.

    Full ties keep the earliest grid point.
    """
    trials, best_key, best_i = [], None, -1
    for i, params in enumerate(expand_grid(space)):
        cfg = dataclasses.replace(base, **params)
        res = trainer(train, val, model_cfg, cfg)
        b = res.log.best
        trials.append(Trial(i, params, b.val_balanced_accuracy, b.val_macro_f1, res.log.best_epoch))
        key = (b.val_balanced_accuracy, b.val_macro_f1)
        if best_key is None or key > best_key:
            best_key, best_i = key, i
    out = TuneResult(dataclasses.replace(base, **trials[best_i].params), best_i, trials)
    if trial_path is not None:
        out.to_csv(trial_path)
    return out
