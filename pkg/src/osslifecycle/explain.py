"""Attributions (gradient x input, Integrated Gradients, Shapley values), attention profiles,
category aggregation and category ablation."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .features import FeatureSet, sequence_channel_names, tabular_feature_names
from .nn.grad import GradientError, compute_gradients
from .nn.losses import FocalLossConfig
from .nn.models import HeavyModel, MLP, predict_logits
from .schema import CATEGORY_ORDER, METRIC_CATEGORY, Category

CROSS_CATEGORY = {
    "total_activity": Category.CONTRIBUTION,
    "engagement_ratio": Category.COMMUNITY,
    "review_efficiency": Category.PR_QA,
}


# --- category map ------------------------------------------------------------

def category_of(feature: str) -> Category:
    """Category of a tabular slot (``metric:stat``, ``cross:name``) or sequence channel (``metric:level``)."""
    head, _, tail = feature.partition(":")
    if head == "cross":
        if tail not in CROSS_CATEGORY:
            raise KeyError(f"unmapped cross feature {feature!r}")
        return CROSS_CATEGORY[tail]
    if head not in METRIC_CATEGORY:
        raise KeyError(f"unmapped feature {feature!r}")
    return METRIC_CATEGORY[head]


@dataclasses.dataclass(frozen=True)
class FeatureCategoryMap:
    tabular_names: tuple[str, ...]
    sequence_names: tuple[str, ...]

    @classmethod
    def default(cls, k: int = 6) -> "FeatureCategoryMap":
        return cls(tuple(tabular_feature_names(k)), tuple(sequence_channel_names()))

    @property
    def tabular(self) -> list[Category]:
        return [category_of(n) for n in self.tabular_names]

    @property
    def sequence(self) -> list[Category]:
        return [category_of(n) for n in self.sequence_names]

    def tabular_mask(self, cat: Category) -> np.ndarray:
        return np.array([c is cat for c in self.tabular])

    def sequence_mask(self, cat: Category) -> np.ndarray:
        return np.array([c is cat for c in self.sequence])

    def drop(self, cats: Sequence[Category]) -> "FeatureCategoryMap":
        """Map with every tabular slot of ``cats`` removed (sequence channels are zeroed, not removed)."""
        keep = [n for n in self.tabular_names if category_of(n) not in cats]
        return FeatureCategoryMap(tuple(keep), self.sequence_names)


# --- gradient-based attributions ---------------------------------------------

def predicted_class(model: MLP | HeavyModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    z = predict_logits(model, inputs)
    if model.output_activation == "sigmoid":
        return (z[:, 0] >= 0).astype(np.int64)
    return z.argmax(axis=1)


def class_logit(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], cls: np.ndarray) -> np.ndarray:
    """Logit of class ``cls`` per row; for a sigmoid head class 0's logit is ``-z``."""
    z = model.forward(tuple(inputs), training=False).astype(np.float64)
    cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (z.shape[0],))
    if model.output_activation == "sigmoid":
        return np.where(cls == 1, z[:, 0], -z[:, 0])
    return z[np.arange(z.shape[0]), cls]


def _logit_grads(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], cls: np.ndarray) -> tuple[np.ndarray, ...]:
    """Input gradients of the selected class logit (row-wise)."""
    model.zero_grad()
    z = model.forward(tuple(inputs), training=False)
    seed = np.zeros_like(z)
    rows = np.arange(z.shape[0])
    if model.output_activation == "sigmoid":
        seed[:, 0] = np.where(cls == 1, 1.0, -1.0)
    else:
        seed[rows, cls] = 1.0
    grads = model.backward(seed)
    for g in grads:
        if not np.isfinite(g).all():
            raise GradientError("non-finite input gradient")
    return grads


def gradient_input_attribution(model: MLP | HeavyModel, inputs: Sequence[np.ndarray],
                               targets: np.ndarray | None = None,
                               loss: FocalLossConfig = FocalLossConfig()) -> tuple[np.ndarray, ...]:
    """``|dL/dx * x|`` per input element, with L the focal loss of the given targets.

    Without ``targets`` the predicted-class logit is differentiated instead.
    The loss is a batch mean, so gradients are rescaled by N to be per-sample.
    """
    inputs = tuple(np.asarray(x) for x in inputs)
    if targets is None:
        grads = _logit_grads(model, inputs, predicted_class(model, inputs))
    else:
        g = compute_gradients(model, inputs, targets=np.asarray(targets), loss=loss, wrt="inputs")
        grads = tuple(g[n] * len(inputs[0]) for n in model.input_names)
    return tuple(np.abs(gx * x) for gx, x in zip(grads, inputs))


def integrated_gradients(model: MLP | HeavyModel, inputs: Sequence[np.ndarray],
                         baseline: Sequence[np.ndarray] | None = None, steps: int = 50,
                         target: np.ndarray | None = None, chunk: int = 256) -> tuple[np.ndarray, ...]:
    """Midpoint-Riemann Integrated Gradients of the target-class logit.

    ``target`` defaults to the class predicted at the input; ``baseline``
    defaults to zeros (the training mean in normalised space).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xs = tuple(np.asarray(x, dtype=model.dtype) for x in inputs)
    bs = tuple(np.zeros_like(x) for x in xs) if baseline is None else \
        tuple(np.broadcast_to(np.asarray(b, dtype=model.dtype), x.shape) for b, x in zip(baseline, xs))
    n = len(xs[0])
    cls = predicted_class(model, xs) if target is None else np.broadcast_to(np.asarray(target, np.int64), (n,))
    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    total = tuple(np.zeros(x.shape, dtype=np.float64) for x in xs)
    # rows of the path batch are (sample, step) pairs, processed in chunks
    pairs = [(i, a) for i in range(n) for a in range(steps)]
    for s in range(0, len(pairs), chunk):
        part = pairs[s:s + chunk]
        si = np.array([p[0] for p in part])
        al = alphas[[p[1] for p in part]]
        path = tuple((b[si] + al.reshape((-1,) + (1,) * (x.ndim - 1)) * (x[si] - b[si])).astype(model.dtype)
                     for x, b in zip(xs, bs))
        grads = _logit_grads(model, path, cls[si])
        for acc, g in zip(total, grads):
            np.add.at(acc, si, g.astype(np.float64))
    return tuple(acc / steps * (x.astype(np.float64) - b.astype(np.float64))
                 for acc, x, b in zip(total, xs, bs))


def ig_completeness(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], attributions: Sequence[np.ndarray],
                    baseline: Sequence[np.ndarray] | None = None, target: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (sum of attributions, F(x) - F(baseline)) for the completeness check."""
    xs = tuple(np.asarray(x, dtype=model.dtype) for x in inputs)
    bs = tuple(np.zeros_like(x) for x in xs) if baseline is None else \
        tuple(np.broadcast_to(np.asarray(b, dtype=model.dtype), x.shape) for b, x in zip(baseline, xs))
    cls = predicted_class(model, xs) if target is None else target
    total = sum(a.reshape(len(a), -1).sum(axis=1) for a in attributions)
    return total, class_logit(model, xs, cls) - class_logit(model, bs, cls)


# --- Shapley values ----------------------------------------------------------

EXACT_MAX_FEATURES = 12


def _exact_shapley(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d = x.size
    masks = ((np.arange(2 ** d)[:, None] >> np.arange(d)) & 1).astype(bool)
    values = np.asarray(f(np.where(masks, x, ref)), dtype=np.float64)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0
                       for s in range(d + 1)])
    phi = np.zeros(d)
    codes = np.arange(2 ** d)
    for i in range(d):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def _sampled_shapley(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, ref: np.ndarray, n_samples: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Antithetic permutation sampling: each drawn order is also used reversed."""
    d = x.size
    n_pairs = max(1, n_samples // 2)
    perms = np.array([rng.permutation(d) for _ in range(n_pairs)])
    perms = np.concatenate([perms, perms[:, ::-1]])
    phi = np.zeros(d)
    # rows: for each permutation, the d+1 prefixes
    for s in range(0, len(perms), max(1, 4096 // (d + 1))):
        block = perms[s:s + max(1, 4096 // (d + 1))]
        m = len(block)
        masks = np.zeros((m, d + 1, d), dtype=bool)
        for j in range(d):
            masks[np.arange(m), j + 1:, block[:, j]] = True
        vals = np.asarray(f(np.where(masks.reshape(-1, d), x, ref)), dtype=np.float64).reshape(m, d + 1)
        marg = np.diff(vals, axis=1)  # marginal of block[:, j] at position j
        np.add.at(phi, block.ravel(), marg.ravel())
    return phi / len(perms)


def shap_values(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, background: np.ndarray,
                n_samples: int = 4096, seed: int = 0, mode: str = "auto") -> np.ndarray:
    """Shapley values of ``f`` at ``x`` with absent features set to the background mean.

    ``f`` maps an (M, d) array to M scalar outputs. ``mode`` is ``"exact"``,
    ``"sampling"`` or ``"auto"`` (exact when d <= 12). Efficiency holds as
    ``sum(phi) == f(x) - f(mean(background))``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    if background.shape[1] != x.size:
        raise ValueError("background and sample have different feature counts")
    ref = background.mean(axis=0)
    if mode not in ("auto", "exact", "sampling"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" and x.size > EXACT_MAX_FEATURES:
        raise ValueError(f"exact Shapley enumeration is limited to {EXACT_MAX_FEATURES} features, got {x.size}")
    if mode == "exact" or (mode == "auto" and x.size <= EXACT_MAX_FEATURES):
        return _exact_shapley(f, x, ref)
    return _sampled_shapley(f, x, ref, n_samples, np.random.default_rng(seed))


def model_logit_fn(model: MLP, cls: int) -> Callable[[np.ndarray], np.ndarray]:
    """Scalar function for Shapley estimation: the ``cls`` logit of a tabular model."""
    def f(rows: np.ndarray) -> np.ndarray:
        z = predict_logits(model, (rows.astype(model.dtype),), batch_size=1024).astype(np.float64)
        if model.output_activation == "sigmoid":
            return z[:, 0] if cls == 1 else -z[:, 0]
        return z[:, cls]
    return f


def shap_attribution(model: MLP, x: np.ndarray, background: np.ndarray, n_samples: int = 64,
                     seed: int = 0) -> np.ndarray:
    """Per-sample Shapley values (rows of ``x``) of each sample's predicted-class logit."""
    x = np.atleast_2d(x)
    cls = predicted_class(model, (x,))
    return np.stack([shap_values(model_logit_fn(model, int(c)), row, background, n_samples, seed + i)
                     for i, (row, c) in enumerate(zip(x, cls))])


# --- attention and aggregation -----------------------------------------------

def attention_profile(model: HeavyModel, sequences: np.ndarray, tabular: np.ndarray | None = None,
                      batch_size: int = 64) -> np.ndarray:
    """Mean attention received per month (over layers, heads, queries and samples), summing to 1."""
    sequences = np.asarray(sequences, dtype=model.dtype)
    if tabular is None:
        tabular = np.zeros((len(sequences), model.cfg.tabular.input_dim), dtype=model.dtype)
    total = np.zeros(sequences.shape[1])
    for s in range(0, len(sequences), batch_size):
        model.forward((sequences[s:s + batch_size], np.asarray(tabular[s:s + batch_size], dtype=model.dtype)))
        att = model.attention_maps().astype(np.float64)  # (N, L, H, Tq, Tk)
        total += att.sum(axis=(0, 1, 2, 3))
    return total / total.sum()


def recent_mass(profile: np.ndarray, months: int = 8) -> float:
    return float(np.sum(profile[-months:]) / np.sum(profile))


@dataclasses.dataclass
class AttributionReport:
    model: str
    method: str
    feature_names: list[str]
    feature_scores: np.ndarray  # mean |a_f| over the evaluated samples
    categories: dict[str, float]  # normalised I_c
    raw_categories: dict[str, float]
    monthly: list[float] | None = None
    recency_ratio: float | None = None
    flags: list[str] = dataclasses.field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {"model": self.model, "method": self.method, "categories": self.categories,
                "raw_categories": self.raw_categories, "monthly": self.monthly,
                "recency_ratio": self.recency_ratio, "flags": self.flags,
                "features": {n: float(v) for n, v in zip(self.feature_names, self.feature_scores)}}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "mean_abs_attribution", "category"])
            for n, v in zip(self.feature_names, self.feature_scores):
                w.writerow([n, repr(float(v)), category_of(n).value])


def category_importance(scores: Mapping[str, float]) -> tuple[dict[str, float], dict[str, float], list[str]]:
    """``I_c`` = mean of the per-feature scores in each category, then normalised to sum 1.

    Returns (normalised, raw, flags). Categories with no features are left
    out; all-zero scores skip normalisation and add a flag.
    """
    buckets: dict[Category, list[float]] = {}
    for name, v in scores.items():
        buckets.setdefault(category_of(name), []).append(float(v))
    raw = {c.value: float(np.mean(buckets[c])) for c in CATEGORY_ORDER if c in buckets}
    total = sum(raw.values())
    if total == 0:
        return dict(raw), raw, ["all attributions are zero; normalisation skipped"]
    return {k: v / total for k, v in raw.items()}, raw, []


RECENT_MONTHS = (0, 12)  # months before the window end, half-open
EARLY_MONTHS = (18, 24)


def temporal_importance(seq_attr: np.ndarray, recent: tuple[int, int] = RECENT_MONTHS,
                        early: tuple[int, int] = EARLY_MONTHS) -> tuple[np.ndarray, float]:
    """Per-month mean |attribution| over channels (and samples) plus the recent/early ratio.

    Index ``T-1`` is the last month of the window; ``recent=(0, 12)`` covers
    the twelve most recent months and ``early=(18, 24)`` the six oldest.
    """
    a = np.abs(np.asarray(seq_attr, dtype=np.float64))
    if a.ndim == 2:
        a = a[None]
    curve = a.mean(axis=(0, 2))
    t = curve.size

    def span(r: tuple[int, int]) -> np.ndarray:
        return curve[t - r[1]:t - r[0]]

    den = span(early).mean()
    ratio = float(span(recent).mean() / den) if den > 0 else math.inf
    return curve, ratio


def _feature_scores(model: MLP | HeavyModel, attrs: Sequence[np.ndarray], cmap: FeatureCategoryMap
                    ) -> tuple[list[str], np.ndarray]:
    """Mean |a| per named feature; a sequence channel's score sums |a| over months."""
    names, scores = [], []
    for inp, a in zip(model.input_names, attrs):
        a = np.abs(a)
        if inp == "sequence":
            names += list(cmap.sequence_names)
            scores.append(a.sum(axis=1).mean(axis=0))
        else:
            names += list(cmap.tabular_names)
            scores.append(a.mean(axis=0))
    return names, np.concatenate(scores)


def attribute_model(name: str, model: MLP | HeavyModel, inputs: Sequence[np.ndarray], method: str,
                    cmap: FeatureCategoryMap, targets: np.ndarray | None = None, steps: int = 50,
                    background: np.ndarray | None = None, shap_samples: int = 64, seed: int = 0
                    ) -> AttributionReport:
    if method == "grad_input":
        attrs = gradient_input_attribution(model, inputs, targets)
    elif method == "ig":
        attrs = integrated_gradients(model, inputs, steps=steps)
    elif method == "shap":
        if len(inputs) != 1:
            raise ValueError("Shapley attribution is for tabular models")
        bg = background if background is not None else inputs[0]
        attrs = (shap_attribution(model, inputs[0], bg, shap_samples, seed),)
    else:
        raise ValueError(f"unknown attribution method {method!r}")
    names, scores = _feature_scores(model, attrs, cmap)
    norm, raw, flags = category_importance(dict(zip(names, scores)))
    monthly = ratio = None
    if "sequence" in model.input_names:
        curve, ratio = temporal_importance(attrs[model.input_names.index("sequence")])
        monthly = [float(v) for v in curve]
    return AttributionReport(name, method, names, scores, norm, raw, monthly, ratio, flags)


def combine_categories(reports: Sequence[AttributionReport]) -> dict[str, float]:
    """Mean of the per-model normalised category importances."""
    keys = [c.value for c in CATEGORY_ORDER if any(c.value in r.categories for r in reports)]
    return {k: float(np.mean([r.categories.get(k, 0.0) for r in reports])) for k in keys}


def category_heatmap(reports: Sequence[AttributionReport]) -> dict[str, Any]:
    """Category x model matrix payload."""
    cats = [c.value for c in CATEGORY_ORDER]
    return {"categories": cats, "models": [r.model for r in reports],
            "values": [[r.categories.get(c, 0.0) for r in reports] for c in cats]}


# --- ablation ----------------------------------------------------------------

def ablate_features(fs: FeatureSet, cmap: FeatureCategoryMap, cats: Sequence[Category]) -> FeatureSet:
    """Drop the tabular slots of ``cats`` and zero their sequence channels."""
    keep = np.array([category_of(n) not in cats for n in cmap.tabular_names])
    zero = np.array([category_of(n) in cats for n in cmap.sequence_names])
    if keep.all() and not zero.any():
        raise ValueError(f"categories {[c.value for c in cats]} have no features")
    seq = np.array(fs.sequences, copy=True)
    seq[..., zero] = 0.0
    return FeatureSet(list(fs.repo_ids), seq, np.ascontiguousarray(fs.tabular[:, keep]), list(fs.labels))


@dataclasses.dataclass
class AblationResult:
    base_accuracy: float
    accuracy: dict[str, float]
    drop: dict[str, float]
    importance: dict[str, float]
    spearman: float | None

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "accuracy", "accuracy_drop", "attribution_importance"])
            for c in self.accuracy:
                w.writerow([c, repr(self.accuracy[c]), repr(self.drop[c]), repr(self.importance.get(c, ""))])


def rank_correlation(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    keys = sorted(set(a) & set(b))
    if len(keys) < 2:
        raise ValueError("need at least two shared categories for a rank correlation")
    rho = spearmanr([a[k] for k in keys], [b[k] for k in keys]).statistic
    return float(rho)


def ablation_study(train: FeatureSet, val: FeatureSet, test: FeatureSet,
                   evaluate: Callable[[FeatureSet, FeatureSet, FeatureSet], float],
                   categories: Sequence[Category] = CATEGORY_ORDER,
                   importance: Mapping[str, float] | None = None,
                   cmap: FeatureCategoryMap | None = None, base_accuracy: float | None = None) -> AblationResult:
    """Retrain and score with each category removed in turn.

    ``evaluate(train, val, test)`` trains the full hierarchy on the given
    feature sets (fixed seeds) and returns test accuracy.
    """
    cmap = cmap or FeatureCategoryMap.default()
    base = evaluate(train, val, test) if base_accuracy is None else base_accuracy
    acc, drop = {}, {}
    for cat in categories:
        parts = [ablate_features(x, cmap, [cat]) for x in (train, val, test)]
        acc[cat.value] = float(evaluate(*parts))
        drop[cat.value] = float(base - acc[cat.value])
    rho = rank_correlation(importance, drop) if importance else None
    return AblationResult(float(base), acc, drop, dict(importance or {}), rho)


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
