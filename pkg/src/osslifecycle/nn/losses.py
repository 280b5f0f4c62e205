"""Focal losses on probabilities and their logit gradients."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .layers import sigmoid, softmax

PROB_CLIP = 1e-7


@dataclasses.dataclass(frozen=True)
class FocalLossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if any(v <= 0 for v in w):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", w)


def _true_class_prob(probs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, int]:
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim == 1:
        n_classes = 2
        if targets.size and (targets.min() < 0 or targets.max() > 1):
            raise ValueError("binary targets must be 0 or 1")
        return np.where(targets == 1, probs, 1.0 - probs), n_classes
    n_classes = probs.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"target index out of range for {n_classes} classes")
    return probs[np.arange(len(targets)), targets], n_classes


def _weights(cfg: FocalLossConfig, targets: np.ndarray, n_classes: int) -> np.ndarray:
    if cfg.class_weights is None:
        return np.ones(len(targets))
    if len(cfg.class_weights) != n_classes:
        raise ValueError(f"{len(cfg.class_weights)} class weights given for {n_classes} classes")
    return np.asarray(cfg.class_weights)[np.asarray(targets, dtype=np.int64)]


def focal_loss(probs: np.ndarray, targets: Sequence[int] | np.ndarray, cfg: FocalLossConfig = FocalLossConfig()
               ) -> float:
    """Mean of ``-w_y * alpha * (1 - p_y)^gamma * log(p_y)`` over the batch.

    ``probs`` is (N,) of P(class 1) for binary heads or (N, C) rows of class
    probabilities; ``p_y`` is the probability of the true class, clipped to
    ``[1e-7, 1 - 1e-7]``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    pt, n_classes = _true_class_prob(probs, targets)
    pt = np.clip(pt, PROB_CLIP, 1.0 - PROB_CLIP)
    w = _weights(cfg, targets, n_classes)
    return float(np.mean(-w * cfg.alpha * (1.0 - pt) ** cfg.gamma * np.log(pt)))


def focal_loss_with_logits(logits: np.ndarray, targets: Sequence[int] | np.ndarray, activation: str,
                           cfg: FocalLossConfig = FocalLossConfig()) -> tuple[float, np.ndarray]:
    """Focal loss of activated logits and its gradient with respect to the logits."""
    targets = np.asarray(targets, dtype=np.int64)
    z = np.asarray(logits)
    n = z.shape[0]
    if activation == "sigmoid":
        p = sigmoid(z[:, 0].astype(np.float64))
        raw_pt, n_classes = _true_class_prob(p, targets)
    elif activation == "softmax":
        p = softmax(z.astype(np.float64), axis=-1)
        raw_pt, n_classes = _true_class_prob(p, targets)
    else:
        raise ValueError(f"focal loss needs a sigmoid or softmax head, got {activation!r}")
    inside = (raw_pt >= PROB_CLIP) & (raw_pt <= 1.0 - PROB_CLIP)
    pt = np.clip(raw_pt, PROB_CLIP, 1.0 - PROB_CLIP)
    w = _weights(cfg, targets, n_classes)
    a, g = cfg.alpha, cfg.gamma
    q = 1.0 - pt
    loss = float(np.mean(-w * a * q ** g * np.log(pt)))

    mod = g * q ** (g - 1.0) * np.log(pt) if g != 0 else 0.0
    dl_dpt = w * a * (mod - q ** g / pt) * inside / n
    if activation == "sigmoid":
        sign = np.where(targets == 1, 1.0, -1.0)
        grad = (dl_dpt * sign * raw_pt * (1.0 - raw_pt))[:, None]
    else:
        onehot = np.zeros_like(p)
        onehot[np.arange(n), targets] = 1.0
        grad = (dl_dpt * raw_pt)[:, None] * (onehot - p)
    return loss, grad.astype(z.dtype)


def cross_entropy(probs: np.ndarray, targets: Sequence[int] | np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    pt, _ = _true_class_prob(probs, targets)
    return float(np.mean(-np.log(np.clip(pt, PROB_CLIP, 1.0 - PROB_CLIP))))
