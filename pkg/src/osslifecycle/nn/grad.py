"""Gradients of a loss or of a chosen output with respect to parameters or inputs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .losses import FocalLossConfig, focal_loss_with_logits
from .models import HeavyModel, MLP


class GradientError(FloatingPointError):
    pass


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient in {name}")


def output_seed(logits: np.ndarray, output_index: int | Sequence[int] | np.ndarray) -> np.ndarray:
    """One-hot upstream gradient selecting one logit per sample."""
    seed = np.zeros_like(logits)
    idx = np.broadcast_to(np.asarray(output_index, dtype=np.int64), (logits.shape[0],))
    seed[np.arange(logits.shape[0]), idx] = 1.0
    return seed


def forward_backward(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], *,
                     targets: np.ndarray | None = None, loss: FocalLossConfig | None = None,
                     output_index=None, training: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[float, tuple[np.ndarray, ...]]:
    """Run forward and backward, leaving parameter gradients in the model.

    Returns the scalar objective (mean loss, or the summed selected logits)
    and the input gradients.
    """
    model.zero_grad()
    logits = model.forward(inputs, training, rng)
    if loss is not None:
        if targets is None:
            raise ValueError("loss gradients need targets")
        value, dlogits = focal_loss_with_logits(logits, targets, model.output_activation, loss)
    elif output_index is not None:
        dlogits = output_seed(logits, output_index)
        value = float((logits * dlogits).sum())
    else:
        raise ValueError("give either a loss configuration or an output index")
    return value, model.backward(dlogits)


def compute_gradients(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], *,
                      targets: np.ndarray | None = None, loss: FocalLossConfig | None = None,
                      output_index=None, wrt: str = "parameters", training: bool = False,
                      rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Exact gradients of the mean loss (or of a selected output logit).

    ``wrt`` is ``"parameters"`` (keys are parameter names), ``"inputs"``
    (keys are the model's input names) or ``"both"``.
    """
    if wrt not in ("parameters", "inputs", "both"):
        raise ValueError(f"wrt must be 'parameters', 'inputs' or 'both', got {wrt!r}")
    _, dinputs = forward_backward(model, inputs, targets=targets, loss=loss, output_index=output_index,
                                  training=training, rng=rng)
    out: dict[str, np.ndarray] = {}
    if wrt in ("parameters", "both"):
        out.update({name: g.copy() for name, g in model.named_grads()})
    if wrt in ("inputs", "both"):
        out.update(dict(zip(model.input_names, dinputs)))
    _check_finite(out)
    return out
