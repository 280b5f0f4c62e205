"""Central finite-difference checks shared by the unit and acceptance suites."""

import numpy as np

from osslifecycle.nn import FocalLossConfig, compute_gradients, focal_loss_with_logits


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _entries(arr, rng, limit):
    n = arr.size
    return range(n) if n <= limit else rng.choice(n, limit, replace=False)


def numeric_grad(f, arr, rng, eps=1e-6, limit=24):
    """Central differences of scalar ``f()`` w.r.t. a sample of entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = np.array(list(_entries(arr, rng, limit)))
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[j] = (hi - lo) / (2 * eps)
    return idx, out


def check_model(model, inputs, targets, loss=FocalLossConfig(alpha=0.25, gamma=2.0), seed=0, limit=24):
    """Worst relative error over every parameter tensor and every input."""
    rng = np.random.default_rng(seed)

    def f():
        return focal_loss_with_logits(model.forward(inputs), targets, model.output_activation, loss)[0]

    grads = compute_gradients(model, inputs, targets=targets, loss=loss, wrt="both")
    errs = {}
    for name, p in model.named_parameters():
        idx, num = numeric_grad(f, p, rng, limit=limit)
        errs[name] = rel_error(grads[name].reshape(-1)[idx], num)
    for name, x in zip(model.input_names, inputs):
        idx, num = numeric_grad(f, x, rng, limit=limit)
        errs["input:" + name] = rel_error(grads[name].reshape(-1)[idx], num)
    return errs


def check_module(module, x, seed=0, limit=24):
    """Gradient check of ``sum(R * module(x))`` for a random projection R."""
    rng = np.random.default_rng(seed)
    r = rng.normal(size=module.forward(x).shape)

    def f():
        return float((module.forward(x) * r).sum())

    module.zero_grad()
    module.forward(x)
    dx = module.backward(r)
    grads = dict(module.named_grads())
    errs = {}
    for name, p in module.named_parameters():
        idx, num = numeric_grad(f, p, rng, limit=limit)
        errs[name] = rel_error(grads[name].reshape(-1)[idx], num)
    idx, num = numeric_grad(f, x, rng, limit=limit)
    errs["input"] = rel_error(dx.reshape(-1)[idx], num)
    return errs
