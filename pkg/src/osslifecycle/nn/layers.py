"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward``; a layer
instance therefore serves one forward/backward pair at a time. Gradients are
accumulated into ``self.grads`` (call :meth:`Module.zero_grad` between steps).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np


class Module:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add(self, name: str, child: "Module") -> "Module":
        self.children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        for child in self.children.values():
            child.zero_grad()

    def _new_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """Affine map over the last axis; weights drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self._new_param("weight", _uniform(rng, (d_in, d_out), bound, dtype))
        self._new_param("bias", _uniform(rng, (d_out,), bound, dtype))
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        self._x = x
        if x.ndim == 2:
            return x @ self.params["weight"] + self.params["bias"]
        y = x.reshape(-1, self.d_in) @ self.params["weight"] + self.params["bias"]
        return y.reshape(x.shape[:-1] + (self.d_out,))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.grads["weight"] += x2.T @ dy2
        self.grads["bias"] += dy2.sum(axis=0)
        return (dy2 @ self.params["weight"].T).reshape(self._x.shape)


class ReLU(Module):
    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0).astype(dy.dtype, copy=False)


class Dropout(Module):
    """Inverted dropout; identity in evaluation mode."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.p == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        keep = rng.random(x.shape, dtype=np.float32) >= self.p
        self._scale = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * self._scale

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._scale is None else dy * self._scale


class BatchNorm(Module):
    """Batch normalization over axis 0 with running statistics for evaluation."""

    def __init__(self, dim: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self._new_param("gamma", np.ones(dim, dtype=dtype))
        self._new_param("beta", np.zeros(dim, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(dim, dtype=dtype)
        self.buffers["running_var"] = np.ones(dim, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        if training:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs at least 2 samples in training mode")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            n = x.shape[0]
            self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mu
            self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        self._training = training
        self._invstd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self._xhat = (x - mu) * self._invstd
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        if not self._training:
            return dxhat * self._invstd
        n = dy.shape[0]
        return (self._invstd / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self._new_param("gamma", np.ones(dim, dtype=dtype))
        self._new_param("beta", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self._invstd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._invstd
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        d = xhat.shape[-1]
        lead = tuple(range(dy.ndim - 1))
        self.grads["gamma"] += (dy * xhat).sum(axis=lead)
        self.grads["beta"] += dy.sum(axis=lead)
        dxhat = dy * self.params["gamma"]
        return (self._invstd / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                     - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        self.order = []
        for name, layer in layers:
            self.add(name, layer)
            self.order.append(name)

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        for name in self.order:
            x = self.children[name].forward(x, training, rng)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for name in reversed(self.order):
            dy = self.children[name].backward(dy)
        return dy


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1]).astype(q.dtype)
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def positional_encoding(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: sine on even dims, cosine on odd dims."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads, self.d_k = d_model, n_heads, d_model // n_heads
        self.qkv = self.add("qkv", Linear(d_model, 3 * d_model, rng, dtype))
        self.out = self.add("out", Linear(d_model, d_model, rng, dtype))
        self.attention: np.ndarray | None = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        n, t, _ = x.shape
        return x.reshape(n, t, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        n, t, d = x.shape
        qkv = self.qkv.forward(x)
        q, k, v = (self._split(qkv[..., i * d:(i + 1) * d]) for i in range(3))
        o, a = scaled_dot_attention(q, k, v)
        self._q, self._k, self._v, self.attention = q, k, v, a
        merged = o.transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.out.forward(merged)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, t, d = dy.shape
        dmerged = self.out.backward(dy)
        do = self._split(dmerged)
        a, q, k, v = self.attention, self._q, self._k, self._v
        da = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(a, -1, -2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds = ds / np.sqrt(self.d_k).astype(ds.dtype)
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(n, t, d)  # noqa: E731
        dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
        return self.qkv.backward(dqkv)


class EncoderLayer(Module):
    """Pre-norm Transformer encoder block."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.norm1 = self.add("norm1", LayerNorm(d_model, dtype))
        self.attn = self.add("attn", MultiHeadSelfAttention(d_model, n_heads, rng, dtype))
        self.drop1 = Dropout(dropout)
        self.norm2 = self.add("norm2", LayerNorm(d_model, dtype))
        self.ff = self.add("ff", Sequential(("fc1", Linear(d_model, ff_dim, rng, dtype)), ("relu", ReLU()),
                                            ("fc2", Linear(ff_dim, d_model, rng, dtype))))
        self.drop2 = Dropout(dropout)

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        x = x + self.drop1.forward(self.attn.forward(self.norm1.forward(x), training, rng), training, rng)
        return x + self.drop2.forward(self.ff.forward(self.norm2.forward(x), training, rng), training, rng)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx = dy + self.norm2.backward(self.ff.backward(self.drop2.backward(dy)))
        return dx + self.norm1.backward(self.attn.backward(self.drop1.backward(dx)))
