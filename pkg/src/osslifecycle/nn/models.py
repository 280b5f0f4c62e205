"""Model definitions: tabular MLPs, the Transformer encoder and the Heavy hybrid."""

from __future__ import annotations

import dataclasses
from typing import Any, Mapping, Sequence

import numpy as np

from .layers import BatchNorm, Dropout, EncoderLayer, LayerNorm, Linear, Module, ReLU, Sequential, \
    positional_encoding, sigmoid, softmax

OUTPUT_ACTIVATIONS = ("sigmoid", "softmax", "none")


@dataclasses.dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden: tuple[int, ...] = (256, 128, 64)
    output_dim: int | None = 1  # None: body only (used as an embedding branch)
    output_activation: str = "sigmoid"
    dropout: float = 0.1
    batchnorm: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.output_dim is not None and self.output_dim <= 0:
            raise ValueError("output_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def out_features(self) -> int:
        return self.output_dim if self.output_dim is not None else (self.hidden[-1] if self.hidden else self.input_dim)


@dataclasses.dataclass(frozen=True)
class TransformerConfig:
    input_dim: int = 40
    seq_len: int = 24
    d_model: int = 192
    n_heads: int = 4
    n_layers: int = 6
    ff_dim: int = 768
    dropout: float = 0.1
    positional: str = "sinusoidal"
    pooling: str = "mean"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.positional != "sinusoidal" or self.pooling != "mean":
            raise ValueError("only sinusoidal positions with mean pooling are supported")


@dataclasses.dataclass(frozen=True)
class HeavyConfig:
    transformer: TransformerConfig = TransformerConfig()
    tabular: MlpConfig = MlpConfig(263, (128, 64), None, "none")
    n_classes: int = 3


def stage1_config(input_dim: int = 263, **kw) -> MlpConfig:
    return MlpConfig(input_dim, (256, 128, 64), 1, "sigmoid", **kw)


def light_config(input_dim: int = 263, n_classes: int = 3, **kw) -> MlpConfig:
    return MlpConfig(input_dim, (256, 128, 64), n_classes, "softmax", **kw)


def expert_config(input_dim: int = 263, **kw) -> MlpConfig:
    return MlpConfig(input_dim, (128, 64), 1, "sigmoid", **kw)


def heavy_config(input_dim: int = 263, dropout: float = 0.1, **transformer_kw) -> HeavyConfig:
    return HeavyConfig(TransformerConfig(dropout=dropout, **transformer_kw),
                       MlpConfig(input_dim, (128, 64), None, "none", dropout=dropout), 3)


class MLP(Module):
    """Hidden blocks of Linear -> [BatchNorm] -> ReLU -> Dropout, then an optional linear head."""

    input_names = ("tabular",)

    def __init__(self, cfg: MlpConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        blocks = []
        d = cfg.input_dim
        for i, h in enumerate(cfg.hidden):
            blocks.append((f"fc{i}", Linear(d, h, rng, dtype)))
            if cfg.batchnorm:
                blocks.append((f"bn{i}", BatchNorm(h, dtype)))
            blocks.append((f"relu{i}", ReLU()))
            blocks.append((f"drop{i}", Dropout(cfg.dropout)))
            d = h
        self.body = self.add("body", Sequential(*blocks))
        self.head = self.add("head", Linear(d, cfg.output_dim, rng, dtype)) if cfg.output_dim else None
        self.temperature = 1.0

    @property
    def output_activation(self) -> str:
        return self.cfg.output_activation

    def forward(self, inputs: Sequence[np.ndarray], training: bool = False, rng=None) -> np.ndarray:
        (x,) = inputs
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected input of shape (N, {self.cfg.input_dim}), got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite values in model input")
        h = self.body.forward(x, training, rng)
        return self.head.forward(h) if self.head is not None else h

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray]:
        dh = self.head.backward(dout) if self.head is not None else dout
        return (self.body.backward(dh),)


class TransformerEncoder(Module):
    """Project 40 -> d_model, add sinusoidal positions, apply encoder blocks, mean-pool over time."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.proj = self.add("proj", Linear(cfg.input_dim, cfg.d_model, rng, dtype))
        self.layers = [self.add(f"layer{i}", EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.dropout, rng,
                                                           dtype)) for i in range(cfg.n_layers)]
        self.norm = self.add("norm", LayerNorm(cfg.d_model, dtype))
        self.pe = positional_encoding(cfg.seq_len, cfg.d_model, dtype)

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.seq_len, self.cfg.input_dim):
            raise ValueError(f"expected sequences of shape (N, {self.cfg.seq_len}, {self.cfg.input_dim}), "
                             f"got {x.shape}")
        h = self.proj.forward(x) + self.pe
        for layer in self.layers:
            h = layer.forward(h, training, rng)
        h = self.norm.forward(h)
        return h.mean(axis=1)

    def backward(self, dz: np.ndarray) -> np.ndarray:
        t = self.cfg.seq_len
        dh = np.broadcast_to(dz[:, None, :] / t, (dz.shape[0], t, dz.shape[1])).astype(dz.dtype)
        dh = self.norm.backward(dh)
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return self.proj.backward(dh)

    def attention_maps(self) -> np.ndarray:
        """(N, layers, heads, T, T) attention weights from the last forward pass."""
        return np.stack([layer.attn.attention for layer in self.layers], axis=1)


class HeavyModel(Module):
    """Transformer over the sequence joined with an MLP embedding of the tabular vector."""

    input_names = ("sequence", "tabular")

    def __init__(self, cfg: HeavyConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.encoder = self.add("encoder", TransformerEncoder(cfg.transformer, rng, dtype))
        self.tab = self.add("tab", MLP(cfg.tabular, rng, dtype))
        self.head = self.add("head", Linear(cfg.transformer.d_model + cfg.tabular.out_features, cfg.n_classes,
                                            rng, dtype))
        self.temperature = 1.0

    output_activation = "softmax"

    def forward(self, inputs: Sequence[np.ndarray], training: bool = False, rng=None) -> np.ndarray:
        seq, tab = inputs
        z = self.encoder.forward(seq, training, rng)
        h = self.tab.forward((tab,), training, rng)
        self._split = z.shape[1]
        return self.head.forward(np.concatenate([z, h], axis=1))

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dc = self.head.backward(dout)
        dz, dh = dc[:, :self._split], dc[:, self._split:]
        (dtab,) = self.tab.backward(dh)
        return self.encoder.backward(np.ascontiguousarray(dz)), dtab

    def attention_maps(self) -> np.ndarray:
        return self.encoder.attention_maps()


Model = MLP | HeavyModel


def model_config_to_json(cfg: MlpConfig | HeavyConfig) -> dict[str, Any]:
    if isinstance(cfg, HeavyConfig):
        return {"kind": "heavy", "transformer": dataclasses.asdict(cfg.transformer),
                "tabular": dataclasses.asdict(cfg.tabular), "n_classes": cfg.n_classes}
    return {"kind": "mlp", **dataclasses.asdict(cfg)}


def model_config_from_json(obj: Mapping[str, Any]) -> MlpConfig | HeavyConfig:
    obj = dict(obj)
    kind = obj.pop("kind")
    if kind == "heavy":
        tab = dict(obj["tabular"])
        tab["hidden"] = tuple(tab["hidden"])
        return HeavyConfig(TransformerConfig(**obj["transformer"]), MlpConfig(**tab), int(obj["n_classes"]))
    if kind == "mlp":
        obj["hidden"] = tuple(obj["hidden"])
        return MlpConfig(**obj)
    raise ValueError(f"unknown model kind {kind!r}")


def build_model(cfg: MlpConfig | HeavyConfig, seed: int, dtype=np.float32) -> MLP | HeavyModel:
    rng = np.random.default_rng(seed)
    if isinstance(cfg, HeavyConfig):
        return HeavyModel(cfg, rng, dtype)
    return MLP(cfg, rng, dtype)


def activate(logits: np.ndarray, activation: str, temperature: float = 1.0) -> np.ndarray:
    """Map logits to probabilities; binary heads return P(positive) with shape (N,)."""
    z = logits / temperature
    if activation == "sigmoid":
        return sigmoid(z[:, 0] if z.ndim == 2 else z)
    if activation == "softmax":
        return softmax(z, axis=-1)
    return z


def predict_logits(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode logits, computed in fixed-size chunks.

    The last chunk is zero-padded to ``batch_size`` rows so every row goes
    through the same BLAS kernels; a sample's output then does not depend on
    which other samples share its batch.
    """
    n = len(inputs[0])
    outs = []
    for s in range(0, n, batch_size):
        chunk = [np.asarray(x[s:s + batch_size]) for x in inputs]
        m = len(chunk[0])
        if m < batch_size:
            chunk = [np.concatenate([c, np.zeros((batch_size - m,) + c.shape[1:], dtype=c.dtype)]) for c in chunk]
        outs.append(model.forward(tuple(chunk), training=False)[:m])
    if not outs:
        return np.zeros((0, getattr(model.cfg, "output_dim", None) or 3), dtype=model.dtype)
    return np.concatenate(outs, axis=0)


def predict_proba(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], batch_size: int = 64,
                  calibrated: bool = False) -> np.ndarray:
    temp = model.temperature if calibrated else 1.0
    return activate(predict_logits(model, inputs, batch_size).astype(np.float64), model.output_activation, temp)


def mlp_forward(model: MLP, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Forward pass returning activated outputs (probabilities for sigmoid/softmax heads)."""
    logits = model.forward((x,), training, rng)
    return activate(logits, model.output_activation)


def transformer_encode(encoder: TransformerEncoder, sequences: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode pooled representation and (N, L, H, T, T) attention maps."""
    z = encoder.forward(sequences, training=False)
    return z, encoder.attention_maps()
