"""Temporal sequences, tabular summaries and leakage-aware splits.

Tabular layout (``D = F * (K + 5 + 2) + 3``, 263 slots for F=20, K=6). For
each base metric, in ``METRICS`` order, a block of ``K + 7`` slots::

    last_1 .. last_K            normalized values, oldest first
    mean, std, min, max, slope  over the K-month window
    delta_mean, delta_std       over the deltas of the same window

followed by three cross features: ``total_activity``,
``engagement_ratio`` and ``review_efficiency``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingestion.records import LabeledRepo
from .schema import METRIC_INDEX, METRICS, N_METRICS, T_MONTHS, Stage, parse_stage

EPS = 1e-8
DEFAULT_K = 6
N_CROSS = 3
CROSS_FEATURES = ("total_activity", "engagement_ratio", "review_efficiency")
SUMMARY_STATS = ("mean", "std", "min", "max", "slope", "delta_mean", "delta_std")
DENOM_GUARD = 1e-8


def tabular_dim(n_features: int = N_METRICS, k: int = DEFAULT_K, n_cross: int = N_CROSS) -> int:
    return n_features * (k + 5 + 2) + n_cross


def tabular_feature_names(k: int = DEFAULT_K) -> list[str]:
    names = []
    for m in METRICS:
        names += [f"{m}:last_{i + 1}" for i in range(k)]
        names += [f"{m}:{s}" for s in SUMMARY_STATS]
    return names + [f"cross:{c}" for c in CROSS_FEATURES]


def sequence_channel_names() -> list[str]:
    return [f"{m}:level" for m in METRICS] + [f"{m}:delta" for m in METRICS]


def tabular_base_metric(name: str) -> str | None:
    """Base metric of a tabular slot name, or None for cross features."""
    head = name.split(":", 1)[0]
    return None if head == "cross" else head


# --- normalization ---------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class NormalizerStats:
    """Per-feature population mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple[str, ...]
    eps: float = EPS

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "feature_names": list(self.feature_names), "eps": self.eps}

    @classmethod
    def from_json(cls, obj: Mapping) -> "NormalizerStats":
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64),
                   tuple(obj["feature_names"]), float(obj["eps"]))


def fit_normalizer(data: np.ndarray | Sequence[np.ndarray],
                   feature_names: Sequence[str] = METRICS) -> NormalizerStats:
    """Fit over every (repo, month) row of the training split.

    ``data`` is (N, T, F), a list of (T, F) matrices, or already-flattened (rows, F).
    """
    arr = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data.astype(np.float64)
    if arr.size == 0 or arr.shape[0] == 0:
        raise ValueError("cannot fit normalizer on an empty training set")
    rows = arr.reshape(-1, arr.shape[-1])
    if rows.shape[1] != len(feature_names):
        raise ValueError(f"data has {rows.shape[1]} features, names list has {len(feature_names)}")
    return NormalizerStats(rows.mean(axis=0), rows.std(axis=0), tuple(feature_names))


def apply_normalizer(x: np.ndarray, stats: NormalizerStats,
                     feature_names: Sequence[str] | None = None) -> np.ndarray:
    if feature_names is not None and tuple(feature_names) != stats.feature_names:
        raise ValueError("feature names of the records do not match the fitted normalizer")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"expected {stats.mean.shape[0]} features, got {x.shape[-1]}")
    return (x - stats.mean) / (stats.std + stats.eps)


def invert_normalizer(z: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    return np.asarray(z) * (stats.std + stats.eps) + stats.mean


# --- temporal features -----------------------------------------------------

def compute_deltas(levels: np.ndarray) -> np.ndarray:
    """First-order differences along time; the first step is defined as 0."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.ndim < 2 or levels.shape[-2] < 1:
        raise ValueError(f"expected (..., T, F) with T >= 1, got shape {levels.shape}")
    out = np.zeros_like(levels)
    out[..., 1:, :] = levels[..., 1:, :] - levels[..., :-1, :]
    return out


def assemble_sequence(levels: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    levels, deltas = np.asarray(levels), np.asarray(deltas)
    if levels.shape != deltas.shape or levels.shape[-2:] != (T_MONTHS, N_METRICS):
        raise ValueError(f"levels and deltas must both be (..., {T_MONTHS}, {N_METRICS}); "
                         f"got {levels.shape} and {deltas.shape}")
    return np.concatenate([levels, deltas], axis=-1)


def ols_slope(window: np.ndarray) -> np.ndarray:
    """Least-squares slope against indices 0..K-1 along axis -2."""
    k = window.shape[-2]
    t = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    denom = float(np.sum(t * t))
    if denom == 0:
        return np.zeros(window.shape[:-2] + window.shape[-1:])
    centered = window - window.mean(axis=-2, keepdims=True)
    return np.einsum("k,...kf->...f", t, centered) / denom


def _guarded_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    safe = np.where(np.abs(den) < DENOM_GUARD, 1.0, den)
    return np.where(np.abs(den) < DENOM_GUARD, 0.0, num / safe)


def engineer_tabular(levels: np.ndarray, deltas: np.ndarray, k: int = DEFAULT_K,
                     standardizer: NormalizerStats | None = None) -> np.ndarray:
    """Summarize the last ``k`` months into the tabular layout.

    Accepts (T, F) or (N, T, F). Without a ``standardizer`` the raw
    engineered vector is returned; with one it is z-scored.
    """
    levels = np.asarray(levels, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if levels.shape != deltas.shape:
        raise ValueError("levels and deltas must have the same shape")
    if levels.shape[-2] < k:
        raise ValueError(f"need at least K={k} time steps, got {levels.shape[-2]}")
    win = levels[..., -k:, :]
    dwin = deltas[..., -k:, :]
    recent = np.swapaxes(win, -1, -2)  # (..., F, K)
    stats = np.stack([
        win.mean(axis=-2), win.std(axis=-2), win.min(axis=-2), win.max(axis=-2), ols_slope(win),
        dwin.mean(axis=-2), dwin.std(axis=-2),
    ], axis=-1)  # (..., F, 7)
    blocks = np.concatenate([recent, stats], axis=-1)
    flat = blocks.reshape(blocks.shape[:-2] + (-1,))
    means = win.mean(axis=-2)
    i = METRIC_INDEX
    cross = np.stack([
        means[..., i["commit_count"]] + means[..., i["issues_count"]],
        _guarded_ratio(means[..., i["repeat_contributors"]], means[..., i["committer_count"]]),
        means[..., i["pr_acceptance_rate"]] * means[..., i["pr_review_duration_days"]],
    ], axis=-1)
    out = np.concatenate([flat, cross], axis=-1)
    if standardizer is not None:
        out = apply_normalizer(out, standardizer)
    return out


# --- end-to-end featurization ----------------------------------------------

@dataclasses.dataclass
class FeatureSet:
    """Model-ready inputs for a list of repositories."""

    repo_ids: list[str]
    sequences: np.ndarray  # (N, 24, 40)
    tabular: np.ndarray  # (N, D)
    labels: list[Stage | None]

    def __len__(self) -> int:
        return len(self.repo_ids)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet([self.repo_ids[i] for i in idx], self.sequences[idx], self.tabular[idx],
                          [self.labels[i] for i in idx])

    def select_ids(self, ids: Iterable[str]) -> "FeatureSet":
        pos = {r: i for i, r in enumerate(self.repo_ids)}
        return self.subset([pos[r] for r in ids])


@dataclasses.dataclass
class FeaturePipeline:
    """Level normalizer plus tabular standardizer, both fitted on training repos."""

    k: int = DEFAULT_K
    level_stats: NormalizerStats | None = None
    tabular_stats: NormalizerStats | None = None

    def fit(self, train: Sequence[LabeledRepo]) -> "FeaturePipeline":
        if not train:
            raise ValueError("cannot fit features on an empty training set")
        raw = np.stack([r.months for r in train])
        self.level_stats = fit_normalizer(raw)
        levels = apply_normalizer(raw, self.level_stats)
        tab = engineer_tabular(levels, compute_deltas(levels), self.k)
        self.tabular_stats = fit_normalizer(tab, tabular_feature_names(self.k))
        return self

    def transform(self, repos: Sequence[LabeledRepo]) -> FeatureSet:
        if self.level_stats is None or self.tabular_stats is None:
            raise RuntimeError("FeaturePipeline.transform called before fit")
        if not repos:
            return FeatureSet([], np.zeros((0, T_MONTHS, 2 * N_METRICS)),
                              np.zeros((0, tabular_dim(k=self.k))), [])
        raw = np.stack([r.months for r in repos])
        levels = apply_normalizer(raw, self.level_stats)
        deltas = compute_deltas(levels)
        seq = assemble_sequence(levels, deltas)
        tab = engineer_tabular(levels, deltas, self.k, self.tabular_stats)
        if not (np.isfinite(seq).all() and np.isfinite(tab).all()):
            raise ValueError("non-finite values produced during featurization")
        return FeatureSet([r.repo_id for r in repos], seq, tab, [r.label for r in repos])

    def to_json(self) -> dict:
        return {"k": self.k, "level_stats": self.level_stats.to_json(),
                "tabular_stats": self.tabular_stats.to_json()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeaturePipeline":
        return cls(int(obj["k"]), NormalizerStats.from_json(obj["level_stats"]),
                   NormalizerStats.from_json(obj["tabular_stats"]))


# --- splitting -------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    histograms: Mapping[str, Mapping[str, int]]

    def part(self, name: str) -> tuple[str, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def to_json(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "histograms": {k: dict(v) for k, v in self.histograms.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetSplit":
        return cls(tuple(obj["train"]), tuple(obj["val"]), tuple(obj["test"]),
                   {k: dict(v) for k, v in obj["histograms"].items()})


def _largest_remainder(ideal: dict[Stage, float], total: int, cap: dict[Stage, int]) -> dict[Stage, int]:
    out = {s: min(int(math.floor(v)), cap[s]) for s, v in ideal.items()}
    order = sorted(ideal, key=lambda s: (-(ideal[s] - math.floor(ideal[s])), s.value))
    while sum(out.values()) < total:
        progressed = False
        for s in order:
            if sum(out.values()) >= total:
                break
            if out[s] < cap[s]:
                out[s] += 1
                progressed = True
        if not progressed:
            break
        order = sorted(ideal, key=lambda s: (out[s] - ideal[s], s.value))
    return out


def split_dataset(repos: Sequence[LabeledRepo], seed: int,
                  fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> DatasetSplit:
    """Stratified, repository-level, time-aware split.

    Within each stage repositories are ordered by creation date (ties broken
    by a seeded shuffle); the earliest go to train, later ones to validation
    and then test.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    ids = [r.repo_id for r in repos]
    if len(set(ids)) != len(ids):
        raise ValueError("repository ids must be unique")
    if any(r.label is None for r in repos):
        raise ValueError("split_dataset requires labeled repositories")
    n = len(repos)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n)
    groups: dict[Stage, list[int]] = {}
    for i, r in enumerate(repos):
        groups.setdefault(r.label, []).append(i)
    for stage, members in groups.items():
        if len(members) < 3:
            warnings.warn(f"stage {stage.value} has only {len(members)} repositories; "
                          "stratification is best-effort", stacklevel=2)
        members.sort(key=lambda i: (repos[i].metadata.created_at, tiebreak[i]))

    sizes = {s: len(m) for s, m in groups.items()}
    test_n = _largest_remainder({s: c * fractions[2] for s, c in sizes.items()}, n_test, sizes)
    left = {s: sizes[s] - test_n[s] for s in sizes}
    val_n = _largest_remainder({s: c * fractions[1] for s, c in sizes.items()}, n_val, left)

    train, val, test = [], [], []
    for stage in sorted(groups, key=lambda s: s.value):
        members = groups[stage]
        n_tr = sizes[stage] - val_n[stage] - test_n[stage]
        train += members[:n_tr]
        val += members[n_tr:n_tr + val_n[stage]]
        test += members[n_tr + val_n[stage]:]

    def hist(idx: list[int]) -> dict[str, int]:
        out: dict[str, int] = {}
        for i in idx:
            out[repos[i].label.value] = out.get(repos[i].label.value, 0) + 1
        return dict(sorted(out.items()))

    key = lambda i: ids[i]  # noqa: E731
    return DatasetSplit(
        tuple(ids[i] for i in sorted(train, key=key)),
        tuple(ids[i] for i in sorted(val, key=key)),
        tuple(ids[i] for i in sorted(test, key=key)),
        {"train": hist(train), "val": hist(val), "test": hist(test)},
    )


# --- feature store ---------------------------------------------------------

FEATURE_STORE_MAGIC = b"OSFS"
FEATURE_STORE_VERSION = 1
_LABEL_CODES = {None: -1, Stage.TOY: 0, Stage.CONTRIB_MID: 1, Stage.CLUB: 2, Stage.FEDERATION: 3}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def write_feature_store_jsonl(fs: FeatureSet, path: str | Path) -> None:
    """One record per repo: ``{repo_id, sequence (24x40 row-major), tabular, label}``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, rid in enumerate(fs.repo_ids):
            rec = {
                "repo_id": rid,
                "sequence": [float(v) for v in fs.sequences[i].ravel()],
                "tabular": [float(v) for v in fs.tabular[i]],
                "label": None if fs.labels[i] is None else fs.labels[i].value,
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_feature_store_jsonl(path: str | Path) -> FeatureSet:
    ids, seqs, tabs, labels = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ids.append(rec["repo_id"])
            seqs.append(np.array(rec["sequence"], dtype=np.float64).reshape(T_MONTHS, 2 * N_METRICS))
            tabs.append(np.array(rec["tabular"], dtype=np.float64))
            labels.append(None if rec["label"] is None else parse_stage(rec["label"]))
    d = len(tabs[0]) if tabs else tabular_dim()
    return FeatureSet(ids, np.array(seqs).reshape(-1, T_MONTHS, 2 * N_METRICS), np.array(tabs).reshape(-1, d),
                      labels)


def write_feature_store_bin(fs: FeatureSet, path: str | Path) -> None:
    """Packed little-endian layout.

    Header: ``b"OSFS"``, then uint32 version, n, T, C, D. Each record:
    uint16 id length, UTF-8 id, int8 label code (-1 none, 0 toy,
    1 contribMid, 2 club, 3 federation), T*C float32 sequence (row-major),
    D float32 tabular.
    """
    n = len(fs)
    _, t, c = fs.sequences.shape if n else (0, T_MONTHS, 2 * N_METRICS)
    d = fs.tabular.shape[1] if n else tabular_dim()
    with open(path, "wb") as fh:
        fh.write(FEATURE_STORE_MAGIC)
        fh.write(struct.pack("<5I", FEATURE_STORE_VERSION, n, t, c, d))
        for i, rid in enumerate(fs.repo_ids):
            raw = rid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<b", _LABEL_CODES[fs.labels[i]]))
            fh.write(np.ascontiguousarray(fs.sequences[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fs.tabular[i], dtype="<f4").tobytes())


def read_feature_store_bin(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEATURE_STORE_MAGIC:
        raise ValueError(f"{path}: not a feature store file")
    version, n, t, c, d = struct.unpack_from("<5I", data, 4)
    if version != FEATURE_STORE_VERSION:
        raise ValueError(f"{path}: unsupported feature store version {version}")
    off = 24
    ids, labels = [], []
    seqs = np.zeros((n, t, c), dtype=np.float32)
    tabs = np.zeros((n, d), dtype=np.float32)
    for i in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off:off + ln].decode("utf-8"))
        off += ln
        (code,) = struct.unpack_from("<b", data, off)
        off += 1
        labels.append(_CODE_LABELS[code])
        seqs[i] = np.frombuffer(data, dtype="<f4", count=t * c, offset=off).reshape(t, c)
        off += 4 * t * c
        tabs[i] = np.frombuffer(data, dtype="<f4", count=d, offset=off)
        off += 4 * d
    return FeatureSet(ids, seqs.astype(np.float64), tabs.astype(np.float64), labels)
