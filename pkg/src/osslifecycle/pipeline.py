"""Staged inference: Stage-1 gate, Stage-2 confidence ensemble, club/federation expert."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .features import FeatureSet
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import sigmoid, softmax
from .nn.models import HeavyModel, MLP, predict_logits, predict_proba
from .schema import STAGE2_CLASSES, Stage

ROUTES = ("S1-accept", "S2-toy-accept", "expert-club", "expert-federation")
MODEL_NAMES = ("stage1", "heavy", "light", "expert")


class MissingArtifactError(FileNotFoundError):
    pass


@dataclasses.dataclass(frozen=True)
class RoutingThresholds:
    stage1_gate: float = 0.85
    toy_accept: float = 0.70
    expert_tau: float = 0.5
    source: str = "default"

    def __post_init__(self) -> None:
        for name in ("stage1_gate", "toy_accept", "expert_tau"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"threshold {name} must lie in (0, 1), got {v}")

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RoutingThresholds":
        return cls(**{k: obj[k] for k in ("stage1_gate", "toy_accept", "expert_tau", "source") if k in obj})


@dataclasses.dataclass(frozen=True)
class DecisionTrace:
    repo_id: str
    stage1_p: float
    heavy: tuple[float, ...] | None
    light: tuple[float, ...] | None
    c_heavy: float | None
    c_light: float | None
    ensemble_choice: str | None
    expert_p: float | None
    route: str
    final: Stage
    confidence: float
    thresholds: RoutingThresholds

    def to_json(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["final"] = self.final.value
        d["heavy"] = list(self.heavy) if self.heavy is not None else None
        d["light"] = list(self.light) if self.light is not None else None
        d["thresholds"] = self.thresholds.to_json()
        return d

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DecisionTrace":
        d = dict(obj)
        d["final"] = Stage(d["final"])
        d["heavy"] = tuple(d["heavy"]) if d["heavy"] is not None else None
        d["light"] = tuple(d["light"]) if d["light"] is not None else None
        d["thresholds"] = RoutingThresholds.from_json(d["thresholds"])
        return cls(**d)


# --- pure routing rules ------------------------------------------------------

def gate_accepts(p_stage1: float, th: RoutingThresholds) -> bool:
    return p_stage1 >= th.stage1_gate


def choose_ensemble(heavy: Sequence[float], light: Sequence[float]) -> tuple[np.ndarray, str]:
    """Pick the vector with the larger max probability; heavy wins ties."""
    h, lt = np.asarray(heavy, dtype=np.float64), np.asarray(light, dtype=np.float64)
    return (h, "heavy") if h.max() >= lt.max() else (lt, "light")


def expert_label(p_club: float, th: RoutingThresholds) -> Stage:
    return Stage.CLUB if p_club >= th.expert_tau else Stage.FEDERATION


def needs_expert(stage2: Sequence[float], th: RoutingThresholds) -> bool:
    """True unless Stage-2 predicts toy with confidence >= toy_accept.

    Club and federation predictions always go to the expert, and so do
    toy predictions below the threshold.
    """
    v = np.asarray(stage2)
    k = int(v.argmax())
    return not (STAGE2_CLASSES[k] is Stage.TOY and v[k] >= th.toy_accept)


def route(p_stage1: float, heavy: Sequence[float] | None, light: Sequence[float] | None,
          p_expert: float | None, th: RoutingThresholds) -> tuple[Stage, str, float]:
    """Final label, route tag and confidence from already-computed probabilities."""
    if gate_accepts(p_stage1, th):
        return Stage.CONTRIB_MID, "S1-accept", float(p_stage1)
    if heavy is None or light is None:
        raise ValueError("Stage-2 probabilities are required below the gate threshold")
    vec, _ = choose_ensemble(heavy, light)
    if not needs_expert(vec, th):
        return Stage.TOY, "S2-toy-accept", float(vec.max())
    if p_expert is None:
        raise ValueError("expert probability is required for this sample")
    label = expert_label(p_expert, th)
    conf = p_expert if label is Stage.CLUB else 1.0 - p_expert
    return label, f"expert-{label.value}", float(conf)


def replay(trace: DecisionTrace, thresholds: RoutingThresholds | None = None) -> Stage:
    """Re-derive the final label from the probabilities recorded in a trace."""
    th = thresholds or trace.thresholds
    return route(trace.stage1_p, trace.heavy, trace.light, trace.expert_p, th)[0]


def make_trace(repo_id: str, p1: float, heavy, light, p_cf, th: RoutingThresholds) -> DecisionTrace:
    """Route one sample from its model outputs and record every quantity the decision used."""
    final, tag, conf = route(p1, heavy, light, p_cf, th)
    if tag == "S1-accept":
        return DecisionTrace(repo_id, float(p1), None, None, None, None, None, None, tag, final, conf, th)
    h, lt = tuple(float(v) for v in heavy), tuple(float(v) for v in light)
    _, choice = choose_ensemble(h, lt)
    return DecisionTrace(repo_id, float(p1), h, lt, max(h), max(lt), choice,
                         None if tag == "S2-toy-accept" else float(p_cf), tag, final, conf, th)


# --- models ------------------------------------------------------------------

@dataclasses.dataclass
class HierarchyModels:
    stage1: MLP
    heavy: HeavyModel
    light: MLP
    expert: MLP
    calibrated: bool = False

    def get(self, name: str) -> MLP | HeavyModel:
        return getattr(self, name)

    def save(self, directory: str | Path, metadata: Mapping[str, Mapping[str, Any]] | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in MODEL_NAMES:
            save_checkpoint(self.get(name), d / f"{name}.ckpt", (metadata or {}).get(name))


def load_models(directory: str | Path, calibrated: bool = False) -> HierarchyModels:
    d = Path(directory)
    loaded = {}
    for name in MODEL_NAMES:
        path = d / f"{name}.ckpt"
        if not path.exists():
            raise MissingArtifactError(f"missing {name} checkpoint: {path}")
        loaded[name], _ = load_checkpoint(path)
    return HierarchyModels(**loaded, calibrated=calibrated)


# --- inference ---------------------------------------------------------------

def stage1_gate(tabular: np.ndarray, model: MLP, th: RoutingThresholds, calibrated: bool = False
                ) -> tuple[np.ndarray, np.ndarray]:
    """P(contribMid) per row and whether the gate accepts it."""
    p = predict_proba(model, (np.atleast_2d(tabular),), calibrated=calibrated)
    return p, p >= th.stage1_gate


def stage2_ensemble(sequences: np.ndarray, tabular: np.ndarray, heavy: HeavyModel, light: MLP,
                    calibrated: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Heavy and light probability rows, the chosen row per sample and the chooser tags."""
    ph = predict_proba(heavy, (sequences, tabular), calibrated=calibrated)
    pl = predict_proba(light, (tabular,), calibrated=calibrated)
    take_heavy = ph.max(axis=1) >= pl.max(axis=1)
    chosen = np.where(take_heavy[:, None], ph, pl)
    return ph, pl, chosen, ["heavy" if t else "light" for t in take_heavy]


def expert_refine(tabular: np.ndarray, expert: MLP, th: RoutingThresholds, calibrated: bool = False
                  ) -> tuple[np.ndarray, list[Stage]]:
    p = predict_proba(expert, (np.atleast_2d(tabular),), calibrated=calibrated)
    return p, [expert_label(float(v), th) for v in p]


def _check_sample(seq: np.ndarray, tab: np.ndarray, models: HierarchyModels) -> None:
    t_cfg = models.heavy.cfg.transformer
    if seq.shape != (t_cfg.seq_len, t_cfg.input_dim):
        raise ValueError(f"sequence has shape {seq.shape}, expected {(t_cfg.seq_len, t_cfg.input_dim)}")
    if tab.shape != (models.stage1.cfg.input_dim,):
        raise ValueError(f"tabular vector has shape {tab.shape}, expected ({models.stage1.cfg.input_dim},)")
    if not (np.isfinite(seq).all() and np.isfinite(tab).all()):
        raise ValueError("non-finite feature values")


@dataclasses.dataclass
class BatchResult:
    traces: list[DecisionTrace]
    errors: dict[str, str]

    @property
    def labels(self) -> dict[str, Stage]:
        return {t.repo_id: t.final for t in self.traces}

    def write(self, csv_path: str | Path, traces_path: str | Path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repo_id", "final_label", "route", "stage1_p", "c_heavy", "c_light", "expert_p"])
            for t in self.traces:
                w.writerow([t.repo_id, t.final.value, t.route, repr(t.stage1_p),
                            *("" if v is None else repr(v) for v in (t.c_heavy, t.c_light, t.expert_p))])
        with open(traces_path, "w", encoding="utf-8") as fh:
            for t in self.traces:
                fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
            for rid, msg in sorted(self.errors.items()):
                fh.write(json.dumps({"repo_id": rid, "error": msg}, sort_keys=True) + "\n")


def predict_batch(fs: FeatureSet, models: HierarchyModels, th: RoutingThresholds = RoutingThresholds()
                  ) -> BatchResult:
    """Route every repository; malformed samples are recorded as errors and skipped."""
    good, errors = [], {}
    for i, rid in enumerate(fs.repo_ids):
        try:
            _check_sample(np.asarray(fs.sequences[i]), np.asarray(fs.tabular[i]), models)
            good.append(i)
        except ValueError as exc:
            errors[rid] = str(exc)
    idx = np.asarray(good, dtype=np.int64)
    seq = np.asarray(fs.sequences, dtype=np.float32)[idx] if len(idx) else np.zeros((0, 24, 40), np.float32)
    tab = np.asarray(fs.tabular, dtype=np.float32)[idx] if len(idx) else np.zeros((0, 263), np.float32)
    cal = models.calibrated
    p1, accept = stage1_gate(tab, models.stage1, th, cal)
    rest = np.flatnonzero(~accept)
    ph = np.zeros((len(idx), 3))
    pl = np.zeros((len(idx), 3))
    pcf = np.full(len(idx), np.nan)
    if len(rest):
        ph[rest], pl[rest], chosen, _ = stage2_ensemble(seq[rest], tab[rest], models.heavy, models.light, cal)
        ask = rest[[needs_expert(v, th) for v in chosen]]
        if len(ask):
            pcf[ask], _ = expert_refine(tab[ask], models.expert, th, cal)
    traces = []
    for j, i in enumerate(idx):
        rid = fs.repo_ids[i]
        stage2 = not accept[j]
        traces.append(make_trace(rid, float(p1[j]), ph[j] if stage2 else None, pl[j] if stage2 else None,
                                  None if np.isnan(pcf[j]) else float(pcf[j]), th))
    return BatchResult(traces, errors)


def predict(repo_id: str, sequence: np.ndarray, tabular: np.ndarray, models: HierarchyModels,
            th: RoutingThresholds = RoutingThresholds()) -> tuple[Stage, DecisionTrace]:
    res = predict_batch(FeatureSet([repo_id], np.asarray(sequence)[None], np.asarray(tabular)[None], [None]),
                        models, th)
    if res.errors:
        raise ValueError(res.errors[repo_id])
    return res.traces[0].final, res.traces[0]


# --- calibration -------------------------------------------------------------

def _nll(logits: np.ndarray, targets: np.ndarray, activation: str, temp: float) -> float:
    z = logits / temp
    if activation == "sigmoid":
        p = sigmoid(z.reshape(-1))
        pt = np.where(targets == 1, p, 1.0 - p)
    else:
        pt = softmax(z, axis=-1)[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(np.clip(pt, 1e-12, 1.0))))


def fit_temperature(logits: np.ndarray, targets: np.ndarray, activation: str) -> float:
    """Single temperature minimising validation negative log-likelihood."""
    targets = np.asarray(targets, dtype=np.int64)
    if np.unique(targets).size < 2:
        raise ValueError("temperature scaling needs validation labels from at least two classes")
    logits = np.asarray(logits, dtype=np.float64)
    res = minimize_scalar(lambda lt: _nll(logits, targets, activation, float(np.exp(lt))),
                          bounds=(np.log(0.05), np.log(20.0)), method="bounded",
                          options={"xatol": 1e-6})
    return float(np.exp(res.x))


def calibrate(model: MLP | HeavyModel, inputs: Sequence[np.ndarray], targets: np.ndarray) -> float:
    """Fit and store the model's temperature; returns it."""
    model.temperature = fit_temperature(predict_logits(model, inputs), targets, model.output_activation)
    return model.temperature
