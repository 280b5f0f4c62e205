"""Acceptance suite: one test per numbered criterion.

Run with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``); a
PASS/FAIL line per criterion is printed at the end of the session. Criteria 3, 8 and 9 train
full models and take most of the time.
"""

import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import reference as ref
from gradcheck import check_model, check_module
from osslifecycle.evaluation import ConfusionMatrix, aggregate_metrics, ece, per_class_metrics
from osslifecycle.explain import (
    FeatureCategoryMap, ablation_study, attribute_model, combine_categories, ig_completeness,
    integrated_gradients, shap_values,
)
from osslifecycle.features import FeaturePipeline, compute_deltas, ols_slope, split_dataset, tabular_dim
from osslifecycle.ingestion import SynthesisConfig, generate_synthetic_corpus, scramble_metrics
from osslifecycle.nn import (
    EncoderLayer, FocalLossConfig, HeavyConfig, MlpConfig, MultiHeadSelfAttention, TransformerConfig, build_model,
    cross_entropy, focal_loss, heavy_config, predict_logits,
)
from osslifecycle.pipeline import RoutingThresholds, make_trace, replay
from osslifecycle.schema import METRIC_CATEGORY, METRICS, Category, Stage
from osslifecycle.training import build_task_dataset
from osslifecycle.workflow import (
    evaluate_pipeline, mean_test_accuracy, predict_flat, score_labels, train_flat_baseline, train_hierarchy,
)

criterion = pytest.mark.criterion


def load_split(repos, seed=0):
    split = split_dataset(repos, seed=seed)
    byid = {r.repo_id: r for r in repos}
    parts = {k: [byid[i] for i in split.part(k)] for k in ("train", "val", "test")}
    pipe = FeaturePipeline().fit(parts["train"])
    return {k: pipe.transform(v) for k, v in parts.items()}


# --- 1 -------------------------------------------------------------------------

@criterion(1, "metric oracle on the reference confusion counts")
def test_c1_metric_oracle():
    t0 = time.perf_counter()
    cm = ConfusionMatrix(np.array(ref.COUNTS), ref.CLASSES)
    per = per_class_metrics(cm)
    agg = aggregate_metrics(cm)
    elapsed = time.perf_counter() - t0
    for name, (p, r, f1, n) in ref.PER_CLASS.items():
        m = per[name]
        assert max(abs(m.precision - p), abs(m.recall - r), abs(m.f1 - f1)) < 5e-4, name
        assert m.support == n
    assert abs(agg["macro_f1"] - ref.MACRO_F1) < 5e-4
    assert abs(agg["weighted_f1"] - ref.WEIGHTED_F1) < 5e-4
    assert abs(agg["accuracy"] - ref.ACCURACY) < 5e-4
    assert abs(agg["balanced_accuracy"] - ref.BALANCED_ACCURACY) < 5e-4
    assert elapsed < 1.0


# --- 2 -------------------------------------------------------------------------

@criterion(2, "analytic gradients match central differences")
def test_c2_gradients():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        d_in, n_cls = int(rng.integers(3, 9)), int(rng.integers(2, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=rng.integers(1, 4)))
        head = "sigmoid" if n_cls == 2 else "softmax"
        m = build_model(MlpConfig(d_in, hidden, 1 if head == "sigmoid" else n_cls, head, dropout=0.0), seed,
                        np.float64)
        for _, b in m.named_buffers():
            b[...] = rng.uniform(0.5, 1.5, size=b.shape)
        x = rng.normal(size=(6, d_in))
        t = rng.integers(0, n_cls, 6)
        worst[f"mlp{seed}"] = max(check_model(m, (x,), t, seed=seed).values())

        d, h = 4 * int(rng.integers(1, 4)), 2
        x = rng.normal(size=(2, int(rng.integers(3, 7)), d))
        worst[f"attn{seed}"] = max(check_module(MultiHeadSelfAttention(d, h, rng, np.float64), x, seed).values())
        worst[f"block{seed}"] = max(check_module(EncoderLayer(d, h, 2 * d, 0.0, rng, np.float64), x.copy(),
                                                 seed).values())

        cfg = HeavyConfig(TransformerConfig(6, 5, 8, 2, 2, 16, 0.0), MlpConfig(7, (6, 4), None, "none", 0.0), 3)
        hv = build_model(cfg, seed, np.float64)
        inputs = (rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 7)))
        worst[f"heavy{seed}"] = max(check_model(hv, inputs, rng.integers(0, 3, 4), seed=seed).values())
    assert max(worst.values()) < 1e-4, worst
    assert time.perf_counter() - t0 < 60


# --- 8 (shared with 3) -----------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_run():
    """The 2,000-repository end-to-end run: full hierarchy and the flat baseline."""
    t0 = time.perf_counter()
    repos = generate_synthetic_corpus(SynthesisConfig.from_mix(2000, noise_level=0.3, seed=1))
    fs = load_split(repos)
    hier = train_hierarchy(fs["train"], fs["val"], seed=0)
    ev = evaluate_pipeline(fs["test"], hier.models)
    flat = train_flat_baseline(fs["train"], fs["val"], seed=0)
    base = score_labels(list(fs["test"].labels), predict_flat(flat.model, fs["test"]))
    return {"features": fs, "hierarchy": hier, "report": ev.report, "baseline": base,
            "seconds": time.perf_counter() - t0}


@criterion(8, "end-to-end synthetic run beats the flat baseline")
def test_c8_end_to_end(synthetic_run):
    rep, base = synthetic_run["report"], synthetic_run["baseline"]
    print(f"\nhierarchy acc {rep.accuracy:.4f} macro F1 {rep.macro_f1:.4f}; flat acc {base.accuracy:.4f} "
          f"macro F1 {base.macro_f1:.4f}; {synthetic_run['seconds']:.0f}s")
    assert rep.macro_f1 >= base.macro_f1 + 0.05
    assert rep.accuracy >= 0.90
    assert synthetic_run["seconds"] < 30 * 60


# --- 3 -------------------------------------------------------------------------

@criterion(3, "integrated-gradients axioms")
def test_c3_integrated_gradients(synthetic_run):
    rng = np.random.default_rng(0)
    w = rng.normal(size=9)
    lin = build_model(MlpConfig(9, (), 1, "none", dropout=0.0, batchnorm=False), 0, np.float64)
    lin.head.params["weight"][:, 0] = w
    lin.head.params["bias"][:] = 0.3
    x = rng.normal(size=(20, 9))
    (ig,) = integrated_gradients(lin, (x,), steps=256, target=0)
    assert np.abs(ig - w * x).max() < 1e-10

    t0 = time.perf_counter()
    heavy = synthetic_run["hierarchy"].models.heavy
    ds = build_task_dataset(synthetic_run["features"]["test"], "heavy")
    inputs = tuple(a[:120] for a in ds.inputs)
    assert len(inputs[0]) >= 100
    attrs = integrated_gradients(heavy, inputs, steps=256)
    total, diff = ig_completeness(heavy, inputs, attrs)
    err = np.abs(total - diff) / np.maximum(np.abs(diff), 1e-12)
    pooled = np.linalg.norm(total - diff) / np.linalg.norm(diff)
    print(f"\nIG completeness over {len(diff)} samples: max rel err {err.max():.2e} "
          f"(sample {err.argmax()}, F(x)-F(0)={diff[err.argmax()]:.3g}), median {np.median(err):.2e}, pooled {pooled:.2e}")
    assert err.max() < 0.01
    assert time.perf_counter() - t0 < 5 * 60


# --- 4 -------------------------------------------------------------------------

@criterion(4, "Shapley efficiency and sampling accuracy")
def test_c4_shapley():
    t0 = time.perf_counter()
    for d, seed in ((4, 0), (7, 1), (10, 2)):
        rng = np.random.default_rng(seed)
        m = build_model(MlpConfig(d, (12, 6), 1, "none", dropout=0.0, batchnorm=False), seed, np.float64)

        def f(r):
            return predict_logits(m, (r,), batch_size=4096)[:, 0]

        x, bg = rng.normal(size=d), rng.normal(size=(16, d))
        exact = shap_values(f, x, bg, mode="exact")
        assert abs(exact.sum() - (f(x[None])[0] - f(bg.mean(axis=0)[None])[0])) < 1e-6
        sampled = shap_values(f, x, bg, n_samples=4096, seed=seed, mode="sampling")
        assert np.abs(sampled - exact).max() < 0.05 * np.abs(exact).max(), d
    assert time.perf_counter() - t0 < 5 * 60


# --- 5 -------------------------------------------------------------------------

@criterion(5, "focal loss reduces to cross-entropy; reference value")
def test_c5_focal():
    rng = np.random.default_rng(0)
    plain = FocalLossConfig(alpha=1.0, gamma=0.0)
    for k in (2, 3, 4):
        z = rng.normal(size=(64, k)) * 3
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        t = rng.integers(0, k, 64)
        assert abs(focal_loss(p, t, plain) - cross_entropy(p, t)) < 1e-9
    assert abs(focal_loss(np.array([0.9]), [1]) - 2.634e-4) < 1e-7


# --- 6 -------------------------------------------------------------------------

def oracle_label(p1, heavy, light, p_cf):
    """The routing inequalities written out independently of the pipeline."""
    if p1 >= 0.85:
        return Stage.CONTRIB_MID
    vec = heavy if max(heavy) >= max(light) else light
    if int(np.argmax(vec)) == 2 and max(vec) >= 0.70:
        return Stage.TOY
    return Stage.CLUB if p_cf >= 0.5 else Stage.FEDERATION


def random_case(rng):
    edge = rng.random() < 0.3
    p1 = float(rng.choice([0.85, np.nextafter(0.85, 0), 0.0, 1.0])) if edge else float(rng.random())
    vecs = []
    for _ in range(2):
        v = rng.dirichlet(np.ones(3) * rng.choice([0.3, 1.0, 5.0]))
        if edge and rng.random() < 0.5:
            v = np.array([0.15, 0.15, 0.70])[rng.permutation(3)] if rng.random() < 0.5 else np.full(3, 1 / 3)
        vecs.append(v)
    p_cf = float(rng.choice([0.5, np.nextafter(0.5, 0), 0.0, 1.0])) if edge else float(rng.random())
    return p1, vecs[0], vecs[1], p_cf


@criterion(6, "routing totality and trace replay")
def test_c6_routing():
    rng = np.random.default_rng(0)
    th = RoutingThresholds()
    tags = {"S1-accept", "S2-toy-accept", "expert-club", "expert-federation"}
    seen = set()
    for i in range(10_000):
        p1, heavy, light, p_cf = random_case(rng)
        tr = make_trace(f"r{i}", p1, heavy, light, p_cf, th)
        assert tr.route in tags
        seen.add(tr.route)
        assert tr.final is oracle_label(p1, heavy, light, p_cf)
        assert replay(tr) is tr.final
        assert replay(type(tr).from_json(tr.to_json())) is tr.final
    assert seen == tags


# --- 7 -------------------------------------------------------------------------

@criterion(7, "feature pipeline numerics")
def test_c7_features():
    repos = generate_synthetic_corpus(SynthesisConfig.from_mix(400, noise_level=0.3, seed=2))
    fs = load_split(repos)
    tab = fs["train"].tabular
    assert tab.shape[1] == 263 == tabular_dim()
    mean, std = tab.mean(axis=0), tab.std(axis=0)
    live = std > 0
    assert live.all(), np.flatnonzero(~live)
    assert np.abs(mean).max() < 1e-6
    assert np.abs(std - 1).max() < 1e-3
    levels = fs["train"].sequences[..., :20].reshape(-1, 20)
    assert np.abs(levels.mean(axis=0)).max() < 1e-6
    assert np.abs(levels.std(axis=0) - 1).max() < 1e-3
    for part in fs.values():
        assert not part.sequences[:, 0, 20:].any()
    assert not compute_deltas(np.random.default_rng(0).normal(size=(5, 24, 20)))[:, 0].any()
    k = np.arange(6.0)[:, None]
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=20) * 5, rng.normal(size=20) * 5
    np.testing.assert_allclose(ols_slope(a + b * k), b, rtol=0, atol=1e-12)


# --- 9 -------------------------------------------------------------------------

ABLATION_SEEDS = (0, 10, 20)


@criterion(9, "noise category ranks last in attribution and ablation")
def test_c9_ablation_consistency():
    repos = generate_synthetic_corpus(SynthesisConfig.from_mix(2000, noise_level=0.3, seed=1))
    release = tuple(m for m in METRICS if METRIC_CATEGORY[m] is Category.RELEASE)
    fs = load_split(scramble_metrics(repos, release, seed=5))
    tr, va, te = fs["train"], fs["val"], fs["test"]

    def configs(dim):
        return {"heavy": heavy_config(dim, d_model=64, n_layers=2, ff_dim=128)}

    def evaluate(a, b, c):
        return mean_test_accuracy(a, b, c, ABLATION_SEEDS, configs(a.tabular.shape[1]))

    base = evaluate(tr, va, te)
    hier = train_hierarchy(tr, va, seed=ABLATION_SEEDS[-1], model_configs=configs(tr.tabular.shape[1]))
    cmap = FeatureCategoryMap.default()
    reports = []
    for name in ("stage1", "heavy", "light", "expert"):
        ds = build_task_dataset(te, name)
        bg = build_task_dataset(tr, name).inputs[0][:100]
        for method in (("grad_input", "ig") if name == "heavy" else ("grad_input", "shap")):
            reports.append(attribute_model(name, hier.models.get(name), ds.inputs, method, cmap,
                                           targets=ds.targets if method == "grad_input" else None, steps=32,
                                           background=bg, shap_samples=32))
    importance = combine_categories(reports)
    result = ablation_study(tr, va, te, evaluate, importance=importance, cmap=cmap, base_accuracy=base)
    print(f"\nimportance {importance}\ndrops {result.drop}\nspearman {result.spearman:.3f}")
    noise = Category.RELEASE.value
    assert min(importance, key=importance.get) == noise
    assert min(result.drop, key=result.drop.get) == noise
    assert result.spearman >= 0.7


# --- 10 ------------------------------------------------------------------------

@criterion(10, "expected calibration error properties")
def test_c10_ece():
    rng = np.random.default_rng(0)
    conf = rng.uniform(0, 1, 200_000)
    assert ece(conf, rng.random(conf.size) < conf, 15)[0] < 0.01
    # bin 1: confidence 0.4, 3/10 correct; bin 2: confidence 0.9, 8/10 correct -> (0.1 + 0.1) / 2
    two_bin = ece([0.4] * 10 + [0.9] * 10, [1] * 3 + [0] * 7 + [1] * 8 + [0] * 2, 2)[0]
    assert math.isclose(two_bin, 0.1, abs_tol=1e-12)


# --- 11 ------------------------------------------------------------------------

STAGES = (["synth"], ["ingest"], ["featurize"], ["train", "all"], ["predict"], ["evaluate"], ["explain"],
          ["ablate"], ["report"])


def run_all(cfg, out):
    from osslifecycle.cli import main
    for cmd in STAGES:
        assert main([*cmd, "--config", str(cfg), "--out", str(out), "--quiet"]) == 0, cmd


def snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(11, "byte-identical artifacts on rerun")
def test_c11_determinism(tmp_path):
    import yaml
    small = {"max_epochs": 4, "min_batches": 2, "batch_size": 64}
    cfg = {"data": {"source": "synthetic", "synthetic": {"n_repos": 120}},
           "heavy_model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "ff_dim": 32},
           "training": {t: small for t in ("stage1", "heavy", "light", "expert")},
           "explain": {"ig_steps": 8, "max_samples": 12}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    out = tmp_path / "run"
    run_all(path, out)
    first = snapshot(out)
    assert {"corpus.ndjson", "models/heavy.ckpt", "evaluation/metrics.json",
            "report/plots/confusion_matrix.svg"} <= set(first)
    shutil.rmtree(out)
    run_all(path, out)
    second = snapshot(out)
    assert sorted(first) == sorted(second)
    differing = [k for k in first if first[k] != second[k]]
    assert not differing, differing


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v", "-s", *sys.argv[1:]]))
