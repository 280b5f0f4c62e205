import numpy as np
import pytest

from osslifecycle.explain import (
    FeatureCategoryMap, ablate_features, ablation_study, attention_profile, attribute_model, category_heatmap,
    category_importance, category_of, gradient_input_attribution, ig_completeness, integrated_gradients,
    rank_correlation, shap_values, temporal_importance,
)
from osslifecycle.nn import HeavyConfig, MlpConfig, TransformerConfig, build_model, predict_logits
from osslifecycle.schema import CATEGORY_ORDER, Category
from osslifecycle.training import build_task_dataset


def linear_model(w, b=0.0):
    m = build_model(MlpConfig(len(w), (), 1, "none", dropout=0.0, batchnorm=False), 0, np.float64)
    m.head.params["weight"][:, 0] = w
    m.head.params["bias"][:] = b
    return m


def test_category_map_total():
    cmap = FeatureCategoryMap.default()
    assert len(cmap.tabular) == 263 and len(cmap.sequence) == 40
    assert all(c in CATEGORY_ORDER for c in cmap.tabular + cmap.sequence)
    assert category_of("cross:total_activity") is Category.CONTRIBUTION
    assert category_of("cross:engagement_ratio") is Category.COMMUNITY
    assert category_of("cross:review_efficiency") is Category.PR_QA
    assert category_of("releases:slope") is Category.RELEASE
    assert category_of("issue_ttfr_days:delta") is Category.ISSUE
    with pytest.raises(KeyError):
        category_of("stars:mean")
    with pytest.raises(KeyError):
        category_importance({"stars:mean": 1.0})


def test_grad_input_linear():
    w = np.array([1.5, -2.0, 0.5, 3.0])
    m = linear_model(w)
    x = np.array([[1.0, 2.0, 0.0, -1.0], [0.5, 0.5, 0.5, 0.5]])
    (a,) = gradient_input_attribution(m, (x,))
    np.testing.assert_allclose(a, np.abs(w * x))
    assert (a[0, 2] == 0)
    (z,) = gradient_input_attribution(linear_model(np.zeros(4), 2.0), (x,))
    assert not z.any()


def test_grad_input_with_loss_targets():
    m = build_model(MlpConfig(4, (5,), 1, "sigmoid", dropout=0.0, batchnorm=False), 1, np.float64)
    x = np.random.default_rng(0).normal(size=(3, 4))
    (a,) = gradient_input_attribution(m, (x,), targets=np.array([0, 1, 1]))
    assert a.shape == x.shape and (a >= 0).all()


def test_ig_linear_exact_and_baseline():
    rng = np.random.default_rng(0)
    w = rng.normal(size=6)
    m = linear_model(w, 0.7)
    x = rng.normal(size=(5, 6))
    for steps in (1, 7, 50):
        (ig,) = integrated_gradients(m, (x,), steps=steps, target=0)
        assert np.abs(ig - w * x).max() < 1e-10
    (zero,) = integrated_gradients(m, (np.zeros((2, 6)),), steps=16)
    assert not zero.any()
    with pytest.raises(ValueError):
        integrated_gradients(m, (x,), steps=0)


def test_ig_completeness_small_heavy(small_features, small_hierarchy):
    heavy = small_hierarchy.models.heavy
    ds = build_task_dataset(small_features["test"], "heavy")
    inputs = tuple(x[:8] for x in ds.inputs)
    attrs = integrated_gradients(heavy, inputs, steps=256)
    total, diff = ig_completeness(heavy, inputs, attrs)
    assert np.abs(total - diff).max() / np.abs(diff).max() < 0.01


def test_shap_additive_exact():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=5), rng.normal(size=5)
    x = rng.normal(size=5)
    phi = shap_values(lambda r: r @ w, x, b[None], mode="exact")
    np.testing.assert_allclose(phi, w * (x - b), atol=1e-12)
    bg = rng.normal(size=(30, 5))
    phi = shap_values(lambda r: r @ w, x, bg)
    np.testing.assert_allclose(phi, w * (x - bg.mean(0)), atol=1e-12)


def test_shap_axioms():
    f = lambda r: np.tanh(r[:, 0] + r[:, 1]) * r[:, 2] + 0.0 * r[:, 3]  # noqa: E731
    x = np.array([0.4, 0.4, 1.5, 9.0])
    bg = np.zeros((1, 4))
    phi = shap_values(f, x, bg, mode="exact")
    assert abs(phi[0] - phi[1]) < 1e-12
    assert phi[3] == 0
    assert abs(phi.sum() - (f(x[None])[0] - f(bg)[0])) < 1e-6
    sampled = shap_values(f, x, bg, n_samples=512, seed=1, mode="sampling")
    assert abs(sampled[0] - sampled[1]) < 0.05 * np.abs(phi).max()
    with pytest.raises(ValueError):
        shap_values(f, np.zeros(13), np.zeros((1, 13)), mode="exact")
    with pytest.raises(ValueError):
        shap_values(f, x, np.zeros((0, 4)))


def test_shap_sampled_matches_exact_on_mlp():
    m = build_model(MlpConfig(8, (16, 8), 1, "none", dropout=0.0, batchnorm=False), 3, np.float64)
    f = lambda r: predict_logits(m, (r,), batch_size=1024)[:, 0]  # noqa: E731
    rng = np.random.default_rng(0)
    x, bg = rng.normal(size=8), rng.normal(size=(20, 8))
    exact = shap_values(f, x, bg, mode="exact")
    sampled = shap_values(f, x, bg, n_samples=4096, seed=0, mode="sampling")
    assert np.abs(sampled - exact).max() < 0.05 * np.abs(exact).max()
    np.testing.assert_array_equal(sampled, shap_values(f, x, bg, n_samples=4096, seed=0, mode="sampling"))


def _tiny_heavy(seed=0):
    cfg = HeavyConfig(TransformerConfig(40, 24, 8, 2, 2, 16, 0.0), MlpConfig(263, (8,), None, "none", 0.0), 3)
    return build_model(cfg, seed)


def test_attention_profile():
    m = _tiny_heavy()
    seq = np.random.default_rng(0).normal(size=(5, 24, 40)).astype(np.float32)
    p = attention_profile(m, seq)
    assert p.shape == (24,) and abs(p.sum() - 1) < 1e-6 and (p >= 0).all()
    for layer in m.encoder.layers:
        layer.attn.qkv.params["weight"][:, :16] = 0  # zero queries and keys -> uniform attention
        layer.attn.qkv.params["bias"][:16] = 0
    np.testing.assert_allclose(attention_profile(m, seq), 1 / 24, atol=1e-6)


def test_category_importance_examples():
    norm, raw, flags = category_importance({"commit_count:mean": 0.2, "commit_count:std": 0.4})
    assert raw == {"Contribution Activity": pytest.approx(0.3)} and norm["Contribution Activity"] == 1.0
    names = FeatureCategoryMap.default().tabular_names
    norm, raw, flags = category_importance({n: 0.0 for n in names})
    assert all(v == 0 for v in norm.values()) and flags
    norm, _, flags = category_importance({n: 0.5 for n in names})
    assert not flags and all(abs(v - 0.2) < 1e-12 for v in norm.values())
    assert abs(sum(norm.values()) - 1) < 1e-12


def test_temporal_importance():
    a = np.zeros((24, 40))
    a[23] = 1.0
    curve, ratio = temporal_importance(a)
    assert curve.argmax() == 23 and ratio == np.inf
    a[0] = 0.01
    assert temporal_importance(a)[1] > 10
    curve, ratio = temporal_importance(np.ones((3, 24, 40)))
    assert ratio == 1.0 and curve.shape == (24,)


def test_attribute_model_reports(small_features, small_hierarchy):
    cmap = FeatureCategoryMap.default()
    fs = small_features["test"]
    for name, method in (("light", "shap"), ("heavy", "ig"), ("stage1", "grad_input")):
        ds = build_task_dataset(fs, name)
        bg = build_task_dataset(small_features["train"], name).inputs[-1][:20]
        rep = attribute_model(name, small_hierarchy.models.get(name), tuple(x[:4] for x in ds.inputs), method,
                              cmap, targets=ds.targets[:4] if method == "grad_input" else None, steps=8,
                              shap_samples=16, background=bg)
        assert abs(sum(rep.categories.values()) - 1) < 1e-9
        assert set(rep.categories) == {c.value for c in CATEGORY_ORDER}
        if name == "heavy":
            assert len(rep.monthly) == 24 and rep.recency_ratio is not None
            assert len(rep.feature_names) == 40 + 263
    hm = category_heatmap([rep])
    assert hm["models"] == ["stage1"] and len(hm["values"]) == 5


def test_ablate_features_shapes(small_features):
    cmap = FeatureCategoryMap.default()
    fs = small_features["val"]
    out = ablate_features(fs, cmap, [Category.RELEASE])
    n_rel = int(cmap.tabular_mask(Category.RELEASE).sum())
    assert out.tabular.shape[1] == 263 - n_rel
    zeroed = cmap.sequence_mask(Category.RELEASE)
    assert not out.sequences[..., zeroed].any()
    np.testing.assert_array_equal(out.sequences[..., ~zeroed], fs.sequences[..., ~zeroed])
    with pytest.raises(ValueError):
        ablate_features(fs, FeatureCategoryMap(("commit_count:mean",), ("commit_count:level",)), [Category.RELEASE])


def test_rank_correlation_and_study(small_features):
    a = {"x": 3.0, "y": 2.0, "z": 1.0}
    assert rank_correlation(a, {"x": 30, "y": 20, "z": 10}) == pytest.approx(1.0)
    assert rank_correlation(a, {"x": 1, "y": 2, "z": 3}) == pytest.approx(-1.0)
    width = {}

    def evaluate(tr, va, te):
        width[tr.tabular.shape[1]] = True
        return tr.tabular.shape[1] / 263

    imp = {c.value: float(FeatureCategoryMap.default().tabular_mask(c).sum()) for c in CATEGORY_ORDER}
    res = ablation_study(small_features["train"], small_features["val"], small_features["test"], evaluate,
                         importance=imp)
    assert res.base_accuracy == 1.0 and len(width) >= 2
    assert res.spearman == pytest.approx(1.0)
    assert all(d > 0 for d in res.drop.values())
