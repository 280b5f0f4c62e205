import dataclasses

import numpy as np
import pytest

from osslifecycle.nn import (
    FocalLossConfig, MlpConfig, build_model, compute_gradients, expert_config, predict_proba,
)
from osslifecycle.schema import Stage
from osslifecycle.training import (
    AdamW, EpochRecord, TaskDataset, TrainConfig, TrainResult, TrainingDivergedError, TrainingLog, apply_smote,
    build_task_dataset, clip_grad_norm, global_grad_norm, make_class_weights, smote_task_dataset, train_model,
    tune_hyperparameters,
    weighted_sampler,
)


def test_class_weights():
    np.testing.assert_allclose(make_class_weights([50, 25, 25]), [2 / 3, 4 / 3, 4 / 3])
    np.testing.assert_array_equal(make_class_weights([7, 7, 7]), 1.0)
    counts = np.array([13, 401, 77, 5])
    assert np.isclose((counts * make_class_weights(counts)).sum(), counts.sum(), rtol=0, atol=1e-9)
    with pytest.raises(ValueError):
        make_class_weights([3, 0])


def test_smote_midpoint_and_count():
    rng = np.random.default_rng(0)
    out, prov = apply_smote(np.array([[0.0, 0.0], [1.0, 1.0]]), 3, k=1, seed=0, return_provenance=True)
    a, b, lam = out[prov.base[0]], out[prov.neighbor[0]], prov.lam[0]
    np.testing.assert_allclose(out[2], a + lam * (b - a))
    rows = rng.normal(size=(37, 4))
    out, prov = apply_smote(rows, 200, k=5, seed=3, return_provenance=True)
    assert out.shape == (200, 4)
    np.testing.assert_array_equal(out[:37], rows)
    assert ((prov.lam >= 0) & (prov.lam <= 1)).all()
    np.testing.assert_allclose(out[37:], rows[prov.base] + prov.lam[:, None] * (rows[prov.neighbor] - rows[prov.base]))
    # every neighbour is among the 5 nearest rows of its base
    d = np.linalg.norm(rows[:, None] - rows[None], axis=-1)
    ranks = np.argsort(d, axis=1)[:, 1:6]
    assert all(n in ranks[b] for b, n in zip(prov.base, prov.neighbor))
    np.testing.assert_array_equal(apply_smote(rows, 200, seed=3), out)


def test_smote_small_classes():
    with pytest.warns(RuntimeWarning):
        assert len(apply_smote(np.eye(3), 10, k=5)) == 10
    with pytest.raises(ValueError):
        apply_smote(np.eye(3)[:1], 10)


def test_smote_rows_stay_in_training(small_features):
    ds = build_task_dataset(small_features["train"], "expert")
    aug = smote_task_dataset(ds, seed=0)
    counts = aug.counts()
    assert counts[0] == counts[1] == ds.counts().max()
    synth = [r for r in aug.repo_ids if r.startswith("smote:")]
    assert len(synth) == len(aug) - len(ds)
    held_out = set(small_features["val"].repo_ids) | set(small_features["test"].repo_ids)
    assert not held_out & set(aug.repo_ids)


def test_sampler_balances_inverse_frequency():
    labels = np.array([0] * 900 + [1] * 100)
    idx = np.concatenate(list(weighted_sampler(labels, make_class_weights([900, 100]), 256, seed=0, n_draws=10000)))
    assert len(idx) == 10000
    assert abs((labels[idx] == 1).mean() - 0.5) <= 0.02
    idx = np.concatenate(list(weighted_sampler(labels, [1, 1], 256, seed=0, n_draws=10000)))
    assert abs((labels[idx] == 1).mean() - 0.1) <= 0.02
    a = list(weighted_sampler(labels, [1, 9], 64, seed=5))
    b = list(weighted_sampler(labels, [1, 9], 64, seed=5))
    assert all((x == y).all() for x, y in zip(a, b))
    with pytest.raises(ValueError):
        next(weighted_sampler([], [1], 4, 0))


def _grads_model(seed=0):
    m = build_model(MlpConfig(5, (8,), 1, "sigmoid", dropout=0.0, batchnorm=False), seed, np.float64)
    rng = np.random.default_rng(seed)
    compute_gradients(m, (rng.normal(size=(16, 5)) * 30,), targets=rng.integers(0, 2, 16),
                      loss=FocalLossConfig(1.0, 0.0))
    return m


def test_clip_grad_norm():
    for seed in range(5):
        m = _grads_model(seed)
        for _, g in m.named_grads():
            g *= 100
        before = clip_grad_norm(m, 1.0)
        assert before > 1.0
        assert global_grad_norm(m) <= 1.0 + 1e-6
    m = _grads_model()
    scale = 0.5 / global_grad_norm(m)
    for _, g in m.named_grads():
        g *= scale
    n = global_grad_norm(m)
    clip_grad_norm(m, 1.0)
    assert global_grad_norm(m) == n


def test_decoupled_weight_decay():
    m = _grads_model()
    before = {n: p.copy() for n, p in m.named_parameters()}
    opt = AdamW(m, lr=0.01, weight_decay=0.5)
    for _ in range(3):
        opt.step(loss_lr=0.0)
    for n, p in m.named_parameters():
        np.testing.assert_allclose(p, before[n] * (1 - 0.01 * 0.5) ** 3, rtol=1e-12)


def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 6))
    y = (x @ np.array([1.0, -2.0, 0.5, 0.0, 1.0, 0.0]) > 0).astype(np.int64)
    x += np.where(y[:, None] == 1, 0.3, -0.3) * np.array([1.0, -2.0, 0.5, 0.0, 1.0, 0.0]) / 2.5
    return TaskDataset("expert", [str(i) for i in range(n)], (x.astype(np.float32),), y, ("federation", "club"))


def test_separable_toy_learned():
    ds = _separable()
    cfg = TrainConfig(learning_rate=3e-3, batch_size=32, max_epochs=50, patience=50, smote=False)
    res = train_model(ds, ds, expert_config(6), cfg)
    assert res.log.best.val_accuracy >= 0.99
    assert len(res.log.epochs) <= 50


def test_early_stop_returns_best_and_is_deterministic(tmp_path):
    tr, va = _separable(120, 1), _separable(60, 2)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, patience=3, max_epochs=60, seed=4)
    res = train_model(tr, va, expert_config(6), cfg, log_path=tmp_path / "log.csv")
    log = res.log
    if log.stop_reason.startswith("no validation"):
        assert log.best_epoch == len(log.epochs) - cfg.patience
    acc = ((predict_proba(res.model, va.inputs) >= 0.5) == va.targets).mean()
    assert acc == log.best.val_accuracy
    header = (tmp_path / "log.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["epoch", "train_loss", "val_accuracy", "val_balanced_accuracy", "val_macro_f1"]
    again = train_model(tr, va, expert_config(6), cfg)
    for (n, a), (_, b) in zip(res.model.named_parameters(), again.model.named_parameters()):
        np.testing.assert_array_equal(a, b, err_msg=n)


def test_divergence_reported():
    ds = _separable(64)
    cfg = TrainConfig(learning_rate=1e38, batch_size=64, max_epochs=3, smote=False, clip_norm=1e30)
    with pytest.raises(TrainingDivergedError, match="non-finite loss"):
        with np.errstate(all="ignore"):
            train_model(ds, ds, expert_config(6), cfg)


def test_task_datasets(small_features):
    fs = small_features["train"]
    st1 = build_task_dataset(fs, "stage1")
    assert len(st1) == len(fs)
    assert st1.targets.sum() == sum(lbl is Stage.CONTRIB_MID for lbl in fs.labels)
    for task in ("heavy", "light"):
        ds = build_task_dataset(fs, task)
        assert len(ds) == sum(lbl is not Stage.CONTRIB_MID for lbl in fs.labels)
        assert ds.classes == ("club", "federation", "toy")
    assert build_task_dataset(fs, "heavy").inputs[0].shape[1:] == (24, 40)
    ex = build_task_dataset(fs, "expert")
    lab = dict(zip(fs.repo_ids, fs.labels))
    assert {lab[r] for r in ex.repo_ids} == {Stage.CLUB, Stage.FEDERATION}
    assert all((lab[r] is Stage.CLUB) == bool(t) for r, t in zip(ex.repo_ids, ex.targets))


def test_default_learning_rates():
    assert [TrainConfig.for_task(t).learning_rate for t in ("stage1", "heavy", "light", "expert")] == \
        [8e-4, 6e-4, 8e-4, 8e-4]
    c = TrainConfig()
    assert (c.weight_decay, c.batch_size, c.dropout, c.clip_norm, c.patience) == (1e-4, 256, 0.1, 1.0, 6)


def _fake_trainer(scores):
    def trainer(train, val, model_cfg, cfg):
        ba, f1 = scores[cfg.learning_rate]
        log = TrainingLog("expert", [EpochRecord(1, 0.1, ba, ba, f1)], best_epoch=1)
        return TrainResult(None, log, cfg)
    return trainer


def test_tuner_selection(tmp_path):
    ds = _separable(10)
    base = TrainConfig()
    one = tune_hyperparameters({"learning_rate": [1e-4]}, ds, ds, expert_config(6), base,
                               trainer=_fake_trainer({1e-4: (0.5, 0.5)}))
    assert one.best_config.learning_rate == 1e-4
    dom = tune_hyperparameters({"learning_rate": [1e-4, 1e-3]}, ds, ds, expert_config(6), base,
                               trainer=_fake_trainer({1e-4: (0.6, 0.6), 1e-3: (0.8, 0.7)}))
    assert dom.best_config.learning_rate == 1e-3
    tie = tune_hyperparameters({"learning_rate": [1e-4, 1e-3, 1e-5]}, ds, ds, expert_config(6), base,
                               trial_path=tmp_path / "grid.csv",
                               trainer=_fake_trainer({1e-4: (0.8, 0.6), 1e-3: (0.8, 0.7), 1e-5: (0.7, 0.9)}))
    assert tie.best_config.learning_rate == 1e-3
    rows = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("trial,learning_rate")
    with pytest.raises(ValueError):
        tune_hyperparameters({}, ds, ds, expert_config(6), base)
    with pytest.raises(ValueError):
        tune_hyperparameters({"lr": [1]}, ds, ds, expert_config(6), base)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        dataclasses.replace(TrainConfig(), loss="hinge")
