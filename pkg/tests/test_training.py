import numpy as np
import pytest

from epipretrain import model as M
from epipretrain import ssl as T
from epipretrain import tasks as TK
from epipretrain import training as TR
from epipretrain.data import dataset_normalize
from epipretrain.optim import Adam
from epipretrain.synthetic import DiseaseSpec, SyntheticCorpusSpec, generate_datasets


@pytest.fixture
def corpus(flu_datasets):
    return T.PretrainCorpus(list(flu_datasets))


@pytest.fixture
def forecast_data(flu_datasets):
    return TK.forecast_samples(flu_datasets[0].series[0].values, 16, 4, pad=4)


def params_equal(a, b, names=None):
    names = names if names is not None else a.keys()
    return all(np.array_equal(a[k], b[k]) for k in names)


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    Adam(0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_adam_skips_absent_grads():
    p = {"a": np.ones(2), "b": np.ones(2)}
    Adam(0.1).step(p, {"a": np.ones(2)})
    np.testing.assert_array_equal(p["b"], 1.0)


# ---------------------------------------------------------------- pre-training


def test_zero_lr_leaves_params(corpus, small_cfg):
    p0 = T.ensure_ssl_heads(M.init_params(small_cfg), small_cfg)
    tc = TR.TrainConfig(learning_rate=0.0, max_epochs=3)
    p, rep = TR.pretrain(M.copy_params(p0), corpus, tc, T.SSLConfig(window=24, batch_size=4), small_cfg)
    assert params_equal(p, p0)
    assert len(rep.total) == 3


def test_pretrain_deterministic(corpus, small_cfg):
    tc = TR.TrainConfig(learning_rate=1e-3, max_epochs=5, seed=4)
    sc = T.SSLConfig(window=24, batch_size=4)
    a, ra = TR.pretrain(M.init_params(small_cfg), corpus, tc, sc, small_cfg)
    b, rb = TR.pretrain(M.init_params(small_cfg), corpus, tc, sc, small_cfg)
    assert ra.total == rb.total
    assert params_equal(a, b)


def test_hard_parameter_sharing(corpus, small_cfg):
    """Every backbone tensor receives gradient from each task; heads only from their own."""
    p = T.ensure_ssl_heads(M.init_params(small_cfg), small_cfg)
    rng = np.random.default_rng(0)
    while True:
        batches = T.sample_batch(corpus, small_cfg, T.SSLConfig(window=24, batch_size=4), rng)
        if len(batches) == 4:
            break
    for b in batches:
        _, g = T.batch_loss_and_grads(p, small_cfg, b)
        backbone = [k for k in p if M.is_backbone(k)]
        assert all(k in g and np.any(g[k] != 0) for k in backbone if not k.startswith("final"))
        heads = {k.split(".")[1] for k in g if k.startswith("head.")}
        assert heads == {b.task}


def test_pretrain_moving_average_monotone(flu_datasets):
    cfg = M.ModelConfig(P=4, S=4, D=16, n_layers=1, n_heads=2, ffn_width=32, seed=2)
    tc = TR.TrainConfig(learning_rate=3e-4, max_epochs=500, early_stop_patience=10**6, seed=2)
    corpus = T.PretrainCorpus([flu_datasets[0]])
    _, rep = TR.pretrain(M.init_params(cfg), corpus, tc, T.SSLConfig(window=52, batch_size=64), cfg)
    ma = np.convolve(rep.total, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(ma) <= 0)
    assert rep.total[-1] < rep.total[0]


def test_nonfinite_loss_names_epoch(corpus, small_cfg):
    p = T.ensure_ssl_heads(M.init_params(small_cfg), small_cfg)
    p["head.randmask.b2"][0] = np.nan
    with pytest.raises(TR.TrainingError, match="epoch 0"):
        TR.pretrain(p, corpus, TR.TrainConfig(max_epochs=2), T.SSLConfig(window=24, batch_size=2), small_cfg)


# ---------------------------------------------------------------- early stopping


def test_early_stopper():
    s = TR.EarlyStopper(2)
    assert s.update(1.0, 0)
    assert not s.update(1.0, 1)
    assert not s.should_stop
    assert not s.update(2.0, 2)
    assert s.should_stop and s.best_epoch == 0


def test_pretrain_stops_on_patience(corpus, small_cfg):
    tc = TR.TrainConfig(learning_rate=0.0, max_epochs=100, early_stop_patience=3, smooth_window=1)
    _, rep = TR.pretrain(M.init_params(small_cfg), corpus, tc, T.SSLConfig(window=24, batch_size=2), small_cfg)
    assert rep.reason == "patience" and rep.stop_epoch < 100


# ---------------------------------------------------------------- fine-tuning


def test_probe_freezes_backbone(small_cfg, forecast_data):
    p = TR.attach_head(M.init_params(small_cfg), small_cfg, "forecast", 4)
    tc = TR.TrainConfig(learning_rate=1e-2, max_epochs=20)
    q, rep = TR.linear_probe(p, "forecast", forecast_data, tc, small_cfg, epochs=20)
    assert params_equal(q, p, [k for k in p if M.is_backbone(k)])
    assert not params_equal(q, p, M.head_names(p, "forecast"))


def test_probe_matches_least_squares(small_cfg, forecast_data):
    """Without instance norm the probe is linear regression on frozen pooled features."""
    p = TR.attach_head(M.init_params(small_cfg), small_cfg, "forecast", 4)
    data = forecast_data
    segs, _ = TR._prepare(data.inputs, small_cfg, False, data.pad)
    z, _ = M.encode(p, small_cfg, segs)
    F = np.hstack([z.mean(axis=1), np.ones((len(data), 1))])
    coef, *_ = np.linalg.lstsq(F, data.targets, rcond=None)
    best = np.mean((F @ coef - data.targets) ** 2)

    q = M.copy_params(p)
    q["head.forecast.w"], q["head.forecast.b"] = coef[:-1].copy(), coef[-1].copy()
    loss, grads = TR.supervised_loss_and_grads(q, small_cfg, data, instance_norm=False, backbone=False)
    assert loss == pytest.approx(best, rel=1e-9)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8

    tc = TR.TrainConfig(learning_rate=3e-2, max_epochs=300, early_stop_patience=10**6, val_fraction=0.0)
    _, rep = TR.linear_probe(p, "forecast", data, tc, small_cfg, instance_norm=False, epochs=300)
    assert best <= min(rep.total) < rep.total[0]


def test_finetune_zero_epochs_is_identity(small_cfg, forecast_data):
    p = TR.attach_head(M.init_params(small_cfg), small_cfg, "forecast", 4)
    q, rep = TR.fine_tune(p, forecast_data, TR.TrainConfig(), small_cfg, epochs=0, probed=True)
    assert params_equal(p, q) and rep.total == []


def test_finetune_requires_probe(small_cfg, forecast_data):
    p = TR.attach_head(M.init_params(small_cfg), small_cfg, "forecast", 4)
    with pytest.raises(TR.TrainingError, match="probing"):
        TR.fine_tune(p, forecast_data, TR.TrainConfig(), small_cfg)
    TR.fine_tune(p, forecast_data, TR.TrainConfig(max_epochs=1), small_cfg, no_linear_probe=True)


@pytest.mark.parametrize("seed", range(5))
def test_first_finetune_epochs_non_increasing(forecast_data, seed):
    cfg = M.ModelConfig(P=4, S=4, D=16, n_layers=1, n_heads=2, ffn_width=32, seed=seed)
    tc = TR.TrainConfig(learning_rate=1e-3, max_epochs=20, early_stop_patience=1000, seed=seed, probe_fraction=0.5)
    _, reports = TR.two_stage_finetune(M.init_params(cfg), forecast_data, tc, cfg, width=4)
    assert [r.stage for r in reports] == ["probe", "finetune"]
    for r in reports:
        assert np.all(np.diff(r.total) <= 0), r.stage


def test_best_validation_params_restored(small_cfg, forecast_data):
    tc = TR.TrainConfig(learning_rate=1e-2, max_epochs=40, early_stop_patience=1000)
    p, (rep,) = TR.two_stage_finetune(M.init_params(small_cfg), forecast_data, tc, small_cfg, 4, no_linear_probe=True)
    _, val = forecast_data.split_tail(tc.val_fraction)
    assert TR.supervised_loss(p, small_cfg, val) == pytest.approx(min(rep.val))


def test_split_tail_is_chronological(forecast_data):
    train, val = forecast_data.split_tail(0.1)
    n = len(forecast_data)
    assert len(train) + len(val) == n and len(val) == round(0.1 * n)
    np.testing.assert_array_equal(val.inputs, forecast_data.inputs[len(train):])
    assert val.pad == 4


def test_predict_denormalizes(small_cfg):
    p = M.add_head(M.init_params(small_cfg), small_cfg, "forecast", 2)
    for k in M.head_names(p, "forecast"):
        p[k][:] = 0
    x = np.arange(8.0) + 10
    np.testing.assert_allclose(TR.predict(p, small_cfg, x, "forecast"), [[x.mean(), x.mean()]])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(stage="bogus")
    with pytest.raises(ValueError):
        TR.TrainConfig(learning_rate=-1)
