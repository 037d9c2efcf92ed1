import math

import numpy as np
import pytest

from eitphys import autodiff as ad
from eitphys import nets, training
from eitphys.errors import ConfigError, NumericalError, UsageError
from eitphys.nets import ModelConfig
from eitphys.phantom import Dataset
from eitphys.tasks import task_spec
from eitphys.training import Checkpoint, TrainConfig

TINY = dict(groups=1, layers_per_group=1, initial_features=2, intermed_dim=4, lstm_hidden=8)


def tiny_model(cfg: TrainConfig, seed=0):
    return nets.build_model(training.model_config_for(cfg.spec, ModelConfig(**TINY, seed=seed)))


# ---------------------------------------------------------------------- loss


def test_l1_examples():
    t = np.random.default_rng(0).standard_normal((2, 5, 1))
    assert training.l1_multitask_loss(ad.Tensor(t), t).item() == 0.0
    assert training.l1_multitask_loss(ad.Tensor(t + 1), t).item() == pytest.approx(1.0)
    pred = np.zeros((1, 4, 2))
    tgt = np.stack([np.ones(4), np.full(4, 3.0)], axis=-1)[None]
    assert training.l1_multitask_loss(ad.Tensor(pred), tgt).item() == pytest.approx(2.0)
    with pytest.raises(UsageError):
        training.l1_multitask_loss(ad.Tensor(pred), tgt[:, :3])


# ----------------------------------------------------------------- optimizer


def test_adamw_first_step():
    p = np.array([1.0])
    training.adamw_step([p], [np.array([1.0])], None, lr=0.1, wd=0.0)
    assert p[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert p[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_pure_decay():
    p = np.array([2.0, -4.0])
    training.adamw_step([p], [np.zeros(2)], None, lr=0.1, wd=0.01)
    np.testing.assert_allclose(p, [2.0 * 0.999, -4.0 * 0.999], rtol=1e-15)


def test_adamw_decreases_quadratic():
    p = np.array([3.0, -2.0])
    state = None
    losses = [float(p @ p)]
    for _ in range(2):
        _, state = training.adamw_step([p], [2 * p.copy()], state, lr=0.1, wd=0.01)
        losses.append(float(p @ p))
    assert losses[0] > losses[1] > losses[2]
    assert state["step"] == 2


def test_adamw_shape_check():
    with pytest.raises(UsageError):
        training.adamw_step([np.zeros(2)], [np.zeros(3)])


# ------------------------------------------------------------------ schedule


def test_one_cycle_endpoints():
    cfg = TrainConfig(max_lr=2e-3, pct_start=0.3)
    total = 100
    assert training.one_cycle_lr(0, total, cfg) == pytest.approx(2e-3 / 25, rel=1e-12)
    assert abs(training.one_cycle_lr(30, total, cfg) - 2e-3) <= 1e-9
    assert abs(training.one_cycle_lr(total - 1, total, cfg) - 2e-3 / 1e4) <= 1e-6 * 2e-3
    lrs = [training.one_cycle_lr(s, total, cfg) for s in range(total)]
    assert np.all(np.diff(lrs[:31]) > 0) and np.all(np.diff(lrs[30:]) < 0)
    with pytest.raises(UsageError):
        training.one_cycle_lr(total, total, cfg)
    with pytest.raises(UsageError):
        training.one_cycle_lr(-1, total, cfg)


def test_one_cycle_continuous_at_peak():
    cfg = TrainConfig(max_lr=1e-3, pct_start=0.25)
    total = 1000
    warm = 250
    left = training.one_cycle_lr(warm, total, cfg)
    right = training.one_cycle_lr(warm + 1, total, cfg)
    assert abs(left - right) < 1e-3 * 1e-3


@pytest.mark.parametrize("bad", [dict(pct_start=0.0), dict(pct_start=1.0), dict(max_lr=0.0), dict(epochs=0),
                                 dict(task=9), dict(task=1, variant=3)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_train_config_roundtrip():
    cfg = TrainConfig(task=5, variant=2, max_lr=3e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})


# ------------------------------------------------------------------- loop


def _short_train(dataset, cfg, **kw):
    model = tiny_model(cfg)
    return training.train(model, dataset, cfg, **kw)


def test_training_is_deterministic(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3, max_lr=3e-3)
    a = _short_train(small_dataset, cfg, log_path=tmp_path / "a.csv")
    b = _short_train(small_dataset, cfg, log_path=tmp_path / "b.csv")
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert len(a.history) == 4
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "step,epoch,lr,loss"


def test_model_task_mismatch(small_dataset):
    cfg = TrainConfig(task=5, variant=3)
    model = tiny_model(TrainConfig(task=5))
    with pytest.raises(ConfigError):
        training.train(model, small_dataset, cfg)


def test_checkpoint_roundtrip_gives_identical_report(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2)
    ck = _short_train(small_dataset, cfg)
    path = tmp_path / "c.ckpt"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.train_config == cfg and back.history == ck.history
    assert back.optimizer["step"] == ck.optimizer["step"]
    for m1, m2 in zip(back.optimizer["m"], ck.optimizer["m"]):
        np.testing.assert_array_equal(m1, m2)
    assert training.evaluate(back, small_dataset) == training.evaluate(ck, small_dataset)


def test_evaluate_empty_set(small_dataset):
    ck = _short_train(small_dataset, TrainConfig(epochs=1, batch_size=4))
    rep = training.evaluate(ck, Dataset([]))
    assert rep.n_segments == 0 and rep.plus + rep.circle + rep.minus == 0
    assert math.isnan(rep.rmse)


def test_evaluate_counts_match_segments(small_dataset):
    ck = _short_train(small_dataset, TrainConfig(epochs=1, batch_size=4, task=4))
    rep = training.evaluate(ck, small_dataset)
    assert rep.n_segments == 4 * 3  # three 128-frame windows per 40 s record
    assert rep.plus + rep.circle + rep.minus == rep.n_segments
    assert rep.unit == "SD" and rep.task == "p_ab"


def test_joint_outputs_get_gradients_on_both_channels(small_dataset):
    cfg = TrainConfig(task=5, variant=2)
    model = tiny_model(cfg)
    spec = task_spec(5, 2)
    scaler = training.fit_scaler(small_dataset.records, spec)
    segs = training.epoch_segments(small_dataset.records, cfg, 0, scaler)[:2]
    eit, target, _ = training.stack_batch(segs)
    loss = training.l1_multitask_loss(model(eit.astype(np.float32)), target.astype(np.float32))
    ad.backward(loss)
    norms = np.linalg.norm(model.head.weight.grad, axis=1)
    assert target.shape[-1] == 2 and np.all(norms > 0)


def test_aux_variant_uses_airway_pressure_as_input_only(small_dataset):
    cfg = TrainConfig(task=5, variant=3, epochs=1, batch_size=4)
    ck = _short_train(small_dataset, cfg)
    assert ck.model.config.output_channels == ("p_tp",)
    seg = training.epoch_segments(small_dataset.records, cfg, 0, ck.scaler)[0]
    assert seg.aux is not None and seg.target.shape == (128, 1)
    rec = next(r for r in small_dataset.records if r.record_id == seg.record_id)
    raw = rec.samples("p_aw")[seg.start : seg.start + 128]
    assert np.corrcoef(seg.aux[:, 0], raw)[0, 1] > 0.999


def test_nan_aborts_with_diagnostic(small_dataset):
    cfg = TrainConfig(epochs=1, batch_size=2)
    model = tiny_model(cfg)
    model.extractor.blocks[0].conv1.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="extractor.blocks.0.conv1.weight"):
        training.train(model, small_dataset, cfg)


def test_joint_variant_standardizes_airway_pressure_per_segment(small_dataset):
    spec = task_spec(5, 2)
    scaler = training.fit_scaler(small_dataset.records, spec)
    seg = training.epoch_segments(small_dataset.records, TrainConfig(task=5, variant=2), 0, scaler)[0]
    assert abs(seg.target[:, 1].mean()) < 1e-9 and seg.target[:, 1].std() == pytest.approx(1.0, rel=1e-6)
    np.testing.assert_allclose(seg.target[:, 0], scaler.transform("p_tp", seg.raw[:, 0]))
    np.testing.assert_allclose(seg.to_physical(seg.target)[:, 1], seg.raw[:, 1], atol=1e-9)
