import math

import numpy as np
import pytest

from cnds import network as nw
from cnds import trainer as tr
from cnds.data import Dataset, synthetic_dataset
from cnds.supervision import AlphaSchedule, BranchTemplate, alpha_at, attach_branch


def _store(value):
    return nw.ParameterStore({"w.weight": np.array([value])}, {"w": nw.MAIN})


def test_sgd_two_steps():
    params, grads = _store(1.0), _store(1.0)
    state = tr.OptimizerState.zeros_like(params)
    tr.sgd_step(params, grads, state, 0.1, 0.9, 0.0)
    assert state.velocity["w.weight"][0] == pytest.approx(-0.1, abs=1e-15)
    assert params["w.weight"][0] == pytest.approx(0.9, abs=1e-15)
    tr.sgd_step(params, grads, state, 0.1, 0.9, 0.0)
    assert state.velocity["w.weight"][0] == pytest.approx(-0.19, abs=1e-15)
    assert params["w.weight"][0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_weight_decay_and_shape_check():
    params, grads = _store(2.0), _store(0.0)
    state = tr.OptimizerState.zeros_like(params)
    tr.sgd_step(params, grads, state, 0.5, 0.0, 0.1)
    assert params["w.weight"][0] == pytest.approx(1.9)
    grads["w.weight"] = np.zeros(2)
    with pytest.raises(ValueError):
        tr.sgd_step(params, grads, state, 0.1)


def test_config_validation_and_lr_schedule():
    with pytest.raises(ValueError):
        tr.TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainingConfig(learning_rate=0)
    cfg = tr.TrainingConfig(epochs=9, learning_rate=1.0)
    assert [cfg.lr_at(e) for e in (0, 5, 6, 8)] == [1.0, 1.0, pytest.approx(0.1), pytest.approx(0.1)]
    custom = tr.TrainingConfig(epochs=9, learning_rate=1.0, lr_schedule=((2, 0.5), (4, 0.5)))
    assert [custom.lr_at(e) for e in (1, 2, 4)] == [1.0, 0.5, 0.25]


def _spec(k=4, branch=True):
    spec = nw.NetworkSpec((nw.Conv("conv0", 4, 3, 1, 1), nw.Pool("pool0"), nw.Conv("conv1", 4, 3, 1, 1),
                           nw.Linear("fc", 16), nw.SoftmaxHead("head", k)))
    if branch:
        spec = attach_branch(spec, "conv0", BranchTemplate(k, hidden=(8,)), 0.3)
    return spec


def test_zero_epochs_returns_initial_params():
    data = synthetic_dataset(0, 20, (1, 8, 8), 4)
    params, metrics = tr.train(_spec(), data, None, tr.TrainingConfig(epochs=0))
    net = nw.build(_spec(), (1, 8, 8))
    assert params.equal(nw.init_params(net, 0))
    assert metrics.rows == []


def test_alpha_log_matches_schedule():
    data = synthetic_dataset(0, 32, (1, 8, 8), 4)
    _, metrics = tr.train(_spec(), data, data, tr.TrainingConfig(epochs=4, batch_size=16))
    expected = [alpha_at(AlphaSchedule(0.3, 4), t) for t in range(4)]
    assert metrics.column("alpha") == expected
    csv_alpha = [float(line.split(",")[1]) for line in metrics.to_csv().splitlines()[1:]]
    assert csv_alpha == expected
    header = metrics.to_csv().splitlines()[0]
    assert header == ("epoch,alpha,train_loss_combined,train_loss_main,train_loss_branch_0,"
                      "val_top1_err,val_top5_err")


def test_first_epoch_loss_near_log_k():
    data = synthetic_dataset(0, 64, (1, 8, 8), 4)
    _, metrics = tr.train(_spec(branch=False), data, None, tr.TrainingConfig(epochs=1, batch_size=16))
    assert metrics.rows[0]["train_loss_main"] == pytest.approx(math.log(4), rel=0.1)


def test_separable_data_is_learned():
    rng = np.random.default_rng(0)
    labels = np.arange(200) % 2
    images = np.zeros((200, 1, 4, 4))
    images[labels == 0, 0, :2] = 1.0
    images[labels == 1, 0, 2:] = 1.0
    images += rng.normal(0, 0.05, images.shape)
    data = Dataset(images, labels, 2)
    spec = nw.NetworkSpec((nw.Linear("fc", 8), nw.SoftmaxHead("head", 2)))
    cfg = tr.TrainingConfig(epochs=20, batch_size=20, learning_rate=0.1, init_std=0.1)
    params, metrics = tr.train(spec, data, data, cfg)
    assert metrics.rows[-1]["val_top1_err"] <= 0.05


def test_training_is_deterministic():
    data = synthetic_dataset(0, 32, (1, 8, 8), 4)
    cfg = tr.TrainingConfig(epochs=2, batch_size=8, crop=6, flip=True)
    a = tr.train(_spec(), data, data, cfg)
    b = tr.train(_spec(), data, data, cfg)
    assert a[0].equal(b[0])
    assert a[1].to_csv() == b[1].to_csv()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    data = synthetic_dataset(0, 32, (1, 8, 8), 4)
    cfg = tr.TrainingConfig(epochs=3, batch_size=8, learning_rate=1e6, init_std=1.0)
    with pytest.raises(tr.TrainingDiverged):
        tr.train(_spec(), data, None, cfg)


def test_snapshots_are_written(tmp_path):
    data = synthetic_dataset(0, 16, (1, 8, 8), 4)
    cfg = tr.TrainingConfig(epochs=2, batch_size=8, snapshot_every=1)
    tr.train(_spec(), data, None, cfg, snapshot_path=tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt.epoch0").exists() and (tmp_path / "m.ckpt.epoch1").exists()


def test_labels_beyond_head_rejected():
    data = synthetic_dataset(0, 20, (1, 8, 8), 5)
    with pytest.raises(ValueError):
        tr.train(_spec(k=4), data, None, tr.TrainingConfig(epochs=1))
