import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from son import nn
from son.branch import BranchConfig
from son.errors import ConfigError, DimensionError, DivergenceError, NumericError
from son.grf import SensorGrid
from son.model import SonModel, TrunkConfig, load_checkpoint
from son.oracles import OperatorDataset
from son.training import OptimizerState, TrainConfig, batch_rng, lr_at, optimizer_step, train


def toy_dataset(n=2, d=2, m=3, seed=0):
    """G(u)(y) = mean(u) * y, exactly representable by a linear branch and trunk."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, size=(n, m))
    y = np.linspace(0.2, 1.0, d)[:, None]
    t = (u.mean(axis=1)[:, None] * y[:, 0][None, :])[..., None]
    return OperatorDataset("toy", SensorGrid.uniform(0, 1, m), u, y, t, t.copy(), 0.0, seed)


def toy_model(m=3, seed=0, sigma=0.0):
    branch = BranchConfig(1, (m,), [nn.dense(m, m)], diffusion_shape="scalar", diffusion_init=(sigma, 0.0))
    model = SonModel.create(branch, TrunkConfig([nn.dense(1, m)]), np.random.default_rng(seed))
    return model


# --- schedule -------------------------------------------------------------

ANTI = TrainConfig(epochs=2000, lr=1e-3, decay_factor=0.9, decay_interval=500, decay_start=1000)


def test_lr_examples():
    assert lr_at(999, ANTI) == 0.001
    assert lr_at(1500, ANTI) == pytest.approx(0.0009, rel=1e-12)
    assert lr_at(1000, ANTI) == 0.001
    assert lr_at(2000, ANTI) == pytest.approx(0.00081, rel=1e-12)
    flat = TrainConfig(lr=0.3)
    assert {lr_at(e, flat) for e in (0, 10, 5000)} == {0.3}


def test_lr_rejects_negative_epoch():
    with pytest.raises(ConfigError):
        lr_at(-1, ANTI)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 5000))
def test_lr_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_at(hi, ANTI) <= lr_at(lo, ANTI)


@pytest.mark.parametrize("kw", [dict(lr=0), dict(decay_factor=0), dict(decay_factor=1.5), dict(epochs=-1),
                                dict(optimizer="rmsprop"), dict(bounds=(1, 0)), dict(batch_size=-2)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_roundtrip_and_unknown_keys():
    cfg = TrainConfig(epochs=3, bounds=(-2, 2), optimizer="sgd")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


# --- optimizer ------------------------------------------------------------

@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_zero_gradient_leaves_params(opt):
    params = {"a": np.array([1.0, -2.0]), "b": np.array(3.0)}
    cfg = TrainConfig(optimizer=opt)
    new, _ = optimizer_step(params, {k: np.zeros_like(v) for k, v in params.items()},
                            OptimizerState.zeros_like(params), 0.1, cfg)
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])


def test_sgd_example():
    params = {"w": np.zeros(2)}
    new, state = optimizer_step(params, {"w": np.array([1.0, -2.0])}, OptimizerState.zeros_like(params), 0.1,
                                TrainConfig(optimizer="sgd"))
    np.testing.assert_allclose(new["w"], [-0.1, 0.2])
    assert state.step == 1
    assert not params["w"].any()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 1e3) | st.floats(-1e3, -0.1), min_size=1, max_size=6), st.floats(1e-4, 1.0))
def test_adam_first_step_is_signed_lr(g, lr):
    # the deviation is eps/|g|, so |g| >= 0.1 keeps it below 1e-6
    g = np.array(g)
    params = {"w": np.zeros_like(g)}
    new, _ = optimizer_step(params, {"w": g}, OptimizerState.zeros_like(params), lr, TrainConfig())
    np.testing.assert_allclose(new["w"], -lr * np.sign(g), rtol=1e-6, atol=0)


def test_clamp_projection():
    params = {"w": np.array([0.95, -0.95])}
    new, _ = optimizer_step(params, {"w": np.array([-1.0, 1.0])}, OptimizerState.zeros_like(params), 1.0,
                            TrainConfig(optimizer="sgd", bounds=(-1, 1)))
    np.testing.assert_array_equal(new["w"], [1.0, -1.0])


def test_nonfinite_gradient_names_block():
    params = {"trunk.0.weight": np.ones(2), "b0": np.array(0.0)}
    grads = {"trunk.0.weight": np.array([1.0, np.inf]), "b0": np.array(0.0)}
    with pytest.raises(NumericError) as exc:
        optimizer_step(params, grads, OptimizerState.zeros_like(params), 0.1, TrainConfig())
    assert exc.value.block == "trunk.0.weight" and "trunk.0.weight" in str(exc.value)


def test_gradient_shape_mismatch():
    params = {"w": np.ones(2)}
    with pytest.raises(DimensionError):
        optimizer_step(params, {"w": np.ones(3)}, OptimizerState.zeros_like(params), 0.1, TrainConfig())
    with pytest.raises(DimensionError):
        optimizer_step(params, {"v": np.ones(2)}, OptimizerState.zeros_like(params), 0.1, TrainConfig())


def test_float32_params_stay_float32():
    params = {"w": np.ones(2, dtype=np.float32)}
    new, _ = optimizer_step(params, {"w": np.ones(2, dtype=np.float32)}, OptimizerState.zeros_like(params),
                            1e-3, TrainConfig())
    assert new["w"].dtype == np.float32


# --- training loop ----------------------------------------------------------

def test_zero_epochs_is_noop():
    model = toy_model()
    before = {k: v.copy() for k, v in model.params.items()}
    res = train(model, toy_dataset(), TrainConfig(epochs=0))
    assert res.history == []
    for k in before:
        assert np.array_equal(model.params[k], before[k])


def test_toy_operator_converges():
    model = toy_model()
    res = train(model, toy_dataset(), TrainConfig(epochs=500, lr=1e-2))
    assert res.history[-1].mean_loss < 1e-3
    assert res.history[-1].mean_loss < res.history[0].mean_loss


def test_reproducible_bit_for_bit(tmp_path):
    ds = toy_dataset(n=3, d=3)
    runs = []
    for _ in range(2):
        model = toy_model(sigma=0.3)
        res = train(model, ds, TrainConfig(epochs=20, lr=1e-2, batch_size=4, seed=5))
        runs.append(([r.mean_loss for r in res.history], model.params))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_full_batch_is_one_step_per_epoch():
    model = toy_model()
    res = train(model, toy_dataset(n=3, d=4), TrainConfig(epochs=3))
    assert res.state.step == 3
    model = toy_model()
    res = train(model, toy_dataset(n=3, d=4), TrainConfig(epochs=3, batch_size=5))
    assert res.state.step == 3 * 3


def test_full_batch_gradient_is_mean_over_samples():
    ds = toy_dataset(n=3, d=2)
    model = toy_model(sigma=0.2)
    u, y, t = ds.batch(np.arange(len(ds)))
    rng = batch_rng(0, 0, 0)
    _, g_full = model.loss_and_grads(u, y, t, rng)
    # replaying the same increments one sample at a time and averaging matches the batch gradient
    pred = model.predict(u, y, batch_rng(0, 0, 0), training=True)
    per = []
    for i in range(len(ds)):
        p = model.predict(u[i:i + 1], y[i:i + 1], None, increments=[w[i:i + 1] for w in pred.trajectory.increments])
        per.append(model.gradients(p, t[i:i + 1])[1])
    for k in g_full:
        np.testing.assert_allclose(g_full[k], np.mean([g[k] for g in per], axis=0), rtol=1e-12, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    model = toy_model()
    model.params["branch.drift.0.0.weight"][:] = 1e200
    with pytest.raises(DivergenceError) as exc:
        train(model, toy_dataset(), TrainConfig(epochs=3, lr=1e-2))
    assert exc.value.epoch == 0


def test_dataset_mismatch_rejected():
    with pytest.raises(ConfigError):
        train(toy_model(m=4), toy_dataset(m=3), TrainConfig())


def test_running_cost_shrinks_controls():
    ds = toy_dataset()
    a, b = toy_model(), toy_model()
    train(a, ds, TrainConfig(epochs=30, lr=1e-2, optimizer="sgd"))
    train(b, ds, TrainConfig(epochs=30, lr=1e-2, optimizer="sgd", running_cost=5.0))
    key = "branch.drift.0.0.weight"
    assert np.linalg.norm(b.params[key]) < np.linalg.norm(a.params[key])


def test_history_and_checkpoints_written(tmp_path):
    model = toy_model()
    train(model, toy_dataset(), TrainConfig(epochs=4, checkpoint_every=2), out_dir=tmp_path)
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss", "lr", "wall_ms"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert sorted(p.name for p in tmp_path.glob("checkpoint_*.npz")) == ["checkpoint_000002.npz",
                                                                        "checkpoint_000004.npz"]
    back, epoch, _ = load_checkpoint(tmp_path / "checkpoint_000004.npz")
    assert epoch == 4
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)


def test_resume_matches_uninterrupted():
    ds = toy_dataset()
    cfg = TrainConfig(epochs=6, lr=1e-2, decay_factor=0.5, decay_interval=2, seed=3)
    a = toy_model(sigma=0.2)
    train(a, ds, cfg)
    b = toy_model(sigma=0.2)
    first = train(b, ds, TrainConfig(**{**cfg.to_dict(), "epochs": 3}))
    train(b, ds, TrainConfig(**{**cfg.to_dict(), "epochs": 3}), start_epoch=3, state=first.state)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
