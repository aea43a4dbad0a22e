import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from son import nn
from son.branch import BranchConfig
from son.errors import ConfigError, DimensionError
from son.model import (BaselineBranchConfig, DeepONet, Prediction, SonModel, TrunkConfig, combine,
                       deeponet_baseline, load_checkpoint, loss_and_terminal, save_checkpoint, trunk_forward)

from helpers import central_diff, rel_err


def tiny_son(seed=0, d_out=1, mode="scalar", n_steps=2, m=5, p=3):
    drift = [nn.dense(m, m, "arctan"), nn.dense(m, m)]
    kw = dict(diffusion_mode="network", diffusion=[nn.dense(m, m, "sigmoid")]) if mode == "network" \
        else dict(diffusion_shape=mode)
    branch = BranchConfig(n_steps, (m,), drift, post_projection=[nn.dense(m, p, "arctan")], **kw)
    trunk = TrunkConfig([nn.dense(1, 6, "sigmoid"), nn.dense(6, p * d_out)], d_out)
    return SonModel.create(branch, trunk, np.random.default_rng(seed))


def tiny_baseline(seed=0, d_out=1, m=5, p=3):
    branch = BaselineBranchConfig((m,), [nn.dense(m, 4, "arctan"), nn.dense(4, p)])
    trunk = TrunkConfig([nn.dense(1, 6, "sigmoid"), nn.dense(6, p * d_out)], d_out)
    return DeepONet.create(branch, trunk, np.random.default_rng(seed))


def _zero_diffusion(model):
    for k in model.params:
        if k.startswith("branch.diffusion."):
            model.params[k] = np.zeros_like(model.params[k])


# --- trunk ----------------------------------------------------------------

def test_zero_trunk_gives_zero_features():
    cfg = TrunkConfig([nn.dense(1, 4, "relu"), nn.dense(4, 6)], 2)
    params = {f"trunk.{i}.{n}": np.zeros(s) for i, spec in enumerate(cfg.layers)
              for n, s in nn.param_shapes(spec).items()}
    tau, _ = trunk_forward(np.array([[0.3], [2.0]]), cfg, params)
    assert tau.shape == (2, 6) and not tau.any()


def test_trunk_deterministic_and_gradient():
    model = tiny_son()
    y = np.array([[0.4], [1.3]])
    t1, caches = trunk_forward(y, model.trunk_cfg, model.params)
    t2, _ = trunk_forward(y, model.trunk_cfg, model.params)
    assert np.array_equal(t1, t2)
    v = np.random.default_rng(0).normal(size=t1.shape)
    stack = [(s, nn.LayerParams(model.params[f"trunk.{i}.weight"], model.params[f"trunk.{i}.bias"]))
             for i, s in enumerate(model.trunk_cfg.layers)]
    _, grads = nn.stack_vjp(stack, caches, v)
    f = lambda: float((trunk_forward(y, model.trunk_cfg, model.params)[0] * v).sum())
    assert rel_err(grads[0].weight, central_diff(f, model.params["trunk.0.weight"])) <= 1e-5


def test_trunk_config_checks():
    with pytest.raises(ConfigError):
        TrunkConfig([nn.dense(1, 5)], 2)
    with pytest.raises(DimensionError):
        trunk_forward(np.ones((2, 2)), TrunkConfig([nn.dense(1, 4)]), {"trunk.0.weight": np.ones((1, 4)),
                                                                      "trunk.0.bias": np.ones(4)})


# --- combine --------------------------------------------------------------

def test_combine_basis_extraction():
    assert combine(np.array([1.0, 0.0, 0.0]), np.array([5.0, 7.0, 9.0]), 0.0) == pytest.approx([5.0])


def test_combine_two_outputs():
    np.testing.assert_array_equal(combine(np.array([1.0, 1.0]), np.array([2.0, 3.0, 4.0, 5.0]), 1.0, 2), [6, 10])


def test_combine_length_mismatch():
    with pytest.raises(DimensionError):
        combine(np.ones(2), np.ones(3), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 2), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_combine_bilinear(p, d_out, a, b0, seed):
    rng = np.random.default_rng(seed)
    beta, beta2 = rng.normal(size=(2, 4, p))
    tau, tau2 = rng.normal(size=(2, 4, p * d_out))
    f = lambda bb, tt: combine(bb, tt, b0, d_out) - b0
    np.testing.assert_allclose(f(a * beta + beta2, tau), a * f(beta, tau) + f(beta2, tau), atol=1e-10)
    np.testing.assert_allclose(f(beta, a * tau + tau2), a * f(beta, tau) + f(beta, tau2), atol=1e-10)


# --- loss -----------------------------------------------------------------

def _pred(beta, tau, b0, d_out):
    return Prediction(combine(beta, tau, b0, d_out), beta, tau)


class _Dims:
    def __init__(self, d_out):
        self.d_out = d_out


def test_loss_worked_example():
    pred = _pred(np.array([[3.0]]), np.array([[2.0]]), 0.0, 1)
    phi, gb, gt, g0 = loss_and_terminal(pred, np.array([[7.0]]), _Dims(1))
    assert phi[0] == 1.0 and gb[0, 0] == -4.0 and gt[0, 0] == -6.0 and g0[0] == -2.0


def test_loss_zero_at_target():
    beta, tau = np.array([[1.0, 2.0]]), np.array([[0.5, -1.0, 3.0, 2.0]])
    pred = _pred(beta, tau, 0.3, 2)
    phi, gb, gt, g0 = loss_and_terminal(pred, pred.value.copy(), _Dims(2))
    assert phi[0] == 0 and not gb.any() and not gt.any() and not g0.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 2), st.integers(1, 3), st.integers(0, 2**31))
def test_loss_gradients_match_fd(p, d_out, batch, seed):
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=(batch, p))
    tau = rng.normal(size=(batch, p * d_out))
    b0 = np.array(rng.normal())
    target = rng.normal(size=(batch, d_out))
    phi_sum = lambda: float(loss_and_terminal(_pred(beta, tau, b0, d_out), target, _Dims(d_out))[0].sum())
    _, gb, gt, g0 = loss_and_terminal(_pred(beta, tau, b0, d_out), target, _Dims(d_out))
    assert rel_err(gb, central_diff(phi_sum, beta, 1e-6)) <= 1e-6
    assert rel_err(gt, central_diff(phi_sum, tau, 1e-6)) <= 1e-6
    assert rel_err(g0.sum(), central_diff(phi_sum, b0, 1e-6)) <= 1e-6


# --- SON predictor ----------------------------------------------------------

def _uy(batch=4, m=5, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, m)), rng.uniform(0, 1, size=(batch, 1))


def test_fresh_model_finite():
    model = tiny_son()
    u, y = _uy()
    assert np.isfinite(model.predict_values(u, y, np.random.default_rng(0))).all()


def test_zero_diffusion_is_deterministic():
    model = tiny_son(mode="network")
    _zero_diffusion(model)
    # network diffusion with zeroed weights still outputs sigmoid(0) = 0.5, so use per-layer mode too
    model2 = tiny_son(mode="vector")
    _zero_diffusion(model2)
    u, y = _uy()
    a = model2.predict_values(u, y, np.random.default_rng(0))
    b = model2.predict_values(u, y, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_prediction_spread_grows_with_diffusion_scale():
    model = tiny_son(mode="scalar", n_steps=3)
    base = {k: v.copy() for k, v in model.params.items()}
    u, y = _uy(1)
    stds = []
    for scale in (0.0, 1.0, 2.0):
        for k in model.params:
            if k.startswith("branch.diffusion."):
                model.params[k] = scale * base[k]
        rng = np.random.default_rng(7)
        stds.append(np.std([model.predict_values(u, y, rng)[0, 0] for _ in range(100)], ddof=1))
    assert stds[0] <= 1e-14 and stds[0] < stds[1] < stds[2]


def test_single_step_zero_drift_zero_noise_reduces_to_plain_combination():
    branch = BranchConfig(1, (5,), [nn.dense(5, 5)], diffusion_shape="scalar")
    trunk = TrunkConfig([nn.dense(1, 5, "sigmoid")])
    model = SonModel.create(branch, trunk, np.random.default_rng(0))
    for k in model.params:
        if k.startswith("branch."):
            model.params[k] = np.zeros_like(model.params[k])
    u, y = _uy()
    tau, _ = trunk_forward(y, trunk, model.params)
    np.testing.assert_array_equal(model.predict_values(u, y, np.random.default_rng(0)),
                                  combine(u, tau, model.params["b0"]))


@pytest.mark.parametrize("mode,d_out", [("scalar", 1), ("vector", 2), ("network", 1)])
def test_son_gradients_match_fd_on_fixed_path(mode, d_out):
    model = tiny_son(mode=mode, d_out=d_out)
    u, y = _uy(3)
    target = np.random.default_rng(2).normal(size=(3, d_out))
    pred = model.predict(u, y, np.random.default_rng(3), training=True)
    incs = pred.trajectory.increments
    loss, grads, _ = model.gradients(pred, target)

    def f():
        p = model.predict(u, y, None, increments=incs)
        return float(((p.value - target) ** 2).mean())
    assert loss == pytest.approx(f(), abs=1e-14)
    for k, arr in model.params.items():
        assert rel_err(grads[k], central_diff(f, arr, 1e-6), floor=1e-7) <= 1e-6, k


def test_control_keys_cover_sde_parameters():
    model = tiny_son(mode="network")
    keys = model.control_keys()
    assert keys and all(k.startswith(("branch.drift.", "branch.diffusion.")) for k in keys)
    assert "branch.post.0.weight" not in keys


def test_width_mismatch_rejected():
    branch = BranchConfig(1, (4,), [nn.dense(4, 4)])
    with pytest.raises(ConfigError):
        SonModel.create(branch, TrunkConfig([nn.dense(1, 5)]), np.random.default_rng(0))


# --- baseline -------------------------------------------------------------

def test_baseline_is_deterministic():
    model = tiny_baseline()
    u, y = _uy()
    assert np.array_equal(model.predict_values(u, y, np.random.default_rng(0)),
                          model.predict_values(u, y, np.random.default_rng(1)))


@pytest.mark.parametrize("d_out", [1, 2])
def test_baseline_gradients_match_fd(d_out):
    model = tiny_baseline(d_out=d_out)
    u, y = _uy(3)
    target = np.random.default_rng(4).normal(size=(3, d_out))
    loss, grads = deeponet_baseline(model, u, y, target)
    f = lambda: float(((model.predict_values(u, y) - target) ** 2).mean())
    assert loss == pytest.approx(f())
    for k, arr in model.params.items():
        assert rel_err(grads[k], central_diff(f, arr)) <= 1e-5, k


def test_conv_baseline_runs():
    branch = BaselineBranchConfig((1, 8, 8), [nn.conv2d(1, 2, 3, "relu"), nn.maxpool2d(2), nn.flatten()])
    model = DeepONet.create(branch, TrunkConfig([nn.dense(2, 32, "sigmoid")]), np.random.default_rng(0))
    out = model.predict_values(np.ones((2, 64)), np.ones((2, 2)))
    assert out.shape == (2, 1)


# --- checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("factory", [tiny_son, tiny_baseline, lambda: tiny_son(mode="network", d_out=2)])
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, factory):
    model = factory()
    path = tmp_path / "m.npz"
    save_checkpoint(model, path, epoch=17, extra={"note": "x"})
    back, epoch, extra = load_checkpoint(path)
    assert epoch == 17 and extra == {"note": "x"}
    assert back.config() == model.config()
    assert back.params.keys() == model.params.keys()
    for k in model.params:
        assert back.params[k].dtype == model.params[k].dtype
        assert np.array_equal(back.params[k], model.params[k])
    u, y = _uy()
    assert np.array_equal(back.predict_values(u, y, np.random.default_rng(5)),
                          model.predict_values(u, y, np.random.default_rng(5)))


def test_float32_model():
    branch = BranchConfig(2, (5,), [nn.dense(5, 5, "relu"), nn.dense(5, 5)])
    model = SonModel.create(branch, TrunkConfig([nn.dense(1, 5, "relu")]), np.random.default_rng(0), np.float32)
    u, y = _uy()
    loss, grads = model.loss_and_grads(u, y, np.zeros((4, 1)), np.random.default_rng(0))
    assert all(g.dtype == np.float32 for g in grads.values())
    assert model.predict_values(u, y, np.random.default_rng(0)).dtype == np.float32
