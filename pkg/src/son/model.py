"""
SON predictor (stochastic branch + trunk + inner product) and the vanilla
DeepONet baseline, with their loss gradients and checkpoint format.

Parameters live in one flat ``dict[str, ndarray]`` per model keyed by module
path ("branch.drift.3.0.weight", "trunk.1.bias", "b0", ...); the optimizer and
the checkpoint format work directly on that dict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .branch import (AdjointPath, BranchConfig, BranchParams, SdeTrajectory, backward_adjoint,
                     encode_input, encode_vjp, forward_sde, init_branch_params)
from .errors import ConfigError, DimensionError
from .nn import LayerParams, LayerSpec


@dataclass
class TrunkConfig:
    layers: list
    d_out: int = 1

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("trunk needs at least one layer")
        if any(s.kind != "dense" for s in self.layers):
            raise ConfigError("trunk layers must be dense")
        if self.width % self.d_out:
            raise ConfigError(f"trunk width {self.width} not divisible by d_out={self.d_out}")
        nn.stack_out_shape(self.layers, (self.query_dim,))

    @property
    def query_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def width(self) -> int:
        return self.layers[-1].out_features

    @property
    def p(self) -> int:
        return self.width // self.d_out

    def to_dict(self) -> dict:
        return {"layers": [s.to_dict() for s in self.layers], "d_out": self.d_out}

    @classmethod
    def from_dict(cls, d: dict) -> "TrunkConfig":
        return cls([LayerSpec.from_dict(s) for s in d["layers"]], d.get("d_out", 1))


def _stack(specs, flat, prefix):
    return [(s, LayerParams(flat.get(f"{prefix}.{i}.weight"), flat.get(f"{prefix}.{i}.bias")))
            for i, s in enumerate(specs)]


def _init_stack(specs, rng, dtype, prefix, out):
    for i, s in enumerate(specs):
        p = nn.init_params(s, rng, dtype)
        if p.weight is not None:
            out[f"{prefix}.{i}.weight"] = p.weight
            out[f"{prefix}.{i}.bias"] = p.bias


def _flat_grads(grads, prefix, out):
    for i, g in enumerate(grads):
        if g.weight is not None:
            out[f"{prefix}.{i}.weight"] = g.weight
            out[f"{prefix}.{i}.bias"] = g.bias


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def trunk_forward(y, trunk_cfg: TrunkConfig, params: dict, prefix="trunk"):
    y = np.atleast_2d(np.asarray(y))
    if y.shape[1] != trunk_cfg.query_dim:
        raise DimensionError(f"query dimension {y.shape[1]} != trunk input {trunk_cfg.query_dim}")
    return nn.stack_forward(_stack(trunk_cfg.layers, params, prefix), y)


def combine(beta, tau, b0, d_out=1):
    """value_d = sum_k beta_k * tau_{d*p + k} + b0 for each output dimension d.

    ``beta`` is (p,) or (B, p); ``tau`` is (p*d_out,) or (B, p*d_out).
    """
    beta = np.asarray(beta)
    tau = np.asarray(tau)
    single = beta.ndim == 1
    beta2, tau2 = np.atleast_2d(beta), np.atleast_2d(tau)
    p = beta2.shape[1]
    if tau2.shape[1] != p * d_out or tau2.shape[0] != beta2.shape[0]:
        raise DimensionError(f"beta {beta.shape} and tau {tau.shape} do not fit d_out={d_out}")
    value = np.einsum("bp,bdp->bd", beta2, tau2.reshape(tau2.shape[0], d_out, p)) + b0
    return value[0] if single else value


def mse_terminal(value, target, beta, tau, d_out):
    """Per-sample MSE over output dimensions and its gradients w.r.t. beta, tau, b0."""
    value = np.atleast_2d(value)
    target = np.asarray(target, dtype=value.dtype).reshape(value.shape)
    diff = value - target
    phi = (diff**2).mean(axis=1)
    e = (2.0 / d_out) * diff                               # (B, d_out)
    bsz, p = beta.shape
    tau3 = tau.reshape(bsz, d_out, p)
    g_beta = np.einsum("bd,bdp->bp", e, tau3)
    g_tau = (e[:, :, None] * beta[:, None, :]).reshape(bsz, d_out * p)
    g_b0 = e.sum(axis=1)
    return phi, g_beta, g_tau, g_b0


# ---------------------------------------------------------------------------
# SON
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    value: np.ndarray
    beta: np.ndarray
    tau: np.ndarray
    trajectory: SdeTrajectory | None = None
    pre_caches: list = field(default_factory=list)
    trunk_caches: list = field(default_factory=list)
    branch_caches: list = field(default_factory=list)


class SonModel:
    kind = "son"

    def __init__(self, branch_cfg: BranchConfig, trunk_cfg: TrunkConfig, params: dict):
        if branch_cfg.width != trunk_cfg.p:
            raise ConfigError(f"branch width {branch_cfg.width} != trunk width/d_out {trunk_cfg.p}")
        self.branch_cfg = branch_cfg
        self.trunk_cfg = trunk_cfg
        self.params = params

    @classmethod
    def create(cls, branch_cfg, trunk_cfg, rng, dtype=np.float64) -> "SonModel":
        params = init_branch_params(branch_cfg, rng, dtype).to_flat("branch.")
        _init_stack(trunk_cfg.layers, rng, dtype, "trunk", params)
        params["b0"] = np.zeros((), dtype=dtype)
        return cls(branch_cfg, trunk_cfg, params)

    @property
    def d_out(self) -> int:
        return self.trunk_cfg.d_out

    @property
    def p(self) -> int:
        return self.trunk_cfg.p

    @property
    def dtype(self):
        return self.params["b0"].dtype

    def branch_params(self) -> BranchParams:
        return BranchParams.from_flat(self.branch_cfg, self.params, "branch.")

    def control_keys(self) -> list:
        """Per-step drift/diffusion parameters, i.e. the controls of the SDE."""
        return [k for k in self.params if k.startswith(("branch.drift.", "branch.diffusion."))]

    def config(self) -> dict:
        return {"kind": self.kind, "branch": self.branch_cfg.to_dict(), "trunk": self.trunk_cfg.to_dict()}

    def predict(self, u, y, rng=None, *, training=False, increments=None) -> Prediction:
        dropout_active = training or self.branch_cfg.dropout_at_eval
        u = np.asarray(u, dtype=self.dtype)
        y = np.asarray(y, dtype=self.dtype)
        bp = self.branch_params()
        A0, pre_caches = encode_input(np.atleast_2d(u), self.branch_cfg, bp, rng, dropout_active=dropout_active)
        traj = forward_sde(A0, bp, self.branch_cfg, rng, increments=increments, dropout_active=dropout_active)
        tau, tcaches = trunk_forward(y, self.trunk_cfg, self.params)
        if tau.shape[0] != traj.output.shape[0]:
            raise DimensionError(f"{traj.output.shape[0]} sensor rows but {tau.shape[0]} query rows")
        value = combine(traj.output, tau, self.params["b0"], self.d_out)
        return Prediction(value, traj.output, tau, traj, pre_caches, tcaches)

    def predict_values(self, u, y, rng=None) -> np.ndarray:
        return self.predict(u, y, rng).value

    def gradients(self, pred: Prediction, target, rng=None):
        """Mean loss over the batch and mean gradients for every parameter.

        Branch drift/diffusion gradients come from the adjoint solve; the
        projections, trunk and bias receive plain backpropagated gradients.
        """
        phi, g_beta, g_tau, g_b0 = loss_and_terminal(pred, target, self)
        scale = 1.0 / phi.shape[0]
        bp = self.branch_params()
        path = backward_adjoint(pred.trajectory, bp, self.branch_cfg, g_beta * scale, rng)
        grads = path.to_flat("branch.")
        if self.branch_cfg.pre_projection:
            _, pre_grads = encode_vjp(path.grad_state0, self.branch_cfg, bp, pred.pre_caches)
            _flat_grads(pre_grads, "branch.pre", grads)
        _, tgrads = nn.stack_vjp(_stack(self.trunk_cfg.layers, self.params, "trunk"), pred.trunk_caches,
                                 g_tau * scale)
        _flat_grads(tgrads, "trunk", grads)
        grads["b0"] = np.asarray(g_b0.sum() * scale, dtype=self.dtype)
        return float(phi.mean()), grads, path

    def loss_and_grads(self, u, y, target, rng):
        pred = self.predict(u, y, rng, training=True)
        loss, grads, _ = self.gradients(pred, target, rng)
        return loss, grads


def loss_and_terminal(pred: Prediction, target, model):
    """Per-sample loss Phi and the terminal adjoints (d/d beta, d/d tau, d/d b0)."""
    return mse_terminal(pred.value, target, np.atleast_2d(pred.beta), np.atleast_2d(pred.tau), model.d_out)


def predict(model, u, y, rng=None):
    return model.predict(u, y, rng)


# ---------------------------------------------------------------------------
# vanilla DeepONet
# ---------------------------------------------------------------------------

@dataclass
class BaselineBranchConfig:
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if not self.layers:
            raise ConfigError("baseline branch needs at least one layer")
        if len(self.output_shape) != 1:
            raise ConfigError("baseline branch output must be flat")

    @property
    def output_shape(self) -> tuple:
        return nn.stack_out_shape(self.layers, self.input_shape)

    @property
    def width(self) -> int:
        return self.output_shape[0]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineBranchConfig":
        return cls(tuple(d["input_shape"]), [LayerSpec.from_dict(s) for s in d["layers"]])


class DeepONet:
    """Deterministic branch/trunk operator network trained by ordinary backprop."""

    kind = "baseline"

    def __init__(self, branch_cfg: BaselineBranchConfig, trunk_cfg: TrunkConfig, params: dict):
        if branch_cfg.width != trunk_cfg.p:
            raise ConfigError(f"branch width {branch_cfg.width} != trunk width/d_out {trunk_cfg.p}")
        self.branch_cfg = branch_cfg
        self.trunk_cfg = trunk_cfg
        self.params = params

    @classmethod
    def create(cls, branch_cfg, trunk_cfg, rng, dtype=np.float64) -> "DeepONet":
        params = {}
        _init_stack(branch_cfg.layers, rng, dtype, "branch", params)
        _init_stack(trunk_cfg.layers, rng, dtype, "trunk", params)
        params["b0"] = np.zeros((), dtype=dtype)
        return cls(branch_cfg, trunk_cfg, params)

    d_out = SonModel.d_out
    p = SonModel.p
    dtype = SonModel.dtype

    def control_keys(self) -> list:
        return []

    def config(self) -> dict:
        return {"kind": self.kind, "branch": self.branch_cfg.to_dict(), "trunk": self.trunk_cfg.to_dict()}

    def predict(self, u, y, rng=None, *, training=False) -> Prediction:
        u = np.atleast_2d(np.asarray(u, dtype=self.dtype))
        size = int(np.prod(self.branch_cfg.input_shape))
        if u.shape[1] != size:
            raise ConfigError(f"expected sensor rows of width {size}, got shape {u.shape}")
        x = u.reshape((u.shape[0],) + self.branch_cfg.input_shape)
        beta, bcaches = nn.stack_forward(_stack(self.branch_cfg.layers, self.params, "branch"), x, rng,
                                         dropout_active=training)
        tau, tcaches = trunk_forward(np.asarray(y, dtype=self.dtype), self.trunk_cfg, self.params)
        value = combine(beta, tau, self.params["b0"], self.d_out)
        return Prediction(value, beta, tau, None, [], tcaches, bcaches)

    def predict_values(self, u, y, rng=None) -> np.ndarray:
        return self.predict(u, y, rng).value

    def gradients(self, pred: Prediction, target, rng=None):
        phi, g_beta, g_tau, g_b0 = mse_terminal(pred.value, target, pred.beta, pred.tau, self.d_out)
        scale = 1.0 / phi.shape[0]
        grads = {}
        _, bgrads = nn.stack_vjp(_stack(self.branch_cfg.layers, self.params, "branch"), pred.branch_caches,
                                 g_beta * scale)
        _flat_grads(bgrads, "branch", grads)
        _, tgrads = nn.stack_vjp(_stack(self.trunk_cfg.layers, self.params, "trunk"), pred.trunk_caches,
                                 g_tau * scale)
        _flat_grads(tgrads, "trunk", grads)
        grads["b0"] = np.asarray(g_b0.sum() * scale, dtype=self.dtype)
        return float(phi.mean()), grads, None

    def loss_and_grads(self, u, y, target, rng=None):
        pred = self.predict(u, y, rng, training=True)
        loss, grads, _ = self.gradients(pred, target)
        return loss, grads


def deeponet_baseline(model: DeepONet, u, y, target):
    """One deterministic forward pass and full backprop: ``(mean Phi, gradients)``."""
    return model.loss_and_grads(u, y, target)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_from_config(config: dict, params: dict):
    kind = config.get("kind")
    trunk = TrunkConfig.from_dict(config["trunk"])
    if kind == "son":
        return SonModel(BranchConfig.from_dict(config["branch"]), trunk, params)
    if kind == "baseline":
        return DeepONet(BaselineBranchConfig.from_dict(config["branch"]), trunk, params)
    raise ConfigError(f"unknown model kind {kind!r}")


def save_checkpoint(model, path, epoch=0, extra=None) -> None:
    """Single .npz: ``param/<name>`` arrays, ``__config__`` JSON, ``__epoch__``."""
    payload = {f"param/{k}": v for k, v in model.params.items()}
    meta = {"model": model.config(), "extra": extra or {}}
    payload["__config__"] = np.array(json.dumps(meta, sort_keys=True))
    payload["__epoch__"] = np.array(int(epoch))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns ``(model, epoch, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__config__"]))
        epoch = int(data["__epoch__"])
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return model_from_config(meta["model"], params), epoch, meta.get("extra", {})
