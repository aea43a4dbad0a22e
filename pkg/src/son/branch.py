"""
Stochastic branch network: projection layers around an Euler-Maruyama SDE.

Forward, for n = 0..N-1 with h = 1/N:

    A_{n+1} = A_n + h * mu(A_n; theta_n) + sqrt(h) * sigma_n * omega_n,   omega_n ~ N(0, I)

where sigma_n is either a trainable per-step scalar/vector or the output of a
per-step network sigma(A_n; theta_n).

Backward (one sample path, running cost zero):

    C_n          = B_{n+1} * omega_n / sqrt(h)
    grad_a H_n   = mu_a(A_n)^T B_{n+1} + sigma_a(A_n)^T C_n
    B_n          = B_{n+1} + h * grad_a H_n
    g_theta(n)   = h * (mu_theta^T B_{n+1} + sigma_theta^T C_n)

Reusing the stored omega_n makes g_theta the exact pathwise derivative of the
terminal loss with omega held fixed.  ``fresh_backward_noise`` draws an
independent epsilon_n instead, and ``paper_indexing`` evaluates the drift
Jacobian at A_{n+1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, NumericError
from .nn import LayerParams, LayerSpec

DIFFUSION_MODES = ("per_layer_scalar_vector", "network")


@dataclass
class BranchConfig:
    n_steps: int
    input_shape: tuple
    drift: list
    diffusion_mode: str = "per_layer_scalar_vector"
    diffusion_shape: str = "scalar"
    diffusion: list = field(default_factory=list)
    pre_projection: list = field(default_factory=list)
    post_projection: list = field(default_factory=list)
    diffusion_init: tuple = (0.0, 1.0)
    fresh_backward_noise: bool = False
    paper_indexing: bool = False
    dropout_at_eval: bool = True

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.diffusion_init = tuple(self.diffusion_init)
        if self.n_steps < 1:
            raise ConfigError("the branch needs at least one SDE step")
        if self.diffusion_mode not in DIFFUSION_MODES:
            raise ConfigError(f"unknown diffusion_mode {self.diffusion_mode!r}")
        if self.diffusion_shape not in ("scalar", "vector"):
            raise ConfigError(f"unknown diffusion_shape {self.diffusion_shape!r}")
        if not self.drift:
            raise ConfigError("drift stack is empty")
        state = self.state_shape
        if nn.stack_out_shape(self.drift, state) != state:
            raise ConfigError(f"drift stack must preserve the state shape {state}")
        if self.diffusion_mode == "network":
            if not self.diffusion:
                raise ConfigError("network diffusion needs a diffusion stack")
            if nn.stack_out_shape(self.diffusion, state) != state:
                raise ConfigError(f"diffusion stack must preserve the state shape {state}")
        if len(self.output_shape) != 1:
            raise ConfigError(f"branch output must be flat, got {self.output_shape}; add a flatten layer")

    @property
    def h(self) -> float:
        return 1.0 / self.n_steps

    @property
    def state_shape(self) -> tuple:
        return nn.stack_out_shape(self.pre_projection, self.input_shape)

    @property
    def output_shape(self) -> tuple:
        return nn.stack_out_shape(self.post_projection, self.state_shape)

    @property
    def width(self) -> int:
        return self.output_shape[0]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for key in ("drift", "diffusion", "pre_projection", "post_projection"):
            d[key] = [s.to_dict() for s in d[key]]
        d["input_shape"] = list(self.input_shape)
        d["diffusion_init"] = list(self.diffusion_init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BranchConfig":
        d = dict(d)
        for key in ("drift", "diffusion", "pre_projection", "post_projection"):
            d[key] = [LayerSpec.from_dict(s) for s in d.get(key, [])]
        return cls(**d)


@dataclass
class BranchParams:
    pre: list
    drift: list                 # per step: list[LayerParams]
    diffusion: list             # per step: ndarray (per-layer mode) or list[LayerParams]
    post: list

    def to_flat(self, prefix="") -> dict:
        out = {}
        _flat_stack(out, f"{prefix}pre", self.pre)
        for n, stack in enumerate(self.drift):
            _flat_stack(out, f"{prefix}drift.{n}", stack)
        for n, d in enumerate(self.diffusion):
            if isinstance(d, np.ndarray):
                out[f"{prefix}diffusion.{n}"] = d
            else:
                _flat_stack(out, f"{prefix}diffusion.{n}", d)
        _flat_stack(out, f"{prefix}post", self.post)
        return out

    @classmethod
    def from_flat(cls, cfg: BranchConfig, flat: dict, prefix="") -> "BranchParams":
        pre = _unflat_stack(flat, f"{prefix}pre", cfg.pre_projection)
        drift = [_unflat_stack(flat, f"{prefix}drift.{n}", cfg.drift) for n in range(cfg.n_steps)]
        if cfg.diffusion_mode == "network":
            diffusion = [_unflat_stack(flat, f"{prefix}diffusion.{n}", cfg.diffusion) for n in range(cfg.n_steps)]
        else:
            diffusion = [flat[f"{prefix}diffusion.{n}"] for n in range(cfg.n_steps)]
        post = _unflat_stack(flat, f"{prefix}post", cfg.post_projection)
        return cls(pre, drift, diffusion, post)


def _flat_stack(out, key, stack):
    for i, p in enumerate(stack):
        if p is None:
            continue
        if p.weight is not None:
            out[f"{key}.{i}.weight"] = p.weight
        if p.bias is not None:
            out[f"{key}.{i}.bias"] = p.bias


def _unflat_stack(flat, key, specs):
    return [LayerParams(flat.get(f"{key}.{i}.weight"), flat.get(f"{key}.{i}.bias")) for i in range(len(specs))]


def init_branch_params(cfg: BranchConfig, rng: np.random.Generator, dtype=np.float64) -> BranchParams:
    pre = [nn.init_params(s, rng, dtype) for s in cfg.pre_projection]
    drift = [[nn.init_params(s, rng, dtype) for s in cfg.drift] for _ in range(cfg.n_steps)]
    if cfg.diffusion_mode == "network":
        diffusion = [[nn.init_params(s, rng, dtype) for s in cfg.diffusion] for _ in range(cfg.n_steps)]
    else:
        mean, std = cfg.diffusion_init
        shape = () if cfg.diffusion_shape == "scalar" else cfg.state_shape
        diffusion = [np.asarray(rng.normal(mean, std, size=shape), dtype=dtype) for _ in range(cfg.n_steps)]
    post = [nn.init_params(s, rng, dtype) for s in cfg.post_projection]
    return BranchParams(pre, drift, diffusion, post)


@dataclass
class SdeTrajectory:
    states: list
    increments: list
    drift_caches: list
    diffusion_caches: list
    sigmas: list
    post_caches: list
    output: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.increments)


@dataclass
class AdjointPath:
    B: list                      # B_0 .. B_N (state shape)
    C: list                      # C_0 .. C_{N-1}
    drift_grads: list            # per step: list[LayerParams]
    diffusion_grads: list        # per step: ndarray or list[LayerParams]
    post_grads: list

    @property
    def grad_state0(self) -> np.ndarray:
        return self.B[0]

    def to_flat(self, prefix="") -> dict:
        return BranchParams([], self.drift_grads, self.diffusion_grads, self.post_grads).to_flat(prefix)


def encode_input(u, cfg: BranchConfig, params: BranchParams, rng=None, *, dropout_active=True):
    """Reshape flat sensor rows to ``input_shape`` and apply the pre-projection stack."""
    u = np.asarray(u)
    size = int(np.prod(cfg.input_shape))
    if u.ndim != 2 or u.shape[1] != size:
        raise ConfigError(f"expected sensor rows of width {size}, got shape {u.shape}")
    x = u.reshape((u.shape[0],) + cfg.input_shape)
    if not cfg.pre_projection:
        return x, []
    stack = list(zip(cfg.pre_projection, params.pre))
    return nn.stack_forward(stack, x, rng, dropout_active=dropout_active)


def encode_vjp(grad_state0, cfg: BranchConfig, params: BranchParams, caches):
    """Plain VJP through the pre-projection (no noise, so C = 0 there)."""
    if not cfg.pre_projection:
        return grad_state0.reshape(grad_state0.shape[0], -1), []
    g, grads = nn.stack_vjp(list(zip(cfg.pre_projection, params.pre)), caches, grad_state0)
    return g.reshape(g.shape[0], -1), grads


def _gaussian(rng, like):
    """Standard normals shaped and typed like ``like`` (float32 draws directly, no cast)."""
    if like.dtype in (np.float32, np.float64):
        return rng.standard_normal(like.shape, dtype=like.dtype)
    return rng.standard_normal(like.shape).astype(like.dtype)


def forward_sde(A0, params: BranchParams, cfg: BranchConfig, rng=None, *, increments=None,
                dropout_active=True) -> SdeTrajectory:
    """Euler-Maruyama propagation followed by the post-projection stack.

    Supplying ``increments`` replays a stored path; otherwise omega_n is drawn
    from ``rng`` after any dropout masks of the same step.
    """
    if len(params.drift) != cfg.n_steps or len(params.diffusion) != cfg.n_steps:
        raise ContractError("parameter set does not match the configured step count")
    A = np.asarray(A0)
    if A.shape[1:] != cfg.state_shape:
        raise ConfigError(f"initial state shape {A.shape[1:]} != {cfg.state_shape}")
    if increments is None and rng is None:
        raise ContractError("forward_sde needs either an rng or stored increments")
    h = cfg.h
    sqrt_h = float(np.sqrt(h))
    states = [A]
    incs, dcaches, scaches, sigmas = [], [], [], []
    for n in range(cfg.n_steps):
        mu, dc = nn.stack_forward(list(zip(cfg.drift, params.drift[n])), A)
        if cfg.diffusion_mode == "network":
            sigma, sc = nn.stack_forward(list(zip(cfg.diffusion, params.diffusion[n])), A, rng,
                                         dropout_active=dropout_active)
        else:
            sigma, sc = params.diffusion[n], None
        if increments is None:
            omega = _gaussian(rng, A)
        else:
            omega = increments[n]
            if omega.shape != A.shape:
                raise ContractError(f"stored increment {n} has shape {omega.shape}, state is {A.shape}")
        A = A + h * mu + sqrt_h * (sigma * omega)
        if not np.isfinite(A).all():
            raise NumericError(f"non-finite branch state after SDE step {n}", step=n)
        states.append(A)
        incs.append(omega)
        dcaches.append(dc)
        scaches.append(sc)
        sigmas.append(sigma)
    if cfg.post_projection:
        out, pc = nn.stack_forward(list(zip(cfg.post_projection, params.post)), A, rng,
                                   dropout_active=dropout_active)
    else:
        out, pc = A, []
    return SdeTrajectory(states, incs, dcaches, scaches, sigmas, pc, out)


def backward_adjoint(traj: SdeTrajectory, params: BranchParams, cfg: BranchConfig, B_terminal,
                     rng=None) -> AdjointPath:
    """Sample-wise adjoint solve; parameter gradients are summed over the batch axis."""
    if traj.n_steps != cfg.n_steps or len(params.drift) != cfg.n_steps:
        raise ContractError("trajectory, parameters and config disagree on the step count")
    B_terminal = np.asarray(B_terminal)
    if B_terminal.shape != traj.output.shape:
        raise ContractError(f"terminal adjoint shape {B_terminal.shape} != branch output {traj.output.shape}")
    if cfg.fresh_backward_noise and rng is None:
        raise ContractError("fresh_backward_noise needs an rng")
    h = cfg.h
    sqrt_h = float(np.sqrt(h))
    if cfg.post_projection:
        B, post_grads = nn.stack_vjp(list(zip(cfg.post_projection, params.post)), traj.post_caches, B_terminal)
    else:
        B, post_grads = B_terminal, []
    Bs = [None] * (cfg.n_steps + 1)
    Cs = [None] * cfg.n_steps
    drift_grads = [None] * cfg.n_steps
    diff_grads = [None] * cfg.n_steps
    Bs[-1] = B
    for n in range(cfg.n_steps - 1, -1, -1):
        drift_stack = list(zip(cfg.drift, params.drift[n]))
        if cfg.fresh_backward_noise:
            eps = _gaussian(rng, B)
        else:
            eps = traj.increments[n]
        C = B * eps / sqrt_h
        hB = h * B
        gin, gmu = nn.stack_vjp(drift_stack, traj.drift_caches[n], hB)
        if cfg.paper_indexing:
            _, caches_next = nn.stack_forward(drift_stack, traj.states[n + 1])
            gin, _ = nn.stack_vjp(drift_stack, caches_next, hB)
        if cfg.diffusion_mode == "network":
            gin_s, gsig = nn.stack_vjp(list(zip(cfg.diffusion, params.diffusion[n])),
                                       traj.diffusion_caches[n], h * C)
            gin = gin + gin_s
        else:
            sig = params.diffusion[n]
            hc = h * C
            gsig = np.asarray(hc.sum() if sig.ndim == 0 else hc.sum(axis=0), dtype=sig.dtype)
        B = B + gin
        Bs[n] = B
        Cs[n] = C
        drift_grads[n] = gmu
        diff_grads[n] = gsig
    return AdjointPath(Bs, Cs, drift_grads, diff_grads, post_grads)
