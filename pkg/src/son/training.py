"""Optimizers, learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, NumericError
from .model import save_checkpoint

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-3
    decay_factor: float = 1.0
    decay_interval: int = 1
    decay_start: int = 0
    batch_size: int = 0                   # 0 = full dataset, one step per epoch
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bounds: tuple | None = None           # (lo, hi) clamp applied after each step
    running_cost: float = 0.0             # lambda in r = lambda/2 |theta|^2 on SDE controls
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay factor must lie in (0, 1]")
        if self.decay_interval < 1 or self.decay_start < 0:
            raise ConfigError("decay interval must be >= 1 and activation epoch >= 0")
        if self.batch_size < 0:
            raise ConfigError("batch size must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid adam hyperparameters")
        if self.bounds is not None:
            self.bounds = tuple(float(b) for b in self.bounds)
            if len(self.bounds) != 2 or not self.bounds[0] < self.bounds[1]:
                raise ConfigError("bounds must be (lo, hi) with lo < hi")
        if self.running_cost < 0:
            raise ConfigError("running cost weight must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.bounds is not None:
            d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base rate times decay_factor ** (completed intervals after decay_start)."""
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    k = (epoch - cfg.decay_start) // cfg.decay_interval if epoch >= cfg.decay_start else 0
    return cfg.lr * cfg.decay_factor**k


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig):
    """One descent step; returns new ``(params, state)`` without touching the inputs."""
    if set(grads) != set(params):
        raise DimensionError(f"gradient keys differ from parameter keys: {sorted(set(grads) ^ set(params))}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {k}", block=k)
    new_params = {}
    if cfg.optimizer == "sgd":
        for k, p in params.items():
            new_params[k] = p - lr * grads[k]
        new_state = OptimizerState(state.m, state.v, state.step + 1)
    else:
        t = state.step + 1
        b1, b2 = cfg.beta1, cfg.beta2
        m, v = {}, {}
        for k, p in params.items():
            g = grads[k]
            m[k] = b1 * state.m.get(k, 0.0) + (1 - b1) * g
            v[k] = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
            mhat = m[k] / (1 - b1**t)
            vhat = v[k] / (1 - b2**t)
            new_params[k] = p - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        new_state = OptimizerState(m, v, t)
    if cfg.bounds is not None:
        lo, hi = cfg.bounds
        new_params = {k: np.clip(p, lo, hi) for k, p in new_params.items()}
    dtypes = {k: p.dtype for k, p in params.items()}
    return {k: np.asarray(p, dtype=dtypes[k]) for k, p in new_params.items()}, new_state


@dataclass
class HistoryRow:
    epoch: int
    mean_loss: float
    lr: float
    wall_ms: float
    grad_norm: float


@dataclass
class TrainResult:
    model: object
    history: list
    state: OptimizerState


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    """Substream owned by one (epoch, batch) pair, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(batch)]))


def _batches(n: int, cfg: TrainConfig, epoch: int):
    if cfg.batch_size == 0 or cfg.batch_size >= n:
        return [np.arange(n)]
    order = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(epoch), 2**31])).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _check_compatible(model, dataset):
    if dataset.d_out != model.d_out:
        raise ConfigError(f"dataset d_out {dataset.d_out} != model d_out {model.d_out}")
    if dataset.queries.shape[1] != model.trunk_cfg.query_dim:
        raise ConfigError("dataset query dimension does not match the trunk input")
    if dataset.functions.shape[1] != int(np.prod(model.branch_cfg.input_shape)):
        raise ConfigError("dataset sensor count does not match the branch input")


def train(model, dataset, cfg: TrainConfig, *, out_dir=None, start_epoch=0, state=None,
          callback=None) -> TrainResult:
    """Epoch loop: per batch, mean gradients over the batch and one optimizer step.

    The model's parameter dict is replaced in place after every step.  Writes
    ``history.csv`` and periodic ``checkpoint_<epoch>.npz`` files when
    ``out_dir`` is given.
    """
    _check_compatible(model, dataset)
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    state = state or OptimizerState.zeros_like(model.params)
    controls = model.control_keys()
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        total, sq = 0.0, 0.0
        for b, idx in enumerate(_batches(len(dataset), cfg, epoch)):
            u, y, target = dataset.batch(idx, noisy=True)
            rng = batch_rng(cfg.seed, epoch, b)
            try:
                loss, grads = model.loss_and_grads(u, y, target, rng)
                if cfg.running_cost:
                    for k in controls:
                        grads[k] = grads[k] + cfg.running_cost * model.params[k] / model.branch_cfg.n_steps
                model.params, state = optimizer_step(model.params, grads, state, lr, cfg)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", epoch=epoch, step=exc.step) from exc
            total += loss * len(idx)
            sq += sum(float(np.vdot(grads[k], grads[k])) for k in controls)
        mean_loss = total / len(dataset)
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"mean loss became non-finite at epoch {epoch}", epoch=epoch)
        row = HistoryRow(epoch, mean_loss, lr, 1000.0 * (time.perf_counter() - t0), float(np.sqrt(sq)))
        history.append(row)
        if callback is not None:
            callback(row)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, f"{out_dir}/checkpoint_{epoch + 1:06d}.npz", epoch + 1)
    if out_dir is not None:
        write_history(history, f"{out_dir}/history.csv")
    return TrainResult(model, history, state)


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr", "wall_ms"])
        for r in history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.lr), f"{r.wall_ms:.3f}"])
