"""
Per-experiment presets: dataset sizes, SON branch/trunk, baseline network and
training schedule, each at ``paper`` scale and a ``small`` desk-check scale.

Values the source experiments leave open (ADAM moments, init ranges, channel
counts, elliptic training schedule) are filled in here so they can be
overridden from a JSON config file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .branch import BranchConfig
from .errors import ConfigError
from .model import BaselineBranchConfig, DeepONet, SonModel, TrunkConfig
from .oracles import EXPERIMENTS, QuerySpec, build_dataset, experiment_info
from .training import TrainConfig

SCALES = ("small", "paper")


@dataclass
class DatasetSpec:
    experiment: str
    n_train: int
    train_queries: QuerySpec
    n_test: int
    test_queries: QuerySpec
    noise_scale: float
    length_scale: float | None = None

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "n_train": self.n_train,
                "train_queries": {"kind": self.train_queries.kind, "count": self.train_queries.count},
                "n_test": self.n_test,
                "test_queries": {"kind": self.test_queries.kind, "count": self.test_queries.count},
                "noise_scale": self.noise_scale, "length_scale": self.length_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["train_queries"] = QuerySpec(**d["train_queries"])
        d["test_queries"] = QuerySpec(**d["test_queries"])
        return cls(**d)

    def build(self, seed: int, split: str = "train"):
        """Train and test sets are built from seeds ``2*seed`` and ``2*seed + 1``."""
        if split == "train":
            return build_dataset(self.experiment, self.n_train, self.train_queries, self.noise_scale,
                                 2 * seed, self.length_scale)
        if split == "test":
            return build_dataset(self.experiment, self.n_test, self.test_queries, self.noise_scale,
                                 2 * seed + 1, self.length_scale)
        raise ConfigError(f"unknown split {split!r}")


@dataclass
class ExperimentPreset:
    name: str
    scale: str
    dataset: DatasetSpec
    branch: BranchConfig
    trunk: TrunkConfig
    train: TrainConfig
    baseline_branch: BaselineBranchConfig
    baseline_trunk: TrunkConfig
    noise_reps: int = 100
    dtype: str = "float32"           # float64 roughly doubles the epoch time
    notes: dict = field(default_factory=dict)

    @property
    def experiment(self) -> str:
        return self.dataset.experiment

    def make_model(self, kind: str, rng):
        dtype = np.dtype(self.dtype)
        if kind == "son":
            return SonModel.create(self.branch, self.trunk, rng, dtype)
        if kind == "baseline":
            return DeepONet.create(self.baseline_branch, self.baseline_trunk, rng, dtype)
        raise ConfigError(f"unknown model kind {kind!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "scale": self.scale, "dataset": self.dataset.to_dict(),
                "branch": self.branch.to_dict(), "trunk": self.trunk.to_dict(),
                "train": self.train.to_dict(), "baseline_branch": self.baseline_branch.to_dict(),
                "baseline_trunk": self.baseline_trunk.to_dict(), "noise_reps": self.noise_reps,
                "dtype": self.dtype, "notes": dict(self.notes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPreset":
        return cls(d["name"], d["scale"], DatasetSpec.from_dict(d["dataset"]),
                   BranchConfig.from_dict(d["branch"]), TrunkConfig.from_dict(d["trunk"]),
                   TrainConfig.from_dict(d["train"]), BaselineBranchConfig.from_dict(d["baseline_branch"]),
                   TrunkConfig.from_dict(d["baseline_trunk"]), d.get("noise_reps", 100),
                   d.get("dtype", "float32"), d.get("notes", {}))

    def override(self, overrides: dict) -> "ExperimentPreset":
        """Deep-merge a partial dict (e.g. from a JSON config file) over this preset."""
        base = self.to_dict()
        _merge(base, overrides)
        return ExperimentPreset.from_dict(base)


def _merge(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)


# ---------------------------------------------------------------------------
# architecture helpers
# ---------------------------------------------------------------------------

def _mlp(widths, act, last_act=None):
    last_act = act if last_act is None else last_act
    n = len(widths) - 1
    return [nn.dense(widths[i], widths[i + 1], act if i < n - 1 else last_act) for i in range(n)]


def _drift_1d(width):
    # three dense layers; the last is linear so the drift can take either sign
    return _mlp([width] * 4, "relu", "identity")


def _baseline_1d(m, p):
    return BaselineBranchConfig((m,), _mlp([m, p, p, p], "relu", "identity"))


def _baseline_trunk_1d(p, d_out=1):
    return TrunkConfig(_mlp([1, 64, 100, p * d_out], "relu", "identity"), d_out)


def _one_d(name, scale, *, n_steps, diffusion_init, d_out=1, noise=0.1):
    info = experiment_info(name)
    m, p = info.sensors, 100
    if scale == "paper":
        ds = DatasetSpec(name, 100, QuerySpec("random", 100), 1000, QuerySpec("grid", 1000), noise)
        tr = TrainConfig(epochs=2000, lr=1e-3, decay_factor=0.9, decay_interval=500, decay_start=1000)
    else:
        ds = DatasetSpec(name, 20, QuerySpec("random", 20), 20, QuerySpec("grid", 50), noise)
        tr = TrainConfig(epochs=300, lr=1e-3, decay_factor=0.9, decay_interval=100, decay_start=150)
    branch = BranchConfig(n_steps, (m,), _drift_1d(m), "per_layer_scalar_vector", "scalar",
                          diffusion_init=diffusion_init)
    trunk = TrunkConfig(_mlp([1, p, p * d_out], "relu", "identity"), d_out)
    return ExperimentPreset(name, scale, ds, branch, trunk, tr, _baseline_1d(m, p), _baseline_trunk_1d(p, d_out))


def _double_integral(scale):
    ch = 4
    if scale == "paper":
        ds = DatasetSpec("double_integral", 100, QuerySpec("grid", 30), 20, QuerySpec("grid", 30), 0.05)
        tr = TrainConfig(epochs=200, lr=1e-3, decay_factor=0.9, decay_interval=25, batch_size=900)
    else:
        ds = DatasetSpec("double_integral", 25, QuerySpec("grid", 15), 10, QuerySpec("grid", 15), 0.05)
        tr = TrainConfig(epochs=100, lr=1e-3, decay_factor=0.9, decay_interval=25, batch_size=225)
    branch = BranchConfig(
        5, (1, 20, 20),
        drift=[nn.conv2d(ch, ch, 3, "relu")],
        diffusion_mode="network",
        diffusion=[nn.conv2d(ch, ch, 3, "arctan"), nn.dropout(0.9)],
        pre_projection=[nn.conv2d(1, ch, 3, "relu"), nn.maxpool2d(2)],
        post_projection=[nn.maxpool2d(2), nn.flatten()],
    )
    p = branch.width
    trunk = TrunkConfig(_mlp([2, p, p], "sigmoid"))
    base = BaselineBranchConfig((1, 20, 20), [nn.conv2d(1, ch, 3, "relu"), nn.maxpool2d(2),
                                              nn.conv2d(ch, ch, 3, "relu"), nn.maxpool2d(2), nn.flatten()])
    return ExperimentPreset("double_integral", scale, ds, branch, trunk, tr, base, TrunkConfig(_mlp([2, p, p], "sigmoid")),
                            noise_reps=20)


def _elliptic(scale):
    m, p = 100, 100
    if scale == "paper":
        ds = DatasetSpec("elliptic", 5000, QuerySpec("grid", 25), 1000, QuerySpec("grid", 25), 0.0)
        tr = TrainConfig(epochs=300, lr=3e-3, decay_factor=0.5, decay_interval=50, decay_start=100, batch_size=5000)
    else:
        ds = DatasetSpec("elliptic", 1000, QuerySpec("grid", 25), 100, QuerySpec("grid", 25), 0.0)
        tr = TrainConfig(epochs=400, lr=3e-3, decay_factor=0.5, decay_interval=50, decay_start=100, batch_size=1000)
    branch = BranchConfig(5, (m,), _drift_1d(m), "per_layer_scalar_vector", "scalar", diffusion_init=(0.0, 0.01))
    # a second hidden trunk layer removes the per-query bias a single ReLU layer leaves near x = 1
    trunk = TrunkConfig(_mlp([1, p, p, p], "relu", "identity"))
    return ExperimentPreset("elliptic", scale, ds, branch, trunk, tr, _baseline_1d(m, p), _baseline_trunk_1d(p))


def get_preset(name: str, scale: str = "paper") -> ExperimentPreset:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose from {SCALES}")
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(EXPERIMENTS)}")
    if name == "antiderivative":
        return _one_d(name, scale, n_steps=6, diffusion_init=(0.0, 1.0))
    if name == "exp_ode":
        return _one_d(name, scale, n_steps=6, diffusion_init=(0.0, 1.0))
    if name == "pendulum2d":
        return _one_d(name, scale, n_steps=10, diffusion_init=(0.0, float(np.sqrt(2.0))), d_out=2)
    if name == "double_integral":
        return _double_integral(scale)
    return _elliptic(scale)


def list_presets() -> list:
    return sorted(EXPERIMENTS)


def with_epochs(preset: ExperimentPreset, epochs: int) -> ExperimentPreset:
    return replace(preset, train=replace(preset.train, epochs=int(epochs)))
