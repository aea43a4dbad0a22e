"""Mean-zero Gaussian random fields with an RBF kernel on 1D/2D sensor grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, LinAlgError

from .errors import ConfigError, NumericError

MAX_JITTER = 1e-4


@dataclass(frozen=True)
class KernelConfig:
    length_scale: float = 0.2
    variance: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ConfigError("length_scale must be positive")
        if not self.variance > 0:
            raise ConfigError("variance must be positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be nonnegative")


@dataclass(frozen=True)
class SensorGrid:
    """Sensor locations, stored as an (m, dim) array.

    ``axes`` keeps the per-axis coordinates; 2D grids are their tensor
    product in C order (the second axis varies fastest).
    """

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        if not 1 <= len(axes) <= 2:
            raise ConfigError("sensor grids are 1D or 2D")
        for a in axes:
            if a.ndim != 1 or a.size == 0:
                raise ConfigError("each grid axis must be a nonempty 1D array")
            if a.size > 1 and not np.all(np.diff(a) > 0):
                raise ConfigError("grid axes must be strictly increasing")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lo: float, hi: float, m: int) -> "SensorGrid":
        return cls((np.linspace(lo, hi, m),))

    @classmethod
    def uniform_2d(cls, lo: float, hi: float, m: int) -> "SensorGrid":
        a = np.linspace(lo, hi, m)
        return cls((a, a.copy()))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        if self.dim == 1:
            return self.axes[0][:, None]
        g1, g2 = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([g1.ravel(), g2.ravel()])

    @property
    def bounds(self) -> tuple:
        return tuple((float(a[0]), float(a[-1])) for a in self.axes)

    def to_dict(self) -> dict:
        return {"axes": [a.tolist() for a in self.axes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorGrid":
        return cls(tuple(np.asarray(a) for a in d["axes"]))


def rbf_covariance(grid: SensorGrid, cfg: KernelConfig) -> np.ndarray:
    """K_ij = variance * exp(-|p_i - p_j|^2 / (2 l^2)) + jitter * [i == j]."""
    p = grid.points
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    k = cfg.variance * np.exp(-d2 / (2.0 * cfg.length_scale**2))
    k[np.diag_indices_from(k)] += cfg.jitter
    return k


def grf_cholesky(grid: SensorGrid, cfg: KernelConfig):
    """Lower Cholesky factor of the kernel matrix, doubling the jitter on failure.

    Returns ``(L, jitter_used)``.
    """
    base = rbf_covariance(grid, KernelConfig(cfg.length_scale, cfg.variance, 0.0))
    jitter = cfg.jitter
    eye = np.eye(base.shape[0])
    while True:
        try:
            return cholesky(base + jitter * eye, lower=True), jitter
        except LinAlgError:
            pass
        if jitter >= MAX_JITTER:
            raise NumericError(f"kernel matrix not positive definite with jitter {jitter:g}")
        jitter = min(MAX_JITTER, max(2.0 * jitter, 1e-12))


def sample_grf(grid: SensorGrid, cfg: KernelConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent fields as rows of a (count, m) array."""
    if count < 0:
        raise ConfigError("count must be nonnegative")
    if count == 0:
        return np.empty((0, grid.size))
    chol, _ = grf_cholesky(grid, cfg)
    z = rng.standard_normal((grid.size, count))
    return (chol @ z).T
