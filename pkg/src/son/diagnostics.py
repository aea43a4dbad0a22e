"""Evaluation of stochastic predictors: MSE, noise recovery, ensembles, covariance."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


def _predict(model, u, y, rng):
    if hasattr(model, "predict_values"):
        return np.asarray(model.predict_values(u, y, rng))
    return np.asarray(model(u, y, rng))


def _chunks(n, size):
    return [np.arange(i, min(n, i + size)) for i in range(0, n, size)]


def eval_mse(model, dataset, rng, *, noisy=True, chunk=20000) -> float:
    """Mean Phi of one stochastic prediction per sample against the targets."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    total = 0.0
    for idx in _chunks(n, chunk):
        u, y, t = dataset.batch(idx, noisy=noisy)
        v = _predict(model, u, y, rng).reshape(t.shape)
        total += float(((v - t) ** 2).mean(axis=1).sum())
    return total / n


def eval_mse_mean_prediction(model, dataset, rng, reps=10, *, noisy=True) -> float:
    """MSE of the ``reps``-draw averaged prediction (not used by the acceptance gate)."""
    u, y, t = dataset.batch(np.arange(len(dataset)), noisy=noisy)
    v = np.mean([_predict(model, u, y, rng).reshape(t.shape) for _ in range(reps)], axis=0)
    return float(((v - t) ** 2).mean())


@dataclass
class NoiseReport:
    per_dim: np.ndarray
    overall: float
    reps: int
    n_samples: int
    dataset_id: str = ""

    def to_rows(self):
        rows = [{"dimension": d, "mean_std": float(s)} for d, s in enumerate(self.per_dim)]
        rows.append({"dimension": "overall", "mean_std": self.overall})
        return rows


def pointwise_std(model, u, y, reps, rng) -> np.ndarray:
    """(B, d_out) sample std (ddof 1) of ``reps`` independent predictions per sample."""
    draws = np.stack([_predict(model, u, y, rng).reshape(len(u), -1) for _ in range(reps)])
    # shifting by the first draw keeps a deterministic predictor at exactly zero
    return (draws - draws[0]).std(axis=0, ddof=1)


def noise_recovery(model, dataset, reps, rng, *, chunk=5000, dataset_id="") -> NoiseReport:
    """Average over samples of the pointwise std of ``reps`` repeated predictions."""
    if reps < 2:
        raise ConfigError("noise recovery needs reps >= 2")
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    acc = np.zeros(dataset.d_out)
    for idx in _chunks(n, chunk):
        u, y, _ = dataset.batch(idx)
        acc += pointwise_std(model, u, y, reps, rng).sum(axis=0)
    per_dim = acc / n
    return NoiseReport(per_dim, float(per_dim.mean()), int(reps), n, dataset_id)


@dataclass
class Ensemble:
    mean: np.ndarray          # (d, d_out) or (count_u, d, d_out)
    std: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    samples: np.ndarray       # (count, ..., d, d_out)


def ensemble_stats(model, u, y_grid, count, rng) -> Ensemble:
    """``count`` predictions at every grid point for one input row (or a stack of rows).

    Band is mean +/- 2 std with the unbiased std.
    """
    if count < 2:
        raise ConfigError("ensemble needs count >= 2")
    u = np.asarray(u)
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    y_grid = np.atleast_2d(np.asarray(y_grid, dtype=float))
    if y_grid.shape[0] == 1 and y_grid.shape[1] > 1 and u2.shape[1] != 1:
        y_grid = y_grid.T
    nu, d = u2.shape[0], y_grid.shape[0]
    uu = np.repeat(u2, d, axis=0)
    yy = np.tile(y_grid, (nu, 1))
    raw = np.stack([_predict(model, uu, yy, rng).reshape(nu, d, -1) for _ in range(count)])
    if single:
        raw = raw[:, 0]
    mean = raw.mean(axis=0)
    std = raw.std(axis=0, ddof=1)
    return Ensemble(mean, std, mean - 2 * std, mean + 2 * std, raw)


@dataclass
class CovarianceReport:
    reference: np.ndarray
    estimate: np.ndarray
    difference: np.ndarray
    max_abs: float
    frobenius: float
    mc_floor: float | None = None


def sample_covariance(ensemble) -> np.ndarray:
    """Unbiased covariance of an (members, points) ensemble."""
    x = np.asarray(ensemble)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError("ensemble must be (members >= 2, points)")
    return np.atleast_2d(np.cov(x, rowvar=False))


def covariance_compare(model_ensemble, oracle_ensemble, mc_floor=None) -> CovarianceReport:
    a = np.asarray(model_ensemble)
    b = np.asarray(oracle_ensemble)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"ensembles on different grids: {a.shape} vs {b.shape}")
    est, ref = sample_covariance(a), sample_covariance(b)
    diff = est - ref
    return CovarianceReport(ref, est, diff, float(np.abs(diff).max()), float(np.linalg.norm(diff)), mc_floor)


def mc_floor(oracle_a, oracle_b) -> float:
    """Max-abs covariance difference between two independent oracle ensembles."""
    return covariance_compare(oracle_a, oracle_b).max_abs


def mean_within_band(model_ensemble, oracle_ensemble, k=3.0) -> np.ndarray:
    """Per-point test |mean_a - mean_b| <= k * pooled standard error."""
    a = np.asarray(model_ensemble)
    b = np.asarray(oracle_ensemble)
    se = np.sqrt(a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0])
    return np.abs(a.mean(axis=0) - b.mean(axis=0)) <= k * se


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_noise_report(report: NoiseReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dimension", "mean_std", "reps", "n_samples", "dataset"])
        for row in report.to_rows():
            w.writerow([row["dimension"], repr(row["mean_std"]), report.reps, report.n_samples, report.dataset_id])


def write_matrix(mat, path) -> None:
    np.savetxt(path, np.asarray(mat), delimiter=",", fmt="%.17g", encoding="utf-8")


def write_covariance_report(report: CovarianceReport, out_dir) -> dict:
    paths = {}
    for name, mat in (("ref", report.reference), ("est", report.estimate), ("diff", report.difference)):
        paths[name] = f"{out_dir}/covariance_{name}.csv"
        write_matrix(mat, paths[name])
    return paths


def write_band(y, ens: Ensemble, path) -> None:
    """Columns y, mean, lo, hi for a single-input ensemble (first output dimension per row block)."""
    y = np.asarray(y, dtype=float).reshape(len(ens.mean), -1)
    mean = np.asarray(ens.mean).reshape(len(y), -1)
    lo = np.asarray(ens.lo).reshape(len(y), -1)
    hi = np.asarray(ens.hi).reshape(len(y), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        ycols = ["y"] if y.shape[1] == 1 else [f"y{j + 1}" for j in range(y.shape[1])]
        if mean.shape[1] == 1:
            w.writerow(ycols + ["mean", "lo", "hi"])
        else:
            w.writerow(ycols + [f"{c}_{d + 1}" for d in range(mean.shape[1]) for c in ("mean", "lo", "hi")])
        for i in range(len(y)):
            vals = [v for d in range(mean.shape[1]) for v in (mean[i, d], lo[i, d], hi[i, d])]
            w.writerow([repr(float(v)) for v in y[i]] + [repr(float(v)) for v in vals])
