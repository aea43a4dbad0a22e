"""
Ground-truth operators, noise injection, and Cartesian-product datasets.

All 1D truths integrate an ODE driven by an interpolant of the sensor values
(not-a-knot cubic spline by default, piecewise-linear on request).  Integration
runs segment by segment between consecutive sensor knots and query points, so
RK45 never steps across a break of the interpolant; every input function is
integrated simultaneously as one stacked system because the datasets share a
sensor grid and a query set.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .errors import ConfigError, DomainError, NumericError
from .grf import KernelConfig, SensorGrid, grf_cholesky

RTOL = 1e-9
ATOL = 1e-12


# ---------------------------------------------------------------------------
# 1D ODE oracles
# ---------------------------------------------------------------------------

def _as_fields(u, m):
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[1] != m:
        raise DomainError(f"expected {m} sensor values, got {u.shape[1]}")
    return u, single


def _check_range(y, lo, hi, what="y"):
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    tol = 1e-12 * max(1.0, abs(hi))
    if np.any(y < lo - tol) or np.any(y > hi + tol):
        raise DomainError(f"{what} must lie in [{lo}, {hi}]")
    return np.clip(y, lo, hi)


def integrate_driven_ode(rhs, u, knots, s0, ys, t0=0.0, rtol=RTOL, atol=ATOL, interpolation="cubic"):
    """Integrate ``s' = rhs(t, s, u_t)`` for a batch of driving fields.

    u      : (n, m) sensor values at ``knots`` (strictly increasing)
    s0     : (n, k) initial states at ``t0``
    ys     : query points >= t0, any order
    rhs    : callable(t, s (n, k), u_t (n,)) -> (n, k)

    Returns (n, len(ys), k).  The driving field is the ``interpolation``
    ('cubic' or 'linear') interpolant of ``u`` through ``knots``.
    """
    u = np.asarray(u, dtype=np.float64)
    knots = np.asarray(knots, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    n, k = s0.shape
    out = np.empty((n, ys.size, k))
    if ys.size == 0:
        return out
    if np.any(ys < t0):
        raise DomainError("query points must not precede the initial time")
    order = np.argsort(ys, kind="stable")
    t_end = ys[order[-1]]
    inner = knots[(knots > t0) & (knots < t_end)]
    breaks = np.unique(np.concatenate([[t0], inner, ys]))

    if interpolation == "cubic":
        spline = CubicSpline(knots, u, axis=1)
    elif interpolation != "linear":
        raise ConfigError(f"unknown interpolation {interpolation!r}")

    state = s0.copy()
    qi = 0
    # queries sitting exactly on t0
    while qi < ys.size and ys[order[qi]] == t0:
        out[:, order[qi]] = state
        qi += 1
    for a, b in zip(breaks[:-1], breaks[1:]):
        if interpolation == "cubic":
            def f(t, s_flat):
                return rhs(t, s_flat.reshape(n, k), spline(t)).ravel()
        else:
            ua = _interp_rows(u, knots, a)
            ub = _interp_rows(u, knots, b)

            def f(t, s_flat, ua=ua, ub=ub, a=a, width=b - a):
                w = (t - a) / width
                return rhs(t, s_flat.reshape(n, k), (1.0 - w) * ua + w * ub).ravel()

        sol = solve_ivp(f, (a, b), state.ravel(), method="RK45", rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericError(f"RK45 failed on [{a}, {b}]: {sol.message}")
        state = sol.y[:, -1].reshape(n, k)
        while qi < ys.size and ys[order[qi]] == b:
            out[:, order[qi]] = state
            qi += 1
    return out


def _interp_rows(u, knots, t):
    j = np.searchsorted(knots, t, side="right") - 1
    if j < 0:
        return u[:, 0]
    if j >= knots.size - 1:
        return u[:, -1]
    w = (t - knots[j]) / (knots[j + 1] - knots[j])
    return (1.0 - w) * u[:, j] + w * u[:, j + 1]


def _grid_1d(grid):
    if isinstance(grid, SensorGrid):
        if grid.dim != 1:
            raise DomainError("expected a 1D sensor grid")
        return grid.axes[0]
    return np.asarray(grid, dtype=np.float64)


def antiderivative_truth(u, grid, y, start=0.0, rtol=RTOL, atol=ATOL, interpolation="cubic"):
    """s(y) = integral of the interpolated field from ``start`` to y, with s(start) = 0.

    ``u`` is (m,) or (n, m); ``y`` scalar or 1D.  Output is (n, len(y)),
    squeezed to match the inputs.
    """
    knots = _grid_1d(grid)
    lo, hi = knots[0], knots[-1]
    uu, single = _as_fields(u, knots.size)
    ys = _check_range(y, lo, hi)
    start = float(_check_range(start, lo, hi, "start")[0])
    res = integrate_driven_ode(lambda t, s, ut: ut[:, None], uu, knots,
                               np.zeros((uu.shape[0], 1)), ys, t0=start, rtol=rtol, atol=atol,
                               interpolation=interpolation)[..., 0]
    return _squeeze(res, single, np.ndim(y) == 0)


def exp_ode_truth(u, grid, y, rtol=RTOL, atol=ATOL, interpolation="cubic"):
    """s' = s * u(y), s(0) = 1, for y in [0, 1]."""
    knots = _grid_1d(grid)
    uu, single = _as_fields(u, knots.size)
    ys = _check_range(y, 0.0, 1.0)
    res = integrate_driven_ode(lambda t, s, ut: s * ut[:, None], uu, knots,
                               np.ones((uu.shape[0], 1)), ys, rtol=rtol, atol=atol,
                               interpolation=interpolation)[..., 0]
    return _squeeze(res, single, np.ndim(y) == 0)


def _pendulum_rhs(t, s, ut):
    return np.column_stack([s[:, 1], -np.sin(s[:, 0]) + ut])


def pendulum_truth(u, grid, y, rtol=RTOL, atol=ATOL, interpolation="cubic"):
    """(s1, s2) with s1' = s2, s2' = -sin(s1) + u(y), s(0) = (0, 0); trailing axis of size 2."""
    knots = _grid_1d(grid)
    uu, single = _as_fields(u, knots.size)
    ys = _check_range(y, 0.0, 1.0)
    res = integrate_driven_ode(_pendulum_rhs, uu, knots, np.zeros((uu.shape[0], 2)), ys,
                               rtol=rtol, atol=atol, interpolation=interpolation)
    if single:
        res = res[0]
    if np.ndim(y) == 0:
        res = res[..., 0, :]
    return res


def _squeeze(res, single_u, scalar_y):
    if single_u:
        res = res[0]
    if scalar_y:
        res = res[..., 0]
    return res


# ---------------------------------------------------------------------------
# Double integral
# ---------------------------------------------------------------------------

def _hat_weights(knots, y, order, extrapolation="constant"):
    """w_j(y) = integral over [0, y] of the j-th interpolation basis function, by Gauss-Legendre.

    Below the first knot the basis is extended either by the constant first
    value or by the linear continuation of the first cell.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    inner = knots[knots < y]
    breaks = np.unique(np.concatenate([[0.0], inner, [y]]))
    a, b = breaks[:-1, None], breaks[1:, None]
    t = (0.5 * (b - a) * nodes + 0.5 * (a + b)).ravel()
    wt = (0.5 * (b - a) * weights).ravel()
    m = knots.size
    j = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, m - 2)
    frac = (t - knots[j]) / (knots[j + 1] - knots[j])
    if extrapolation == "constant":
        frac = np.clip(frac, 0.0, 1.0)
    elif extrapolation == "linear":
        frac = np.minimum(frac, 1.0)
    else:
        raise ConfigError(f"unknown extrapolation {extrapolation!r}")
    w = np.zeros(m)
    np.add.at(w, j, wt * (1.0 - frac))
    np.add.at(w, j + 1, wt * frac)
    return w


def double_integral_truth(u, grid, y, order=3, extrapolation="constant"):
    """Integral over [0, y1] x [0, y2] of the bilinear interpolant of ``u``.

    The field is sampled on ``grid`` (2D, e.g. 20x20 over [0.5, 1.5]^2) and
    extended below the first sensor by nearest-boundary constants, or with
    ``extrapolation='linear'`` by continuing the first cell bilinearly.  The
    integrand is bilinear on every cell piece, so tensor-product
    Gauss-Legendre is exact for ``order >= 1``.

    ``u`` is (m1*m2,) / (m1, m2) or batched (n, m1*m2); ``y`` is (2,) or (q, 2).
    """
    if not isinstance(grid, SensorGrid) or grid.dim != 2:
        raise DomainError("double_integral_truth needs a 2D sensor grid")
    x1, x2 = grid.axes
    m1, m2 = grid.shape
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1 or (u.ndim == 2 and u.shape == (m1, m2))
    uu = u.reshape(-1, m1, m2)
    yy = np.asarray(y, dtype=np.float64)
    scalar_y = yy.ndim == 1
    yy = np.atleast_2d(yy)
    if yy.shape[1] != 2:
        raise DomainError("double integral queries are (y1, y2) pairs")
    lo, hi = grid.bounds[0]
    yy = np.column_stack([_check_range(yy[:, 0], lo, hi, "y1"), _check_range(yy[:, 1], *grid.bounds[1], "y2")])
    w1 = np.stack([_hat_weights(x1, q, order, extrapolation) for q in yy[:, 0]])
    w2 = np.stack([_hat_weights(x2, q, order, extrapolation) for q in yy[:, 1]])
    res = np.einsum("qi,nij,qj->nq", w1, uu, w2)
    return _squeeze(res, single, scalar_y)


# ---------------------------------------------------------------------------
# Elliptic boundary-value problem
# ---------------------------------------------------------------------------

def elliptic_truth(b, f=5.0, bc=(0.0, 1.0), x=None):
    """Solve (e^b u')' = f on [0, 1] with Dirichlet data by conservative finite differences.

    ``b`` holds log-coefficient values on a uniform grid of M >= 3 points (or on
    ``x``), one field per row if 2D.  Half-grid coefficients are geometric means
    of the neighbouring nodal values.  Returns the nodal solution, same shape as ``b``.
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    bb = np.atleast_2d(b)
    m = bb.shape[1]
    if m < 3:
        raise DomainError("elliptic solve needs at least 3 grid points")
    if x is None:
        h = 1.0 / (m - 1)
    else:
        x = np.asarray(x, dtype=np.float64)
        h = x[1] - x[0]
        if not np.allclose(np.diff(x), h):
            raise DomainError("elliptic grid must be uniform")
    a_half = np.exp(0.5 * (bb[:, :-1] + bb[:, 1:]))  # (n, M-1)
    fvals = np.broadcast_to(np.asarray(f, dtype=np.float64), (bb.shape[0], m))
    u0, u1 = bc
    out = np.empty_like(bb)
    for r in range(bb.shape[0]):
        a = a_half[r]
        lower, upper = a[:-1], a[1:]  # a_{i-1/2}, a_{i+1/2} for interior i = 1..M-2
        diag = -(lower + upper)
        rhs = fvals[r, 1:-1] * h * h
        rhs = rhs.copy()
        rhs[0] -= lower[0] * u0
        rhs[-1] -= upper[-1] * u1
        ab = np.zeros((3, m - 2))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag
        ab[2, :-1] = lower[1:]
        try:
            inner = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular tridiagonal system: {exc}") from exc
        out[r, 0], out[r, -1] = u0, u1
        out[r, 1:-1] = inner
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentInfo:
    name: str
    sensor_lo: float
    sensor_hi: float
    sensors: int
    field_dim: int
    out_lo: float
    out_hi: float
    query_dim: int
    d_out: int
    length_scale: float = 0.2
    variance: float = 1.0
    length_scale_range: tuple | None = None


EXPERIMENTS = {
    "antiderivative": ExperimentInfo("antiderivative", 0.0, 5.0, 100, 1, 0.0, 5.0, 1, 1),
    "exp_ode": ExperimentInfo("exp_ode", 0.0, 5.0, 100, 1, 0.0, 1.0, 1, 1),
    "pendulum2d": ExperimentInfo("pendulum2d", 0.0, 1.0, 100, 1, 0.0, 1.0, 1, 2),
    "double_integral": ExperimentInfo("double_integral", 0.5, 1.5, 20, 2, 0.5, 1.5, 2, 1),
    "elliptic": ExperimentInfo("elliptic", 0.0, 1.0, 100, 1, 0.0, 1.0, 1, 1,
                               variance=0.01, length_scale_range=(1.0, 2.0)),
}


def experiment_info(name: str) -> ExperimentInfo:
    try:
        return EXPERIMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}") from None


@dataclass(frozen=True)
class QuerySpec:
    """How query points are chosen.

    kind='random': ``count`` uniform draws on the output domain (1D only).
    kind='grid'  : ``count`` evenly spaced points per axis, endpoints included.
                   For the elliptic experiment the points are snapped to the
                   solve grid.
    """

    kind: str = "random"
    count: int = 100

    def __post_init__(self):
        if self.kind not in ("random", "grid"):
            raise ConfigError(f"unknown query kind {self.kind!r}")
        if self.count < 1:
            raise ConfigError("query count must be >= 1")


@dataclass(frozen=True)
class OperatorSample:
    u: np.ndarray
    y: np.ndarray
    target_clean: np.ndarray
    target_noisy: np.ndarray
    noise_scale: float


@dataclass
class OperatorDataset:
    """n functions x d queries, stored densely; sample k is (k // d, k % d)."""

    experiment: str
    grid: SensorGrid
    functions: np.ndarray          # (n, m)
    queries: np.ndarray            # (d, query_dim)
    targets_clean: np.ndarray      # (n, d, d_out)
    targets_noisy: np.ndarray      # (n, d, d_out)
    noise_scale: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_functions(self) -> int:
        return self.functions.shape[0]

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def d_out(self) -> int:
        return self.targets_clean.shape[-1]

    def __len__(self) -> int:
        return self.n_functions * self.n_queries

    def sample(self, k: int) -> OperatorSample:
        i, q = divmod(int(k), self.n_queries)
        return OperatorSample(self.functions[i], self.queries[q], self.targets_clean[i, q],
                              self.targets_noisy[i, q], self.noise_scale)

    def batch(self, idx, noisy=True):
        """Arrays ``(u, y, target)`` for sample indices ``idx``."""
        idx = np.asarray(idx)
        fi, qi = np.divmod(idx, self.n_queries)
        tgt = self.targets_noisy if noisy else self.targets_clean
        return self.functions[fi], self.queries[qi], tgt[fi, qi]

    def subset(self, n_functions=None, n_queries=None) -> "OperatorDataset":
        """Leading functions and evenly spread queries; used for cheap diagnostics."""
        nf = self.n_functions if n_functions is None else min(n_functions, self.n_functions)
        if n_queries is None or n_queries >= self.n_queries:
            qsel = np.arange(self.n_queries)
        else:
            qsel = np.unique(np.round(np.linspace(0, self.n_queries - 1, n_queries)).astype(int))
        return OperatorDataset(self.experiment, self.grid, self.functions[:nf], self.queries[qsel],
                               self.targets_clean[:nf][:, qsel], self.targets_noisy[:nf][:, qsel],
                               self.noise_scale, self.seed, dict(self.meta))


def _make_queries(info: ExperimentInfo, spec: QuerySpec, rng):
    if info.name == "elliptic":
        # interior solve-grid nodes: u(0) and u(1) are fixed by the boundary conditions
        m = info.sensors
        idx = np.unique(np.round(np.linspace(1, m - 2, min(spec.count, m - 2))).astype(int))
        x = np.linspace(info.sensor_lo, info.sensor_hi, m)
        return x[idx][:, None], idx
    if spec.kind == "random":
        if info.query_dim != 1:
            raise ConfigError("random queries are only defined for 1D output domains")
        return rng.uniform(info.out_lo, info.out_hi, size=(spec.count, 1)), None
    axis = np.linspace(info.out_lo, info.out_hi, spec.count)
    if info.query_dim == 1:
        return axis[:, None], None
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()]), None


def sensor_grid(info: ExperimentInfo) -> SensorGrid:
    if info.field_dim == 2:
        return SensorGrid.uniform_2d(info.sensor_lo, info.sensor_hi, info.sensors)
    return SensorGrid.uniform(info.sensor_lo, info.sensor_hi, info.sensors)


def sample_elliptic_fields(rngs, length_scale=None, length_scale_range=(1.0, 2.0),
                           m=100, variance=0.01):
    """Log-coefficient fields b(x) on the elliptic grid, one per generator in ``rngs``.

    A fixed ``length_scale`` shares one Cholesky factor; otherwise each field
    draws its own length scale uniformly from ``length_scale_range``.
    Returns ``(fields (count, m), length_scales (count,))``.
    """
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    grid = SensorGrid.uniform(0.0, 1.0, m)
    fields = np.empty((len(rngs), m))
    scales = np.empty(len(rngs))
    fixed = None
    if length_scale is not None:
        fixed, _ = grf_cholesky(grid, KernelConfig(length_scale, variance))
    for i, r in enumerate(rngs):
        if fixed is None:
            ls = r.uniform(*length_scale_range)
            chol, _ = grf_cholesky(grid, KernelConfig(ls, variance))
        else:
            ls, chol = length_scale, fixed
        fields[i] = chol @ r.standard_normal(m)
        scales[i] = ls
    return fields, scales


def spawn_rngs(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def build_dataset(experiment: str, n_functions: int, query_spec: QuerySpec, noise_scale: float,
                  seed: int, length_scale: float | None = None) -> OperatorDataset:
    """Sample input fields, evaluate the truth on every (function, query) pair, add noise.

    Each function owns an RNG substream (field draw, then noise draw) spawned
    from ``seed``; the query set comes from its own substream.
    """
    info = experiment_info(experiment)
    if n_functions < 0:
        raise ConfigError("n_functions must be nonnegative")
    if noise_scale < 0:
        raise ConfigError("noise_scale must be nonnegative")
    root = np.random.SeedSequence(seed)
    q_ss, f_ss = root.spawn(2)
    queries, q_index = _make_queries(info, query_spec, np.random.default_rng(q_ss))
    grid = sensor_grid(info)
    rngs = [np.random.default_rng(s) for s in f_ss.spawn(n_functions)]
    meta = {}

    if experiment == "elliptic":
        functions, scales = sample_elliptic_fields(rngs, length_scale, info.length_scale_range,
                                                    info.sensors, info.variance)
        meta["length_scales"] = scales.tolist()
        sol = elliptic_truth(functions) if n_functions else np.empty((0, info.sensors))
        clean = sol[:, q_index][..., None]
    else:
        chol, _ = grf_cholesky(grid, KernelConfig(length_scale or info.length_scale, info.variance))
        functions = np.empty((n_functions, grid.size))
        for i, r in enumerate(rngs):
            functions[i] = chol @ r.standard_normal(grid.size)
        clean = evaluate_truth(experiment, functions, grid, queries)

    noisy = clean.copy()
    if noise_scale > 0:
        for i, r in enumerate(rngs):
            noisy[i] += noise_scale * r.standard_normal(clean.shape[1:])
    return OperatorDataset(experiment, grid, functions, queries, clean, noisy, float(noise_scale), int(seed), meta)


def evaluate_truth(experiment: str, functions, grid: SensorGrid, queries) -> np.ndarray:
    """Clean operator outputs, shape (n, d, d_out)."""
    functions = np.atleast_2d(functions)
    n, d = functions.shape[0], queries.shape[0]
    if n == 0:
        return np.empty((0, d, experiment_info(experiment).d_out))
    if experiment == "antiderivative":
        return antiderivative_truth(functions, grid, queries[:, 0]).reshape(n, d, 1)
    if experiment == "exp_ode":
        return exp_ode_truth(functions, grid, queries[:, 0]).reshape(n, d, 1)
    if experiment == "pendulum2d":
        return pendulum_truth(functions, grid, queries[:, 0]).reshape(n, d, 2)
    if experiment == "double_integral":
        return double_integral_truth(functions, grid, queries).reshape(n, d, 1)
    if experiment == "elliptic":
        sol = elliptic_truth(functions)
        idx = np.searchsorted(grid.axes[0], queries[:, 0])
        return sol[:, idx].reshape(n, d, 1)
    raise ConfigError(f"unknown experiment {experiment!r}")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

FLOAT_FMT = "%.17g"


def save_dataset(ds: OperatorDataset, out_dir) -> None:
    """meta.json, functions.csv (one row per function), samples.csv (one row per pair)."""
    os.makedirs(out_dir, exist_ok=True)
    qd, do = ds.queries.shape[1], ds.d_out
    meta = {
        "experiment": ds.experiment,
        "n_functions": ds.n_functions,
        "n_queries": ds.n_queries,
        "n_samples": len(ds),
        "seed": ds.seed,
        "noise_scale": ds.noise_scale,
        "query_dim": qd,
        "d_out": do,
        "sensor_grid": ds.grid.to_dict(),
        **ds.meta,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    header = ",".join(f"u_{j}" for j in range(ds.functions.shape[1]))
    np.savetxt(os.path.join(out_dir, "functions.csv"), ds.functions, delimiter=",",
               fmt=FLOAT_FMT, header=header, comments="", encoding="utf-8")

    n, d = ds.n_functions, ds.n_queries
    cols = (["function_index"] + [f"y_{j + 1}" for j in range(qd)]
            + [f"target_clean_{j + 1}" for j in range(do)] + [f"target_noisy_{j + 1}" for j in range(do)])
    fidx = np.repeat(np.arange(n), d)
    body = np.column_stack([
        np.tile(ds.queries, (n, 1)),
        ds.targets_clean.reshape(n * d, do),
        ds.targets_noisy.reshape(n * d, do),
    ]) if n else np.empty((0, qd + 2 * do))
    with open(os.path.join(out_dir, "samples.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        fmt = ",".join(["%d"] + [FLOAT_FMT] * body.shape[1])
        for start in range(0, n * d, 100_000):
            stop = min(n * d, start + 100_000)
            block = np.column_stack([fidx[start:stop], body[start:stop]])
            np.savetxt(fh, block, fmt=fmt, delimiter=",")


def load_dataset(in_dir) -> OperatorDataset:
    with open(os.path.join(in_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    grid = SensorGrid.from_dict(meta["sensor_grid"])
    n, d = meta["n_functions"], meta["n_queries"]
    qd, do = meta["query_dim"], meta["d_out"]
    functions = np.loadtxt(os.path.join(in_dir, "functions.csv"), delimiter=",", skiprows=1, ndmin=2)
    functions = functions.reshape(n, grid.size)
    rows = np.loadtxt(os.path.join(in_dir, "samples.csv"), delimiter=",", skiprows=1, ndmin=2)
    rows = rows.reshape(n * d, 1 + qd + 2 * do)
    queries = rows[:d, 1:1 + qd].copy() if n else np.empty((d, qd))
    clean = rows[:, 1 + qd:1 + qd + do].reshape(n, d, do)
    noisy = rows[:, 1 + qd + do:].reshape(n, d, do)
    extra = {k: v for k, v in meta.items() if k == "length_scales"}
    return OperatorDataset(meta["experiment"], grid, functions, queries, clean, noisy,
                           float(meta["noise_scale"]), int(meta["seed"]), extra)
