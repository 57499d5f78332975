"""Degenerate stochastic Hamiltonian system driven by G-Brownian motion.

    dX = (A X + M Y) dt
    dY = b1(X, Y) dt + b2(X, Y) d<B> + Q dB

simulated by explicit Euler under one volatility control at a time; the
nonlinear semigroup is estimated as a maximum over a dictionary of controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._stats import mean_se
from .drift import DriftFn, as_drift
from .exceptions import AssumptionViolation, NonFinite
from .gcore import driving_from_noise, open_loop_thetas, step_increments, wiener_increments

DEFAULT_BOX = (-5.0, 5.0, -5.0, 5.0)
DEFAULT_BATCH = 4096


@dataclass(frozen=True, eq=False)
class HamiltonianSystem:
    """Coefficients of the Hamiltonian G-SDE.

    ``b1_bar``/``b2_bar`` are optional perturbation drifts added to the
    ``dt`` and ``d<B>`` channels respectively.
    """

    A: float
    M: float
    Q: float
    b1: DriftFn | str | float = "0"
    b2: DriftFn | str | float = "0"
    K: float = 1.0
    b1_bar: DriftFn | str | float | None = None
    b2_bar: DriftFn | str | float | None = None
    box: tuple = DEFAULT_BOX

    def __post_init__(self):
        for name in ("b1", "b2", "b1_bar", "b2_bar"):
            object.__setattr__(self, name, as_drift(getattr(self, name), self.box))
        if self.Q * self.M == 0:
            raise AssumptionViolation("QM != 0 is required (noise must reach the position)")
        if not self.K > 0:
            raise AssumptionViolation("the declared Lipschitz constant K must be positive")

    @classmethod
    def damped_oscillator(cls, b1_bar=None, b2_bar=None, K=2.0, box=DEFAULT_BOX):
        """dX = Y dt, dY = (-X - Y) dt + dB (optionally perturbed)."""
        return cls(A=0.0, M=1.0, Q=1.0, b1="-x - y", b2="0", K=K,
                   b1_bar=b1_bar, b2_bar=b2_bar, box=box)

    @property
    def perturbed(self):
        return self.b1_bar is not None or self.b2_bar is not None

    def reference(self):
        """The same system without perturbation drifts."""
        return replace(self, b1_bar=None, b2_bar=None)

    def drift_dt(self, x, y):
        out = self.b1(x, y)
        if self.b1_bar is not None:
            out = out + self.b1_bar(x, y)
        return out

    def drift_qv(self, x, y):
        out = self.b2(x, y)
        if self.b2_bar is not None:
            out = out + self.b2_bar(x, y)
        return out

    def lipschitz_estimate(self):
        """Grid estimate of Lip(b1) + Lip(b2) on the working box."""
        return self.b1.lipschitz + self.b2.lipschitz

    def check_lipschitz(self, n_pairs=2000, seed=0):
        """Sample pairs in the box and compare drift increments against K.

        Returns the largest observed ratio
        ``(|b1(z)-b1(w)| + |b2(z)-b2(w)|) / |z-w|`` and whether it is <= K.
        """
        rng = np.random.Generator(np.random.PCG64(seed))
        x0, x1, y0, y1 = self.box
        z = rng.uniform((x0, y0), (x1, y1), size=(n_pairs, 2))
        w = rng.uniform((x0, y0), (x1, y1), size=(n_pairs, 2))
        num = np.abs(self.b1(z[:, 0], z[:, 1]) - self.b1(w[:, 0], w[:, 1])) \
            + np.abs(self.b2(z[:, 0], z[:, 1]) - self.b2(w[:, 0], w[:, 1]))
        ratio = float(np.max(num / np.linalg.norm(z - w, axis=1)))
        grid_est = self.lipschitz_estimate()
        return {"sampled_ratio": ratio, "grid_estimate": grid_est,
                "ok": ratio <= self.K * (1 + 1e-9) and grid_est <= self.K * (1 + 1e-9)}

    def max_dt(self):
        return 1.0 / (4.0 * self.K)


def check_step_size(system, grid):
    if grid.dt > system.max_dt() * (1 + 1e-12):
        raise AssumptionViolation(
            f"time step {grid.dt:g} exceeds the stability guard 1/(4K) = "
            f"{system.max_dt():g}; increase n_steps to at least "
            f"{math.ceil(grid.horizon / system.max_dt())}")


@dataclass(frozen=True, eq=False)
class StatePath:
    grid: object
    x: np.ndarray
    y: np.ndarray

    @property
    def final(self):
        return self.x[:, -1], self.y[:, -1]


def _initial_state(z0, n_paths):
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim == 1:
        return np.full(n_paths, z0[0]), np.full(n_paths, z0[1])
    return z0[:, 0].copy(), z0[:, 1].copy()


def _euler_step(system, x, y, dt, db, dqv, extra_dt=0.0, drift_at=None):
    """One explicit Euler step; drifts are evaluated at ``drift_at`` if given."""
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFinite("state became non-finite; reduce the time step or the box")
    dx, dy = (x, y) if drift_at is None else drift_at
    x_new = x + (system.A * x + system.M * y) * dt
    y_new = y + system.drift_dt(dx, dy) * dt + system.drift_qv(dx, dy) * dqv \
        + system.Q * db + extra_dt * dt
    return x_new, y_new


class EulerStateSource:
    """Euler recursion exposed as a state source for feedback controls."""

    def __init__(self, system, z0, grid, n_paths):
        self.system = system
        self.grid = grid
        x, y = _initial_state(z0, n_paths)
        self.xs = np.empty((n_paths, grid.n_steps + 1))
        self.ys = np.empty((n_paths, grid.n_steps + 1))
        self.xs[:, 0], self.ys[:, 0] = x, y
        self.k = 0

    def current(self):
        return self.xs[:, self.k], self.ys[:, self.k]

    def advance(self, k, dw, theta):
        db, dqv, _, _ = step_increments(dw, theta, self.grid.dt)
        x, y = self.current()
        with np.errstate(all="ignore"):
            self.xs[:, k + 1], self.ys[:, k + 1] = _euler_step(
                self.system, x, y, self.grid.dt, db, dqv)
        self.k = k + 1

    def path(self):
        _check_finite(self.xs, self.ys)
        return StatePath(self.grid, self.xs, self.ys)


def _check_finite(x, y):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFinite("state became non-finite; reduce the time step or the box")


def euler_simulate(system, driving, z0, grid=None):
    """Explicit Euler path of the system along given driving increments."""
    grid = driving.grid if grid is None else grid
    if driving.dw.shape[1] != grid.n_steps:
        raise ValueError("driving path and grid lengths differ")
    n_paths = driving.n_paths
    xs = np.empty((n_paths, grid.n_steps + 1))
    ys = np.empty_like(xs)
    xs[:, 0], ys[:, 0] = _initial_state(z0, n_paths)
    dt = grid.dt
    with np.errstate(all="ignore"):
        for k in range(grid.n_steps):
            xs[:, k + 1], ys[:, k + 1] = _euler_step(
                system, xs[:, k], ys[:, k], dt, driving.db[:, k], driving.dqv[:, k])
    _check_finite(xs, ys)
    return StatePath(grid, xs, ys)


def simulate(system, policy, z0, grid, n_paths, seed, first_path=0, dw=None, guard=True):
    """Simulate under one control; returns ``(StatePath, DrivingPath)``.

    Feedback controls are co-simulated with the state; open-loop controls
    sample the driving path first.
    """
    if guard:
        check_step_size(system, grid)
    if dw is None:
        dw = wiener_increments(grid, seed, n_paths, first_path)
    if policy.is_feedback:
        src = EulerStateSource(system, z0, grid, dw.shape[0])
        times = grid.times
        theta = np.empty_like(dw)
        for k in range(grid.n_steps):
            x, y = src.current()
            theta[:, k] = policy.theta(k, times[k], x, y)
            src.advance(k, dw[:, k], theta[:, k])
        return src.path(), driving_from_noise(dw, theta, grid)
    driving = driving_from_noise(dw, open_loop_thetas(policy, grid, dw.shape[0]), grid)
    return euler_simulate(system, driving, z0, grid), driving


def _batches(n_paths, batch_size):
    start = 0
    while start < n_paths:
        stop = min(n_paths, start + batch_size)
        yield start, stop - start
        start = stop


def _eval_f(f, x, y):
    return np.broadcast_to(np.asarray(f(x, y), dtype=float), x.shape)


@dataclass(frozen=True)
class MCResult:
    mean: float
    se: float
    n_paths: int


def mc_expectation(system, policy, f, z0, grid, n_paths, seed, batch_size=DEFAULT_BATCH):
    """Mean and standard error of ``f(X_T, Y_T)`` under a single control."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    vals = []
    for first, nb in _batches(n_paths, batch_size):
        state, _ = simulate(system, policy, z0, grid, nb, seed, first_path=first)
        vals.append(_eval_f(f, *state.final))
    mean, se = mean_se(np.concatenate(vals))
    return MCResult(mean, se, n_paths)


@dataclass(frozen=True)
class ControlEstimate:
    label: str
    mean: float
    se: float


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    se: float
    per_control: list = field(default_factory=list)
    n_paths: int = 0
    dictionary: tuple = ()

    @property
    def argmax(self):
        return max(range(len(self.per_control)), key=lambda i: self.per_control[i].mean)


def semigroup_values(system, dictionary, fs, z0, grid, n_paths, seed,
                     batch_size=DEFAULT_BATCH):
    """Per-path terminal values for several test functions and controls.

    Returns an array ``(len(fs), len(dictionary), n_paths)``. All controls
    share the same Wiener increments (common random numbers).
    """
    if not dictionary:
        raise ValueError("dictionary must be nonempty")
    check_step_size(system, grid)
    out = np.empty((len(fs), len(dictionary), n_paths))
    for first, nb in _batches(n_paths, batch_size):
        dw = wiener_increments(grid, seed, nb, first)
        for c, policy in enumerate(dictionary):
            state, _ = simulate(system, policy, z0, grid, nb, seed, dw=dw, guard=False)
            xT, yT = state.final
            for i, f in enumerate(fs):
                out[i, c, first:first + nb] = _eval_f(f, xT, yT)
    return out


def _estimate_from_values(vals, dictionary):
    per = []
    for policy, v in zip(dictionary, vals):
        m, s = mean_se(v)
        per.append(ControlEstimate(policy.label, m, s))
    best = max(per, key=lambda e: e.mean)
    return SemigroupEstimate(best.mean, best.se, per, vals.shape[-1],
                             tuple(p.label for p in dictionary))


def semigroup_sup(system, dictionary, f, z0, grid, n_paths, seed, batch_size=DEFAULT_BATCH):
    """Dictionary lower bound of the nonlinear semigroup at ``z0``."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    vals = semigroup_values(system, dictionary, [f], z0, grid, n_paths, seed, batch_size)
    return _estimate_from_values(vals[0], dictionary)


def semigroup_sup_many(system, dictionary, fs, z0, grid, n_paths, seed,
                       batch_size=DEFAULT_BATCH):
    """Like :func:`semigroup_sup` for several functions on one set of paths."""
    vals = semigroup_values(system, dictionary, fs, z0, grid, n_paths, seed, batch_size)
    return [_estimate_from_values(v, dictionary) for v in vals]
