"""G-expectation primitives.

The sublinear expectation is represented through volatility controls: for a
control ``theta`` valued in ``[sigma_lower, sigma_upper]`` the G-Brownian
motion is realised pathwise as ``B = int theta dW`` and the auxiliary process
as ``B' = int theta^{-1} dW``, so that ``<B, B'>_t = t`` under every control.
A G-expectation is the supremum of the classical expectations over controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .exceptions import MissingStateSource, OutOfBand

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


# --------------------------------------------------------------------------
# parameters and generating functions


@dataclass(frozen=True)
class GParams:
    """Volatility band of a one-dimensional G-Brownian motion."""

    sigma_lower: float
    sigma_upper: float

    def __post_init__(self):
        lo, hi = float(self.sigma_lower), float(self.sigma_upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("volatility bounds must be finite")
        if not 0.0 < lo < hi:
            raise ValueError(
                f"need 0 < sigma_lower < sigma_upper, got ({lo}, {hi})")
        object.__setattr__(self, "sigma_lower", lo)
        object.__setattr__(self, "sigma_upper", hi)

    @property
    def lambda0(self):
        """Ellipticity constant, the scalar ``sigma_lower**2``."""
        return self.sigma_lower ** 2

    def contains(self, gamma, atol=0.0):
        g = np.asarray(gamma, dtype=float)
        return bool(np.all((g >= self.sigma_lower - atol) & (g <= self.sigma_upper + atol)))


def g_scalar(a, params):
    """G(a) = sigma_upper^2 a^+ / 2 - sigma_lower^2 a^- / 2 (vectorised)."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * params.sigma_upper ** 2 * np.maximum(a, 0.0) \
        - 0.5 * params.sigma_lower ** 2 * np.maximum(-a, 0.0)
    return out if out.ndim else float(out)


def g_tilde_scalar(a, params):
    """Generating function of the auxiliary process B' (band inverted)."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * params.sigma_lower ** -2 * np.maximum(a, 0.0) \
        - 0.5 * params.sigma_upper ** -2 * np.maximum(-a, 0.0)
    return out if out.ndim else float(out)


def g_normal_oracle(shape, t, params):
    """Closed-form G-expectation of phi(B_t) for simple convex/concave phi.

    ``square`` and ``abs`` are convex (supremum at the upper volatility),
    ``neg_square`` is concave (lower volatility), ``identity`` is zero.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if shape == "square":
        return params.sigma_upper ** 2 * t
    if shape == "neg_square":
        return -params.sigma_lower ** 2 * t
    if shape == "identity":
        return 0.0
    if shape == "abs":
        return params.sigma_upper * math.sqrt(2.0 * t / math.pi)
    raise ValueError(f"unknown oracle shape {shape!r}")


# --------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive and finite")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t


# --------------------------------------------------------------------------
# RNG: one independent stream per path


def splitmix64(x):
    """SplitMix64 finaliser applied to ``x + golden_gamma`` (uint64 wrap)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(_GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def path_seeds(seed, first_path, n_paths):
    """Per-path stream seeds: the SplitMix64 sequence started at ``seed``.

    Path ``i`` gets ``splitmix64(seed + i * golden_gamma)``, i.e. the i-th
    output of a SplitMix64 generator seeded with ``seed``. Paths can be
    generated in any order or batch split with identical results.
    """
    seed = int(seed) & _MASK64
    idx = np.arange(first_path, first_path + n_paths, dtype=np.uint64)
    with np.errstate(over="ignore"):
        states = np.uint64(seed) + idx * np.uint64(_GOLDEN_GAMMA)
    return splitmix64(states)


def standard_normals(seed, n_draws, n_paths, first_path=0):
    """Array ``(n_paths, n_draws)`` of N(0,1) draws, one PCG64 stream per path."""
    out = np.empty((n_paths, n_draws))
    for row, s in enumerate(path_seeds(seed, first_path, n_paths)):
        out[row] = np.random.Generator(np.random.PCG64(int(s))).standard_normal(n_draws)
    return out


def wiener_increments(grid, seed, n_paths, first_path=0):
    return math.sqrt(grid.dt) * standard_normals(seed, grid.n_steps, n_paths, first_path)


# --------------------------------------------------------------------------
# volatility controls


class ControlPolicy:
    """A volatility control; subclasses implement :meth:`theta`."""

    label = "policy"
    is_feedback = False

    def theta(self, k, t, x=None, y=None):
        raise NotImplementedError

    def band_values(self):
        """All values the policy can take (used for band validation)."""
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantPolicy(ControlPolicy):
    gamma: float
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", f"const({self.gamma:g})")

    def theta(self, k, t, x=None, y=None):
        return self.gamma

    def band_values(self):
        return np.array([self.gamma])


@dataclass(frozen=True, eq=False)
class PiecewiseConstantPolicy(ControlPolicy):
    """One control value per time step of the grid it was built for."""

    gammas: np.ndarray
    label: str = "piecewise"

    def __post_init__(self):
        object.__setattr__(self, "gammas", np.asarray(self.gammas, dtype=float).ravel())

    def theta(self, k, t, x=None, y=None):
        return self.gammas[k]

    def band_values(self):
        return self.gammas


@dataclass(frozen=True, eq=False)
class FeedbackPolicy(ControlPolicy):
    """Markov policy table ``table[t_index, i, j]`` on a rectangular grid.

    Evaluation is nearest-node in time and space (clamped at the edges) and
    uses the state at the start of the step, so the control is adapted.
    """

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    table: np.ndarray
    label: str = "feedback"
    is_feedback = True

    def _nearest(self, grid, v):
        step = grid[1] - grid[0]
        idx = np.rint((np.asarray(v, dtype=float) - grid[0]) / step).astype(np.intp)
        return np.clip(idx, 0, grid.size - 1)

    def theta(self, k, t, x=None, y=None):
        if x is None or y is None:
            raise MissingStateSource("feedback policy needs the current state")
        ti = int(np.argmin(np.abs(self.times - t)))
        return self.table[ti][self._nearest(self.xs, x), self._nearest(self.ys, y)]

    def band_values(self):
        return np.unique(self.table)


_NAMED = ("lower", "upper", "mid", "bang-bang", "switch-down", "switch-up")


def make_policy(spec, params, grid):
    """Build and validate a control from a description.

    ``spec`` may be a number (constant), a sequence (piecewise constant,
    stretched onto the grid's steps), one of the names ``lower``, ``upper``,
    ``mid``, ``bang-bang`` (alternating per step), ``switch-down`` /
    ``switch-up`` (one switch at T/2), a dict ``{"kind": ..., ...}``, or an
    existing :class:`ControlPolicy`.
    """
    lo, hi = params.sigma_lower, params.sigma_upper
    n = grid.n_steps
    if isinstance(spec, ControlPolicy):
        policy = spec
    elif isinstance(spec, str):
        if spec == "lower":
            policy = ConstantPolicy(lo, label="lower")
        elif spec == "upper":
            policy = ConstantPolicy(hi, label="upper")
        elif spec == "mid":
            policy = ConstantPolicy(0.5 * (lo + hi), label="mid")
        elif spec == "bang-bang":
            g = np.where(np.arange(n) % 2 == 0, lo, hi)
            policy = PiecewiseConstantPolicy(g, label="bang-bang")
        elif spec in ("switch-down", "switch-up"):
            first = np.arange(n) < n / 2
            a, b = (hi, lo) if spec == "switch-down" else (lo, hi)
            policy = PiecewiseConstantPolicy(np.where(first, a, b), label=spec)
        else:
            raise ValueError(f"unknown policy name {spec!r}; expected one of {_NAMED}")
    elif isinstance(spec, dict):
        kind = spec.get("kind")
        if kind == "constant":
            policy = ConstantPolicy(float(spec["value"]), label=spec.get("label", ""))
        elif kind == "piecewise":
            return make_policy(list(spec["values"]), params, grid)
        elif kind == "named":
            return make_policy(spec["name"], params, grid)
        else:
            raise ValueError(f"unknown policy kind {kind!r}")
    elif np.ndim(spec) == 0:
        policy = ConstantPolicy(float(spec))
    else:
        vals = np.asarray(spec, dtype=float).ravel()
        if vals.size == 0:
            raise ValueError("piecewise policy needs at least one value")
        idx = (np.arange(n) * vals.size) // n
        policy = PiecewiseConstantPolicy(vals[idx])

    if isinstance(policy, PiecewiseConstantPolicy) and policy.gammas.size != n:
        raise ValueError("piecewise policy length does not match the grid")
    if not params.contains(policy.band_values()):
        bad = policy.band_values()
        raise OutOfBand(
            f"control values in [{bad.min():g}, {bad.max():g}] leave the band "
            f"[{lo:g}, {hi:g}]")
    return policy


def make_dictionary(specs, params, grid):
    return [make_policy(s, params, grid) for s in specs]


# --------------------------------------------------------------------------
# driving paths


@dataclass(frozen=True, eq=False)
class DrivingPath:
    """Batch of discretised (W, B, <B>, B', <B'>) realisations.

    Arrays of increments have shape ``(n_paths, n_steps)``; cumulative
    processes returned by the properties have shape ``(n_paths, n_steps+1)``
    and start at zero.
    """

    grid: TimeGrid
    dw: np.ndarray
    theta: np.ndarray
    db: np.ndarray
    dqv: np.ndarray
    dbprime: np.ndarray
    dqvprime: np.ndarray

    @property
    def n_paths(self):
        return self.dw.shape[0]

    @staticmethod
    def _cum(inc):
        out = np.zeros((inc.shape[0], inc.shape[1] + 1))
        np.cumsum(inc, axis=1, out=out[:, 1:])
        return out

    @property
    def w(self):
        return self._cum(self.dw)

    @property
    def b(self):
        return self._cum(self.db)

    @property
    def bprime(self):
        return self._cum(self.dbprime)

    @property
    def qv(self):
        # summing theta^2 before scaling keeps constant controls exact
        g = self.grid
        return self._cum(self.theta ** 2) * g.horizon / g.n_steps

    @property
    def qvprime(self):
        g = self.grid
        return self._cum(1.0 / self.theta ** 2) * g.horizon / g.n_steps

    def cross_variation(self):
        """Deterministic <B, B'>_T = sum theta * theta^{-1} dt per path."""
        return np.sum(self.theta * (1.0 / self.theta), axis=1) * self.grid.dt

    def realized_cross_variation(self):
        return np.sum(self.db * self.dbprime, axis=1)

    def path(self, i):
        """Single-path view (still 2-d with one row)."""
        s = slice(i, i + 1)
        return DrivingPath(self.grid, self.dw[s], self.theta[s], self.db[s],
                           self.dqv[s], self.dbprime[s], self.dqvprime[s])


def step_increments(dw, theta, dt):
    """(dB, d<B>, dB', d<B'>) for one step or a whole array of steps."""
    theta = np.asarray(theta, dtype=float)
    return theta * dw, theta * theta * dt, dw / theta, dt / (theta * theta)


def driving_from_noise(dw, theta, grid):
    """Assemble a :class:`DrivingPath` from Wiener increments and controls."""
    dw = np.atleast_2d(np.asarray(dw, dtype=float))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), dw.shape).copy()
    if dw.shape[1] != grid.n_steps:
        raise ValueError("increment array does not match the time grid")
    db, dqv, dbp, dqvp = step_increments(dw, theta, grid.dt)
    return DrivingPath(grid, dw, theta, db, dqv, dbp, dqvp)


def open_loop_thetas(policy, grid, n_paths):
    times = grid.times
    vals = np.array([policy.theta(k, times[k]) for k in range(grid.n_steps)], dtype=float)
    return np.broadcast_to(vals, (n_paths, grid.n_steps))


class StateSource(Protocol):
    """Co-simulated state used to evaluate feedback controls."""

    def current(self) -> tuple[np.ndarray, np.ndarray]: ...

    def advance(self, k: int, dw: np.ndarray, theta: np.ndarray) -> None: ...


def sample_driving(policy, grid, seed, n_paths=1, state_source=None, first_path=0,
                   dw=None):
    """Sample driving paths under a control.

    Deterministic given ``(policy, grid, seed, first_path)``. For a feedback
    policy a :class:`StateSource` must be supplied; it is queried for the
    state at the start of every step and advanced with the step's noise.
    ``dw`` overrides the sampled Wiener increments (e.g. zero noise).
    """
    if dw is None:
        dw = wiener_increments(grid, seed, n_paths, first_path)
    if not policy.is_feedback:
        return driving_from_noise(dw, open_loop_thetas(policy, grid, dw.shape[0]), grid)
    if state_source is None:
        raise MissingStateSource("feedback policies need a co-simulated state source")
    times = grid.times
    theta = np.empty_like(dw)
    for k in range(grid.n_steps):
        x, y = state_source.current()
        theta[:, k] = policy.theta(k, times[k], x, y)
        state_source.advance(k, dw[:, k], theta[:, k])
    return driving_from_noise(dw, theta, grid)


def count_step_violations(driving, params):
    """Number of steps breaking the quadratic-variation step bounds."""
    dt = driving.grid.dt
    lo, hi = params.sigma_lower, params.sigma_upper
    bad = (driving.dqv < lo * lo * dt) | (driving.dqv > hi * hi * dt)
    bad |= (driving.dqvprime < dt / (hi * hi)) | (driving.dqvprime > dt / (lo * lo))
    return int(np.count_nonzero(bad))
