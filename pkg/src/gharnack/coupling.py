"""Coupling by change of measure for the Hamiltonian G-SDE.

A second process is started at ``z + h`` and driven by the same noise plus a
deterministic correction ``gamma1'(t) dt`` in the momentum equation, with the
drift frozen at the base process. The correction is chosen so the two
processes meet at time ``T``. The drift mismatch ``(Phi1, Phi2)`` is removed
by a Girsanov density written on the pair (B', B), where ``B' = int
theta^{-1} dW`` has ``<B, B'>_t = t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._stats import mean_se
from .exceptions import DegenerateCoupling, NonFinite, OverflowDetected
from .gcore import TimeGrid, driving_from_noise, step_increments, wiener_increments
from .gsde import StatePath, _batches, _initial_state, check_step_size, simulate

OVERFLOW_GUARD = 700.0


def sigma_T(T, params):
    """Time factor of the Harnack exponent.

    sigma_lower^-2 T (1/T + 1/T^2 + 1 + T)^2 + sigma_upper^2 T (1 + T)^2
    """
    if T <= 0:
        raise ValueError("T must be positive")
    return params.sigma_lower ** -2 * T * (1 / T + 1 / T ** 2 + 1 + T) ** 2 \
        + params.sigma_upper ** 2 * T * (1 + T) ** 2


@lru_cache(maxsize=None)
def _leggauss(n):
    return np.polynomial.legendre.leggauss(n)


def _gl_nodes(a, b, n):
    """Gauss-Legendre nodes and weights on [a, b] (vectorised over ``b``)."""
    xi, w = _leggauss(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    return a + half * (xi + 1.0), half * w


def lambda1(A, M, T, quad_points=64):
    """Gram integral int_0^T s(T-s)/T^2 exp(-2sA) M^2 ds by Gauss-Legendre."""
    if T <= 0:
        raise ValueError("T must be positive")
    s, w = _gl_nodes(0.0, T, quad_points)
    val = float(np.sum(w * s * (T - s) / T ** 2 * np.exp(-2 * s * A)) * M * M)
    if abs(val) < 1e-14:
        raise DegenerateCoupling("coupling Gram integral vanishes (is M zero?)")
    return val


@dataclass(frozen=True, eq=False)
class CouplingSchedule:
    """Deterministic coupling functions sampled on a time grid.

    ``theta1[k]`` is the continuous-time gap (X~ - X, Y~ - Y) at ``t_k``;
    ``theta_hat[k]`` is the gap produced by the Euler recursion, which the
    coupled simulation reproduces node by node.
    """

    A: float
    M: float
    T: float
    h: tuple
    lambda1: float
    kappa: float
    times: np.ndarray
    v1: np.ndarray
    alpha1: np.ndarray
    gamma1: np.ndarray
    gamma1prime: np.ndarray
    theta1: np.ndarray
    theta_hat: np.ndarray

    @property
    def h_norm(self):
        return math.hypot(*self.h)

    def gamma1_at(self, s):
        return _gamma1(s, self.A, self.M, self.T, self.h[1], self.kappa)

    def gamma1prime_at(self, s):
        return _gamma1prime(s, self.A, self.M, self.T, self.h[1], self.kappa)


def _gamma1(s, A, M, T, h2, kappa):
    s = np.asarray(s, dtype=float)
    return (T - s) / T * h2 - s * (T - s) / T ** 2 * M * np.exp(-s * A) * kappa


def _gamma1prime(s, A, M, T, h2, kappa):
    # d/ds of the polynomial prefactor and of exp(-sA), no numerical differencing
    s = np.asarray(s, dtype=float)
    poly = s * (T - s) / T ** 2
    dpoly = (T - 2 * s) / T ** 2
    return -h2 / T - M * kappa * np.exp(-s * A) * (dpoly - A * poly)


def build_schedule(A, M, T, h, grid, quad_points=64):
    """Coupling schedule for shift ``h`` on ``grid`` (cached, read-only)."""
    if abs(grid.horizon - T) > 1e-12 * max(1.0, T):
        raise ValueError("grid horizon and T differ")
    return _build_schedule(float(A), float(M), float(T), (float(h[0]), float(h[1])),
                           grid.n_steps, int(quad_points))


@lru_cache(maxsize=256)
def _build_schedule(A, M, T, h, n_steps, quad_points):
    h1, h2 = h
    lam = lambda1(A, M, T, quad_points)
    u, w = _gl_nodes(0.0, T, quad_points)
    drift_part = float(np.sum(w * (T - u) / T * np.exp(-u * A))) * M * h2
    kappa = (h1 + drift_part) / lam

    grid = TimeGrid(T, n_steps)
    t = grid.times
    v1 = (T - t) / T
    alpha1 = -t * (T - t) / T ** 2 * M * np.exp(-t * A) * kappa
    gamma1 = v1 * h2 + alpha1
    gamma1prime = _gamma1prime(t, A, M, T, h2, kappa)

    # x-component: e^{At} h1 + int_0^t e^{(t-u)A} M gamma1(u) du
    uu, ww = _gl_nodes(np.zeros_like(t), t, quad_points)
    conv = np.sum(ww * np.exp((t[:, None] - uu) * A) * M
                  * _gamma1(uu, A, M, T, h2, kappa), axis=1)
    theta1 = np.stack([np.exp(A * t) * h1 + conv, gamma1], axis=1)
    theta1[0] = (h1, h2)

    dt = grid.dt
    theta_hat = np.empty((n_steps + 1, 2))
    theta_hat[0] = (h1, h2)
    for k in range(n_steps):
        dx, dy = theta_hat[k]
        theta_hat[k + 1] = (dx + (A * dx + M * dy) * dt, dy + gamma1prime[k] * dt)

    for arr in (t, v1, alpha1, gamma1, gamma1prime, theta1, theta_hat):
        arr.flags.writeable = False
    return CouplingSchedule(A, M, T, h, lam, kappa, t, v1, alpha1, gamma1, gamma1prime,
                            theta1, theta_hat)


def schedule_bound_constants(A, M, Ts, h, n_steps=256, quad_points=64):
    """Empirical constants of the schedule bounds over a grid of horizons.

    For each T reports ``T |1/Lambda1|``, ``max|gamma1'| / ((1/T + 1/T^2)|h|)``
    and ``max|Theta1| / ((1 + T)|h|)``.
    """
    hn = math.hypot(*h)
    rows = []
    for T in Ts:
        sch = build_schedule(A, M, T, h, TimeGrid(T, n_steps), quad_points)
        rows.append({
            "T": T,
            "inv_lambda_times_T": T / abs(sch.lambda1),
            "gamma_prime_ratio": float(np.max(np.abs(sch.gamma1prime))) / ((1 / T + 1 / T ** 2) * hn),
            "theta_ratio": float(np.max(np.linalg.norm(sch.theta1, axis=1))) / ((1 + T) * hn),
        })
    return rows


# --------------------------------------------------------------------------
# coupled simulation


@dataclass(frozen=True, eq=False)
class CoupledPaths:
    base: StatePath
    shifted: StatePath
    phi1: np.ndarray
    phi2: np.ndarray
    driving: object
    schedule: CouplingSchedule

    def gap(self):
        """(X~ - X, Y~ - Y) per path and node, shape (n_paths, n+1, 2)."""
        return np.stack([self.shifted.x - self.base.x, self.shifted.y - self.base.y], axis=2)

    def identity_error(self):
        """Largest deviation of the gap from the discrete schedule.

        Relative to the largest state or schedule magnitude on the path,
        which is the scale of the rounding in the two recursions.
        """
        gap = self.gap()
        err = np.max(np.abs(gap - self.schedule.theta_hat[None]))
        scale = max(np.max(np.abs(self.base.x)), np.max(np.abs(self.base.y)),
                    np.max(np.abs(self.shifted.x)), np.max(np.abs(self.shifted.y)),
                    np.max(np.abs(self.schedule.theta_hat)), 1e-300)
        return float(err / scale)


def _coupled_run(system, z, schedule, grid, dw, theta_of, tilt_q=None):
    n_paths = dw.shape[0]
    n = grid.n_steps
    dt = grid.dt
    A, M, Q = system.A, system.M, system.Q
    h1, h2 = schedule.h
    times = grid.times
    x = np.empty((n_paths, n + 1))
    y, xt, yt = np.empty_like(x), np.empty_like(x), np.empty_like(x)
    x[:, 0], y[:, 0] = _initial_state(z, n_paths)
    xt[:, 0], yt[:, 0] = x[:, 0] + h1, y[:, 0] + h2
    phi1 = np.empty((n_paths, n))
    phi2 = np.empty_like(phi1)
    theta = np.empty_like(phi1)
    dw_used = np.array(dw, dtype=float, copy=True)
    gp = schedule.gamma1prime
    with np.errstate(all="ignore"):
        for k in range(n):
            xk, yk, xtk, ytk = x[:, k], y[:, k], xt[:, k], yt[:, k]
            th = np.broadcast_to(np.asarray(theta_of(k, times[k], xk, yk), dtype=float), (n_paths,))
            theta[:, k] = th
            b1, b2 = system.drift_dt(xk, yk), system.drift_qv(xk, yk)
            phi1[:, k] = (b1 - system.drift_dt(xtk, ytk) + gp[k]) / Q
            phi2[:, k] = (b2 - system.drift_qv(xtk, ytk)) / Q
            if tilt_q is not None:
                dw_used[:, k] -= tilt_q * (phi1[:, k] / th + phi2[:, k] * th) * dt
            db, dqv, _, _ = step_increments(dw_used[:, k], th, dt)
            x[:, k + 1] = xk + (A * xk + M * yk) * dt
            y[:, k + 1] = yk + b1 * dt + b2 * dqv + Q * db
            xt[:, k + 1] = xtk + (A * xtk + M * ytk) * dt
            yt[:, k + 1] = ytk + b1 * dt + b2 * dqv + Q * db + gp[k] * dt
            if not (np.all(np.isfinite(x[:, k + 1])) and np.all(np.isfinite(yt[:, k + 1]))):
                raise NonFinite("coupled state became non-finite")
    driving = driving_from_noise(dw_used, theta, grid)
    return CoupledPaths(StatePath(grid, x, y), StatePath(grid, xt, yt), phi1, phi2,
                        driving, schedule)


def _check_schedule(schedule, grid):
    if schedule.times.size != grid.n_steps + 1 or abs(schedule.T - grid.horizon) > 1e-12:
        raise ValueError("schedule and grid do not match")


def coupled_simulate(system, driving, z, schedule, grid=None):
    """Base and shifted paths along one batch of driving increments."""
    grid = driving.grid if grid is None else grid
    _check_schedule(schedule, grid)
    theta = driving.theta
    return _coupled_run(system, z, schedule, grid, driving.dw,
                        lambda k, t, x, y: theta[:, k])


def _theta_fn(policy):
    return lambda k, t, x, y: policy.theta(k, t, x, y)


def coupled_sample(system, policy, z, schedule, grid, n_paths, seed, first_path=0,
                   tilt_q=None):
    """Coupled paths under a control; feedback controls read the base state.

    With ``tilt_q`` the Wiener increments are drawn under the measure with
    density ``exp(-q I - q^2 Qd / 2)`` (the tilted density) instead of P.
    """
    _check_schedule(schedule, grid)
    dw = wiener_increments(grid, seed, n_paths, first_path)
    return _coupled_run(system, z, schedule, grid, dw, _theta_fn(policy), tilt_q)


# --------------------------------------------------------------------------
# densities


@dataclass(frozen=True, eq=False)
class DensityPath:
    """Cumulative stochastic-integral and quadratic terms of a density.

    ``R_k = exp(-I_k - Qd_k / 2)``; both terms already include the tilt
    (``q`` on the integral, ``q^2`` on the quadratic term).
    """

    integral: np.ndarray
    quadratic: np.ndarray
    q: float

    @property
    def log_r(self):
        return -self.integral - 0.5 * self.quadratic

    @property
    def r(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_r)

    @property
    def final(self):
        return self.r[:, -1]


def _as_steps(g, n_paths, n):
    if g is None:
        return np.zeros((n_paths, n))
    g = np.asarray(g, dtype=float)
    if g.ndim == 0:
        return np.full((n_paths, n), float(g))
    if g.ndim == 1:
        g = np.broadcast_to(g, (n_paths, g.size))
    return np.broadcast_to(g[:, :n], (n_paths, n))


def _cum0(a):
    out = np.zeros((a.shape[0], a.shape[1] + 1))
    np.cumsum(a, axis=1, out=out[:, 1:])
    return out


def quadratic_increments(g1, g2, driving):
    """Per-step g1^2 d<B'> + g2^2 d<B> + 2 g1 g2 dt."""
    return g1 * g1 * driving.dqvprime + g2 * g2 * driving.dqv + 2.0 * g1 * g2 * driving.grid.dt


def girsanov_exponent(g1, g2, driving, q=1.0):
    """Density of the shift ``B -> B + int g1 dt + int g2 d<B>``.

    ``g1``/``g2`` hold left-point (adapted) values per step; ``q`` tilts the
    density to ``exp(-q int <g, d(B', B)> - q^2/2 int (...))``.
    """
    n_paths, n = driving.dw.shape
    g1 = _as_steps(g1, n_paths, n)
    g2 = _as_steps(g2, n_paths, n)
    integral = q * _cum0(g1 * driving.dbprime + g2 * driving.db)
    quadratic = q * q * _cum0(quadratic_increments(g1, g2, driving))
    return DensityPath(integral, quadratic, float(q))


def coupling_density(paths, q=1.0):
    return girsanov_exponent(paths.phi1, paths.phi2, paths.driving, q)


def phi_quadratic_form(paths, params):
    """Quadratic variation of the drift correction and its ratio to Sigma(T)|h|^2."""
    value = np.sum(quadratic_increments(paths.phi1, paths.phi2, paths.driving), axis=1)
    scale = sigma_T(paths.schedule.T, params) * paths.schedule.h_norm ** 2
    ratio = value / scale if scale > 0 else np.zeros_like(value)
    return value, ratio


@dataclass(frozen=True)
class DictionaryMoment:
    value: float
    se: float
    per_control: list
    method: str


def density_moment(system, dictionary, z, h, grid, q, n_paths, seed, method="tilted",
                   quad_points=64, batch_size=4096):
    """Dictionary supremum of E[R1(T)^q] for the coupling with shift ``h``.

    ``method="direct"`` averages R1^q over paths drawn under P.
    ``method="tilted"`` draws paths under the tilted density and averages
    ``exp(q(q-1)/2 * Qd1)``, which has the same expectation because
    ``R1^q = R~ * exp(q(q-1)/2 * Qd1)`` pathwise; it is exact (zero variance)
    whenever the drift correction is deterministic.
    """
    schedule = build_schedule(system.A, system.M, grid.horizon, h, grid, quad_points)
    per = []
    for policy in dictionary:
        vals = []
        for first, nb in _batches(n_paths, batch_size):
            if method == "tilted":
                cp = coupled_sample(system, policy, z, schedule, grid, nb, seed, first, tilt_q=q)
                qd = np.sum(quadratic_increments(cp.phi1, cp.phi2, cp.driving), axis=1)
                vals.append(np.exp(0.5 * q * (q - 1.0) * qd))
            elif method == "direct":
                cp = coupled_sample(system, policy, z, schedule, grid, nb, seed, first)
                vals.append(coupling_density(cp, q=1.0).final ** q)
            else:
                raise ValueError(f"unknown method {method!r}")
        m, s = mean_se(np.concatenate(vals))
        per.append((policy.label, m, s))
    best = max(per, key=lambda r: r[1])
    return DictionaryMoment(best[1], best[2], per, method)


# --------------------------------------------------------------------------
# Novikov-type exponential moments


@dataclass(frozen=True)
class NovikovEstimate:
    value: float
    se: float
    per_control: list
    max_exponent: float
    delta: float

    @property
    def finite(self):
        return math.isfinite(self.value)


def _eval_g(g, x, y):
    if g is None:
        return np.zeros_like(x)
    return np.broadcast_to(np.asarray(g(x, y), dtype=float), x.shape)


def novikov_estimate(g1, g2, system, dictionary, delta, z0, grid, n_paths, seed,
                     batch_size=4096, guard=OVERFLOW_GUARD):
    """Dictionary estimate of E exp{(1/2 + delta) int (g1^2 d<B'> + g2^2 d<B> + 2 g1 g2 dt)}.

    ``g1``/``g2`` are functions of the state evaluated along simulated paths
    of ``system`` started at ``z0`` (a point, or one row per path). Raises :class:`OverflowDetected` if any path's exponent
    exceeds ``guard``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    check_step_size(system, grid)
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim == 2 and z0.shape[0] != n_paths:
        raise ValueError("per-path initial states must have one row per path")
    per = []
    max_exp = 0.0
    for policy in dictionary:
        vals = []
        for first, nb in _batches(n_paths, batch_size):
            start = z0 if z0.ndim == 1 else z0[first:first + nb]
            state, driving = simulate(system, policy, start, grid, nb, seed, first, guard=False)
            xs, ys = state.x[:, :-1], state.y[:, :-1]
            a1, a2 = _eval_g(g1, xs, ys), _eval_g(g2, xs, ys)
            expo = (0.5 + delta) * np.sum(quadratic_increments(a1, a2, driving), axis=1)
            top = float(np.max(expo))
            max_exp = max(max_exp, top)
            if top > guard:
                raise OverflowDetected(
                    f"Novikov exponent {top:.1f} exceeds {guard:g} under control "
                    f"{policy.label}", max_exponent=top)
            vals.append(np.exp(expo))
        m, s = mean_se(np.concatenate(vals))
        per.append((policy.label, m, s))
    best = max(per, key=lambda r: r[1])
    return NovikovEstimate(best[1], best[2], per, max_exp, float(delta))
