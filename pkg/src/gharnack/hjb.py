"""Finite-difference reference solver for the nonlinear semigroup.

Solves, backward from ``u(T) = f``,

    u_t + (A x + M y) u_x + b1 u_y + 2 G(b2 u_y + Q^2 u_yy / 2) = 0

on ``[-L, L]^2`` with an explicit monotone scheme: first derivatives are
upwinded per drift channel, the second derivative is centred, and the
supremum over the two extreme volatilities is taken node by node. There is no
diffusion in ``x`` and none is added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import CFLViolation, NonFinite, OutOfDomain
from .gcore import FeedbackPolicy, g_scalar


@dataclass(frozen=True, eq=False)
class HJBSolution:
    """Value and policy snapshots of an HJB solve.

    ``u[s]`` and ``policy[s]`` are stored at the times ``times[s]``
    (ascending, including 0 and T); ``u[0]`` is the value at time zero.
    """

    half_width: float
    xs: np.ndarray
    ys: np.ndarray
    times: np.ndarray
    u: np.ndarray
    policy: np.ndarray
    n_steps: int
    dt: float
    cfl_number: float
    sigma_lower: float
    sigma_upper: float

    @property
    def value0(self):
        return self.u[0]


def _upwind(u, v, h, axis):
    """Upwinded first derivative on interior nodes for velocity ``v``.

    Backward in time the value is transported against ``v``, so positive
    velocities use the forward difference.
    """
    if axis == 0:
        fwd = (u[2:, 1:-1] - u[1:-1, 1:-1]) / h
        bwd = (u[1:-1, 1:-1] - u[:-2, 1:-1]) / h
    else:
        fwd = (u[1:-1, 2:] - u[1:-1, 1:-1]) / h
        bwd = (u[1:-1, 1:-1] - u[1:-1, :-2]) / h
    return np.where(v > 0, fwd, bwd)


def _extrapolate_boundary(u):
    u[0, :] = 2 * u[1, :] - u[2, :]
    u[-1, :] = 2 * u[-2, :] - u[-3, :]
    u[:, 0] = 2 * u[:, 1] - u[:, 2]
    u[:, -1] = 2 * u[:, -2] - u[:, -3]


def _fill_policy_boundary(pol):
    pol[0, :], pol[-1, :] = pol[1, :], pol[-2, :]
    pol[:, 0], pol[:, -1] = pol[:, 1], pol[:, -2]


def stability_rate(system, params, half_width, nx, ny):
    """Largest ``sum |coefficient|`` of the explicit update (per unit dt)."""
    xs = np.linspace(-half_width, half_width, nx)
    ys = np.linspace(-half_width, half_width, ny)
    dx, dy = xs[1] - xs[0], ys[1] - ys[0]
    X, Y = np.meshgrid(xs[1:-1], ys[1:-1], indexing="ij")
    vx = np.abs(system.A * X + system.M * Y)
    b1 = np.abs(system.drift_dt(X, Y))
    b2 = np.abs(system.drift_qv(X, Y))
    rate = vx / dx + b1 / dy + params.sigma_upper ** 2 * (b2 / dy + system.Q ** 2 / dy ** 2)
    return float(np.max(rate))


def solve_hjb(system, params, f, T, half_width, nx, ny, n_steps=None, cfl=0.9,
              n_snapshots=65, clip=True):
    """Backward explicit solve; returns an :class:`HJBSolution`.

    ``n_steps=None`` picks the smallest step count with CFL number ``cfl``.
    An explicit ``n_steps`` violating the monotonicity condition raises
    :class:`CFLViolation`. The terminal function is clipped to its range on
    the grid and the solution is kept inside that range.
    """
    if nx < 4 or ny < 4:
        raise ValueError("need at least 4 nodes per direction")
    xs = np.linspace(-half_width, half_width, nx)
    ys = np.linspace(-half_width, half_width, ny)
    dx, dy = xs[1] - xs[0], ys[1] - ys[0]
    rate = stability_rate(system, params, half_width, nx, ny)
    if n_steps is None:
        n_steps = max(1, math.ceil(T * rate / cfl))
    dt = T / n_steps
    cfl_number = dt * rate
    if cfl_number > 1.0 + 1e-12:
        raise CFLViolation(
            f"explicit scheme not monotone: dt * rate = {cfl_number:.3f} > 1; "
            f"use n_steps >= {math.ceil(T * rate)}")

    X, Y = np.meshgrid(xs, ys, indexing="ij")
    u = np.array(np.broadcast_to(np.asarray(f(X, Y), dtype=float), X.shape))
    if not np.all(np.isfinite(u)):
        raise NonFinite("terminal function is not finite on the grid")
    lo, hi = float(u.min()), float(u.max())

    Xi, Yi = X[1:-1, 1:-1], Y[1:-1, 1:-1]
    vx = system.A * Xi + system.M * Yi
    b1 = np.broadcast_to(system.drift_dt(Xi, Yi), Xi.shape)
    b2 = np.broadcast_to(system.drift_qv(Xi, Yi), Xi.shape)
    half_q2 = 0.5 * system.Q ** 2
    upper = params.sigma_upper

    # snapshot step indices counted backward from T (step 0 is time T)
    n_snap = max(2, min(n_snapshots, n_steps + 1))
    snap_steps = np.unique(np.rint(np.linspace(0, n_steps, n_snap)).astype(int))
    snap_of_step = {int(s): i for i, s in enumerate(snap_steps)}
    us = np.empty((snap_steps.size, nx, ny))
    pols = np.empty((snap_steps.size, nx, ny))

    pol = np.full((nx, ny), upper)
    us[snap_of_step[0]] = u
    pols[snap_of_step[0]] = pol
    for step in range(1, n_steps + 1):
        uyy = (u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2]) / dy ** 2
        a = b2 * _upwind(u, b2, dy, 1) + half_q2 * uyy
        gen = vx * _upwind(u, vx, dx, 0) + b1 * _upwind(u, b1, dy, 1) \
            + 2.0 * g_scalar(a, params)
        new = u.copy()
        new[1:-1, 1:-1] = u[1:-1, 1:-1] + dt * gen
        _extrapolate_boundary(new)
        if clip:
            np.clip(new, lo, hi, out=new)
        u = new
        # the control acting on [t_k, t_{k+1}) is the one chosen at t_{k+1}
        # during this backward step; snapshot it at time t_k
        pol = np.empty((nx, ny))
        pol[1:-1, 1:-1] = np.where(a >= 0, upper, params.sigma_lower)
        _fill_policy_boundary(pol)
        if step in snap_of_step:
            us[snap_of_step[step]] = u
            pols[snap_of_step[step]] = pol
    if not np.all(np.isfinite(u)):
        raise NonFinite("HJB solution became non-finite")

    times = T - snap_steps * dt
    order = np.argsort(times)
    times = times[order]
    times[0], times[-1] = 0.0, T
    return HJBSolution(half_width, xs, ys, times, us[order], pols[order], n_steps, dt,
                       cfl_number, params.sigma_lower, params.sigma_upper)


def extract_policy(sol):
    """Feedback control table from the HJB snapshots (nearest-node lookup)."""
    return FeedbackPolicy(sol.times, sol.xs, sol.ys, sol.policy, label="hjb-feedback")


def hjb_value_at(sol, z, snapshot=0):
    """Bilinear interpolation of the stored value (time zero by default)."""
    x, y = float(z[0]), float(z[1])
    L = sol.half_width
    if not (-L <= x <= L and -L <= y <= L):
        raise OutOfDomain(f"point {z} is outside the box [-{L}, {L}]^2")
    xs, ys, u = sol.xs, sol.ys, sol.u[snapshot]
    i, tx = _cell(x, xs)
    j, ty = _cell(y, ys)
    if tx == 0.0 and ty == 0.0:
        return float(u[i, j])
    return float((1 - tx) * (1 - ty) * u[i, j] + tx * (1 - ty) * u[i + 1, j]
                 + (1 - tx) * ty * u[i, j + 1] + tx * ty * u[i + 1, j + 1])


def _cell(v, nodes):
    """Cell index and local coordinate; points on a node get an exact 0."""
    f = (v - nodes[0]) / (nodes[1] - nodes[0])
    r = round(f)
    if abs(f - r) < 1e-9:
        f = float(r)
    i = min(int(math.floor(f)), nodes.size - 2)
    return i, f - i
