"""Estimator wrappers: ``fit`` fixes a system and test function, ``predict``
evaluates the nonlinear semigroup at a batch of initial points.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .gcore import GParams, TimeGrid, make_dictionary
from .gsde import semigroup_sup
from .hjb import hjb_value_at, solve_hjb


class _SemigroupBase(BaseEstimator):
    def _prepare(self, system, f):
        if not callable(f):
            raise TypeError("f must be callable as f(x, y)")
        self.params_ = GParams(self.sigma_lower, self.sigma_upper)
        self.system_ = system
        self.f_ = f

    def _points(self, Z):
        check_is_fitted(self, "params_")
        return check_array(Z, ensure_min_features=2, dtype=float)


class MCSemigroup(_SemigroupBase):
    """Monte Carlo dictionary estimate of the nonlinear semigroup.

    ``predict`` returns the estimates; the standard errors of the last call
    are kept in ``se_``.
    """

    def __init__(self, sigma_lower=1.0, sigma_upper=2.0, T=1.0, n_steps=64,
                 dictionary=("lower", "upper", "mid", "bang-bang", "switch-down"),
                 n_paths=10_000, seed=0):
        self.sigma_lower = sigma_lower
        self.sigma_upper = sigma_upper
        self.T = T
        self.n_steps = n_steps
        self.dictionary = dictionary
        self.n_paths = n_paths
        self.seed = seed

    def fit(self, system, f):
        self._prepare(system, f)
        self.grid_ = TimeGrid(self.T, self.n_steps)
        self.dictionary_ = make_dictionary(self.dictionary, self.params_, self.grid_)
        return self

    def predict(self, Z):
        Z = self._points(Z)
        out, se = np.empty(len(Z)), np.empty(len(Z))
        for i, z in enumerate(Z):
            est = semigroup_sup(self.system_, self.dictionary_, self.f_, tuple(z[:2]),
                                self.grid_, self.n_paths, self.seed)
            out[i], se[i] = est.value, est.se
        self.se_ = se
        return out


class HJBSemigroup(_SemigroupBase):
    """Finite-difference solution of the HJB equation, interpolated at points."""

    def __init__(self, sigma_lower=1.0, sigma_upper=2.0, T=1.0, half_width=6.0, nx=161,
                 ny=161, cfl=0.9):
        self.sigma_lower = sigma_lower
        self.sigma_upper = sigma_upper
        self.T = T
        self.half_width = half_width
        self.nx = nx
        self.ny = ny
        self.cfl = cfl

    def fit(self, system, f):
        self._prepare(system, f)
        self.solution_ = solve_hjb(system, self.params_, f, self.T, self.half_width,
                                   self.nx, self.ny, cfl=self.cfl)
        return self

    def predict(self, Z):
        Z = self._points(Z)
        return np.array([hjb_value_at(self.solution_, z[:2]) for z in Z])
