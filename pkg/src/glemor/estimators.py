"""scikit-learn style wrappers around the two reduction routes.

``fit`` takes a :class:`~glemor.sls.SwitchedSystem` (there is no target).
``transform`` maps full states (one per row) to reduced coordinates and
``predict`` simulates the reduced model for a switching signal and input.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .balancing import (
    gramians_monolithic,
    pbr_gramians,
    pbr_reduce,
    perturb_gramians,
    reduce,
    shift_gramian,
    square_root_projectors,
)
from .certificates import PbrBoundEvaluator, bt_error_bound
from .gle import GleOptions
from .sls import SwitchedSystem, simulate


def _check_system(system):
    if not isinstance(system, SwitchedSystem):
        raise TypeError(f"expected a SwitchedSystem, got {type(system).__name__}")
    return system


def _check_states(X, n):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n:
        raise ValueError(f"expected states with {n} columns, got shape {X.shape}")
    return X


class BalancedTruncation(TransformerMixin, BaseEstimator):
    """One square-root basis for all modes, from the GLE Gramians.

    With ``shift=True`` both Gramians are shifted so that every mode's LMI
    holds (dissipative modes only), which makes ``error_bound`` a certified
    bound. That guarantee needs the unscaled equation, hence the default
    ``contraction="exact"`` (limited to ``n <= 400``); ``None`` rescales.
    """

    def __init__(self, order=10, tol=1e-8, shift=True, contraction="exact"):
        self.order = order
        self.tol = tol
        self.shift = shift
        self.contraction = contraction

    def fit(self, system, y=None):
        system = _check_system(system)
        g = gramians_monolithic(system, self.tol, GleOptions(contraction=self.contraction))
        P, Q = g.P, g.Q
        self.shift_ = 0.0
        if self.shift:
            P, self.shift_ = shift_gramian(P, self.tol, system.A)
            Q, _ = shift_gramian(Q, self.tol, system.A)
        self.gramians_ = g
        self.projection_ = square_root_projectors(P, Q, self.order)
        self.hankel_singular_values_ = self.projection_.spectrum()
        self.reduced_system_ = reduce(system, self.projection_)
        self.n_features_in_ = system.n
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        return _check_states(X, self.n_features_in_) @ self.projection_.W

    def inverse_transform(self, Xr):
        check_is_fitted(self, "projection_")
        return np.atleast_2d(np.asarray(Xr, dtype=float)) @ self.projection_.V.T

    def predict(self, signal, u, horizon, **sim_kwargs):
        """Reduced output samples (one row per time) under ``signal`` and ``u``."""
        check_is_fitted(self, "reduced_system_")
        return simulate(self.reduced_system_, signal, u, horizon, **sim_kwargs).y

    def error_bound(self):
        """Twice the sum of the distinct neglected Hankel values."""
        check_is_fitted(self, "hankel_singular_values_")
        return bt_error_bound(self.hankel_singular_values_, self.order)


class PiecewiseBalancedReduction(TransformerMixin, BaseEstimator):
    """Per-mode balancing with state maps at switching times.

    ``floor`` defaults to ``tol``. ``inner`` is passed to the GLE solver and
    the perturbation (``"dense"`` suits stiff problems of moderate size).
    """

    def __init__(self, order=30, tol=1e-8, perturb=True, perturb_ratio=1e-6,
                 inner="krylov", floor=None):
        self.order = order
        self.tol = tol
        self.perturb = perturb
        self.perturb_ratio = perturb_ratio
        self.inner = inner
        self.floor = floor

    def fit(self, system, y=None):
        system = _check_system(system)
        gs = pbr_gramians(system, self.tol, GleOptions(inner=self.inner,
                                                       max_dim=max(600, system.n)))
        if self.perturb:
            gs = perturb_gramians(gs, self.tol, ratio=self.perturb_ratio, inner=self.inner)
        self.gramians_ = gs
        self.rom_ = pbr_reduce(system, gs, self.order,
                               self.tol if self.floor is None else self.floor)
        self.model_ = self.rom_.order()
        self.system_ = system
        self.n_features_in_ = system.n
        return self

    def transform(self, X, modes):
        """Reduced coordinates ``Wbar_q[:, :r]^T x`` for the mode ``q`` of each row."""
        check_is_fitted(self, "rom_")
        X = _check_states(X, self.n_features_in_)
        modes = np.broadcast_to(np.asarray(modes, dtype=int), (X.shape[0],))
        W = [w[:, :self.order] for w in self.rom_.Wbar]
        return np.vstack([X[i] @ W[q] for i, q in enumerate(modes)])

    def predict(self, signal, u, horizon, **sim_kwargs):
        check_is_fitted(self, "model_")
        m = self.model_
        return simulate(m.system, signal, u, horizon, jump_maps=m.jump, **sim_kwargs).y

    def bound(self, signal, u, horizon, r=None, reuse_depth=3, **sim_kwargs):
        """Error bound breakdown for order ``r`` (default ``order``)."""
        check_is_fitted(self, "rom_")
        ev = PbrBoundEvaluator(self.system_, self.rom_, signal, u, horizon,
                               reuse_depth=reuse_depth, **sim_kwargs)
        return ev.bound(self.order if r is None else r)
