"""Output error certificates.

:func:`bt_error_bound` is the a-priori bound of balanced truncation (twice
the sum of distinct neglected Hankel values). :func:`pbr_error_bound`
evaluates the a-posteriori bound of piecewise balanced reduction, which
needs the reduced trajectories at every truncation level above ``r``.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .sls import input_energy, l2_norm_sq, simulate

log = logging.getLogger(__name__)

CLUSTER_TOL = 1e-8


def distinct_values(spectrum, cluster_tol=CLUSTER_TOL):
    """Largest member of every cluster of a descending spectrum; neighbours
    closer than ``cluster_tol`` (relative) belong to one cluster."""
    s = np.asarray(spectrum, dtype=float)
    out = []
    for v in s:
        if out and out[-1] - v <= cluster_tol * out[-1]:
            continue
        out.append(v)
    return np.array(out)


def bt_error_bound(spectrum, r, cluster_tol=CLUSTER_TOL):
    """``2 * sum`` of the distinct Hankel values beyond the first ``r``.

    A cluster straddling the cut counts only in the retained part.

    >>> bt_error_bound([4.0, 1.0, 1.0, 1.0], 1)
    2.0
    """
    s = np.asarray(spectrum, dtype=float)
    if np.any(np.diff(s) > 0):
        raise ValueError("spectrum must be descending")
    if r >= s.size:
        return 0.0
    tail = s[r:]
    if r > 0:
        # drop the continuation of a cluster that starts inside the kept part
        keep = ~(s[r - 1] - tail <= cluster_tol * s[r - 1])
        tail = tail[keep]
    return float(2.0 * np.sum(distinct_values(tail, cluster_tol)))


# --- PBR bound ---------------------------------------------------------------------

@dataclass
class LevelQuantities:
    """Terms of one truncation level, from size ``lo`` to size ``hi``.

    ``sigma[j]`` is the Hankel value shared by states ``lo .. hi - 1`` of mode
    ``j``. ``G_*`` are boundary/jump sums, ``H_*`` the gated integrals, both
    summed over switching segments.
    """

    lo: int
    hi: int
    sigma: np.ndarray
    G_o: float
    G_c: float
    H_o: float
    H_c: float
    lambda1_Mc: np.ndarray
    lambda1_Mo: np.ndarray
    exact: bool = True

    @property
    def H(self):
        return self.H_o + self.H_c

    @property
    def G(self):
        return self.G_o + self.G_c

    @property
    def tau_term(self):
        return 2.0 * float(np.max(self.sigma))


@dataclass
class BoundBreakdown:
    """``phi = tau + chi + iota`` for order ``r``, all relative to ``eta``.

    ``iota`` is stored nonnegative: it collects ``sqrt(-G)`` over the levels
    with negative ``G``.
    """

    r: int
    tau: float
    chi: float
    iota: float
    phi: float
    eta: float
    levels: list = field(default_factory=list)


def level_partition(spectra, r):
    """Cut points ``[r, s_1, ..., n]`` such that every mode's spectrum is
    constant on each level (exact equality, as produced by the floor)."""
    S = np.vstack([np.asarray(s, dtype=float) for s in spectra])
    n = S.shape[1]
    if not 0 <= r <= n:
        raise ValueError(f"r must lie in [0, {n}]")
    changes = np.flatnonzero(np.any(S[:, 1:] != S[:, :-1], axis=0)) + 1
    return [r] + [int(c) for c in changes if c > r] + ([n] if r < n else [])


def _balanced_fom_states(rom, traj):
    """FOM states in the per-mode balanced coordinates ``Wbar_q^T x``."""
    out = np.empty_like(traj.x)
    for sl, q in zip(traj.segments, traj.modes):
        out[sl] = traj.x[sl] @ rom.Wbar[q]
    return out


def _lambda_max_sym(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def level_quantities(rom, t, segments, modes, x_full, x_red, lo, hi, exact=True):
    """Evaluate one level from sampled trajectories.

    ``x_full`` holds the size-``hi`` state (balanced coordinates), ``x_red``
    the size-``lo`` reduced state, both on the grid ``t`` whose
    ``segments`` repeat every switching time.
    """
    if x_full.shape[1] != hi or x_red.shape[1] != lo:
        raise ValueError(f"level ({lo}, {hi}): trajectory sizes {x_full.shape[1]}, "
                         f"{x_red.shape[1]} do not match")
    if len(segments) != len(modes):
        raise ValueError("one mode per segment required")
    M = rom.n_modes
    sig = np.array([rom.spectra[j][lo] for j in range(M)])
    for j in range(M):
        block = rom.spectra[j][lo:hi]
        if np.any(block != block[0]):
            raise ValueError(f"level ({lo}, {hi}) is not constant for mode {j}")
    lam_c = np.empty(M)
    lam_o = np.empty(M)
    for j in range(M):
        Sg = rom.spectra[j][:hi]
        A = rom.Abar[j][:hi, :hi]
        Bb = rom.Bbar[j][:hi]
        Cb = rom.Cbar[j][:, :hi]
        lam_c[j] = _lambda_max_sym(A * Sg + (A * Sg).T + Bb @ Bb.T)
        lam_o[j] = _lambda_max_sym(A.T * Sg + (A.T * Sg).T + Cb.T @ Cb)

    xc = x_full.copy()
    xc[:, :lo] += x_red
    xo = x_full.copy()
    xo[:, :lo] -= x_red
    G_o = G_c = H_o = H_c = 0.0
    for sl, q in zip(segments, modes):
        Sg = rom.spectra[q][:hi]
        a, b = sl.start, sl.stop - 1
        G_o += xo[b] @ (Sg * xo[b]) - xo[a] @ (Sg * xo[a])
        G_c += sig[q] ** 2 * (xc[b] @ (xc[b] / Sg) - xc[a] @ (xc[a] / Sg))
        ts = t[sl]
        int_o = l2_norm_sq(ts, xo[sl])
        int_c = l2_norm_sq(ts, xc[sl])
        H_o += lam_o[q] * int_o
        # Sigma^{-2} <= sigma^{-2} I only helps a nonnegative lambda; a negative
        # one is paired with the largest Hankel value instead
        weight = 1.0 if lam_c[q] >= 0 else (sig[q] / Sg[0]) ** 2
        H_c += lam_c[q] * weight * int_c
    return LevelQuantities(lo, hi, sig, float(G_o), float(G_c), float(H_o), float(H_c),
                           lam_c, lam_o, exact)


class PbrBoundEvaluator:
    """Evaluates the PBR bound for several orders on one scenario.

    The full-order trajectory and every reduced trajectory are simulated at
    most once. ``reuse_depth=None`` simulates every level exactly. An integer
    ``d`` simulates only the reduced models up to the ``d``-th cut above
    ``r`` and zero-pads that trajectory for all higher sizes (the full-order
    state is still used on the top level). The padded levels are
    approximations, so the bound is then an estimate.
    """

    def __init__(self, system, rom, signal, u, horizon, reuse_depth=3, **sim_kwargs):
        if reuse_depth is not None and reuse_depth < 1:
            raise ValueError("reuse_depth must be positive or None")
        self.system, self.rom, self.signal, self.u = system, rom, signal, u
        self.horizon = horizon
        self.reuse_depth = reuse_depth
        self.sim_kwargs = sim_kwargs
        self.full = simulate(system, signal, u, horizon, **sim_kwargs)
        self.eta = input_energy(self.full)
        self.xbar = _balanced_fom_states(rom, self.full)
        self._trajs = {}
        self._levels = {}

    def reduced(self, s):
        if s not in self._trajs:
            model = self.rom.order(s) if s else None
            if model is None:
                t = self.full.t
                self._trajs[s] = (np.zeros((len(t), 0)), np.zeros_like(self.full.y))
            else:
                tr = simulate(model.system, self.signal, self.u, self.horizon,
                              jump_maps=model.jump, **self.sim_kwargs)
                self._trajs[s] = (tr.x, tr.y)
        return self._trajs[s]

    def state(self, s):
        return self.xbar if s == self.rom.n else self.reduced(s)[0]

    def output_error(self, r):
        """``||y - y_r||_{L2} / eta``."""
        y_r = self.reduced(r)[1]
        return np.sqrt(l2_norm_sq(self.full.t, self.full.y - y_r, self.full.segments)) / self.eta

    def _padded(self, s, base):
        x = self.state(min(s, base)) if s != self.rom.n else self.xbar
        if x.shape[1] >= s:
            return x
        out = np.zeros((x.shape[0], s))
        out[:, :x.shape[1]] = x
        return out

    def _level(self, lo, hi, base=None):
        key = (lo, hi, base)
        if key not in self._levels:
            if base is None:
                x_hi, x_lo = self.state(hi), self.state(lo)
            else:
                x_hi, x_lo = self._padded(hi, base), self._padded(lo, base)
            self._levels[key] = level_quantities(
                self.rom, self.full.t, self.full.segments, self.full.modes,
                x_hi, x_lo, lo, hi, exact=base is None)
        return self._levels[key]

    def bound(self, r):
        cuts = level_partition(self.rom.spectra, r)
        levels = []
        base = None
        if self.reuse_depth is not None and len(cuts) - 1 > self.reuse_depth:
            base = cuts[self.reuse_depth]
        for i, (lo, hi) in enumerate(zip(cuts, cuts[1:])):
            exact = base is None or hi <= base
            levels.append(self._level(lo, hi, None if exact else base))
        return breakdown_from_levels(r, levels, self.eta)


def breakdown_from_levels(r, levels, eta):
    """Aggregate level terms with Heaviside gating (``H(0) = 0``)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    tau = sum(lv.tau_term for lv in levels)
    chi = sum(np.sqrt(lv.H) for lv in levels if lv.H > 0) / eta
    iota = sum(np.sqrt(-lv.G) for lv in levels if lv.G < 0) / eta
    return BoundBreakdown(r, float(tau), float(chi), float(iota), float(tau + chi + iota),
                          float(eta), levels)


def pbr_error_bound(system, rom, signal, u, horizon, r, reuse_depth=3, **sim_kwargs):
    """Bound on ``||y - y_r||_{L2} / ||u||_{L2}`` for the order-``r`` PBR model."""
    return PbrBoundEvaluator(system, rom, signal, u, horizon, reuse_depth, **sim_kwargs).bound(r)


def verify_bound(error, breakdown, integration_tol=1e-8):
    """Pass/fail record of ``error <= phi + 10 * integration_tol``."""
    slack = 10.0 * integration_tol
    return {"r": breakdown.r, "error": float(error), "phi": breakdown.phi,
            "slack": slack, "passed": bool(error <= breakdown.phi + slack)}


def write_breakdown_csv(path, rows, caption):
    """CSV with columns ``r, eps, tau, chi, iota, phi``; ``rows`` holds
    ``(error, BoundBreakdown)`` pairs."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {caption}\n")
        w = csv.writer(fh)
        w.writerow(["r", "eps", "tau", "chi", "iota", "phi"])
        for err, b in rows:
            w.writerow([b.r] + [f"{v:.6e}" for v in (err, b.tau, b.chi, b.iota, b.phi)])
