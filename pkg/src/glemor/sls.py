"""Switched linear systems: containers, switching signals, simulation with
optional state jumps at switching times, and L2 quadrature."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import simpson, solve_ivp

from ._validation import check_matrix, check_positive
from .exceptions import UnstableModeError

log = logging.getLogger(__name__)

_DENSE_EIG_LIMIT = 2000


def _max_real_eig(A):
    n = A.shape[0]
    if n == 0:
        return -np.inf
    if n <= _DENSE_EIG_LIMIT:
        M = A.toarray() if sp.issparse(A) else A
        return float(np.max(np.linalg.eigvals(M).real))
    # Gershgorin is enough for diagonally dominant modes; otherwise ARPACK
    A = sp.csr_matrix(A)
    d = A.diagonal()
    radius = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    if np.max(d + radius) < 0:
        return float(np.max(d + radius))
    from scipy.sparse.linalg import eigs
    return float(np.max(eigs(A, k=1, which="LR", return_eigenvectors=False).real))


class SwitchedSystem:
    """Modes ``(A_j, B_j, C_j)`` of a switched linear system.

    Parameters
    ----------
    A_list, B_list, C_list : sequences
        Per-mode state (``n x n``, dense or sparse), input (``n x m``) and
        output (``p x n``) matrices.
    check_stability : bool, default True
        Reject modes that are not Hurwitz. Reduced models skip the check and
        report stability separately.
    """

    def __init__(self, A_list, B_list, C_list, check_stability=True):
        if not (len(A_list) == len(B_list) == len(C_list)) or not A_list:
            raise ValueError("A_list, B_list and C_list must be nonempty and of equal length")
        self.A = [check_matrix(A, f"A[{j}]") for j, A in enumerate(A_list)]
        self.B = [np.asarray(check_matrix(B, f"B[{j}]")) for j, B in enumerate(B_list)]
        self.C = [np.asarray(check_matrix(C, f"C[{j}]")) for j, C in enumerate(C_list)]
        n, m, p = self.A[0].shape[0], self.B[0].shape[1], self.C[0].shape[0]
        for j in range(len(self.A)):
            if self.A[j].shape != (n, n) or self.B[j].shape != (n, m) or self.C[j].shape != (p, n):
                raise ValueError(f"mode {j} has inconsistent dimensions")
        if check_stability:
            for j, margin in enumerate(self.stability_margins()):
                if margin >= 0:
                    raise UnstableModeError(f"unstable mode {j}: max real part {margin:.3e}")

    @property
    def n(self):
        return self.A[0].shape[0]

    @property
    def n_inputs(self):
        return self.B[0].shape[1]

    @property
    def n_outputs(self):
        return self.C[0].shape[0]

    @property
    def n_modes(self):
        return len(self.A)

    def stability_margins(self):
        """Largest eigenvalue real part of each mode."""
        return [_max_real_eig(A) for A in self.A]


@dataclass
class SwitchingSignal:
    """Piecewise constant mode sequence: ``mode_path[k]`` is active on
    ``[breakpoints[k-1], breakpoints[k])`` (0-based modes).

    Consecutive repeats of a mode are merged on construction.
    """

    t0: float
    breakpoints: list
    mode_path: list

    def __post_init__(self):
        bps = [float(b) for b in self.breakpoints]
        modes = [int(q) for q in self.mode_path]
        if len(modes) != len(bps) + 1:
            raise ValueError("mode_path needs exactly one more entry than breakpoints")
        if any(q < 0 for q in modes):
            raise ValueError("mode indices must be nonnegative")
        edges = [self.t0] + bps
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("breakpoints must be strictly increasing and after t0")
        keep_b, keep_m = [], [modes[0]]
        for b, q in zip(bps, modes[1:]):
            if q != keep_m[-1]:
                keep_b.append(b)
                keep_m.append(q)
        self.breakpoints, self.mode_path = keep_b, keep_m

    def segments(self, horizon):
        """``(start, end, mode)`` triples covering ``[t0, horizon]``."""
        if horizon <= self.t0:
            raise ValueError("horizon must exceed t0")
        edges = [self.t0] + [b for b in self.breakpoints if b < horizon] + [horizon]
        return [(a, b, self.mode_path[k]) for k, (a, b) in enumerate(zip(edges, edges[1:]))]

    def mode_at(self, t):
        return self.mode_path[int(np.searchsorted(self.breakpoints, t, side="right"))]


def random_switching(n_modes, n_switches, horizon, seed=0, t0=0.0):
    """Switching times as sorted uniform samples on ``(t0, horizon)``; each new
    mode differs from the previous one."""
    if n_modes < 2 and n_switches:
        raise ValueError("switching needs at least two modes")
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(t0, horizon, n_switches))
    modes = [int(rng.integers(n_modes))]
    for _ in range(n_switches):
        q = int(rng.integers(n_modes - 1))
        modes.append(q + (q >= modes[-1]))
    return SwitchingSignal(t0, list(times), modes)


@dataclass
class InputSignal:
    """Input ``u(t)`` returning an ``m``-vector; ``description`` is free text."""

    func: object
    n_inputs: int
    description: str = ""

    def __call__(self, t):
        return np.asarray(self.func(t), dtype=float).reshape(self.n_inputs)

    def sample(self, ts):
        return np.array([self(t) for t in ts]).reshape(len(ts), self.n_inputs)


@dataclass
class Trajectory:
    """Sampled solution. Every switching time appears twice in ``t`` (end of
    one segment, start of the next); ``segments`` holds the index slices."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    segments: list
    modes: list
    jump_log: list = field(default_factory=list)


def simulate(system, signal, u, horizon, rtol=1e-8, atol=1e-10, samples_per_segment=401,
             jump_maps=None, x0=None, method="RK45"):
    """Integrate a switched system from a zero (or given) initial state.

    The integrator restarts at every switching time. With ``jump_maps`` (a
    sequence with one matrix per switch, or a callable ``(old, new) ->
    matrix``) the state is mapped across each switch.
    """
    check_positive(rtol, "rtol")
    check_positive(atol, "atol")
    if samples_per_segment < 3:
        raise ValueError("need at least three samples per segment")
    segs = signal.segments(horizon)
    x = np.zeros(system.n) if x0 is None else np.asarray(x0, dtype=float)
    ts, xs, jumps = [], [], []
    for k, (a, b, q) in enumerate(segs):
        if k:
            old = segs[k - 1][2]
            if jump_maps is not None:
                J = jump_maps(old, q) if callable(jump_maps) else jump_maps[k - 1]
                x_new = J @ x
                jumps.append({"time": a, "from": old, "to": q, "x_minus": x, "x_plus": x_new})
                x = x_new
        A, B = system.A[q], system.B[q]
        t_eval = np.linspace(a, b, samples_per_segment)

        def rhs(t, z, A=A, B=B):
            return A @ z + B @ u(t)

        sol = solve_ivp(rhs, (a, b), x, method=method, t_eval=t_eval, rtol=rtol, atol=atol)
        if sol.status != 0:
            raise RuntimeError(f"integration failed on segment {k}: {sol.message}")
        ts.append(sol.t)
        xs.append(sol.y.T)
        x = sol.y[:, -1]
    t = np.concatenate(ts)
    X = np.vstack(xs)
    bounds = np.cumsum([0] + [len(s) for s in ts])
    segments = [slice(bounds[i], bounds[i + 1]) for i in range(len(ts))]
    modes = [q for _, _, q in segs]
    Y = np.vstack([X[sl] @ system.C[q].T for sl, q in zip(segments, modes)])
    U = u.sample(t)
    return Trajectory(t, X, Y, U, segments, modes, jumps)


def l2_norm_sq(t, values, segments=None):
    """``int ||v(t)||^2 dt`` by composite Simpson, segment by segment."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float).reshape(len(t), -1)
    segments = segments or [slice(0, len(t))]
    total = 0.0
    for sl in segments:
        ts = t[sl]
        if len(ts) < 2:
            raise ValueError("each segment needs at least two samples")
        total += simpson(np.sum(v[sl] ** 2, axis=1), x=ts)
    return float(total)


def input_energy(traj):
    """``eta = ||u||_{L2}`` over the trajectory horizon."""
    return np.sqrt(l2_norm_sq(traj.t, traj.u, traj.segments))


def output_error(full, reduced, eta):
    """Relative output error ``||y - y_r||_{L2} / eta`` of two trajectories on
    the same grid."""
    if full.t.shape != reduced.t.shape or not np.allclose(full.t, reduced.t, rtol=0, atol=0):
        raise ValueError("trajectories must share the same time grid")
    if not eta > 0:
        raise ValueError("eta must be positive")
    return np.sqrt(l2_norm_sq(full.t, full.y - reduced.y, full.segments)) / eta


def write_trajectory_csv(path, traj, caption, extra=None):
    """CSV of ``t`` and the outputs (plus optional named extra columns)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        fh.write(f"# {caption}\n")
        w = csv.writer(fh)
        w.writerow(["t", "mode"] + [f"y{i + 1}" for i in range(traj.y.shape[1])] + list(extra))
        mode_col = np.concatenate([[q] * (sl.stop - sl.start) for sl, q in zip(traj.segments, traj.modes)])
        for i in range(len(traj.t)):
            w.writerow([f"{traj.t[i]:.10g}", int(mode_col[i])]
                       + [f"{v:.10e}" for v in traj.y[i]]
                       + [f"{np.ravel(col)[i]:.10e}" for col in extra.values()])
