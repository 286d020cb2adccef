"""Balanced truncation of switched linear systems.

Two routes are provided. The monolithic route computes one Gramian pair from
a generalized Lyapunov equation built around the first mode and projects all
modes with the same square-root basis. The piecewise route computes a pair
per mode, balances each mode separately, and maps the reduced state across
switching times with ``W_new^T V_old``.

Gramians are :class:`~glemor.matrix_kernel.LowRankPsd` objects (``Z Z^T +
shift * I``); a shift is never densified outside validation sizes.
"""

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_order, check_positive
from .exceptions import ClusterSplitError, DenseCapError, InapplicableError
from .gle import GleOptions, GleProblem, solve_gle
from .lyapunov import solve_lyapunov_lowrank, solve_lyapunov_refined
from .matrix_kernel import (
    LowRankPsd,
    condition_number,
    dissipativity_margin,
    lowrank_symmetric_eigh,
    lowrank_symmetric_max_eig,
    read_matrix_market,
    truncated_eig_psd,
    write_matrix_market,
)
from .sls import SwitchedSystem

log = logging.getLogger(__name__)

CLUSTER_TOL = 1e-8
_DENSE_LMI_LIMIT = 2000


# --- Gramians ------------------------------------------------------------------

@dataclass
class GramianPair:
    """Reachability ``P`` and observability ``Q`` Gramian approximations, with
    the GLE solutions they came from (``None`` for dense references)."""

    P: LowRankPsd
    Q: LowRankPsd
    reach: object = None
    obsv: object = None


def gle_problems(system, base=0):
    """Reachability and observability GLEs with ``A = A_base`` and
    ``N_i = A_i - A_base`` for the other modes."""
    A = sp.csr_matrix(system.A[base])
    Ns = [sp.csr_matrix(system.A[i]) - A for i in range(system.n_modes) if i != base]
    B = np.hstack(system.B)
    C = np.vstack(system.C)
    reach = GleProblem(A, Ns, B)
    return reach, reach.transposed(C)


def _solve_pair(system, base, tol, opts):
    reach, obsv = gle_problems(system, base)
    sol_p = solve_gle(reach, tol, opts)
    sol_q = solve_gle(obsv, tol, opts)
    return GramianPair(LowRankPsd(sol_p.Z), LowRankPsd(sol_q.Z), sol_p, sol_q)


def gramians_monolithic(system, tol, opts=None):
    """Gramian pair of the GLE built around mode 0 (one pair for all modes)."""
    return _solve_pair(system, 0, tol, opts or GleOptions())


def pbr_gramians(system, tol, opts=None):
    """One Gramian pair per mode ``j``, from the GLE with ``A = A_j``."""
    opts = opts or GleOptions()
    return [_solve_pair(system, j, tol, opts) for j in range(system.n_modes)]


# --- square-root balancing -----------------------------------------------------

@dataclass
class ProjectionPair:
    """Petrov-Galerkin pair with ``W^T V = I``.

    ``hankel`` holds the singular values of the balancing core (descending,
    zeros included); the remaining ``n - len(hankel)`` values all equal
    ``tail``.
    """

    V: np.ndarray
    W: np.ndarray
    hankel: np.ndarray
    tail: float
    n: int

    @property
    def order(self):
        return self.V.shape[1]

    def spectrum(self):
        """All ``n`` Hankel singular values of the (shifted) pair."""
        return _descending(self.hankel, self.n, self.tail)


def _psd_core_factor(M):
    lam, U = np.linalg.eigh(0.5 * (M + M.T))
    lam = np.clip(lam, 0.0, None)
    return U * np.sqrt(lam)


def balancing_core(P, Q):
    """Reduce the square-root balancing of ``P``, ``Q`` to a small core.

    With ``F`` an orthonormal basis of ``range([Z_P, Z_Q])`` both Gramians are
    block diagonal in ``[F, F_perp]`` (the shifts act as multiples of the
    identity), so the Hankel values split into those of a ``k x k`` core and
    ``sqrt(shift_P * shift_Q)`` on the complement.

    Returns ``(F, S_c, R_c, U, s, Vt)`` with ``S_c^T R_c = U diag(s) Vt``.
    """
    F = truncated_eig_psd(np.hstack([P.Z, Q.Z])).U
    k = F.shape[1]
    zp, zq = F.T @ P.Z, F.T @ Q.Z
    Sc = _psd_core_factor(zp @ zp.T + P.shift * np.eye(k))
    Rc = _psd_core_factor(zq @ zq.T + Q.shift * np.eye(k))
    U, s, Vt = np.linalg.svd(Sc.T @ Rc)
    return F, Sc, Rc, U, s, Vt


def admissible_orders(spectrum, cluster_tol=CLUSTER_TOL):
    """Orders ``r`` (1-based count) at which ``spectrum`` is not cut inside a
    cluster of relative gap ``< cluster_tol``."""
    s = np.asarray(spectrum)
    return [r for r in range(1, s.size)
            if s[r - 1] - s[r] > cluster_tol * s[r - 1]] + [s.size]


def _check_cut(spectrum, r, cluster_tol):
    s = np.asarray(spectrum)
    if r < s.size and not s[r - 1] - s[r] > cluster_tol * s[r - 1]:
        raise ClusterSplitError(
            f"order {r} splits a cluster of singular values near {s[r - 1]:.6e}",
            admissible_orders(s, cluster_tol))


def _projector_columns(F, Sc, Rc, U, s, Vt, r):
    inv_sqrt = 1.0 / np.sqrt(s[:r])
    V = F @ (Sc @ U[:, :r]) * inv_sqrt
    W = F @ (Rc @ Vt[:r].T) * inv_sqrt
    # small Hankel values amplify SVD round-off in W^T V; restore it exactly
    W = np.linalg.solve(W.T @ V, W.T).T
    return V, W


def square_root_projectors(P, Q, r, cluster_tol=CLUSTER_TOL):
    """Square-root balanced truncation projectors of order ``r``.

    Raises
    ------
    ClusterSplitError
        If ``r`` separates (numerically) equal Hankel singular values; the
        exception lists admissible orders.
    ValueError
        If ``r`` exceeds the numerical rank of the balancing core.
    """
    n = P.n
    F, Sc, Rc, U, s, Vt = balancing_core(P, Q)
    tail = float(np.sqrt(P.shift * Q.shift))
    # orders reaching into round-off would make W^T V numerically singular
    noise = s.size * np.finfo(float).eps * (s[0] if s.size else 0.0)
    check_order(r, int(np.sum(s > noise)))
    spectrum = np.concatenate([s, np.full(n - s.size, tail)])
    _check_cut(spectrum, r, cluster_tol)
    V, W = _projector_columns(F, Sc, Rc, U, s, Vt, r)
    return ProjectionPair(V, W, s, tail, n)


def hankel_spectrum(P, Q):
    """All ``n`` Hankel singular values of the pair, descending."""
    _, _, _, _, s, _ = balancing_core(P, Q)
    return _descending(s, P.n, np.sqrt(P.shift * Q.shift))


def _descending(core, n, tail):
    # core values are >= tail in exact arithmetic; round-off may reorder the end
    return np.sort(np.concatenate([core, np.full(n - core.size, tail)]))[::-1]


def reduce(system, pair):
    """Project every mode with the same pair; no stability check is applied."""
    V, W = pair.V, pair.W
    return SwitchedSystem([W.T @ (A @ V) for A in system.A],
                          [W.T @ B for B in system.B],
                          [C @ V for C in system.C], check_stability=False)


def hurwitz_check(A):
    """Largest real part of the spectrum of a small dense matrix (negative
    means Hurwitz)."""
    A = np.asarray(A.toarray() if sp.issparse(A) else A, dtype=float)
    if A.shape[0] > _DENSE_LMI_LIMIT:
        raise DenseCapError(f"dense cap exceeded: n={A.shape[0]} > {_DENSE_LMI_LIMIT}")
    if A.size == 0:
        return -np.inf
    return float(np.max(np.linalg.eigvals(A).real))


# --- LMIs and the shift correction ------------------------------------------------

def lmi_max_eig(A, X, G, side="reach"):
    """Largest eigenvalue of ``A X + X A^T + B B^T`` (``side="reach"``, ``G =
    B`` of shape ``(n, m)``) or ``A^T X + X A + C^T C`` (``side="obsv"``, ``G =
    C`` of shape ``(p, n)``) for ``X = Z Z^T + shift I``.

    The unshifted case is exact through a small core; with a shift the
    matrix is assembled densely up to ``n = 2000`` and handled by Lanczos
    beyond.
    """
    if side not in ("reach", "obsv"):
        raise ValueError("side must be 'reach' or 'obsv'")
    A = sp.csr_matrix(A) if sp.issparse(A) else np.asarray(A, dtype=float)
    Aop = A if side == "reach" else A.T
    Z, mu = X.Z, X.shift
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if side == "obsv":
        G = G.T
    if G.shape[0] != X.n:
        raise ValueError(f"G has shape {G.shape[::-1] if side == 'obsv' else G.shape}, "
                         f"incompatible with n = {X.n} on side {side!r}")
    if mu == 0:
        k = Z.shape[1]
        F = np.hstack([Z, Aop @ Z, G])
        K = np.zeros((F.shape[1],) * 2)
        K[:k, k:2 * k] = K[k:2 * k, :k] = np.eye(k)
        K[2 * k:, 2 * k:] = np.eye(G.shape[1])
        return lowrank_symmetric_max_eig(F, K)
    n = X.n
    if n <= _DENSE_LMI_LIMIT:
        Ad = Aop.toarray() if sp.issparse(Aop) else Aop
        M = Ad @ X.to_dense(cap=_DENSE_LMI_LIMIT)
        M = M + M.T + G @ G.T
        return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])

    def mv(v):
        zv = Z @ (Z.T @ v)
        return (Aop @ zv + Z @ (Z.T @ (Aop.T @ v)) + mu * (Aop @ v + Aop.T @ v)
                + G @ (G.T @ v))

    op = spla.LinearOperator((n, n), matvec=mv, dtype=float)
    return float(spla.eigsh(op, k=1, which="LA", v0=np.ones(n) / np.sqrt(n), tol=1e-10,
                            return_eigenvectors=False)[0])


def lmi_condition_number(A):
    """Condition number used by the shift: the larger of the spectral and the
    1-norm condition numbers (the former is what the shift theorem needs)."""
    return max(condition_number(A, 2), condition_number(A, 1))


def shift_gramian(X, tol, A_list, kappa=None):
    """Return ``X + mu I`` with ``mu = tol * max_j kappa(A_j)``.

    Valid when ``||X_exact - X||_2 <= tol`` and every ``A_j`` is dissipative
    (``A_j + A_j^T`` negative definite); then the shifted matrix satisfies
    every mode's LMI.

    Raises
    ------
    InapplicableError
        If some ``A_j`` is not dissipative.
    """
    tol = check_positive(tol, "tol", allow_zero=True)
    for j, A in enumerate(A_list):
        margin = dissipativity_margin(A)
        if margin >= 0:
            raise InapplicableError(f"mode {j} is not dissipative (margin {margin:.3e}); "
                                    "the shift correction is inapplicable")
    if kappa is None:
        kappa = max(lmi_condition_number(A) for A in A_list)
    mu = tol * kappa
    return LowRankPsd(X.Z, X.shift + mu), mu


def residual_split_perturbation(problem, Z, tol, max_pairs=50, ratio=1e-3, inner="krylov"):
    """Enlarge ``Z Z^T`` so that the mode LMI holds despite the GLE error.

    The residual ``R = A X + X A^T + sum_i N_i X N_i^T + B B^T`` of the
    equation actually solved (``problem``) is split by its eigenvalues; the
    leading positive eigenpairs (down to ``ratio`` times the largest, at most
    ``max_pairs``) define ``R_+ = V_+ S_+ V_+^T`` and the correction solves
    ``A D + D A^T + R_+ = 0`` to residual ``tol * 1e-3`` (``inner="krylov"``)
    or with the refined dense solver (``inner="dense"``).

    Returns
    -------
    X_hat : LowRankPsd
        Factor ``[Z, G]`` with ``G G^T ~ D``.
    info : dict
        Number of pairs used and the largest positive residual eigenvalue.
    """
    Z = np.asarray(Z, dtype=float)
    terms = problem.active_terms()
    k = Z.shape[1]
    F = np.hstack([Z, problem.A @ Z] + [N @ Z for N in terms] + [problem.B])
    K = np.zeros((F.shape[1],) * 2)
    K[:k, k:2 * k] = K[k:2 * k, :k] = np.eye(k)
    K[2 * k:, 2 * k:] = np.eye(F.shape[1] - 2 * k)
    w, vecs = lowrank_symmetric_eigh(F, K)
    pos = w > 0
    info = {"n_pairs": 0, "top_positive": float(w[0]) if pos.any() else 0.0}
    if not pos.any():
        return LowRankPsd(Z), info
    npos = min(max_pairs, int(np.sum(w >= ratio * w[0])))
    Bplus = vecs[:, :npos] * np.sqrt(w[:npos])
    if inner == "dense":
        corr = solve_lyapunov_refined(problem.A, Bplus)
    else:
        corr = solve_lyapunov_lowrank(problem.A, Bplus, tol * 1e-3)
    info["n_pairs"] = npos
    info["correction_residual"] = corr.residual_fro
    return LowRankPsd(np.hstack([Z, corr.Z])), info


def perturb_gramians(gramians, tol, **kwargs):
    """Apply :func:`residual_split_perturbation` to every Gramian of a
    per-mode list (each must carry its GLE solution)."""
    out = []
    for g in gramians:
        P, _ = residual_split_perturbation(g.reach.problem, g.P.Z, tol, **kwargs)
        Q, _ = residual_split_perturbation(g.obsv.problem, g.Q.Z, tol, **kwargs)
        out.append(GramianPair(P, Q, g.reach, g.obsv))
    return out


# --- piecewise balanced reduction ------------------------------------------------

def complete_balancing(V, W):
    """Extend ``n x h`` bases with ``W^T V = I`` to square ``(Vbar, Wbar)`` with
    ``Wbar^T Vbar = I``. The added columns of ``Vbar`` are an orthonormal basis
    of ``null(W^T)``."""
    n, h = V.shape
    Qfull, _ = sla.qr(W, mode="full")
    Vc = Qfull[:, h:]
    Wc = Vc - W @ (V.T @ Vc)
    return np.hstack([V, Vc]), np.hstack([W, Wc])


@dataclass
class ReducedSwitchedModel:
    """Reduced modes plus the state maps applied at switching times."""

    system: SwitchedSystem
    jumps: dict

    def jump(self, old, new):
        return self.jumps[(old, new)]


@dataclass
class PbrRom:
    """Per-mode balanced realizations of a switched system.

    ``Vbar[j]``, ``Wbar[j]`` are full ``n x n`` balancing transforms;
    ``spectra[j]`` holds the ``n`` floored Hankel singular values of mode
    ``j``; ``Abar[j] = Wbar[j]^T A_j Vbar[j]`` etc. ``r`` is the working order.
    """

    Vbar: list
    Wbar: list
    spectra: list
    Abar: list
    Bbar: list
    Cbar: list
    r: int
    floor: float
    stability_margins: list = field(default_factory=list)

    @property
    def n(self):
        return self.Vbar[0].shape[0]

    @property
    def n_modes(self):
        return len(self.Vbar)

    def order(self, s=None):
        """The reduced model of order ``s`` (default ``r``)."""
        s = self.r if s is None else s
        check_order(s, self.n, "order")
        M = self.n_modes
        system = SwitchedSystem([self.Abar[j][:s, :s] for j in range(M)],
                                [self.Bbar[j][:s] for j in range(M)],
                                [self.Cbar[j][:, :s] for j in range(M)], check_stability=False)
        jumps = {(i, j): self.Wbar[j][:, :s].T @ self.Vbar[i][:, :s]
                 for i in range(M) for j in range(M) if i != j}
        return ReducedSwitchedModel(system, jumps)


def pbr_reduce(system, gramians, r, floor):
    """Piecewise balanced reduction of order ``r``.

    ``floor`` is added to every Hankel value so that the balanced Gramians
    are invertible (zeros become ``floor``).
    """
    check_positive(floor, "floor")
    n = system.n
    Vb, Wb, spectra, Ab, Bb, Cb = [], [], [], [], [], []
    for j, g in enumerate(gramians):
        F, Sc, Rc, U, s, Vt = balancing_core(g.P, g.Q)
        # values below the floor are replaced by it; keeping them in the
        # basis would only inject 1/sqrt(s) scaling
        h = int(np.sum(s > max(floor, s[0] * 1e-14))) if s.size else 0
        if h == 0:
            raise ValueError(f"mode {j} has a zero Hankel spectrum")
        V, W = complete_balancing(*_projector_columns(F, Sc, Rc, U, s, Vt, h))
        Vb.append(V)
        Wb.append(W)
        spectra.append(np.concatenate([s[:h], np.zeros(n - h)]) + floor)
        Ab.append(W.T @ (system.A[j] @ V))
        Bb.append(W.T @ system.B[j])
        Cb.append(system.C[j] @ V)
    # cuts inside a (floored) cluster are allowed: the error bound groups
    # equal values into one level
    rom = PbrRom(Vb, Wb, spectra, Ab, Bb, Cb, check_order(r, n), floor)
    rom.stability_margins = rom.order().system.stability_margins()
    for j, m in enumerate(rom.stability_margins):
        if m >= 0:
            log.warning("reduced mode %d of order %d is not Hurwitz (max real part %.3e)", j, r, m)
    return rom


# --- serialization -----------------------------------------------------------------

def save_rom(model, directory, spectra=None, comment="reduced switched model"):
    """Write a :class:`ReducedSwitchedModel` as Matrix Market files plus an
    INI manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sysm = model.system
    cfg = configparser.ConfigParser()
    cfg["model"] = {"modes": str(sysm.n_modes), "order": str(sysm.n),
                    "inputs": str(sysm.n_inputs), "outputs": str(sysm.n_outputs),
                    "comment": comment}
    for j in range(sysm.n_modes):
        write_matrix_market(d / f"A{j}.mtx", sysm.A[j])
        write_matrix_market(d / f"B{j}.mtx", sysm.B[j])
        write_matrix_market(d / f"C{j}.mtx", sysm.C[j])
    cfg["jumps"] = {}
    for (i, j), T in model.jumps.items():
        name = f"T{i}_{j}.mtx"
        write_matrix_market(d / name, T)
        cfg["jumps"][f"{i}->{j}"] = name
    if spectra is not None:
        cfg["spectra"] = {f"mode{j}": ",".join(f"{v:.17g}" for v in s)
                          for j, s in enumerate(spectra)}
    with open(d / "manifest.ini", "w") as fh:
        cfg.write(fh)


def load_rom(directory):
    d = Path(directory)
    cfg = configparser.ConfigParser()
    if not cfg.read(d / "manifest.ini"):
        raise FileNotFoundError(f"no manifest.ini in {d}")
    M = cfg.getint("model", "modes")

    def dense(name):
        m = read_matrix_market(d / name)
        return np.atleast_2d(m.toarray() if sp.issparse(m) else m)

    system = SwitchedSystem([dense(f"A{j}.mtx") for j in range(M)],
                            [dense(f"B{j}.mtx") for j in range(M)],
                            [dense(f"C{j}.mtx") for j in range(M)], check_stability=False)
    jumps = {}
    if cfg.has_section("jumps"):
        for key, name in cfg["jumps"].items():
            i, j = (int(v) for v in key.split("->"))
            jumps[(i, j)] = dense(name)
    return ReducedSwitchedModel(system, jumps)
