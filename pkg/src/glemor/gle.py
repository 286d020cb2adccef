"""Certified low-rank solution of generalized Lyapunov equations

    A X + X A^T + sum_j N_j X N_j^T + B B^T = 0

by a stationary fixed-point iteration whose inner Lyapunov solves are done
with the block Krylov solver. The returned spectral-norm error bound combines
the contraction of the fixed-point map with the inner residuals.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_factor, check_positive
from .exceptions import ConvergenceError, DenseCapError
from .lyapunov import (
    DENSE_CAP,
    DenseLyapunovSolver,
    solve_lyapunov_lowrank,
    solve_lyapunov_refined,
)
from .matrix_kernel import (
    _fix_signs,
    as_system_matrix,
    compress_within_budget,
    lowrank_symmetric_core,
    lowrank_symmetric_fro,
    smallest_singular_value,
    spectral_norm,
    truncated_eig_psd,
)

log = logging.getLogger(__name__)


@dataclass
class GleProblem:
    """Data of a generalized Lyapunov equation.

    ``scale_applied`` records the factor every ``N_j`` has been multiplied by.
    """

    A: object
    N_list: list
    B: np.ndarray
    scale_applied: float = 1.0

    def __post_init__(self):
        self.A = as_system_matrix(self.A)
        n = self.A.n
        self.N_list = [sp.csr_matrix(N, dtype=float) for N in self.N_list]
        for N in self.N_list:
            if N.shape != (n, n):
                raise ValueError(f"every N_j must be {n} x {n}, got {N.shape}")
        self.B = check_factor(self.B, n, "B")

    @property
    def n(self):
        return self.A.n

    def transposed(self, C):
        """The dual equation with ``A^T``, ``N_j^T`` and right factor ``C^T``."""
        return GleProblem(self.A.matrix.T, [N.T for N in self.N_list],
                          np.asarray(C, dtype=float).T, self.scale_applied)

    def active_terms(self):
        return [N for N in self.N_list if N.nnz and abs(N).max() > 0]


@dataclass
class GleOptions:
    """Knobs of :func:`solve_gle`.

    ``contraction`` selects the certificate constant: ``None`` rescales the
    bilinear terms so that the contraction factor is at most one half and
    uses ``gamma = 1``; a float (or ``"exact"``, computed by
    :func:`estimate_contraction_exact`) keeps the problem unscaled and uses
    ``gamma = c / (1 - c)``.

    ``inner`` picks the Lyapunov solver: ``"krylov"`` (block Krylov Galerkin)
    or ``"dense"`` (Bartels-Stewart with extended-precision refinement, for
    stiff problems of moderate size where the Krylov space saturates).
    """

    contraction: object = None
    zeta1: float = 0.1
    zeta2: float = 0.9
    max_outer: int = 200
    max_dim: int = DENSE_CAP
    truncate: bool = True
    sigma_min: float = None
    inner: str = "krylov"


@dataclass
class CertifiedGleSolution:
    """Low-rank GLE solution ``X ~ Z Z^T`` with a spectral-norm certificate.

    ``error_bound_2 = iteration_bound + truncation_error``, where
    ``iteration_bound = gamma * delta_history[-1] + ((1 + gamma) *
    inner_residuals[-1] + gamma * inner_residuals[-2]) / (2 * sigma_min)``.
    """

    Z: np.ndarray
    error_bound_2: float
    gamma: float
    iterations: int
    inner_residuals: list
    delta_history: list
    sigma_min: float
    iteration_bound: float
    truncation_error: float = 0.0
    scale_applied: float = 1.0
    inner_tolerances: list = field(default_factory=list)
    problem: GleProblem = None

    def recompute_bound(self):
        g, s = self.gamma, self.sigma_min
        r = self.inner_residuals
        if len(r) == 1:
            it = (1 + g) * r[0] / (2 * s)
        else:
            it = g * self.delta_history[-1] + ((1 + g) * r[-1] + g * r[-2]) / (2 * s)
        return it + self.truncation_error


_NORM_RTOL = 1e-6


def _sigma_min_lower(A):
    return smallest_singular_value(A, rtol=_NORM_RTOL) * (1 - 10 * _NORM_RTOL)


def contraction_upper_bound(problem, sigma_min=None):
    """Cheap bound ``sum_j ||N_j||_2^2 / (2 sigma_min(A))`` on ``||L^{-1} Pi||``."""
    terms = problem.active_terms()
    if not terms:
        return 0.0
    if sigma_min is None:
        sigma_min = smallest_singular_value(problem.A)
    # the small inflation covers the relative error of the Lanczos estimates
    norms = [spectral_norm(N, rtol=_NORM_RTOL) * (1 + 10 * _NORM_RTOL) for N in terms]
    return sum(v * v for v in norms) / (2.0 * sigma_min)


def rescale_bilinear_terms(problem, delta, sigma_min=None, beta=None):
    """Return a copy with ``N_j / sqrt(beta + delta)``; ``delta = beta`` bounds
    the contraction factor by one half. A precomputed ``beta`` skips the
    norm estimates."""
    check_positive(delta, "delta", allow_zero=True)
    if beta is None:
        beta = contraction_upper_bound(problem, sigma_min)
    if beta + delta == 0:
        return replace(problem)
    c = 1.0 / np.sqrt(beta + delta)
    return GleProblem(problem.A, [c * N for N in problem.N_list], problem.B,
                      problem.scale_applied * c)


def estimate_contraction_exact(problem, rtol=1e-8, max_n=400):
    """Spectral norm of ``L^{-1} Pi`` on ``R^{n x n}``, by Lanczos on
    ``(L^{-1} Pi)^T (L^{-1} Pi)`` with dense Schur-based Lyapunov solves.

    Validation tool only: cost is ``O(n^3)`` per iteration.
    """
    n = problem.n
    if n > max_n:
        raise DenseCapError(f"dense cap exceeded: exact contraction limited to n <= {max_n}")
    terms = problem.active_terms()
    if not terms:
        return 0.0
    solver = DenseLyapunovSolver(problem.A.toarray(), dense_cap=max(max_n, DENSE_CAP))
    Ns = [N.toarray() for N in terms]

    def apply(v):
        X = v.reshape(n, n)
        # L^{-1} Pi X, with L X = A X + X A^T, i.e. solve(W) = -L^{-1} W
        Y = -solver.solve(sum(N @ X @ N.T for N in Ns))
        Z = -solver.solve(Y, transpose=True)
        return sum(N.T @ Z @ N for N in Ns).ravel()

    op = spla.LinearOperator((n * n, n * n), matvec=apply, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(n * n)
    try:
        lam = spla.eigsh(op, k=1, which="LA", v0=v0, tol=rtol, return_eigenvectors=False)[0]
    except spla.ArpackNoConvergence as exc:
        est = np.sqrt(exc.eigenvalues[0]) if len(exc.eigenvalues) else None
        raise ConvergenceError("exact contraction estimate did not converge", estimate=est) from exc
    return float(np.sqrt(max(lam, 0.0)))


def delta_between_iterates(Z_k, Z_prev):
    """``||Z_k Z_k^T - Z_prev Z_prev^T||_2`` through a small symmetric core.

    Works for any factors (no orthogonality or sign convention assumed).
    """
    k, p = Z_k.shape[1], Z_prev.shape[1]
    if k + p == 0:
        return 0.0
    K = np.diag(np.r_[np.ones(k), -np.ones(p)])
    _, core = lowrank_symmetric_core(np.hstack([Z_k, Z_prev]), K)
    return float(np.max(np.abs(np.linalg.eigvalsh(core))))


def delta_factor_bound(Z_k, Z_prev):
    """Factor-difference bound on ``||Z_k Z_k^T - Z_prev Z_prev^T||_F``.

    Both factors must be in the eigen convention ``U diag(s)^{1/2}``
    (orthonormal ``U``). The narrower one is zero padded and every column
    is sign fixed (largest-magnitude entry positive) before differencing.
    Returns ``||D S_k||_F + ||D S_prev||_F`` with ``D = Z_k - Z_prev`` and
    ``S`` the diagonal of column norms.
    """
    Z_k, Z_prev = _fix_signs(np.asarray(Z_k, float)), _fix_signs(np.asarray(Z_prev, float))
    n, w = Z_k.shape[0], max(Z_k.shape[1], Z_prev.shape[1])
    Z_k, Z_prev = (np.hstack([Z, np.zeros((n, w - Z.shape[1]))]) for Z in (Z_k, Z_prev))
    D = Z_k - Z_prev
    return float(np.linalg.norm(D * np.linalg.norm(Z_k, axis=0))
                 + np.linalg.norm(D * np.linalg.norm(Z_prev, axis=0)))


def solve_gle(problem, tol, opts=None):
    """Solve a GLE to spectral-norm accuracy ``tol``.

    Parameters
    ----------
    problem : GleProblem
    tol : float
        Target for the certified bound on ``||X - Z Z^T||_2``.
    opts : GleOptions, optional

    Returns
    -------
    CertifiedGleSolution
        ``problem`` on the result is the (possibly rescaled) equation that was
        actually solved.

    Raises
    ------
    ConvergenceError
        If ``max_outer`` iterations do not meet the tolerance; ``best`` holds
        the last solution.
    """
    tol = check_positive(tol, "tol")
    opts = opts or GleOptions()
    n = problem.n
    sigma = opts.sigma_min or _sigma_min_lower(problem.A)

    if opts.contraction is None:
        beta = contraction_upper_bound(problem, sigma)
        work = rescale_bilinear_terms(problem, beta, sigma, beta) if beta > 0 else problem
        gamma = 1.0
    else:
        c = (estimate_contraction_exact(problem) if opts.contraction == "exact"
             else float(opts.contraction))
        if not 0 <= c < 1:
            raise ValueError(f"contraction factor {c} must lie in [0, 1)")
        work, gamma = problem, c / (1.0 - c)
    terms = work.active_terms()

    if opts.inner == "dense":
        if n > opts.max_dim:
            raise DenseCapError(f"dense inner solver limited to n <= {opts.max_dim}")
        dense = DenseLyapunovSolver(work.A.toarray(), dense_cap=opts.max_dim)
    elif opts.inner != "krylov":
        raise ValueError(f"unknown inner solver {opts.inner!r}")

    floor = opts.zeta1 * (2.0 * sigma / 3.0) * tol
    bb = lowrank_symmetric_fro(work.B, np.eye(work.B.shape[1]))
    tol_lyap = max(floor, opts.zeta1 / opts.zeta2 * bb)
    if not terms:
        # a single Lyapunov solve: aim straight at the certified target
        tol_lyap = 0.5 * (2.0 * sigma) * tol / (1.0 + gamma)

    Z_prev = np.zeros((n, 0))
    residuals, deltas, tols = [], [], []
    bound = np.inf
    for k in range(1, opts.max_outer + 1):
        if k == 1:
            Bk, dropped = work.B, 0.0
        else:
            Bk = np.hstack([N @ Z_prev for N in terms] + [work.B])
            Bk, dropped = compress_within_budget(Bk, 0.1 * floor)
        # dropped <= 0.1 * floor <= 0.1 * tol_lyap, so the target stays positive
        if opts.inner == "dense":
            inner = solve_lyapunov_refined(work.A, Bk, dense)
        else:
            inner = solve_lyapunov_lowrank(work.A, Bk, tol_lyap - dropped, opts.max_dim)
        res = inner.residual_fro + dropped
        Z = inner.Z
        delta = delta_between_iterates(Z, Z_prev)
        residuals.append(res)
        deltas.append(delta)
        tols.append(tol_lyap)
        log.debug("gle iter %d: delta=%.3e res=%.3e tol_lyap=%.3e rank=%d",
                  k, delta, res, tol_lyap, Z.shape[1])
        if not terms:
            bound = (1.0 + gamma) * res / (2.0 * sigma)
            if bound <= tol:
                break
            tol_lyap *= 0.1
            continue
        if k >= 2:
            bound = gamma * delta + ((1.0 + gamma) * res + gamma * residuals[-2]) / (2.0 * sigma)
            if bound <= tol:
                break
        tol_lyap = max(floor, min(opts.zeta1 / opts.zeta2 * delta, tol_lyap))
        Z_prev = Z
    else:
        sol = CertifiedGleSolution(Z, bound, gamma, k, residuals, deltas, sigma, bound,
                                   scale_applied=work.scale_applied, inner_tolerances=tols,
                                   problem=work)
        raise ConvergenceError(f"GLE iteration did not reach tol={tol:.1e} in "
                               f"{opts.max_outer} steps (bound {bound:.3e})", best=sol)

    trunc = 0.0
    if opts.truncate and bound < tol and Z.shape[1]:
        eig = truncated_eig_psd(Z)
        keep = eig.values > tol - bound
        if not np.all(keep):
            trunc = float(eig.values[~keep].max())
        Z = eig.U[:, keep] * np.sqrt(eig.values[keep])
    return CertifiedGleSolution(Z, bound + trunc, gamma, k, residuals, deltas, sigma, bound,
                                trunc, work.scale_applied, tols, work)


def gle_residual_norm(problem, Z):
    """``||A X + X A^T + sum_j N_j X N_j^T + B B^T||_F`` for ``X = Z Z^T``,
    evaluated through a small core (no ``n x n`` temporaries)."""
    Z = check_factor(Z, problem.n, "Z")
    terms = problem.active_terms()
    k = Z.shape[1]
    F = np.hstack([Z, problem.A @ Z] + [N @ Z for N in terms] + [problem.B])
    p = F.shape[1]
    K = np.zeros((p, p))
    K[:k, k:2 * k] = np.eye(k)
    K[k:2 * k, :k] = np.eye(k)
    K[2 * k:, 2 * k:] = np.eye(p - 2 * k)
    return lowrank_symmetric_fro(F, K)


def solve_gle_dense(problem, rtol=1e-15, max_iter=5000):
    """Reference solution of a GLE by the dense fixed-point iteration
    ``X <- L^{-1}(-Pi X - B B^T)`` with Bartels-Stewart solves.

    Requires ``||L^{-1} Pi|| < 1``. Intended for ``n`` up to a few hundred.
    """
    solver = DenseLyapunovSolver(problem.A.toarray(), dense_cap=max(DENSE_CAP, problem.n))
    Ns = [N.toarray() for N in problem.active_terms()]
    W0 = problem.B @ problem.B.T
    X = solver.solve(W0)
    for _ in range(max_iter):
        Xn = solver.solve(W0 + sum(N @ X @ N.T for N in Ns))
        Xn = 0.5 * (Xn + Xn.T)
        diff = np.linalg.norm(Xn - X)
        X = Xn
        if diff <= rtol * np.linalg.norm(X):
            return X
    raise ConvergenceError("dense GLE fixed point did not converge", best=X)


def write_gle_diagnostics(path, sol, caption="GLE iteration history"):
    """CSV with one row per outer iteration."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {caption}\n")
        w = csv.writer(fh)
        w.writerow(["iteration", "delta", "inner_residual", "inner_tolerance"])
        for i, (d, r, t) in enumerate(zip(sol.delta_history, sol.inner_residuals,
                                          sol.inner_tolerances), start=1):
            w.writerow([i, f"{d:.6e}", f"{r:.6e}", f"{t:.6e}"])
        w.writerow([])
        w.writerow(["gamma", f"{sol.gamma:.6e}"])
        w.writerow(["sigma_min", f"{sol.sigma_min:.6e}"])
        w.writerow(["iteration_bound", f"{sol.iteration_bound:.6e}"])
        w.writerow(["truncation_error", f"{sol.truncation_error:.6e}"])
        w.writerow(["error_bound_2", f"{sol.error_bound_2:.6e}"])
