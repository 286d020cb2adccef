"""Lyapunov solvers: a dense Schur-based kernel and a low-rank block Krylov
Galerkin method with a cheap residual and a certified spectral-norm error.

All solvers address ``A X + X A^T + W = 0`` with ``A`` Hurwitz.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.lapack import dpstrf, dtrsyl

from ._validation import check_factor, check_square
from .exceptions import ConvergenceError, DenseCapError, UnstableModeError
from .matrix_kernel import _fix_signs, as_system_matrix

log = logging.getLogger(__name__)

DENSE_CAP = 600
DEFLATION_TOL = 1e-12


class DenseLyapunovSolver:
    """Reusable dense solver for ``A X + X A^T + W = 0``.

    The real Schur form of ``A`` is computed once; each call then costs a
    few matrix products and one quasi-triangular Sylvester solve.

    Parameters
    ----------
    A : array_like, shape (n, n)
    dense_cap : int
        Largest admissible ``n``.
    """

    def __init__(self, A, dense_cap=DENSE_CAP):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if A.shape[0] > dense_cap:
            raise DenseCapError(f"dense cap exceeded: n={A.shape[0]} > {dense_cap}")
        if not np.all(np.isfinite(A)):
            raise ValueError("A contains non-finite entries")
        self.n = A.shape[0]
        if self.n:
            self.T, self.U = sla.schur(A, output="real")
            # LAPACK standardizes 2x2 blocks to equal diagonals, so diag(T)
            # carries the real parts of all eigenvalues
            self.max_real = float(np.max(np.diag(self.T)))
        else:
            self.T = self.U = np.zeros((0, 0))
            self.max_real = -np.inf
        if self.max_real >= 0:
            raise UnstableModeError(f"unstable mode: eigenvalue real part {self.max_real:.3e}")

    def solve(self, W, transpose=False):
        """Return ``X`` with ``A X + X A^T + W = 0`` (``A^T`` instead of ``A``
        when ``transpose``)."""
        W = np.asarray(W, dtype=float)
        if W.shape != (self.n, self.n):
            raise ValueError(f"W must have shape {(self.n, self.n)}")
        if self.n == 0:
            return np.zeros((0, 0))
        F = self.U.T @ W @ self.U
        if transpose:
            Y, scale, info = dtrsyl(self.T, self.T, -F, trana="T", tranb="N")
        else:
            Y, scale, info = dtrsyl(self.T, self.T, -F, trana="N", tranb="T")
        if info < 0:
            raise ValueError(f"dtrsyl: illegal argument {-info}")
        if info == 1:
            log.warning("dtrsyl perturbed nearly common eigenvalues")
        return self.U @ (Y / scale) @ self.U.T


def solve_lyapunov_dense(A, W, dense_cap=DENSE_CAP):
    """Solve ``A X + X A^T + W = 0`` by the Bartels-Stewart method.

    Parameters
    ----------
    A : array_like, shape (n, n)
        Hurwitz matrix.
    W : array_like, shape (n, n)
        Right-hand side; if symmetric, the returned ``X`` is symmetrized.
    dense_cap : int, default 600

    Raises
    ------
    UnstableModeError
        If ``A`` has an eigenvalue with nonnegative real part.
    DenseCapError
        If ``n > dense_cap``.
    """
    X = DenseLyapunovSolver(A, dense_cap).solve(W)
    if np.allclose(W, np.transpose(W), rtol=0, atol=0):
        X = 0.5 * (X + X.T)
    return X


@dataclass
class KrylovBasis:
    """Orthonormal basis of a block Krylov space, grown block by block."""

    V: np.ndarray
    block_sizes: list = field(default_factory=list)
    breakdown: bool = False

    @property
    def dim(self):
        return self.V.shape[1]

    @property
    def depth(self):
        return len(self.block_sizes)

    @property
    def last_block(self):
        return self.V[:, self.dim - self.block_sizes[-1]:] if self.block_sizes else self.V


def _orth_deflate(W, V, ref_norm):
    """Orthogonalize ``W`` against ``V`` (two passes) and return an orthonormal
    basis for what survives the deflation threshold, plus the SVD pieces of
    the orthogonalized block."""
    if V.shape[1]:
        W = W - V @ (V.T @ W)
        W = W - V @ (V.T @ W)
    if W.shape[1] == 0:
        return np.zeros((W.shape[0], 0)), np.zeros(0), np.zeros((0, 0))
    Uw, s, Vwt = np.linalg.svd(W, full_matrices=False)
    keep = s > DEFLATION_TOL * ref_norm
    Q = Uw[:, keep]
    if V.shape[1] and Q.shape[1]:
        # directions that barely survive deflation carry rounding noise
        # amplified by ref_norm / s; one more pass on the normalized vectors
        Q = Q - V @ (V.T @ Q)
        Q, _ = np.linalg.qr(Q)
    return Q, s, Vwt


def start_block_krylov(B):
    """Orthonormal first block ``span(B)`` with rank deflation."""
    B = np.asarray(B, dtype=float)
    ref = np.linalg.norm(B, 2) if B.size else 0.0
    if ref == 0.0:
        return KrylovBasis(np.zeros((B.shape[0], 0)), [], breakdown=True)
    Q, _, _ = _orth_deflate(B, np.zeros((B.shape[0], 0)), ref)
    return KrylovBasis(Q, [Q.shape[1]])


def extend_block_krylov(A, basis, AW=None):
    """Append the next block ``A @ last_block`` (orthogonalized, deflated).

    ``AW`` may carry a precomputed ``A @ basis.last_block``. Full deflation
    of the new block marks ``breakdown``: the space is then ``A``-invariant.
    """
    if AW is None:
        AW = as_system_matrix(A) @ basis.last_block
    ref = np.linalg.norm(AW, 2) if AW.size else 0.0
    Q, _, _ = _orth_deflate(AW, basis.V, ref)
    if Q.shape[1] == 0:
        return KrylovBasis(basis.V, list(basis.block_sizes), breakdown=True)
    return KrylovBasis(np.hstack([basis.V, Q]), basis.block_sizes + [Q.shape[1]])


@dataclass
class LyapunovSolution:
    """Low-rank Lyapunov solution ``X ~ Z Z^T`` with its residual.

    ``Z`` is in the eigen-convention ``U Lambda^{1/2}`` (orthonormal ``U``,
    descending ``Lambda``). ``error_bound_2`` is ``residual_fro / (2
    sigma_min(A))`` once :func:`certify_error` has been applied.
    """

    Z: np.ndarray
    residual_fro: float
    basis_dim: int
    error_bound_2: float = np.nan
    clamped: float = 0.0


def certify_error(sol, sigma_min):
    """Attach the spectral-norm error certificate ``||R||_F / (2 sigma_min)``."""
    if not sigma_min > 0:
        raise ValueError("sigma_min must be positive")
    sol.error_bound_2 = sol.residual_fro / (2.0 * sigma_min)
    return sol


def solve_lyapunov_lowrank(A, B, fro_res_tol, max_dim=DENSE_CAP):
    """Galerkin projection onto the block Krylov space ``K_l(A, B)``.

    The projected equation is solved densely after every block. The
    Frobenius residual is evaluated without forming ``n x n`` matrices and
    the iterate with the smallest residual so far is kept.

    Parameters
    ----------
    A : sparse or dense (n, n), or SparseSystemMatrix
    B : ndarray (n, m)
    fro_res_tol : float
        Absolute target for ``||A X + X A^T + B B^T||_F``.
    max_dim : int
        Largest admissible basis dimension.

    Returns
    -------
    LyapunovSolution

    Raises
    ------
    ConvergenceError
        If ``max_dim`` is reached first. ``exc.best`` is the best iterate.
    """
    A = as_system_matrix(A)
    n = A.n
    B = check_factor(B, n, "B")
    if not fro_res_tol > 0:
        raise ValueError("fro_res_tol must be positive")
    basis = start_block_krylov(B)
    if basis.dim == 0:
        return LyapunovSolution(np.zeros((n, 0)), 0.0, 0)

    AV = np.zeros((n, 0))
    H = np.zeros((0, 0))
    best = None
    while True:
        d_old = AV.shape[1]
        last = basis.last_block
        AW = A @ last
        AV = np.hstack([AV, AW])
        V = basis.V
        # grow H = V^T A V by the new block row and column
        Hn = np.zeros((V.shape[1], V.shape[1]))
        Hn[:d_old, :d_old] = H
        Hn[:, d_old:] = V.T @ AW
        Hn[d_old:, :d_old] = last.T @ AV[:, :d_old]
        H = Hn

        # remainder of A @ last outside span(V); its SVD gives the next block
        ref = np.linalg.norm(AW, 2)
        Q, s, Vwt = _orth_deflate(AW, V, ref)

        sol = _galerkin_step(H, V, B, s, Vwt, last.shape[1])
        if sol is not None:
            if best is None or sol.residual_fro < best.residual_fro:
                best = sol
            if sol.residual_fro <= fro_res_tol:
                return sol

        if Q.shape[1] == 0:
            basis = KrylovBasis(V, basis.block_sizes, breakdown=True)
            break
        if V.shape[1] + Q.shape[1] > max_dim:
            break
        basis = KrylovBasis(np.hstack([V, Q]), basis.block_sizes + [Q.shape[1]])

    msg = (f"low-rank Lyapunov solver stopped at dimension {basis.dim} "
           f"({'invariant subspace' if basis.breakdown else 'max_dim reached'}); "
           f"best residual {best.residual_fro if best else np.inf:.3e} > {fro_res_tol:.3e}")
    raise ConvergenceError(msg, best=best)


def _galerkin_step(H, V, B, s, Vwt, last_size):
    """Solve the projected equation and return the lifted iterate, or None if
    the projected matrix is not Hurwitz."""
    Bp = V.T @ B
    try:
        Y = DenseLyapunovSolver(H, dense_cap=max(DENSE_CAP, H.shape[0])).solve(Bp @ Bp.T)
    except UnstableModeError:
        return None
    Y = 0.5 * (Y + Y.T)
    # (I - V V^T) A V Y only involves the last block rows of Y
    E = (s[:, None] * Vwt) @ Y[-last_size:, :]
    res = np.sqrt(2.0) * np.linalg.norm(E)

    lam, U = np.linalg.eigh(Y)
    neg = lam < 0
    clamped = float(np.linalg.norm(lam[neg]))
    if clamped:
        # dropping the negative part perturbs the residual by at most
        # 2 ||A V||_2 ||D||_F, and ||A V||_2 <= ||[H; E_full]||_F
        res += 2.0 * np.sqrt(np.linalg.norm(H) ** 2 + np.sum(s ** 2)) * clamped
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    pos = lam > 0
    Z = _fix_signs(V @ U[:, order][:, pos]) * np.sqrt(lam[pos])
    return LyapunovSolution(Z, float(res), V.shape[1], clamped=clamped)


# --- dense path with extended-precision residuals ------------------------------------

def _ld_spmm(A, X):
    """``A @ X`` in extended precision for sparse ``A``."""
    A = sp.coo_matrix(A)
    X = np.asarray(X, dtype=np.longdouble)
    out = np.zeros((A.shape[0], X.shape[1]), dtype=np.longdouble)
    np.add.at(out, A.row, A.data.astype(np.longdouble)[:, None] * X[A.col])
    return out


def residual_extended(A, B, X=None, Z=None):
    """``A X + X A^T + B B^T`` accumulated in extended precision, for a dense
    ``X`` or a factor ``Z`` (``X = Z Z^T``).

    In double precision the evaluation error alone is of order
    ``eps ||A|| ||X||``, which exceeds the residual targets of stiff problems.
    """
    A = A.matrix if hasattr(A, "matrix") else A
    Bl = np.asarray(B, dtype=np.longdouble)
    if Z is not None:
        AZ = _ld_spmm(A, Z)
        R = AZ @ np.asarray(Z, dtype=np.longdouble).T
    else:
        R = _ld_spmm(A, X)
    return R + R.T + Bl @ Bl.T


def psd_factor_pivoted(X):
    """Factor ``Z`` with ``Z Z^T ~ X`` by pivoted Cholesky.

    Unlike an eigendecomposition, whose absolute error is ``eps ||X||`` in
    every entry, the pivoted Cholesky error follows the entries of ``X``;
    graded Gramians keep small residuals.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    top = float(np.max(np.diag(X))) if n else 0.0
    if top <= 0:
        return np.zeros((n, 0))
    c, piv, rank, info = dpstrf(X.copy(), lower=1, tol=0.5 * np.finfo(float).eps * top)
    if info < 0:
        raise ValueError(f"dpstrf: illegal argument {-info}")
    Z = np.zeros((n, rank))
    Z[piv - 1] = np.tril(c)[:, :rank]
    return Z


def solve_lyapunov_refined(A, B, solver=None, refine_steps=1):
    """Dense Lyapunov solve with iterative refinement against an
    extended-precision residual, returned as a pivoted Cholesky factor.

    The reported ``residual_fro`` is that of the returned factor, evaluated
    in extended precision. ``solver`` may carry a prebuilt
    :class:`DenseLyapunovSolver` of ``A``.
    """
    A = as_system_matrix(A)
    B = check_factor(B, A.n, "B")
    solver = solver or DenseLyapunovSolver(A.toarray())
    X = solver.solve(B @ B.T)
    X = 0.5 * (X + X.T)
    for _ in range(refine_steps):
        D = solver.solve(np.asarray(residual_extended(A, B, X=X), dtype=float))
        X = X + 0.5 * (D + D.T)
    Z = psd_factor_pivoted(X)
    R = residual_extended(A, B, Z=Z)
    res = float(np.sqrt(np.sum(R * R)))
    return LyapunovSolution(Z, res, A.n)
