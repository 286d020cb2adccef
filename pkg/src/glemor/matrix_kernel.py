"""Sparse operator wrappers, low-rank PSD factors and spectral estimators.

Everything that the solvers need from linear algebra lives here: a sparse
matrix with a cached LU factorization, extreme singular value estimates,
eigen-decompositions of ``Z @ Z.T`` that never form the ``n x n`` product,
factor compression, and file IO (Matrix Market plus a raw factor blob).
"""

import logging
import struct
import threading
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_factor, check_square
from .exceptions import ConvergenceError, SingularOperatorError

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps
# below this size the extreme-value estimators fall back to a dense SVD
_TINY = 3


class SparseSystemMatrix:
    """Square sparse matrix with a lazily computed, cached sparse LU.

    Parameters
    ----------
    data : array_like or sparse matrix or SparseSystemMatrix
        Square real matrix. Stored in CSR format.
    """

    def __init__(self, data):
        if isinstance(data, SparseSystemMatrix):
            data = data.matrix
        self.matrix = check_square(sp.csr_matrix(data, dtype=float), "system matrix")
        self._lu = None
        self._lock = threading.Lock()

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def T(self):
        return SparseSystemMatrix(self.matrix.T)

    def __matmul__(self, other):
        return self.matrix @ other

    def __rmatmul__(self, other):
        return other @ self.matrix

    def toarray(self):
        return self.matrix.toarray()

    def lu(self):
        """Return the cached sparse LU factorization, computing it on first use."""
        with self._lock:
            if self._lu is None:
                try:
                    self._lu = spla.splu(self.matrix.tocsc())
                except RuntimeError as exc:
                    raise SingularOperatorError(f"singular operator: {exc}") from exc
                diag = np.abs(self._lu.U.diagonal())
                if diag.size and diag.min() <= _EPS * diag.max() * self.n:
                    self._lu = None
                    raise SingularOperatorError("singular operator: LU pivot underflow")
            return self._lu

    def solve(self, b, transpose=False):
        """Solve ``A x = b`` (or ``A.T x = b``) with the cached LU."""
        x = self.lu().solve(np.asarray(b, dtype=float), trans="T" if transpose else "N")
        if not np.all(np.isfinite(x)):
            raise SingularOperatorError("singular operator: non-finite solve result")
        return x


def as_system_matrix(a):
    return a if isinstance(a, SparseSystemMatrix) else SparseSystemMatrix(a)


def _as_operator(a):
    if isinstance(a, SparseSystemMatrix):
        return a.matrix
    if isinstance(a, spla.LinearOperator) or sp.issparse(a):
        return a
    return np.asarray(a, dtype=float)


def _top_eig(op, n, rtol, what, max_steps=None):
    """Largest eigenvalue of a symmetric PSD operator.

    Lanczos with full reorthogonalization. Only the eigenvalue is needed,
    and it settles long before the eigenvector when the top of the spectrum
    is clustered. The stopping test extrapolates the change of the top Ritz
    value over a block of steps assuming the slow ``1/k^2`` rate of that
    case, so ``rtol`` estimates the relative error from below the true value.
    """
    max_steps = min(n, max_steps or 300)
    block = 10
    Q = np.empty((n, max_steps + 1))
    q = np.ones(n) / np.sqrt(n)
    Q[:, 0] = q
    alpha, beta = [], []
    prev = None
    for k in range(max_steps):
        w = np.asarray(op.matvec(Q[:, k]), dtype=float).ravel()
        alpha.append(float(Q[:, k] @ w))
        w -= Q[:, :k + 1] @ (Q[:, :k + 1].T @ w)
        w -= Q[:, :k + 1] @ (Q[:, :k + 1].T @ w)
        b = float(np.linalg.norm(w))
        done = b <= _EPS * max(abs(alpha[-1]), 1.0) * 10
        if (k + 1) % block == 0 or done or k + 1 == max_steps:
            theta = float(sla.eigvalsh_tridiagonal(np.array(alpha), np.array(beta),
                                                   select="i", select_range=(k, k))[0])
            if done or k + 1 == n:
                return theta
            if prev is not None and abs(theta - prev) * (k + 1) / (2 * block) <= rtol * abs(theta):
                return theta
            prev = theta
        beta.append(b)
        Q[:, k + 1] = w / b
    raise ConvergenceError(f"{what} did not converge in {max_steps} Lanczos steps",
                           estimate=prev)


def smallest_singular_value(a, rtol=1e-10):
    """Estimate ``sigma_min(A)`` by Lanczos on ``A^{-1} A^{-T}``.

    The inverse is applied through the cached sparse LU of ``A``.

    Raises
    ------
    SingularOperatorError
        If ``A`` is numerically singular.
    ConvergenceError
        If the eigen-iteration stalls; ``estimate`` holds the last value of
        ``sigma_min`` when available.
    """
    a = as_system_matrix(a)
    n = a.n
    if n < _TINY:
        s = np.linalg.svd(a.toarray(), compute_uv=False)
        if s[-1] <= _EPS * s[0] * n:
            raise SingularOperatorError("singular operator")
        return float(s[-1])
    a.lu()
    op = spla.LinearOperator((n, n), dtype=float,
                             matvec=lambda x: a.solve(a.solve(x, transpose=True)))
    try:
        lam = _top_eig(op, n, rtol, "smallest singular value")
    except ConvergenceError as exc:
        if exc.estimate:
            exc.estimate = exc.estimate ** -0.5
        raise
    return lam ** -0.5


def spectral_norm(a, rtol=1e-10, max_steps=None):
    """Estimate ``||A||_2`` by Lanczos on ``A^T A``. ``A`` may be rectangular.

    If Lanczos runs out of steps on an explicit matrix, the result is the
    upper bound ``sqrt(||A||_1 ||A||_inf)`` instead.
    """
    a = _as_operator(a)
    m, n = a.shape
    if min(m, n) == 0:
        return 0.0
    if min(m, n) < _TINY or not (sp.issparse(a) or isinstance(a, spla.LinearOperator)) and n <= 64:
        dense = a.toarray() if sp.issparse(a) else (a @ np.eye(n) if isinstance(a, spla.LinearOperator) else a)
        return float(np.linalg.norm(dense, 2))
    at = a.T.tocsr() if sp.issparse(a) else a.T
    op = spla.LinearOperator((n, n), dtype=float, matvec=lambda x: at @ (a @ x))
    try:
        return float(np.sqrt(max(_top_eig(op, n, rtol, "spectral norm", max_steps), 0.0)))
    except ConvergenceError:
        if isinstance(a, spla.LinearOperator):
            raise
    absa = abs(a)
    one = float(absa.sum(axis=0).max())
    inf = float(absa.sum(axis=1).max())
    log.info("spectral norm: Lanczos budget exhausted, using sqrt(||A||_1 ||A||_inf)")
    return float(np.sqrt(one * inf))


def condition_number(a, norm=2, rtol=1e-10):
    """Condition number of a square nonsingular matrix.

    ``norm=2`` gives ``sigma_max / sigma_min``. ``norm=1`` gives
    ``||A||_1 ||A^{-1}||_1`` with the inverse norm from the block 1-norm
    estimator (exact for small ``n``).
    """
    a = as_system_matrix(a)
    if norm == 2:
        return spectral_norm(a, rtol) / smallest_singular_value(a, rtol)
    if norm == 1:
        n = a.n
        norm_a = float(abs(a.matrix).sum(axis=0).max())
        inv = spla.LinearOperator((n, n), dtype=float, matvec=a.solve,
                                  rmatvec=lambda x: a.solve(x, transpose=True))
        if n <= 8:
            norm_inv = float(np.abs(a.solve(np.eye(n))).sum(axis=0).max())
        else:
            norm_inv = float(spla.onenormest(inv, t=min(8, n)))
        return norm_a * norm_inv
    raise ValueError("norm must be 1 or 2")


def dissipativity_margin(a):
    """Largest eigenvalue of the symmetric part ``(A + A^T) / 2``.

    Negative means ``A`` is dissipative.
    """
    m = _as_operator(a)
    if isinstance(m, np.ndarray):
        return float(np.linalg.eigvalsh(0.5 * (m + m.T))[-1])
    m = sp.csr_matrix(m)
    sym = (0.5 * (m + m.T)).tocsr()
    n = sym.shape[0]
    if n <= 400:
        return float(np.linalg.eigvalsh(sym.toarray())[-1])
    v0 = np.ones(n) / np.sqrt(n)
    return float(spla.eigsh(sym, k=1, which="LA", v0=v0, tol=1e-12,
                            return_eigenvectors=False)[0])


@dataclass
class TruncatedEig:
    """Eigenpairs ``U diag(values) U^T`` of a PSD matrix, values descending."""

    U: np.ndarray
    values: np.ndarray

    @property
    def factor(self):
        """Factor in the eigen-convention ``U diag(values)^{1/2}``."""
        return self.U * np.sqrt(self.values)

    @property
    def rank(self):
        return self.values.size


@dataclass
class LowRankPsd:
    """The PSD matrix ``Z Z^T + shift * I`` kept in factored form."""

    Z: np.ndarray
    shift: float = 0.0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim == 1:
            self.Z = self.Z.reshape(-1, 1)
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    @property
    def n(self):
        return self.Z.shape[0]

    @property
    def rank(self):
        return self.Z.shape[1]

    def matvec(self, v):
        return self.Z @ (self.Z.T @ v) + self.shift * v

    def eig(self, drop_tol=0.0):
        """Eigenpairs of the low-rank part ``Z Z^T`` (the shift is not included)."""
        return truncated_eig_psd(self.Z, drop_tol)

    def to_dense(self, cap=4000):
        if self.n > cap:
            raise ValueError(f"refusing to densify a {self.n} x {self.n} matrix")
        return self.Z @ self.Z.T + self.shift * np.eye(self.n)


def _fix_signs(U):
    if U.size:
        idx = np.argmax(np.abs(U), axis=0)
        signs = np.sign(U[idx, np.arange(U.shape[1])])
        signs[signs == 0] = 1.0
        U = U * signs
    return U


def truncated_eig_psd(Z, drop_tol=0.0):
    """Eigenpairs of ``Z Z^T`` from a thin QR of ``Z`` and an SVD of its ``R``.

    Eigenvalues ``<= drop_tol`` (absolute) and numerically zero ones are
    dropped. Each eigenvector is signed so that its largest-magnitude entry
    is positive.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    n, k = Z.shape
    if k == 0 or n == 0 or not np.any(Z):
        return TruncatedEig(np.zeros((n, 0)), np.zeros(0))
    Q, R = sla.qr(Z, mode="economic", check_finite=False)
    Ur, s, _ = sla.svd(R, full_matrices=False, check_finite=False)
    keep = s > max(n, k) * _EPS * s[0]
    vals = s[keep] ** 2
    keep2 = vals > drop_tol
    U = Q @ Ur[:, keep][:, keep2]
    return TruncatedEig(_fix_signs(U), vals[keep2])


def eigen_factor(Z, drop_tol=0.0):
    """Re-express ``Z`` in the eigen-convention ``U Sigma^{1/2}`` (same ``Z Z^T``)."""
    return truncated_eig_psd(Z, drop_tol).factor


def compress_factor(Z, rel_tol=0.0):
    """Shortest factor ``Z'`` with ``||Z Z^T - Z' Z'^T||_2 <= rel_tol ||Z Z^T||_2``.

    With ``rel_tol = 0`` the column count equals the numerical rank.
    """
    Z = np.asarray(Z, dtype=float)
    eig = truncated_eig_psd(Z)
    if eig.rank == 0:
        return np.zeros((Z.shape[0], 0))
    keep = eig.values > rel_tol * eig.values[0]
    return eig.U[:, keep] * np.sqrt(eig.values[keep])


def compress_within_budget(Z, fro_budget):
    """Drop the smallest eigen-directions of ``Z Z^T`` while the discarded part
    stays within ``fro_budget`` in the Frobenius norm.

    Returns
    -------
    Zc : ndarray
        Compressed factor in the eigen-convention.
    dropped : float
        Frobenius norm of ``Z Z^T - Zc Zc^T``.
    """
    eig = truncated_eig_psd(Z)
    if eig.rank == 0:
        return np.zeros((np.shape(Z)[0], 0)), 0.0
    tail = np.sqrt(np.cumsum(eig.values[::-1] ** 2))[::-1]   # tail[i] = ||values[i:]||
    ndrop = int(np.sum(tail <= fro_budget))
    keep = eig.rank - ndrop
    dropped = float(tail[keep]) if ndrop else 0.0
    return eig.U[:, :keep] * np.sqrt(eig.values[:keep]), dropped


def lowrank_symmetric_core(F, K):
    """Reduce ``F K F^T`` (``F`` tall, ``K`` symmetric) to a small core.

    Returns ``(Q, core)`` with orthonormal ``Q`` such that
    ``F K F^T = Q core Q^T``.
    """
    F = np.asarray(F, dtype=float)
    Q, R = sla.qr(F, mode="economic", check_finite=False)
    core = R @ K @ R.T
    return Q, 0.5 * (core + core.T)


def lowrank_symmetric_eigh(F, K):
    """Nonzero eigenpairs of ``F K F^T``, eigenvalues in descending order.

    The remaining ``n - Q.shape[1]`` eigenvalues are exactly zero.
    """
    Q, core = lowrank_symmetric_core(F, K)
    w, v = np.linalg.eigh(core)
    return w[::-1], Q @ v[:, ::-1]


def lowrank_symmetric_max_eig(F, K):
    Q, core = lowrank_symmetric_core(F, K)
    top = float(np.linalg.eigvalsh(core)[-1]) if core.size else 0.0
    if Q.shape[1] < Q.shape[0]:
        top = max(top, 0.0)
    return top


def lowrank_symmetric_fro(F, K):
    return float(np.linalg.norm(lowrank_symmetric_core(F, K)[1]))


# --- file IO -----------------------------------------------------------------

def read_matrix_market(path):
    """Read a Matrix Market file; coordinate files come back as CSR."""
    m = scipy.io.mmread(str(path))
    return sp.csr_matrix(m) if sp.issparse(m) else np.asarray(m, dtype=float)


def write_matrix_market(path, m, comment=""):
    if isinstance(m, SparseSystemMatrix):
        m = m.matrix
    if not sp.issparse(m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
    scipy.io.mmwrite(str(path), m, comment=comment)


_BLOB_HEADER = struct.Struct("<II")


def write_factor_blob(path, Z):
    """Write a dense factor: little-endian ``(n, k)`` uint32 header, then
    column-major float64 data."""
    Z = np.asarray(Z, dtype="<f8")
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    n, k = Z.shape
    with open(path, "wb") as fh:
        fh.write(_BLOB_HEADER.pack(n, k))
        fh.write(Z.tobytes(order="F"))


def read_factor_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _BLOB_HEADER.size:
        raise ValueError("factor blob truncated before header end")
    n, k = _BLOB_HEADER.unpack_from(raw)
    body = raw[_BLOB_HEADER.size:]
    if len(body) != 8 * n * k:
        raise ValueError(f"factor blob size mismatch: header says {n}x{k}, "
                         f"payload has {len(body)} bytes")
    Z = np.frombuffer(body, dtype="<f8").reshape((n, k), order="F").astype(float)
    return check_factor(Z, n, "factor blob")
