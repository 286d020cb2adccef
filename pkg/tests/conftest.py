"""Shared oracles and random problem generators for the test suite.

The oracles here are deliberately naive (dense Kronecker solves, full SVDs)
so that they share no code path with the package.
"""

import numpy as np
import pytest


def _dense(M):
    return M.toarray() if hasattr(M, "toarray") else np.asarray(M, float)


def kron_gle_solve(A, N_list, B):
    """Dense solution of ``A X + X A^T + sum N X N^T + B B^T = 0`` through the
    ``n^2 x n^2`` Kronecker system (column-major vec)."""
    A = _dense(A)
    n = A.shape[0]
    eye = np.eye(n)
    L = np.kron(eye, A) + np.kron(A, eye)
    for N in N_list:
        N = _dense(N)
        L += np.kron(N, N)
    rhs = -(B @ B.T).ravel(order="F")
    X = np.linalg.solve(L, rhs).reshape((n, n), order="F")
    return 0.5 * (X + X.T)


def kron_contraction(A, N_list):
    """``||L^{-1} Pi||_2`` on vec(R^{n x n}) from the assembled operators."""
    A = _dense(A)
    n = A.shape[0]
    eye = np.eye(n)
    L = np.kron(eye, A) + np.kron(A, eye)
    Pi = sum(np.kron(_dense(N), _dense(N)) for N in N_list)
    return float(np.linalg.norm(np.linalg.solve(L, Pi), 2))


def random_hurwitz(rng, n, margin=0.5):
    """Random dense matrix shifted so that its spectral abscissa is ``-margin``."""
    M = rng.standard_normal((n, n)) / np.sqrt(n)
    return M - (np.max(np.linalg.eigvals(M).real) + margin) * np.eye(n)


def random_dissipative(rng, n, margin=0.3):
    """Random matrix whose symmetric part has largest eigenvalue ``-margin``."""
    M = rng.standard_normal((n, n)) / np.sqrt(n)
    return M - (np.linalg.eigvalsh(0.5 * (M + M.T))[-1] + margin) * np.eye(n)


def principal_angle(U1, U2):
    """Largest principal angle between the column spaces of two bases."""
    Q1, _ = np.linalg.qr(U1)
    Q2, _ = np.linalg.qr(U2)
    s = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
