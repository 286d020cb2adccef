import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import kron_contraction, kron_gle_solve, principal_angle, random_hurwitz
from glemor.balancing import gle_problems
from glemor.exceptions import ConvergenceError, DenseCapError
from glemor.experiments import gen_synthetic
from glemor.gle import (
    GleOptions,
    GleProblem,
    contraction_upper_bound,
    delta_between_iterates,
    delta_factor_bound,
    estimate_contraction_exact,
    gle_residual_norm,
    rescale_bilinear_terms,
    solve_gle,
    solve_gle_dense,
    write_gle_diagnostics,
)
from glemor.matrix_kernel import eigen_factor


def random_gle(rng, n, m=2, n_terms=1, weight=0.5):
    A = random_hurwitz(rng, n, margin=rng.uniform(0.3, 1.0))
    Ns = [weight * rng.standard_normal((n, n)) / np.sqrt(n) for _ in range(n_terms)]
    return GleProblem(A, Ns, rng.standard_normal((n, m)))


def dense_gle_residual(problem, X):
    A = problem.A.toarray()
    R = A @ X + X @ A.T + problem.B @ problem.B.T
    for N in problem.N_list:
        N = N.toarray()
        R += N @ X @ N.T
    return np.linalg.norm(R)


# --- contraction estimates and rescaling ------------------------------------------

def test_contraction_bound_trivial_cases():
    n = 5
    assert contraction_upper_bound(GleProblem(-sp.eye(n), [sp.csr_matrix((n, n))],
                                              np.ones((n, 1)))) == 0.0
    N = np.zeros((n, n))
    N[0, 1] = 1.0
    beta = contraction_upper_bound(GleProblem(-sp.eye(n), [N], np.ones((n, 1))))
    assert beta == pytest.approx(0.5, rel=1e-4)


def test_contraction_bound_dominates_kronecker_norm():
    reach, _ = gle_problems(gen_synthetic(50), 0)
    exact = kron_contraction(reach.A.toarray(), reach.N_list)
    assert contraction_upper_bound(reach) >= exact


def test_rescale_halves_with_beta_three():
    n = 4
    N = sp.random(n, n, density=0.8, random_state=1, format="csr")
    p = GleProblem(-sp.eye(n), [N], np.ones((n, 1)))
    q = rescale_bilinear_terms(p, 1.0, beta=3.0)
    np.testing.assert_allclose(q.N_list[0].toarray(), 0.5 * N.toarray())
    assert q.scale_applied == pytest.approx(0.5)


def test_rescale_without_bilinear_terms_is_noop():
    n = 4
    p = GleProblem(-sp.eye(n), [sp.csr_matrix((n, n))], np.ones((n, 1)))
    q = rescale_bilinear_terms(p, 0.0)
    assert q.scale_applied == 1.0
    assert q.N_list[0].nnz == 0


def test_rescaled_synthetic_contraction_at_most_half():
    reach, _ = gle_problems(gen_synthetic(200), 0)
    beta = contraction_upper_bound(reach)
    scaled = rescale_bilinear_terms(reach, beta, beta=beta)
    assert contraction_upper_bound(scaled) <= 0.5 * (1 + 1e-5)


def test_exact_contraction_trivial_cases():
    n = 4
    p0 = GleProblem(-sp.eye(n), [sp.csr_matrix((n, n))], np.ones((n, 1)))
    assert estimate_contraction_exact(p0) == 0.0
    p1 = GleProblem(-sp.eye(n), [sp.eye(n)], np.ones((n, 1)))
    assert estimate_contraction_exact(p1) == pytest.approx(0.5, rel=1e-8)


def test_exact_contraction_matches_kronecker(rng):
    p = random_gle(rng, 9, n_terms=2)
    ref = kron_contraction(p.A.toarray(), p.N_list)
    assert estimate_contraction_exact(p, rtol=1e-10) == pytest.approx(ref, rel=1e-7)


def test_exact_contraction_size_guard():
    n = 401
    p = GleProblem(-sp.eye(n), [sp.eye(n)], np.ones((n, 1)))
    with pytest.raises(DenseCapError):
        estimate_contraction_exact(p)


# --- iterate differences ---------------------------------------------------------------

def test_delta_trivial_cases(rng):
    Z = eigen_factor(rng.standard_normal((6, 2)))
    assert delta_between_iterates(Z, Z) == pytest.approx(0.0, abs=1e-14)
    assert delta_factor_bound(Z, Z) == 0.0
    e1 = np.eye(6, 1)
    assert delta_between_iterates(e1, np.zeros((6, 0))) == pytest.approx(1.0)
    assert delta_factor_bound(e1, np.zeros((6, 0))) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 6),
       st.floats(0.0, 1.0))
def test_factor_difference_inequality(seed, k1, k2, closeness):
    rng = np.random.default_rng(seed)
    n = 30
    Y = rng.standard_normal((n, k1))
    Zp = eigen_factor(Y[:, :min(k1, k2)] + 0.1 * rng.standard_normal((n, min(k1, k2)))
                      if k2 else np.zeros((n, 0)))
    Zk = eigen_factor(Y + (1 - closeness) * rng.standard_normal((n, k1)))
    fro = np.linalg.norm(Zk @ Zk.T - Zp @ Zp.T)
    two = np.linalg.norm(Zk @ Zk.T - Zp @ Zp.T, 2)
    scale = 1e-12 * max(1.0, fro)
    assert delta_between_iterates(Zk, Zp) == pytest.approx(two, abs=scale)
    assert fro <= delta_factor_bound(Zk, Zp) + scale


# --- the solver ---------------------------------------------------------------------

def test_gle_without_bilinear_terms_is_one_lyapunov_solve():
    S = gen_synthetic(40)
    p = GleProblem(S.A[1], [sp.csr_matrix((40, 40))], S.B[1])
    sol = solve_gle(p, 1e-8)
    assert sol.iterations == 1
    assert sol.error_bound_2 <= 1e-8
    expected = (1 + sol.gamma) * sol.inner_residuals[0] / (2 * sol.sigma_min)
    assert sol.iteration_bound == pytest.approx(expected)
    X = sla.solve_continuous_lyapunov(S.A[1].toarray(), -S.B[1] @ S.B[1].T)
    assert np.linalg.norm(X - sol.Z @ sol.Z.T, 2) <= sol.error_bound_2 + 1e-15


def test_gle_zero_input():
    S = gen_synthetic(20)
    reach, _ = gle_problems(S, 0)
    p = GleProblem(reach.A, reach.N_list, np.zeros((20, 2)))
    sol = solve_gle(p, 1e-8)
    assert sol.Z.shape == (20, 0)
    assert sol.error_bound_2 == 0.0


def test_gle_stored_parts_reproduce_bound():
    reach, _ = gle_problems(gen_synthetic(60), 0)
    sol = solve_gle(reach, 1e-8)
    assert sol.recompute_bound() == sol.error_bound_2
    g = sol.gamma
    r = sol.inner_residuals
    manual = g * sol.delta_history[-1] + ((1 + g) * r[-1] + g * r[-2]) / (2 * sol.sigma_min)
    assert manual + sol.truncation_error == sol.error_bound_2


def test_gle_certificate_against_kronecker_oracle_synthetic():
    n = 50
    for prob in gle_problems(gen_synthetic(n), 0):
        X = kron_gle_solve(prob.A.toarray(), prob.N_list, prob.B)
        for tol in (1e-4, 1e-8):
            sol = solve_gle(prob, tol, GleOptions(contraction="exact"))
            err = np.linalg.norm(X - sol.Z @ sol.Z.T, 2)
            assert sol.error_bound_2 <= tol
            assert err <= sol.error_bound_2


def test_gle_gamma_modes():
    reach, _ = gle_problems(gen_synthetic(30), 0)
    assert solve_gle(reach, 1e-6).gamma == 1.0
    sol = solve_gle(reach, 1e-6, GleOptions(contraction=0.6))
    assert sol.gamma == pytest.approx(1.5)
    assert sol.scale_applied == 1.0
    with pytest.raises(ValueError):
        solve_gle(reach, 1e-6, GleOptions(contraction=1.2))


def test_gle_iteration_cap_reports_best():
    reach, _ = gle_problems(gen_synthetic(40), 0)
    with pytest.raises(ConvergenceError) as info:
        solve_gle(reach, 1e-12, GleOptions(max_outer=2))
    assert info.value.best.iterations == 2


def test_dense_inner_solver_agrees_with_krylov():
    reach, _ = gle_problems(gen_synthetic(40), 0)
    a = solve_gle(reach, 1e-9, GleOptions(contraction="exact"))
    b = solve_gle(reach, 1e-9, GleOptions(contraction="exact", inner="dense"))
    assert np.linalg.norm(a.Z @ a.Z.T - b.Z @ b.Z.T, 2) <= a.error_bound_2 + b.error_bound_2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 30), st.integers(1, 2),
       st.sampled_from([1e-3, 1e-6, 1e-9]))
def test_certificate_soundness_property(seed, n, n_terms, tol):
    rng = np.random.default_rng(seed)
    p = random_gle(rng, n, n_terms=n_terms, weight=rng.uniform(0.1, 2.0))
    sol = solve_gle(p, tol)
    solved = sol.problem
    X = kron_gle_solve(solved.A.toarray(), solved.N_list, solved.B)
    err = np.linalg.norm(X - sol.Z @ sol.Z.T, 2)
    assert err <= sol.error_bound_2 + 1e-13 * np.linalg.norm(X, 2)


def test_exact_fixed_point_iterates_are_dominated(rng):
    n = 12
    p = random_gle(rng, n, n_terms=2)
    A = p.A.toarray()
    Ns = [N.toarray() for N in p.N_list]
    X = kron_gle_solve(A, Ns, p.B)
    Xk = np.zeros((n, n))
    for _ in range(30):
        W = p.B @ p.B.T + sum(N @ Xk @ N.T for N in Ns)
        Xk = sla.solve_continuous_lyapunov(A, -W)
        assert np.linalg.eigvalsh(X - Xk)[0] >= -1e-10


@pytest.mark.parametrize("n", [20, 60])
def test_certified_solution_dominated_at_tight_tolerance(n):
    for prob in gle_problems(gen_synthetic(n), 0):
        X = kron_gle_solve(prob.A.toarray(), prob.N_list, prob.B)
        sol = solve_gle(prob, 1e-10, GleOptions(contraction="exact"))
        assert np.linalg.eigvalsh(X - sol.Z @ sol.Z.T)[0] >= -1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 40))
def test_rescaling_keeps_column_space(seed, n):
    rng = np.random.default_rng(seed)
    p = random_gle(rng, n, m=1, weight=0.3)
    c = estimate_contraction_exact(p)
    unscaled = solve_gle(p, 1e-11, GleOptions(contraction=c, truncate=False))
    scaled = solve_gle(p, 1e-11)
    r = min(np.linalg.matrix_rank(unscaled.Z, 1e-8), np.linalg.matrix_rank(scaled.Z, 1e-8))
    U1 = np.linalg.svd(unscaled.Z, full_matrices=False)[0][:, :r]
    U2 = np.linalg.svd(scaled.Z, full_matrices=False)[0][:, :r]
    assert principal_angle(U1, U2) <= 1e-6


# --- residual norms and reference solutions ---------------------------------------------

def test_residual_norm_of_exact_solution(rng):
    p = random_gle(rng, 8)
    X = kron_gle_solve(p.A.toarray(), p.N_list, p.B)
    lam, U = np.linalg.eigh(X)
    Z = U * np.sqrt(np.clip(lam, 0, None))
    assert gle_residual_norm(p, Z) < 1e-10


def test_residual_norm_zero_case():
    p = GleProblem(-sp.eye(5), [sp.eye(5)], np.zeros((5, 1)))
    assert gle_residual_norm(p, np.zeros((5, 0))) == 0.0


def test_residual_norm_matches_dense_for_iterate():
    reach, _ = gle_problems(gen_synthetic(50), 0)
    sol = solve_gle(reach, 1e-4)
    X = sol.Z @ sol.Z.T
    dense = dense_gle_residual(sol.problem, X)
    assert gle_residual_norm(sol.problem, sol.Z) == pytest.approx(dense, rel=1e-8)


def test_dense_reference_matches_kronecker(rng):
    p = random_gle(rng, 10, n_terms=2)
    np.testing.assert_allclose(solve_gle_dense(p), kron_gle_solve(p.A.toarray(), p.N_list, p.B),
                               atol=1e-12)


def test_diagnostics_csv(tmp_path):
    reach, _ = gle_problems(gen_synthetic(30), 0)
    sol = solve_gle(reach, 1e-6)
    path = tmp_path / "diag.csv"
    write_gle_diagnostics(path, sol, "diag")
    lines = path.read_text().splitlines()
    assert lines[0] == "# diag"
    assert lines[1] == "iteration,delta,inner_residual,inner_tolerance"
    assert len(lines) == 2 + sol.iterations + 1 + 5
    assert lines[-1].startswith("error_bound_2,")
