"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are written to the
terminal even when output is captured) or ``python3 tests/test_acceptance.py``.
The Black-Scholes criteria use the reduced-cost size n = 400.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import kron_gle_solve
from glemor.balancing import (
    gle_problems,
    hankel_spectrum,
    lmi_max_eig,
    shift_gramian,
)
from glemor.experiments import (
    ExperimentConfig,
    _Runner,
    dense_psd_factor,
    gen_synthetic,
    loglog_slope,
    run_experiment,
    timing_sweep,
)
from glemor.gle import GleOptions, estimate_contraction_exact, solve_gle, solve_gle_dense
from glemor.matrix_kernel import LowRankPsd, condition_number

ROOT = Path(__file__).resolve().parents[1]
LADDER = [1e-2, 1e-4, 1e-6, 1e-8, 1e-10]

# reference values: lambda_1 of the reachability LMI per mode, before/after the shift
TABLE1 = {
    1e-2: (1.0e-3, -3.0e-2, 1.2e-3, -8.4e-2),
    1e-4: (1.6e-5, -3.0e-4, 7.6e-6, -8.4e-4),
    1e-6: (3.8e-8, -3.0e-6, 4.8e-8, -8.4e-6),
    1e-8: (1.3e-9, -3.0e-8, 1.7e-9, -8.4e-8),
}


def record(request, number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    cfg = ExperimentConfig.from_ini(ROOT / "configs" / "synthetic.ini",
                                    out_dir=str(tmp_path_factory.mktemp("synthetic")))
    t0 = time.perf_counter()
    report = run_experiment(ExperimentConfig(**{**cfg.__dict__, "stages": ["bt"]}))
    report.bt_seconds = time.perf_counter() - t0
    return report


@pytest.fixture(scope="module")
def black_scholes(tmp_path_factory):
    cfg = ExperimentConfig.from_ini(ROOT / "configs" / "black_scholes.ini",
                                    out_dir=str(tmp_path_factory.mktemp("bs")))
    t0 = time.perf_counter()
    report = run_experiment(cfg)
    report.seconds = time.perf_counter() - t0
    return report


def test_criterion_01_certificate_soundness(request):
    t0 = time.perf_counter()
    S = gen_synthetic(50)
    ratios, worst = [], 0.0
    for problem in gle_problems(S, 0):
        X = kron_gle_solve(problem.A, problem.N_list, problem.B)
        for tol in LADDER:
            sol = solve_gle(problem, tol, GleOptions(contraction="exact"))
            err = np.linalg.norm(X - sol.Z @ sol.Z.T, 2)
            worst = max(worst, err / tol)
            ratios.append(tol / err)
    sharp = np.mean(np.array(ratios) < 10)
    secs = time.perf_counter() - t0
    ok = worst <= 1 and sharp >= 0.8 and secs < 60
    record(request, 1, ok, f"max err/tol {worst:.3f}, share of tol/err < 10: {sharp:.0%}, "
           f"{secs:.1f}s")


def test_criterion_02_exact_contraction(request):
    t0 = time.perf_counter()
    reach, _ = gle_problems(gen_synthetic(200), 0)
    c = estimate_contraction_exact(reach)
    gamma = c / (1 - c)
    secs = time.perf_counter() - t0
    ok = abs(c - 0.8098) <= 1e-3 and abs(gamma - 4.2576) <= 5e-3 and secs < 300
    record(request, 2, ok, f"contraction {c:.5f}, gamma {gamma:.4f}, {secs:.1f}s")


def test_criterion_03_condition_numbers(request):
    S = gen_synthetic(200)
    # the reference values are 1-norm condition numbers; the 2-norm ones are shown alongside
    k1, k2 = (condition_number(A, 1) for A in S.A)
    s1, s2 = (condition_number(A, 2) for A in S.A)
    ok = abs(k1 - 3) <= 1e-6 and abs(k2 - 2.4136) <= 1e-3
    record(request, 3, ok, f"kappa_1(A1) = {k1:.8f}, kappa_1(A2) = {k2:.5f} "
           f"(2-norm: {s1:.5f}, {s2:.5f})")


def test_criterion_04_table1(request):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.from_ini(ROOT / "configs" / "synthetic.ini")
    runner = _Runner(cfg)
    S = runner.system()
    problems, notes = [], []
    for tol, ref in TABLE1.items():
        P = runner.monolithic(tol).P
        Ph, mu = shift_gramian(P, tol, S.A)
        got = []
        for A, B in zip(S.A, S.B):
            got += [lmi_max_eig(A, P, B, "reach"), lmi_max_eig(A, Ph, B, "reach")]
        notes.append(f"{tol:.0e}: mu {mu:.2e} " + " ".join(f"{v:.2e}" for v in got))
        if mu != 3 * tol:
            problems.append(f"mu {mu!r} != 3 tol at {tol:.0e}")
        for k, (v, r) in enumerate(zip(got, ref)):
            if k % 2 == 0 and not 0 < v <= 10 * tol:
                problems.append(f"tilde LMI {v:.2e} not in (0, 10 tol] at {tol:.0e}")
            if k % 2 == 1 and not (np.sign(v) == np.sign(r) and r / 3 >= v >= 3 * r):
                problems.append(f"hat LMI {v:.2e} vs {r:.1e} at {tol:.0e}")
    secs = time.perf_counter() - t0
    if secs >= 300:
        problems.append(f"runtime {secs:.0f}s")
    record(request, 4, not problems, "; ".join(problems or notes) + f"; {secs:.1f}s")


def test_criterion_05_bt_bound(request, synthetic):
    rec = next(s for s in synthetic.stages if s["name"] == "bt")
    checks = [c for c in rec["checks"] if c["name"].startswith("eps<=tau")]
    bad = [c["name"] for c in checks if not c["passed"]]
    ok = rec["status"] == "ok" and len(checks) == 14 and not bad and synthetic.bt_seconds < 600
    worst = max((c["eps"] / c["tau"] for c in checks), default=float("nan"))
    record(request, 5, ok, f"{len(checks)} orders, max eps/tau {worst:.3f}, failing {bad}, "
           f"{synthetic.bt_seconds:.0f}s {rec.get('error', '')}")


def test_criterion_06_hankel_dominance(request):
    t0 = time.perf_counter()
    reach, obsv = gle_problems(gen_synthetic(60), 0)
    exact = hankel_spectrum(LowRankPsd(dense_psd_factor(solve_gle_dense(reach))),
                            LowRankPsd(dense_psd_factor(solve_gle_dense(obsv))))
    worst = -np.inf
    for tol in LADDER:
        approx = hankel_spectrum(LowRankPsd(solve_gle(reach, tol).Z),
                                 LowRankPsd(solve_gle(obsv, tol).Z))
        k = min(exact.size, approx.size)
        # the exact spectrum is only known to round-off relative to its top value
        slack = 60 * np.finfo(float).eps * exact[0]
        worst = max(worst, np.max(approx[:k] - exact[:k] - slack))
    secs = time.perf_counter() - t0
    ok = worst <= 0 and secs < 60
    record(request, 6, ok, f"max sigma_k(approx) - sigma_k(exact) beyond round-off "
           f"{worst:.2e}, {secs:.1f}s")


def _bs_lmis(report):
    runner = report.runner
    S = runner.system()
    plain, pert = runner.pbr_gramians()
    lam = [[lmi_max_eig(S.A[j], g[j].Q, S.C[j], "obsv") for j in range(S.n_modes)]
           for g in (plain, pert)]
    return lam


def test_criterion_07_table2(request, black_scholes):
    before, after = _bs_lmis(black_scholes)
    ok = all(1e-8 <= v <= 1e-4 for v in before) and all(v <= 1e-9 for v in after)
    record(request, 7, ok, "plain " + " ".join(f"{v:.2e}" for v in before) +
           "; perturbed " + " ".join(f"{v:.2e}" for v in after))


def test_criterion_08_pbr_bound(request, black_scholes):
    rows = black_scholes.runner.cache.get("pbr_rows", {})
    problems = []
    for which in ("plain", "perturbed"):
        got = rows.get(which, [])
        if [b.r for _, b in got] != list(range(2, 41)):
            problems.append(f"{which}: sweep incomplete")
        problems += [f"{which} r={b.r}: eps {e:.2e} > phi {b.phi:.2e}"
                     for e, b in got if e > b.phi]
    plain = {b.r: (e, b.phi) for e, b in rows.get("plain", [])}
    for e, b in rows.get("perturbed", []):
        if b.r >= 30 and b.r in plain and not (b.phi < plain[b.r][1] and e < plain[b.r][0]):
            problems.append(f"r={b.r}: perturbed (eps {e:.2e}, phi {b.phi:.2e}) not below "
                            f"plain (eps {plain[b.r][0]:.2e}, phi {plain[b.r][1]:.2e})")
    secs = black_scholes.seconds
    if secs >= 1800:
        problems.append(f"runtime {secs:.0f}s")
    record(request, 8, not problems, "; ".join(problems[:6]) or f"eps <= phi for r = 2..40 "
           f"in both pipelines, perturbed below plain for r >= 30, {secs:.0f}s")


def test_criterion_09_iota_suppression(request, black_scholes):
    rows = black_scholes.runner.cache.get("pbr_rows", {})
    pert = [b for _, b in rows.get("perturbed", [])]
    plain = [b for _, b in rows.get("plain", [])]
    largest = sorted(plain, key=lambda b: b.r)[-3:]
    iota_max = max((b.iota for b in pert), default=np.inf)
    ok = bool(pert) and iota_max < 1e-10 and bool(largest) and all(
        b.iota > b.chi for b in largest)
    record(request, 9, ok, f"perturbed max iota/eta {iota_max:.2e}; plain (iota, chi) at "
           "r = " + ", ".join(f"{b.r}: ({b.iota:.1e}, {b.chi:.1e})" for b in largest))


PROPERTY_SUITES = {
    "lyapunov residual identity": "tests/test_lyapunov.py::test_residual_identity",
    "Galerkin orthogonality": "tests/test_lyapunov.py::test_galerkin_orthogonality",
    "factor difference inequality": "tests/test_gle.py::test_factor_difference_inequality",
    "scaling column-space invariance": "tests/test_gle.py::test_rescaling_keeps_column_space",
    "shifted Gramian LMIs": "tests/test_balancing.py::test_shift_enforces_every_mode_lmi",
}


def test_criterion_10_property_suites(request, synthetic, black_scholes):
    problems, notes = [], []
    for name, node in PROPERTY_SUITES.items():
        t0 = time.perf_counter()
        done = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               node], cwd=ROOT, capture_output=True, text=True)
        secs = time.perf_counter() - t0
        notes.append(f"{name} {secs:.0f}s")
        if done.returncode != 0 or secs >= 120:
            problems.append(f"{name} (exit {done.returncode}, {secs:.0f}s)")
    for label, report in (("synthetic", synthetic), ("black_scholes", black_scholes)):
        runner = report.runner
        r_values = [r for r in runner.cfg.r_values if r < runner.system().n]
        t0 = time.perf_counter()
        unstable = []
        for which in ("plain", "perturbed"):
            rom = runner._rom(which)
            unstable += [(which, r) for r in r_values
                         if max(rom.order(r).system.stability_margins()) >= 0]
        secs = time.perf_counter() - t0
        notes.append(f"{label} reduced modes Hurwitz {secs:.0f}s")
        if unstable:
            problems.append(f"{label} non-Hurwitz reduced modes at {unstable[:5]}")
    record(request, 10, not problems, "; ".join(problems or notes))


def test_criterion_11_timing_slope(request):
    t0 = time.perf_counter()
    ns = [200, 800, 3200, 12800]
    rows = timing_sweep(ns, tol=1e-8)
    slope = loglog_slope(ns, [r[1] + r[2] for r in rows])
    secs = time.perf_counter() - t0
    ok = slope <= 1.3 and secs < 900
    record(request, 11, ok, f"log-log slope {slope:.3f}, seconds " +
           " ".join(f"{r[1] + r[2]:.2f}" for r in rows) + f", {secs:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
