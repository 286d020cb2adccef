"""Benchmark generators and experiment drivers."""

import configparser
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sls import InputSignal, SwitchedSystem, random_switching

log = logging.getLogger(__name__)


# --- generators ---------------------------------------------------------------------

def gen_synthetic(n):
    """Two-mode benchmark with bidiagonal and tridiagonal Toeplitz modes.

    Mode 0 has ``-1`` on the diagonal and ``1/2`` below it; mode 1 has ``-2``
    on the diagonal, ``4/5`` below and ``-1/5`` above. Mode 0 is driven and
    observed at the last state, mode 1 at the first.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    one = np.ones(n)
    A0 = sp.diags([-one, 0.5 * one[:-1]], [0, -1], format="csr")
    A1 = sp.diags([-2 * one, 0.8 * one[:-1], -0.2 * one[:-1]], [0, -1, 1], format="csr")
    e_last = np.zeros((n, 1))
    e_last[-1] = 1.0
    e_first = np.zeros((n, 1))
    e_first[0] = 1.0
    return SwitchedSystem([A0, A1], [e_last, e_first], [e_last.T, e_first.T])


@dataclass
class BlackScholesParams:
    """Grid and mode data for the semi-discretized pricing equation.

    ``modes`` lists ``(volatility, rate)`` pairs.
    """

    n: int = 1000
    s_max: float = 200.0
    strike: float = 80.0
    modes: list = field(default_factory=lambda: [(0.25, 0.001), (0.05, 0.02),
                                                 (0.25, 0.02), (0.05, 0.001)])
    normalize_input: bool = True


def black_scholes_operators(n, s_max):
    """Second-derivative and drift operators on the interior grid
    ``s_i = i h``, ``h = s_max / (n + 1)``, with a zero left boundary.

    ``D`` discretizes ``s^2 d^2/ds^2`` and ``G`` discretizes ``s d/ds - 1``
    by centered differences. Also returns the coefficients by which the
    right boundary value enters the last row.
    """
    i = np.arange(1, n + 1, dtype=float)
    D = sp.diags([i[1:] ** 2, -2 * i ** 2, i[:-1] ** 2], [-1, 0, 1], format="csr")
    G = sp.diags([-i[1:] / 2, -np.ones(n), i[:-1] / 2], [-1, 0, 1], format="csr")
    edge = np.zeros(n)
    edge[-1] = 1.0
    # ghost value psi(s_{n+1}) enters row n with weights n^2 (in D) and n/2 (in G)
    return D, G, n ** 2 * edge, n / 2 * edge


def gen_black_scholes(params=None, n_switches=10, horizon=2.0, seed=0):
    """Switched pricing model with one mode per ``(volatility, rate)`` pair.

    Each mode is ``A = (vol^2 / 2) D + rate G``. The boundary value
    ``S - K exp(-rate t)`` is carried by two input channels, so that the input
    ``[1, exp(-rate t)]`` reproduces it. Outputs are the grid average and the
    value at the last node.

    Returns
    -------
    system : SwitchedSystem
    signal : SwitchingSignal
        Seeded switching with ``n_switches`` uniform switching times on
        ``(0, horizon)`` and no immediate mode repeats.
    """
    p = params or BlackScholesParams()
    n = p.n
    D, G, d_edge, g_edge = black_scholes_operators(n, p.s_max)
    A_list, B_list = [], []
    for vol, rate in p.modes:
        A_list.append((0.5 * vol ** 2 * D + rate * G).tocsr())
        edge = 0.5 * vol ** 2 * d_edge + rate * g_edge
        B = np.column_stack([p.s_max * edge, -p.strike * edge])
        if p.normalize_input:
            B = B / np.linalg.norm(B, 2)
        B_list.append(B)
    C = np.vstack([np.full(n, 1.0 / n), np.eye(1, n, n - 1).ravel()])
    system = SwitchedSystem(A_list, B_list, [C] * len(p.modes))
    return system, random_switching(len(p.modes), n_switches, horizon, seed)


def input_boundary(rate=0.02):
    return InputSignal(lambda t: [1.0, np.exp(-rate * t)], 2, f"[1, exp(-{rate} t)]")


def input_oscillating():
    return InputSignal(lambda t: [np.sin(2 * np.pi * np.exp(t / 2))] * 2, 2,
                       "sin(2 pi exp(t/2)) on both channels")


def input_chirp():
    return InputSignal(lambda t: [np.sin(t * t + t)], 1, "sin(t^2 + t)")


INPUTS = {"u1": input_boundary, "u2": input_oscillating, "chirp": input_chirp}


# --- system directories ------------------------------------------------------------

def save_system(system, directory):
    """Write every mode as Matrix Market files plus ``manifest.ini``."""
    from .matrix_kernel import write_matrix_market
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = configparser.ConfigParser()
    cfg["system"] = {"modes": str(system.n_modes), "n": str(system.n),
                     "inputs": str(system.n_inputs), "outputs": str(system.n_outputs)}
    for j in range(system.n_modes):
        write_matrix_market(d / f"A{j}.mtx", system.A[j])
        write_matrix_market(d / f"B{j}.mtx", system.B[j])
        write_matrix_market(d / f"C{j}.mtx", system.C[j])
    with open(d / "manifest.ini", "w") as fh:
        cfg.write(fh)


def load_system(directory, check_stability=True):
    from .matrix_kernel import read_matrix_market
    d = Path(directory)
    cfg = configparser.ConfigParser()
    if not cfg.read(d / "manifest.ini"):
        raise FileNotFoundError(f"no manifest.ini in {d}")
    M = cfg.getint("system", "modes")

    def dense(name):
        m = read_matrix_market(d / name)
        return np.atleast_2d(m.toarray() if sp.issparse(m) else m)

    A = [sp.csr_matrix(read_matrix_market(d / f"A{j}.mtx")) for j in range(M)]
    return SwitchedSystem(A, [dense(f"B{j}.mtx") for j in range(M)],
                          [dense(f"C{j}.mtx") for j in range(M)], check_stability)


# --- configuration -----------------------------------------------------------------

def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _int_list(text):
    """``"2, 4, 6"`` or ``"2:40"`` (inclusive) or ``"2:28:2"``."""
    out = []
    for part in text.replace(",", " ").split():
        if ":" in part:
            bits = [int(v) for v in part.split(":")]
            start, stop = bits[0], bits[1]
            step = bits[2] if len(bits) > 2 else 1
            out.extend(range(start, stop + 1, step))
        else:
            out.append(int(part))
    return out


_DEFAULT_STAGES = {
    "synthetic": ["ladder", "table1", "timing", "bt", "pbr"],
    "black_scholes": ["table2", "fig4", "pbr"],
    "custom": ["ladder", "bt", "pbr"],
}


@dataclass
class ExperimentConfig:
    """Everything a run needs. ``tols`` is the Gramian tolerance ladder and
    ``tol`` the working tolerance of the reduction stages."""

    experiment: str = "synthetic"
    n: int = 200
    tols: list = field(default_factory=lambda: [1e-2, 1e-4, 1e-6, 1e-8, 1e-10])
    tol: float = 1e-10
    r_values: list = field(default_factory=lambda: list(range(2, 29, 2)))
    seed: int = 0
    n_switches: int = 10
    horizon: float = 10.0
    input: str = "chirp"
    rtol: float = 1e-8
    atol: float = 1e-10
    method: str = "RK45"
    out_dir: str = "results"
    contraction: str = "exact"
    timing_n: list = field(default_factory=lambda: [200, 800, 3200, 12800])
    perturb_ratio: float = 1e-6
    reuse_depth: object = None
    rom_order: int = 30
    system_dir: str = ""
    stages: list = None

    def __post_init__(self):
        if self.experiment not in _DEFAULT_STAGES:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.experiment != "custom" and self.n < 2:
            raise ValueError("n must be at least 2")
        for t in list(self.tols) + [self.tol, self.rtol, self.atol]:
            if not 0 < t < 1:
                raise ValueError(f"tolerance {t} outside (0, 1)")
        if self.experiment != "custom" and any(not 1 <= r <= self.n for r in self.r_values):
            raise ValueError(f"r values must lie in [1, {self.n}]")
        if self.input not in INPUTS:
            raise ValueError(f"unknown input {self.input!r}; choose from {sorted(INPUTS)}")
        if self.experiment == "custom" and not self.system_dir:
            raise ValueError("a custom experiment needs system_dir")
        if self.stages is None:
            self.stages = list(_DEFAULT_STAGES[self.experiment])

    @classmethod
    def from_ini(cls, path, **overrides):
        """Read ``[experiment]``, ``[integrator]`` and ``[output]`` sections."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        e = cp["experiment"] if cp.has_section("experiment") else {}
        kw = {}
        conv = {"n": int, "seed": int, "n_switches": int, "rom_order": int,
                "tol": float, "horizon": float, "perturb_ratio": float,
                "tols": _float_list, "timing_n": _int_list, "r_values": _int_list,
                "input": str, "contraction": str, "system_dir": str,
                "stages": lambda s: s.replace(",", " ").split()}
        for key, fn in conv.items():
            if key in e:
                kw[key] = fn(e[key])
        if "id" in e:
            kw["experiment"] = e["id"]
        if "reuse_depth" in e:
            kw["reuse_depth"] = None if e["reuse_depth"].lower() == "none" else int(e["reuse_depth"])
        if cp.has_section("integrator"):
            kw.update({k: float(v) for k, v in cp["integrator"].items() if k in ("rtol", "atol")})
            if "method" in cp["integrator"]:
                kw["method"] = cp["integrator"]["method"]
        if cp.has_section("output") and "dir" in cp["output"]:
            kw["out_dir"] = cp["output"]["dir"]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


# --- reporting ---------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{v:.6e}"
    return str(v)


def write_csv(path, caption, header, rows):
    """CSV whose first line is ``# caption``."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {caption}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


class RunReport:
    """Stage-by-stage record written to ``report.json``."""

    def __init__(self, config):
        self.config = config
        self.stages = []

    def stage(self, name):
        rec = {"name": name, "status": "running", "seconds": 0.0, "outputs": [], "checks": []}
        self.stages.append(rec)
        return rec

    @staticmethod
    def check(rec, name, passed, **detail):
        rec["checks"].append({"name": name, "passed": bool(passed),
                              **{k: _json_safe(v) for k, v in detail.items()}})

    @property
    def passed(self):
        return all(s["status"] in ("ok", "skipped") for s in self.stages) and all(
            c["passed"] for s in self.stages for c in s["checks"])

    def to_dict(self):
        cfg = {k: _json_safe(v) for k, v in self.config.__dict__.items()}
        return {"experiment": self.config.experiment, "config": cfg,
                "passed": self.passed, "stages": self.stages}

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _json_safe(v):
    if isinstance(v, (np.floating, float)):
        return float(v) if np.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_json_safe(x) for x in v]
    return v


# --- pipelines ---------------------------------------------------------------------

def timing_sweep(n_list, tol=1e-8, path=None, generator=None):
    """Seconds per Gramian solve for the synthetic family (or ``generator``).

    Returns rows ``(n, seconds_P, seconds_Q)``; with ``path`` also writes
    them as CSV.
    """
    from .balancing import gle_problems
    from .gle import solve_gle
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be ascending")
    generator = generator or gen_synthetic
    rows = []
    for n in n_list:
        reach, obsv = gle_problems(generator(n), 0)
        secs = []
        for prob in (reach, obsv):
            t0 = time.perf_counter()
            solve_gle(prob, tol)
            secs.append(time.perf_counter() - t0)
        rows.append((n, secs[0], secs[1]))
        log.info("timing n=%d: %.3fs / %.3fs", n, *secs)
    if path is not None:
        write_csv(path, "fig1b: seconds per Gramian solve vs n", ["n", "seconds_P", "seconds_Q"], rows)
    return rows


def loglog_slope(ns, secs):
    """Least-squares slope of ``log(secs)`` against ``log(ns)``."""
    return float(np.polyfit(np.log(ns), np.log(secs), 1)[0])


def dense_psd_factor(X):
    """``U sqrt(lam)`` over the positive eigenvalues of a dense symmetric ``X``."""
    lam, U = np.linalg.eigh(0.5 * (X + X.T))
    keep = lam > 0
    return U[:, keep] * np.sqrt(lam[keep])


class _Runner:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.report = RunReport(cfg)
        self.cache = {}

    # shared ingredients
    def sim_opts(self):
        return {"rtol": self.cfg.rtol, "atol": self.cfg.atol, "method": self.cfg.method}

    def system(self):
        if "system" not in self.cache:
            c = self.cfg
            if c.experiment == "synthetic":
                self.cache["system"] = gen_synthetic(c.n)
            elif c.experiment == "black_scholes":
                self.cache["system"] = gen_black_scholes(BlackScholesParams(n=c.n))[0]
            else:
                self.cache["system"] = load_system(c.system_dir)
        return self.cache["system"]

    def signal(self, n_switches=None):
        c = self.cfg
        return random_switching(self.system().n_modes, n_switches or c.n_switches, c.horizon, c.seed)

    def gle_options(self, problem=None):
        from .gle import GleOptions, estimate_contraction_exact
        from .lyapunov import DENSE_CAP
        c = self.cfg
        if c.experiment == "black_scholes":
            return GleOptions(inner="dense", max_dim=max(DENSE_CAP, c.n))
        if c.contraction == "rescale" or problem is None:
            return GleOptions()
        if c.contraction == "exact":
            key = ("contraction", id(problem))
            if key not in self.cache:
                self.cache[key] = estimate_contraction_exact(problem)
            return GleOptions(contraction=self.cache[key])
        return GleOptions(contraction=float(c.contraction))

    def monolithic(self, tol):
        from .balancing import GramianPair
        from .gle import solve_gle
        from .matrix_kernel import LowRankPsd
        key = ("mono", tol)
        if key not in self.cache:
            reach, obsv = self.problems()
            sp_ = solve_gle(reach, tol, self.gle_options(reach))
            sq_ = solve_gle(obsv, tol, self.gle_options(obsv))
            self.cache[key] = GramianPair(LowRankPsd(sp_.Z), LowRankPsd(sq_.Z), sp_, sq_)
        return self.cache[key]

    def problems(self):
        from .balancing import gle_problems
        if "problems" not in self.cache:
            self.cache["problems"] = gle_problems(self.system(), 0)
        return self.cache["problems"]

    def exact(self):
        from .gle import solve_gle_dense
        if "exact" not in self.cache:
            reach, obsv = self.problems()
            self.cache["exact"] = (solve_gle_dense(reach), solve_gle_dense(obsv))
        return self.cache["exact"]

    # stages
    def ladder(self, rec):
        c = self.cfg
        dense_ok = self.system().n <= 400
        rows = []
        for tol in c.tols:
            g = self.monolithic(tol)
            if dense_ok:
                P, Q = self.exact()
                eP = float(np.linalg.norm(P - g.P.Z @ g.P.Z.T, 2))
                eQ = float(np.linalg.norm(Q - g.Q.Z @ g.Q.Z.T, 2))
                self.report.check(rec, f"err<=tol@{tol:.0e}", eP <= tol and eQ <= tol,
                                  err_P=eP, err_Q=eQ)
            else:
                eP = eQ = float("nan")
            rows.append((tol, eP, eQ, g.reach.error_bound_2, g.obsv.error_bound_2,
                         g.reach.iterations, g.obsv.iterations))
        path = self.out / "fig1a.csv"
        write_csv(path, "fig1a: Gramian error vs exit tolerance",
                  ["tol", "err_P", "err_Q", "bound_P", "bound_Q", "iter_P", "iter_Q"], rows)
        rec["outputs"].append(path.name)

    def table1(self, rec):
        from .balancing import lmi_max_eig, shift_gramian
        S = self.system()
        rows = []
        for tol in self.cfg.tols:
            P = self.monolithic(tol).P
            Ph, mu = shift_gramian(P, tol, S.A)
            row = [tol, mu]
            for j in range(S.n_modes):
                lt = lmi_max_eig(S.A[j], P, S.B[j], "reach")
                lh = lmi_max_eig(S.A[j], Ph, S.B[j], "reach")
                row += [lt, lh]
                self.report.check(rec, f"shifted LMI mode {j}@{tol:.0e}", lh < 0, lambda1=lh)
            rows.append(row)
        header = ["tol", "mu_hat"]
        for j in range(S.n_modes):
            header += [f"lambda1_M{j + 1}_P_tilde", f"lambda1_M{j + 1}_P_hat"]
        path = self.out / "table1.csv"
        write_csv(path, "table1: shift and LMI eigenvalues of the reachability Gramian",
                  header, rows)
        rec["outputs"].append(path.name)

    def timing(self, rec):
        path = self.out / "fig1b.csv"
        rows = timing_sweep(self.cfg.timing_n, tol=1e-8, path=path)
        rec["outputs"].append(path.name)
        if len(rows) >= 2:
            ns = [r[0] for r in rows]
            slope = loglog_slope(ns, [r[1] + r[2] for r in rows])
            rec["slope"] = slope
            self.report.check(rec, "loglog slope <= 1.3", slope <= 1.3, slope=slope)

    def bt(self, rec):
        from .balancing import hankel_spectrum, reduce, shift_gramian, square_root_projectors
        from .certificates import bt_error_bound
        from .matrix_kernel import LowRankPsd
        from .sls import input_energy, output_error, simulate
        c = self.cfg
        S = self.system()
        g = self.monolithic(c.tol)
        Ph, _ = shift_gramian(g.P, c.tol, S.A)
        Qh, _ = shift_gramian(g.Q, c.tol, S.A)
        spectra = {"approx": hankel_spectrum(g.P, g.Q), "shifted": hankel_spectrum(Ph, Qh)}
        if S.n <= 400:
            P, Q = self.exact()
            spectra["exact"] = hankel_spectrum(LowRankPsd(dense_psd_factor(P)),
                                               LowRankPsd(dense_psd_factor(Q)))
        names = list(spectra)
        r_max = min(S.n - 1, max(c.r_values) + 3)
        rows = [[r] + [bt_error_bound(spectra[k], r) for k in names] for r in range(r_max + 1)]
        path = self.out / "fig2a.csv"
        write_csv(path, "fig2a: twice the neglected Hankel values",
                  ["r"] + [f"tau_{k}" for k in names], rows)
        rec["outputs"].append(path.name)

        u = INPUTS[c.input]()
        signal = self.signal()
        full = simulate(S, signal, u, c.horizon, **self.sim_opts())
        eta = input_energy(full)
        rows = []
        for r in c.r_values:
            row = [r]
            for label, (P, Q) in (("approx", (g.P, g.Q)), ("shifted", (Ph, Qh))):
                try:
                    pair = square_root_projectors(P, Q, r)
                except ValueError as exc:
                    log.info("bt %s r=%d skipped: %s", label, r, exc)
                    row += [float("nan"), float("nan")]
                    continue
                red = simulate(reduce(S, pair), signal, u, c.horizon, **self.sim_opts())
                eps = output_error(full, red, eta)
                tau = bt_error_bound(pair.spectrum(), r)
                row += [tau, eps]
                if label == "shifted":
                    self.report.check(rec, f"eps<=tau r={r}", eps <= tau + 10 * c.rtol,
                                      eps=eps, tau=tau)
            rows.append(row)
        path = self.out / "fig2b.csv"
        write_csv(path, f"fig2b: BT output error and bound, input {u.description}",
                  ["r", "tau_approx", "eps_approx", "tau_shifted", "eps_shifted"], rows)
        rec["outputs"].append(path.name)

    def pbr_gramians(self):
        from .balancing import pbr_gramians, perturb_gramians
        if "pbr" not in self.cache:
            c = self.cfg
            plain = pbr_gramians(self.system(), c.tol, self.gle_options())
            inner = "dense" if c.experiment == "black_scholes" else "krylov"
            pert = perturb_gramians(plain, c.tol, ratio=c.perturb_ratio, inner=inner)
            self.cache["pbr"] = (plain, pert)
        return self.cache["pbr"]

    def table2(self, rec):
        from .balancing import lmi_max_eig
        S = self.system()
        plain, pert = self.pbr_gramians()
        rows = []
        for label, gs, side in (("Q_tilde", plain, "obsv"), ("Q_hat", pert, "obsv"),
                                ("P_tilde", plain, "reach"), ("P_hat", pert, "reach")):
            vals = []
            for j, g in enumerate(gs):
                X, G = (g.Q, S.C[j]) if side == "obsv" else (g.P, S.B[j])
                vals.append(lmi_max_eig(S.A[j], X, G, side))
            rows.append([label] + vals)
        before, after = rows[0][1:], rows[1][1:]
        for j, (b, a) in enumerate(zip(before, after)):
            self.report.check(rec, f"perturbation lowers LMI mode {j}", a < b, before=b, after=a)
        path = self.out / "table2.csv"
        write_csv(path, "table2: largest eigenvalue of the per-mode observability LMI",
                  ["gramian"] + [f"j={j + 1}" for j in range(S.n_modes)], rows)
        rec["outputs"].append(path.name)

    def _rom(self, which):
        from .balancing import pbr_reduce
        key = ("rom", which)
        if key not in self.cache:
            plain, pert = self.pbr_gramians()
            gs = pert if which == "perturbed" else plain
            r = min(self.cfg.rom_order, self.system().n - 1)
            self.cache[key] = pbr_reduce(self.system(), gs, r, floor=self.cfg.tol)
        return self.cache[key]

    def fig4(self, rec):
        from .sls import input_energy, output_error, simulate, write_trajectory_csv
        c = self.cfg
        S = self.system()
        rom = self._rom("perturbed")
        model = rom.order()
        for tag, inp, n_sw in (("fig4a", "u1", 2 * c.n_switches), ("fig4b", "u2", c.n_switches)):
            u = INPUTS[inp]()
            signal = self.signal(n_sw)
            full = simulate(S, signal, u, c.horizon, **self.sim_opts())
            red = simulate(model.system, signal, u, c.horizon, **self.sim_opts(),
                           jump_maps=model.jump)
            eps = output_error(full, red, input_energy(full))
            extra = {f"y{i + 1}_rom": red.y[:, i] for i in range(red.y.shape[1])}
            path = self.out / f"{tag}.csv"
            write_trajectory_csv(path, full, f"{tag}: full vs order-{rom.r} outputs, input "
                                 f"{u.description}, {n_sw} switches", extra)
            rec["outputs"].append(path.name)
            self.report.check(rec, f"{tag} eps<1e-4", eps < 1e-4, eps=eps)

    def pbr(self, rec):
        from .certificates import PbrBoundEvaluator, verify_bound, write_breakdown_csv
        c = self.cfg
        S = self.system()
        u = INPUTS[c.input]()
        signal = self.signal()
        tag = "fig5" if c.experiment == "black_scholes" else "pbr"
        summary = {}
        for which in ("plain", "perturbed"):
            rom = self._rom(which)
            ev = PbrBoundEvaluator(S, rom, signal, u, c.horizon, reuse_depth=c.reuse_depth,
                                   **self.sim_opts())
            rows, unstable = [], []
            for r in c.r_values:
                if r >= S.n:
                    continue
                b = ev.bound(r)
                eps = ev.output_error(r)
                rows.append((eps, b))
                v = verify_bound(eps, b, integration_tol=c.rtol)
                self.report.check(rec, f"{which} eps<=phi r={r}", v["passed"], eps=eps, phi=b.phi)
                margins = rom.order(r).system.stability_margins()
                if max(margins) >= 0:
                    unstable.append(r)
            self.report.check(rec, f"{which} reduced modes Hurwitz", not unstable,
                              orders=unstable)
            path = self.out / f"{tag}_{which}.csv"
            write_breakdown_csv(path, rows, f"{tag}: PBR error bound breakdown ({which} "
                                f"Gramians), input {u.description}")
            rec["outputs"].append(path.name)
            summary[which] = rows
        self.cache["pbr_rows"] = summary


def run_experiment(config):
    """Run every configured stage; returns the :class:`RunReport`.

    A failing stage is recorded and the remaining stages are skipped. The
    report is written to ``report.json`` in the output directory.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_ini(config)
    runner = _Runner(cfg)
    runner.out.mkdir(parents=True, exist_ok=True)
    failed = False
    for name in cfg.stages:
        rec = runner.report.stage(name)
        if failed:
            rec["status"] = "skipped"
            continue
        fn = getattr(runner, name, None)
        if fn is None or name.startswith("_"):
            rec["status"] = "failed"
            rec["error"] = f"unknown stage {name!r}"
            failed = True
            continue
        t0 = time.perf_counter()
        try:
            fn(rec)
            rec["status"] = "ok"
        except Exception as exc:  # recorded in the report, later stages skipped
            log.exception("stage %s failed", name)
            rec["status"] = "failed"
            rec["error"] = f"{type(exc).__name__}: {exc}"
            failed = True
        rec["seconds"] = time.perf_counter() - t0
    runner.report.write(runner.out / "report.json")
    runner.report.runner = runner
    return runner.report
