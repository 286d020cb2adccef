"""Command line entry point ``glemor``.

Systems are directories of Matrix Market files (``A{j}.mtx``, ``B{j}.mtx``,
``C{j}.mtx``) plus ``manifest.ini``; ``glemor generate`` writes the two
built-in benchmarks in that layout. Every command exits with 0 only if its
soundness checks pass, 1 if a check fails and 2 on usage errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .balancing import (
    ReducedSwitchedModel,
    gle_problems,
    lmi_max_eig,
    load_rom,
    pbr_gramians,
    pbr_reduce,
    perturb_gramians,
    reduce,
    save_rom,
    shift_gramian,
    square_root_projectors,
)
from .experiments import (
    INPUTS,
    BlackScholesParams,
    ExperimentConfig,
    gen_black_scholes,
    gen_synthetic,
    load_system,
    run_experiment,
    save_system,
    write_csv,
)
from .certificates import bt_error_bound
from .gle import GleOptions, solve_gle, write_gle_diagnostics
from .matrix_kernel import LowRankPsd, write_factor_blob
from .sls import SwitchingSignal, random_switching, simulate, write_trajectory_csv

log = logging.getLogger("glemor")


def _gle_options(args, default="rescale"):
    contraction = args.contraction or default
    if contraction == "rescale":
        contraction = None
    elif contraction != "exact":
        contraction = float(contraction)
    return GleOptions(contraction=contraction, inner=args.inner)


def _report(checks):
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 1


def cmd_generate(args):
    if args.family == "synthetic":
        system = gen_synthetic(args.n)
    else:
        system = gen_black_scholes(BlackScholesParams(n=args.n))[0]
    save_system(system, args.out)
    print(f"wrote {args.family} system (n={system.n}, modes={system.n_modes}) to {args.out}")
    return 0


def cmd_gle_solve(args):
    system = load_system(args.system)
    reach, obsv = gle_problems(system, args.base)
    problem = reach if args.side == "reach" else obsv
    sol = solve_gle(problem, args.tol, _gle_options(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_factor_blob(out / "factor.bin", sol.Z)
    write_gle_diagnostics(out / "diagnostics.csv", sol,
                          f"GLE iterations, {args.side} side, base mode {args.base}")
    return _report([("certificate <= tol", sol.error_bound_2 <= args.tol,
                     f"bound {sol.error_bound_2:.3e}, rank {sol.Z.shape[1]}, "
                     f"{sol.iterations} iterations")])


def cmd_mor_bt(args):
    system = load_system(args.system)
    # the shift is certified only for the unscaled equation
    opts = _gle_options(args, default="exact")
    reach, obsv = gle_problems(system, 0)
    sp_, sq_ = solve_gle(reach, args.tol, opts), solve_gle(obsv, args.tol, opts)
    P, Q = LowRankPsd(sp_.Z), LowRankPsd(sq_.Z)
    checks = []
    if not args.no_shift:
        P, mu = shift_gramian(P, args.tol, system.A)
        Q, _ = shift_gramian(Q, args.tol, system.A)
        worst = max(lmi_max_eig(A, P, B, "reach") for A, B in zip(system.A, system.B))
        checks.append(("shifted reachability LMIs", worst < 0, f"max eigenvalue {worst:.3e}"))
    pair = square_root_projectors(P, Q, args.order)
    model = reduce(system, pair)
    save_rom(ReducedSwitchedModel(model, {}), args.out, [pair.spectrum()],
             comment=f"balanced truncation, order {args.order}")
    spec = pair.spectrum()
    write_csv(Path(args.out) / "hankel.csv", "Hankel singular values", ["k", "sigma"],
              [(k + 1, float(v)) for k, v in enumerate(spec)])
    biorth = float(np.linalg.norm(pair.W.T @ pair.V - np.eye(args.order)))
    checks.append(("W^T V = I", biorth <= 1e-8, f"deviation {biorth:.2e}"))
    checks.append(("error bound", True, f"tau = {bt_error_bound(spec, args.order):.3e}"))
    return _report(checks)


def cmd_mor_pbr(args):
    system = load_system(args.system)
    gs = pbr_gramians(system, args.tol, _gle_options(args))
    if args.perturb:
        gs = perturb_gramians(gs, args.tol, ratio=args.perturb_ratio, inner=args.inner)
    rom = pbr_reduce(system, gs, args.order, args.floor or args.tol)
    save_rom(rom.order(), args.out, rom.spectra,
             comment=f"piecewise balanced reduction, order {args.order}")
    return _report([(f"reduced mode {j} Hurwitz", m < 0, f"max real part {m:.3e}")
                    for j, m in enumerate(rom.stability_margins)])


def _signal(args, n_modes):
    if args.modes:
        modes = [int(v) for v in args.modes.split(",")]
        times = [float(v) for v in args.times.split(",")] if args.times else []
        return SwitchingSignal(0.0, times, modes)
    return random_switching(n_modes, args.switches, args.horizon, args.seed)


def cmd_sim(args):
    if args.rom:
        model = load_rom(args.rom)
        system, jumps = model.system, (model.jump if model.jumps else None)
    else:
        system, jumps = load_system(args.system), None
    signal = _signal(args, system.n_modes)
    u = INPUTS[args.input]()
    if u.n_inputs != system.n_inputs:
        print(f"input {args.input} has {u.n_inputs} channels, system has {system.n_inputs}",
              file=sys.stderr)
        return 2
    traj = simulate(system, signal, u, args.horizon, rtol=args.rtol, atol=args.atol,
                    jump_maps=jumps)
    write_trajectory_csv(args.out, traj, f"outputs under {u.description}")
    finite = bool(np.all(np.isfinite(traj.y)))
    return _report([("finite trajectory", finite, f"{len(traj.t)} samples")])


def cmd_experiment(args):
    cfg = ExperimentConfig.from_ini(args.config, out_dir=args.out) if args.config else \
        ExperimentConfig(experiment=args.id, out_dir=args.out or "results")
    if cfg.experiment != args.id:
        print(f"config describes {cfg.experiment!r}, not {args.id!r}", file=sys.stderr)
        return 2
    report = run_experiment(cfg)
    summary = [(s["name"], s["status"], sum(not c["passed"] for c in s["checks"]))
               for s in report.stages]
    print(json.dumps({"passed": report.passed, "stages": summary}))
    return 0 if report.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="glemor", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def gle_args(q):
        q.add_argument("--tol", type=float, default=1e-8)
        q.add_argument("--contraction", default=None,
                       help="'rescale', 'exact' (n <= 400) or a float; 'mor bt' defaults "
                            "to 'exact', the others to 'rescale'")
        q.add_argument("--inner", choices=["krylov", "dense"], default="krylov")

    g = sub.add_parser("generate", help="write a benchmark system directory")
    g.add_argument("family", choices=["synthetic", "black_scholes"])
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    gle = sub.add_parser("gle", help="generalized Lyapunov equations")
    gs = gle.add_subparsers(dest="gle_command", required=True)
    s = gs.add_parser("solve", help="certified low-rank GLE solve")
    s.add_argument("--system", required=True)
    s.add_argument("--side", choices=["reach", "obsv"], default="reach")
    s.add_argument("--base", type=int, default=0, help="mode used as A")
    s.add_argument("--out", required=True)
    gle_args(s)
    s.set_defaults(func=cmd_gle_solve)

    mor = sub.add_parser("mor", help="model order reduction")
    ms = mor.add_subparsers(dest="mor_command", required=True)
    bt = ms.add_parser("bt", help="balanced truncation with one basis")
    bt.add_argument("--system", required=True)
    bt.add_argument("--order", type=int, required=True)
    bt.add_argument("--no-shift", action="store_true")
    bt.add_argument("--out", required=True)
    gle_args(bt)
    bt.set_defaults(func=cmd_mor_bt)
    pbr = ms.add_parser("pbr", help="piecewise balanced reduction")
    pbr.add_argument("--system", required=True)
    pbr.add_argument("--order", type=int, required=True)
    pbr.add_argument("--perturb", action="store_true")
    pbr.add_argument("--perturb-ratio", type=float, default=1e-3)
    pbr.add_argument("--floor", type=float, default=None)
    pbr.add_argument("--out", required=True)
    gle_args(pbr)
    pbr.set_defaults(func=cmd_mor_pbr)

    sim = sub.add_parser("sim", help="simulate a system or a reduced model")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--system")
    src.add_argument("--rom")
    sim.add_argument("--input", choices=sorted(INPUTS), required=True)
    sim.add_argument("--horizon", type=float, default=2.0)
    sim.add_argument("--modes", help="comma separated mode path, e.g. 0,1,0")
    sim.add_argument("--times", help="comma separated switching times")
    sim.add_argument("--switches", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--rtol", type=float, default=1e-8)
    sim.add_argument("--atol", type=float, default=1e-10)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_sim)

    ex = sub.add_parser("experiment", help="run a benchmark pipeline")
    ex.add_argument("id", choices=["synthetic", "black_scholes", "custom"])
    ex.add_argument("--config")
    ex.add_argument("--out")
    ex.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
