"""Command line entry point: ``robust-steer solve|simulate|bench``.

Exit codes: 0 success, 2 validation error, 3 non-convergence, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, admm, bench
from . import validate as V
from .lifting import Policy
from .scenario import ScenarioError, load_scenario, save_scenario

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_SOLVER = 0, 2, 3, 4


# -- policy files --------------------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_policies(policies: list, path, scenario: str = "") -> Path:
    """Plain-text policy dump; every number is written with 17 significant digits."""
    path = Path(path)
    lines = ["# robust-steer policies", f"scenario {scenario}", f"agents {len(policies)}"]
    for i, pol in enumerate(policies):
        lines.append(f"agent {i} T {pol.T} nu {pol.nu} nx {pol.nx} gamma_h {pol.gamma_h}")
        lines.append(f"u_bar {pol.u_bar.size}")
        lines.append(" ".join(_fmt(v) for v in pol.u_bar))
        r, c = pol.K.shape
        lines.append(f"K {r} {c}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in pol.K)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_policies(path) -> list:
    tokens = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    it = iter(tokens)
    out = []
    try:
        head = next(it)
        if head[0] == "scenario":
            head = next(it)
        n = int(head[1])
        for _ in range(n):
            a = next(it)
            meta = dict(zip(a[2::2], (int(v) for v in a[3::2])))
            nu_line = next(it)
            u = np.array([float(v) for v in next(it)]) if int(nu_line[1]) else np.zeros(0)
            kr = next(it)
            rows, cols = int(kr[1]), int(kr[2])
            K = np.array([[float(v) for v in next(it)] for _ in range(rows)]).reshape(rows, cols)
            out.append(Policy(u, K, meta["gamma_h"], meta["nx"], meta["nu"]))
    except (StopIteration, IndexError, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed policy file ({exc})") from exc
    return out


def _write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- commands ------------------------------------------------------------------------------

def cmd_solve(args) -> int:
    scn = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = admm.AdmmConfig.for_scenario(scn, rho_u=args.rho_u, rho_d=args.rho_d, max_iters=args.max_iters,
                                       eps_primal=args.eps_primal, eps_dual=args.eps_dual)
    trace_path = out / "trace.jsonl"
    paths = {"trace": str(trace_path), "scenario": str(save_scenario(scn, out / "scenario_resolved.yaml"))}
    report = {"scenario": scn.name, "mode": args.mode, "seed": args.seed, "robust": not args.nominal,
              "config": {k: getattr(cfg, k) for k in ("rho_u", "rho_d", "max_iters", "eps_primal", "eps_dual")}}
    try:
        if args.mode == "distributed":
            res = admm.run(scn, cfg, seed=args.seed, trace_path=trace_path, robust=not args.nominal)
        else:
            res = admm.run_centralized(scn, cfg, trace_path=trace_path, robust=not args.nominal)
    except admm.AgentSolveError as exc:
        report.update(status="solver_failure", message=str(exc), agent=exc.agent, paths=paths)
        _write_json(report, out / "report.json")
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    paths["policies"] = str(write_policies(res.policies, out / "policies.txt", scn.name))
    status = "converged" if res.converged else ("loop_cap" if args.mode == "centralized" else "not_converged")
    report.update(status=status, message=res.message,
                  iterations=res.iterations, objective=res.objective,
                  residuals={"primal": res.primal, "dual": res.dual, "movement": res.movement},
                  timing={"wall_s": res.wall_time_s, "solver_s": res.solver_time_s, "per_agent_s": res.agent_time_s},
                  paths=paths)
    if res.audit is not None:
        report["audit"] = res.audit.audit()
    _write_json(report, out / "report.json")
    print(res.message)
    # the centralized outer loop stops by design at its cap; only ADMM can fail to converge
    return EXIT_OK if res.converged or args.mode == "centralized" else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pol_path = Path(args.policies) if args.policies else out / "policies.txt"
    if not pol_path.exists():
        raise FileNotFoundError(f"policy file not found: {pol_path}")
    policies = read_policies(pol_path)
    noisy = any(np.any(ag.noise.sigma_w) for ag in scn.agents)
    n_w = args.noise_samples or (100 if noisy else 1)
    ens = V.monte_carlo(scn, policies, n_zeta=args.samples, n_w=n_w, seed=args.seed, tau=args.tau)
    report = V.check_feasibility(ens)
    summary = {"scenario": scn.name, **ens.summary(), "feasibility": report.to_dict()}
    paths = {"trajectories": str(V.write_trajectories_csv(ens, out / "trajectories.csv"))}
    if scn.N > 1:
        paths["distances"] = str(V.write_distances_csv(V.min_neighbor_distances(ens), out / "distances.csv"))
    summary["paths"] = paths
    V.write_summary(summary, out / "summary.json")
    print(f"{report.violations} violations over {ens.n_zeta} x {ens.n_w} samples")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = {}
    if args.horizon:
        kw["T"] = args.horizon
    rows = bench.run_suite(args.suite, **kw)
    path = bench.write_timing_csv(rows, out / f"timing_{args.suite}.csv")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-steer", description="Robust multi-agent distribution steering.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="compute policies for a scenario")
    s.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    s.add_argument("--mode", choices=("distributed", "centralized"), default="distributed")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--rho-u", type=float)
    s.add_argument("--rho-d", type=float)
    s.add_argument("--eps-primal", type=float)
    s.add_argument("--eps-dual", type=float)
    s.add_argument("--nominal", action="store_true", help="drop robust margins (baseline)")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="Monte-Carlo validation of solved policies")
    m.add_argument("--scenario", required=True)
    m.add_argument("--policies", help="policy file (default: OUT/policies.txt)")
    m.add_argument("--samples", type=int, default=100, help="disturbance draws per agent")
    m.add_argument("--noise-samples", type=int, help="noise draws per disturbance draw")
    m.add_argument("--tau", type=float, help="draw disturbances at this uncertainty level instead")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="out")
    m.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="timing suites")
    b.add_argument("--suite", choices=bench.SUITES, required=True)
    b.add_argument("--horizon", type=int)
    b.add_argument("--out", default="out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
