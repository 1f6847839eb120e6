"""Timing suites: obstacle count, agent count and SOCP vs SDP reformulation."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import admm, conic
from . import constraints as cs
from .scenario import from_dict

SUITES = ("obstacles", "agents", "reformulation")
COLUMNS = ["suite", "param", "mode", "status", "converged", "iterations", "wall_s", "solver_s",
           "per_iter_max_agent_s", "objective", "ratio_to_socp"]


def vertical_formation(n_obstacles: int, T: int = 10, seed: int = 0) -> dict:
    """Six agents in a column cross a field of small obstacles placed between their lanes."""
    lanes = np.linspace(-1.25, 1.25, 6)
    gaps = [0.0, 0.5, -0.5, 1.0, -1.0]
    xs = [0.0, 0.6, -0.6]
    slots = [(x, y) for x in xs for y in gaps]
    obstacles = [{"center": [float(x), float(y)], "radius": 0.12} for x, y in slots[:n_obstacles]]
    if n_obstacles > len(slots):
        raise ValueError(f"at most {len(slots)} obstacles")
    agents = [{"x0": [-1.5, float(y), 0.0, 0.0], "target": {"mean": [1.5, float(y)], "eps": 0.2}} for y in lanes]
    return {"name": f"vertical_6_obs{n_obstacles}", "seed": seed, "horizon": T, "noise": {"enabled": False},
            "thresholds": {"interagent": 0.25, "obstacle": 0.12}, "neighbors": {"k_nearest": 1},
            "admm": {"rho_u": 100.0, "rho_d": 10.0, "eps_primal": 1.0, "eps_dual": 1.0},
            "obstacles": obstacles, "agents": agents}


def rectangular_formation(N: int, T: int = 10, seed: int = 0, spacing: float = 0.6, shift: float = 3.0) -> dict:
    """A near-square grid of ``N`` agents translates by ``shift`` past five small obstacles.

    Obstacles sit in the gaps between and beside the rows; each agent couples to
    its four nearest agents (all others when ``N <= 4``).
    """
    rows = max(r for r in range(1, int(np.sqrt(N)) + 1) if N % r == 0)
    cols = N // rows
    ys = spacing * (np.arange(rows) - (rows - 1) / 2)
    xs = spacing * (np.arange(cols) - (cols - 1) / 2) - shift / 2
    agents = [{"x0": [float(x), float(y), 0.0, 0.0], "target": {"mean": [float(x + shift), float(y)], "eps": 0.2}}
              for y in ys for x in xs]
    gaps = np.concatenate([(ys[:-1] + ys[1:]) / 2, [ys[0] - spacing / 2, ys[-1] + spacing / 2]])
    dx = [0.0, -0.6, 0.6, -0.3, 0.3]
    obstacles = [{"center": [dx[n], float(gaps[n % len(gaps)]) + 0.02], "radius": 0.1} for n in range(5)]
    return {"name": f"rectangle_{N}", "seed": seed, "horizon": T, "noise": {"enabled": False},
            "thresholds": {"interagent": 0.25, "obstacle": 0.1}, "neighbors": {"k_nearest": min(4, N - 1)},
            "admm": {"rho_u": 100.0, "rho_d": 10.0, "eps_primal": 1.0, "eps_dual": 1.0},
            "obstacles": obstacles, "agents": agents}


def single_agent(n_obstacles: int, T: int = 10, seed: int = 0) -> dict:
    obstacles = [{"center": [x, 0.08], "radius": 0.25} for x in (0.0, -0.9, 0.9)[:n_obstacles]]
    return {"name": f"single_obs{n_obstacles}", "seed": seed, "horizon": T, "noise": {"enabled": False},
            "obstacles": obstacles, "neighbors": {"k_nearest": 0},
            "agents": [{"x0": [-1.6, 0.0, 0.0, 0.0], "target": {"mean": [1.6, 0.0], "eps": 0.2}}]}


def _row(suite, param, mode, res: admm.RunResult) -> dict:
    per_iter = res.solver_time_s / max(res.iterations, 1) if res.mode == "distributed" else float("nan")
    return {"suite": suite, "param": param, "mode": mode, "status": "ok", "converged": res.converged,
            "iterations": res.iterations, "wall_s": res.wall_time_s, "solver_s": res.solver_time_s,
            "per_iter_max_agent_s": per_iter, "objective": res.objective}


def bench_obstacles(counts=(1, 2, 3, 5, 10), T: int = 10, log=print) -> list:
    rows = []
    for n in counts:
        scn = from_dict(vertical_formation(n, T))
        res = admm.run(scn)
        rows.append(_row("obstacles", n, "distributed", res))
        log(f"obstacles={n}: {res.message}, {res.solver_time_s:.2f} s solver time")
    return rows


def bench_agents(sizes=(4, 8, 16), T: int = 10, log=print) -> list:
    rows = []
    for N in sizes:
        scn = from_dict(rectangular_formation(N, T))
        for mode, fn in (("distributed", admm.run), ("centralized", admm.run_centralized)):
            res = fn(scn)
            rows.append(_row("agents", N, mode, res))
            log(f"N={N} {mode}: {res.message}, wall {res.wall_time_s:.2f} s")
    return rows


def _nominal(scn):
    """Collision-free nominal from the re-linearized SOCP route; both reformulations linearize around it."""
    res = admm.run_centralized(scn)
    return res.policies[0], res.mu_u[0]


def reformulation_programs(scn, method: str, nominal=None):
    ag = scn.agents[0]
    pol, mu = nominal or _nominal(scn)
    prog = conic.ConicProgram()
    blk = cs.AgentBlock(prog, "", ag.dyn, ag.uset, ag.noise, ag.H)
    specs = scn.specs(0)
    cs.reformulate_mean_target(specs[0], blk, key="target")
    for n, spec in enumerate(specs[1:]):
        if method == "socp":
            cs.reformulate_obstacle_socp(spec, blk, mu, key=f"obs{n}")
        else:
            cs.reformulate_obstacle_sdp_baseline(spec, blk, pol.u_bar, pol.K, key=f"obs{n}")
    admm._add_policy_cost(prog, blk, scn.weights)
    return prog


def bench_reformulation(counts=(1, 2, 3), T: int = 10, budget_factor: float = 10.0, time_cap: float = 600.0,
                        log=print) -> list:
    """SOCP and SDP routes on the same single-agent problem and nominal.

    The SDP row's status is ``budget`` when it needs more than ``budget_factor``
    times the SOCP time; ``time_cap`` bounds any single SDP solve.
    """
    import clarabel

    if not hasattr(clarabel, "PSDTriangleConeT"):
        log("backend has no PSD cone; reformulation suite skipped")
        return []
    rows = []
    for n in counts:
        scn = from_dict(single_agent(n, T))
        nominal = _nominal(scn)
        t_socp = None
        for method in ("socp", "sdp"):
            prog = reformulation_programs(scn, method, nominal)
            t0 = time.perf_counter()
            res = conic.solve(prog, time_limit=None if method == "socp" else time_cap, max_iter=500)
            wall = time.perf_counter() - t0
            if method == "socp":
                t_socp = wall
                status = "ok" if res.ok else res.status.value
            elif not res.ok:
                status = res.status.value
            else:
                status = "budget" if wall > budget_factor * t_socp else "ok"
            rows.append({"suite": "reformulation", "param": n, "mode": method, "status": status,
                         "converged": res.ok, "iterations": res.iterations, "wall_s": wall,
                         "solver_s": res.solve_time, "per_iter_max_agent_s": float("nan"),
                         "objective": res.objective if res.ok else float("nan"),
                         "ratio_to_socp": wall / t_socp})
            log(f"obstacles={n} {method}: {status}, {wall:.2f} s ({wall / t_socp:.1f}x SOCP)")
    return rows


def run_suite(suite: str, log=print, **kw) -> list:
    if suite == "obstacles":
        return bench_obstacles(log=log, **kw)
    if suite == "agents":
        return bench_agents(log=log, **kw)
    if suite == "reformulation":
        return bench_reformulation(log=log, **kw)
    raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def write_timing_csv(rows: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, restval="")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
