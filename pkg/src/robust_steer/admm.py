"""Consensus ADMM over per-agent conic subproblems, plus a centralized reference solver.

Each agent ``i`` owns its policy ``(u_bar, K)``, its position-mean trajectory
``mu_u`` and deviation bounds ``mu_d``, and copies of both for every neighbor
``j`` in ``N_i``. Consensus variables ``nu`` live with the owning agent. One
iteration is

    local solves -> copies sent to owners -> global averages -> nu sent back -> duals

with a barrier between phases. All cross-agent traffic goes through an
:class:`Exchange`, which records every delivery so the information pattern can
be audited.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import conic
from . import constraints as cs
from .conic import NONNEG, ConicProgram
from .lifting import Policy
from .scenario import Scenario


class AgentSolveError(RuntimeError):
    def __init__(self, agent: int, status, where: str = "local update"):
        super().__init__(f"agent {agent}: {where} returned {status.value if hasattr(status, 'value') else status}")
        self.agent = agent
        self.status = status


@dataclass
class AdmmConfig:
    rho_u: float = 100.0
    rho_d: float = 1.0
    max_iters: int = 200
    eps_primal: float = 0.1
    eps_dual: float = 0.1
    threads: int | None = None
    solver_tol: float = 1e-7

    def __post_init__(self):
        if not (self.rho_u > 0 and self.rho_d > 0):
            raise ValueError("penalties must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def for_scenario(cls, scn: Scenario, **overrides) -> "AdmmConfig":
        """Defaults by scene size, then the scenario's ``admm`` block, then ``overrides``."""
        small = scn.N <= 2
        cfg = {"rho_u": 100.0, "rho_d": 1.0 if small else 10.0,
               "eps_primal": 0.1 if small else 1.0, "eps_dual": 0.1 if small else 1.0}
        cfg.update({k: v for k, v in scn.admm.items() if k in cls.__dataclass_fields__})
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**cfg)


@dataclass
class AgentLocalState:
    index: int
    policy: Policy
    mu_u: np.ndarray
    mu_d: np.ndarray
    copy_u: dict  # neighbor -> copy of its mu_u
    copy_d: dict
    lam_u: np.ndarray
    lam_d: np.ndarray
    lam_copy_u: dict
    lam_copy_d: dict
    solve_s: float = 0.0
    objective: float = 0.0


@dataclass
class GlobalState:
    nu_u: list
    nu_d: list

    def copy(self) -> "GlobalState":
        return GlobalState([v.copy() for v in self.nu_u], [v.copy() for v in self.nu_d])


# -- message passing -----------------------------------------------------------------------

ALLOWED = {
    # holder -> owner: holder's copy of the owner's trajectory plus the matching dual
    "copy": lambda scn, sender, receiver: receiver in scn.neighbors[sender],
    # owner -> holder: the owner's consensus value
    "global": lambda scn, sender, receiver: sender in scn.neighbors[receiver],
}


@dataclass
class Exchange:
    """In-process mailboxes with a read log.

    ``post`` delivers a payload to another agent; every delivery is logged as
    ``(iteration, sender, receiver, kind, fields)``. Deliveries outside the
    neighbor pattern, or carrying fields other than trajectories and their
    duals, are recorded as violations (and raise when ``strict``).
    """

    scn: Scenario
    strict: bool = True
    log: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    _boxes: dict = field(default_factory=dict)

    PERMITTED_FIELDS = frozenset({"mu_u", "mu_d", "lam_u", "lam_d", "nu_u", "nu_d"})

    def post(self, it: int, sender: int, receiver: int, kind: str, payload: dict):
        entry = (it, sender, receiver, kind, tuple(sorted(payload)))
        self.log.append(entry)
        ok = kind in ALLOWED and ALLOWED[kind](self.scn, sender, receiver) and set(payload) <= self.PERMITTED_FIELDS
        if not ok:
            self.violations.append(entry)
            if self.strict:
                raise PermissionError(f"agent {receiver} may not receive {kind} {sorted(payload)} from {sender}")
        self._boxes.setdefault((receiver, kind), {})[sender] = {k: np.array(v, copy=True) for k, v in payload.items()}

    def inbox(self, receiver: int, kind: str) -> dict:
        return self._boxes.pop((receiver, kind), {})

    def audit(self) -> dict:
        return {"messages": len(self.log), "violations": len(self.violations),
                "kinds": sorted({e[3] for e in self.log})}


# -- per-agent program ---------------------------------------------------------------------

@dataclass
class LocalModel:
    """Static part of one agent's subproblem; linearized rows and penalties are added per solve."""
    index: int
    prog: ConicProgram
    block: cs.AgentBlock
    specs: list
    neighbors: list
    m: int


def _straight_line(scn: Scenario, i: int) -> np.ndarray:
    ag = scn.agents[i]
    start = ag.H @ ag.x0
    return np.linspace(start, ag.target_mean, scn.T + 1).reshape(-1)


def _add_policy_cost(prog: ConicProgram, blk: cs.AgentBlock, weights: dict):
    prog.add_squared(prog.var(blk.u_name), weights.get("R_u", 0.05))
    prog.add_squared(prog.var(blk.k_name), weights.get("R_K", 0.05) ** 2)


def _static_rows(blk: cs.AgentBlock, specs: list, other: dict, robust: bool = True):
    """Emit every nominal-independent row; ``other[j]`` gives ``(mu_u, mu_d)`` expressions for neighbor ``j``."""
    for n, spec in enumerate(specs):
        if isinstance(spec, cs.MeanTargetBox):
            cs.reformulate_mean_target(spec, blk, key=f"{blk.prefix}target")
        elif isinstance(spec, cs.ObstacleAvoid):
            cs.reformulate_obstacle_socp(spec, blk, None, key=f"{blk.prefix}obs{n}", parts="static")
        elif isinstance(spec, cs.InterAgentAvoid):
            if spec.neighbor in other:
                ou, od = other[spec.neighbor]
                cs.reformulate_interagent_socp(spec, blk, ou, od, None, None, key=f"{blk.prefix}ia{spec.neighbor}",
                                               parts="static")
        elif isinstance(spec, cs.LinearMean):
            cs.reformulate_linear_mean(spec, blk, key=f"{blk.prefix}lin{n}")
        elif isinstance(spec, cs.ChanceLinear):
            cs.reformulate_chance(spec, blk, key=f"{blk.prefix}chance{n}")
        elif isinstance(spec, cs.CovarianceBound):
            cs.reformulate_covariance(spec, blk, key=f"{blk.prefix}cov{n}")
        else:
            raise TypeError(f"unsupported constraint {type(spec).__name__}")


def _linear_rows(blk: cs.AgentBlock, specs: list, nominal_self, other: dict, nominal_other: dict):
    for n, spec in enumerate(specs):
        if isinstance(spec, cs.ObstacleAvoid):
            cs.reformulate_obstacle_socp(spec, blk, nominal_self, key=f"{blk.prefix}obs{n}", parts="linear")
        elif isinstance(spec, cs.InterAgentAvoid) and spec.neighbor in other:
            ou, od = other[spec.neighbor]
            cs.reformulate_interagent_socp(spec, blk, ou, od, nominal_self, nominal_other[spec.neighbor],
                                           key=f"{blk.prefix}ia{spec.neighbor}", parts="linear")


def build_local_model(scn: Scenario, i: int, robust: bool = True) -> LocalModel:
    ag = scn.agents[i]
    prog = ConicProgram()
    blk = cs.AgentBlock(prog, "", ag.dyn, ag.uset, ag.noise, ag.H, robust=robust)
    m = ag.H.shape[0]
    n = (scn.T + 1) * m
    other = {}
    for j in scn.neighbors[i]:
        cu = prog.add_variable(f"copy{j}.mu_u", n)
        cd = prog.add_variable(f"copy{j}.mu_d", n)
        # the owner's deviation bounds are norms, so their copies can be kept nonnegative
        prog.add(NONNEG, cd, f"copy{j}.mu_d.nonneg")
        other[j] = (cu, cd)
    specs = scn.specs(i)
    _static_rows(blk, specs, other, robust)
    _add_policy_cost(prog, blk, scn.weights)
    return LocalModel(i, prog, blk, specs, list(scn.neighbors[i]), m)


def assemble_local_subproblem(model: LocalModel, state: AgentLocalState, globals_in: dict, cfg: AdmmConfig,
                              nominal_self, nominal_other: dict) -> ConicProgram:
    """Static rows + linearized rows around the nominals + augmented-Lagrangian penalties.

    ``globals_in[j]`` holds ``nu_u``/``nu_d`` for the agent itself and each neighbor.
    The penalties ``rho/2 ||mu - nu + lam/rho||^2`` equal the dual inner products plus
    quadratic penalties up to a constant.
    """
    missing = [j for j in [model.index] + model.neighbors if j not in globals_in]
    if missing:
        raise KeyError(f"agent {model.index}: no consensus snapshot for {missing}")
    prog = model.prog.fork()
    blk = model.block
    blk.prog = prog
    try:
        other = {j: (prog.var(f"copy{j}.mu_u"), prog.var(f"copy{j}.mu_d")) for j in model.neighbors}
        _linear_rows(blk, model.specs, nominal_self, other, nominal_other)
    finally:
        blk.prog = model.prog
    me = globals_in[model.index]
    terms = [(prog.var("mu_u"), me["nu_u"], state.lam_u, cfg.rho_u),
             (prog.var("mu_d"), me["nu_d"], state.lam_d, cfg.rho_d)]
    for j in model.neighbors:
        terms.append((prog.var(f"copy{j}.mu_u"), globals_in[j]["nu_u"], state.lam_copy_u[j], cfg.rho_u))
        terms.append((prog.var(f"copy{j}.mu_d"), globals_in[j]["nu_d"], state.lam_copy_d[j], cfg.rho_d))
    for var, nu, lam, rho in terms:
        prog.add_squared(var - (nu - lam / rho), rho / 2.0)
    return prog


def _solve_local(model: LocalModel, state: AgentLocalState, globals_in: dict, cfg: AdmmConfig, solver):
    nominal_other = {j: state.copy_u[j] for j in model.neighbors}
    prog = assemble_local_subproblem(model, state, globals_in, cfg, state.mu_u, nominal_other)
    res = solver(prog, tol=cfg.solver_tol)
    if res.status != conic.Status.OPTIMAL:
        raise AgentSolveError(model.index, res.status)
    x = res.primal
    blk = model.block
    pol = blk.policy(x)
    j_cost = (model.prog.objective_value(x))
    return AgentLocalState(
        model.index, pol, x["mu_u"].copy(), x["mu_d"].copy(),
        {j: x[f"copy{j}.mu_u"].copy() for j in model.neighbors},
        {j: x[f"copy{j}.mu_d"].copy() for j in model.neighbors},
        state.lam_u, state.lam_d, state.lam_copy_u, state.lam_copy_d, res.solve_time, j_cost)


def _workers(cfg: AdmmConfig, n: int) -> int:
    cap = cfg.threads
    env = os.environ.get("ROBUST_STEER_THREADS")
    if env:
        cap = min(cap or int(env), int(env))
    return max(1, min(n, cap or os.cpu_count() or 1))


def local_update(models: list, states: list, inboxes: list, cfg: AdmmConfig, solver=conic.solve) -> list:
    """Solve every agent's subproblem; agents share nothing, so the solves run in parallel."""
    jobs = list(zip(models, states, inboxes))
    w = _workers(cfg, len(jobs))
    if w == 1:
        return [_solve_local(m, s, g, cfg, solver) for m, s, g in jobs]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(lambda job: _solve_local(*job, cfg, solver), jobs))


def global_update(state: AgentLocalState, copies_in: dict, cfg: AdmmConfig) -> tuple:
    """Closed-form minimizer of the augmented Lagrangian in ``nu`` for one owner.

    ``copies_in[h]`` holds the copy of this agent kept by holder ``h`` and its dual.
    """
    m_i = 1 + len(copies_in)
    nu_u = state.lam_u / cfg.rho_u + state.mu_u
    nu_d = state.lam_d / cfg.rho_d + state.mu_d
    for h in sorted(copies_in):
        msg = copies_in[h]
        nu_u = nu_u + msg["lam_u"] / cfg.rho_u + msg["mu_u"]
        nu_d = nu_d + msg["lam_d"] / cfg.rho_d + msg["mu_d"]
    return nu_u / m_i, nu_d / m_i


def dual_update(state: AgentLocalState, globals_in: dict, cfg: AdmmConfig) -> AgentLocalState:
    """``lam <- lam + rho (mu - nu)`` for the agent's own trajectories and each copy."""
    me = globals_in[state.index]
    state.lam_u = state.lam_u + cfg.rho_u * (state.mu_u - me["nu_u"])
    state.lam_d = state.lam_d + cfg.rho_d * (state.mu_d - me["nu_d"])
    state.lam_copy_u = {j: state.lam_copy_u[j] + cfg.rho_u * (state.copy_u[j] - globals_in[j]["nu_u"])
                        for j in state.copy_u}
    state.lam_copy_d = {j: state.lam_copy_d[j] + cfg.rho_d * (state.copy_d[j] - globals_in[j]["nu_d"])
                        for j in state.copy_d}
    return state


def residuals(states: list, glob: GlobalState, prev: GlobalState, cfg: AdmmConfig) -> tuple:
    """Primal residual over all consensus pairs and dual residual from the change in ``nu``."""
    N = len(states)
    num, count = 0.0, N
    for s in states:
        i = s.index
        num += np.sum((s.mu_u - glob.nu_u[i]) ** 2) + np.sum((s.mu_d - glob.nu_d[i]) ** 2)
        for j in s.copy_u:
            num += np.sum((s.copy_u[j] - glob.nu_u[j]) ** 2) + np.sum((s.copy_d[j] - glob.nu_d[j]) ** 2)
        count += len(s.copy_u)
    primal = float(np.sqrt(num / count))
    dual = 0.0
    for i in range(N):
        dual += cfg.rho_u ** 2 * np.sum((glob.nu_u[i] - prev.nu_u[i]) ** 2)
        dual += cfg.rho_d ** 2 * np.sum((glob.nu_d[i] - prev.nu_d[i]) ** 2)
    return primal, float(np.sqrt(dual) / N)


# -- drivers ---------------------------------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    policies: list
    converged: bool
    iterations: int
    trace: list
    objective: float
    primal: float = 0.0
    dual: float = 0.0
    solver_time_s: float = 0.0  # distributed: sum over iterations of the slowest agent's solve
    wall_time_s: float = 0.0
    audit: Exchange | None = None
    mu_u: list = field(default_factory=list)
    agent_time_s: list = field(default_factory=list)  # total local solve time per agent
    movement: float = float("nan")  # centralized: last change of the nominal trajectory

    @property
    def message(self) -> str:
        if self.mode == "centralized":
            why = "movement below tolerance" if self.converged else "outer-loop cap reached"
            return f"centralized: {why} after {self.iterations} loops (movement {self.movement:.3g})"
        state = "converged" if self.converged else "did not converge"
        return (f"{self.mode}: {state} after {self.iterations} iterations "
                f"(primal {self.primal:.3g}, dual {self.dual:.3g})")


def initial_states(scn: Scenario) -> tuple:
    states, nu_u, nu_d = [], [], []
    for i in range(scn.N):
        line = _straight_line(scn, i)
        z = np.zeros_like(line)
        nu_u.append(line)
        nu_d.append(z.copy())
    for i in range(scn.N):
        nb = scn.neighbors[i]
        states.append(AgentLocalState(
            i, Policy.zeros(scn.agents[i].dyn), nu_u[i].copy(), nu_d[i].copy(),
            {j: nu_u[j].copy() for j in nb}, {j: nu_d[j].copy() for j in nb},
            np.zeros_like(nu_u[i]), np.zeros_like(nu_d[i]),
            {j: np.zeros_like(nu_u[j]) for j in nb}, {j: np.zeros_like(nu_d[j]) for j in nb}))
    return states, GlobalState(nu_u, nu_d)


def run(scn: Scenario, cfg: AdmmConfig | None = None, seed: int = 0, trace_path=None, solver=conic.solve,
        callback=None, robust: bool = True, strict_audit: bool = True) -> RunResult:
    """Distributed consensus ADMM.

    ``callback(it, states, glob, copies_by_owner)`` runs after each global update
    (used by tests to check the closed form). ``seed`` is accepted for interface
    symmetry; the iteration itself is deterministic.
    """
    del seed
    cfg = cfg or AdmmConfig.for_scenario(scn)
    t_wall = time.perf_counter()
    models = [build_local_model(scn, i, robust) for i in range(scn.N)]
    states, glob = initial_states(scn)
    ex = Exchange(scn, strict=strict_audit)
    trace, solver_time = [], 0.0
    agent_time = [0.0] * scn.N
    primal = dual = float("inf")
    fh = open(trace_path, "w") if trace_path else None
    try:
        # initial consensus values reach the holders of copies
        for i in range(scn.N):
            for h in scn.owners(i):
                ex.post(0, i, h, "global", {"nu_u": glob.nu_u[i], "nu_d": glob.nu_d[i]})
        it = 0
        converged = False
        for it in range(1, cfg.max_iters + 1):
            inboxes = []
            for i in range(scn.N):
                box = {j: {"nu_u": v["nu_u"], "nu_d": v["nu_d"]} for j, v in ex.inbox(i, "global").items()}
                box[i] = {"nu_u": glob.nu_u[i], "nu_d": glob.nu_d[i]}
                inboxes.append(box)
            states = local_update(models, states, inboxes, cfg, solver)
            max_solve = max(s.solve_s for s in states)
            for s in states:
                agent_time[s.index] += s.solve_s
            solver_time += max_solve
            # copies travel to their owners
            for s in states:
                for j in s.copy_u:
                    ex.post(it, s.index, j, "copy", {"mu_u": s.copy_u[j], "mu_d": s.copy_d[j],
                                                     "lam_u": s.lam_copy_u[j], "lam_d": s.lam_copy_d[j]})
            prev = glob.copy()
            received = [ex.inbox(i, "copy") for i in range(scn.N)]
            for i, s in enumerate(states):
                glob.nu_u[i], glob.nu_d[i] = global_update(s, received[i], cfg)
            if callback is not None:
                callback(it, states, glob, received)
            for i in range(scn.N):
                for h in scn.owners(i):
                    ex.post(it, i, h, "global", {"nu_u": glob.nu_u[i], "nu_d": glob.nu_d[i]})
            views = []
            for i in range(scn.N):
                box = {j: v for j, v in ex.inbox(i, "global").items()}
                box[i] = {"nu_u": glob.nu_u[i], "nu_d": glob.nu_d[i]}
                views.append(box)
            primal, dual = residuals(states, glob, prev, cfg)
            for s, view in zip(states, views):
                dual_update(s, view, cfg)
            # the neighbor values just used stay available for the next local solve
            for i in range(scn.N):
                for j, v in views[i].items():
                    if j != i:
                        ex._boxes.setdefault((i, "global"), {})[j] = v
            row = {"iter": it, "primal": primal, "dual": dual, "max_agent_solve_ms": 1e3 * max_solve}
            trace.append(row)
            if fh:
                fh.write(json.dumps(row) + "\n")
            if primal <= cfg.eps_primal and dual <= cfg.eps_dual:
                converged = True
                break
    finally:
        if fh:
            fh.close()
    return RunResult("distributed", [s.policy for s in states], converged, it, trace,
                     float(sum(s.objective for s in states)), primal, dual, solver_time,
                     time.perf_counter() - t_wall, ex, [s.mu_u for s in states], agent_time)


def build_centralized(scn: Scenario, robust: bool = True):
    prog = ConicProgram()
    blocks = []
    for i, ag in enumerate(scn.agents):
        blk = cs.AgentBlock(prog, f"a{i}.", ag.dyn, ag.uset, ag.noise, ag.H, robust=robust)
        blocks.append(blk)
    pairs = scn.pairs()
    specs = []
    for i, blk in enumerate(blocks):
        # each unordered pair is imposed once, on the lower-index agent
        sp_i = [s for s in scn.specs(i) if not isinstance(s, cs.InterAgentAvoid)]
        sp_i += [cs.InterAgentAvoid(j, scn.thresholds["interagent"]) for (a, j) in pairs if a == i]
        specs.append(sp_i)
        other = {j: (prog.var(f"a{j}.mu_u"), prog.var(f"a{j}.mu_d")) for (a, j) in pairs if a == i}
        for (a, j) in pairs:
            if a == i:
                blocks[j].ensure_deviation_rows()
        _static_rows(blk, sp_i, other, robust)
        _add_policy_cost(prog, blk, scn.weights)
    return prog, blocks, specs


def run_centralized(scn: Scenario, cfg: AdmmConfig | None = None, max_outer: int = 10, move_tol: float = 1e-4,
                    solver=conic.solve, robust: bool = True, trace_path=None) -> RunResult:
    """One program over all agents, re-linearized around the previous solution."""
    cfg = cfg or AdmmConfig.for_scenario(scn)
    t_wall = time.perf_counter()
    prog, blocks, specs = build_centralized(scn, robust)
    nominal = [_straight_line(scn, i) for i in range(scn.N)]
    trace, solver_time = [], 0.0
    res = None
    moved = float("inf")
    loops = 0
    for loops in range(1, max_outer + 1):
        work = prog.fork()
        for i, blk in enumerate(blocks):
            blk.prog = work
            other = {s.neighbor: (work.var(f"a{s.neighbor}.mu_u"), work.var(f"a{s.neighbor}.mu_d"))
                     for s in specs[i] if isinstance(s, cs.InterAgentAvoid)}
            try:
                _linear_rows(blk, specs[i], nominal[i], other, {j: nominal[j] for j in other})
            finally:
                blk.prog = prog
        res = solver(work, tol=cfg.solver_tol)
        if res.status != conic.Status.OPTIMAL:
            raise AgentSolveError(-1, res.status, "centralized solve")
        solver_time += res.solve_time
        new = [res.primal[f"a{i}.mu_u"] for i in range(scn.N)]
        moved = max(float(np.abs(a - b).max()) for a, b in zip(new, nominal))
        nominal = new
        trace.append({"iter": loops, "movement": moved, "solve_ms": 1e3 * res.solve_time})
        if moved < move_tol:
            break
    if trace_path:
        with open(trace_path, "w") as fh:
            for row in trace:
                fh.write(json.dumps(row) + "\n")
    policies = [blk.policy(res.primal) for blk in blocks]
    return RunResult("centralized", policies, moved < move_tol, loops, trace,
                     float(prog.objective_value(res.primal)), 0.0, 0.0, solver_time,
                     time.perf_counter() - t_wall, None, nominal, [solver_time], moved)
