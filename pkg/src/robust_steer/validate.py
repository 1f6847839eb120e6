"""Monte-Carlo checks of solved policies against the original (unreformulated) constraints."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constraints as cs
from .lifting import build_lifted, closed_loop_factor, nominal_mean
from .scenario import Scenario
from .uncertainty import sample_disturbance, worst_case_disturbance


@dataclass
class TrajectoryEnsemble:
    """Closed-loop rollouts of every agent.

    ``states[i]`` has shape ``(n_zeta, n_w, T+1, n_x)`` and ``controls[i]``
    ``(n_zeta, n_w, T, n_u)``. Draw ``s`` of agent ``i`` is paired with draw
    ``s`` of every other agent when distances are computed.
    """

    scenario: Scenario
    policies: list
    zetas: list  # per agent, (n_zeta, n_zeta_dim)
    states: list
    controls: list
    seed: int
    tau: list  # uncertainty level used for each agent's draws

    @property
    def n_zeta(self) -> int:
        return self.zetas[0].shape[0]

    @property
    def n_w(self) -> int:
        return self.states[0].shape[1]

    @property
    def N(self) -> int:
        return len(self.states)

    def positions(self, i: int) -> np.ndarray:
        """Realized positions, ``(n_zeta, n_w, T+1, m)``."""
        return self.states[i] @ self.scenario.agents[i].H.T

    def means(self, i: int, zetas=None) -> np.ndarray:
        """Noise-averaged state sequences ``(n, T+1, n_x)`` at the given (default: stored) draws."""
        ag = self.scenario.agents[i]
        lift = build_lifted(ag.dyn)
        zs = self.zetas[i] if zetas is None else np.atleast_2d(zetas)
        F = closed_loop_factor(lift, self.policies[i].K)
        base = nominal_mean(lift, ag.dyn.x0_bar, self.policies[i].u_bar)
        out = base[None, :] + zs @ (F @ lift.Gzeta).T
        return out.reshape(len(zs), ag.dyn.T + 1, ag.dyn.nx)

    def summary(self) -> dict:
        out = {"n_zeta": self.n_zeta, "n_w": self.n_w, "seed": self.seed}
        if self.N > 1:
            d = min_neighbor_distances(self)
            out["min_interagent_distance"] = float(d[:, 1:].min())
        clear = obstacle_clearance(self)
        if clear is not None:
            out["min_obstacle_clearance"] = float(clear[:, 1:].min())
        term = []
        for i in range(self.N):
            x = self.states[i][:, :, -1, :].reshape(-1, self.states[i].shape[-1])
            term.append({"agent": i, "mean": x.mean(axis=0).tolist(),
                         "cov": (np.cov(x.T) if len(x) > 1 else np.zeros((x.shape[1],) * 2)).tolist()})
        out["terminal"] = term
        return out


def _check_policies(scn: Scenario, policies: list):
    if len(policies) != scn.N:
        raise ValueError(f"expected {scn.N} policies, got {len(policies)}")
    for i, (ag, pol) in enumerate(zip(scn.agents, policies)):
        dyn = ag.dyn
        if pol.u_bar.shape != (dyn.T * dyn.nu,) or pol.K.shape != (dyn.T * dyn.nu, (dyn.T + 1) * dyn.nx):
            raise ValueError(f"policy {i} does not match agent {i}'s dimensions")


def monte_carlo(scn: Scenario, policies: list, n_zeta: int = 100, n_w: int = 1, seed: int = 0, zetas=None,
                noise: bool = True, tau: float | None = None) -> TrajectoryEnsemble:
    """Roll out every agent for ``n_zeta`` disturbance draws times ``n_w`` noise draws.

    ``zetas`` (one array per agent) replaces the sampled draws; ``noise=False``
    forces ``w = 0``; ``tau`` samples from the agents' sets rescaled to that level.
    Draws are a pure function of ``(seed, agent index)``.
    """
    _check_policies(scn, policies)
    states, controls, zs_all, taus = [], [], [], []
    for i, (ag, pol) in enumerate(zip(scn.agents, policies)):
        dyn = ag.dyn
        lift = build_lifted(dyn)
        uset = ag.uset if tau is None else ag.uset.with_tau(tau)
        if zetas is not None:
            zs = np.atleast_2d(np.asarray(zetas[i], dtype=float))
        else:
            zs = sample_disturbance(uset, n_zeta, [seed, i, 0])
        nz = zs.shape[0]
        if noise and np.any(ag.noise.sigma_w):
            ws = ag.noise.sample(nz * n_w, [seed, i, 1])
        else:
            ws = np.zeros((nz * n_w, dyn.n_w))
        # purified state: disturbance response of the open loop
        delta = np.repeat(zs, n_w, axis=0) @ lift.Gzeta.T + ws @ lift.Gw.T
        F = closed_loop_factor(lift, pol.K)
        base = nominal_mean(lift, dyn.x0_bar, pol.u_bar)
        x = base[None, :] + delta @ F.T
        u = pol.u_bar[None, :] + delta @ pol.K.T
        states.append(x.reshape(nz, n_w, dyn.T + 1, dyn.nx))
        controls.append(u.reshape(nz, n_w, dyn.T, dyn.nu))
        zs_all.append(zs)
        taus.append(uset.tau)
    return TrajectoryEnsemble(scn, list(policies), zs_all, states, controls, seed, taus)


def min_neighbor_distances(ens: TrajectoryEnsemble) -> np.ndarray:
    """Per agent and timestep, the smallest realized distance to any other agent, ``(N, T+1)``."""
    if ens.N < 2:
        raise ValueError("distances need at least two agents")
    pos = [ens.positions(i) for i in range(ens.N)]
    out = np.full((ens.N, pos[0].shape[2]), np.inf)
    for i in range(ens.N):
        for j in range(i + 1, ens.N):
            d = np.linalg.norm(pos[i] - pos[j], axis=-1).min(axis=(0, 1))
            out[i] = np.minimum(out[i], d)
            out[j] = np.minimum(out[j], d)
    return out


def obstacle_clearance(ens: TrajectoryEnsemble):
    """Per agent and timestep, realized distance to the nearest obstacle boundary (``None`` without obstacles)."""
    obs = ens.scenario.obstacles
    if not obs:
        return None
    out = []
    for i in range(ens.N):
        p = ens.positions(i)
        c = np.min([np.linalg.norm(p - ctr, axis=-1) - r for ctr, r in obs], axis=0)
        out.append(c.min(axis=(0, 1)))
    return np.array(out)


# -- covariance ----------------------------------------------------------------------------

@dataclass
class CovarianceCheck:
    sample: np.ndarray
    bound: np.ndarray | None = None
    min_eig: float = float("nan")
    stderr: float = 0.0
    dominated: bool = True

    def to_dict(self) -> dict:
        return {"min_eig": self.min_eig, "stderr": self.stderr, "dominated": bool(self.dominated),
                "sample": self.sample.tolist()}


def empirical_covariance(ens: TrajectoryEnsemble, at: int, agent: int = 0, zeta_index: int = 0,
                         bound=None, n_se: float = 4.0) -> CovarianceCheck:
    """Sample covariance of ``x_at`` over the noise draws at one disturbance draw.

    With ``bound`` given, checks ``lambda_min(bound - sample) >= -n_se * SE``
    where SE is the delta-method standard error of ``v^T sample v`` along the
    minimizing eigenvector ``v``.
    """
    x = ens.states[agent][zeta_index, :, at, :]
    n = x.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least two noise draws")
    xc = x - x.mean(axis=0)
    C = xc.T @ xc / (n - 1)
    out = CovarianceCheck(C)
    if bound is None:
        return out
    bound = np.asarray(bound, dtype=float)
    lam, V = np.linalg.eigh(bound - C)
    v = V[:, 0]
    proj = xc @ v
    s2 = float(proj @ proj / (n - 1))
    se = float(np.sqrt(max(np.mean(proj ** 4) - s2 ** 2, 0.0) / n))
    out.bound, out.min_eig, out.stderr = bound, float(lam[0]), se
    out.dominated = bool(lam[0] >= -n_se * se - 1e-12)
    return out


# -- feasibility -----------------------------------------------------------------------------

@dataclass
class ConstraintCheck:
    agent: int
    kind: str
    label: str
    worst_margin: float
    violations: int
    evaluated: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"agent": self.agent, "kind": self.kind, "label": self.label, "worst_margin": self.worst_margin,
                "violations": self.violations, "evaluated": self.evaluated, **self.detail}


@dataclass
class FeasibilityReport:
    checks: list

    @property
    def violations(self) -> int:
        return int(sum(c.violations for c in self.checks))

    def count(self, kind: str) -> int:
        return int(sum(c.violations for c in self.checks if c.kind == kind))

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        kinds = sorted({c.kind for c in self.checks})
        return {"violations": self.violations, "by_kind": {k: self.count(k) for k in kinds},
                "checks": [c.to_dict() for c in self.checks]}


def _sensitivity(ens: TrajectoryEnsemble, i: int) -> np.ndarray:
    """``(Gu K + I) Gzeta``: how the mean state sequence responds to ``zeta``."""
    ag = ens.scenario.agents[i]
    lift = build_lifted(ag.dyn)
    return closed_loop_factor(lift, ens.policies[i].K) @ lift.Gzeta


def _worst(ens: TrajectoryEnsemble, i: int, row: np.ndarray) -> np.ndarray:
    """Disturbance maximizing ``row^T mean`` over agent ``i``'s set."""
    ag = ens.scenario.agents[i]
    uset = ag.uset.with_tau(ens.tau[i])
    return worst_case_disturbance(uset, uset.Gamma.T @ _sensitivity(ens, i).T @ row)


def _state_row(ag, k: int, coeffs) -> np.ndarray:
    a = np.zeros((ag.dyn.T + 1) * ag.dyn.nx)
    a[k * ag.dyn.nx:(k + 1) * ag.dyn.nx] = coeffs
    return a


def _check_target(ens, i, spec, tol):
    ag = ens.scenario.agents[i]
    a = spec.a_bar
    cands = [ens.zetas[i]]
    for r in range(a.shape[0]):
        cands.append(np.stack([_worst(ens, i, a[r]), _worst(ens, i, -a[r])]))
    zs = np.vstack(cands)
    mean = ens.means(i, zs).reshape(len(zs), -1)
    err = np.abs(mean @ a.T - spec.b_bar)
    eps = np.inf if spec.eps is None else spec.eps
    margin = (eps - err).min(axis=1)
    return ConstraintCheck(i, "target", f"agent{i}.target", float(margin.min()),
                           int(np.sum(margin < -tol)), len(zs))


def _check_linear(ens, i, spec, n, tol):
    cands = [ens.zetas[i]] + [_worst(ens, i, spec.a[r])[None] for r in range(spec.a.shape[0])]
    zs = np.vstack(cands)
    mean = ens.means(i, zs).reshape(len(zs), -1)
    margin = (spec.b - mean @ spec.a.T).min(axis=1)
    return ConstraintCheck(i, "linear_mean", f"agent{i}.linear{n}", float(margin.min()),
                           int(np.sum(margin < -tol)), len(zs))


def _steps(T, timesteps):
    return list(range(1, T + 1)) if timesteps is None else [int(k) for k in timesteps]


def _check_obstacle(ens, i, spec, n, tol):
    ag = ens.scenario.agents[i]
    ks = _steps(ag.dyn.T, spec.timesteps)
    base = ens.means(i)[:, :, :] @ ag.H.T  # (n_zeta, T+1, m)
    margins = [(np.linalg.norm(base[:, ks] - spec.center, axis=-1) - spec.radius).min(axis=1)]
    # analytic worst case: push the nominal mean toward the center at each step
    nominal = ens.means(i, np.zeros((1, ens.zetas[i].shape[1])))[0] @ ag.H.T
    worst = []
    for k in ks:
        g = nominal[k] - spec.center
        nrm = np.linalg.norm(g)
        if nrm == 0:
            continue
        worst.append(_worst(ens, i, _state_row(ag, k, -(g / nrm) @ ag.H)))
    if worst:
        wpos = ens.means(i, np.stack(worst)) @ ag.H.T
        margins.append((np.linalg.norm(wpos[:, ks] - spec.center, axis=-1) - spec.radius).min(axis=1))
    m = np.concatenate(margins)
    return ConstraintCheck(i, "obstacle", f"agent{i}.obstacle{n}", float(m.min()), int(np.sum(m < -tol)), len(m))


def _check_pair(ens, i, j, c, tol):
    scn = ens.scenario
    ai, aj = scn.agents[i], scn.agents[j]
    T = ai.dyn.T
    pi = ens.means(i) @ ai.H.T
    pj = ens.means(j) @ aj.H.T
    margins = [(np.linalg.norm(pi[:, 1:] - pj[:, 1:], axis=-1) - c).min(axis=1)]
    zi0 = np.zeros((1, ens.zetas[i].shape[1]))
    zj0 = np.zeros((1, ens.zetas[j].shape[1]))
    ni = ens.means(i, zi0)[0] @ ai.H.T
    nj = ens.means(j, zj0)[0] @ aj.H.T
    wi, wj = [], []
    for k in range(1, T + 1):
        g = ni[k] - nj[k]
        nrm = np.linalg.norm(g)
        if nrm == 0:
            continue
        g = g / nrm
        wi.append(_worst(ens, i, _state_row(ai, k, -g @ ai.H)))
        wj.append(_worst(ens, j, _state_row(aj, k, g @ aj.H)))
    if wi:
        qi = ens.means(i, np.stack(wi)) @ ai.H.T
        qj = ens.means(j, np.stack(wj)) @ aj.H.T
        margins.append((np.linalg.norm(qi[:, 1:] - qj[:, 1:], axis=-1) - c).min(axis=1))
    m = np.concatenate(margins)
    return ConstraintCheck(i, "interagent", f"agent{i}.agent{j}", float(m.min()), int(np.sum(m < -tol)), len(m))


def chance_rate(ens: TrajectoryEnsemble, agent: int, spec: cs.ChanceLinear) -> np.ndarray:
    """Empirical ``P(a^T x > b)`` over the noise draws, one value per disturbance draw."""
    x = ens.states[agent].reshape(ens.n_zeta, ens.n_w, -1)
    return np.mean(x @ spec.a > spec.b, axis=1)


def _check_chance(ens, i, spec, n):
    rate = chance_rate(ens, i, spec)
    band = spec.p + 2.0 * np.sqrt(spec.p * (1 - spec.p) / ens.n_w)
    return ConstraintCheck(i, "chance", f"agent{i}.chance{n}", float(spec.p - rate.max()),
                           int(np.sum(rate > band)), ens.n_zeta,
                           {"max_rate": float(rate.max()), "band": float(band), "p": spec.p})


def _check_covariance(ens, i, spec, n):
    if spec.timestep is not None:
        chk = empirical_covariance(ens, spec.timestep, agent=i, bound=spec.sigma_bound)
    else:
        # bound on the whole stacked sequence: reuse the check on a flattened view
        x = ens.states[i][:1].reshape(1, ens.n_w, 1, -1)
        view = TrajectoryEnsemble(ens.scenario, ens.policies, ens.zetas, [x], ens.controls, ens.seed, ens.tau)
        chk = empirical_covariance(view, 0, agent=0, bound=spec.sigma_bound)
    return ConstraintCheck(i, "covariance", f"agent{i}.covariance{n}", chk.min_eig, int(not chk.dominated), 1,
                           {"stderr": chk.stderr})


def check_feasibility(ens: TrajectoryEnsemble, tol: float = 1e-6, specs=None) -> FeasibilityReport:
    """Evaluate every original constraint on the ensemble.

    Mean constraints (target box, linear, obstacle and pair distances) are
    evaluated on the noise-averaged trajectories at every sampled disturbance
    plus the analytic worst-case disturbances; chance and covariance constraints
    use the noise draws. ``specs[i]`` overrides agent ``i``'s constraint list.
    """
    scn = ens.scenario
    checks = []
    for i in range(ens.N):
        for n, spec in enumerate(scn.specs(i) if specs is None else specs[i]):
            if isinstance(spec, cs.MeanTargetBox):
                checks.append(_check_target(ens, i, spec, tol))
            elif isinstance(spec, cs.LinearMean):
                checks.append(_check_linear(ens, i, spec, n, tol))
            elif isinstance(spec, cs.ObstacleAvoid):
                checks.append(_check_obstacle(ens, i, spec, n, tol))
            elif isinstance(spec, cs.InterAgentAvoid):
                checks.append(_check_pair(ens, i, spec.neighbor, spec.c, tol))
            elif isinstance(spec, cs.ChanceLinear):
                if ens.n_w > 1:
                    checks.append(_check_chance(ens, i, spec, n))
            elif isinstance(spec, cs.CovarianceBound):
                if ens.n_w > 1:
                    checks.append(_check_covariance(ens, i, spec, n))
    return FeasibilityReport(checks)


# -- emission ------------------------------------------------------------------------------

def write_trajectories_csv(ens: TrajectoryEnsemble, path) -> Path:
    """One row per agent, draw and timestep; controls are blank at the final step."""
    path = Path(path)
    nx = ens.states[0].shape[-1]
    nu = ens.controls[0].shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "zeta_id", "w_id", "k"] + [f"x{j}" for j in range(nx)] + [f"u{j}" for j in range(nu)])
        for i in range(ens.N):
            X, U = ens.states[i], ens.controls[i]
            T = X.shape[2] - 1
            for s in range(X.shape[0]):
                for r in range(X.shape[1]):
                    for k in range(T + 1):
                        u = [repr(float(v)) for v in U[s, r, k]] if k < T else [""] * nu
                        w.writerow([i, s, r, k] + [repr(float(v)) for v in X[s, r, k]] + u)
    return path


def write_distances_csv(dist: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "k", "min_distance"])
        for i in range(dist.shape[0]):
            for k in range(dist.shape[1]):
                w.writerow([i, k, repr(float(dist[i, k]))])
    return path


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
