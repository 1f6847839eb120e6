"""Scenario files: loading, validation, defaults and round-trip saving.

A scenario is a YAML mapping. Top-level keys::

    name, seed, horizon, gamma_h
    uncertainty: {tau, Gamma?, S?}            default for every agent
    noise: {initial_std, step_std} | {enabled: false} | {sigma_w}
    thresholds: {interagent, obstacle}
    weights: {R_u, R_K}
    neighbors: {k_nearest: n} | {adjacency: [[j, ...], ...]}
    obstacles: [{center, radius?}, ...]
    admm: {rho_u, rho_d, eps_primal, eps_dual, max_iters}
    agents: [{x0, target: {mean, eps?}, dynamics?, uncertainty?, noise?, constraints?}, ...]

Agent constraint entries::

    {type: linear_mean, timestep, coeffs, b}
    {type: chance, timestep, coeffs, b, p}
    {type: covariance, timestep?, std | sigma}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import constraints as cs
from .lifting import H_POS, AgentDynamics, double_integrator_2d, random_disturbance_gains
from .uncertainty import NoiseModel, UncertaintySet

TEMPLATES = ("double_integrator_2d", "explicit")

DEFAULTS = {
    "seed": 0,
    "gamma_h": None,
    "uncertainty": {"tau": 0.01},
    "noise": {"initial_std": [0.2, 0.2, 0.5, 0.5], "step_std": [0.02, 0.02, 0.2, 0.2]},
    "thresholds": {"interagent": 0.25, "obstacle": 0.5},
    "weights": {"R_u": 0.05, "R_K": 0.05},
    "neighbors": {"k_nearest": 1},
    "obstacles": [],
    "admm": {},
}


class ScenarioError(ValueError):
    """Schema or consistency violation; the message starts with the offending field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class AgentSpec:
    index: int
    dyn: AgentDynamics
    uset: UncertaintySet
    noise: NoiseModel
    H: np.ndarray
    target_mean: np.ndarray
    target_eps: float | None
    extra: list = field(default_factory=list)  # LinearMean / ChanceLinear / CovarianceBound

    @property
    def x0(self) -> np.ndarray:
        return self.dyn.x0_bar


@dataclass
class Scenario:
    name: str
    T: int
    seed: int
    agents: list
    obstacles: list  # (center, radius)
    neighbors: list  # neighbors[i] = sorted agent ids agent i avoids
    thresholds: dict
    weights: dict
    admm: dict
    raw: dict

    @property
    def N(self) -> int:
        return len(self.agents)

    def owners(self, i: int) -> list:
        """Agents that hold a copy of agent ``i`` (those with ``i`` among their neighbors)."""
        return [j for j in range(self.N) if i in self.neighbors[j]]

    def specs(self, i: int) -> list:
        """All constraint specifications of agent ``i`` in a fixed order."""
        ag = self.agents[i]
        T = self.T
        m = ag.H.shape[0]
        sel = np.zeros((m, (T + 1) * ag.dyn.nx))
        sel[:, T * ag.dyn.nx:(T + 1) * ag.dyn.nx] = ag.H
        out = [cs.MeanTargetBox(sel, ag.target_mean, ag.target_eps)]
        out += [cs.ObstacleAvoid(c, r) for c, r in self.obstacles]
        out += [cs.InterAgentAvoid(j, self.thresholds["interagent"]) for j in self.neighbors[i]]
        out += list(ag.extra)
        return out

    def pairs(self) -> list:
        """Unordered neighbor pairs, each once."""
        return sorted({(min(i, j), max(i, j)) for i in range(self.N) for j in self.neighbors[i]})


def _arr(val, path, shape=None, ndim=None) -> np.ndarray:
    try:
        a = np.asarray(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(path, "must be numeric") from exc
    if ndim is not None and a.ndim != ndim:
        raise ScenarioError(path, f"must have {ndim} dimension(s), got shape {a.shape}")
    if shape is not None and a.shape != tuple(shape):
        raise ScenarioError(path, f"must have shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ScenarioError(path, "must be finite")
    return a


def _pos(val, path) -> float:
    try:
        v = float(val)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(path, "must be a number") from exc
    if not v > 0:
        raise ScenarioError(path, f"must be positive, got {v}")
    return v


def _merge(base: dict, over: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        out[k] = copy.deepcopy(v)
    return out


def _dynamics(d: dict, T: int, x0, gamma_h, rng, path: str) -> tuple[AgentDynamics, np.ndarray, dict]:
    template = d.get("template", "double_integrator_2d")
    if template not in TEMPLATES:
        raise ScenarioError(f"{path}.template", f"unknown template {template!r}")
    try:
        if template == "double_integrator_2d":
            if "C" in d:
                C = _arr(d["C"], f"{path}.C", shape=(T, 4, 2))
            else:
                C = random_disturbance_gains(T, rng)
            dyn = double_integrator_2d(T, x0, C=C, gamma_h=gamma_h)
            frozen = {"template": template, "C": C.tolist()}
            return dyn, H_POS.copy(), frozen
        mats = {}
        for key in "ABCD":
            if key not in d:
                raise ScenarioError(f"{path}.{key}", "required for explicit dynamics")
            M = _arr(d[key], f"{path}.{key}")
            if M.ndim == 2:
                M = np.repeat(M[None], T, axis=0)
            if M.ndim != 3 or M.shape[0] != T:
                raise ScenarioError(f"{path}.{key}", f"must be one matrix or {T} matrices")
            mats[key] = M
        dyn = AgentDynamics(mats["A"], mats["B"], mats["C"], mats["D"], x0, gamma_h)
        H = _arr(d.get("position", np.eye(2, dyn.nx)), f"{path}.position", ndim=2)
        frozen = {"template": template, **{k: v.tolist() for k, v in mats.items()}, "position": H.tolist()}
        return dyn, H, frozen
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(path, str(exc)) from exc


def _noise_cfg(over: dict | None, base: dict) -> dict:
    if not over:
        return copy.deepcopy(base)
    if over.get("enabled") is False or "sigma_w" in over:
        return copy.deepcopy(over)
    return _merge(base if "sigma_w" not in base and base.get("enabled", True) else {}, over)


def _noise(d: dict, dyn: AgentDynamics, path: str) -> NoiseModel:
    n = dyn.n_w
    if d.get("enabled", True) is False:
        return NoiseModel(np.zeros((n, n)), np.zeros((n, n)))
    if "sigma_w" in d:
        S = _arr(d["sigma_w"], f"{path}.sigma_w", shape=(n, n))
        try:
            return NoiseModel.from_covariance(S)
        except ValueError as exc:
            raise ScenarioError(f"{path}.sigma_w", str(exc)) from exc
    s0 = _arr(d.get("initial_std"), f"{path}.initial_std", shape=(dyn.nx,))
    sw = _arr(d.get("step_std"), f"{path}.step_std", shape=(dyn.nw,))
    if np.any(s0 < 0) or np.any(sw < 0):
        raise ScenarioError(path, "standard deviations must be nonnegative")
    return NoiseModel.from_blocks(np.diag(s0 ** 2), np.diag(sw ** 2), dyn.T)


def _uncertainty(d: dict, dyn: AgentDynamics, path: str) -> UncertaintySet:
    tau = _pos(d.get("tau"), f"{path}.tau")
    n = dyn.n_zeta
    Gamma = _arr(d["Gamma"], f"{path}.Gamma", ndim=2) if "Gamma" in d else np.eye(n)
    if Gamma.shape[0] != n:
        raise ScenarioError(f"{path}.Gamma", f"must have {n} rows")
    S = _arr(d["S"], f"{path}.S", shape=(Gamma.shape[1],) * 2) if "S" in d else np.eye(Gamma.shape[1])
    try:
        return UncertaintySet(Gamma, S, tau)
    except ValueError as exc:
        raise ScenarioError(f"{path}.S", str(exc)) from exc


def _state_row(dyn: AgentDynamics, k, coeffs, path: str) -> np.ndarray:
    k = int(k)
    if not 0 <= k <= dyn.T:
        raise ScenarioError(f"{path}.timestep", f"must lie in [0, {dyn.T}]")
    c = _arr(coeffs, f"{path}.coeffs", shape=(dyn.nx,))
    a = np.zeros((dyn.T + 1) * dyn.nx)
    a[k * dyn.nx:(k + 1) * dyn.nx] = c
    return a


def _extra(items, dyn: AgentDynamics, path: str) -> list:
    out = []
    for n, item in enumerate(items or []):
        p = f"{path}[{n}]"
        kind = item.get("type")
        try:
            if kind == "linear_mean":
                out.append(cs.LinearMean(_state_row(dyn, item["timestep"], item["coeffs"], p)[None], [item["b"]]))
            elif kind == "chance":
                out.append(cs.ChanceLinear(_state_row(dyn, item["timestep"], item["coeffs"], p), item["b"], item["p"]))
            elif kind == "covariance":
                k = item.get("timestep")
                r = dyn.nx if k is not None else (dyn.T + 1) * dyn.nx
                if "std" in item:
                    sig = np.diag(_arr(item["std"], f"{p}.std", shape=(r,)) ** 2)
                else:
                    sig = _arr(item.get("sigma"), f"{p}.sigma", shape=(r, r))
                if k is not None and not 0 <= int(k) <= dyn.T:
                    raise ScenarioError(f"{p}.timestep", f"must lie in [0, {dyn.T}]")
                out.append(cs.CovarianceBound(sig, None if k is None else int(k)))
            else:
                raise ScenarioError(f"{p}.type", f"unknown constraint type {kind!r}")
        except KeyError as exc:
            raise ScenarioError(p, f"missing field {exc.args[0]!r}") from exc
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError(p, str(exc)) from exc
    return out


def k_nearest(x0s: np.ndarray, k: int) -> list:
    """Indices of the ``k`` closest agents by initial position (ties by index)."""
    N = len(x0s)
    out = []
    for i in range(N):
        d = np.linalg.norm(x0s - x0s[i], axis=1)
        order = sorted((j for j in range(N) if j != i), key=lambda j: (d[j], j))
        out.append(sorted(order[:min(k, N - 1)]))
    return out


def from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "scenario must be a mapping")
    raw = {**copy.deepcopy(DEFAULTS), **copy.deepcopy(data)}
    for key in ("uncertainty", "thresholds", "weights"):
        raw[key] = _merge(DEFAULTS[key], data.get(key))
    raw["noise"] = _noise_cfg(data.get("noise"), DEFAULTS["noise"])
    if "horizon" not in raw:
        raise ScenarioError("horizon", "required")
    T = int(raw["horizon"])
    if T < 1:
        raise ScenarioError("horizon", "must be at least 1")
    if not raw.get("agents"):
        raise ScenarioError("agents", "at least one agent is required")
    seed = int(raw["seed"])
    thresholds = {k: _pos(v, f"thresholds.{k}") for k, v in raw["thresholds"].items()}
    weights = {k: _pos(v, f"weights.{k}") for k, v in raw["weights"].items()}
    gamma_h = raw.get("gamma_h")
    obstacles = []
    for n, ob in enumerate(raw.get("obstacles") or []):
        c = _arr(ob.get("center"), f"obstacles[{n}].center", ndim=1)
        r = _pos(ob.get("radius", thresholds["obstacle"]), f"obstacles[{n}].radius")
        obstacles.append((c, r))
    agents, frozen_agents = [], []
    for i, a in enumerate(raw["agents"]):
        path = f"agents[{i}]"
        if "x0" not in a:
            raise ScenarioError(f"{path}.x0", "required")
        x0 = _arr(a["x0"], f"{path}.x0", ndim=1)
        rng = np.random.default_rng([seed, i])
        dyn, H, frozen_dyn = _dynamics(a.get("dynamics") or {}, T, x0, gamma_h, rng, f"{path}.dynamics")
        uset = _uncertainty(_merge(raw["uncertainty"], a.get("uncertainty")), dyn, f"{path}.uncertainty")
        noise = _noise(_noise_cfg(a.get("noise"), raw["noise"]), dyn, f"{path}.noise")
        tgt = a.get("target")
        if not isinstance(tgt, dict) or "mean" not in tgt:
            raise ScenarioError(f"{path}.target.mean", "required")
        tmean = _arr(tgt["mean"], f"{path}.target.mean", shape=(H.shape[0],))
        eps = tgt.get("eps")
        eps = None if eps is None else _pos(eps, f"{path}.target.eps")
        for c, _ in obstacles:
            if c.shape != (H.shape[0],):
                raise ScenarioError("obstacles", f"centers must have length {H.shape[0]}")
        extra = _extra(a.get("constraints"), dyn, f"{path}.constraints")
        agents.append(AgentSpec(i, dyn, uset, noise, H, tmean, eps, extra))
        frozen_agents.append({**copy.deepcopy(a), "dynamics": frozen_dyn})
    N = len(agents)
    nb = raw["neighbors"] or {}
    if "adjacency" in nb:
        adj = nb["adjacency"]
        if len(adj) != N:
            raise ScenarioError("neighbors.adjacency", f"must list {N} entries")
        neighbors = []
        for i, row in enumerate(adj):
            row = sorted(int(j) for j in row)
            for j in row:
                if not 0 <= j < N or j == i:
                    raise ScenarioError(f"neighbors.adjacency[{i}]", f"invalid agent id {j}")
            neighbors.append(row)
    else:
        k = int(nb.get("k_nearest", 1))
        if k < 0:
            raise ScenarioError("neighbors.k_nearest", "must be nonnegative")
        neighbors = k_nearest(np.array([a.x0[:2] for a in agents]), k) if N > 1 else [[]]
    raw["agents"] = frozen_agents
    admm = dict(raw.get("admm") or {})
    return Scenario(str(raw.get("name", "scenario")), T, seed, agents, obstacles, neighbors, thresholds, weights,
                    admm, raw)


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise FileNotFoundError(f"scenario not found: {path}")
        p = bundled
    with open(p) as fh:
        data = yaml.safe_load(fh)
    return from_dict(data)


def save_scenario(scn: Scenario, path) -> Path:
    """Write the fully resolved scenario (defaults filled, random gains frozen)."""
    path = Path(path)
    with open(path, "w") as fh:
        yaml.safe_dump(scn.raw, fh, sort_keys=False)
    return path


def bundled_path(name: str) -> Path | None:
    stem = name[:-5] if name.endswith(".yaml") else name
    root = resources.files("robust_steer") / "scenarios"
    for cand in sorted(p.name for p in root.iterdir() if p.name.endswith(".yaml")):
        if cand[:-5] == stem or cand[:-5].startswith(stem + "_") or cand.startswith(stem):
            return Path(str(root / cand))
    return None


def bundled_names() -> list:
    root = resources.files("robust_steer") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))
