import json

import numpy as np
import pytest

from conftest import crossing_pair, lone_agent
from robust_steer import admm, conic
from robust_steer.admm import AdmmConfig, AgentLocalState, Exchange, GlobalState
from robust_steer.lifting import Policy
from robust_steer.scenario import from_dict


def _state(i, n, nb, rng, scale=1.0):
    r = lambda: rng.standard_normal(n) * scale
    return AgentLocalState(i, None, r(), r(), {j: r() for j in nb}, {j: r() for j in nb},
                           r(), r(), {j: r() for j in nb}, {j: r() for j in nb})


def lstsq_consensus(contribs, rho):
    """Minimize sum_c lam_c^T (mu_c - nu) + rho/2 ||mu_c - nu||^2 by least squares."""
    n = contribs[0][0].size
    s = np.sqrt(rho / 2)
    A = np.vstack([s * np.eye(n)] * len(contribs))
    b = np.concatenate([s * mu + lam / (2 * s) for mu, lam in contribs])
    return np.linalg.lstsq(A, b, rcond=None)[0]


# -- configuration -----------------------------------------------------------------------

def test_config_defaults_by_size():
    two = from_dict(crossing_pair(admm={}))
    cfg = AdmmConfig.for_scenario(two)
    assert (cfg.rho_u, cfg.rho_d, cfg.eps_primal, cfg.eps_dual, cfg.max_iters) == (100.0, 1.0, 0.1, 0.1, 200)
    d = crossing_pair(admm={})
    d["agents"] = d["agents"] + [{"x0": [0.0, 1.0, 0, 0], "target": {"mean": [0.0, -1.0]}}]
    cfg = AdmmConfig.for_scenario(from_dict(d))
    assert (cfg.rho_d, cfg.eps_primal, cfg.eps_dual) == (10.0, 1.0, 1.0)


def test_config_overrides():
    scn = from_dict(crossing_pair(admm={"rho_u": 50.0, "max_iters": 7}))
    cfg = AdmmConfig.for_scenario(scn, rho_d=3.0, eps_dual=None)
    assert (cfg.rho_u, cfg.rho_d, cfg.max_iters, cfg.eps_dual) == (50.0, 3.0, 7, 0.1)
    with pytest.raises(ValueError):
        AdmmConfig(rho_u=0.0)


# -- closed-form updates -------------------------------------------------------------------

def test_global_update_no_holders():
    s = _state(0, 5, [], np.random.default_rng(0))
    s.lam_u[:] = 0
    s.lam_d[:] = 0
    nu_u, nu_d = admm.global_update(s, {}, AdmmConfig())
    np.testing.assert_array_equal(nu_u, s.mu_u)
    np.testing.assert_array_equal(nu_d, s.mu_d)


def test_global_update_fixed_point():
    v = np.arange(4.0)
    s = AgentLocalState(0, None, v.copy(), v.copy(), {}, {}, np.zeros(4), np.zeros(4), {}, {})
    msgs = {h: {"mu_u": v.copy(), "mu_d": v.copy(), "lam_u": np.zeros(4), "lam_d": np.zeros(4)} for h in (1, 2)}
    nu_u, nu_d = admm.global_update(s, msgs, AdmmConfig())
    np.testing.assert_allclose(nu_u, v, atol=1e-15)
    np.testing.assert_allclose(nu_d, v, atol=1e-15)


def test_global_update_matches_least_squares(rng):
    cfg = AdmmConfig(rho_u=100.0, rho_d=10.0)
    nb = [[1, 2], [2], [0]]  # holders of 0: {2}; of 1: {0}; of 2: {0, 1}
    states = [_state(i, 6, nb[i], rng) for i in range(3)]
    for i in range(3):
        msgs = {h: {"mu_u": states[h].copy_u[i], "mu_d": states[h].copy_d[i],
                    "lam_u": states[h].lam_copy_u[i], "lam_d": states[h].lam_copy_d[i]}
                for h in range(3) if i in nb[h]}
        nu_u, nu_d = admm.global_update(states[i], msgs, cfg)
        cu = [(states[i].mu_u, states[i].lam_u)] + [(m["mu_u"], m["lam_u"]) for m in msgs.values()]
        cd = [(states[i].mu_d, states[i].lam_d)] + [(m["mu_d"], m["lam_d"]) for m in msgs.values()]
        np.testing.assert_allclose(nu_u, lstsq_consensus(cu, cfg.rho_u), atol=1e-9)
        np.testing.assert_allclose(nu_d, lstsq_consensus(cd, cfg.rho_d), atol=1e-9)


def test_dual_update_cases():
    cfg = AdmmConfig(rho_u=100.0, rho_d=1.0)
    n = 3
    e1 = np.eye(n)[0]
    s = AgentLocalState(0, None, 0.01 * e1, np.zeros(n), {1: np.ones(n)}, {1: np.ones(n)},
                        np.zeros(n), np.zeros(n), {1: np.zeros(n)}, {1: np.zeros(n)})
    view = {0: {"nu_u": np.zeros(n), "nu_d": np.zeros(n)}, 1: {"nu_u": np.ones(n), "nu_d": np.ones(n)}}
    admm.dual_update(s, view, cfg)
    np.testing.assert_allclose(s.lam_u, e1)
    np.testing.assert_array_equal(s.lam_d, 0)
    np.testing.assert_array_equal(s.lam_copy_u[1], 0)
    for _ in range(4):
        admm.dual_update(s, view, cfg)
    np.testing.assert_allclose(s.lam_u, 5 * e1)


def test_residuals_cases(rng):
    cfg = AdmmConfig(rho_u=100.0, rho_d=1.0)
    v = rng.standard_normal(4)
    s = AgentLocalState(0, None, v.copy(), v.copy(), {}, {}, np.zeros(4), np.zeros(4), {}, {})
    g = GlobalState([v.copy()], [v.copy()])
    assert admm.residuals([s], g, g.copy(), cfg) == (0.0, 0.0)
    gap = np.array([0.3, -0.4, 0.0, 0.0])
    s.mu_u = v + gap
    p, d = admm.residuals([s], g, g.copy(), cfg)
    assert p == pytest.approx(0.5) and d == 0.0


def test_residuals_match_reimplementation(rng):
    cfg = AdmmConfig(rho_u=100.0, rho_d=10.0)
    nb = [[1], [0, 2], [1]]
    states = [_state(i, 5, nb[i], rng) for i in range(3)]
    glob = GlobalState([rng.standard_normal(5) for _ in range(3)], [rng.standard_normal(5) for _ in range(3)])
    prev = GlobalState([rng.standard_normal(5) for _ in range(3)], [rng.standard_normal(5) for _ in range(3)])
    p, d = admm.residuals(states, glob, prev, cfg)
    tot, cnt = 0.0, 3 + sum(len(x) for x in nb)
    for i, s in enumerate(states):
        pairs = [(s.mu_u, glob.nu_u[i]), (s.mu_d, glob.nu_d[i])]
        pairs += [(s.copy_u[j], glob.nu_u[j]) for j in nb[i]] + [(s.copy_d[j], glob.nu_d[j]) for j in nb[i]]
        tot += sum(np.linalg.norm(a - b) ** 2 for a, b in pairs)
    dd = sum(100.0 ** 2 * np.linalg.norm(glob.nu_u[i] - prev.nu_u[i]) ** 2
             + 10.0 ** 2 * np.linalg.norm(glob.nu_d[i] - prev.nu_d[i]) ** 2 for i in range(3))
    assert p == pytest.approx(np.sqrt(tot / cnt), rel=1e-12)
    assert d == pytest.approx(np.sqrt(dd) / 3, rel=1e-12)


# -- exchange audit ------------------------------------------------------------------------

def test_exchange_rejects_out_of_pattern():
    scn = from_dict(crossing_pair())
    ex = Exchange(scn, strict=False)
    z = np.zeros(3)
    ex.post(0, 0, 1, "copy", {"mu_u": z, "lam_u": z})
    ex.post(0, 1, 0, "global", {"nu_u": z})
    assert ex.violations == []
    ex.post(0, 0, 1, "copy", {"u_bar": z})
    ex.post(0, 0, 1, "policy", {"mu_u": z})
    assert len(ex.violations) == 2
    strict = Exchange(scn)
    with pytest.raises(PermissionError):
        strict.post(0, 0, 1, "copy", {"K": z})


def test_exchange_respects_neighbor_scope():
    d = crossing_pair()
    d["agents"].append({"x0": [5.0, 5.0, 0, 0], "target": {"mean": [5.0, 4.0]}})
    d["neighbors"] = {"adjacency": [[1], [0], []]}
    ex = Exchange(from_dict(d), strict=False)
    ex.post(0, 2, 0, "copy", {"mu_u": np.zeros(1)})
    ex.post(0, 0, 2, "global", {"nu_u": np.zeros(1)})
    assert len(ex.violations) == 2


# -- local subproblem ----------------------------------------------------------------------

def _snapshot(glob, ids):
    return {j: {"nu_u": glob.nu_u[j], "nu_d": glob.nu_d[j]} for j in ids}


def test_local_program_row_counts():
    d = crossing_pair(T=8)
    d["agents"] = d["agents"][:1]
    d["neighbors"] = {"k_nearest": 0}
    scn = from_dict(d)
    model = admm.build_local_model(scn, 0)
    states, glob = admm.initial_states(scn)
    prog = admm.assemble_local_subproblem(model, states[0], _snapshot(glob, [0]), AdmmConfig(), states[0].mu_u, {})
    norm_rows = [c for c in prog.constraints if ".norm." in c.label]
    dev_rows = [c for c in prog.constraints if "dev_bound" in c.label]
    assert len(norm_rows) == scn.T
    assert len(dev_rows) == (scn.T + 1) * 2
    assert not [n for n in prog.variables if n.startswith("copy")]


def test_local_program_has_copy_blocks():
    scn = from_dict(crossing_pair())
    model = admm.build_local_model(scn, 0)
    names = set(model.prog.variables)
    assert {"copy1.mu_u", "copy1.mu_d"} <= names
    assert not [n for n in names if n.startswith("copy0")]
    states, glob = admm.initial_states(scn)
    with pytest.raises(KeyError):
        admm.assemble_local_subproblem(model, states[0], _snapshot(glob, [0]), AdmmConfig(), states[0].mu_u,
                                       {1: states[0].copy_u[1]})


def test_fork_keeps_static_program_clean():
    scn = from_dict(crossing_pair())
    model = admm.build_local_model(scn, 0)
    before = len(model.prog.constraints), len(model.prog.quad_terms)
    states, glob = admm.initial_states(scn)
    admm.assemble_local_subproblem(model, states[0], _snapshot(glob, [0, 1]), AdmmConfig(), states[0].mu_u,
                                   {1: states[0].copy_u[1]})
    assert (len(model.prog.constraints), len(model.prog.quad_terms)) == before


def test_local_solutions_respect_linearized_separation():
    scn = from_dict(crossing_pair())
    cfg = AdmmConfig.for_scenario(scn)
    models = [admm.build_local_model(scn, i) for i in range(2)]
    states, glob = admm.initial_states(scn)
    new = admm.local_update(models, states, [_snapshot(glob, [0, 1])] * 2, cfg)
    m, c = 2, scn.thresholds["interagent"]
    for s in new:
        j = 1 - s.index
        ns = states[s.index].mu_u.reshape(-1, m)
        no = states[s.index].copy_u[j].reshape(-1, m)
        mine, theirs = s.mu_u.reshape(-1, m), s.copy_u[j].reshape(-1, m)
        dev_i, dev_j = s.mu_d.reshape(-1, m), s.copy_d[j].reshape(-1, m)
        for k in range(1, scn.T + 1):
            g = (ns[k] - no[k]) / np.linalg.norm(ns[k] - no[k])
            assert g @ (mine[k] - theirs[k]) >= c + np.linalg.norm(dev_i[k] + dev_j[k]) - 1e-6


def test_local_fixed_point():
    # the penalty-free optimum with zero duals is a fixed point of the local update
    scn = from_dict(lone_agent())
    cfg = AdmmConfig.for_scenario(scn)
    opt = admm.run_centralized(scn)
    model = admm.build_local_model(scn, 0)
    states, _ = admm.initial_states(scn)
    mu_d = np.zeros_like(opt.mu_u[0])
    start = states[0]
    start.mu_u = opt.mu_u[0].copy()
    glob = GlobalState([opt.mu_u[0].copy()], [mu_d])
    new = admm.local_update([model], [start], [_snapshot(glob, [0])], cfg)[0]
    np.testing.assert_allclose(new.mu_u, opt.mu_u[0], atol=1e-6)
    np.testing.assert_allclose(new.policy.u_bar, opt.policies[0].u_bar, atol=1e-5)


def test_solver_failure_names_agent():
    scn = from_dict(crossing_pair(T=6))
    calls = {"n": 0}

    def flaky(prog, tol=1e-7):
        if "copy0.mu_u" in prog.variables:  # agent 1's program
            return conic.SolveResult(conic.Status.NUMERICAL_FAILURE, None, None, 0.0, 0)
        calls["n"] += 1
        return conic.solve(prog, tol=tol)

    with pytest.raises(admm.AgentSolveError) as exc:
        admm.run(scn, solver=flaky)
    assert exc.value.agent == 1
    assert "agent 1" in str(exc.value)


# -- full runs -----------------------------------------------------------------------------

def test_trivial_run_converges_fast():
    scn = from_dict(lone_agent())
    res = admm.run(scn)
    assert res.converged and res.iterations <= 5
    assert len(res.trace) == res.iterations
    cen = admm.run_centralized(scn)
    assert np.abs(res.mu_u[0] - cen.mu_u[0]).max() <= 1e-5
    np.testing.assert_allclose(res.policies[0].u_bar, cen.policies[0].u_bar, rtol=1e-3)


def test_run_trace_and_determinism(tmp_path, monkeypatch):
    scn = from_dict(crossing_pair(T=6))
    a = admm.run(scn, trace_path=tmp_path / "a.jsonl")
    monkeypatch.setenv("ROBUST_STEER_THREADS", "1")
    b = admm.run(scn)
    rows = [json.loads(ln) for ln in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [set(r) for r in rows] == [{"iter", "primal", "dual", "max_agent_solve_ms"}] * len(rows)
    assert len(rows) == a.iterations
    strip = lambda t: [(r["iter"], r["primal"], r["dual"]) for r in t]
    assert strip(a.trace) == strip(b.trace)
    for p, q in zip(a.policies, b.policies):
        np.testing.assert_array_equal(p.K, q.K)
    assert a.converged
    last = a.trace[-1]
    assert last["primal"] <= 0.1 and last["dual"] <= 0.1
    assert all(r["primal"] > 0.1 or r["dual"] > 0.1 for r in a.trace[:-1])
    assert a.audit.violations == []


def test_nonconvergence_reported():
    scn = from_dict(crossing_pair(T=6))
    res = admm.run(scn, AdmmConfig.for_scenario(scn, max_iters=2, eps_primal=1e-12, eps_dual=1e-12))
    assert not res.converged and res.iterations == 2
    assert "did not converge" in res.message and "primal" in res.message


def test_global_update_oracle_along_run():
    scn = from_dict(crossing_pair(T=6))
    cfg = AdmmConfig.for_scenario(scn, max_iters=6)
    worst = []

    def check(it, states, glob, received):
        for i, s in enumerate(states):
            cu = [(s.mu_u, s.lam_u)] + [(m["mu_u"], m["lam_u"]) for m in received[i].values()]
            worst.append(np.abs(glob.nu_u[i] - lstsq_consensus(cu, cfg.rho_u)).max())

    admm.run(scn, cfg, callback=check)
    assert worst and max(worst) <= 1e-9


def test_policies_are_structured():
    scn = from_dict(lone_agent())
    res = admm.run(scn)
    pol = res.policies[0]
    assert isinstance(pol, Policy)
    assert pol.K.shape == (scn.T * 2, (scn.T + 1) * 4)
