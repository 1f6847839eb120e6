import csv
import json

import numpy as np
import pytest

from conftest import crossing_pair
from robust_steer import constraints as cs
from robust_steer import validate as V
from robust_steer.lifting import Policy, build_lifted, rollout, state_covariance, state_mean
from robust_steer.scenario import from_dict

NOISE = {"initial_std": [0.1, 0.1, 0.3, 0.3], "step_std": [0.01, 0.01, 0.1, 0.1]}


def random_policies(scn, rng, scale=0.3):
    out = []
    for ag in scn.agents:
        base = Policy.zeros(ag.dyn)
        K = rng.standard_normal(base.K.shape) * scale * base.mask
        out.append(Policy.for_dynamics(ag.dyn, rng.standard_normal(base.u_bar.shape), K))
    return out


def test_zero_noise_gives_state_mean(rng):
    scn = from_dict(crossing_pair(T=5))
    pols = random_policies(scn, rng)
    ens = V.monte_carlo(scn, pols, n_zeta=7, n_w=1, seed=1, noise=False)
    for i, ag in enumerate(scn.agents):
        lift = build_lifted(ag.dyn)
        for s in range(7):
            mu = state_mean(lift, pols[i], ens.zetas[i][s], ag.dyn.x0_bar)
            np.testing.assert_allclose(ens.states[i][s, 0].reshape(-1), mu, atol=1e-12)


def test_stored_trajectories_follow_dynamics(rng):
    scn = from_dict(crossing_pair(T=5, noise=NOISE))
    pols = random_policies(scn, rng)
    ens = V.monte_carlo(scn, pols, n_zeta=3, n_w=4, seed=2)
    ag = scn.agents[1]
    ws = ag.noise.sample(12, [2, 1, 1])
    for s, r in [(0, 0), (2, 3), (1, 2)]:
        ro = rollout(ag.dyn, pols[1], ens.zetas[1][s], ws[s * 4 + r])
        np.testing.assert_allclose(ens.states[1][s, r], ro.x.reshape(scn.T + 1, -1), atol=1e-10)
        np.testing.assert_allclose(ens.controls[1][s, r], ro.u.reshape(scn.T, -1), atol=1e-10)


def test_zero_zeta_zero_gain_is_pure_noise(rng):
    scn = from_dict(crossing_pair(T=4, noise=NOISE))
    pols = [Policy.for_dynamics(ag.dyn, rng.standard_normal(ag.dyn.T * 2)) for ag in scn.agents]
    zeros = [np.zeros((2, ag.dyn.n_zeta)) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_w=50, seed=3, zetas=zeros)
    ag = scn.agents[0]
    lift = build_lifted(ag.dyn)
    ws = ag.noise.sample(100, [3, 0, 1])
    base = lift.G0 @ ag.dyn.x0_bar + lift.Gu @ pols[0].u_bar
    expect = base[None] + ws @ lift.Gw.T
    np.testing.assert_allclose(ens.states[0].reshape(100, -1), expect, atol=1e-12)


def test_ensemble_mean_converges(rng):
    scn = from_dict(crossing_pair(T=4, noise=NOISE))
    pols = random_policies(scn, rng, 0.2)
    zeta = [np.atleast_2d(V.sample_disturbance(ag.uset, 1, 9)) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_w=20_000, seed=4, zetas=zeta)
    ag = scn.agents[0]
    lift = build_lifted(ag.dyn)
    x = ens.states[0][0].reshape(20_000, -1)
    se = x.std(axis=0, ddof=1) / np.sqrt(20_000)
    mu = state_mean(lift, pols[0], zeta[0][0], ag.dyn.x0_bar)
    assert np.all(np.abs(x.mean(axis=0) - mu) <= 4 * se + 1e-12)


def test_reproducible(rng):
    scn = from_dict(crossing_pair(T=4, noise=NOISE))
    pols = random_policies(scn, rng)
    a = V.monte_carlo(scn, pols, n_zeta=5, n_w=3, seed=11)
    b = V.monte_carlo(scn, pols, n_zeta=5, n_w=3, seed=11)
    c = V.monte_carlo(scn, pols, n_zeta=5, n_w=3, seed=12)
    for i in range(2):
        np.testing.assert_array_equal(a.states[i], b.states[i])
        assert not np.array_equal(a.states[i], c.states[i])


def test_shape_mismatch_rejected(rng):
    scn = from_dict(crossing_pair(T=4))
    other = from_dict(crossing_pair(T=5))
    with pytest.raises(ValueError):
        V.monte_carlo(scn, random_policies(other, rng))
    with pytest.raises(ValueError):
        V.monte_carlo(scn, random_policies(scn, rng)[:1])


def _stationary_pair(T=4):
    d = crossing_pair(T=T)
    d["obstacles"] = []
    d["agents"] = [{"x0": [0.0, 0.0, 0, 0], "target": {"mean": [0.0, 0.0]}},
                   {"x0": [1.0, 0.0, 0, 0], "target": {"mean": [1.0, 0.0]}}]
    return from_dict(d)


def test_min_distance_stationary():
    scn = _stationary_pair()
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    zeros = [np.zeros((3, ag.dyn.n_zeta)) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, zetas=zeros)
    np.testing.assert_allclose(V.min_neighbor_distances(ens), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        V.min_neighbor_distances(V.monte_carlo(from_dict({**crossing_pair(), "agents": crossing_pair()["agents"][:1],
                                                          "neighbors": {"k_nearest": 0}}),
                                               [pols[0]], n_zeta=1))


def test_feasibility_flags_collision():
    scn = _stationary_pair()
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_zeta=5)
    rep = V.check_feasibility(ens)
    assert rep.count("interagent") == 0
    specs = [[cs.InterAgentAvoid(1, 1.5)], [cs.ObstacleAvoid([1.0, 0.1], 0.3)]]
    rep = V.check_feasibility(ens, specs=specs)
    assert rep.count("interagent") > 0 and rep.count("obstacle") > 0
    assert not rep.ok
    assert json.loads(json.dumps(rep.to_dict()))["by_kind"]["interagent"] > 0


def test_analytic_worst_case_catches_tight_target(rng):
    # a box exactly at the worst-case deviation: samples stay inside, the analytic point sits on the edge
    scn = _stationary_pair()
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_zeta=50, seed=5)
    ag = scn.agents[0]
    a = np.zeros((1, (ag.dyn.T + 1) * 4))
    a[0, ag.dyn.T * 4] = 1.0
    sens = V._sensitivity(ens, 0)
    worst = np.sqrt(ag.uset.tau) * np.linalg.norm(sens.T @ a[0])
    rep = V.check_feasibility(ens, specs=[[cs.LinearMean(a, [worst * 0.999])], []])
    samples_only = (ens.means(0).reshape(50, -1) @ a.T).max()
    assert samples_only < worst * 0.999
    assert rep.violations == 1


def test_covariance_against_analytic():
    scn = from_dict(crossing_pair(T=4, noise=NOISE))
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_zeta=1, n_w=20_000, seed=6)
    ag = scn.agents[0]
    lift = build_lifted(ag.dyn)
    cov = state_covariance(lift, pols[0], ag.noise.sigma_w)[-4:, -4:]
    chk = V.empirical_covariance(ens, at=4, agent=0, bound=cov * 1.0)
    assert chk.dominated
    sd = np.sqrt(np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / np.sqrt(20_000)
    assert np.all(np.abs(chk.sample - cov) <= 4 * sd)
    tight = V.empirical_covariance(ens, at=4, agent=0, bound=cov * 0.8)
    assert not tight.dominated


def test_covariance_zero_noise_and_singular():
    scn = from_dict(crossing_pair(T=4))
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_zeta=1, n_w=10)
    chk = V.empirical_covariance(ens, at=2, bound=np.eye(4) * 1e-6)
    np.testing.assert_allclose(chk.sample, 0.0, atol=1e-25)
    assert chk.dominated
    with pytest.raises(ValueError):
        V.empirical_covariance(V.monte_carlo(scn, pols, n_zeta=1, n_w=1), at=2)


def test_chance_rate_matches_gaussian_tail():
    from scipy.stats import norm
    scn = from_dict(crossing_pair(T=4, noise=NOISE))
    pols = [Policy.zeros(ag.dyn) for ag in scn.agents]
    zeros = [np.zeros((1, ag.dyn.n_zeta)) for ag in scn.agents]
    ens = V.monte_carlo(scn, pols, n_w=40_000, seed=8, zetas=zeros)
    ag = scn.agents[0]
    lift = build_lifted(ag.dyn)
    a = np.zeros((ag.dyn.T + 1) * 4)
    a[3 * 4 + 1] = 1.0
    sd = np.sqrt(a @ state_covariance(lift, pols[0], ag.noise.sigma_w) @ a)
    mu = a @ (lift.G0 @ ag.dyn.x0_bar)
    spec = cs.ChanceLinear(a, mu + 1.5 * sd, 0.1)
    rate = V.chance_rate(ens, 0, spec)[0]
    p = norm.sf(1.5)
    assert abs(rate - p) <= 4 * np.sqrt(p * (1 - p) / 40_000)


def test_csv_and_summary(tmp_path, rng):
    scn = from_dict(crossing_pair(T=3))
    pols = random_policies(scn, rng)
    ens = V.monte_carlo(scn, pols, n_zeta=2, n_w=1)
    V.write_trajectories_csv(ens, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["agent", "zeta_id", "w_id", "k", "x0", "x1", "x2", "x3", "u0", "u1"]
    assert len(rows) == 1 + 2 * 2 * 4
    assert rows[4][-1] == "" and float(rows[1][4]) == ens.states[0][0, 0, 0, 0]
    d = V.min_neighbor_distances(ens)
    V.write_distances_csv(d, tmp_path / "d.csv")
    drows = list(csv.reader(open(tmp_path / "d.csv")))
    assert drows[0] == ["agent", "k", "min_distance"] and len(drows) == 1 + 2 * 4
    V.write_summary(ens.summary(), tmp_path / "s.json")
    summ = json.loads((tmp_path / "s.json").read_text())
    assert summ["n_zeta"] == 2 and len(summ["terminal"]) == 2
