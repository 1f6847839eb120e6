import numpy as np
import pytest

from robust_steer.conic import (NONNEG, PSD, SOC, ZERO, Affine, ConicProgram, ProgramError, Status, dump, solve,
                                verify)


def test_quadratic_with_bound():
    p = ConicProgram()
    x = p.add_variable("x", 1)
    p.add(NONNEG, x - 1.0, "lb")
    p.add_squared(x)
    r = solve(p)
    assert r.status == Status.OPTIMAL
    assert r.primal["x"][0] == pytest.approx(1.0, abs=1e-7)


def test_infeasible():
    p = ConicProgram()
    x = p.add_variable("x", 1)
    p.add(NONNEG, x - 1.0, "lb")
    p.add(NONNEG, -x, "ub")
    r = solve(p)
    assert r.status == Status.INFEASIBLE and r.primal is None and r.objective is None


def test_unbounded():
    p = ConicProgram()
    x = p.add_variable("x", 1)
    p.add(NONNEG, -x, "ub")
    p.add_linear(x)
    assert solve(p).status == Status.UNBOUNDED


def test_pythagorean_soc():
    p = ConicProgram()
    v = p.add_variable("v", 2)
    t = p.add_variable("t", 1)
    p.add(ZERO, v - np.array([3.0, 4.0]), "fix")
    p.add(SOC, Affine.vstack([t, v]), "cone")
    p.add_linear(t)
    r = solve(p)
    assert r.primal["t"][0] == pytest.approx(5.0, abs=1e-7)


def test_psd_block():
    p = ConicProgram()
    t = p.add_variable("t", 1)
    M = Affine({"t": np.array([[1.0], [0], [0], [0]])}, np.array([0.0, 2.0, 2.0, 1.0]))
    p.add(PSD, M, "psd")
    p.add_linear(t)
    r = solve(p)
    assert r.primal["t"][0] == pytest.approx(4.0, abs=1e-6)


def random_program(rng, n=6):
    p = ConicProgram()
    x = p.add_variable("x", n)
    t = p.add_variable("t", 1)
    p.add(SOC, Affine.vstack([t + 2.0, x.lmul(rng.standard_normal((3, n)))]), "soc")
    p.add(NONNEG, x.lmul(rng.standard_normal((2, n))) + 1.0, "rows")
    p.add(ZERO, x[0] - 0.3, "pin")
    p.add_squared(x - rng.standard_normal(n), 0.7)
    p.add_squared(t, 0.1)
    p.add_linear(x[1] * 0.5)
    return p


def test_epigraph_agrees(rng):
    for _ in range(10):
        p = random_program(rng)
        a, b = solve(p), solve(p, epigraph=True)
        assert a.ok and b.ok
        assert a.objective == pytest.approx(b.objective, abs=1e-6)


def test_deterministic(rng):
    p = random_program(rng)
    a, b = solve(p), solve(p)
    np.testing.assert_array_equal(a.primal["x"], b.primal["x"])


def test_verify_reports_violations():
    p = ConicProgram()
    x = p.add_variable("x", 2)
    p.add(ZERO, x[0] - 1.0, "eq")
    p.add(NONNEG, x[1], "pos")
    p.add(SOC, Affine.vstack([Affine.constant(1.0), x]), "ball")
    p.add(PSD, Affine({"x": np.array([[1.0, 0], [0, 0], [0, 0], [0, 1.0]])}, np.zeros(4)), "diag")
    rep = verify(p, {"x": np.array([0.0, -1.0])}, 1e-7)
    assert set(rep.violated) == {"eq", "pos", "diag"}
    rep = verify(p, {"x": np.array([1.0, 0.0])}, 1e-7)
    assert rep.ok


def test_program_validation():
    p = ConicProgram()
    x = p.add_variable("x", 2)
    with pytest.raises(ProgramError):
        p.add_variable("x", 1)
    with pytest.raises(ProgramError):
        p.add(NONNEG, Affine({"y": np.eye(2)}), "bad")
    with pytest.raises(ProgramError):
        p.add_squared(x, -1.0)
    with pytest.raises(ProgramError):
        p.add(PSD, x.lmul(np.ones((3, 2))), "notsquare")


def test_masked_variable_unflatten():
    p = ConicProgram()
    mask = np.array([[True, False], [True, True]])
    p.add_variable("K", 3, shape=mask.shape, mask=mask)
    K = p.variables["K"].unflatten(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(K, [[1.0, 0.0], [2.0, 3.0]])


def test_dump(tmp_path, rng):
    p = random_program(rng)
    path = dump(p, tmp_path / "prog.txt")
    text = path.read_text()
    assert "cone soc" in text and "variable x offset 0 size 6" in text
