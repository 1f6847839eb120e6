"""Solver-agnostic conic program representation and the Clarabel backend.

Constraints are stored as affine expressions that must lie in a cone:

* ``zero``    -- ``expr == 0``
* ``nonneg``  -- ``expr >= 0``
* ``soc``     -- ``expr[0] >= ||expr[1:]||``
* ``psd``     -- ``expr`` is a column-major ``n x n`` matrix that must be PSD

The objective is ``sum_t w_t ||E_t x + e_t||^2 + c^T x + c0`` with ``w_t >= 0``,
which keeps the Hessian PSD by construction.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

ZERO, NONNEG, SOC, PSD = "zero", "nonneg", "soc", "psd"
_KINDS = (ZERO, NONNEG, SOC, PSD)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"
    ITERATION_LIMIT = "IterationLimit"


class ProgramError(ValueError):
    pass


@dataclass
class Variable:
    name: str
    size: int
    offset: int
    shape: tuple[int, int] | None = None
    mask: np.ndarray | None = None

    def unflatten(self, values: np.ndarray) -> np.ndarray:
        """Scatter free entries (column-major) back into the full masked matrix."""
        if self.shape is None:
            return np.asarray(values)
        out = np.zeros(self.shape)
        if self.mask is None:
            return np.asarray(values).reshape(self.shape, order="F")
        out.T[self.mask.T] = values
        return out


def _as_sparse(M) -> sp.csr_matrix:
    if sp.issparse(M):
        return M.tocsr()
    return sp.csr_matrix(np.atleast_2d(np.asarray(M, dtype=float)))


class Affine:
    """Vector affine expression ``sum_v C_v x_v + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict | None = None, const=None, rows: int | None = None):
        self.terms = {}
        for name, C in (terms or {}).items():
            C = C if sp.issparse(C) else np.atleast_2d(np.asarray(C, dtype=float))
            self.terms[name] = C
        if const is None:
            if rows is None:
                if not self.terms:
                    raise ProgramError("cannot infer the row count of an empty expression")
                rows = next(iter(self.terms.values())).shape[0]
            const = np.zeros(rows)
        self.const = np.asarray(const, dtype=float).reshape(-1)
        for name, C in self.terms.items():
            if C.shape[0] != self.const.size:
                raise ProgramError(f"term {name!r} has {C.shape[0]} rows, expected {self.const.size}")

    @property
    def rows(self) -> int:
        return self.const.size

    @classmethod
    def constant(cls, c) -> "Affine":
        return cls({}, np.atleast_1d(np.asarray(c, dtype=float)))

    def __add__(self, other):
        if not isinstance(other, Affine):
            return Affine(dict(self.terms), self.const + np.asarray(other, dtype=float))
        terms = dict(self.terms)
        for name, C in other.terms.items():
            terms[name] = terms[name] + C if name in terms else C
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Affine) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s: float):
        s = float(s)
        return Affine({k: v * s for k, v in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        idx = np.arange(self.rows)[idx]
        idx = np.atleast_1d(idx)
        return Affine({k: (v[idx] if not sp.issparse(v) else v.tocsr()[idx]) for k, v in self.terms.items()},
                      self.const[idx])

    def lmul(self, M) -> "Affine":
        """Left-multiply by a matrix: ``M @ expr``."""
        M = M if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float))
        return Affine({k: M @ v for k, v in self.terms.items()}, M @ self.const)

    @staticmethod
    def vstack(parts) -> "Affine":
        parts = list(parts)
        names = []
        for p in parts:
            for k in p.terms:
                if k not in names:
                    names.append(k)
        terms = {}
        for name in names:
            blocks = []
            width = next(p.terms[name].shape[1] for p in parts if name in p.terms)
            for p in parts:
                blocks.append(_as_sparse(p.terms[name]) if name in p.terms else sp.csr_matrix((p.rows, width)))
            terms[name] = sp.vstack(blocks, format="csr")
        return Affine(terms, np.concatenate([p.const for p in parts]))

    def evaluate(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for name, C in self.terms.items():
            out = out + C @ np.asarray(values[name], dtype=float)
        return out


@dataclass
class Constraint:
    kind: str
    expr: Affine
    label: str
    dim: int = 0  # matrix side for psd

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ProgramError(f"unknown cone {self.kind!r}")
        if self.kind == PSD:
            n = int(round(np.sqrt(self.expr.rows)))
            if n * n != self.expr.rows:
                raise ProgramError(f"psd constraint {self.label!r} is not a square matrix")
            self.dim = n
        elif self.kind == SOC and self.expr.rows < 1:
            raise ProgramError(f"soc constraint {self.label!r} is empty")
        else:
            self.dim = self.expr.rows


@dataclass
class ConicProgram:
    variables: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    quad_terms: list = field(default_factory=list)  # (weight, Affine)
    lin_terms: list = field(default_factory=list)  # Affine with one row
    n: int = 0

    def add_variable(self, name: str, size: int, shape=None, mask=None) -> Affine:
        if name in self.variables:
            raise ProgramError(f"variable {name!r} already declared")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if int(mask.sum()) != size:
                raise ProgramError(f"mask of {name!r} has {int(mask.sum())} free entries, size is {size}")
        self.variables[name] = Variable(name, int(size), self.n, shape, mask)
        self.n += int(size)
        return self.var(name)

    def var(self, name: str) -> Affine:
        v = self.variables[name]
        return Affine({name: sp.identity(v.size, format="csr")}, np.zeros(v.size))

    def add(self, kind: str, expr: Affine, label: str) -> Constraint:
        for name, C in expr.terms.items():
            if name not in self.variables:
                raise ProgramError(f"constraint {label!r} references undeclared variable {name!r}")
            if C.shape[1] != self.variables[name].size:
                raise ProgramError(f"constraint {label!r}: width mismatch for {name!r}")
        con = Constraint(kind, expr, label)
        self.constraints.append(con)
        return con

    def add_squared(self, expr: Affine, weight: float = 1.0):
        """Add ``weight * ||expr||^2`` to the objective."""
        if weight < 0:
            raise ProgramError("quadratic weights must be nonnegative")
        if weight > 0:
            self.quad_terms.append((float(weight), expr))

    def add_linear(self, expr: Affine):
        if expr.rows != 1:
            raise ProgramError("linear objective terms must be scalar")
        self.lin_terms.append(expr)

    # -- assembly ----------------------------------------------------------------------------

    def _matrix(self, exprs) -> tuple[sp.csc_matrix, np.ndarray]:
        rows, cols, vals, consts = [], [], [], []
        off = 0
        for e in exprs:
            for name, C in e.terms.items():
                coo = sp.coo_matrix(C)
                rows.append(coo.row + off)
                cols.append(coo.col + self.variables[name].offset)
                vals.append(coo.data)
            consts.append(e.const)
            off += e.rows
        if rows:
            r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        else:
            r = c = np.zeros(0, dtype=int)
            v = np.zeros(0)
        A = sp.csc_matrix((v, (r, c)), shape=(off, self.n))
        return A, (np.concatenate(consts) if consts else np.zeros(0))

    def fork(self) -> "ConicProgram":
        """Copy sharing the variable table; rows and objective terms added later stay private."""
        return ConicProgram(self.variables, list(self.constraints), list(self.quad_terms), list(self.lin_terms), self.n)

    def objective_data(self):
        """``(P, q, c0)`` with objective ``0.5 x'Px + q'x + c0``."""
        P = sp.csc_matrix((self.n, self.n))
        q = np.zeros(self.n)
        c0 = 0.0
        for w, e in self.quad_terms:
            E, e0 = self._matrix([e])
            P = P + 2.0 * w * (E.T @ E)
            q += 2.0 * w * (E.T @ e0)
            c0 += w * float(e0 @ e0)
        for e in self.lin_terms:
            E, e0 = self._matrix([e])
            q += np.asarray(E.todense()).reshape(-1)
            c0 += float(e0[0])
        return sp.csc_matrix(P), q, c0

    def objective_value(self, values: dict) -> float:
        val = 0.0
        for w, e in self.quad_terms:
            r = e.evaluate(values)
            val += w * float(r @ r)
        for e in self.lin_terms:
            val += float(e.evaluate(values)[0])
        return val

    def split(self, x: np.ndarray) -> dict:
        return {name: x[v.offset:v.offset + v.size].copy() for name, v in self.variables.items()}

    def stats(self) -> dict:
        counts = {k: 0 for k in _KINDS}
        for c in self.constraints:
            counts[c.kind] += 1
        return {"variables": self.n, **{f"n_{k}": v for k, v in counts.items()}}

    def find(self, prefix: str) -> list:
        return [c for c in self.constraints if c.label.startswith(prefix)]


# -- verification --------------------------------------------------------------------------

def _psd_matrix(vec: np.ndarray, n: int) -> np.ndarray:
    M = vec.reshape((n, n), order="F")
    return 0.5 * (M + M.T)


def constraint_residual(con: Constraint, values: dict) -> float:
    r = con.expr.evaluate(values)
    if con.kind == ZERO:
        return float(np.abs(r).max()) if r.size else 0.0
    if con.kind == NONNEG:
        return float(max(0.0, -r.min())) if r.size else 0.0
    if con.kind == SOC:
        return float(max(0.0, np.linalg.norm(r[1:]) - r[0]))
    return float(max(0.0, -np.linalg.eigvalsh(_psd_matrix(r, con.dim)).min()))


@dataclass
class ResidualReport:
    residuals: list  # (label, kind, residual)
    tol: float

    @property
    def max_residual(self) -> float:
        return max((r for _, _, r in self.residuals), default=0.0)

    @property
    def violated(self) -> list:
        return [label for label, _, r in self.residuals if r > self.tol]

    @property
    def ok(self) -> bool:
        return not self.violated


def verify(prog: ConicProgram, primal: dict, tol: float = 1e-7) -> ResidualReport:
    """Recompute every constraint residual from the primal point alone."""
    return ResidualReport([(c.label, c.kind, constraint_residual(c, primal)) for c in prog.constraints], tol)


# -- backend -------------------------------------------------------------------------------

@dataclass
class SolveResult:
    status: Status
    primal: dict | None
    objective: float | None
    solve_time: float = 0.0
    iterations: int = 0
    report: ResidualReport | None = None

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def _standard_form(prog: ConicProgram):
    import clarabel

    exprs, cones = [], []
    pending_kind, pending_rows = None, 0

    def flush():
        nonlocal pending_kind, pending_rows
        if pending_kind == ZERO:
            cones.append(clarabel.ZeroConeT(pending_rows))
        elif pending_kind == NONNEG:
            cones.append(clarabel.NonnegativeConeT(pending_rows))
        pending_kind, pending_rows = None, 0

    for con in prog.constraints:
        if con.kind in (ZERO, NONNEG):
            if pending_kind != con.kind:
                flush()
                pending_kind = con.kind
            pending_rows += con.expr.rows
            exprs.append(con.expr)
            continue
        flush()
        if con.kind == SOC:
            exprs.append(con.expr)
            cones.append(clarabel.SecondOrderConeT(con.expr.rows))
        else:
            n = con.dim
            idx, scale = [], []
            for j in range(n):
                for i in range(j + 1):
                    idx.append((i, j))
            # svec: upper triangle column-wise, off-diagonals averaged and scaled by sqrt(2)
            T = sp.lil_matrix((len(idx), n * n))
            for r, (i, j) in enumerate(idx):
                if i == j:
                    T[r, j * n + i] = 1.0
                else:
                    T[r, j * n + i] = np.sqrt(0.5)
                    T[r, i * n + j] = np.sqrt(0.5)
            exprs.append(con.expr.lmul(T.tocsr()))
            cones.append(clarabel.PSDTriangleConeT(n))
    flush()
    A, b = prog._matrix(exprs)
    return -A, b, cones


def _epigraph(prog: ConicProgram) -> tuple[ConicProgram, str]:
    """Copy of ``prog`` with the quadratic objective moved into a second-order cone."""
    epi = ConicProgram(dict(prog.variables), list(prog.constraints), [], [], prog.n)
    t = epi.add_variable("__epigraph_t", 1)
    lin = Affine.constant(0.0)
    for e in prog.lin_terms:
        lin = lin + e
    if prog.quad_terms:
        y = Affine.vstack([e * np.sqrt(w) for w, e in prog.quad_terms])
        s = t - lin
        cone = Affine.vstack([(s + 1.0) * 0.5, y, (s - 1.0) * 0.5])
        epi.add(SOC, cone, "__epigraph")
        epi.add_linear(t)
    else:
        epi.add_linear(lin)
    return epi, "__epigraph_t"


_STATUS_MAP = {
    "Solved": Status.OPTIMAL,
    "AlmostSolved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
    "MaxIterations": Status.ITERATION_LIMIT,
    "MaxTime": Status.ITERATION_LIMIT,
}


def solve(prog: ConicProgram, tol: float = 1e-7, epigraph: bool = False, max_iter: int = 200,
          time_limit: float | None = None, verbose: bool = False) -> SolveResult:
    """Solve with Clarabel and check the answer with :func:`verify`.

    An ``Optimal`` status is only reported when every residual is within ``tol``.
    """
    import clarabel

    work, extra = (_epigraph(prog) if epigraph else (prog, None))
    P, q, c0 = work.objective_data()
    A, b, cones = _standard_form(work)
    P = sp.triu(P, format="csc")
    elapsed, iters = 0.0, 0
    # a second, tighter pass when the independent check finds small excess residuals
    for inner_tol in (min(1e-9, tol), min(1e-11, tol * 1e-4)):
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = max_iter
        settings.tol_feas = inner_tol
        settings.tol_gap_abs = inner_tol
        settings.tol_gap_rel = inner_tol
        settings.presolve_enable = False
        settings.chordal_decomposition_enable = False
        if time_limit is not None:
            settings.time_limit = float(time_limit)
        t0 = time.perf_counter()
        sol = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
        elapsed += time.perf_counter() - t0
        iters += sol.iterations
        status = _STATUS_MAP.get(str(sol.status), Status.NUMERICAL_FAILURE)
        if status != Status.OPTIMAL:
            return SolveResult(status, None, None, elapsed, iters)
        primal = work.split(np.asarray(sol.x))
        if extra:
            primal.pop(extra, None)
        report = verify(prog, primal, tol)
        if report.ok:
            return SolveResult(status, primal, prog.objective_value(primal), elapsed, iters, report)
        if time_limit is not None:
            break
    return SolveResult(Status.NUMERICAL_FAILURE, None, None, elapsed, iters, report)

def dump(prog: ConicProgram, path) -> Path:
    """Write a self-describing text dump (sparse triplets plus cone list)."""
    path = Path(path)
    P, q, c0 = prog.objective_data()
    lines = ["# conic program: minimize 0.5 x'Px + q'x + c0 subject to A x + b in cones",
             f"n {prog.n}"]
    for v in prog.variables.values():
        lines.append(f"variable {v.name} offset {v.offset} size {v.size}")
    Pc = sp.coo_matrix(sp.triu(P))
    lines.append(f"P_upper {Pc.nnz}")
    lines += [f"{i} {j} {val!r}" for i, j, val in zip(Pc.row, Pc.col, Pc.data)]
    lines.append(f"q {' '.join(repr(float(v)) for v in q)}")
    lines.append(f"c0 {c0!r}")
    for con in prog.constraints:
        A, b = prog._matrix([con.expr])
        Ac = sp.coo_matrix(A)
        lines.append(f"cone {con.kind} dim {con.dim} rows {con.expr.rows} label {con.label}")
        lines.append(f"A {Ac.nnz}")
        lines += [f"{i} {j} {val!r}" for i, j, val in zip(Ac.row, Ac.col, Ac.data)]
        lines.append(f"b {' '.join(repr(float(v)) for v in b)}")
    path.write_text("\n".join(lines) + "\n")
    return path
