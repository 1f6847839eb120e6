"""Robust constraint specifications and their conic reformulations.

Every reformulator writes rows into the :class:`~robust_steer.conic.ConicProgram`
owned by an :class:`AgentBlock`, which holds one agent's decision variables:

* ``u``     feed-forward controls (``T n_u``)
* ``K``     admissible feedback entries (column-major, structural zeros removed)
* ``mu_u``  disturbance-free position means, ``(T+1) m``
* ``mu_d``  per-coordinate deviation bounds on positions, ``(T+1) m``

Products ``W Gu K`` that robust terms need are carried by auxiliary blocks
``Y_W`` tied to ``K`` by equality rows. This keeps every cone row sparse.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import NONNEG, PSD, SOC, ZERO, Affine, ConicProgram
from .lifting import H_POS, AgentDynamics, LiftedDynamics, Policy, build_lifted, feedback_mask
from .uncertainty import NoiseModel, UncertaintySet

DEGENERATE_SHIFT = 1e-3


# -- specifications ------------------------------------------------------------------------

def _rows(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


@dataclass(frozen=True)
class LinearMean:
    """``a^T E[x] <= b`` for every admissible ``zeta``; one row per row of ``a``."""
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = _rows(self.a)
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.size != a.shape[0]:
            raise ValueError("LinearMean: a and b row counts differ")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class MeanTargetBox:
    """``|a_bar^T E[x] - b_bar| <= eps`` for every admissible ``zeta``.

    ``eps=None`` drops the deviation row and keeps only the nominal equality.
    """
    a_bar: np.ndarray
    b_bar: np.ndarray
    eps: float | None = None

    def __post_init__(self):
        a = _rows(self.a_bar)
        b = np.atleast_1d(np.asarray(self.b_bar, dtype=float))
        if b.size != a.shape[0]:
            raise ValueError("MeanTargetBox: a_bar and b_bar row counts differ")
        if self.eps is not None and not (self.eps > 0):
            raise ValueError("MeanTargetBox: eps must be positive")
        object.__setattr__(self, "a_bar", a)
        object.__setattr__(self, "b_bar", b)


@dataclass(frozen=True)
class ObstacleAvoid:
    """``||H x_k - center|| >= radius`` for every admissible ``zeta`` and each listed step."""
    center: np.ndarray
    radius: float
    timesteps: tuple | None = None  # default 1..T

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ObstacleAvoid: radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))


@dataclass(frozen=True)
class InterAgentAvoid:
    """``||H x_k^i - H x_k^j|| >= c`` for every pair of admissible disturbances."""
    neighbor: int
    c: float
    timesteps: tuple | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("InterAgentAvoid: c must be positive")


@dataclass(frozen=True)
class ChanceLinear:
    """``P(a^T x <= b) >= 1 - p`` for every admissible ``zeta``."""
    a: np.ndarray
    b: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 0.5:
            raise ValueError(f"ChanceLinear: p must lie in (0, 0.5), got {self.p}")
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class CovarianceBound:
    """``Cov(x) <= sigma_bound``, or ``Cov(x_k) <= sigma_bound`` when ``timestep`` is set."""
    sigma_bound: np.ndarray
    timestep: int | None = None

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.sigma_bound, dtype=float))
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
            raise ValueError("CovarianceBound: sigma_bound must be symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("CovarianceBound: sigma_bound must be positive definite")
        object.__setattr__(self, "sigma_bound", S)


# -- scalar helpers ------------------------------------------------------------------------

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def _norm_ppf(q: float) -> float:
    """Rational approximation of the standard normal inverse CDF (rel. error ~1e-9)."""
    lo = 0.02425
    if q < lo:
        t = math.sqrt(-2 * math.log(q))
        return (((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
               ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1)
    if q > 1 - lo:
        return -_norm_ppf(1 - q)
    s = q - 0.5
    r = s * s
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * s / \
           (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)


def gaussian_quantile(p: float) -> float:
    """``eta`` with ``P(y >= eta) = p`` for standard normal ``y``, ``0 < p < 0.5``."""
    if not 0.0 < p < 0.5:
        raise ValueError(f"p must lie in (0, 0.5), got {p}")
    eta = -_norm_ppf(p)
    # one Newton step on 0.5 erfc(eta / sqrt 2) - p
    tail = 0.5 * math.erfc(eta / math.sqrt(2.0))
    dens = math.exp(-0.5 * eta * eta) / math.sqrt(2.0 * math.pi)
    return eta + (tail - p) / dens


def linearize_norm_lower_bound(center, b) -> np.ndarray:
    """Unit normal ``g`` of the supporting half-space ``g^T (y - b) >= rhs``.

    The half-space lies inside ``{||y - b|| >= rhs}`` (Cauchy-Schwarz) and is
    tight to first order at ``y = center``.
    """
    diff = np.asarray(center, dtype=float) - np.asarray(b, dtype=float)
    nrm = float(np.linalg.norm(diff))
    if nrm <= 1e-9:
        raise ValueError("linearization point coincides with the reference point")
    return diff / nrm


def _safe_normal(center, b, what: str) -> np.ndarray:
    try:
        return linearize_norm_lower_bound(center, b)
    except ValueError:
        warnings.warn(f"{what}: nominal coincides with the reference, shifting by {DEGENERATE_SHIFT}")
        shifted = np.array(center, dtype=float)
        shifted[0] += DEGENERATE_SHIFT
        return linearize_norm_lower_bound(shifted, b)


# -- per-agent variable block ----------------------------------------------------------------

def _dense_times_sparse(D: np.ndarray, S) -> sp.csr_matrix:
    """``D @ S`` for sparse ``S`` whose nonzeros occupy few columns."""
    S = sp.csc_matrix(S)
    cols = np.flatnonzero(np.diff(S.indptr))
    if cols.size == 0:
        return sp.csr_matrix((D.shape[0], S.shape[1]))
    block = sp.coo_matrix(D @ S[:, cols].toarray())
    return sp.csr_matrix((block.data, (block.row, cols[block.col])), shape=(D.shape[0], S.shape[1]))


@dataclass
class GainBlock:
    """Auxiliary variable ``Y = W Gu K`` restricted to its structural nonzeros."""
    name: str
    W: np.ndarray
    mask: np.ndarray
    scatter: sp.csr_matrix  # full column-major vec(Y) from the free entries

    def row(self, r: int) -> sp.csr_matrix:
        """Map from free entries to row ``r`` of ``Y`` (as a column vector)."""
        nr, nc = self.mask.shape
        return self.scatter[np.arange(nc) * nr + r]


@dataclass
class AgentBlock:
    """One agent's decision variables inside a (possibly shared) conic program."""

    prog: ConicProgram
    prefix: str
    dyn: AgentDynamics
    uset: UncertaintySet
    noise: NoiseModel | None = None
    H: np.ndarray = field(default_factory=lambda: H_POS.copy())
    robust: bool = True
    lift: LiftedDynamics | None = None

    def __post_init__(self):
        if self.lift is None:
            self.lift = build_lifted(self.dyn)
        T, nx, nu = self.dyn.T, self.dyn.nx, self.dyn.nu
        if self.uset.n_zeta != self.dyn.n_zeta:
            raise ValueError(f"uncertainty set has n_zeta={self.uset.n_zeta}, dynamics need {self.dyn.n_zeta}")
        self.m = self.H.shape[0]
        self.kmask = feedback_mask(T, nu, nx, self.dyn.gamma_h)
        self.u = self.prog.add_variable(self.prefix + "u", T * nu)
        self.K = self.prog.add_variable(self.prefix + "K", int(self.kmask.sum()),
                                        shape=self.kmask.shape, mask=self.kmask)
        self.Hbig = np.kron(np.eye(T + 1), self.H)
        self.mu_u = self.prog.add_variable(self.prefix + "mu_u", (T + 1) * self.m)
        self.mu_d = self.prog.add_variable(self.prefix + "mu_d", (T + 1) * self.m)
        self.prog.add(ZERO, self.mu_u - self.mean_rows(self.Hbig), self.prefix + "mu_u.coupling")
        if not self.robust:
            self.prog.add(ZERO, self.mu_d, self.prefix + "mu_d.pinned")
        # whitened disturbance map: ||Gamma^T M^T a||_{S^-1} = ||R (Gu K + I)^T a||
        self.R = self.uset.whitener @ self.lift.Gzeta.T
        self.sqrt_tau = float(np.sqrt(self.uset.tau)) if self.robust else 0.0
        self._gains: dict = {}
        self._deviation_rows = False
        self._counter = 0

    @property
    def T(self) -> int:
        return self.dyn.T

    def fresh(self, stem: str) -> str:
        self._counter += 1
        return f"{self.prefix}{stem}{self._counter}"

    def mean_rows(self, W) -> Affine:
        """``W (G0 x0_bar + Gu u_bar)``: disturbance-free mean rows, affine in ``u``."""
        W = _rows(W)
        return Affine({self.u_name: W @ self.lift.Gu}, W @ (self.lift.G0 @ self.dyn.x0_bar))

    @property
    def u_name(self) -> str:
        return self.prefix + "u"

    @property
    def k_name(self) -> str:
        return self.prefix + "K"

    def gain(self, key: str, W) -> GainBlock:
        if key in self._gains:
            return self._gains[key]
        W = _rows(W)
        Z = W @ self.lift.Gu
        Z[np.abs(Z) < 1e-300] = 0.0
        ymask = ((Z != 0).astype(int) @ self.kmask.astype(int)) > 0
        nr, nc = ymask.shape
        idx_y = np.flatnonzero(ymask.T.ravel())
        idx_k = np.flatnonzero(self.kmask.T.ravel())
        name = f"{self.prefix}Y.{key}"
        self.prog.add_variable(name, idx_y.size, shape=ymask.shape, mask=ymask)
        scatter = sp.csr_matrix((np.ones(idx_y.size), (idx_y, np.arange(idx_y.size))),
                                shape=(nr * nc, idx_y.size))
        if idx_y.size:
            link = sp.kron(sp.identity(nc, format="csr"), sp.csr_matrix(Z), format="csr")
            link = link[idx_y][:, idx_k]
            self.prog.add(ZERO, Affine({name: sp.identity(idx_y.size, format="csr"), self.k_name: -link}),
                          f"{name}.link")
        blk = GainBlock(name, W, ymask, scatter)
        self._gains[key] = blk
        return blk

    def closed_loop_row(self, blk: GainBlock, r: int, D: np.ndarray | None = None) -> Affine:
        """``D (Gu K + I)^T w_r`` for row ``w_r`` of the gain's ``W`` (``D`` defaults to ``R``)."""
        D = self.R if D is None else D
        const = D @ blk.W[r]
        if not blk.mask[r].any():
            return Affine.constant(const)
        return Affine({blk.name: _dense_times_sparse(D, blk.row(r))}, const)

    def policy(self, primal: dict) -> Policy:
        return Policy.from_free(self.dyn, primal[self.u_name], primal[self.k_name])

    def point(self, pol: Policy) -> dict:
        """Values of the policy-determined variables (``u``, ``K``, ``mu_u``, gains) for ``pol``."""
        vals = {self.u_name: pol.u_bar.copy(), self.k_name: pol.free_entries(),
                self.prefix + "mu_u": self.Hbig @ (self.lift.G0 @ self.dyn.x0_bar + self.lift.Gu @ pol.u_bar)}
        for blk in self._gains.values():
            Y = blk.W @ self.lift.Gu @ pol.K
            vals[blk.name] = Y.T[blk.mask.T]
        return vals

    def position(self, k: int) -> Affine:
        return self.prog.var(self.prefix + "mu_u")[k * self.m:(k + 1) * self.m]

    def deviation(self, k: int) -> Affine:
        return self.prog.var(self.prefix + "mu_d")[k * self.m:(k + 1) * self.m]

    def ensure_deviation_rows(self) -> list:
        """Coordinate-wise bounds ``mu_d[k, j] >= sqrt(tau) ||R (Gu K + I)^T h_{k,j}||``.

        Emitted once per agent and shared by every obstacle and neighbor row.
        """
        if self._deviation_rows or not self.robust:
            return []
        self._deviation_rows = True
        blk = self.gain("pos", self.Hbig)
        mu_d = self.prog.var(self.prefix + "mu_d")
        out = []
        for r in range(self.Hbig.shape[0]):
            cone = Affine.vstack([mu_d[r], self.closed_loop_row(blk, r) * self.sqrt_tau])
            out.append(self.prog.add(SOC, cone, f"{self.prefix}dev_bound.{r}"))
        return out


# -- reformulations ------------------------------------------------------------------------

def _robust_term(ag: AgentBlock, key: str, W, r: int) -> Affine:
    return ag.closed_loop_row(ag.gain(key, W), r) * ag.sqrt_tau


def reformulate_linear_mean(spec: LinearMean, ag: AgentBlock, key: str | None = None) -> list:
    """``a^T mu + sqrt(tau) ||Gamma^T M^T a||_{S^-1} <= b`` as one SOC row per constraint row."""
    key = key or ag.fresh("lin")
    mean = ag.mean_rows(spec.a)
    out = []
    for r in range(spec.a.shape[0]):
        slack = Affine.constant(spec.b[r]) - mean[r]
        if ag.robust:
            cone = Affine.vstack([slack, _robust_term(ag, key, spec.a, r)])
            out.append(ag.prog.add(SOC, cone, f"{key}.{r}"))
        else:
            out.append(ag.prog.add(NONNEG, slack, f"{key}.{r}"))
    return out


def reformulate_mean_target(spec: MeanTargetBox, ag: AgentBlock, key: str | None = None) -> list:
    """Nominal equality ``a_bar^T mu = b_bar`` plus ``sqrt(tau) ||...|| <= eps`` per row."""
    key = key or ag.fresh("target")
    out = [ag.prog.add(ZERO, ag.mean_rows(spec.a_bar) - spec.b_bar, f"{key}.mean")]
    if spec.eps is None or not np.isfinite(spec.eps) or not ag.robust:
        return out
    for r in range(spec.a_bar.shape[0]):
        cone = Affine.vstack([Affine.constant(spec.eps), _robust_term(ag, key, spec.a_bar, r)])
        out.append(ag.prog.add(SOC, cone, f"{key}.dev.{r}"))
    return out


def _steps(ag: AgentBlock, timesteps) -> list:
    return list(range(1, ag.T + 1)) if timesteps is None else [int(k) for k in timesteps]


def _slack(ag: AgentBlock, name: str) -> Affine:
    if name not in ag.prog.variables:
        return ag.prog.add_variable(name, 1)
    return ag.prog.var(name)


def reformulate_obstacle_socp(spec: ObstacleAvoid, ag: AgentBlock, nominal, key: str | None = None,
                              parts: str = "all") -> list:
    """Linearized distance row, ``||mu_d,k|| <= c~ - c``, and the shared deviation rows.

    ``nominal`` holds nominal positions, shape ``(T+1, m)``. ``parts="static"``
    emits only the rows that do not depend on the nominal and ``parts="linear"``
    only the linearized rows, so iterative callers can rebuild the latter alone.
    """
    key = key or ag.fresh("obs")
    out = []
    if parts in ("all", "static"):
        out += ag.ensure_deviation_rows()
        for k in _steps(ag, spec.timesteps):
            ct = _slack(ag, f"{key}.ctilde{k}")
            cone = Affine.vstack([ct - spec.radius, ag.deviation(k)])
            out.append(ag.prog.add(SOC, cone, f"{key}.norm.{k}"))
    if parts in ("all", "linear"):
        nominal = np.asarray(nominal, dtype=float).reshape(ag.T + 1, ag.m)
        for k in _steps(ag, spec.timesteps):
            g = _safe_normal(nominal[k], spec.center, f"{key} step {k}")
            ct = _slack(ag, f"{key}.ctilde{k}")
            lin = ag.position(k).lmul(g[None, :]) - float(g @ spec.center) - ct
            out.append(ag.prog.add(NONNEG, lin, f"{key}.lin.{k}"))
    return out


def reformulate_interagent_socp(spec: InterAgentAvoid, ag: AgentBlock, other_mu_u: Affine, other_mu_d: Affine,
                                nominal_self, nominal_other, key: str | None = None, parts: str = "all") -> list:
    """Linearized pair-distance rows written against the neighbor's trajectory expressions.

    ``other_mu_u`` and ``other_mu_d`` are stacked ``(T+1) m`` expressions: copy
    variables in the distributed solver, the neighbor's own variables otherwise.
    ``parts`` works as in :func:`reformulate_obstacle_socp`.
    """
    key = key or ag.fresh(f"ia{spec.neighbor}.")
    m = ag.m
    out = []
    if parts in ("all", "static"):
        out += ag.ensure_deviation_rows()
        for k in _steps(ag, spec.timesteps):
            ct = _slack(ag, f"{key}.ctilde{k}")
            sl = slice(k * m, (k + 1) * m)
            cone = Affine.vstack([ct - spec.c, ag.deviation(k) + other_mu_d[sl]])
            out.append(ag.prog.add(SOC, cone, f"{key}.norm.{k}"))
    if parts in ("all", "linear"):
        ns = np.asarray(nominal_self, dtype=float).reshape(ag.T + 1, m)
        no = np.asarray(nominal_other, dtype=float).reshape(ag.T + 1, m)
        for k in _steps(ag, spec.timesteps):
            g = _safe_normal(ns[k], no[k], f"{key} step {k}")
            ct = _slack(ag, f"{key}.ctilde{k}")
            sl = slice(k * m, (k + 1) * m)
            lin = (ag.position(k) - other_mu_u[sl]).lmul(g[None, :]) - ct
            out.append(ag.prog.add(NONNEG, lin, f"{key}.lin.{k}"))
    return out


def reformulate_chance(spec: ChanceLinear, ag: AgentBlock, key: str | None = None) -> list:
    """Split the chance row into a robust mean part and a Gaussian tail part with slack alpha."""
    if ag.noise is None:
        raise ValueError("chance constraints need a noise model")
    key = key or ag.fresh("chance")
    eta = gaussian_quantile(spec.p)
    blk = ag.gain(key, spec.a[None, :])
    alpha = ag.prog.add_variable(f"{key}.alpha", 1)
    slack = Affine.constant(spec.b) - alpha - ag.mean_rows(spec.a[None, :])
    out = []
    if ag.robust:
        cone = Affine.vstack([slack, ag.closed_loop_row(blk, 0) * ag.sqrt_tau])
        out.append(ag.prog.add(SOC, cone, f"{key}.mean"))
    else:
        out.append(ag.prog.add(NONNEG, slack, f"{key}.mean"))
    Gphi = (ag.lift.Gw @ ag.noise.phi).T
    tail = ag.closed_loop_row(blk, 0, Gphi) * eta
    out.append(ag.prog.add(SOC, Affine.vstack([alpha, tail]), f"{key}.tail"))
    return out


def _matrix_vec(n: int, blocks) -> Affine:
    """Column-major vec of an ``n x n`` matrix assembled from placed affine blocks.

    ``blocks`` is a list of ``(row0, col0, nrows, ncols, expr)`` with ``expr`` the
    column-major vec of the block.
    """
    parts, rows = [], []
    for r0, c0, nr, nc, expr in blocks:
        i, j = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
        target = ((c0 + j) * n + (r0 + i)).ravel(order="F")
        rows.append(target)
        parts.append(expr)
    stacked = Affine.vstack(parts)
    target = np.concatenate(rows)
    scat = sp.csr_matrix((np.ones(target.size), (target, np.arange(target.size))), shape=(n * n, target.size))
    return stacked.lmul(scat)


def _transpose_perm(nr: int, nc: int) -> sp.csr_matrix:
    """Permutation taking column-major ``vec(X)`` to ``vec(X^T)`` for ``X`` of shape ``(nr, nc)``."""
    i, j = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    src = (j * nr + i).ravel()
    dst = (i * nc + j).ravel()
    return sp.csr_matrix((np.ones(src.size), (dst, src)), shape=(nr * nc, nr * nc))


def reformulate_covariance(spec: CovarianceBound, ag: AgentBlock, key: str | None = None) -> list:
    """Schur-complement LMI ``[[Sigma, F], [F^T, I]] >= 0`` with ``F = W (Gu K + I) Gw phi``."""
    if ag.noise is None:
        raise ValueError("covariance constraints need a noise model")
    key = key or ag.fresh("cov")
    nx, T = ag.dyn.nx, ag.T
    W = ag.lift.P(spec.timestep) if spec.timestep is not None else np.eye((T + 1) * nx)
    r = W.shape[0]
    if spec.sigma_bound.shape != (r, r):
        raise ValueError(f"sigma_bound must be {r} x {r}")
    G = ag.lift.Gw @ ag.noise.phi
    nw = G.shape[1]
    blk = ag.gain(key, W)
    # vec(F) = (G^T kron I) vec(Y) + vec(W G)
    kr = sp.kron(sp.csr_matrix(G.T), sp.identity(r, format="csr"), format="csr")
    F = Affine({blk.name: kr @ blk.scatter}, (W @ G).ravel(order="F"))
    Ft = F.lmul(_transpose_perm(r, nw))
    n = r + nw
    lmi = _matrix_vec(n, [
        (0, 0, r, r, Affine.constant(spec.sigma_bound.ravel(order="F"))),
        (0, r, r, nw, F),
        (r, 0, nw, r, Ft),
        (r, r, nw, nw, Affine.constant(np.eye(nw).ravel(order="F"))),
    ])
    return [ag.prog.add(PSD, lmi, f"{key}.lmi")]


def reformulate_obstacle_sdp_baseline(spec: ObstacleAvoid, ag: AgentBlock, nominal_u_bar, nominal_K,
                                      key: str | None = None) -> list:
    """S-lemma LMI on the linearized squared distance, one block of size ``n_bar + 1`` per step.

    With ``N = H P_k (Gu K + I) Gzeta Gamma`` the squared distance is linearized as
    ``z^T (N_l^T N + N^T N_l - N_l^T N_l) z + 2 Qbar z + q`` around the nominal policy.
    """
    key = key or ag.fresh("sdp")
    lift, uset, m = ag.lift, ag.uset, ag.m
    nbar = uset.n_bar
    GzG = lift.Gzeta @ uset.Gamma
    F_l = np.eye(lift.Gu.shape[0]) + lift.Gu @ np.asarray(nominal_K, dtype=float)
    mean_l = lift.G0 @ ag.dyn.x0_bar + lift.Gu @ np.asarray(nominal_u_bar, dtype=float)
    blk = ag.gain("pos", ag.Hbig)
    out = []
    tau = ag.uset.tau
    for k in _steps(ag, spec.timesteps):
        rows = list(range(k * m, (k + 1) * m))
        # N^T as a stacked column-major vec of N (m x nbar): entry (i, c) at c*m + i
        cols = [ag.closed_loop_row(blk, r, GzG.T) for r in rows]  # each: N[i, :]^T
        NT = Affine.vstack(cols)  # row-major vec(N) == vec(N^T)
        vecN = NT.lmul(_transpose_perm(nbar, m))
        N_l = ag.Hbig[rows] @ F_l @ GzG
        y_l = ag.Hbig[rows] @ mean_l
        d_l = y_l - spec.center
        y = ag.position(k)
        # top-left: N_l^T N + N^T N_l - N_l^T N_l + beta S
        A1 = sp.kron(sp.identity(nbar), sp.csr_matrix(N_l.T), format="csr")
        tl = vecN.lmul(A1)
        tl = tl + tl.lmul(_transpose_perm(nbar, nbar)) - (N_l.T @ N_l).ravel(order="F")
        beta = ag.prog.add_variable(f"{key}.beta{k}", 1)
        tl = tl + beta.lmul(uset.S.reshape(-1, 1, order="F"))
        # Qbar = d_l^T N + (y - y_l)^T N_l  (1 x nbar)
        qbar = vecN.lmul(sp.kron(sp.identity(nbar), sp.csr_matrix(d_l[None, :]), format="csr"))
        qbar = qbar + y.lmul(N_l.T) - N_l.T @ y_l
        q = y.lmul((2 * d_l)[None, :]) - float(d_l @ (y_l + spec.center))
        br = q - spec.radius ** 2 - beta * tau
        lmi = _matrix_vec(nbar + 1, [
            (0, 0, nbar, nbar, tl),
            (0, nbar, nbar, 1, qbar),
            (nbar, 0, 1, nbar, qbar),
            (nbar, nbar, 1, 1, br),
        ])
        out.append(ag.prog.add(NONNEG, beta, f"{key}.beta.{k}"))
        out.append(ag.prog.add(PSD, lmi, f"{key}.lmi.{k}"))
    return out
