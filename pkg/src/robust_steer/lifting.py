"""Stacked-horizon dynamics, purified-state feedback policies and rollouts.

State, control and disturbance sequences are stacked along the horizon::

    x    = [x_0; ...; x_T]                 ((T+1) n_x)
    u    = [u_0; ...; u_{T-1}]             (T n_u)
    w    = [s_0; w_0; ...; w_{T-1}]        (n_x + T n_w)
    zeta = [d0_bar; d_0; ...; d_{T-1}]     (n_x + T n_d)

so that ``x = G0 x0_bar + Gu u + Gw w + Gzeta zeta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes are mutually inconsistent."""


def _stack(seq, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be a length-T sequence of matrices, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class AgentDynamics:
    """Linear time-varying dynamics ``x_{k+1} = A_k x_k + B_k u_k + C_k d_k + D_k w_k``.

    ``A``, ``B``, ``C`` and ``D`` are stacked as arrays of shape ``(T, rows, cols)``.
    ``gamma_h`` is the length of the feedback history window (``1 <= gamma_h <= T``).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    x0_bar: np.ndarray
    gamma_h: int | None = None

    def __post_init__(self):
        A = _stack(self.A, "A")
        B = _stack(self.B, "B")
        C = _stack(self.C, "C")
        D = _stack(self.D, "D")
        T, nx, nx2 = A.shape
        if nx != nx2:
            raise DimensionError("A_k must be square")
        for name, M in (("B", B), ("C", C), ("D", D)):
            if M.shape[0] != T:
                raise DimensionError(f"{name} has {M.shape[0]} steps, A has {T}")
            if M.shape[1] != nx:
                raise DimensionError(f"{name}_k must have {nx} rows, got {M.shape[1]}")
        x0 = np.asarray(self.x0_bar, dtype=float).reshape(-1)
        if x0.shape != (nx,):
            raise DimensionError(f"x0_bar must have length {nx}")
        gamma_h = T if self.gamma_h is None else int(self.gamma_h)
        if not 1 <= gamma_h <= T:
            raise DimensionError(f"gamma_h must lie in [1, {T}], got {gamma_h}")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D), ("x0_bar", x0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "gamma_h", gamma_h)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    @property
    def nd(self) -> int:
        return self.C.shape[2]

    @property
    def nw(self) -> int:
        return self.D.shape[2]

    @property
    def n_zeta(self) -> int:
        return self.nx + self.T * self.nd

    @property
    def n_w(self) -> int:
        return self.nx + self.T * self.nw

    @classmethod
    def time_invariant(cls, A, B, C, D, x0_bar, T: int, gamma_h: int | None = None) -> "AgentDynamics":
        rep = lambda M: np.repeat(np.asarray(M, dtype=float)[None], T, axis=0)  # noqa: E731
        return cls(rep(A), rep(B), rep(C), rep(D), x0_bar, gamma_h)


@dataclass(frozen=True)
class LiftedDynamics:
    G0: np.ndarray
    Gu: np.ndarray
    Gw: np.ndarray
    Gzeta: np.ndarray
    T: int
    nx: int
    nu: int

    def P(self, k: int) -> np.ndarray:
        """Selector with ``x_k = P(k) @ x``."""
        sel = np.zeros((self.nx, (self.T + 1) * self.nx))
        sel[:, k * self.nx:(k + 1) * self.nx] = np.eye(self.nx)
        return sel

    def rows(self, k: int) -> slice:
        return slice(k * self.nx, (k + 1) * self.nx)


def transition(dyn: AgentDynamics, k1: int, k2: int) -> np.ndarray:
    """State transition ``A_{k1-1} ... A_{k2}``; identity when ``k1 == k2``."""
    out = np.eye(dyn.nx)
    for k in range(k2, k1):
        out = dyn.A[k] @ out
    return out


def build_lifted(dyn: AgentDynamics) -> LiftedDynamics:
    T, nx, nu, nd, nw = dyn.T, dyn.nx, dyn.nu, dyn.nd, dyn.nw
    G0 = np.zeros(((T + 1) * nx, nx))
    Gu = np.zeros(((T + 1) * nx, T * nu))
    Gw = np.zeros(((T + 1) * nx, nx + T * nw))
    Gz = np.zeros(((T + 1) * nx, nx + T * nd))
    G0[:nx] = np.eye(nx)
    Gw[:nx, :nx] = np.eye(nx)
    Gz[:nx, :nx] = np.eye(nx)
    # Block row k+1 = A_k * (block row k) + the input entering at step k.
    for k in range(T):
        cur, nxt = slice(k * nx, (k + 1) * nx), slice((k + 1) * nx, (k + 2) * nx)
        Ak = dyn.A[k]
        G0[nxt] = Ak @ G0[cur]
        Gu[nxt] = Ak @ Gu[cur]
        Gw[nxt] = Ak @ Gw[cur]
        Gz[nxt] = Ak @ Gz[cur]
        Gu[nxt, k * nu:(k + 1) * nu] += dyn.B[k]
        Gw[nxt, nx + k * nw:nx + (k + 1) * nw] += dyn.D[k]
        Gz[nxt, nx + k * nd:nx + (k + 1) * nd] += dyn.C[k]
    for M in (G0, Gu, Gw, Gz):
        M.setflags(write=False)
    return LiftedDynamics(G0, Gu, Gw, Gz, T, nx, nu)


def feedback_mask(T: int, nu: int, nx: int, gamma_h: int) -> np.ndarray:
    """Boolean pattern of the admissible entries of K.

    Block ``(k, l)`` is free iff ``max(0, k - gamma_h + 1) <= l <= k``; the last
    block column (``l = T``) is never free.
    """
    blocks = np.zeros((T, T + 1), dtype=bool)
    for k in range(T):
        blocks[k, max(0, k - gamma_h + 1):k + 1] = True
    return np.kron(blocks, np.ones((nu, nx), dtype=bool))


@dataclass(frozen=True)
class Policy:
    """Affine purified-state feedback ``u = u_bar + K delta``.

    ``K`` must vanish outside :func:`feedback_mask`; arrays are stored read-only so
    the sparsity pattern cannot be broken after construction.
    """

    u_bar: np.ndarray
    K: np.ndarray
    gamma_h: int
    nx: int
    nu: int

    def __post_init__(self):
        u_bar = np.array(self.u_bar, dtype=float).reshape(-1)
        K = np.array(self.K, dtype=float)
        if K.ndim != 2 or K.shape[0] != u_bar.size:
            raise DimensionError(f"K must have {u_bar.size} rows, got shape {K.shape}")
        nu, nx = int(self.nu), int(self.nx)
        T = u_bar.size // nu
        if T * nu != u_bar.size or K.shape[1] != (T + 1) * nx:
            raise DimensionError(f"K must be {T * nu} x {(T + 1) * nx}, got {K.shape}")
        mask = feedback_mask(T, nu, nx, self.gamma_h)
        if np.any(K[~mask] != 0.0):
            raise ValueError("K has nonzero entries outside the causal history window")
        u_bar.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "u_bar", u_bar)
        object.__setattr__(self, "K", K)

    @property
    def T(self) -> int:
        return self.u_bar.size // self.nu

    @property
    def mask(self) -> np.ndarray:
        return feedback_mask(self.T, self.nu, self.nx, self.gamma_h)

    @classmethod
    def zeros(cls, dyn: AgentDynamics) -> "Policy":
        return cls(np.zeros(dyn.T * dyn.nu), np.zeros((dyn.T * dyn.nu, (dyn.T + 1) * dyn.nx)),
                   dyn.gamma_h, dyn.nx, dyn.nu)

    @classmethod
    def for_dynamics(cls, dyn: AgentDynamics, u_bar, K=None) -> "Policy":
        if K is None:
            K = np.zeros((dyn.T * dyn.nu, (dyn.T + 1) * dyn.nx))
        return cls(u_bar, K, dyn.gamma_h, dyn.nx, dyn.nu)

    @classmethod
    def from_free(cls, dyn: AgentDynamics, u_bar, k_free) -> "Policy":
        """Build from the vector of admissible K entries (column-major order)."""
        mask = feedback_mask(dyn.T, dyn.nu, dyn.nx, dyn.gamma_h)
        K = np.zeros(mask.shape)
        K.T[mask.T] = np.asarray(k_free, dtype=float)
        return cls(u_bar, K, dyn.gamma_h, dyn.nx, dyn.nu)

    def free_entries(self) -> np.ndarray:
        return self.K.T[self.mask.T].copy()

    def gain_block(self, k: int, l: int) -> np.ndarray:
        return self.K[k * self.nu:(k + 1) * self.nu, l * self.nx:(l + 1) * self.nx].copy()

    def with_gain_block(self, k: int, l: int, block) -> "Policy":
        if not (max(0, k - self.gamma_h + 1) <= l <= k):
            raise ValueError(f"block ({k}, {l}) is outside the admissible feedback window")
        K = self.K.copy()
        K[k * self.nu:(k + 1) * self.nu, l * self.nx:(l + 1) * self.nx] = block
        return Policy(self.u_bar, K, self.gamma_h, self.nx, self.nu)


def _check_len(vec, n: int, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=float).reshape(-1)
    if v.size != n:
        raise DimensionError(f"{name} must have length {n}, got {v.size}")
    return v


def closed_loop_factor(lift: LiftedDynamics, K: np.ndarray) -> np.ndarray:
    """``Gu K + I``, the map from purified states to realized states."""
    return lift.Gu @ K + np.eye(lift.Gu.shape[0])


def nominal_mean(lift: LiftedDynamics, x0_bar, u_bar) -> np.ndarray:
    """Disturbance-free mean ``G0 x0_bar + Gu u_bar``."""
    return lift.G0 @ np.asarray(x0_bar, dtype=float) + lift.Gu @ np.asarray(u_bar, dtype=float)


def state_mean(lift: LiftedDynamics, pol: Policy, zeta, x0_bar) -> np.ndarray:
    """Mean state sequence for a fixed deterministic disturbance ``zeta``.

    The stochastic part has zero mean, so only ``zeta`` enters:
    ``G0 x0_bar + Gu u_bar + (Gu K + I) Gzeta zeta``.
    """
    zeta = _check_len(zeta, lift.Gzeta.shape[1], "zeta")
    x0 = _check_len(x0_bar, lift.nx, "x0_bar")
    return nominal_mean(lift, x0, pol.u_bar) + closed_loop_factor(lift, pol.K) @ (lift.Gzeta @ zeta)


def state_covariance(lift: LiftedDynamics, pol: Policy, sigma_w) -> np.ndarray:
    """Covariance of the state sequence; depends only on ``K`` and ``sigma_w``."""
    sigma_w = np.asarray(sigma_w, dtype=float)
    n = lift.Gw.shape[1]
    if sigma_w.shape != (n, n):
        raise DimensionError(f"sigma_w must be {n} x {n}, got {sigma_w.shape}")
    if not np.allclose(sigma_w, sigma_w.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma_w).max())):
        raise ValueError("sigma_w must be symmetric")
    F = closed_loop_factor(lift, pol.K) @ lift.Gw
    cov = F @ sigma_w @ F.T
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class Rollout:
    x: np.ndarray  # (T+1, nx)
    u: np.ndarray  # (T, nu)
    delta: np.ndarray  # (T+1, nx)


def rollout(dyn: AgentDynamics, pol: Policy, zeta, w) -> Rollout:
    """Simulate the closed loop step by step.

    The controller tracks the disturbance-free state ``x_hat`` alongside the true
    state and feeds back the purified states ``delta_l = x_l - x_hat_l`` over the
    last ``gamma_h`` steps.
    """
    T, nx, nu, nd, nw = dyn.T, dyn.nx, dyn.nu, dyn.nd, dyn.nw
    zeta = _check_len(zeta, dyn.n_zeta, "zeta")
    w = _check_len(w, dyn.n_w, "w")
    x = np.zeros((T + 1, nx))
    x_hat = np.zeros((T + 1, nx))
    delta = np.zeros((T + 1, nx))
    u = np.zeros((T, nu))
    x_hat[0] = dyn.x0_bar
    x[0] = dyn.x0_bar + zeta[:nx] + w[:nx]
    delta[0] = x[0] - x_hat[0]
    for k in range(T):
        uk = pol.u_bar[k * nu:(k + 1) * nu].copy()
        for l in range(max(0, k - pol.gamma_h + 1), k + 1):
            uk += pol.K[k * nu:(k + 1) * nu, l * nx:(l + 1) * nx] @ delta[l]
        u[k] = uk
        d_k = zeta[nx + k * nd:nx + (k + 1) * nd]
        w_k = w[nx + k * nw:nx + (k + 1) * nw]
        x[k + 1] = dyn.A[k] @ x[k] + dyn.B[k] @ uk + dyn.C[k] @ d_k + dyn.D[k] @ w_k
        x_hat[k + 1] = dyn.A[k] @ x_hat[k] + dyn.B[k] @ uk
        delta[k + 1] = x[k + 1] - x_hat[k + 1]
    return Rollout(x, u, delta)


def rollout_batch(lift: LiftedDynamics, pol: Policy, x0_bar, zetas: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """Vectorized closed-loop states for many ``(zeta, w)`` pairs via the compact form.

    ``zetas`` and ``ws`` hold one sample per row; returns ``(n, (T+1) n_x)``.
    """
    F = closed_loop_factor(lift, pol.K)
    base = nominal_mean(lift, x0_bar, pol.u_bar)
    return base[None, :] + (np.atleast_2d(zetas) @ lift.Gzeta.T + np.atleast_2d(ws) @ lift.Gw.T) @ F.T


# Planar double integrator, dt = 0.05.
DI_A = np.array([[1.0, 0.0, 0.05, 0.0],
                 [0.0, 1.0, 0.0, 0.05],
                 [0.0, 0.0, 1.0, 0.0],
                 [0.0, 0.0, 0.0, 1.0]])
DI_B = np.array([[0.0013, 0.0],
                 [0.0, 0.0013],
                 [0.05, 0.0],
                 [0.0, 0.05]])
H_POS = np.hstack([np.eye(2), np.zeros((2, 2))])


def random_disturbance_gains(T: int, rng: np.random.Generator, nx: int = 4, nd: int = 2) -> np.ndarray:
    """Gaussian ``C_k`` matrices rescaled to unit Frobenius norm."""
    C = rng.standard_normal((T, nx, nd))
    return C / np.linalg.norm(C, axis=(1, 2), keepdims=True)


def double_integrator_2d(T: int, x0_bar, C=None, gamma_h: int | None = None,
                         rng: np.random.Generator | None = None) -> AgentDynamics:
    if C is None:
        C = random_disturbance_gains(T, rng if rng is not None else np.random.default_rng(0))
    A = np.repeat(DI_A[None], T, axis=0)
    B = np.repeat(DI_B[None], T, axis=0)
    D = np.repeat(np.eye(4)[None], T, axis=0)
    return AgentDynamics(A, B, np.asarray(C, dtype=float), D, x0_bar, gamma_h)
