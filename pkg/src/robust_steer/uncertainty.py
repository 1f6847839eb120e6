"""Ellipsoidal uncertainty sets and Gaussian noise models."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla


class NotPositiveDefinite(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintySet:
    """``{Gamma z : <S z, z> <= tau}``.

    Weighted norms against ``S^{-1}`` go through the Cholesky factor of ``S``;
    ``S`` is never inverted explicitly.
    """

    Gamma: np.ndarray
    S: np.ndarray
    tau: float

    def __post_init__(self):
        Gamma = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if S.shape != (Gamma.shape[1], Gamma.shape[1]):
            raise ValueError(f"S must be {Gamma.shape[1]} x {Gamma.shape[1]}, got {S.shape}")
        if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise NotPositiveDefinite("S must be symmetric")
        if not float(self.tau) > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("S must be positive definite") from exc
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def identity(cls, n: int, tau: float) -> "UncertaintySet":
        return cls(np.eye(n), np.eye(n), tau)

    @property
    def n_zeta(self) -> int:
        return self.Gamma.shape[0]

    @property
    def n_bar(self) -> int:
        return self.Gamma.shape[1]

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor ``L`` with ``S = L L^T``."""
        return np.linalg.cholesky(self.S)

    @cached_property
    def whitener(self) -> np.ndarray:
        """``W = L^{-1} Gamma^T``, so ``||Gamma^T v||_{S^-1} = ||W v||``."""
        return sla.solve_triangular(self.chol, self.Gamma.T, lower=True)

    def with_tau(self, tau: float) -> "UncertaintySet":
        return UncertaintySet(self.Gamma, self.S, tau)


def weighted_inv_norm(uset: UncertaintySet, v) -> float:
    """``||v||_{S^-1}`` for a vector in the ``z`` coordinates."""
    y = sla.solve_triangular(uset.chol, np.asarray(v, dtype=float), lower=True)
    return float(np.linalg.norm(y))


def support_value(uset: UncertaintySet, Mt_a) -> float:
    """Maximum of ``a^T M zeta`` over the set, given ``Mt_a = Gamma^T M^T a``.

    Equals ``sqrt(tau) * ||Mt_a||_{S^-1}``; the minimum is its negation.
    """
    Mt_a = np.asarray(Mt_a, dtype=float).reshape(-1)
    if Mt_a.size != uset.n_bar:
        raise ValueError(f"expected a vector of length {uset.n_bar}")
    return float(np.sqrt(uset.tau) * weighted_inv_norm(uset, Mt_a))


def worst_case_disturbance(uset: UncertaintySet, Mt_a) -> np.ndarray:
    """Maximizer ``zeta* = Gamma z*`` of ``a^T M zeta`` over the set.

    ``z* = sqrt(tau) S^{-1} v / ||v||_{S^-1}`` with ``v = Gamma^T M^T a`` (the KKT
    point of the inner maximization). Returns zero when ``v`` vanishes.
    """
    v = np.asarray(Mt_a, dtype=float).reshape(-1)
    nrm = weighted_inv_norm(uset, v)
    if nrm == 0.0:
        return np.zeros(uset.n_zeta)
    z = sla.cho_solve((uset.chol, True), v) * (np.sqrt(uset.tau) / nrm)
    return uset.Gamma @ z


def sample_disturbance(uset: UncertaintySet, count: int, seed, mode: str = "interior") -> np.ndarray:
    """Draw ``count`` points of the set, one per row.

    ``interior`` maps a uniform ball sample through ``z = L^{-T} y``; ``boundary``
    keeps unit radius so that ``<S z, z> = tau``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if mode not in ("interior", "boundary"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    n = uset.n_bar
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    if mode == "interior":
        g *= rng.random((count, 1)) ** (1.0 / n)
    y = np.sqrt(uset.tau) * g
    z = sla.solve_triangular(uset.chol, y.T, lower=True, trans="T").T
    return z @ uset.Gamma.T


def latent_of(uset: UncertaintySet, zeta) -> tuple[np.ndarray, float]:
    """Smallest-``<Sz,z>`` preimage of ``zeta`` under ``Gamma`` and its fit residual."""
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    z_p, *_ = np.linalg.lstsq(uset.Gamma, zeta, rcond=None)
    resid = float(np.linalg.norm(uset.Gamma @ z_p - zeta))
    N = sla.null_space(uset.Gamma)
    if N.shape[1]:
        SN = uset.S @ N
        y = -np.linalg.solve(N.T @ SN, SN.T @ z_p)
        z_p = z_p + N @ y
    return z_p, resid


def membership(uset: UncertaintySet, zeta, tol: float = 1e-9, fit_tol: float = 1e-8) -> bool:
    z, resid = latent_of(uset, zeta)
    if resid > fit_tol:
        return False
    return bool(z @ uset.S @ z <= uset.tau + tol)


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian ``w`` with covariance ``sigma_w = phi phi^T``."""

    sigma_w: np.ndarray
    phi: np.ndarray

    @classmethod
    def from_covariance(cls, sigma_w) -> "NoiseModel":
        sigma_w = np.asarray(sigma_w, dtype=float)
        return cls(sigma_w, factor_noise(sigma_w))

    @classmethod
    def from_blocks(cls, initial_cov, step_cov, T: int) -> "NoiseModel":
        """Block-diagonal covariance for ``[s_0; w_0; ...; w_{T-1}]``."""
        blocks = [np.atleast_2d(initial_cov)] + [np.atleast_2d(step_cov)] * T
        return cls.from_covariance(sla.block_diag(*blocks))

    @property
    def dim(self) -> int:
        return self.sigma_w.shape[0]

    def sample(self, count: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.standard_normal((count, self.phi.shape[1])) @ self.phi.T


def factor_noise(sigma_w) -> np.ndarray:
    """Square factor ``phi`` with ``phi phi^T = sigma_w``.

    Cholesky when the matrix is positive definite, otherwise a clipped
    eigendecomposition (PSD but singular inputs, e.g. noise-free channels).
    """
    sigma_w = np.atleast_2d(np.asarray(sigma_w, dtype=float))
    if sigma_w.shape[0] != sigma_w.shape[1]:
        raise ValueError("sigma_w must be square")
    scale = max(1.0, float(np.abs(sigma_w).max())) if sigma_w.size else 1.0
    if not np.allclose(sigma_w, sigma_w.T, rtol=0, atol=1e-12 * scale):
        raise ValueError("sigma_w must be symmetric")
    try:
        return np.linalg.cholesky(sigma_w)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(0.5 * (sigma_w + sigma_w.T))
    if vals.min() < -1e-10 * scale:
        raise ValueError("sigma_w must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))
