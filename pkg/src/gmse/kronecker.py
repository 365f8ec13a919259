"""Kronecker-product formulation of the linearised GMSE.

Units are expanded to ``T = N K`` stacked (unit, category) rows. The stacked
design of unit ``i`` is ``x_i kron I_K`` with the baseline-category columns
dropped, so parameters are ordered covariate-major (``h = j (K-1) + k``),
unlike :mod:`gmse.multinomial`. Domain selectors are ``gamma kron I_K``. All
categories and domains come out of one sandwich product whose diagonal holds
the GMSE values.

Stacked matrices are built one block of units at a time; per-block products
are summed before the final sandwich.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .multinomial import Coefficients
from .register import DomainSpec

__all__ = [
    "DEFAULT_BLOCK_UNITS",
    "KroneckerWorkspace",
    "stacked_design",
    "domain_selector",
    "kf_probabilities",
    "kf_score",
    "kf_delta",
    "kf_hessian",
    "kf_outcome_covariance",
    "kf_totals",
    "kf_gmse",
    "to_covariate_major",
    "to_category_major",
]

DEFAULT_BLOCK_UNITS = 65_536


def to_covariate_major(free: np.ndarray) -> np.ndarray:
    """``(K-1) x J`` coefficient block -> covariate-major vector."""
    return np.asarray(free, dtype=float).T.ravel()


def to_category_major(vec: np.ndarray, K: int) -> np.ndarray:
    """Covariate-major vector (or square matrix) -> category-major layout."""
    vec = np.asarray(vec)
    H = vec.shape[0]
    J = H // (K - 1)
    perm = np.arange(H).reshape(J, K - 1).T.ravel()
    if vec.ndim == 1:
        return vec[perm]
    return vec[np.ix_(perm, perm)]


def _free_columns(J: int, K: int) -> np.ndarray:
    cols = np.arange(J * K).reshape(J, K)
    return cols[:, : K - 1].ravel()


def stacked_design(X: np.ndarray, K: int) -> np.ndarray:
    """``(N K) x H`` matrix whose unit blocks are ``x_i kron I_K`` (free columns)."""
    X = np.asarray(X, dtype=float)
    return np.kron(X, np.eye(K))[:, _free_columns(X.shape[1], K)]


def domain_selector(gammas: np.ndarray, K: int) -> np.ndarray:
    """``(N K) x (D K)`` selector ``[gamma_d kron I_K]``; column ``(d, k)`` picks category ``k`` of domain ``d``."""
    return np.kron(np.asarray(gammas, dtype=float), np.eye(K))


def kf_probabilities(Xdot: np.ndarray, beta: np.ndarray, K: int) -> np.ndarray:
    """Stacked probabilities ``e / d_plus`` with ``e = exp(Xdot beta)``.

    Baseline rows of ``Xdot`` are zero so their ``e`` is ``exp(0) = 1`` before
    the per-unit shift.
    """
    eta = (Xdot @ np.asarray(beta, dtype=float)).reshape(-1, K)
    eta = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    d_plus = np.repeat(e.sum(axis=1), K)
    return e.ravel() / d_plus


def kf_score(Xdot: np.ndarray, y: np.ndarray, p: np.ndarray, lam_dot: np.ndarray) -> np.ndarray:
    """``G' lam_dot`` with ``G = Xdot # (y - p)`` (row-wise scaling)."""
    G = Xdot * (np.asarray(y, dtype=float) - p)[:, None]
    return G.T @ np.asarray(lam_dot, dtype=float)


def _unit_mean_rows(Xdot: np.ndarray, p: np.ndarray, K: int) -> np.ndarray:
    T, H = Xdot.shape
    X3 = Xdot.reshape(T // K, K, H)
    return np.einsum("ik,ikh->ih", p.reshape(-1, K), X3)


def kf_delta(Xdot: np.ndarray, p: np.ndarray, K: int) -> np.ndarray:
    """``T x H`` derivative ``dp/dbeta``: row ``(i,k)`` is ``p_ik (xdot_ik - sum_l p_il xdot_il)``."""
    mean = np.repeat(_unit_mean_rows(Xdot, p, K), K, axis=0)
    return p[:, None] * (Xdot - mean)


def kf_hessian(Xdot: np.ndarray, p: np.ndarray, pi_dot: np.ndarray, K: int) -> np.ndarray:
    """``A = -Xdot' (pi_dot # Delta)``, the weighted log-likelihood Hessian."""
    delta = kf_delta(Xdot, p, K)
    return -(Xdot.T @ (np.asarray(pi_dot, dtype=float)[:, None] * delta))


def kf_outcome_covariance(p: np.ndarray, K: int) -> np.ndarray:
    """Per-unit ``K x K`` blocks ``diag(p_i) - p_i p_i'`` as an ``N x K x K`` array."""
    Pm = p.reshape(-1, K)
    S = -Pm[:, :, None] * Pm[:, None, :]
    S[:, np.arange(K), np.arange(K)] += Pm
    return S


@dataclass(frozen=True, eq=False)
class KroneckerWorkspace:
    """Inputs of the stacked computation; stacked matrices are built per block."""

    X: np.ndarray
    pi: np.ndarray
    K: int
    block_units: int = DEFAULT_BLOCK_UNITS

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def H(self) -> int:
        return self.X.shape[1] * (self.K - 1)

    def blocks(self):
        step = max(1, int(self.block_units))
        for start in range(0, self.N, step):
            yield slice(start, min(start + step, self.N))


def _gamma_matrix(domains, N: int) -> np.ndarray:
    if isinstance(domains, np.ndarray):
        return domains.astype(float).reshape(N, -1)
    return np.column_stack([d.gamma if isinstance(d, DomainSpec) else np.asarray(d, float) for d in domains])


def kf_totals(ws: KroneckerWorkspace, beta: Coefficients | np.ndarray, domains) -> np.ndarray:
    """``Gamma' p_hat`` reshaped to ``D x K``."""
    free = beta.free if isinstance(beta, Coefficients) else np.asarray(beta)
    b = to_covariate_major(free)
    G = _gamma_matrix(domains, ws.N)
    out = np.zeros(G.shape[1] * ws.K)
    for sl in ws.blocks():
        Xdot = stacked_design(ws.X[sl], ws.K)
        p = kf_probabilities(Xdot, b, ws.K)
        out += domain_selector(G[sl], ws.K).T @ p
    return out.reshape(-1, ws.K)


def _information_inverse(A: np.ndarray, rank_rtol: float) -> np.ndarray:
    """``A^{-1}``; a truncated pseudo-inverse when ``-A`` is numerically flat."""
    evals = np.linalg.eigvalsh(-A)
    if evals[0] > rank_rtol * max(evals[-1], 0.0):
        return np.linalg.inv(A)
    return np.linalg.pinv(A, rcond=rank_rtol, hermitian=True)


def kf_gmse(
    ws: KroneckerWorkspace,
    beta: Coefficients | np.ndarray,
    domains,
    full: bool = False,
    rank_rtol: float = 1e-10,
):
    """``D x K`` linearised GMSE from ``diag(Gamma' Delta U Sigma U' Delta' Gamma)``.

    With ``full=True`` the whole ``(D K) x (D K)`` matrix is returned instead
    of its reshaped diagonal.
    """
    free = beta.free if isinstance(beta, Coefficients) else np.asarray(beta)
    b = to_covariate_major(free)
    K, H = ws.K, ws.H
    G = _gamma_matrix(domains, ws.N)
    DK = G.shape[1] * K
    A = np.zeros((H, H))
    meat = np.zeros((H, H))
    W = np.zeros((DK, H))
    for sl in ws.blocks():
        Xdot = stacked_design(ws.X[sl], K)
        p = kf_probabilities(Xdot, b, K)
        pi_dot = np.repeat(ws.pi[sl], K)
        delta = kf_delta(Xdot, p, K)
        A -= Xdot.T @ (pi_dot[:, None] * delta)
        S = kf_outcome_covariance(p, K)
        sx = np.einsum("ikl,ilh->ikh", S, Xdot.reshape(-1, K, H)).reshape(-1, H)
        meat += Xdot.T @ (pi_dot[:, None] * sx)
        W += domain_selector(G[sl], K).T @ delta
    # U' = -A^{-1} Xdot' enters twice; signs cancel in the sandwich
    Ainv = _information_inverse(A, rank_rtol)
    middle = Ainv @ meat @ Ainv
    middle = 0.5 * (middle + middle.T)
    if full:
        return W @ middle @ W.T
    return np.einsum("rh,hm,rm->r", W, middle, W).reshape(-1, K)
