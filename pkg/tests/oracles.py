"""Independent reference implementations used as test oracles.

Everything here is written as plain per-unit loops straight from the model
formulas and shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def naive_probability_row(x, beta_full):
    """Category probabilities for one unit; ``beta_full`` is ``K x J`` with a zero last row."""
    K = len(beta_full)
    etas = [sum(x[j] * beta_full[k][j] for j in range(len(x))) for k in range(K)]
    top = max(etas)
    ex = [math.exp(e - top) for e in etas]
    s = sum(ex)
    return [e / s for e in ex]


def expand(free):
    free = np.asarray(free, dtype=float)
    return np.vstack([free, np.zeros((1, free.shape[1]))])


def naive_loglik(X, labels, lam, free):
    """``sum_i lam_i log p_{i, y_i}`` with ``labels`` in ``0..K-1``."""
    B = expand(free)
    total = 0.0
    for i in range(len(X)):
        if lam[i] == 0:
            continue
        p = naive_probability_row(X[i], B)
        total += lam[i] * math.log(p[labels[i]])
    return total


def naive_derivative_block(x, p):
    """``K x H`` matrix of ``dp_k / dbeta_(l,j)`` with ``h = l J + j``."""
    K, J = len(p), len(x)
    F = np.zeros((K, (K - 1) * J))
    for k in range(K):
        for l in range(K - 1):
            for j in range(J):
                d = (1.0 if k == l else 0.0) - p[l]
                F[k, l * J + j] = x[j] * p[k] * d
    return F


def naive_abar(X, w, P):
    """``sum_i w_i dp_i/dbeta`` restricted to free categories, i.e. the Hessian."""
    K = P.shape[1]
    J = X.shape[1]
    H = (K - 1) * J
    A = np.zeros((H, H))
    for i in range(len(X)):
        F = naive_derivative_block(X[i], P[i])
        for l in range(K - 1):
            for j in range(J):
                # d score_(l,j) / d beta = -sum_i w_i x_ij dp_il/dbeta
                A[l * J + j] -= w[i] * X[i, j] * F[l]
    return A


def naive_middle(X, pi, P):
    """Brute-force ``sum_i pi_i U_i Sigma_i U_i'`` with ``U_i = Abar^{-1} Xdot_i``."""
    K = P.shape[1]
    J = X.shape[1]
    H = (K - 1) * J
    Ainv = np.linalg.inv(naive_abar(X, pi, P))
    M = np.zeros((H, H))
    for i in range(len(X)):
        Xdot = np.zeros((H, K - 1))
        for l in range(K - 1):
            Xdot[l * J : (l + 1) * J, l] = X[i]
        S = np.zeros((K - 1, K - 1))
        for a in range(K - 1):
            for b in range(K - 1):
                S[a, b] = (P[i, a] if a == b else 0.0) - P[i, a] * P[i, b]
        U = Ainv @ Xdot
        for a in range(H):
            for b in range(H):
                M[a, b] += pi[i] * sum(U[a, r] * S[r, s] * U[b, s] for r in range(K - 1) for s in range(K - 1))
    return M


def naive_gmse(X, pi, P, gamma):
    """``v_k' M v_k`` for every category, from the brute-force pieces."""
    M = naive_middle(X, pi, P)
    K = P.shape[1]
    v = np.zeros((K, M.shape[0]))
    for i in range(len(X)):
        if gamma[i]:
            v += gamma[i] * naive_derivative_block(X[i], P[i])
    return np.array([v[k] @ M @ v[k] for k in range(K)])


def central_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.append((np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h))
    return np.stack(out, axis=-1)


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
