"""Quick numerical self-tests behind ``gmse check``."""

from __future__ import annotations

import numpy as np

from .kronecker import KroneckerWorkspace, kf_gmse
from .linear import build_plugin_cache, f_matrix_row, gmse_lin_many
from .multinomial import fit, hessian, log_likelihood, probabilities, score


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Jacobian of ``f`` at ``x`` by central differences (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_instance(rng: np.random.Generator, N: int, K: int, J: int, pi: float = 0.3):
    X = np.column_stack([np.ones(N), rng.normal(size=(N, J - 1))])
    beta = 0.5 * rng.normal(size=(K - 1, J))
    P = probabilities(X, beta)
    labels = np.array([rng.choice(K, p=p) for p in P])
    Y = np.eye(K)[labels]
    lam = (rng.random(N) < pi).astype(float)
    lam[:K] = 1.0
    Y[:K] = np.eye(K)  # every category present in the sample
    return X, Y, lam, np.full(N, pi), beta


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    out = []
    X, Y, lam, pi, beta = random_instance(rng, 20, 3, 3, pi=1.0)
    b = beta.ravel()
    shape = beta.shape

    fd = central_difference(lambda v: log_likelihood(X, Y, lam, v.reshape(shape)), b)
    r = _rel(score(X, Y, lam, beta), fd)
    out.append(("score vs finite-difference log-likelihood", r <= 1e-5, f"rel {r:.2e}"))

    fd = central_difference(lambda v: score(X, Y, lam, v.reshape(shape)), b)
    r = _rel(hessian(X, lam, beta), fd)
    out.append(("hessian vs finite-difference score", r <= 1e-5, f"rel {r:.2e}"))

    x = X[0]
    fd = central_difference(lambda v: probabilities(x[None], v.reshape(shape))[0], b)
    r = _rel(f_matrix_row(x, probabilities(x[None], beta)[0]), fd)
    out.append(("F block vs finite-difference probabilities", r <= 1e-6, f"rel {r:.2e}"))

    X, Y, lam, pi, beta = random_instance(rng, 600, 4, 4)
    m = fit(X, Y, lam)
    n = lam.sum()
    out.append(("score at MLE", m.final_score_norm <= 1e-8 * n, f"{m.final_score_norm:.2e} <= {1e-8 * n:.2e}"))

    G = (rng.random((600, 3)) < 0.5).astype(float)
    cache = build_plugin_cache(m, X, pi)
    std = gmse_lin_many(cache, G)
    kf = kf_gmse(KroneckerWorkspace(X, pi, 4), m.coefficients, G)
    r = _rel(kf, std)
    out.append(("Kronecker vs standard GMSE", r <= 1e-8, f"rel {r:.2e}"))

    blocks = [kf_gmse(KroneckerWorkspace(X, pi, 4, bs), m.coefficients, G) for bs in (600, 300, 173)]
    r = max(_rel(v, blocks[0]) for v in blocks[1:])
    out.append(("block-size invariance", r <= 1e-10, f"rel {r:.2e}"))
    return out
