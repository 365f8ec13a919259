"""Baseline-category multinomial logit.

Category ``K`` is the baseline with its coefficient vector fixed at zero, so the
free parameter block is ``(K-1) x J``. Flattened parameter vectors use the
category-major order ``h = k * J + j`` (``k = 0..K-2``), giving ``H = (K-1) J``.

Unit weights ``w`` multiply each unit's contribution to the log-likelihood,
score and Hessian. Fitting uses the sample indicators (or bootstrap counts);
the plug-in Hessian of the accuracy estimator uses inclusion probabilities.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .register import DomainSpec

__all__ = [
    "SeparationError",
    "ConvergenceWarning",
    "Coefficients",
    "FittedModel",
    "one_hot",
    "linear_predictors",
    "probabilities",
    "log_likelihood",
    "score",
    "hessian",
    "fit",
    "predict_totals",
]

log = logging.getLogger(__name__)

CHUNK_ROWS = 65_536


class SeparationError(ValueError):
    """A category has no support among the units used for fitting."""

    def __init__(self, categories: Sequence[int]):
        self.categories = tuple(int(c) for c in categories)
        super().__init__(f"categories absent from the sample: {list(self.categories)}")


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Free coefficient block; row ``k`` holds category ``k+1``."""

    free: np.ndarray
    column_names: tuple[str, ...] = ()
    category_labels: tuple[str, ...] = ()

    def __post_init__(self):
        free = np.array(self.free, dtype=float, ndmin=2)
        if not np.all(np.isfinite(free)):
            raise ValueError("coefficients must be finite")
        free.setflags(write=False)
        object.__setattr__(self, "free", free)
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(free.shape[1]))
        labels = tuple(self.category_labels) or tuple(str(k) for k in range(1, free.shape[0] + 2))
        if len(names) != free.shape[1] or len(labels) != free.shape[0] + 1:
            raise ValueError("column_names / category_labels do not match the coefficient shape")
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "category_labels", labels)

    @property
    def K(self) -> int:
        return self.free.shape[0] + 1

    @property
    def J(self) -> int:
        return self.free.shape[1]

    @property
    def H(self) -> int:
        return self.free.size

    def expanded(self) -> np.ndarray:
        """``K x J`` block with the zero baseline row appended."""
        return np.vstack([self.free, np.zeros((1, self.J))])

    @property
    def vector(self) -> np.ndarray:
        return self.free.ravel()

    def to_csv(self, path: str | Path) -> None:
        full = self.expanded()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", *self.category_labels])
            for j, name in enumerate(self.column_names):
                w.writerow([name, *(repr(float(v)) for v in full[:, j])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Coefficients":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        labels = tuple(header[1:])
        names = tuple(r[0] for r in body)
        full = np.array([[float(v) for v in r[1:]] for r in body]).T
        if full.shape[0] != len(labels):
            raise ValueError(f"{path}: ragged coefficient table")
        if np.any(full[-1] != 0.0):
            raise ValueError(f"{path}: baseline column must be all zeros")
        return cls(full[:-1], names, labels)


def _as_free(beta) -> np.ndarray:
    if isinstance(beta, Coefficients):
        return beta.free
    return np.array(beta, dtype=float, ndmin=2)


def one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    """Rows for labels ``1..K``; label 0 gives an all-zero row."""
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((len(labels), K))
    idx = np.flatnonzero(labels > 0)
    Y[idx, labels[idx] - 1] = 1.0
    return Y


def linear_predictors(X: np.ndarray, beta) -> np.ndarray:
    B = _as_free(beta)
    X = np.asarray(X, dtype=float)
    if X.shape[1] != B.shape[1]:
        raise ValueError(f"X has {X.shape[1]} columns but beta has J={B.shape[1]}")
    return X @ B.T


def probabilities(X: np.ndarray, beta) -> np.ndarray:
    """``N x K`` category probabilities, baseline last.

    Linear predictors are shifted by the per-row maximum (baseline's 0
    included) before exponentiation.
    """
    eta = linear_predictors(X, beta)
    if not np.all(np.isfinite(eta)):
        i, k = np.argwhere(~np.isfinite(eta))[0]
        raise FloatingPointError(f"non-finite linear predictor for unit {i}, category {k + 1}")
    full = np.hstack([eta, np.zeros((eta.shape[0], 1))])
    full -= full.max(axis=1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=1, keepdims=True)
    return full


def _log_normaliser(eta: np.ndarray) -> np.ndarray:
    """``log(1 + sum_k exp(eta_k))`` per row, shifted by the row maximum (0 included)."""
    top = np.maximum(eta.max(axis=1), 0.0)
    return top + np.log(np.exp(-top) + np.exp(eta - top[:, None]).sum(axis=1))


def log_likelihood(X: np.ndarray, Y: np.ndarray, lam: np.ndarray, beta) -> float:
    lam = np.asarray(lam, dtype=float)
    keep = lam != 0
    eta = linear_predictors(np.asarray(X)[keep], beta)
    Ys = np.asarray(Y, dtype=float)[keep]
    per_unit = np.einsum("ik,ik->i", Ys[:, :-1], eta) - _log_normaliser(eta)
    return float(lam[keep] @ per_unit)


def score(X: np.ndarray, Y: np.ndarray, lam: np.ndarray, beta) -> np.ndarray:
    """Gradient of the log-likelihood, length ``H``."""
    P = probabilities(X, beta)
    R = (np.asarray(Y, dtype=float) - P)[:, :-1] * np.asarray(lam, dtype=float)[:, None]
    return (R.T @ np.asarray(X, dtype=float)).ravel()


def hessian_from_probabilities(X: np.ndarray, w: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Second-derivative matrix given the probability matrix ``P``.

    Block ``(k, k')`` is ``sum_i w_i x_i x_i' p_ik (p_ik' - delta_kk')``.
    Accumulated over fixed row chunks so results do not depend on ``N``'s
    memory layout.
    """
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    N, J = X.shape
    Km1 = P.shape[1] - 1
    H = Km1 * J
    A = np.zeros((H, H))
    for start in range(0, N, CHUNK_ROWS):
        sl = slice(start, start + CHUNK_ROWS)
        Xc, wc, Pc = X[sl], w[sl], P[sl, :Km1]
        Z = (Pc[:, :, None] * Xc[:, None, :]).reshape(len(Xc), H)
        A += Z.T @ (wc[:, None] * Z)
        for k in range(Km1):
            b = slice(k * J, (k + 1) * J)
            A[b, b] -= Xc.T @ ((wc * Pc[:, k])[:, None] * Xc)
    return 0.5 * (A + A.T)


def hessian(X: np.ndarray, w: np.ndarray, beta) -> np.ndarray:
    """``H x H`` Hessian of the weighted log-likelihood (negative semidefinite).

    ``w`` is either the realised sample indicator or the inclusion
    probabilities.
    """
    return hessian_from_probabilities(X, w, probabilities(X, beta))


@dataclass(frozen=True, eq=False)
class FittedModel:
    coefficients: Coefficients
    fitted_probabilities: np.ndarray
    iterations: int
    final_score_norm: float
    ridge_used: float
    converged: bool
    n_sampled: float

    @property
    def K(self) -> int:
        return self.coefficients.K

    @classmethod
    def from_coefficients(cls, X: np.ndarray, coefficients: Coefficients) -> "FittedModel":
        """Wrap given coefficients (e.g. a stored fit) as a model over ``X``."""
        P = probabilities(X, coefficients)
        P.setflags(write=False)
        return cls(coefficients, P, 0, float("nan"), 0.0, True, float("nan"))


def _initial_beta(Xs: np.ndarray, ws: np.ndarray, Ys: np.ndarray) -> np.ndarray:
    K = Ys.shape[1]
    B = np.zeros((K - 1, Xs.shape[1]))
    if np.all(Xs[:, 0] == 1.0):
        counts = ws @ Ys
        B[:, 0] = np.log(counts[:-1] / counts[-1])
    return B


FLAT_RTOL = 1e-10
MAX_STEP = 10.0


def _newton_directions(negH: np.ndarray, g: np.ndarray, ridge: float):
    """Candidate ascent directions, best first, as ``(step, regularisation)``.

    Cholesky of ``-H`` when it is comfortably positive definite; otherwise a
    least-squares step that ignores directions with curvature below
    ``FLAT_RTOL`` times the largest, then the ridged system ``-H + ridge I``.
    Near-separated samples produce such flat directions: their score
    components are negligible, and a full Newton move along them is huge
    enough to swamp the log-likelihood in rounding error.
    """
    try:
        fac = linalg.cho_factor(negH, check_finite=False)
        d = np.abs(np.diag(fac[0]))
        if d.min() ** 2 > FLAT_RTOL * d.max() ** 2:
            yield linalg.cho_solve(fac, g), 0.0
            return
    except linalg.LinAlgError:
        pass
    yield np.linalg.lstsq(negH, g, rcond=FLAT_RTOL)[0], np.finfo(float).eps
    if ridge > 0:
        try:
            reg = negH + ridge * np.eye(len(g))
            yield linalg.cho_solve(linalg.cho_factor(reg, check_finite=False), g), ridge
        except linalg.LinAlgError:
            pass


def fit(
    X: np.ndarray,
    Y: np.ndarray,
    lam: np.ndarray,
    *,
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge: float = 1e-8,
    beta0=None,
    column_names: Sequence[str] = (),
    category_labels: Sequence[str] = (),
    predict: bool = True,
) -> FittedModel:
    """Maximum-likelihood fit by Newton-Raphson with step halving.

    ``lam`` weights units (0/1 sample indicators, or bootstrap multiplicities).
    Converged when ``max|score| <= tol * n`` with ``n = sum(lam)``. Fitted
    probabilities are returned for every row of ``X``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    keep = lam > 0
    Xs, Ys, ws = X[keep], Y[keep], lam[keep]
    n = float(ws.sum())
    K = Y.shape[1]
    counts = ws @ Ys
    if np.any(counts <= 0):
        raise SeparationError(np.flatnonzero(counts <= 0) + 1)

    B = _initial_beta(Xs, ws, Ys) if beta0 is None else _as_free(beta0).copy()
    J = X.shape[1]

    def loglik(Bm: np.ndarray) -> float:
        eta = Xs @ Bm.T
        return float(ws @ (np.einsum("ik,ik->i", Ys[:, :-1], eta) - _log_normaliser(eta)))

    ll = loglik(B)
    ridge_used = 0.0
    converged = False
    it = 0
    gnorm = np.inf
    while True:
        P = probabilities(Xs, B)
        g = (((Ys - P)[:, :-1] * ws[:, None]).T @ Xs).ravel()
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol * n:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        negH = -hessian_from_probabilities(Xs, ws, P)
        accepted = False
        slack = 1e-12 * (1.0 + abs(ll))
        for step, used in _newton_directions(negH, g, ridge):
            # a near-flat likelihood can ask for enormous moves; cap them
            t = min(1.0, MAX_STEP / max(float(np.max(np.abs(step))), 1e-300))
            for _ in range(50):
                B_new = B + t * step.reshape(K - 1, J)
                ll_new = loglik(B_new)
                if np.isfinite(ll_new) and ll_new >= ll - slack:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            break  # no ascent possible; reported as nonconvergence
        if used:
            if not ridge_used:
                log.warning("singular Hessian at iteration %d; regularised Newton step used", it)
            ridge_used = max(ridge_used, used)
        B, ll = B_new, ll_new

    if not converged:
        warnings.warn(
            f"Newton-Raphson stopped after {it} iterations with max|score|={gnorm:.3g} > {tol * n:.3g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    coefs = Coefficients(B, tuple(column_names), tuple(category_labels))
    if predict:
        Pall = probabilities(X, coefs)
        Pall.setflags(write=False)
    else:
        Pall = np.empty((0, K))
    return FittedModel(coefs, Pall, it, gnorm, ridge_used, converged, n)


def predict_totals(model: FittedModel, domain: DomainSpec | np.ndarray) -> np.ndarray:
    """Plug-in totals ``sum_i gamma_i p_hat_ik`` for every category."""
    gamma = domain.gamma if isinstance(domain, DomainSpec) else np.asarray(domain, dtype=float)
    return gamma @ model.fitted_probabilities
