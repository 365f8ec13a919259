"""Linearised GMSE of mass-imputed totals.

For domain membership ``gamma`` and category ``k`` the estimator is

    GMSE_k = v_k' M v_k,    v_k = sum_i gamma_i dp_ik/dbeta,

with ``M = Abar^{-1} (sum_i pi_i Xdot_i Sigma_i Xdot_i') Abar^{-1}``. ``Abar`` is
the log-likelihood Hessian with sample indicators replaced by inclusion
probabilities and every population quantity is evaluated at the fitted
probabilities. ``M`` does not depend on ``gamma``, so one :class:`PluginCache`
serves any number of domain queries.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .multinomial import CHUNK_ROWS, FittedModel, hessian_from_probabilities
from .register import DomainSpec

__all__ = [
    "CVUndefinedError",
    "NegativeGMSEError",
    "PluginCache",
    "ReportRow",
    "GmseReport",
    "multinomial_covariance",
    "f_matrix_row",
    "InformationInverse",
    "invert_information",
    "build_plugin_cache",
    "gradient_sums",
    "gmse_lin",
    "gmse_lin_many",
    "gmse_draw_variant",
    "cv",
    "cumulated_gmse",
    "build_report",
    "report_from_arrays",
]

log = logging.getLogger(__name__)

CLAMP_RTOL = 1e-9


class CVUndefinedError(ZeroDivisionError):
    def __init__(self):
        super().__init__("CV undefined on empty/null total")


class NegativeGMSEError(ArithmeticError):
    pass


def multinomial_covariance(P: np.ndarray) -> np.ndarray:
    """Per-unit covariance ``diag(p) - p p'`` over the non-baseline categories."""
    Pf = P[:, :-1]
    S = -Pf[:, :, None] * Pf[:, None, :]
    idx = np.arange(Pf.shape[1])
    S[:, idx, idx] += Pf
    return S


def f_matrix_row(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``K x H`` derivatives of unit probabilities w.r.t. the free coefficients.

    Entry ``(k, l*J + j)`` is ``x_j p_k (delta_kl - p_l)``.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    K = len(p)
    D = -np.outer(p, p[:-1])
    D[np.arange(K - 1), np.arange(K - 1)] += p[:-1]
    return (D[:, :, None] * x[None, None, :]).reshape(K, -1)


@dataclass(frozen=True, eq=False)
class PluginCache:
    """Domain-independent pieces of the linearised GMSE.

    ``middle`` is ``M``; ``weighted_x`` holds ``p_ik x_i`` for the free
    categories (``N x H``) so a domain query is two matrix products.
    """

    X: np.ndarray
    P: np.ndarray
    pi: np.ndarray
    abar: np.ndarray
    meat: np.ndarray
    middle: np.ndarray
    weighted_x: np.ndarray
    middle_norm: float
    ridge_used: float = 0.0
    pseudo_inverse: bool = False
    diagnostics: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return self.P.shape[1]

    @property
    def J(self) -> int:
        return self.X.shape[1]

    @property
    def H(self) -> int:
        return (self.K - 1) * self.J

    @property
    def fallback(self) -> bool:
        return self.ridge_used > 0 or self.pseudo_inverse

RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class InformationInverse:
    """Solver for ``(-Abar) Z = B`` plus the fallback that was needed."""

    solve: Callable[[np.ndarray], np.ndarray]
    ridge_used: float = 0.0
    pseudo_inverse: bool = False
    truncated: int = 0
    notes: tuple[str, ...] = ()


def invert_information(neg: np.ndarray, *, ridge: float = 1e-8, rank_rtol: float = RANK_RTOL) -> InformationInverse:
    """Factorise the information matrix ``-Abar``.

    Cholesky when it is positive definite and well conditioned; a ridge retry
    when it is merely indefinite by rounding; otherwise a spectral
    pseudo-inverse dropping eigenvalues below ``rank_rtol * max``.
    """
    H = neg.shape[0]
    if H == 0:
        return InformationInverse(lambda B: B)
    evals, evecs = np.linalg.eigh(neg)
    top = max(float(evals[-1]), 0.0)
    cut = rank_rtol * top
    if evals[0] > cut:
        try:
            fac = linalg.cho_factor(neg, check_finite=False)
            return InformationInverse(lambda B: linalg.cho_solve(fac, B))
        except linalg.LinAlgError:
            pass
    flat = int(np.count_nonzero(evals <= cut))
    if flat == 0 and ridge > 0:
        try:
            fac = linalg.cho_factor(neg + ridge * np.eye(H), check_finite=False)
            note = f"-Abar not positive definite; ridge {ridge:g} applied"
            return InformationInverse(lambda B: linalg.cho_solve(fac, B), ridge_used=ridge, notes=(note,))
        except linalg.LinAlgError:
            pass
    keep = evals > cut
    V = evecs[:, keep]
    inv_vals = 1.0 / evals[keep]
    note = f"-Abar numerically singular; pseudo-inverse drops {H - V.shape[1]} of {H} directions"
    return InformationInverse(
        lambda B: V @ (inv_vals[:, None] * (V.T @ B)), pseudo_inverse=True, truncated=H - V.shape[1], notes=(note,)
    )


def _meat(X: np.ndarray, pi: np.ndarray, P: np.ndarray, covariance: Callable) -> np.ndarray:
    N, J = X.shape
    Km1 = P.shape[1] - 1
    B = np.zeros((Km1, J, Km1, J))
    for start in range(0, N, CHUNK_ROWS):
        sl = slice(start, start + CHUNK_ROWS)
        Xc, wc = X[sl], pi[sl]
        S = covariance(P[sl]) * wc[:, None, None]
        for k in range(Km1):
            for l in range(k, Km1):
                blk = Xc.T @ (S[:, k, l][:, None] * Xc)
                B[k, :, l, :] += blk
                if l != k:
                    B[l, :, k, :] += blk.T
    B = B.reshape(Km1 * J, Km1 * J)
    return 0.5 * (B + B.T)


def build_plugin_cache(
    model: FittedModel,
    X: np.ndarray,
    pi: np.ndarray,
    *,
    ridge: float = 1e-8,
    covariance: Callable[[np.ndarray], np.ndarray] = multinomial_covariance,
    allow_nonconverged: bool = False,
    rank_rtol: float = RANK_RTOL,
) -> PluginCache:
    """Assemble ``Abar``, the middle matrix and per-unit building blocks.

    ``covariance`` maps a chunk of probability rows to per-unit
    ``(K-1) x (K-1)`` outcome covariances; the default is the independent
    multinomial one. Directions in which ``-Abar`` is numerically flat
    (eigenvalue below ``rank_rtol`` times the largest, as happens for cells
    whose fitted probabilities underflow) are truncated and flagged.
    """
    if not model.converged and not allow_nonconverged:
        raise ValueError("model did not converge; pass allow_nonconverged=True to override")
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    P = np.asarray(model.fitted_probabilities)
    if P.shape[0] != X.shape[0]:
        raise ValueError("model probabilities and design matrix cover different units")
    N, J = X.shape
    K = P.shape[1]
    H = (K - 1) * J

    abar = hessian_from_probabilities(X, pi, P)
    meat = _meat(X, pi, P, covariance)
    inv = invert_information(-abar, ridge=ridge, rank_rtol=rank_rtol)
    for msg in inv.notes:
        log.warning(msg)
    solve = inv.solve
    left = solve(meat)
    middle = solve(left.T)
    middle = 0.5 * (middle + middle.T)
    weighted_x = (P[:, :-1, None] * X[:, None, :]).reshape(N, H)
    norm = float(np.max(np.abs(np.linalg.eigvalsh(middle)))) if H else 0.0
    for arr in (abar, meat, middle, weighted_x):
        arr.setflags(write=False)
    return PluginCache(X, P, pi, abar, meat, middle, weighted_x, norm, inv.ridge_used, inv.pseudo_inverse, inv.notes)


def _gammas(domains) -> np.ndarray:
    if isinstance(domains, DomainSpec):
        return domains.gamma[:, None]
    if isinstance(domains, np.ndarray):
        return domains.astype(float).reshape(len(domains), -1)
    return np.column_stack([d.gamma if isinstance(d, DomainSpec) else np.asarray(d, float) for d in domains])


def gradient_sums(cache: PluginCache, domains) -> np.ndarray:
    """``D x K x H`` array of ``v_k`` vectors, one block per domain."""
    G = _gammas(domains)
    N, D = G.shape
    K, J = cache.K, cache.J
    Q = (G[:, :, None] * cache.P[:, None, :]).reshape(N, D * K)
    cross = (Q.T @ cache.weighted_x).reshape(D, K, K - 1, J)
    own = (Q.T @ cache.X).reshape(D, K, J)
    out = -cross
    idx = np.arange(K - 1)
    out[:, idx, idx, :] += own[:, :-1, :]
    return out.reshape(D, K, (K - 1) * J)


def _quadratic(cache: PluginCache, V: np.ndarray) -> np.ndarray:
    vals = np.einsum("dkh,hm,dkm->dk", V, cache.middle, V)
    neg = vals < 0
    if np.any(neg):
        scale = np.einsum("dkh,dkh->dk", V, V) * cache.middle_norm
        tiny = neg & (vals >= -CLAMP_RTOL * scale)
        if np.any(neg & ~tiny):
            raise NegativeGMSEError(f"negative GMSE beyond rounding: {vals[neg & ~tiny].min():.3g}")
        if np.any(tiny):
            log.warning("clamped %d slightly negative GMSE values to 0", int(tiny.sum()))
        vals = np.where(tiny, 0.0, vals)
    return vals


def gmse_lin(cache: PluginCache, domain: DomainSpec | np.ndarray) -> np.ndarray:
    """Linearised GMSE for each category of one domain (length ``K``)."""
    return gmse_lin_many(cache, [domain])[0]


def gmse_lin_many(cache: PluginCache, domains) -> np.ndarray:
    """``D x K`` linearised GMSE values for several domains at once."""
    return _quadratic(cache, gradient_sums(cache, domains))


def gmse_draw_variant(cache: PluginCache, domain: DomainSpec | np.ndarray, P: np.ndarray | None = None) -> np.ndarray:
    """GMSE when imputed outcomes are multinomial draws instead of probabilities."""
    P = cache.P if P is None else np.asarray(P, dtype=float)
    g = _gammas([domain])[:, 0]
    return gmse_lin(cache, domain) + g @ (P * (1.0 - P))


def cv(theta: float, gmse: float) -> float:
    """Coefficient of variation ``sqrt(gmse) / theta`` as a fraction."""
    if theta <= 0:
        raise CVUndefinedError()
    return math.sqrt(gmse) / theta


def cumulated_gmse(per_category: Sequence[float] | np.ndarray) -> float:
    return math.fsum(float(v) for v in np.asarray(per_category).ravel())


# --- reporting ---------------------------------------------------------------

OPTIONAL_COLUMNS = ("gmse_draw", "gmse_boot", "cv_boot", "gmse_mc", "cv_mc")


@dataclass
class ReportRow:
    domain: str
    category: str
    theta_hat: float
    n_kd: int
    gmse_lin: float
    cv: float
    gmse_draw: float | None = None
    gmse_boot: float | None = None
    cv_boot: float | None = None
    gmse_mc: float | None = None
    cv_mc: float | None = None
    flag: str = ""


@dataclass
class GmseReport:
    rows: list[ReportRow]
    cumulated: dict[str, float] = field(default_factory=dict)

    def lookup(self, domain: str) -> list[ReportRow]:
        return [r for r in self.rows if r.domain == domain]

    def column(self, name: str, domain: str | None = None) -> np.ndarray:
        rows = self.rows if domain is None else self.lookup(domain)
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in rows], dtype=float)

    def attach(self, name: str, domain: str, values: Sequence[float]) -> None:
        for r, v in zip(self.lookup(domain), values):
            setattr(r, name, float(v))

    def to_csv(self, path: str | Path, percent: bool = False) -> None:
        extras = [c for c in OPTIONAL_COLUMNS if any(getattr(r, c) is not None for r in self.rows)]
        cols = ["domain", "category", "theta_hat", "n_kd", "gmse_lin", "cv", *extras, "flag"]

        def fmt(name, v):
            if v is None:
                return ""
            if isinstance(v, str):
                return v
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            if math.isnan(v):
                return ""
            if percent and name.startswith("cv"):
                return f"{100.0 * v:.4f}%"
            return repr(float(v))

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([fmt(c, getattr(r, c)) for c in cols])

    def plot_data_csv(self, path: str | Path) -> None:
        """CV against sampled category count, one row per (domain, category)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain", "category", "n_kd", "theta_hat", "cv", "log10_cv"])
            for r in self.rows:
                ok = r.cv is not None and not math.isnan(r.cv) and r.cv > 0
                w.writerow(
                    [r.domain, r.category, r.n_kd, repr(float(r.theta_hat)),
                     repr(float(r.cv)) if ok else "", repr(math.log10(r.cv)) if ok else ""]
                )


def report_from_arrays(
    domains: Sequence[DomainSpec],
    theta: np.ndarray,
    n_kd: np.ndarray,
    gmse: np.ndarray,
    category_labels: Sequence[str],
    draw_extra: np.ndarray | None = None,
) -> GmseReport:
    """Assemble a report from ``D x K`` arrays (any engine)."""
    rows: list[ReportRow] = []
    cum: dict[str, float] = {}
    for d, dom in enumerate(domains):
        for k, label in enumerate(category_labels):
            flag = ""
            if theta[d, k] > 0:
                c = cv(theta[d, k], gmse[d, k])
                if n_kd[d, k] == 0:
                    flag = "no_sampled_support"
            else:
                c = float("nan")
                flag = "cv_undefined"
            rows.append(
                ReportRow(
                    dom.name, label, float(theta[d, k]), int(n_kd[d, k]), float(gmse[d, k]), c,
                    gmse_draw=None if draw_extra is None else float(gmse[d, k] + draw_extra[d, k]),
                    flag=flag,
                )
            )
        cum[dom.name] = cumulated_gmse(gmse[d])
    return GmseReport(rows, cum)


def build_report(
    cache: PluginCache,
    domains: Sequence[DomainSpec],
    sampled_outcomes: np.ndarray,
    category_labels: Sequence[str] | None = None,
    draw: bool = False,
) -> GmseReport:
    """Totals, sampled counts, GMSE and CV for every (domain, category).

    ``sampled_outcomes`` is the one-hot outcome matrix with zero rows for
    unsampled units.
    """
    K = cache.K
    labels = list(category_labels) if category_labels else [str(k) for k in range(1, K + 1)]
    G = _gammas(domains)
    theta = G.T @ cache.P
    nkd = np.rint(G.T @ np.asarray(sampled_outcomes, dtype=float)).astype(int)
    g = gmse_lin_many(cache, domains)
    extra = G.T @ (cache.P * (1.0 - cache.P)) if draw else None
    return report_from_arrays(domains, theta, nkd, g, labels, extra)
