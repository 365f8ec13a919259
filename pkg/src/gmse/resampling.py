"""Bootstrap and Monte-Carlo GMSE estimators.

Both refit the multinomial model once per replicate. Replicate ``r`` draws its
random numbers from ``SeedSequence(seed, spawn_key=(stream, r, ...))`` so
results do not depend on execution order or worker count.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .multinomial import Coefficients, ConvergenceWarning, SeparationError, fit, probabilities
from .register import DomainSpec

__all__ = [
    "ResamplingError",
    "ResamplingPlan",
    "BootstrapResult",
    "MCResult",
    "replicate_rng",
    "bootstrap_gmse",
    "mc_oracle",
    "MAX_DROP_FRACTION",
]

log = logging.getLogger(__name__)

MAX_DROP_FRACTION = 0.05

_BOOT, _MC_DESIGN, _MC_MODEL = 1, 2, 3


class ResamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResamplingPlan:
    B: int = 1000
    G: int = 100
    M: int = 100
    seed: int = 0
    workers: int = 1
    centre: str = "estimate"

    def __post_init__(self):
        if min(self.B, self.G, self.M) < 1:
            raise ValueError("B, G and M must be >= 1")
        if self.centre not in ("estimate", "mean"):
            raise ValueError("centre must be 'estimate' or 'mean'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def replicate_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _gammas(domains, N: int) -> np.ndarray:
    if isinstance(domains, np.ndarray):
        return domains.astype(float).reshape(N, -1)
    return np.column_stack([d.gamma if isinstance(d, DomainSpec) else np.asarray(d, float) for d in domains])


def _refit(Xs, Ys, weights, fit_options, beta0):
    """Coefficients of one replicate fit, or ``None`` when it must be dropped."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            m = fit(Xs, Ys, weights, beta0=beta0, predict=False, **fit_options)
        except SeparationError:
            return None
    return m.coefficients if m.converged else None


def _run(fn, indices, workers):
    if workers == 1:
        return [fn(i) for i in indices]
    return Parallel(n_jobs=workers)(delayed(fn)(i) for i in indices)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    gmse: np.ndarray
    cv: np.ndarray
    theta_hat: np.ndarray
    replicates: np.ndarray
    dropped: int

    @property
    def B_used(self) -> int:
        return len(self.replicates)


def _boot_replicate(b, seed, X, Xs, Ys, G, fit_options, beta0):
    rng = replicate_rng(seed, _BOOT, b)
    n = len(Xs)
    counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
    coef = _refit(Xs, Ys, counts, fit_options, beta0)
    if coef is None:
        return None
    return G.T @ probabilities(X, coef)


def bootstrap_gmse(
    X: np.ndarray,
    Y: np.ndarray,
    lam: np.ndarray,
    domains,
    plan: ResamplingPlan,
    *,
    theta_hat: np.ndarray | None = None,
    beta0: Coefficients | None = None,
    fit_options: dict | None = None,
    max_drop: float = MAX_DROP_FRACTION,
) -> BootstrapResult:
    """Non-parametric bootstrap of the sampled units.

    Each replicate resamples ``n`` sampled units with replacement, refits and
    recomputes every domain total over all ``N`` units. The GMSE is the mean
    squared deviation from the original estimate (or from the replicate mean
    when ``plan.centre == 'mean'``). Returned arrays are ``D x K``.
    """
    fit_options = dict(fit_options or {})
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    G = _gammas(domains, len(X))
    idx = np.flatnonzero(lam > 0)
    Xs, Ys = X[idx], Y[idx]
    if theta_hat is None or beta0 is None:
        original = fit(Xs, Ys, lam[idx], predict=False, **fit_options)
        beta0 = original.coefficients if beta0 is None else beta0
        if theta_hat is None:
            theta_hat = G.T @ probabilities(X, original.coefficients)
    theta_hat = np.asarray(theta_hat, dtype=float)

    out = _run(
        lambda b: _boot_replicate(b, plan.seed, X, Xs, Ys, G, fit_options, beta0),
        range(plan.B),
        plan.workers,
    )
    kept = [t for t in out if t is not None]
    dropped = plan.B - len(kept)
    if dropped:
        log.warning("bootstrap: dropped %d of %d replicates", dropped, plan.B)
    if dropped > max_drop * plan.B:
        raise ResamplingError(f"bootstrap dropped {dropped} of {plan.B} replicates (> {max_drop:.0%})")
    reps = np.stack(kept)
    centre = theta_hat if plan.centre == "estimate" else reps.mean(axis=0)
    gmse = np.mean((reps - centre) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cvs = np.where(theta_hat > 0, np.sqrt(gmse) / theta_hat, np.nan)
    return BootstrapResult(gmse, cvs, theta_hat, reps, dropped)


@dataclass(frozen=True, eq=False)
class MCResult:
    gmse: np.ndarray
    cv: np.ndarray
    expected: np.ndarray
    per_design: np.ndarray
    dropped: int


def _draw_categories(rng: np.random.Generator, P: np.ndarray) -> np.ndarray:
    """One multinomial(1, p_i) draw per row, as one-hot rows."""
    u = rng.random(len(P))
    cum = np.cumsum(P, axis=1)
    labels = np.minimum((u[:, None] > cum).sum(axis=1), P.shape[1] - 1)
    Y = np.zeros_like(P)
    Y[np.arange(len(P)), labels] = 1.0
    return Y


def _mc_design(g, plan, X, p_true, pi, G, expected, fit_options, beta0):
    rng = replicate_rng(plan.seed, _MC_DESIGN, g)
    idx = np.flatnonzero(rng.random(len(X)) < pi)
    Xs, Ps = X[idx], p_true[idx]
    ones = np.ones(len(idx))
    errs = []
    dropped = 0
    for m in range(plan.M):
        Ys = _draw_categories(replicate_rng(plan.seed, _MC_MODEL, g, m), Ps)
        coef = _refit(Xs, Ys, ones, fit_options, beta0) if len(idx) else None
        if coef is None:
            dropped += 1
            continue
        errs.append((G.T @ probabilities(X, coef) - expected) ** 2)
    if not errs:
        return None, dropped
    return np.mean(errs, axis=0), dropped


def mc_oracle(
    X: np.ndarray,
    p_true: np.ndarray,
    pi: np.ndarray,
    domains,
    plan: ResamplingPlan,
    *,
    beta0: Coefficients | None = None,
    fit_options: dict | None = None,
    max_drop: float = MAX_DROP_FRACTION,
) -> MCResult:
    """Nested Monte-Carlo benchmark of the GMSE (simulation truth required).

    ``G`` Bernoulli(pi) sample draws, each with ``M`` outcome draws from the
    true probabilities; every replicate is refitted and its totals compared
    with the expected totals ``Gamma' p_true``. Returned arrays are ``D x K``.
    """
    fit_options = dict(fit_options or {})
    X = np.asarray(X, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (len(X),))
    G = _gammas(domains, len(X))
    expected = G.T @ p_true
    out = _run(
        lambda g: _mc_design(g, plan, X, p_true, pi, G, expected, fit_options, beta0),
        range(plan.G),
        plan.workers,
    )
    dropped = sum(d for _, d in out)
    total = plan.G * plan.M
    if dropped:
        log.warning("mc_oracle: dropped %d of %d replicates", dropped, total)
    if dropped > max_drop * total:
        raise ResamplingError(f"MC dropped {dropped} of {total} replicates (> {max_drop:.0%})")
    per_design = np.stack([v for v, _ in out if v is not None])
    gmse = per_design.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cvs = np.where(expected > 0, np.sqrt(gmse) / expected, np.nan)
    return MCResult(gmse, cvs, expected, per_design, dropped)
