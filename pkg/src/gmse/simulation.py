"""Synthetic registers and the Lin / Boot / MC comparison study.

A :class:`SimulationScenario` fixes the register size, the sampling rate, the
independent covariate marginals and the true coefficients. Generated registers
expose outcomes only for sampled units; the full outcomes and true
probabilities live in a :class:`SealedTruth` which only the Monte-Carlo oracle
opens.
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .linear import build_plugin_cache, gmse_lin_many
from .multinomial import Coefficients, fit, probabilities
from .register import (
    Covariate,
    CovariateSchema,
    DomainSpec,
    Register,
    build_design_matrix,
    domain_partition,
    full_domain,
)
from .resampling import ResamplingPlan, bootstrap_gmse, mc_oracle

__all__ = [
    "CovariateMarginal",
    "SimulationScenario",
    "SealedTruth",
    "load_scenario",
    "packaged_scenarios",
    "generate_register",
    "study_domains",
    "StudyRow",
    "StudyReport",
    "run_comparison",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("lin", "boot", "mc")
_STREAM_REGISTER, _STREAM_PLAN = 0, 1


@dataclass(frozen=True)
class CovariateMarginal:
    covariate: Covariate
    marginal: tuple[float, ...]

    def __post_init__(self):
        m = np.asarray(self.marginal, dtype=float)
        if len(m) != len(self.covariate.levels):
            raise ValueError(f"{self.covariate.name}: {len(m)} shares for {len(self.covariate.levels)} levels")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError(f"{self.covariate.name}: marginal must be nonnegative and sum to 1")


@dataclass(frozen=True, eq=False)
class SimulationScenario:
    name: str
    N: int
    sampling_rate: float
    covariates: tuple[CovariateMarginal, ...]
    true_beta: Coefficients
    seed: int = 0
    S: int = 20
    plan: ResamplingPlan = field(default_factory=ResamplingPlan)
    internal_domains: tuple[str, ...] = ()
    external_domains: tuple[str, ...] = ()

    def __post_init__(self):
        if self.N < 1 or not 0 < self.sampling_rate <= 1:
            raise ValueError("need N >= 1 and sampling_rate in (0, 1]")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        cols = self.schema.n_columns
        if cols != self.true_beta.J:
            raise ValueError(f"design has {cols} columns but the coefficients have {self.true_beta.J}")

    @property
    def schema(self) -> CovariateSchema:
        return CovariateSchema(
            tuple(c.covariate for c in self.covariates),
            self.true_beta.K,
            self.true_beta.category_labels,
        )

    def with_size(self, N: int) -> "SimulationScenario":
        return replace(self, N=int(N))


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split("|")]


def load_scenario(path: str | Path) -> SimulationScenario:
    """Read a scenario ``.cfg`` file (see the packaged ``scenarios/`` files)."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    sc = cp["scenario"]
    coef_path = path.parent / sc["coefficients"]
    beta = Coefficients.from_csv(coef_path)
    covs = []
    for section in cp.sections():
        if not section.startswith("covariate:"):
            continue
        s = cp[section]
        name = section.split(":", 1)[1]
        levels = tuple(_split(s["levels"]))
        cov = Covariate(name, s.get("kind", "categorical"), levels, s.get("reference"), s.get("role", "predictor"))
        marg = np.array([float(v) for v in s["marginal"].split()])
        if s.getboolean("normalise", False):
            marg = marg / marg.sum()
        covs.append(CovariateMarginal(cov, tuple(marg)))
    rep = cp["replication"] if cp.has_section("replication") else {}
    seed = int(sc.get("seed", 0))
    plan = ResamplingPlan(
        B=int(rep.get("B", 1000)),
        G=int(rep.get("G", 100)),
        M=int(rep.get("M", 100)),
        seed=seed,
        centre=rep.get("centre", "estimate"),
    )

    def names(key):
        raw = sc.get(key, "").strip()
        return tuple(v.strip() for v in raw.split(",") if v.strip())

    return SimulationScenario(
        name=sc.get("name", path.stem),
        N=int(sc["N"]),
        sampling_rate=float(sc["sampling_rate"]),
        covariates=tuple(covs),
        true_beta=beta,
        seed=seed,
        S=int(rep.get("S", 20)),
        plan=plan,
        internal_domains=names("internal_domains"),
        external_domains=names("external_domains"),
    )


def packaged_scenarios() -> dict[str, Path]:
    root = resources.files("gmse") / "scenarios"
    return {p.name[:-4]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".cfg")}


def resolve_scenario(name_or_path: str | Path) -> SimulationScenario:
    """Load a packaged scenario by name, or any ``.cfg`` file by path."""
    known = packaged_scenarios()
    if str(name_or_path) in known:
        return load_scenario(known[str(name_or_path)])
    return load_scenario(name_or_path)


class SealedTruth:
    """Full outcomes and true probabilities of a generated register.

    Kept apart from the :class:`Register` so that estimators other than the
    Monte-Carlo oracle cannot see them by accident.
    """

    __slots__ = ("_labels", "_probabilities")

    def __init__(self, labels: np.ndarray, probabilities: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64)
        self._probabilities = np.asarray(probabilities, dtype=float)
        self._labels.setflags(write=False)
        self._probabilities.setflags(write=False)

    def __repr__(self) -> str:
        return f"SealedTruth(N={len(self._labels)})"

    def unseal(self) -> tuple[np.ndarray, np.ndarray]:
        """``(labels 1..K, N x K true probabilities)``."""
        return self._labels, self._probabilities

    def to_csv(self, path: str | Path, unit_ids: Sequence[str]) -> None:
        K = self._probabilities.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "y_true", *(f"p_{k}" for k in range(1, K + 1))])
            for uid, y, p in zip(unit_ids, self._labels, self._probabilities):
                w.writerow([uid, int(y), *(repr(float(v)) for v in p)])

    @classmethod
    def from_csv(cls, path: str | Path) -> tuple[list[str], "SealedTruth"]:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        body = [r for r in rows[1:] if r]
        ids = [r[0] for r in body]
        labels = np.array([int(r[1]) for r in body])
        P = np.array([[float(v) for v in r[2:]] for r in body])
        return ids, cls(labels, P)


def _draw_labels(rng: np.random.Generator, P: np.ndarray) -> np.ndarray:
    u = rng.random(len(P))
    idx = (u[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    return np.minimum(idx, P.shape[1] - 1) + 1


def generate_register(
    scenario: SimulationScenario, replicate: int = 0
) -> tuple[Register, SealedTruth]:
    """One synthetic register; ``replicate`` selects an independent seed stream."""
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(_STREAM_REGISTER, replicate)))
    N = scenario.N
    columns = {}
    for cm in scenario.covariates:
        levels = np.array(cm.covariate.levels)
        columns[cm.covariate.name] = levels[rng.choice(len(levels), size=N, p=np.asarray(cm.marginal))]
    width = len(str(N))
    unit_ids = np.array([f"u{i:0{width}d}" for i in range(1, N + 1)])
    sampled = rng.random(N) < scenario.sampling_rate
    if not sampled.any():
        sampled[rng.integers(N)] = True
    schema = scenario.schema
    # outcome/sample fields are placeholders until the labels are drawn
    tmp = Register(unit_ids, columns, np.ones(N, bool), np.full(N, scenario.sampling_rate), np.ones(N, int), schema.n_categories)
    design = build_design_matrix(tmp, schema)
    if design.column_names != scenario.true_beta.column_names:
        raise ValueError(
            f"coefficient rows {scenario.true_beta.column_names} do not match design columns {design.column_names}"
        )
    P = probabilities(design.X, scenario.true_beta)
    labels = _draw_labels(rng, P)
    register = Register(
        unit_ids, columns, sampled, np.full(N, scenario.sampling_rate),
        np.where(sampled, labels, 0), schema.n_categories,
    )
    return register, SealedTruth(labels, P)


def study_domains(register: Register, scenario: SimulationScenario, columns: Iterable[str] = ()) -> list[DomainSpec]:
    doms = [full_domain(register)]
    for col in columns:
        doms.extend(domain_partition(register, col, scenario.schema))
    return doms


@dataclass(frozen=True)
class StudyRow:
    replicate: int
    domain: str
    category: str
    estimator: str
    theta: float
    n_kd: int
    gmse: float
    cv: float


@dataclass
class StudyReport:
    scenario: str
    rows: list[StudyRow]
    dropped: dict[str, int] = field(default_factory=dict)

    def values(self, estimator: str, domain: str = "full", field_name: str = "cv") -> np.ndarray:
        """``S x K`` array of one estimator's values for one domain."""
        reps = sorted({r.replicate for r in self.rows})
        sel = [r for r in self.rows if r.estimator == estimator and r.domain == domain]
        K = len(sel) // len(reps) if reps else 0
        out = np.full((len(reps), K), np.nan)
        pos = {s: i for i, s in enumerate(reps)}
        counters = {s: 0 for s in reps}
        for r in sel:
            out[pos[r.replicate], counters[r.replicate]] = getattr(r, field_name)
            counters[r.replicate] += 1
        return out

    def summary(self) -> list[dict]:
        keys: dict[tuple, list[float]] = {}
        for r in self.rows:
            keys.setdefault((r.domain, r.category, r.estimator), []).append(r.cv)
        out = []
        for (dom, cat, est), vals in keys.items():
            v = np.asarray(vals, dtype=float)
            v = v[np.isfinite(v)]
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0]) if len(v) else [np.nan] * 5
            out.append(
                dict(domain=dom, category=cat, estimator=est, S=len(v), mean=float(v.mean()) if len(v) else np.nan,
                     min=q[0], q25=q[1], median=q[2], q75=q[3], max=q[4])
            )
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "domain", "category", "estimator", "theta", "n_kd", "gmse", "cv"])
            for r in self.rows:
                w.writerow([r.replicate, r.domain, r.category, r.estimator, repr(r.theta), r.n_kd, repr(r.gmse), repr(r.cv)])

    def summary_csv(self, path: str | Path) -> None:
        cols = ["domain", "category", "estimator", "S", "mean", "min", "q25", "median", "q75", "max"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.summary():
                w.writerow([row[c] if isinstance(row[c], (str, int)) else repr(float(row[c])) for c in cols])


def _cv(gmse: np.ndarray, theta: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(theta > 0, np.sqrt(gmse) / theta, np.nan)


def replicate_plan(scenario: SimulationScenario, s: int, workers: int = 1) -> ResamplingPlan:
    seed = int(np.random.SeedSequence(scenario.plan.seed, spawn_key=(_STREAM_PLAN, s)).generate_state(1, np.uint64)[0])
    return replace(scenario.plan, seed=seed, workers=workers)


def run_comparison(
    scenario: SimulationScenario,
    *,
    S: int | None = None,
    estimators: Sequence[str] = ESTIMATORS,
    domain_columns: Sequence[str] = (),
    workers: int = 1,
    fit_options: dict | None = None,
) -> StudyReport:
    """Run ``S`` independent registers through the requested estimators.

    Rows are tidy: one per (replicate, domain, category, estimator).
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    fit_options = dict(fit_options or {})
    S = scenario.S if S is None else int(S)
    labels = scenario.true_beta.category_labels
    rows: list[StudyRow] = []
    dropped = {"boot": 0, "mc": 0}
    for s in range(S):
        register, truth = generate_register(scenario, s)
        X = build_design_matrix(register, scenario.schema).X
        Y = register.outcome_matrix()
        lam = register.sampled.astype(float)
        model = fit(X, Y, lam, **fit_options)
        domains = study_domains(register, scenario, domain_columns)
        G = np.column_stack([d.gamma for d in domains])
        theta = G.T @ model.fitted_probabilities
        nkd = np.rint(G.T @ Y).astype(int)
        plan = replicate_plan(scenario, s, workers)
        results: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        if "lin" in estimators:
            cache = build_plugin_cache(model, X, register.pi)
            g = gmse_lin_many(cache, domains)
            results["lin"] = (g, _cv(g, theta))
        if "boot" in estimators:
            br = bootstrap_gmse(X, Y, lam, G, plan, theta_hat=theta, beta0=model.coefficients, fit_options=fit_options)
            dropped["boot"] += br.dropped
            results["boot"] = (br.gmse, br.cv)
        if "mc" in estimators:
            _, p_true = truth.unseal()
            mr = mc_oracle(X, p_true, register.pi, G, plan, beta0=scenario.true_beta, fit_options=fit_options)
            dropped["mc"] += mr.dropped
            results["mc"] = (mr.gmse, mr.cv)
        for est in ESTIMATORS:
            if est not in results:
                continue
            g, c = results[est]
            for d, dom in enumerate(domains):
                for k in range(len(labels)):
                    rows.append(StudyRow(s, dom.name, labels[k], est, float(theta[d, k]), int(nkd[d, k]),
                                         float(g[d, k]), float(c[d, k])))
        log.info("%s: replicate %d/%d done", scenario.name, s + 1, S)
    return StudyReport(scenario.name, rows, dropped)
