"""Register data model, dummy-coded design matrices and domain algebra.

A register is a finite population of ``N`` units. Every unit carries covariate
values, a sample-membership flag, an inclusion probability and, for sampled
units only, the observed outcome category (``1..K``). Domains are 0/1
membership vectors over the units.

Units keep their file order; that order is the canonical unit index.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RegisterError",
    "Covariate",
    "CovariateSchema",
    "Register",
    "DesignMatrix",
    "DomainSpec",
    "build_design_matrix",
    "domain_vector",
    "full_domain",
    "domain_partition",
    "population_total",
    "read_register_csv",
    "write_register_csv",
]

ROLES = ("predictor", "external_domain", "identifier")
KINDS = ("categorical", "binary")
RESERVED_COLUMNS = ("unit_id", "sampled", "pi", "outcome")


class RegisterError(ValueError):
    """Invalid register, schema or CSV content."""


@dataclass(frozen=True)
class Covariate:
    """One declared register column.

    ``levels`` lists the admissible values in declaration order. The reference
    level (dropped from the design matrix) defaults to the first level. Binary
    covariates are two-level categoricals contributing a single dummy.
    """

    name: str
    kind: str = "categorical"
    levels: tuple[str, ...] = ()
    reference: str | None = None
    role: str = "predictor"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RegisterError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise RegisterError(f"covariate {self.name!r}: unknown role {self.role!r}")
        if self.name in RESERVED_COLUMNS:
            raise RegisterError(f"covariate name {self.name!r} is reserved")
        levels = tuple(str(v) for v in self.levels)
        if self.kind == "binary" and not levels:
            levels = ("0", "1")
        object.__setattr__(self, "levels", levels)
        if len(set(levels)) != len(levels):
            raise RegisterError(f"covariate {self.name!r}: duplicate levels")
        if self.kind == "binary" and len(levels) != 2:
            raise RegisterError(f"binary covariate {self.name!r} needs exactly 2 levels")
        if self.role == "identifier":
            return
        if len(levels) < 2:
            raise RegisterError(f"categorical covariate {self.name!r} needs >= 2 levels")
        ref = levels[0] if self.reference is None else str(self.reference)
        if ref not in levels:
            raise RegisterError(f"covariate {self.name!r}: reference {ref!r} is not a level")
        object.__setattr__(self, "reference", ref)

    @property
    def dummy_levels(self) -> tuple[str, ...]:
        return tuple(v for v in self.levels if v != self.reference)


@dataclass(frozen=True)
class CovariateSchema:
    covariates: tuple[Covariate, ...]
    n_categories: int
    category_labels: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise RegisterError("covariate names must be unique")
        if self.n_categories < 2:
            raise RegisterError("need at least 2 outcome categories")
        labels = tuple(self.category_labels) or tuple(str(k) for k in range(1, self.n_categories + 1))
        if len(labels) != self.n_categories:
            raise RegisterError("category_labels length must equal n_categories")
        object.__setattr__(self, "category_labels", labels)
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def predictors(self) -> tuple[Covariate, ...]:
        return tuple(c for c in self.covariates if c.role == "predictor")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def __getitem__(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def n_columns(self) -> int:
        """Design-matrix width ``J``."""
        return 1 + sum(len(c.dummy_levels) for c in self.predictors)

    @classmethod
    def from_dict(cls, data: dict) -> "CovariateSchema":
        covs = tuple(
            Covariate(
                name=c["name"],
                kind=c.get("kind", "categorical"),
                levels=tuple(c.get("levels", ())),
                reference=c.get("reference"),
                role=c.get("role", "predictor"),
            )
            for c in data["covariates"]
        )
        return cls(covs, int(data["n_categories"]), tuple(data.get("category_labels", ())))

    def to_dict(self) -> dict:
        return {
            "n_categories": self.n_categories,
            "category_labels": list(self.category_labels),
            "covariates": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "levels": list(c.levels),
                    "reference": c.reference,
                    "role": c.role,
                }
                for c in self.covariates
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> "CovariateSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class Register:
    """Unit-level register table.

    ``outcome`` holds categories ``1..K`` for sampled units and 0 elsewhere.
    ``columns`` maps covariate names to string arrays of length ``N``.
    """

    unit_ids: np.ndarray
    columns: dict[str, np.ndarray]
    sampled: np.ndarray
    pi: np.ndarray
    outcome: np.ndarray
    n_categories: int

    def __post_init__(self):
        N = len(self.unit_ids)
        if N == 0:
            raise RegisterError("empty register")
        sampled = np.asarray(self.sampled, dtype=bool)
        pi = np.asarray(self.pi, dtype=float)
        outcome = np.asarray(self.outcome, dtype=np.int64)
        for name, arr in (("sampled", sampled), ("pi", pi), ("outcome", outcome)):
            if arr.shape != (N,):
                raise RegisterError(f"{name} has shape {arr.shape}, expected ({N},)")
        for name, col in self.columns.items():
            if len(col) != N:
                raise RegisterError(f"column {name!r} has {len(col)} rows, expected {N}")
        if sampled.sum() < 1:
            raise RegisterError("register has no sampled units")
        if not np.all((pi > 0) & (pi <= 1)):
            bad = int(np.flatnonzero(~((pi > 0) & (pi <= 1)))[0])
            raise RegisterError(f"pi out of (0, 1] at unit index {bad}")
        has_outcome = outcome > 0
        if np.any(has_outcome != sampled):
            bad = int(np.flatnonzero(has_outcome != sampled)[0])
            raise RegisterError(f"outcome must be present exactly for sampled units (unit index {bad})")
        if np.any(outcome > self.n_categories) or np.any(outcome < 0):
            raise RegisterError(f"outcome outside 1..{self.n_categories}")
        for arr in (sampled, pi, outcome):
            arr.setflags(write=False)
        object.__setattr__(self, "sampled", sampled)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "unit_ids", np.asarray(self.unit_ids, dtype=str))
        object.__setattr__(self, "columns", {k: np.asarray(v, dtype=str) for k, v in self.columns.items()})

    @property
    def N(self) -> int:
        return len(self.unit_ids)

    @property
    def n(self) -> int:
        return int(self.sampled.sum())

    def outcome_matrix(self) -> np.ndarray:
        """One-hot ``N x K`` outcome matrix; unsampled rows are all zero."""
        Y = np.zeros((self.N, self.n_categories))
        idx = np.flatnonzero(self.sampled)
        Y[idx, self.outcome[idx] - 1] = 1.0
        return Y


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray
    column_names: tuple[str, ...]

    @property
    def J(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class DomainSpec:
    name: str
    membership: np.ndarray
    kind: str = "external"
    warning: str | None = None

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.membership))

    @property
    def gamma(self) -> np.ndarray:
        return self.membership.astype(float)


def build_design_matrix(register: Register, schema: CovariateSchema) -> DesignMatrix:
    """Intercept followed by treatment dummies for every predictor.

    Columns follow schema order, then declared level order with the reference
    level dropped.
    """
    N = register.N
    if N == 0:
        raise RegisterError("empty register")
    blocks = [np.ones((N, 1))]
    names = ["(Intercept)"]
    for cov in schema.predictors:
        if cov.name not in register.columns:
            raise RegisterError(f"register lacks predictor column {cov.name!r}")
        values = register.columns[cov.name]
        known = np.isin(values, cov.levels)
        if not known.all():
            row = int(np.flatnonzero(~known)[0])
            raise RegisterError(
                f"unknown level {values[row]!r} in column {cov.name!r} at row {row}"
            )
        dummies = np.column_stack([values == lvl for lvl in cov.dummy_levels]).astype(float)
        blocks.append(dummies)
        names.extend(f"{cov.name}::{lvl}" for lvl in cov.dummy_levels)
    X = np.hstack(blocks)
    X.setflags(write=False)
    return DesignMatrix(X, tuple(names))


def _domain_kind(schema: CovariateSchema | None, column: str) -> str:
    if schema is None:
        return "external"
    try:
        cov = schema[column]
    except KeyError:
        return "external"
    return "internal" if cov.role == "predictor" else "external"


def domain_vector(
    register: Register,
    column: str,
    level: str,
    schema: CovariateSchema | None = None,
) -> DomainSpec:
    """Membership vector of units whose ``column`` equals ``level``."""
    if column not in register.columns:
        raise RegisterError(f"unknown domain column {column!r}")
    member = register.columns[column] == str(level)
    member.setflags(write=False)
    warn = None
    if not member.any():
        warn = f"empty domain: level {level!r} absent from column {column!r}"
        warnings.warn(warn, stacklevel=2)
    return DomainSpec(f"{column}={level}", member, _domain_kind(schema, column), warn)


def full_domain(register: Register) -> DomainSpec:
    member = np.ones(register.N, dtype=bool)
    member.setflags(write=False)
    return DomainSpec("full", member, "full_register")


def domain_partition(
    register: Register, column: str, schema: CovariateSchema | None = None
) -> list[DomainSpec]:
    """One domain per level of ``column`` (declared order when known)."""
    if column not in register.columns:
        raise RegisterError(f"unknown domain column {column!r}")
    levels: Sequence[str]
    if schema is not None and column in schema.names:
        levels = schema[column].levels
    else:
        levels = sorted(set(register.columns[column].tolist()))
    return [domain_vector(register, column, lvl, schema) for lvl in levels]


def population_total(domain: DomainSpec | np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """Per-category totals ``sum_i gamma_i Y_ik``."""
    gamma = domain.gamma if isinstance(domain, DomainSpec) else np.asarray(domain, dtype=float)
    return gamma @ np.asarray(outcomes, dtype=float)


# --- CSV -------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    return repr(float(x))


def read_register_csv(path: str | Path, schema: CovariateSchema) -> Register:
    """Read a register CSV validated against ``schema``.

    Errors name the file line (header is line 1).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RegisterError(f"{path}: empty file") from None
        missing = [c for c in ("unit_id", "sampled", "pi", "outcome") if c not in header]
        missing += [c.name for c in schema.covariates if c.name not in header]
        if missing:
            raise RegisterError(f"{path}: missing columns {missing}")
        pos = {name: header.index(name) for name in header}
        ids, sampled, pi, outcome = [], [], [], []
        cols: dict[str, list[str]] = {c.name: [] for c in schema.covariates}
        K = schema.n_categories
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RegisterError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                s = int(row[pos["sampled"]])
                p = float(row[pos["pi"]])
            except ValueError as exc:
                raise RegisterError(f"{path}: line {lineno}: {exc}") from None
            if s not in (0, 1):
                raise RegisterError(f"{path}: line {lineno}: sampled must be 0 or 1")
            raw = row[pos["outcome"]].strip()
            if s == 1:
                try:
                    y = int(raw)
                except ValueError:
                    raise RegisterError(f"{path}: line {lineno}: sampled unit needs an integer outcome") from None
                if not 1 <= y <= K:
                    raise RegisterError(f"{path}: line {lineno}: outcome {y} outside 1..{K}")
            else:
                if raw:
                    raise RegisterError(f"{path}: line {lineno}: outcome must be empty when sampled=0")
                y = 0
            for cov in schema.covariates:
                v = row[pos[cov.name]]
                if cov.role != "identifier" and v not in cov.levels:
                    raise RegisterError(
                        f"{path}: line {lineno}: unknown level {v!r} in column {cov.name!r}"
                    )
                cols[cov.name].append(v)
            ids.append(row[pos["unit_id"]])
            sampled.append(s)
            pi.append(p)
            outcome.append(y)
    if not ids:
        raise RegisterError(f"{path}: no data rows")
    return Register(
        unit_ids=np.array(ids, dtype=str),
        columns={k: np.array(v, dtype=str) for k, v in cols.items()},
        sampled=np.array(sampled, dtype=bool),
        pi=np.array(pi, dtype=float),
        outcome=np.array(outcome, dtype=np.int64),
        n_categories=K,
    )


def write_register_csv(register: Register, path: str | Path, column_order: Iterable[str] | None = None) -> None:
    names = list(column_order) if column_order is not None else list(register.columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", *names, "sampled", "pi", "outcome"])
        cols = [register.columns[n] for n in names]
        for i in range(register.N):
            y = int(register.outcome[i])
            w.writerow(
                [
                    register.unit_ids[i],
                    *(c[i] for c in cols),
                    int(register.sampled[i]),
                    _fmt_float(register.pi[i]),
                    y if y > 0 else "",
                ]
            )
