"""Longitudinal insurance portfolios: validation, CSV ingestion and design matrices."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "PortfolioError",
    "ParseError",
    "ValidationError",
    "ReferentialError",
    "ColumnSpec",
    "CovariateSchema",
    "PolicyPeriod",
    "Portfolio",
    "PortfolioArrays",
    "encode_covariates",
    "load_portfolio",
    "write_portfolio",
    "build_portfolio",
    "summarize_claims_experience",
    "earlier_totals",
]

ROLES = ("frequency", "severity", "both", "ignore")
KINDS = ("continuous", "categorical")
KEY_COLUMNS = ("policy_id", "period", "exposure")


class PortfolioError(ValueError):
    """Base class for ingestion problems."""


class ParseError(PortfolioError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ValidationError(PortfolioError):
    pass


class ReferentialError(PortfolioError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    role: str = "both"
    kind: str = "continuous"
    reference: str | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown covariate role {self.role!r}")
        if self.kind not in KINDS:
            raise ValidationError(f"unknown covariate type {self.kind!r}")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
            if self.reference is not None and str(self.reference) not in self.levels:
                raise ValidationError(f"reference level {self.reference!r} not among levels {self.levels}")

    @property
    def in_frequency(self) -> bool:
        return self.role in ("frequency", "both")

    @property
    def in_severity(self) -> bool:
        return self.role in ("severity", "both")

    def encoded_names(self, name: str) -> list[str]:
        if self.kind == "continuous":
            return [name]
        return [f"{name}={lvl}" for lvl in self.levels if lvl != self.reference]


@dataclass(frozen=True)
class CovariateSchema:
    """Column name -> :class:`ColumnSpec`, in declaration order."""

    columns: tuple[tuple[str, ColumnSpec], ...] = ()

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateSchema":
        cols = []
        for name, spec in doc.items():
            spec = dict(spec)
            kind = spec.pop("type", spec.pop("kind", "continuous"))
            cols.append((name, ColumnSpec(
                role=spec.get("role", "both"),
                kind=kind,
                reference=None if spec.get("reference") is None else str(spec["reference"]),
                levels=spec.get("levels"),
            )))
        return cls(tuple(cols))

    @classmethod
    def from_json(cls, path) -> "CovariateSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = {}
        for name, spec in self.columns:
            entry = {"role": spec.role, "type": spec.kind}
            if spec.kind == "categorical":
                entry["reference"] = spec.reference
                entry["levels"] = list(spec.levels) if spec.levels is not None else None
            out[name] = entry
        return out

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def spec(self, name: str) -> ColumnSpec:
        return dict(self.columns)[name]

    def resolved(self, raw_rows: Iterable[Mapping]) -> "CovariateSchema":
        """Fill missing categorical levels/references from observed data."""
        rows = list(raw_rows)
        cols = []
        for name, spec in self.columns:
            if spec.kind == "categorical" and spec.levels is None:
                levels = tuple(sorted({str(r[name]) for r in rows}))
                ref = spec.reference if spec.reference is not None else (levels[0] if levels else None)
                spec = ColumnSpec(spec.role, spec.kind, ref, levels)
            elif spec.kind == "categorical" and spec.reference is None:
                spec = ColumnSpec(spec.role, spec.kind, spec.levels[0], spec.levels)
            cols.append((name, spec))
        return CovariateSchema(tuple(cols))

    def _ordered(self, which: str):
        flag = "in_frequency" if which == "frequency" else "in_severity"
        chosen = [(n, s) for n, s in self.columns if getattr(s, flag)]
        return [c for c in chosen if c[1].kind == "continuous"] + [c for c in chosen if c[1].kind == "categorical"]

    def design_names(self, which: str) -> list[str]:
        names = ["intercept"]
        for n, s in self._ordered(which):
            names.extend(s.encoded_names(n))
        return names

    def encode_row(self, row: Mapping, which: str) -> np.ndarray:
        values = [1.0]
        for name, spec in self._ordered(which):
            raw = row[name]
            if spec.kind == "continuous":
                try:
                    val = float(raw)
                except (TypeError, ValueError):
                    raise ValidationError(f"column {name!r}: {raw!r} is not a number") from None
                if not math.isfinite(val):
                    raise ValidationError(f"column {name!r}: non-finite value {raw!r}")
                values.append(val)
            else:
                level = str(raw)
                if spec.levels is None:
                    raise ValidationError(f"column {name!r} has unresolved levels")
                if level not in spec.levels:
                    raise ValidationError(f"column {name!r}: unseen categorical level {level!r}")
                values.extend(1.0 if level == lvl else 0.0 for lvl in spec.levels if lvl != spec.reference)
        return np.array(values, dtype=float)


def encode_covariates(raw_rows: Sequence[Mapping], schema: CovariateSchema):
    """Design matrices (frequency, severity), intercept first."""
    rows = list(raw_rows)
    for r in rows:
        missing = [n for n in schema.names if n not in r or r[n] in ("", None)]
        if missing:
            raise ValidationError(f"missing covariate values for {missing}")
    pA = len(schema.design_names("frequency"))
    pB = len(schema.design_names("severity"))
    A = np.array([schema.encode_row(r, "frequency") for r in rows]).reshape(len(rows), pA)
    B = np.array([schema.encode_row(r, "severity") for r in rows]).reshape(len(rows), pB)
    return A, B


@dataclass(frozen=True, eq=False)
class PolicyPeriod:
    policy_id: str
    period_index: int
    exposure: float
    freq_covariates: np.ndarray
    sev_covariates: np.ndarray
    claim_sizes: tuple[float, ...] = ()
    raw: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "freq_covariates", np.asarray(self.freq_covariates, dtype=float))
        object.__setattr__(self, "sev_covariates", np.asarray(self.sev_covariates, dtype=float))
        object.__setattr__(self, "claim_sizes", tuple(float(x) for x in self.claim_sizes))
        if not (0.0 < self.exposure <= 1.0):
            raise ValidationError(f"policy {self.policy_id} period {self.period_index}: exposure {self.exposure} not in (0, 1]")
        if any(not (x > 0 and math.isfinite(x)) for x in self.claim_sizes):
            raise ValidationError(f"policy {self.policy_id} period {self.period_index}: claim sizes must be positive")
        if not (np.all(np.isfinite(self.freq_covariates)) and np.all(np.isfinite(self.sev_covariates))):
            raise ValidationError(f"policy {self.policy_id} period {self.period_index}: missing covariate entries")

    @property
    def claim_count(self) -> int:
        return len(self.claim_sizes)

    @property
    def total_loss(self) -> float:
        return float(sum(self.claim_sizes))

    def __eq__(self, other):
        if not isinstance(other, PolicyPeriod):
            return NotImplemented
        return (self.policy_id == other.policy_id and self.period_index == other.period_index
                and self.exposure == other.exposure and self.claim_sizes == other.claim_sizes
                and np.array_equal(self.freq_covariates, other.freq_covariates)
                and np.array_equal(self.sev_covariates, other.sev_covariates)
                and self.raw == other.raw)

    __hash__ = None


@dataclass(frozen=True)
class PortfolioArrays:
    """Flat, period-major view of a portfolio used by the numerical code.

    Rows follow policy order, then period order.  ``pad_index[i, t]`` is the
    flat row of policy ``i`` period ``t + 1`` or ``-1`` past its end.
    """

    A: np.ndarray
    B: np.ndarray
    exposure: np.ndarray
    counts: np.ndarray
    loss: np.ndarray
    claim_x: np.ndarray
    claim_row: np.ndarray
    policy_of_row: np.ndarray
    period: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray
    pad_index: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.exposure.shape[0]

    @property
    def n_policies(self) -> int:
        return self.lengths.shape[0]


@dataclass(frozen=True, eq=False)
class Portfolio:
    policies: tuple[tuple[PolicyPeriod, ...], ...]
    freq_covariate_names: tuple[str, ...]
    sev_covariate_names: tuple[str, ...]
    schema: CovariateSchema | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(tuple(p) for p in self.policies))
        object.__setattr__(self, "freq_covariate_names", tuple(self.freq_covariate_names))
        object.__setattr__(self, "sev_covariate_names", tuple(self.sev_covariate_names))
        if not self.policies:
            raise ValidationError("portfolio has no policies")
        pA, pB = len(self.freq_covariate_names), len(self.sev_covariate_names)
        for seq in self.policies:
            if not seq:
                raise ValidationError("policy without periods")
            pid = seq[0].policy_id
            for t, pp in enumerate(seq, start=1):
                if pp.policy_id != pid:
                    raise ValidationError("mixed policy ids within one policy sequence")
                if pp.period_index != t:
                    raise ValidationError(f"policy {pid}: periods must be 1..T without gaps")
                if pp.freq_covariates.shape != (pA,) or pp.sev_covariates.shape != (pB,):
                    raise ValidationError(f"policy {pid} period {t}: covariate length mismatch")

    def __eq__(self, other):
        if not isinstance(other, Portfolio):
            return NotImplemented
        return (self.policies == other.policies
                and self.freq_covariate_names == other.freq_covariate_names
                and self.sev_covariate_names == other.sev_covariate_names)

    __hash__ = None

    @property
    def n_policies(self) -> int:
        return len(self.policies)

    @property
    def n_observations(self) -> int:
        return sum(len(p) for p in self.policies)

    def periods(self) -> Iterable[PolicyPeriod]:
        for seq in self.policies:
            yield from seq

    @cached_property
    def arrays(self) -> PortfolioArrays:
        rows = list(self.periods())
        P = len(rows)
        pA, pB = len(self.freq_covariate_names), len(self.sev_covariate_names)
        A = np.array([r.freq_covariates for r in rows]).reshape(P, pA)
        B = np.array([r.sev_covariates for r in rows]).reshape(P, pB)
        exposure = np.array([r.exposure for r in rows])
        counts = np.array([r.claim_count for r in rows], dtype=np.int64)
        loss = np.array([r.total_loss for r in rows])
        claim_x = np.array([x for r in rows for x in r.claim_sizes], dtype=float)
        claim_row = np.repeat(np.arange(P), counts)
        lengths = np.array([len(p) for p in self.policies], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        policy_of_row = np.repeat(np.arange(len(lengths)), lengths)
        period = np.array([r.period_index for r in rows], dtype=np.int64)
        Tmax = int(lengths.max())
        t_idx = np.arange(Tmax)
        pad_index = np.where(t_idx[None, :] < lengths[:, None], starts[:, None] + t_idx[None, :], -1)
        out = PortfolioArrays(A, B, exposure, counts, loss, claim_x, claim_row,
                              policy_of_row, period, starts, lengths, pad_index)
        for arr in (A, B, exposure, counts, loss, claim_x, claim_row, policy_of_row, period, starts, lengths, pad_index):
            arr.setflags(write=False)
        return out

    def duplicated(self, suffix: str = "_dup") -> "Portfolio":
        """Every policy twice; the copies get ``suffix`` appended to their ids."""
        copies = []
        for seq in self.policies:
            copies.append(tuple(
                PolicyPeriod(pp.policy_id + suffix, pp.period_index, pp.exposure, pp.freq_covariates,
                             pp.sev_covariates, pp.claim_sizes, pp.raw) for pp in seq))
        return Portfolio(self.policies + tuple(copies), self.freq_covariate_names,
                         self.sev_covariate_names, self.schema, dict(self.metadata))


def build_portfolio(policy_rows: Sequence[Mapping], claim_rows: Sequence[Mapping],
                    schema: CovariateSchema, metadata: dict | None = None) -> Portfolio:
    """Assemble a validated portfolio from already-parsed rows.

    ``policy_rows`` need keys policy_id, period, exposure and every schema
    column; ``claim_rows`` need policy_id, period, amount.  Claim sizes keep
    their input order.
    """
    schema = schema.resolved(policy_rows)
    A, B = encode_covariates(policy_rows, schema)
    by_key: dict[tuple[str, int], int] = {}
    order: list[str] = []
    grouped: dict[str, list[int]] = {}
    for k, row in enumerate(policy_rows):
        key = (str(row["policy_id"]), int(row["period"]))
        if key in by_key:
            raise ValidationError(f"duplicate policy period {key}")
        by_key[key] = k
        if key[0] not in grouped:
            grouped[key[0]] = []
            order.append(key[0])
        grouped[key[0]].append(k)
    sizes: dict[int, list[float]] = {}
    for c in claim_rows:
        key = (str(c["policy_id"]), int(c["period"]))
        if key not in by_key:
            raise ReferentialError(f"claim references unknown policy period {key}")
        amount = float(c["amount"])
        if not (amount > 0 and math.isfinite(amount)):
            raise ValidationError(f"claim amount {c['amount']!r} for {key} must be positive")
        sizes.setdefault(by_key[key], []).append(amount)
    names = schema.names
    policies = []
    for pid in order:
        idx = sorted(grouped[pid], key=lambda k: int(policy_rows[k]["period"]))
        seq = []
        for k in idx:
            row = policy_rows[k]
            try:
                exposure = float(row["exposure"])
            except (TypeError, ValueError):
                raise ValidationError(f"policy {pid}: exposure {row['exposure']!r} is not a number") from None
            seq.append(PolicyPeriod(pid, int(row["period"]), exposure, A[k], B[k],
                                    tuple(sizes.get(k, ())),
                                    tuple((n, str(row[n])) for n in names)))
        policies.append(tuple(seq))
    return Portfolio(tuple(policies), schema.design_names("frequency"), schema.design_names("severity"),
                     schema, metadata or {})


def _read_csv(path: Path, required: Sequence[str]):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}")
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(path, line_no, f"expected {len(header)} fields, got {len(rec)}")
            row = dict(zip(header, rec))
            if any(v == "" for v in row.values()):
                raise ParseError(path, line_no, "empty field")
            try:
                int(row["period"])
            except ValueError:
                raise ParseError(path, line_no, f"period {row['period']!r} is not an integer") from None
            for col in ("exposure", "amount"):
                if col in row:
                    try:
                        float(row[col])
                    except ValueError:
                        raise ParseError(path, line_no, f"{col} {row[col]!r} is not a number") from None
            row["_line"] = line_no
            rows.append(row)
    return header, rows


def load_portfolio(policies_csv, claims_csv, schema: CovariateSchema) -> Portfolio:
    policies_csv, claims_csv = Path(policies_csv), Path(claims_csv)
    header, prows = _read_csv(policies_csv, KEY_COLUMNS)
    _, crows = _read_csv(claims_csv, ("policy_id", "period", "amount"))
    covariates = [c for c in header if c not in KEY_COLUMNS]
    unknown = [c for c in covariates if c not in schema.names]
    if unknown:
        raise ValidationError(f"columns {unknown} are not covered by the schema")
    absent = [c for c in schema.names if c not in covariates]
    if absent:
        raise ValidationError(f"schema columns {absent} missing from {policies_csv}")
    for r in prows:
        e = float(r["exposure"])
        if not (0.0 < e <= 1.0):
            raise ValidationError(f"{policies_csv}:{r['_line']}: exposure {r['exposure']} not in (0, 1]")
    for r in crows:
        if not float(r["amount"]) > 0:
            raise ValidationError(f"{claims_csv}:{r['_line']}: claim amount {r['amount']} must be positive")
    meta = {"policies_csv": str(policies_csv), "claims_csv": str(claims_csv),
            "policy_rows": len(prows), "claim_rows": len(crows)}
    return build_portfolio(prows, crows, schema, meta)


def write_portfolio(portfolio: Portfolio, policies_csv, claims_csv) -> None:
    """Write the two CSVs that :func:`load_portfolio` reads back."""
    names = portfolio.schema.names if portfolio.schema is not None else []
    with open(policies_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(KEY_COLUMNS) + names)
        for pp in portfolio.periods():
            raw = dict(pp.raw)
            w.writerow([pp.policy_id, pp.period_index, repr(pp.exposure)] + [raw[n] for n in names])
    with open(claims_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy_id", "period", "amount"])
        for pp in portfolio.periods():
            for x in pp.claim_sizes:
                w.writerow([pp.policy_id, pp.period_index, repr(x)])


def earlier_totals(arrays: PortfolioArrays, values) -> np.ndarray:
    """Per row, the sum of ``values`` over the same policy's strictly earlier periods.

    ``values`` has the rows on its first axis.  Sums run within each policy,
    so every first period gets an exact zero.
    """
    values = np.asarray(values, dtype=float)
    pad = arrays.pad_index
    grid = np.zeros(pad.shape + values.shape[1:])
    valid = pad >= 0
    grid[valid] = values[pad[valid]]
    cum = np.zeros_like(grid)
    cum[:, 1:] = np.cumsum(grid[:, :-1], axis=1)
    return cum[valid]


def summarize_claims_experience(portfolio: Portfolio) -> pd.DataFrame:
    """Totals over each policy's earlier periods (zeros at t = 1)."""
    arr = portfolio.arrays
    ids = [pp.policy_id for pp in portfolio.periods()]
    return pd.DataFrame({
        "policy_id": ids,
        "period": arr.period,
        "prior_exposure": earlier_totals(arr, arr.exposure),
        "prior_claim_count": earlier_totals(arr, arr.counts),
        "prior_claim_amount": earlier_totals(arr, arr.loss),
    })
