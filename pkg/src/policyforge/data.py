"""Dataset container, CSV interchange, fold assignment and the outcome sign convention."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

from policyforge.rng import RngStream

OutcomeKind = Literal["binary", "continuous"]

#: Reserved CSV column names for the oracle block.
TAU_COLUMN = "__tau"
E_COLUMN = "__e"


class SchemaError(ValueError):
    """A required column is missing from the CSV header."""


class ValidationError(ValueError):
    """A value violates the dataset contract."""


@dataclass(frozen=True)
class Truth:
    """Per-unit oracle quantities, available only for simulated data."""

    tau: np.ndarray
    e: np.ndarray
    m0: np.ndarray | None = None
    m1: np.ndarray | None = None

    @property
    def oracle_action(self) -> np.ndarray:
        return (self.tau < 0).astype(np.int8)


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (n x p), treatment ``w`` and outcome ``y``.

    ``harmful`` flags outcomes where lower is better (e.g. mortality); every
    score-based objective is sign-flipped for such outcomes.
    """

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    outcome_kind: OutcomeKind = "binary"
    harmful: bool = True
    truth: Truth | None = None
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError("x must be a 2-d matrix")
        n, p = x.shape
        if n < 1 or p < 1:
            raise ValidationError(f"need n >= 1 and p >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("x contains non-finite values")
        w = np.asarray(self.w, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if w.shape != (n,) or y.shape != (n,):
            raise ValidationError("w and y must have length n")
        bad = np.flatnonzero(~np.isin(w, (0, 1)))
        if bad.size:
            raise ValidationError(f"w must be 0/1; row {bad[0]} has {w[bad[0]]}")
        if not np.all(np.isfinite(y)):
            raise ValidationError(f"y is non-finite at row {np.flatnonzero(~np.isfinite(y))[0]}")
        if self.outcome_kind == "binary":
            bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
            if bad.size:
                raise ValidationError(f"binary y must be 0/1; row {bad[0]} has {y[bad[0]]}")
        elif self.outcome_kind != "continuous":
            raise ValidationError(f"unknown outcome_kind {self.outcome_kind!r}")
        if self.truth is not None:
            if len(self.truth.tau) != n or len(self.truth.e) != n:
                raise ValidationError("truth block must have length n")
        names = self.covariate_names or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValidationError("covariate_names must have p entries")
        for arr in (x, w, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w.astype(np.int8))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", tuple(names))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> Dataset:
        """Row subset; the oracle block follows the rows."""
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = Truth(
                tau=t.tau[idx],
                e=t.e[idx],
                m0=None if t.m0 is None else t.m0[idx],
                m1=None if t.m1 is None else t.m1[idx],
            )
        return Dataset(
            x=self.x[idx],
            w=self.w[idx],
            y=self.y[idx],
            outcome_kind=self.outcome_kind,
            harmful=self.harmful,
            truth=truth,
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    k: int

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def assign_folds(n: int, k: int, seed: int | RngStream) -> FoldAssignment:
    """Balanced random partition of ``range(n)`` into ``k`` folds.

    Indices are shuffled and dealt round-robin, so fold sizes differ by at
    most one. The result depends only on ``(n, k, seed)``.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    perm = stream.generator().permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(fold_of=fold_of, k=k)


def signed_scores(scores: np.ndarray, harmful: bool) -> np.ndarray:
    """Flip score signs for harmful outcomes so that larger is always better."""
    scores = np.asarray(scores, dtype=np.float64)
    return -scores if harmful else scores.copy()


def load_csv(
    path: str | Path,
    schema: Mapping[str, object] | None = None,
    outcome_kind: OutcomeKind = "binary",
    harmful: bool = True,
) -> Dataset:
    """Read a dataset from a headed CSV file.

    Parameters
    ----------
    path
        UTF-8 CSV with a header row; LF or CRLF line endings.
    schema
        Column binding. Keys: ``y`` (default ``"y"``), ``w`` (default
        ``"w"``), ``x`` (list of covariate names; default every column that
        is not bound elsewhere and does not start with ``__``), ``tau`` and
        ``e`` (oracle columns; default ``__tau``/``__e`` when present).
    outcome_kind, harmful
        Stored on the returned :class:`Dataset`.

    Raises
    ------
    SchemaError
        A bound column is absent from the header.
    ValidationError
        A value is non-finite, or ``w`` (or ``y`` in binary mode) is not 0/1.
        The message names the offending data row (1-based, header excluded).
    """
    schema = dict(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]

    y_col = str(schema.get("y", "y"))
    w_col = str(schema.get("w", "w"))
    tau_col = schema.get("tau", TAU_COLUMN if TAU_COLUMN in header else None)
    e_col = schema.get("e", E_COLUMN if E_COLUMN in header else None)
    bound = {y_col, w_col, tau_col, e_col, "row_id"}
    x_cols = schema.get("x")
    if x_cols is None:
        x_cols = [h for h in header if h not in bound and not h.startswith("__")]
    x_cols = list(x_cols)  # type: ignore[arg-type]
    wanted = [y_col, w_col, *x_cols] + [c for c in (tau_col, e_col) if c is not None]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    if not x_cols:
        raise SchemaError(f"{path}: no covariate columns")

    pos = {h: i for i, h in enumerate(header)}
    values = np.empty((len(rows), len(wanted)), dtype=np.float64)
    for r, row in enumerate(rows):
        for c, name in enumerate(wanted):
            try:
                v = float(row[pos[name]])
            except (IndexError, ValueError):
                raise ValidationError(f"row {r + 1}: column {name!r} is not a number") from None
            if not math.isfinite(v):
                raise ValidationError(f"row {r + 1}: column {name!r} is non-finite")
            values[r, c] = v

    y = values[:, 0]
    w = values[:, 1]
    bad = np.flatnonzero(~np.isin(w, (0.0, 1.0)))
    if bad.size:
        raise ValidationError(f"row {bad[0] + 1}: w must be 0 or 1, got {w[bad[0]]:g}")
    if outcome_kind == "binary":
        bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
        if bad.size:
            raise ValidationError(f"row {bad[0] + 1}: binary y must be 0 or 1, got {y[bad[0]]:g}")
    x = values[:, 2 : 2 + len(x_cols)]
    truth = None
    if tau_col is not None and e_col is not None:
        truth = Truth(tau=values[:, -2].copy(), e=values[:, -1].copy())
    return Dataset(
        x=x,
        w=w.astype(np.int8),
        y=y,
        outcome_kind=outcome_kind,
        harmful=harmful,
        truth=truth,
        covariate_names=tuple(x_cols),
    )


def format_real(v: float) -> str:
    """17-significant-digit text that round-trips exactly."""
    return f"{float(v):.17g}"


def write_csv(ds: Dataset, path: str | Path, include_truth: bool = True) -> None:
    """Write ``ds`` as CSV; reals use 17 significant digits."""
    header = ["y", "w", *ds.covariate_names]
    cols: list[np.ndarray] = [ds.y, ds.w.astype(np.float64), *ds.x.T]
    if include_truth and ds.truth is not None:
        header += [TAU_COLUMN, E_COLUMN]
        cols += [ds.truth.tau, ds.truth.e]
    write_columns(path, header, cols)


def write_columns(path: str | Path, header: Sequence[str], cols: Sequence[np.ndarray]) -> None:
    """Write equal-length columns to a CSV with LF line endings."""
    n = len(cols[0]) if cols else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(n):
            out.writerow([_cell(c[i]) for c in cols])


def _cell(v: object) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format_real(float(v))  # type: ignore[arg-type]
