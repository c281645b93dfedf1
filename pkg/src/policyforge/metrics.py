"""Evaluation quantities per repetition and their aggregation across repetitions."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from policyforge.data import format_real, write_columns


def cate_rmse(tau_true: np.ndarray, tau_hat: np.ndarray) -> float:
    """Root mean squared difference between true and estimated CATEs."""
    a, b = _pair(tau_true, tau_hat)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mean_cate_error(tau_true: np.ndarray, tau_hat: np.ndarray) -> float:
    """``|mean(tau - tau_hat)|``: the error of the averaged CATE."""
    a, b = _pair(tau_true, tau_hat)
    return float(abs(np.mean(a - b)))


def rmse_across_reps(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared per-repetition difference."""
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pct_of_oracle(true_advs: np.ndarray, oracle_advs: np.ndarray) -> float:
    """Mean over repetitions of ``true_adv / oracle_adv``.

    Repetitions with a non-positive oracle advantage are dropped with a
    warning stating how many.
    """
    ratios, dropped = _ratios(true_advs, oracle_advs)
    if dropped:
        warnings.warn(f"{dropped} repetition(s) with zero oracle advantage excluded", RuntimeWarning, stacklevel=2)
    return float(np.mean(ratios)) if ratios.size else float("nan")


def ratio_of_means(num: np.ndarray, den: np.ndarray) -> float:
    """``mean(num) / mean(den)``; the pooled alternative to :func:`pct_of_oracle`."""
    a, b = _pair(num, den)
    return float(np.mean(a) / np.mean(b))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def _ratios(true_advs, oracle_advs) -> tuple[np.ndarray, int]:
    a, b = _pair(true_advs, oracle_advs)
    keep = b > 0
    return a[keep] / b[keep], int((~keep).sum())


@dataclass(frozen=True)
class RepetitionRecord:
    """One (repetition, method, policy class) row.

    ``oracle_advantage`` is the true advantage of the oracle plug-in rule;
    ``oracle_tree_advantage`` that of the depth-2 tree fit on the true CATEs.
    """

    rep_id: int
    method: str
    policy_class: str
    true_advantage: float
    est_advantage_dr: float
    est_advantage_cate: float
    oracle_advantage: float
    oracle_tree_advantage: float
    cate_rmse: float
    mean_cate_error: float
    ate_error: float
    treated_share: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Cell:
    value: float
    sd: float


@dataclass
class MetricsReport:
    """Aggregates keyed by ``(method, policy_class)``."""

    cells: dict[tuple[str, str], dict[str, Cell]] = field(default_factory=dict)
    n_reps: int = 0
    failures: int = 0
    excluded_reps: int = 0

    METRICS = (
        "pct_of_oracle",
        "rmse_true_adv",
        "rmse_est_adv_dr",
        "rmse_est_adv_cate",
        "cate_rmse_mean",
        "mean_cate_error_rmse",
        "ate_rmse",
        "oracle_tree_ratio",
        "treated_share",
    )

    @classmethod
    def from_records(cls, records: list[RepetitionRecord], failures: int = 0) -> MetricsReport:
        groups: dict[tuple[str, str], list[RepetitionRecord]] = defaultdict(list)
        for r in records:
            groups[(r.method, r.policy_class)].append(r)
        report = cls(n_reps=len({r.rep_id for r in records}), failures=failures)
        for key in sorted(groups):
            recs = sorted(groups[key], key=lambda r: r.rep_id)
            col = {name: np.array([getattr(r, name) for r in recs]) for name in RepetitionRecord.columns()[3:]}
            ratios, dropped = _ratios(col["true_advantage"], col["oracle_advantage"])
            report.excluded_reps = max(report.excluded_reps, dropped)
            diff_true = col["oracle_advantage"] - col["true_advantage"]
            est_dr = col["est_advantage_dr"] - col["true_advantage"]
            est_cate = col["est_advantage_cate"] - col["true_advantage"]
            report.cells[key] = {
                "pct_of_oracle": Cell(_mean(ratios), _sd(ratios)),
                "rmse_true_adv": Cell(_rms(diff_true), _sd(np.abs(diff_true))),
                "rmse_est_adv_dr": Cell(_rms(est_dr), _sd(np.abs(est_dr))),
                "rmse_est_adv_cate": Cell(_rms(est_cate), _sd(np.abs(est_cate))),
                "cate_rmse_mean": Cell(_mean(col["cate_rmse"]), _sd(col["cate_rmse"])),
                "mean_cate_error_rmse": Cell(_rms(col["mean_cate_error"]), _sd(col["mean_cate_error"])),
                "ate_rmse": Cell(_rms(col["ate_error"]), _sd(np.abs(col["ate_error"]))),
                "oracle_tree_ratio": Cell(
                    ratio_of_means(col["oracle_tree_advantage"], col["oracle_advantage"]),
                    _sd(_ratios(col["oracle_tree_advantage"], col["oracle_advantage"])[0]),
                ),
                "treated_share": Cell(_mean(col["treated_share"]), _sd(col["treated_share"])),
            }
        return report

    def get(self, method: str, policy_class: str, metric: str) -> float:
        return self.cells[(method, policy_class)][metric].value

    def rows(self) -> list[tuple[str, str, str, float, float]]:
        out = []
        for (method, pclass), metrics in self.cells.items():
            for name in self.METRICS:
                c = metrics[name]
                out.append((method, pclass, name, c.value, c.sd))
        return out

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        cols = [np.array(c, dtype=object) for c in zip(*rows)] if rows else [np.array([])] * 5
        write_columns(path, ["method", "policy_class", "metric", "value", "sd"], cols)

    def to_json(self) -> dict:
        table: dict = {}
        for (method, pclass), metrics in self.cells.items():
            table.setdefault(method, {})[pclass] = {
                name: {"value": _json_num(c.value), "sd": _json_num(c.sd)} for name, c in metrics.items()
            }
        return {
            "n_reps": self.n_reps,
            "failures": self.failures,
            "excluded_reps": self.excluded_reps,
            "results": table,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def records_to_columns(records: list[RepetitionRecord]) -> tuple[list[str], list[np.ndarray]]:
    names = RepetitionRecord.columns()
    rows = [asdict(r) for r in records]
    return names, [np.array([row[n] for row in rows], dtype=object) for n in names]


def _mean(v: np.ndarray) -> float:
    return float(np.mean(v)) if v.size else float("nan")


def _sd(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1)) if v.size > 1 else 0.0


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v**2))) if v.size else float("nan")


def _json_num(v: float):
    return float(format_real(v)) if math.isfinite(v) else None
