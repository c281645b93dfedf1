"""Best linear predictor of treatment effects: OLS of DR scores on covariates with HC1 errors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class RankDeficientError(ValueError):
    """The design matrix is not of full column rank."""


@dataclass(frozen=True)
class BlpResult:
    coef: np.ndarray
    se: np.ndarray
    regressor_names: tuple[str, ...]
    n: int

    @property
    def t_stat(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se


def blp(gamma: np.ndarray, x_sub: np.ndarray, names: Sequence[str] | None = None) -> BlpResult:
    """Regress ``gamma`` on ``x_sub`` (which must contain any intercept column).

    Parameters
    ----------
    gamma
        Per-unit DR scores.
    x_sub
        ``n x q`` design, ``n > q``.
    names
        Column labels; defaults to ``c0, c1, ...``.

    Returns
    -------
    BlpResult
        OLS coefficients and HC1 standard errors
        ``sqrt(diag(n/(n-q) (X'X)^-1 X' diag(e^2) X (X'X)^-1))``.

    Raises
    ------
    RankDeficientError
        If a column is (numerically) a linear combination of earlier ones;
        the message names the offending columns.
    """
    y = np.asarray(gamma, dtype=np.float64)
    X = np.asarray(x_sub, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, q = X.shape
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(q))
    if len(names) != q:
        raise ValueError("names must match the number of design columns")
    if y.shape != (n,):
        raise ValueError("gamma must have one entry per design row")
    if n <= q:
        raise ValueError(f"need more rows than regressors (n={n}, q={q})")
    _check_rank(X, names)
    Q, R = np.linalg.qr(X)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    r_inv = np.linalg.inv(R)
    bread = r_inv @ r_inv.T
    meat = (X * resid[:, None] ** 2).T @ X
    cov = n / (n - q) * bread @ meat @ bread
    return BlpResult(coef, np.sqrt(np.clip(np.diag(cov), 0.0, None)), names, n)


def _check_rank(X: np.ndarray, names: tuple[str, ...]) -> None:
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    tol = max(X.shape) * np.finfo(float).eps * 10
    bad = []
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(Xs[:, : j + 1], tol=tol) <= j - len(bad):
            bad.append(j)
    if bad:
        raise RankDeficientError(
            "design is rank deficient; collinear column(s): " + ", ".join(names[j] for j in bad)
        )
