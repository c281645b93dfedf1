"""Synthetic data-generating processes with known CATEs.

Ten covariates (five continuous, five Bernoulli(0.5)), a constant or
covariate-driven propensity, and three response-surface settings for binary
and continuous outcomes at common or rare prevalence. The unobserved noise
terms ``eps_k = nu_k * N(0, 1)`` enter the true CATE, so part of the
heterogeneity is never recoverable from ``x``.

All outcomes are treated as harmful (lower is better): the oracle policy
treats exactly the units with a negative true CATE.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import expit

from policyforge.data import Dataset, Truth
from policyforge.rng import RngStream

Prevalence = Literal["common", "rare"]
Confounding = Literal["none", "mild"]

BINARY_NU = (0.1, 0.5, 0.8)
CONTINUOUS_NU = (1.0, 0.3, 0.1, 0.2, 0.25, 0.5)

# (mean, sd) of the multiplicative noise in continuous Setting 2, rare.
ZETA = ((1.0, 0.055), (1.0, 0.5), (0.95, 0.6))

GeneratedTruth = Truth

# substream ids inside a generate() call
_COVARIATES, _EPS, _ZETA, _TREATMENT, _OUTCOME = range(1, 6)


@dataclass(frozen=True)
class DgpSpec:
    setting: int = 1
    prevalence: Prevalence = "common"
    outcome_kind: Literal["binary", "continuous"] = "binary"
    confounding: Confounding = "mild"
    n: int = 1000
    nu: tuple[float, ...] | None = None
    covariate_dist: Literal["normal", "uniform"] = "normal"
    constant_propensity: float = 0.2
    _nu: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.setting not in (1, 2, 3):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.prevalence not in ("common", "rare"):
            raise ValueError(f"unknown prevalence {self.prevalence!r}")
        if self.outcome_kind not in ("binary", "continuous"):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.confounding not in ("none", "mild"):
            raise ValueError(f"unknown confounding {self.confounding!r}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        default = BINARY_NU if self.outcome_kind == "binary" else CONTINUOUS_NU
        nu = tuple(float(v) for v in (self.nu if self.nu is not None else default))
        if len(nu) != len(default):
            raise ValueError(f"nu needs {len(default)} entries for {self.outcome_kind} outcomes")
        if any(v < 0 for v in nu):
            raise ValueError("nu entries must be non-negative")
        object.__setattr__(self, "_nu", nu)

    @property
    def noise_scales(self) -> tuple[float, ...]:
        return self._nu

    def with_n(self, n: int) -> DgpSpec:
        return replace(self, n=n)

    @property
    def tag(self) -> str:
        return f"s{self.setting}-{self.prevalence}-{self.outcome_kind}-{self.confounding}-n{self.n}"


def gen_covariates(n: int, stream: RngStream, dist: str = "normal") -> np.ndarray:
    """``n x 10`` matrix: columns 1-5 continuous, columns 6-10 Bernoulli(0.5)."""
    if n < 1:
        raise ValueError("n must be positive")
    g = stream.generator()
    if dist == "normal":
        cont = g.standard_normal((n, 5))
    elif dist == "uniform":
        cont = g.random((n, 5))
    else:
        raise ValueError(f"unknown covariate distribution {dist!r}")
    binary = (g.random((n, 5)) < 0.5).astype(np.float64)
    return np.hstack([cont, binary])


def propensity(x: np.ndarray, confounding: Confounding, constant: float = 0.2) -> np.ndarray | float:
    """True propensity for one row (returns a float) or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != 10:
        raise ValueError("propensity expects 10 covariates")
    if confounding == "none":
        e = np.full(X.shape[0], constant)
    elif confounding == "mild":
        c = lambda j: X[:, j - 1]  # noqa: E731  (1-based covariate index)
        eta = 1.6 - 0.2 * c(1) - 2.4 * c(3) - 0.2 * c(5) - 0.2 * c(6) - 0.6 * c(7) - 0.8 * c(9) + c(10)
        e = expit(eta)
    else:
        raise ValueError(f"unknown confounding {confounding!r}")
    return float(e[0]) if single else e


def response_surfaces(
    x: np.ndarray,
    eps: np.ndarray,
    spec: DgpSpec,
    zeta: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """True conditional means ``(m(x, 0), m(x, 1))``.

    Parameters
    ----------
    x
        ``n x 10`` covariates (a single row is accepted).
    eps
        ``n x K`` noise already scaled by ``nu`` (``eps[:, k-1]`` is
        ``eps_k``); K = 3 for binary and 6 for continuous outcomes.
    spec
        Setting, prevalence and outcome kind.
    zeta
        ``n x 3`` multipliers, used only by continuous Setting 2 rare.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    E = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if E.shape[0] != X.shape[0]:
        E = E.reshape(X.shape[0], -1)
    c = lambda j: X[:, j - 1]  # noqa: E731
    e = lambda k: E[:, k - 1]  # noqa: E731
    rare = spec.prevalence == "rare"
    s = spec.setting
    if s not in (1, 2, 3):
        raise ValueError(f"unknown setting {s!r}")

    if spec.outcome_kind == "binary":
        if s == 1 and not rare:
            m0 = expit(0.4 + 0.9 * e(1))
            m1 = expit(-1.1 * e(1))
        elif s == 1:
            m0 = expit(-2.8 + 0.9 * e(1))
            m1 = expit(-3.8 - 1.3 * e(1))
        elif s == 2 and not rare:
            m0 = expit(-3.8 * e(1))
            m1 = expit(-1.5 * c(1) - 5.8 * e(1))
        elif s == 2:
            m0 = expit(-2.8 + 5.2 * e(1))
            m1 = expit(-3.8 + c(1) - 4.6 * e(1))
        elif not rare:
            m0 = expit(0.2 * c(1) - 0.8 * c(4) - 0.9 * c(6) - 0.1 * c(7) + 0.5 * e(2))
            m1 = expit(-1.2 * c(5) ** 2 + 0.4 * np.sin(c(3)) - 1.9 * c(4) - 0.8 * e(2))
        else:
            m0 = expit(-4 - 0.5 * c(1) - 0.8 * c(3) - 1.8 * c(5) - 0.9 * c(6) - 0.1 * c(7) + 1.7 * e(3))
            m1 = expit(
                -2.5 + 0.8 * expit(c(1)) + 0.8 * np.sin(c(3)) - 1.5 * c(5) ** 2
                - 0.3 * c(6) - 0.2 * c(7) - 0.8 * e(3)
            )
        return m0, m1

    if s == 1 and not rare:
        m0 = -0.04 * (0.5 * e(1) + 1.1 * e(2) + expit(-2.8 + 1.3 * e(2)))
        m1 = -0.07 * e(1) + 1.6 * e(2) + expit(-2.9 + 1.2 * e(2))
    elif s == 1:
        m0 = -0.45 + 1.9 * e(3) + expit(-2.2 + 0.1 * e(3))
        m1 = -0.61 + 1.2 * e(3) + expit(-1.2 + 0.2 * e(3))
    elif s == 2 and not rare:
        m0 = -0.59 + expit(0.5 + 5.5 * e(3))
        m1 = -0.5 + expit(0.8 * c(1) + e(3))
    elif s == 2:
        if zeta is None:
            raise ValueError("continuous Setting 2 rare needs zeta multipliers")
        Z = np.atleast_2d(np.asarray(zeta, dtype=np.float64)).reshape(X.shape[0], 3)
        m0 = -0.105 + expit(-2.3 + 0.5 * e(4)) * Z[:, 0]
        m1 = (-0.06 * Z[:, 1] + expit(-12 - 2.6 * c(1) + 9 * e(4))) * Z[:, 2]
    elif not rare:
        m0 = e(5) + 0.09 - 0.05 * c(1) - 0.1 * c(3) - 0.1 * c(5) + 0.1 * c(6)
        m1 = e(5) + 0.2 - expit(c(1) + 0.1 * np.sin(c(3)) - 0.05 * c(4) ** 2 - 0.05 * c(7))
    else:
        m0 = e(6) - 0.85 - (0.1 * c(1) - 0.1 * c(3) - 0.05 * c(5) - 0.05 * c(6) - 0.05 * c(7))
        m1 = e(6) - 0.58 + 0.1 * expit(c(1) + 0.1 * np.sin(c(3)) - 0.05 * c(5) ** 2 - 0.3 * c(6) - 0.2 * c(7))
    return m0, m1


def generate(spec: DgpSpec, stream: RngStream) -> Dataset:
    """Draw one dataset; the truth block carries m0, m1, tau and e."""
    n = spec.n
    x = gen_covariates(n, stream.derive(_COVARIATES), spec.covariate_dist)
    nu = np.asarray(spec.noise_scales)
    eps = stream.derive(_EPS).generator().standard_normal((n, len(nu))) * nu
    zeta = None
    if spec.outcome_kind == "continuous" and spec.setting == 2 and spec.prevalence == "rare":
        g = stream.derive(_ZETA).generator()
        zeta = np.column_stack([g.normal(mu, sd, n) for mu, sd in ZETA])
    m0, m1 = response_surfaces(x, eps, spec, zeta)
    e = np.asarray(propensity(x, spec.confounding, spec.constant_propensity))
    w = (stream.derive(_TREATMENT).generator().random(n) < e).astype(np.int8)
    m_obs = np.where(w == 1, m1, m0)
    if spec.outcome_kind == "binary":
        y = (stream.derive(_OUTCOME).generator().random(n) < m_obs).astype(np.float64)
    else:
        y = m_obs.astype(np.float64)
    truth = Truth(tau=m1 - m0, e=e, m0=m0, m1=m1)
    return Dataset(x=x, w=w, y=y, outcome_kind=spec.outcome_kind, harmful=True, truth=truth)


def oracle_value(truth: Truth | np.ndarray, policy: np.ndarray, harmful: bool = True) -> float:
    """True advantage ``mean((2 pi - 1) tau)``, sign-flipped for harmful outcomes."""
    tau = truth.tau if isinstance(truth, Truth) else np.asarray(truth, dtype=np.float64)
    policy = np.asarray(policy)
    if policy.shape != tau.shape:
        raise ValueError("policy and tau lengths differ")
    signed = -tau if harmful else tau
    return float(np.mean((2 * policy - 1) * signed))
