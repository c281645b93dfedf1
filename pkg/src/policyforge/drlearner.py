"""AIPW scores and the normalised DR-learner with four-part cross-fitting.

The data are split into four parts. Holding out part D, the other three
rotate through the roles A (propensity fit), B (per-arm outcome fits) and
C (score construction plus the second-stage regression of scores on x);
D receives the mean of the three second-stage predictions. Every part is
held out once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from policyforge.data import Dataset, assign_folds
from policyforge.forest import ForestConfig, NuisanceFit, clip_propensity, fit_regression_forest
from policyforge.rng import RngStream

Method = Literal["NDR", "DR", "CF", "CFTT", "BART"]

N_PARTS = 4

# stream ids
_PARTS, _PROP, _ARM, _STAGE2 = 0, 1, 2, 3


@dataclass(frozen=True)
class ScoreSet:
    """Per-unit DR scores ``gamma`` and CATE estimates ``tau_hat``."""

    gamma: np.ndarray
    tau_hat: np.ndarray
    method: str
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        g = np.asarray(self.gamma, dtype=np.float64)
        t = np.asarray(self.tau_hat, dtype=np.float64)
        if g.shape != t.shape or g.ndim != 1:
            raise ValueError("gamma and tau_hat must be equal-length vectors")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(t))):
            raise ValueError(f"{self.method}: non-finite scores or CATEs")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "tau_hat", t)

    @classmethod
    def build(cls, gamma, tau_hat, method: str, **meta) -> ScoreSet:
        return cls(gamma, tau_hat, method, dict(meta))

    @property
    def n(self) -> int:
        return self.gamma.size

    @property
    def ate(self) -> float:
        return float(np.mean(self.gamma))

    @property
    def ate_se(self) -> float:
        return float(np.std(self.gamma, ddof=1) / np.sqrt(self.n)) if self.n > 1 else float("nan")


@dataclass(frozen=True)
class NdrConfig:
    n_parts: int = N_PARTS
    second_stage: ForestConfig = field(default_factory=ForestConfig)
    normalise: bool = True

    def __post_init__(self) -> None:
        if self.n_parts != N_PARTS:
            raise ValueError("the rotation is defined for exactly four parts")


def aipw_score(y: np.ndarray, w: np.ndarray, nuis: NuisanceFit, residual_weight: np.ndarray | None = None) -> np.ndarray:
    """``m1 - m0 + (w - e)/(e(1 - e)) * (y - m_w)``.

    ``residual_weight`` replaces the inverse-propensity factor, e.g. with
    the output of :func:`normalise_score_weights` times n.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if nuis.m0_hat is None or nuis.m1_hat is None:
        raise ValueError("AIPW scores need both arm outcome fits")
    m0, m1, e = nuis.m0_hat, nuis.m1_hat, nuis.e_hat
    m_obs = np.where(w == 1, m1, m0)
    if residual_weight is None:
        residual_weight = (w - e) / (e * (1.0 - e))
    return m1 - m0 + residual_weight * (y - m_obs)


def normalise_score_weights(w: np.ndarray, e_hat: np.ndarray) -> np.ndarray:
    """Arm-wise Hajek weights: treated ``(1/e_i)/sum_T(1/e)``, control ``-(1/(1-e_i))/sum_C(1/(1-e))``.

    Treated weights sum to +1 and control weights to -1.

    Raises
    ------
    ValueError
        If either arm is empty.
    """
    w = np.asarray(w)
    e = np.asarray(e_hat, dtype=np.float64)
    treated = w == 1
    if not treated.any() or treated.all():
        raise ValueError("weight normalisation needs both treatment arms")
    out = np.empty(e.shape)
    inv_t = 1.0 / e[treated]
    inv_c = 1.0 / (1.0 - e[~treated])
    out[treated] = inv_t / inv_t.sum()
    out[~treated] = -inv_c / inv_c.sum()
    return out


def _rotation(h: int, r: int) -> tuple[int, int, int]:
    q = [(h + 1) % N_PARTS, (h + 2) % N_PARTS, (h + 3) % N_PARTS]
    return q[r], q[(r + 1) % 3], q[(r + 2) % 3]


def ndr_learner(
    ds: Dataset,
    cfg: NdrConfig | None = None,
    forest_cfg: ForestConfig | None = None,
    stream: RngStream | None = None,
) -> ScoreSet:
    """Normalised DR-learner (``cfg.normalise=False`` gives the plain DR-learner).

    ``meta["part_of"]`` records each unit's part for cross-fitting audits.

    Raises
    ------
    ValueError
        If a part lacks enough units in either treatment arm.
    """
    cfg = cfg or NdrConfig()
    forest_cfg = forest_cfg or ForestConfig()
    stream = stream or RngStream()
    if ds.n < 2 * N_PARTS:
        raise ValueError("the four-part learner needs n >= 8")
    folds = assign_folds(ds.n, N_PARTS, stream.derive(_PARTS))
    parts = [folds.members(k) for k in range(N_PARTS)]
    for k, idx in enumerate(parts):
        n1 = int(ds.w[idx].sum())
        if min(n1, idx.size - n1) < 1:
            raise ValueError(
                f"part {k} has {n1} treated and {idx.size - n1} control units; "
                "both arms must be present in every part, use a larger sample"
            )

    prop_models, arm_models = {}, {}

    def propensity_on(a: int, c: int) -> np.ndarray:
        if a not in prop_models:
            idx = parts[a]
            prop_models[a] = fit_regression_forest(
                ds.x[idx], ds.w[idx].astype(np.float64), forest_cfg, stream.derive(_PROP).derive(a)
            )
        return clip_propensity(prop_models[a].predict(ds.x[parts[c]]), forest_cfg.clip)

    def outcomes_on(b: int, c: int) -> tuple[np.ndarray, np.ndarray]:
        if b not in arm_models:
            idx = parts[b]
            fits = []
            for arm in (0, 1):
                rows = idx[ds.w[idx] == arm]
                fits.append(fit_regression_forest(
                    ds.x[rows], ds.y[rows], forest_cfg, stream.derive(_ARM).derive(2 * b + arm)
                ))
            arm_models[b] = fits
        xc = ds.x[parts[c]]
        return arm_models[b][0].predict(xc), arm_models[b][1].predict(xc)

    gamma_sum = np.zeros(ds.n)
    gamma_cnt = np.zeros(ds.n)
    tau_hat = np.zeros(ds.n)
    for h in range(N_PARTS):
        d_idx = parts[h]
        for r in range(3):
            a, b, c = _rotation(h, r)
            c_idx = parts[c]
            e_c = propensity_on(a, c)
            m0_c, m1_c = outcomes_on(b, c)
            w_c = ds.w[c_idx]
            nuis = NuisanceFit(e_hat=e_c, m0_hat=m0_c, m1_hat=m1_c, w=w_c)
            weight = None
            if cfg.normalise:
                weight = c_idx.size * normalise_score_weights(w_c, e_c)
            g = aipw_score(ds.y[c_idx], w_c, nuis, weight)
            gamma_sum[c_idx] += g
            gamma_cnt[c_idx] += 1
            stage2 = fit_regression_forest(
                ds.x[c_idx], g, cfg.second_stage, stream.derive(_STAGE2).derive(3 * h + r)
            )
            tau_hat[d_idx] += stage2.predict(ds.x[d_idx]) / 3.0
    method = "NDR" if cfg.normalise else "DR"
    return ScoreSet.build(gamma_sum / gamma_cnt, tau_hat, method, part_of=folds.fold_of)
