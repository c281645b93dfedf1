"""Regression forests for nuisance functions, honest causal forests and their DR scores.

The causal forest residualises ``y`` and ``w`` on out-of-bag nuisance fits,
grows honest trees on the residuals and estimates

    tau(x) = sum_i alpha_i(x) wr_i yr_i / sum_i alpha_i(x) wr_i^2

where ``alpha_i(x)`` is the forest's co-leaf weight of estimation row ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from policyforge.data import Dataset, assign_folds
from policyforge.forest import _engine
from policyforge.rng import RngStream

__all__ = [
    "ForestConfig",
    "RegressionForest",
    "NuisanceModels",
    "NuisanceFit",
    "CausalForestFit",
    "clip_propensity",
    "fit_regression_forest",
    "fit_nuisances",
    "fit_causal_forest",
    "predict_cates",
    "kernel_weights",
    "cf_score_formula",
    "cf_scores",
    "causal_forest_scores",
    "cftt",
]

PROPENSITY_CLIP = 0.01

# stream ids for the nuisance forests
_E, _M0, _M1, _F = 1, 2, 3, 4


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ``ceil(sqrt(p))`` for regression forests and
    ``ceil(p/3) + 1`` for causal forests. ``imbalance_alpha`` (causal trees
    only) is the minimum share of a node's rows each child must hold in
    each treatment arm.
    """

    n_trees: int = 500
    mtry: int | None = None
    min_leaf: int = 5
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    max_depth: int | None = None
    max_bins: int = 256
    clip: float = PROPENSITY_CLIP
    imbalance_alpha: float = 0.05

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be at least 1")
        if not 0.0 <= self.imbalance_alpha < 0.5:
            raise ValueError("imbalance_alpha must lie in [0, 0.5)")
        if not 0.0 <= self.clip < 0.5:
            raise ValueError("clip must lie in [0, 0.5)")

    @classmethod
    def causal(cls, **kw) -> ForestConfig:
        return cls(**{"n_trees": 2000, **kw})

    def resolve_mtry(self, p: int, causal: bool = False) -> int:
        default = math.ceil(p / 3) + 1 if causal else math.ceil(math.sqrt(p))
        m = default if self.mtry is None else self.mtry
        return int(min(max(m, 1), p))


def _tree_seeds(stream: RngStream, n_trees: int) -> np.ndarray:
    return np.array([stream.derive(t).seed64() & 0xFFFFFFFF for t in range(n_trees)], dtype=np.uint32)


def clip_propensity(e: np.ndarray, delta: float = PROPENSITY_CLIP) -> np.ndarray:
    return np.clip(np.asarray(e, dtype=np.float64), delta, 1.0 - delta)


# ---------------------------------------------------------------------------
# regression forest


@dataclass(frozen=True, eq=False)
class RegressionForest:
    """Fitted regression forest; ``oob`` holds out-of-bag training predictions."""

    thresholds: list
    feat: np.ndarray
    bin_: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    oob: np.ndarray
    n_oob_fallback: int = 0

    @property
    def n_trees(self) -> int:
        return self.feat.shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Average over all trees at fresh points."""
        codes, _ = _engine.apply_bins(x, self.thresholds)
        return _engine.predict_regression_kernel(codes, self.feat, self.bin_, self.left, self.right, self.value)


def fit_regression_forest(
    x: np.ndarray,
    targets: np.ndarray,
    cfg: ForestConfig | None = None,
    stream: RngStream | None = None,
) -> RegressionForest:
    """Random regression forest with subsampling and out-of-bag predictions.

    Nodes with fewer than ``2 * min_leaf`` rows are never split, so small
    samples give mean-only trees. Rows that happen to be in every tree's subsample fall back to the
    full-forest prediction; their number is kept in ``n_oob_fallback``.
    """
    cfg = cfg or ForestConfig()
    stream = stream or RngStream()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.ascontiguousarray(targets, dtype=np.float64)
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError("targets must have one entry per row")
    if n < 1:
        raise ValueError("cannot fit a forest on zero rows")
    thresholds = _engine.make_bins(x, cfg.max_bins)
    codes, nbins = _engine.apply_bins(x, thresholds)
    m_sub = max(1, min(n, int(math.ceil(cfg.subsample_fraction * n))))
    cap = _engine.node_capacity(m_sub, cfg.min_leaf)
    max_depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
    feat, bin_, left, right, value, ref, dev, cnt = _engine.fit_regression_kernel(
        codes, y, nbins, _tree_seeds(stream, cfg.n_trees), m_sub,
        cfg.resolve_mtry(p), cfg.min_leaf, max_depth, cap,
    )
    oob = np.where(cnt > 0, ref + dev / np.maximum(cnt, 1), 0.0)
    missing = np.flatnonzero(cnt == 0)
    if missing.size:
        oob[missing] = _engine.predict_regression_kernel(codes[missing], feat, bin_, left, right, value)
    return RegressionForest(thresholds, feat, bin_, left, right, value, oob, int(missing.size))


# ---------------------------------------------------------------------------
# nuisances


@dataclass(frozen=True)
class NuisanceFit:
    """Per-unit nuisance estimates aligned with a dataset's rows."""

    e_hat: np.ndarray
    m0_hat: np.ndarray | None = None
    m1_hat: np.ndarray | None = None
    f_hat: np.ndarray | None = None
    w: np.ndarray | None = None
    models: NuisanceModels | None = field(default=None, repr=False, compare=False)

    @property
    def m_obs_hat(self) -> np.ndarray:
        if self.m0_hat is None or self.m1_hat is None or self.w is None:
            raise ValueError("observed-arm predictions need both arm fits and w")
        return np.where(self.w == 1, self.m1_hat, self.m0_hat)


@dataclass(frozen=True, eq=False)
class NuisanceModels:
    """The fitted forests; ``predict`` evaluates them at fresh rows."""

    e: RegressionForest | None = None
    m0: RegressionForest | None = None
    m1: RegressionForest | None = None
    f: RegressionForest | None = None
    clip: float = PROPENSITY_CLIP

    def predict(self, x: np.ndarray, w: np.ndarray | None = None) -> NuisanceFit:
        return NuisanceFit(
            e_hat=clip_propensity(self.e.predict(x), self.clip) if self.e is not None else None,  # type: ignore[arg-type]
            m0_hat=self.m0.predict(x) if self.m0 is not None else None,
            m1_hat=self.m1.predict(x) if self.m1 is not None else None,
            f_hat=self.f.predict(x) if self.f is not None else None,
            w=None if w is None else np.asarray(w),
            models=self,
        )


def _check_arms(w: np.ndarray, min_per_arm: int, what: str) -> None:
    n1 = int(np.sum(w == 1))
    n0 = int(np.sum(w == 0))
    if min(n0, n1) < min_per_arm:
        raise ValueError(
            f"{what}: treated={n1}, control={n0}; each arm needs at least "
            f"{min_per_arm} units, use a larger sample"
        )


def fit_nuisances(
    ds: Dataset,
    cfg: ForestConfig | None = None,
    stream: RngStream | None = None,
    arms: bool = True,
    pooled: bool = True,
    propensity: bool = True,
) -> NuisanceFit:
    """Propensity, per-arm and pooled outcome forests with out-of-bag predictions.

    Each arm's outcome forest gives OOB predictions on its own arm and fresh
    predictions on the other arm.
    """
    cfg = cfg or ForestConfig()
    stream = stream or RngStream()
    x, w, y = ds.x, ds.w, ds.y
    if arms:
        _check_arms(w, 2 * cfg.min_leaf, "outcome forests")
    else:
        _check_arms(w, 1, "nuisance fit")
    e_hat = e_model = None
    if propensity:
        e_model = fit_regression_forest(x, w.astype(np.float64), cfg, stream.derive(_E))
        e_hat = clip_propensity(e_model.oob, cfg.clip)
    m0_hat = m1_hat = f_hat = None
    m0_model = m1_model = f_model = None
    if arms:
        m0_hat = np.empty(ds.n)
        m1_hat = np.empty(ds.n)
        for arm, sid in ((0, _M0), (1, _M1)):
            own = w == arm
            model = fit_regression_forest(x[own], y[own], cfg, stream.derive(sid))
            target = m1_hat if arm else m0_hat
            target[own] = model.oob
            if (~own).any():
                target[~own] = model.predict(x[~own])
            if arm:
                m1_model = model
            else:
                m0_model = model
    if pooled:
        f_model = fit_regression_forest(x, y, cfg, stream.derive(_F))
        f_hat = f_model.oob
    models = NuisanceModels(e_model, m0_model, m1_model, f_model, cfg.clip)
    return NuisanceFit(e_hat, m0_hat, m1_hat, f_hat, w.copy(), models)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# causal forest


@dataclass(frozen=True, eq=False)
class CausalForestFit:
    """Honest causal forest.

    ``split_idx[t]`` and ``est_idx[t]`` are tree ``t``'s disjoint
    split-selection and leaf-estimation rows. ``center_y``/``center_w`` are
    the training fits ``f_hat`` and ``e_hat`` used to residualise.
    """

    thresholds: list
    feat: np.ndarray
    bin_: np.ndarray
    left: np.ndarray
    right: np.ndarray
    num: np.ndarray
    den: np.ndarray
    cnt: np.ndarray
    split_idx: np.ndarray
    est_idx: np.ndarray
    center_y: np.ndarray
    center_w: np.ndarray
    train_codes: np.ndarray = field(repr=False)
    tau_oob: np.ndarray = field(repr=False)

    @property
    def n_trees(self) -> int:
        return self.feat.shape[0]


def fit_causal_forest(
    ds: Dataset,
    nuis: NuisanceFit,
    cfg: ForestConfig | None = None,
    stream: RngStream | None = None,
) -> CausalForestFit:
    """Grow honest causal trees on ``(y - f_hat, w - e_hat)``.

    Raises
    ------
    ValueError
        If ``w - e_hat`` is constant, nuisances are missing, or an
        out-of-bag CATE has no contributing tree.
    """
    cfg = cfg or ForestConfig.causal()
    stream = stream or RngStream()
    if nuis.f_hat is None or nuis.e_hat is None:
        raise ValueError("causal forest needs the pooled outcome fit and the propensity fit")
    if len(nuis.f_hat) != ds.n or len(nuis.e_hat) != ds.n:
        raise ValueError("nuisances must be fitted on the same rows")
    yr = ds.y - nuis.f_hat
    wr = ds.w - nuis.e_hat
    if np.ptp(wr) == 0.0:
        raise ValueError("residualised treatment is constant; the causal forest is not identified")
    n, p = ds.x.shape
    thresholds = _engine.make_bins(ds.x, cfg.max_bins)
    codes, nbins = _engine.apply_bins(ds.x, thresholds)
    m_sub = max(2, min(n, int(math.ceil(cfg.subsample_fraction * n))))
    m_split = min(m_sub - 1, max(1, int(round(cfg.honesty_fraction * m_sub))))
    cap = _engine.node_capacity(m_split, cfg.min_leaf)
    max_depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
    arrays = _engine.fit_causal_kernel(
        codes, ds.w.astype(np.int64), np.ascontiguousarray(wr), np.ascontiguousarray(yr), nbins,
        _tree_seeds(stream, cfg.n_trees), m_sub, m_split, cfg.resolve_mtry(p, causal=True),
        cfg.min_leaf, cfg.imbalance_alpha, max_depth, cap,
    )
    feat, bin_, left, right, num, den, cnt, split_idx, est_idx = arrays
    a, b, used = _engine.predict_causal_kernel(codes, feat, bin_, left, right, num, den, cnt, split_idx, est_idx, True)
    fit = CausalForestFit(
        thresholds, feat, bin_, left, right, num, den, cnt, split_idx, est_idx,
        np.asarray(nuis.f_hat).copy(), np.asarray(nuis.e_hat).copy(), codes, np.empty(0),
    )
    if np.any(used == 0) and n > 1:
        # rows inside every subsample: use all trees
        miss = np.flatnonzero(used == 0)
        a2, b2, _ = _engine.predict_causal_kernel(
            codes[miss], feat, bin_, left, right, num, den, cnt, split_idx, est_idx, False
        )
        a[miss], b[miss] = a2, b2
    object.__setattr__(fit, "tau_oob", _ratio(a, b))
    return fit


def _ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    bad = np.flatnonzero(b <= 0.0)
    if bad.size:
        raise ValueError(f"zero kernel denominator at query row {bad[0]}")
    return a / b


def predict_cates(fit: CausalForestFit, x_query: np.ndarray | None = None) -> np.ndarray:
    """CATEs at ``x_query``; ``None`` returns out-of-bag training predictions."""
    if x_query is None:
        return fit.tau_oob.copy()
    codes, _ = _engine.apply_bins(x_query, fit.thresholds)
    a, b, _ = _engine.predict_causal_kernel(
        codes, fit.feat, fit.bin_, fit.left, fit.right, fit.num, fit.den, fit.cnt,
        fit.split_idx, fit.est_idx, False,
    )
    return _ratio(a, b)


def kernel_weights(fit: CausalForestFit, x_query: np.ndarray) -> np.ndarray:
    """``(n_query, n_train)`` forest weights ``alpha_i(x)``; rows sum to one."""
    codes, _ = _engine.apply_bins(x_query, fit.thresholds)
    return _engine.kernel_weights_kernel(
        codes, fit.train_codes, fit.feat, fit.bin_, fit.left, fit.right, fit.cnt, fit.est_idx
    )


def cf_score_formula(tau_hat, w, y, e_hat, f_hat) -> np.ndarray:
    """``tau + (w - e)/(e(1-e)) * (y - f - (w - e) tau)``."""
    tau_hat, w, y, e_hat, f_hat = (np.asarray(v, dtype=np.float64) for v in (tau_hat, w, y, e_hat, f_hat))
    wr = w - e_hat
    return tau_hat + wr / (e_hat * (1.0 - e_hat)) * (y - f_hat - wr * tau_hat)


def cf_scores(fit: CausalForestFit, ds: Dataset, nuis: NuisanceFit) -> np.ndarray:
    """DR scores of the causal forest at its training rows (out-of-bag CATEs)."""
    if len(fit.tau_oob) != ds.n:
        raise ValueError("forest and dataset rows are not aligned")
    return cf_score_formula(fit.tau_oob, ds.w, ds.y, nuis.e_hat, nuis.f_hat)


def causal_forest_scores(
    ds: Dataset,
    cfg: ForestConfig | None = None,
    nuisance_cfg: ForestConfig | None = None,
    stream: RngStream | None = None,
):
    """Full-sample causal forest: OOB nuisances, OOB CATEs and DR scores."""
    from policyforge.drlearner import ScoreSet

    stream = stream or RngStream()
    nuis = fit_nuisances(ds, nuisance_cfg, stream.derive(1), arms=False)
    fit = fit_causal_forest(ds, nuis, cfg, stream.derive(2))
    return ScoreSet.build(cf_scores(fit, ds, nuis), fit.tau_oob, "CF")


def cftt(
    ds: Dataset,
    cfg: ForestConfig | None = None,
    k: int = 4,
    t: int = 4,
    stream: RngStream | None = None,
    nuisance_cfg: ForestConfig | None = None,
):
    """Cross-fitted causal forest averaged over ``t`` random fold splits.

    For each fold, nuisances and the forest are fitted on the other folds
    and the fold's CATEs and scores are predicted fresh.
    """
    from policyforge.drlearner import ScoreSet

    if k < 2:
        raise ValueError("cross-fitting needs k >= 2 folds")
    if t < 1:
        raise ValueError("t must be at least 1")
    stream = stream or RngStream()
    gamma = np.zeros(ds.n)
    tau = np.zeros(ds.n)
    for rep in range(t):
        rs = stream.derive(rep)
        folds = assign_folds(ds.n, k, rs.derive(0))
        for f in range(k):
            train, test = folds.complement(f), folds.members(f)
            if len(np.unique(ds.w[train])) < 2:
                raise ValueError(f"fold {f} complement holds a single treatment arm")
            part = ds.subset(train)
            fs = rs.derive(1 + f)
            nuis = fit_nuisances(part, nuisance_cfg, fs.derive(1), arms=False)
            fit = fit_causal_forest(part, nuis, cfg, fs.derive(2))
            fresh = nuis.models.predict(ds.x[test])  # type: ignore[union-attr]
            tau_f = predict_cates(fit, ds.x[test])
            tau[test] += tau_f
            gamma[test] += cf_score_formula(tau_f, ds.w[test], ds.y[test], fresh.e_hat, fresh.f_hat)
    return ScoreSet.build(gamma / t, tau / t, "CFTT")


def with_trees(cfg: ForestConfig, n_trees: int) -> ForestConfig:
    return replace(cfg, n_trees=n_trees)
