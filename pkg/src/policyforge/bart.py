"""Bayesian additive regression trees (probit and Gaussian) and S-learner DR scores.

Prior: node at depth d splits with probability ``alpha (1 + d)^-beta``; split
variables are uniform over those with a usable cutpoint and cutpoints are
uniform over the usable ones; leaf means are ``N(0, sigma_mu^2)``. Each
iteration backfits every tree against its partial residual with one
grow / prune / change Metropolis-Hastings proposal, then redraws the leaf
means from their conjugate posteriors.

Probit models use Albert-Chib latent augmentation with unit latent variance
and an offset ``Phi^-1(mean(y))``; Gaussian models rescale ``y`` to
``[-0.5, 0.5]`` and draw the residual variance from its inverse-gamma
conditional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numba import njit
from scipy.stats import chi2, norm

from policyforge.data import Dataset
from policyforge.drlearner import ScoreSet, aipw_score
from policyforge.forest import NuisanceFit, clip_propensity
from policyforge.rng import RngStream

Kind = Literal["probit", "gaussian"]

P_GROW, P_PRUNE = 0.28, 0.28
NODE_CAP = 128
MAX_CUTS = 100


@dataclass(frozen=True)
class BartConfig:
    n_trees: int = 200
    n_draws: int = 2500
    burn_in: int = 500
    alpha: float = 0.95
    beta: float = 2.0
    leaf_prior_k: float = 2.0
    include_propensity: bool = True
    sigma_nu: float = 3.0
    sigma_q: float = 0.9
    keep_draws: bool = False

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0 <= self.burn_in < self.n_draws:
            raise ValueError("need 0 <= burn_in < n_draws")
        if not (0.0 < self.alpha < 1.0 and self.beta >= 0.0 and self.leaf_prior_k > 0.0):
            raise ValueError("invalid tree or leaf prior")

    @property
    def n_retained(self) -> int:
        return self.n_draws - self.burn_in


@dataclass(frozen=True, eq=False)
class BartPosterior:
    """Posterior summaries cached at the training rows and registered designs.

    ``mean_train`` is the posterior mean of ``P(y=1|x)`` (probit) or of the
    regression function (gaussian). ``mean_one``/``mean_zero`` are the same
    with the treatment column set to 1 and 0. ``draws_one``/``draws_zero``
    keep every retained draw when requested.
    """

    kind: Kind
    n_retained: int
    mean_train: np.ndarray
    mean_one: np.ndarray | None
    mean_zero: np.ndarray | None
    sigma_draws: np.ndarray | None
    draws_one: np.ndarray | None = None
    draws_zero: np.ndarray | None = None
    max_fit_drift: float = 0.0
    treatment_col: int | None = None
    mean_leaves: float = float("nan")


def make_cutpoints(x: np.ndarray, max_cuts: int = MAX_CUTS) -> list[np.ndarray]:
    cuts = []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        if u.size <= max_cuts + 1:
            c = (u[:-1] + u[1:]) / 2.0
        else:
            c = np.unique(np.quantile(x[:, j], np.linspace(0.0, 1.0, max_cuts + 2)[1:-1]))
        cuts.append(c)
    return cuts


def _codes(x: np.ndarray, cuts: list[np.ndarray]) -> np.ndarray:
    out = np.empty(x.shape, dtype=np.int32)
    for j, c in enumerate(cuts):
        out[:, j] = np.searchsorted(c, x[:, j], side="left")
    return out


@njit(cache=True)
def _phi(v):
    return 0.5 * math.erfc(-v / math.sqrt(2.0))


@njit(cache=True)
def _trunc_std_normal_above(a):
    """Standard normal conditioned on exceeding ``a``."""
    if a < 0.5:
        while True:
            z = np.random.standard_normal()
            if z > a:
                return z
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + np.random.exponential(1.0 / lam)
        if np.random.random() < math.exp(-0.5 * (z - lam) ** 2):
            return z


@njit(cache=True)
def _log_ml(n, s, sig2, tau2):
    return -0.5 * math.log(1.0 + n * tau2 / sig2) + 0.5 * s * s * tau2 / (sig2 * (sig2 + n * tau2))


@njit(cache=True)
def _split_prob(alpha, beta, d):
    return alpha * (1.0 + d) ** (-beta)


@njit(cache=True)
def _available(j, node, var, cut, parent, left, ncut, lo, hi):
    """Usable cutpoint range [lo[v], hi[v]) per variable at ``node``."""
    p = ncut.shape[0]
    for v in range(p):
        lo[v] = 0
        hi[v] = ncut[v]
    child = node
    k = parent[j, node]
    while k >= 0:
        v = var[j, k]
        b = cut[j, k]
        if left[j, k] == child:
            if b < hi[v]:
                hi[v] = b
        else:
            if b + 1 > lo[v]:
                lo[v] = b + 1
        child = k
        k = parent[j, k]
    n_ok = 0
    for v in range(p):
        if hi[v] > lo[v]:
            n_ok += 1
    return n_ok


@njit(cache=True)
def _draw_rule(n_ok, lo, hi):
    pick = np.random.randint(0, n_ok)
    for v in range(lo.shape[0]):
        if hi[v] > lo[v]:
            if pick == 0:
                return v, lo[v] + np.random.randint(0, hi[v] - lo[v])
            pick -= 1
    return -1, -1


@njit(cache=True)
def _is_prunable(j, k, var, left, right, alive):
    return alive[j, k] and var[j, k] >= 0 and var[j, left[j, k]] < 0 and var[j, right[j, k]] < 0


@njit(cache=True)
def bart_kernel(codes, ncut, n_train, y, probit, J, n_iter, burn, alpha, beta, tau2,
                sig2_init, nu, lam, offset, seed, keep_draws, debug):
    """Run the chain; rows ``n_train:`` are prediction-only.

    Returns the posterior mean of the transformed fit per row, retained
    sigma^2 draws, optional per-draw transformed fits, the largest gap
    between the tracked and recomputed sum-of-trees fit (``debug``) and the
    mean number of leaves per retained tree.
    """
    np.random.seed(seed)
    n_all, p = codes.shape
    cap = NODE_CAP
    var = np.full((J, cap), -1, dtype=np.int64)
    cut = np.zeros((J, cap), dtype=np.int64)
    left = np.full((J, cap), -1, dtype=np.int64)
    right = np.full((J, cap), -1, dtype=np.int64)
    parent = np.full((J, cap), -1, dtype=np.int64)
    depth = np.zeros((J, cap), dtype=np.int64)
    alive = np.zeros((J, cap), dtype=np.bool_)
    mu = np.zeros((J, cap))
    for j in range(J):
        alive[j, 0] = True
    leaf_of = np.zeros((J, n_all), dtype=np.int32)
    fit = np.zeros(n_all)
    target = np.zeros(n_train)
    for i in range(n_train):
        target[i] = y[i]
    resid = np.zeros(n_train)
    lo = np.zeros(p, dtype=np.int64)
    hi = np.zeros(p, dtype=np.int64)
    cnt = np.zeros(cap)
    sm = np.zeros(cap)
    n_keep = n_iter - burn
    mean_out = np.zeros(n_all)
    sig_draws = np.zeros(n_keep)
    draws = np.zeros((n_keep if keep_draws else 0, n_all))
    sig2 = sig2_init
    drift = 0.0
    leaves_sum = 0.0

    for it in range(n_iter):
        if probit:
            for i in range(n_train):
                m = fit[i] + offset
                if y[i] > 0.5:
                    target[i] = m + _trunc_std_normal_above(-m) - offset
                else:
                    target[i] = m - _trunc_std_normal_above(m) - offset
        for j in range(J):
            for i in range(n_all):
                fit[i] -= mu[j, leaf_of[j, i]]
            for i in range(n_train):
                resid[i] = target[i] - fit[i]
            n_leaves = 0
            n_prunable = 0
            for k in range(cap):
                if alive[j, k]:
                    if var[j, k] < 0:
                        n_leaves += 1
                    elif _is_prunable(j, k, var, left, right, alive):
                        n_prunable += 1
            u = np.random.random()
            if n_leaves == 1 or u < P_GROW:
                # grow a uniformly chosen leaf
                pick = np.random.randint(0, n_leaves)
                leaf = -1
                for k in range(cap):
                    if alive[j, k] and var[j, k] < 0:
                        if pick == 0:
                            leaf = k
                            break
                        pick -= 1
                free_a = -1
                free_b = -1
                for k in range(cap):
                    if not alive[j, k]:
                        if free_a < 0:
                            free_a = k
                        else:
                            free_b = k
                            break
                n_ok = _available(j, leaf, var, cut, parent, left, ncut, lo, hi)
                if n_ok > 0 and free_b >= 0:
                    v, b = _draw_rule(n_ok, lo, hi)
                    nl = 0.0
                    sl = 0.0
                    nr = 0.0
                    sr = 0.0
                    for i in range(n_train):
                        if leaf_of[j, i] == leaf:
                            if codes[i, v] <= b:
                                nl += 1.0
                                sl += resid[i]
                            else:
                                nr += 1.0
                                sr += resid[i]
                    d = depth[j, leaf]
                    pd = _split_prob(alpha, beta, d)
                    pc = _split_prob(alpha, beta, d + 1)
                    log_prior = math.log(pd) + 2.0 * math.log(1.0 - pc) - math.log(1.0 - pd)
                    par = parent[j, leaf]
                    w_new = n_prunable + 1
                    if par >= 0 and _is_prunable(j, par, var, left, right, alive):
                        w_new -= 1
                    p_g = 1.0 if n_leaves == 1 else P_GROW
                    log_trans = math.log(P_PRUNE / w_new) - math.log(p_g / n_leaves)
                    log_lik = (_log_ml(nl, sl, sig2, tau2) + _log_ml(nr, sr, sig2, tau2)
                               - _log_ml(nl + nr, sl + sr, sig2, tau2))
                    if math.log(np.random.random()) < log_prior + log_trans + log_lik:
                        var[j, leaf] = v
                        cut[j, leaf] = b
                        left[j, leaf] = free_a
                        right[j, leaf] = free_b
                        for c in (free_a, free_b):
                            alive[j, c] = True
                            var[j, c] = -1
                            parent[j, c] = leaf
                            depth[j, c] = d + 1
                        for i in range(n_all):
                            if leaf_of[j, i] == leaf:
                                leaf_of[j, i] = free_a if codes[i, v] <= b else free_b
            elif u < P_GROW + P_PRUNE:
                pick = np.random.randint(0, n_prunable)
                node = -1
                for k in range(cap):
                    if _is_prunable(j, k, var, left, right, alive):
                        if pick == 0:
                            node = k
                            break
                        pick -= 1
                lc = left[j, node]
                rc = right[j, node]
                nl = 0.0
                sl = 0.0
                nr = 0.0
                sr = 0.0
                for i in range(n_train):
                    if leaf_of[j, i] == lc:
                        nl += 1.0
                        sl += resid[i]
                    elif leaf_of[j, i] == rc:
                        nr += 1.0
                        sr += resid[i]
                d = depth[j, node]
                pd = _split_prob(alpha, beta, d)
                pc = _split_prob(alpha, beta, d + 1)
                log_prior = -(math.log(pd) + 2.0 * math.log(1.0 - pc) - math.log(1.0 - pd))
                leaves_new = n_leaves - 1
                p_g = 1.0 if leaves_new == 1 else P_GROW
                log_trans = math.log(p_g / leaves_new) - math.log(P_PRUNE / n_prunable)
                log_lik = (_log_ml(nl + nr, sl + sr, sig2, tau2)
                           - _log_ml(nl, sl, sig2, tau2) - _log_ml(nr, sr, sig2, tau2))
                if math.log(np.random.random()) < log_prior + log_trans + log_lik:
                    for i in range(n_all):
                        if leaf_of[j, i] == lc or leaf_of[j, i] == rc:
                            leaf_of[j, i] = node
                    for c in (lc, rc):
                        alive[j, c] = False
                        var[j, c] = -1
                        parent[j, c] = -1
                    var[j, node] = -1
                    left[j, node] = -1
                    right[j, node] = -1
            else:
                pick = np.random.randint(0, n_prunable)
                node = -1
                for k in range(cap):
                    if _is_prunable(j, k, var, left, right, alive):
                        if pick == 0:
                            node = k
                            break
                        pick -= 1
                n_ok = _available(j, node, var, cut, parent, left, ncut, lo, hi)
                if n_ok > 0:
                    v, b = _draw_rule(n_ok, lo, hi)
                    lc = left[j, node]
                    rc = right[j, node]
                    on = 0.0
                    os_ = 0.0
                    nl = 0.0
                    sl = 0.0
                    nr = 0.0
                    sr = 0.0
                    for i in range(n_train):
                        lf = leaf_of[j, i]
                        if lf == lc or lf == rc:
                            if lf == lc:
                                on += 1.0
                                os_ += resid[i]
                            if codes[i, v] <= b:
                                nl += 1.0
                                sl += resid[i]
                            else:
                                nr += 1.0
                                sr += resid[i]
                    tot_n = nl + nr
                    tot_s = sl + sr
                    log_lik = (_log_ml(nl, sl, sig2, tau2) + _log_ml(nr, sr, sig2, tau2)
                               - _log_ml(on, os_, sig2, tau2) - _log_ml(tot_n - on, tot_s - os_, sig2, tau2))
                    if math.log(np.random.random()) < log_lik:
                        var[j, node] = v
                        cut[j, node] = b
                        for i in range(n_all):
                            lf = leaf_of[j, i]
                            if lf == lc or lf == rc:
                                leaf_of[j, i] = lc if codes[i, v] <= b else rc
            # leaf means
            for k in range(cap):
                cnt[k] = 0.0
                sm[k] = 0.0
            for i in range(n_train):
                cnt[leaf_of[j, i]] += 1.0
                sm[leaf_of[j, i]] += resid[i]
            for k in range(cap):
                if alive[j, k] and var[j, k] < 0:
                    prec = cnt[k] / sig2 + 1.0 / tau2
                    mu[j, k] = sm[k] / sig2 / prec + np.random.standard_normal() / math.sqrt(prec)
            for i in range(n_all):
                fit[i] += mu[j, leaf_of[j, i]]
        if not probit:
            ssr = 0.0
            for i in range(n_train):
                r = target[i] - fit[i]
                ssr += r * r
            shape = 0.5 * (nu + n_train)
            scale = 0.5 * (nu * lam + ssr)
            sig2 = scale / np.random.gamma(shape, 1.0)
        if debug:
            for i in range(n_all):
                tot = 0.0
                for j in range(J):
                    tot += mu[j, leaf_of[j, i]]
                gap = abs(tot - fit[i])
                if gap > drift:
                    drift = gap
        if it >= burn:
            s = it - burn
            sig_draws[s] = sig2
            for j in range(J):
                for k in range(cap):
                    if alive[j, k] and var[j, k] < 0:
                        leaves_sum += 1.0
            for i in range(n_all):
                val = _phi(fit[i] + offset) if probit else fit[i]
                mean_out[i] += val
                if keep_draws:
                    draws[s, i] = val
    for i in range(n_all):
        mean_out[i] /= n_keep
    return mean_out, sig_draws, draws, drift, leaves_sum / (n_keep * J)


def fit_bart(
    x_with_w: np.ndarray,
    y: np.ndarray,
    cfg: BartConfig | None = None,
    kind: Kind = "probit",
    stream: RngStream | None = None,
    treatment_col: int | None = None,
    debug: bool = False,
) -> BartPosterior:
    """Fit BART and cache posterior means at the training rows.

    Parameters
    ----------
    x_with_w
        Design matrix; with ``treatment_col`` set, counterfactual designs
        with that column forced to 1 and to 0 are also tracked.
    y
        Outcome; 0/1 for ``kind="probit"``.
    kind
        ``"probit"`` or ``"gaussian"``.
    debug
        Recompute the sum-of-trees fit from scratch every iteration and
        report the largest gap to the tracked fit.
    """
    cfg = cfg or BartConfig()
    stream = stream or RngStream()
    x = np.atleast_2d(np.asarray(x_with_w, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if y.shape != (n,):
        raise ValueError("y must have one entry per row")
    if kind not in ("probit", "gaussian"):
        raise ValueError(f"unknown BART kind {kind!r}")
    if kind == "probit" and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("probit BART needs a 0/1 outcome")
    designs = [x]
    if treatment_col is not None:
        for val in (1.0, 0.0):
            xc = x.copy()
            xc[:, treatment_col] = val
            designs.append(xc)
    cuts = make_cutpoints(x)
    codes = _codes(np.vstack(designs), cuts)
    ncut = np.array([c.size for c in cuts], dtype=np.int64)
    J = cfg.n_trees
    seed = stream.seed64() & 0xFFFFFFFF
    tau2 = (0.5 / (cfg.leaf_prior_k * math.sqrt(J))) ** 2
    if kind == "probit":
        offset = float(norm.ppf(np.clip(y.mean(), 1e-3, 1 - 1e-3)))
        target, lo, span, sig2, lam = y, 0.0, 1.0, 1.0, 0.0
    else:
        lo = float(y.min())
        span = float(y.max() - lo) or 1.0
        target = (y - lo) / span - 0.5
        sig2 = max(float(np.var(target, ddof=1)) if n > 1 else 0.0, 1e-6)
        lam = sig2 * chi2.ppf(1.0 - cfg.sigma_q, cfg.sigma_nu) / cfg.sigma_nu
        offset = 0.0
    mean_out, sig_draws, draws, drift, mean_leaves = bart_kernel(
        codes, ncut, n, np.ascontiguousarray(target), kind == "probit", J, cfg.n_draws, cfg.burn_in,
        cfg.alpha, cfg.beta, tau2, sig2, cfg.sigma_nu, lam, offset, seed, cfg.keep_draws, debug,
    )
    if kind == "gaussian":
        mean_out = (mean_out + 0.5) * span + lo
        draws = (draws + 0.5) * span + lo
        sigma = np.sqrt(sig_draws) * span
    else:
        sigma = None
    blocks = [mean_out[k * n:(k + 1) * n] for k in range(len(designs))]
    dblocks = [draws[:, k * n:(k + 1) * n] for k in range(len(designs))] if cfg.keep_draws else [None] * len(designs)
    return BartPosterior(
        kind=kind,
        n_retained=cfg.n_retained,
        mean_train=blocks[0],
        mean_one=blocks[1] if treatment_col is not None else None,
        mean_zero=blocks[2] if treatment_col is not None else None,
        sigma_draws=sigma,
        draws_one=dblocks[1] if treatment_col is not None else None,
        draws_zero=dblocks[2] if treatment_col is not None else None,
        max_fit_drift=float(drift),
        treatment_col=treatment_col,
        mean_leaves=float(mean_leaves),
    )


def bart_cates(post: BartPosterior) -> np.ndarray:
    """Posterior mean of ``m(1, x) - m(0, x)`` at the training rows."""
    if post.mean_one is None or post.mean_zero is None:
        raise ValueError("posterior was fitted without a treatment column")
    return post.mean_one - post.mean_zero


def bart_scores(ds: Dataset, cfg: BartConfig | None = None, stream: RngStream | None = None) -> ScoreSet:
    """S-learner BART CATEs and DR scores with BART propensities."""
    cfg = cfg or BartConfig()
    stream = stream or RngStream()
    if ds.w.min() == ds.w.max():
        raise ValueError("BART scores need both treatment arms")
    prop = fit_bart(ds.x, ds.w.astype(np.float64), cfg, "probit", stream.derive(1))
    e_hat = clip_propensity(prop.mean_train)
    cols = [ds.x, ds.w[:, None].astype(np.float64)]
    if cfg.include_propensity:
        cols.append(e_hat[:, None])
    design = np.hstack(cols)
    kind: Kind = "probit" if ds.outcome_kind == "binary" else "gaussian"
    post = fit_bart(design, ds.y, cfg, kind, stream.derive(2), treatment_col=ds.p)
    nuis = NuisanceFit(e_hat=e_hat, m0_hat=post.mean_zero, m1_hat=post.mean_one, w=ds.w)
    tau = bart_cates(post)
    return ScoreSet.build(aipw_score(ds.y, ds.w, nuis), tau, "BART")
