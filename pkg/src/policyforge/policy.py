"""Policies: exhaustive policy-tree search, plug-in rules and advantages.

A policy maps covariates to an action in {0 (control), 1 (treat)}. Its
advantage against a per-unit score vector ``s`` is ``mean((2 pi - 1) s)``;
for harmful outcomes the scores are negated first, so larger advantages
are always better.

Tree search maximises ``sum_i reward_i(action_i)`` with ``reward(1) = s_i``
and ``reward(0) = -s_i``. A leaf over a set S is therefore worth
``|sum_S s|`` and takes action 1 iff the sum is positive. Depth-2 trees are
solved exactly: for every (root feature, child feature) pair, a 2-d
cumulative sum over binned codes gives the best child split for every root
threshold at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from policyforge.data import Dataset, Truth, assign_folds, signed_scores
from policyforge.rng import RngStream


@dataclass(frozen=True)
class PolicyNode:
    """Split node (``feature``, ``threshold``; left iff x <= threshold) or leaf (``action``)."""

    feature: int | None = None
    threshold: float | None = None
    left: PolicyNode | None = None
    right: PolicyNode | None = None
    action: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.action is not None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())  # type: ignore[union-attr]

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        if self.is_leaf:
            return {"action": int(self.action)}  # type: ignore[arg-type]
        d = {"feature": int(self.feature), "threshold": float(self.threshold)}  # type: ignore[arg-type]
        if names is not None:
            d["feature_name"] = names[self.feature]  # type: ignore[index]
        d["left"] = self.left.to_dict(names)  # type: ignore[union-attr]
        d["right"] = self.right.to_dict(names)  # type: ignore[union-attr]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PolicyNode:
        if "action" in d:
            return cls(action=int(d["action"]))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass(frozen=True)
class PolicyTree:
    root: PolicyNode
    feature_names: tuple[str, ...] = ()

    @property
    def depth(self) -> int:
        return self.root.depth()

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0], dtype=np.int8)
        _assign(self.root, x, np.arange(x.shape[0]), out)
        return out

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "tree": self.root.to_dict(self.feature_names or None),
        }

    @classmethod
    def from_dict(cls, d: dict, feature_names: Sequence[str] = ()) -> PolicyTree:
        return cls(PolicyNode.from_dict(d["tree"]), tuple(feature_names))


def _assign(node: PolicyNode, x: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if node.is_leaf:
        out[rows] = node.action
        return
    go_left = x[rows, node.feature] <= node.threshold
    _assign(node.left, x, rows[go_left], out)  # type: ignore[arg-type]
    _assign(node.right, x, rows[~go_left], out)  # type: ignore[arg-type]


@dataclass(frozen=True)
class PolicyAssignment:
    action: np.ndarray
    source: Literal["tree", "modified_tree", "plugin", "oracle", "treat_all"]


@dataclass(frozen=True)
class AdvantageEstimate:
    value: float
    estimator: Literal["DR", "CATE", "TRUE"]
    se: float


def _actions(assignment: PolicyAssignment | np.ndarray) -> np.ndarray:
    a = assignment.action if isinstance(assignment, PolicyAssignment) else assignment
    return np.asarray(a)


def advantage(
    assignment: PolicyAssignment | np.ndarray,
    scores: np.ndarray,
    harmful: bool,
    estimator: Literal["DR", "CATE", "TRUE"] = "DR",
) -> AdvantageEstimate:
    """``mean((2 pi - 1) s)`` with harmful sign flip, plus its standard error."""
    a = _actions(assignment)
    s = signed_scores(scores, harmful)
    if a.shape != s.shape:
        raise ValueError("assignment and scores lengths differ")
    contrib = (2.0 * a - 1.0) * s
    n = contrib.size
    se = float(np.std(contrib, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return AdvantageEstimate(float(np.mean(contrib)), estimator, se)


def plugin_policy(tau_hat: np.ndarray, harmful: bool) -> PolicyAssignment:
    """Treat where the estimated effect is beneficial; zero effects go to control."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    act = tau_hat < 0 if harmful else tau_hat > 0
    return PolicyAssignment(act.astype(np.int8), "plugin")


def true_policy_value(assignment: PolicyAssignment | np.ndarray, truth: Truth | None, harmful: bool = True) -> float:
    """Advantage of ``assignment`` against the true CATEs."""
    if truth is None:
        raise ValueError("true policy value needs the oracle truth block")
    return advantage(assignment, truth.tau, harmful, "TRUE").value


# ---------------------------------------------------------------------------
# exhaustive tree search


@dataclass
class _Binned:
    codes: list[np.ndarray]
    thresholds: list[np.ndarray]

    def n_bins(self, j: int) -> int:
        return len(self.thresholds[j]) + 1


def _bin_features(x: np.ndarray, budget: int | None) -> _Binned:
    codes, thresholds = [], []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        thr = u[:-1]
        if budget is not None and len(thr) > budget:
            pick = np.unique(np.round(np.linspace(0, len(thr) - 1, budget)).astype(np.int64))
            thr = thr[pick]
        codes.append(np.searchsorted(thr, x[:, j], side="left").astype(np.int64))
        thresholds.append(thr)
    return _Binned(codes, thresholds)


def _leaf(total: float) -> PolicyNode:
    return PolicyNode(action=1 if total > 0 else 0)


def _best_depth1(s: np.ndarray, binned: _Binned, rows: np.ndarray, features: Iterable[int]):
    """Best single split on ``rows``; returns (value, feature, bin) or (|T|, None, None)."""
    total = float(s[rows].sum())
    best_val, best_j, best_b = abs(total), None, None
    for j in features:
        nb = binned.n_bins(j)
        if nb < 2:
            continue
        prefix = np.cumsum(np.bincount(binned.codes[j][rows], weights=s[rows], minlength=nb))[:-1]
        vals = np.abs(prefix) + np.abs(total - prefix)
        b = int(np.argmax(vals))
        if vals[b] > best_val:
            best_val, best_j, best_b = float(vals[b]), j, b
    return best_val, best_j, best_b


def _grow_depth1(s, binned, rows, features) -> PolicyNode:
    _, j, b = _best_depth1(s, binned, rows, features)
    if j is None:
        return _leaf(float(s[rows].sum()))
    left = rows[binned.codes[j][rows] <= b]
    right = rows[binned.codes[j][rows] > b]
    return PolicyNode(
        feature=j,
        threshold=float(binned.thresholds[j][b]),
        left=_leaf(float(s[left].sum())),
        right=_leaf(float(s[right].sum())),
    )


def _grow_depth2(s: np.ndarray, binned: _Binned, features: list[int]) -> PolicyNode:
    rows = np.arange(s.size)
    total = float(s.sum())
    best = (abs(total), None, None)
    for j in features:
        nj = binned.n_bins(j)
        if nj < 2:
            continue
        best_left = np.full(nj, -np.inf)
        best_right = np.full(nj, -np.inf)
        for k in features:
            nk = binned.n_bins(k)
            flat = binned.codes[j] * nk + binned.codes[k]
            grid = np.bincount(flat, weights=s, minlength=nj * nk).reshape(nj, nk)
            # cum[a, b] = sum of s over rows with code_j <= a and code_k <= b
            cum = np.cumsum(np.cumsum(grid, axis=0), axis=1)
            t_left = cum[:, -1:]
            v_left = np.abs(2.0 * cum - t_left).max(axis=1)
            cum_right = cum[-1:, :] - cum
            v_right = np.abs(2.0 * cum_right - (total - t_left)).max(axis=1)
            np.maximum(best_left, v_left, out=best_left)
            np.maximum(best_right, v_right, out=best_right)
        vals = (best_left + best_right)[:-1]
        a = int(np.argmax(vals))
        if vals[a] > best[0]:
            best = (float(vals[a]), j, a)
    _, j, a = best
    if j is None:
        return _leaf(total)
    left = rows[binned.codes[j] <= a]
    right = rows[binned.codes[j] > a]
    return PolicyNode(
        feature=j,
        threshold=float(binned.thresholds[j][a]),
        left=_grow_depth1(s, binned, left, features),
        right=_grow_depth1(s, binned, right, features),
    )


def _grow_recursive(s, binned, rows, depth, features) -> tuple[float, PolicyNode]:
    """Plain exhaustive recursion; used for depth >= 3."""
    total = float(s[rows].sum())
    if depth == 0:
        return abs(total), _leaf(total)
    if depth == 1:
        node = _grow_depth1(s, binned, rows, features)
        return _best_depth1(s, binned, rows, features)[0], node
    best_val, best_node = abs(total), _leaf(total)
    for j in features:
        codes = binned.codes[j][rows]
        for b in range(binned.n_bins(j) - 1):
            mask = codes <= b
            if not mask.any() or mask.all():
                continue
            lv, ln = _grow_recursive(s, binned, rows[mask], depth - 1, features)
            rv, rn = _grow_recursive(s, binned, rows[~mask], depth - 1, features)
            if lv + rv > best_val:
                best_val = lv + rv
                best_node = PolicyNode(feature=j, threshold=float(binned.thresholds[j][b]), left=ln, right=rn)
    return best_val, best_node


def fit_policy_tree(
    x: np.ndarray,
    scores: np.ndarray,
    depth: int = 2,
    harmful: bool = False,
    split_budget: int | None = 256,
    features: Sequence[int] | None = None,
    feature_names: Sequence[str] = (),
) -> PolicyTree:
    """Exhaustive search for the depth-``depth`` tree maximising the advantage.

    Parameters
    ----------
    x
        ``n x p`` covariates.
    scores
        Per-unit training signal (DR scores or estimated CATEs).
    depth
        Tree depth; 1 and 2 use fast exact solvers, larger depths a plain
        recursive search.
    harmful
        Negate ``scores`` before optimising.
    split_budget
        Maximum candidate thresholds per feature (quantile subset of the
        observed values); ``None`` searches every observed value.
    features
        Optional subset of column indices the tree may split on.

    Ties are broken towards the lower root feature, then the lower
    threshold, then the same ordering inside each child.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = signed_scores(scores, harmful)
    if x.shape[0] != s.size:
        raise ValueError("x and scores lengths differ")
    if depth < 1:
        raise ValueError("depth must be at least 1")
    feats = sorted(set(range(x.shape[1]) if features is None else features))
    if not feats or feats[0] < 0 or feats[-1] >= x.shape[1]:
        raise ValueError("feature restriction out of range")
    binned = _bin_features(x, split_budget)
    rows = np.arange(s.size)
    if depth == 1:
        root = _grow_depth1(s, binned, rows, feats)
    elif depth == 2:
        root = _grow_depth2(s, binned, feats)
    else:
        root = _grow_recursive(s, binned, rows, depth, feats)[1]
    return PolicyTree(root, tuple(feature_names))


# ---------------------------------------------------------------------------
# cross-validated evaluation


@dataclass
class CrossValidatedTree:
    """Out-of-fold policy and its estimated advantages.

    ``adv_dr``/``adv_cate`` average the per-fold advantages; the ``pooled_``
    variants average over all units at once.
    """

    adv_dr: AdvantageEstimate
    adv_cate: AdvantageEstimate
    pooled_dr: AdvantageEstimate
    pooled_cate: AdvantageEstimate
    assignment: PolicyAssignment
    trees: list[PolicyTree] = field(default_factory=list)
    fold_of: np.ndarray | None = None


def cross_validated_tree_value(
    ds: Dataset,
    scores,
    train_on: Literal["gamma", "tau_hat"] = "gamma",
    k: int = 4,
    depth: int = 2,
    stream: RngStream | int = 0,
    features: Sequence[int] | None = None,
    split_budget: int | None = 256,
) -> CrossValidatedTree:
    """K-fold policy trees: fit on the complement, evaluate on the fold.

    ``scores`` is a :class:`~policyforge.drlearner.ScoreSet`. Training on
    ``tau_hat`` gives the modified tree.
    """
    if k < 2:
        raise ValueError("cross-validation needs k >= 2")
    if train_on not in ("gamma", "tau_hat"):
        raise ValueError(f"train_on must be 'gamma' or 'tau_hat', not {train_on!r}")
    signal = scores.gamma if train_on == "gamma" else scores.tau_hat
    folds = assign_folds(ds.n, k, stream)
    action = np.zeros(ds.n, dtype=np.int8)
    trees, fold_dr, fold_cate = [], [], []
    for f in range(k):
        train, test = folds.complement(f), folds.members(f)
        tree = fit_policy_tree(
            ds.x[train], signal[train], depth=depth, harmful=ds.harmful,
            split_budget=split_budget, features=features, feature_names=ds.covariate_names,
        )
        trees.append(tree)
        action[test] = tree.predict(ds.x[test])
        fold_dr.append(advantage(action[test], scores.gamma[test], ds.harmful).value)
        fold_cate.append(advantage(action[test], scores.tau_hat[test], ds.harmful, "CATE").value)
    source = "tree" if train_on == "gamma" else "modified_tree"

    def fold_mean(vals: list[float], est: str) -> AdvantageEstimate:
        v = np.asarray(vals)
        return AdvantageEstimate(float(v.mean()), est, float(v.std(ddof=1) / np.sqrt(k)))  # type: ignore[arg-type]

    return CrossValidatedTree(
        adv_dr=fold_mean(fold_dr, "DR"),
        adv_cate=fold_mean(fold_cate, "CATE"),
        pooled_dr=advantage(action, scores.gamma, ds.harmful, "DR"),
        pooled_cate=advantage(action, scores.tau_hat, ds.harmful, "CATE"),
        assignment=PolicyAssignment(action, source),
        trees=trees,
        fold_of=folds.fold_of,
    )
