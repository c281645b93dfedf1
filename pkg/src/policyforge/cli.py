"""Command-line interface and the Monte Carlo simulation harness.

Subcommands: simulate, fit, policy, blp, run, analyze. Results go to files;
progress goes to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from policyforge import rng as rngmod
from policyforge.bart import BartConfig, bart_scores
from policyforge.blp import blp
from policyforge.data import Dataset, load_csv, write_columns, write_csv
from policyforge.dgp import DgpSpec, generate
from policyforge.drlearner import NdrConfig, ScoreSet, ndr_learner
from policyforge.forest import ForestConfig, causal_forest_scores, cftt
from policyforge.metrics import MetricsReport, RepetitionRecord, cate_rmse, mean_cate_error, records_to_columns
from policyforge.policy import (
    advantage,
    cross_validated_tree_value,
    fit_policy_tree,
    plugin_policy,
    true_policy_value,
)
from policyforge.rng import DEFAULT_ROOT_SEED, RngStream

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

METHODS = ("NDR", "DR", "CF", "CFTT", "BART")
METHOD_IDS = {"NDR": rngmod.NDR, "DR": rngmod.NDR + 100, "CF": rngmod.CAUSAL_FOREST, "CFTT": rngmod.CFTT, "BART": rngmod.BART}
POLICY_CLASSES = ("tree", "modified_tree", "plugin")
FULL_REPS = 500
DESK_REPS = 100


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def worker_count(requested: int | None = None) -> int:
    """Workers allowed by ``requested`` and the ``POLICYFORGE_THREADS`` cap."""
    cap = os.environ.get("POLICYFORGE_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# ---------------------------------------------------------------------------
# method dispatch


@dataclass(frozen=True)
class MethodSettings:
    """Tree counts and cross-fitting sizes for every estimator."""

    nuisance_trees: int = 500
    causal_trees: int = 2000
    cftt_k: int = 4
    cftt_t: int = 4
    bart: BartConfig = field(default_factory=BartConfig)

    def nuisance_cfg(self) -> ForestConfig:
        return ForestConfig(n_trees=self.nuisance_trees)

    def causal_cfg(self) -> ForestConfig:
        return ForestConfig.causal(n_trees=self.causal_trees)


def estimate(ds: Dataset, method: str, settings: MethodSettings, stream: RngStream) -> ScoreSet:
    """Scores and CATEs from one estimator."""
    method = method.upper()
    if method in ("NDR", "DR"):
        cfg = NdrConfig(second_stage=settings.nuisance_cfg(), normalise=method == "NDR")
        return ndr_learner(ds, cfg, settings.nuisance_cfg(), stream)
    if method == "CF":
        return causal_forest_scores(ds, settings.causal_cfg(), settings.nuisance_cfg(), stream)
    if method == "CFTT":
        return cftt(ds, settings.causal_cfg(), settings.cftt_k, settings.cftt_t, stream, settings.nuisance_cfg())
    if method == "BART":
        return bart_scores(ds, settings.bart, stream)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


# ---------------------------------------------------------------------------
# simulation harness


@dataclass(frozen=True)
class RunConfig:
    """A grid of DGP cells, the estimators to run and the repetition count."""

    settings: tuple[int, ...] = (1, 2, 3)
    prevalences: tuple[str, ...] = ("common", "rare")
    confounding: tuple[str, ...] = ("mild",)
    n_list: tuple[int, ...] = (1000,)
    outcome_kind: str = "binary"
    methods: tuple[str, ...] = ("NDR",)
    reps: int = DESK_REPS
    depth: int = 2
    cv_k: int = 4
    root_seed: int = DEFAULT_ROOT_SEED
    output_dir: str = "results"
    oracle_only: bool = False
    split_budget: int | None = 256
    workers: int | None = None
    method_settings: MethodSettings = field(default_factory=MethodSettings)

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not (self.settings and self.prevalences and self.confounding and self.n_list):
            raise ValueError("the DGP grid must be non-empty")
        if not self.oracle_only and not self.methods:
            raise ValueError("select at least one method")
        for m in self.methods:
            if m.upper() not in METHODS:
                raise ValueError(f"unknown method {m!r}")

    def cells(self) -> list[DgpSpec]:
        return [
            DgpSpec(setting=s, prevalence=p, outcome_kind=self.outcome_kind, confounding=c, n=n)  # type: ignore[arg-type]
            for s, p, c, n in product(self.settings, self.prevalences, self.confounding, self.n_list)
        ]

    @classmethod
    def full_scale(cls, **kw) -> RunConfig:
        base = dict(reps=FULL_REPS, methods=METHODS[:1] + METHODS[2:], n_list=(1000, 5000),
                    confounding=("none", "mild"))
        return cls(**{**base, **kw})

    @classmethod
    def from_toml(cls, path: str | Path, **overrides) -> RunConfig:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        return cls.from_mapping({**raw, **overrides})

    @classmethod
    def from_mapping(cls, raw: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"trees", "bart"}
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        kw = {}
        for k, v in raw.items():
            if k in ("trees", "bart", "method_settings"):
                continue
            kw[k] = tuple(v) if isinstance(v, list) else v
        ms = MethodSettings(**raw.get("trees", {}))
        if "bart" in raw:
            ms = replace(ms, bart=BartConfig(**raw["bart"]))
        return cls(**kw, method_settings=ms)


def cell_stream(root_seed: int, spec: DgpSpec) -> RngStream:
    """Stream for a DGP cell, keyed by a hash of its tag so grids can change freely."""
    key = int.from_bytes(hashlib.sha256(spec.tag.encode()).digest()[:8], "little")
    return RngStream(root_seed).derive(key)


@dataclass(frozen=True)
class RepOutcome:
    cell: str
    rep_id: int
    records: list
    failures: list


def run_repetition(cfg: RunConfig, spec: DgpSpec, rep: int) -> RepOutcome:
    """Generate one dataset and evaluate every method's three policies.

    A failing method is recorded and skipped; the other methods still run.
    """
    stream = cell_stream(cfg.root_seed, spec).derive(rep)
    failures = []
    try:
        ds = generate(spec, stream.derive(rngmod.DGP))
    except Exception as exc:  # noqa: BLE001
        return RepOutcome(spec.tag, rep, [], [(spec.tag, rep, "DGP", repr(exc))])
    tau = ds.truth.tau  # type: ignore[union-attr]
    oracle_adv = true_policy_value(ds.truth.oracle_action, ds.truth)  # type: ignore[union-attr]
    oracle_tree = fit_policy_tree(ds.x, tau, cfg.depth, harmful=True, split_budget=cfg.split_budget)
    oracle_tree_adv = true_policy_value(oracle_tree.predict(ds.x), ds.truth)
    records = []
    if cfg.oracle_only:
        records.append(RepetitionRecord(
            rep, "ORACLE", "tree", oracle_tree_adv, np.nan, np.nan, oracle_adv, oracle_tree_adv,
            0.0, 0.0, 0.0, float(oracle_tree.predict(ds.x).mean()),
        ))
        return RepOutcome(spec.tag, rep, records, failures)
    policy_stream = stream.derive(rngmod.POLICY)
    for method in cfg.methods:
        method = method.upper()
        try:
            scores = estimate(ds, method, cfg.method_settings, stream.derive(METHOD_IDS[method]))
            common = dict(
                oracle_advantage=oracle_adv,
                oracle_tree_advantage=oracle_tree_adv,
                cate_rmse=cate_rmse(tau, scores.tau_hat),
                mean_cate_error=mean_cate_error(tau, scores.tau_hat),
                ate_error=scores.ate - float(np.mean(tau)),
            )
            for pclass in POLICY_CLASSES:
                if pclass == "plugin":
                    action = plugin_policy(scores.tau_hat, ds.harmful).action
                    est_dr = advantage(action, scores.gamma, ds.harmful).value
                    est_cate = advantage(action, scores.tau_hat, ds.harmful).value
                else:
                    cv = cross_validated_tree_value(
                        ds, scores, "gamma" if pclass == "tree" else "tau_hat", cfg.cv_k, cfg.depth,
                        policy_stream, split_budget=cfg.split_budget,
                    )
                    action = cv.assignment.action
                    est_dr, est_cate = cv.adv_dr.value, cv.adv_cate.value
                records.append(RepetitionRecord(
                    rep_id=rep, method=method, policy_class=pclass,
                    true_advantage=true_policy_value(action, ds.truth),
                    est_advantage_dr=est_dr, est_advantage_cate=est_cate,
                    treated_share=float(np.mean(action)), **common,
                ))
        except Exception as exc:  # noqa: BLE001
            failures.append((spec.tag, rep, method, f"{type(exc).__name__}: {exc}"))
            _log(traceback.format_exc(limit=3))
    return RepOutcome(spec.tag, rep, records, failures)


def _run_task(args):
    cfg, spec, rep = args
    return run_repetition(cfg, spec, rep)


def dominance_holds(records: Sequence[RepetitionRecord], tol: float = 1e-12) -> bool:
    """Oracle plug-in >= oracle tree >= every learned policy, per record."""
    return all(
        r.oracle_advantage + tol >= r.oracle_tree_advantage and r.oracle_tree_advantage + tol >= r.true_advantage
        for r in records
        if r.method != "ORACLE"
    ) and all(r.oracle_advantage + tol >= r.oracle_tree_advantage for r in records)


def run_simulation(cfg: RunConfig, write: bool = True) -> dict[str, MetricsReport]:
    """Run every (cell, repetition) and write per-cell reports to ``cfg.output_dir``.

    Output files per cell tag: ``<tag>_records.csv``, ``<tag>_report.csv``,
    ``<tag>_report.json`` and, when anything failed, ``<tag>_failures.csv``.
    """
    out_dir = Path(cfg.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    n_workers = worker_count(cfg.workers)
    for spec in cfg.cells():
        t0 = time.time()
        tasks = [(cfg, spec, rep) for rep in range(cfg.reps)]
        outcomes: list[RepOutcome] = []
        if n_workers > 1:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                outcomes = list(pool.map(_run_task, tasks))
        else:
            for k, task in enumerate(tasks):
                outcomes.append(_run_task(task))
                _log(f"[{spec.tag}] rep {k + 1}/{cfg.reps} ({time.time() - t0:.1f}s)")
        records = [r for o in sorted(outcomes, key=lambda o: o.rep_id) for r in o.records]
        failures = [f for o in outcomes for f in o.failures]
        report = MetricsReport.from_records(records, failures=len(failures))
        reports[spec.tag] = report
        if write:
            names, cols = records_to_columns(records)
            write_columns(out_dir / f"{spec.tag}_records.csv", names, cols)
            report.write_csv(out_dir / f"{spec.tag}_report.csv")
            report.write_json(out_dir / f"{spec.tag}_report.json")
            if failures:
                cols = [np.array(c, dtype=object) for c in zip(*failures)]
                write_columns(out_dir / f"{spec.tag}_failures.csv", ["cell", "rep_id", "method", "error"], cols)
        _log(f"[{spec.tag}] done: {len(records)} records, {len(failures)} failures, {time.time() - t0:.1f}s")
    return reports


# ---------------------------------------------------------------------------
# analysis of a user dataset


def _resolve_covariates(ds: Dataset, names: Sequence[str] | None) -> list[int] | None:
    if not names:
        return None
    missing = [n for n in names if n not in ds.covariate_names]
    if missing:
        raise ValueError(f"policy covariate(s) not in data: {missing}")
    return [ds.covariate_names.index(n) for n in names]


def analyze(
    ds: Dataset,
    method: str,
    out_dir: str | Path,
    policy_covariates: Sequence[str] | None = None,
    depth: int = 2,
    cv_k: int = 4,
    seed: int = DEFAULT_ROOT_SEED,
    settings: MethodSettings | None = None,
) -> dict:
    """Fit ``method`` on all covariates, learn policies on the restricted set.

    Writes ``scores.csv``, ``policy.json`` and ``advantages.csv`` and
    returns the advantage table as a dict.
    """
    settings = settings or MethodSettings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = _resolve_covariates(ds, policy_covariates)
    root = RngStream(seed)
    scores = estimate(ds, method, settings, root.derive(METHOD_IDS[method.upper()]))
    write_scores(scores, out / "scores.csv")
    rows = {}
    trees = {}
    for pclass, signal in (("tree", "gamma"), ("modified_tree", "tau_hat")):
        cv = cross_validated_tree_value(ds, scores, signal, cv_k, depth, root.derive(rngmod.POLICY), feats)
        rows[pclass] = (cv.adv_dr, cv.adv_cate, float(cv.assignment.action.mean()))
        full = fit_policy_tree(
            ds.x, getattr(scores, signal), depth, ds.harmful, features=feats, feature_names=ds.covariate_names
        )
        trees[pclass] = full.to_dict()
    plug = plugin_policy(scores.tau_hat, ds.harmful).action
    treat_all = np.ones(ds.n, dtype=np.int8)
    for pclass, action in (("plugin", plug), ("treat_all", treat_all)):
        rows[pclass] = (
            advantage(action, scores.gamma, ds.harmful),
            advantage(action, scores.tau_hat, ds.harmful, "CATE"),
            float(action.mean()),
        )
    Path(out / "policy.json").write_text(
        json.dumps({"method": scores.method, "policy_covariates": list(policy_covariates or ds.covariate_names),
                    **trees}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    names = list(rows)
    cols = [
        np.array(names, dtype=object),
        np.array([rows[k][0].value for k in names]),
        np.array([rows[k][0].se for k in names]),
        np.array([rows[k][1].value for k in names]),
        np.array([rows[k][1].se for k in names]),
        np.array([rows[k][2] for k in names]),
    ]
    write_columns(out / "advantages.csv", ["policy", "adv_dr", "se_dr", "adv_cate", "se_cate", "treated_share"], cols)
    return {k: {"adv_dr": v[0].value, "adv_cate": v[1].value, "treated_share": v[2]} for k, v in rows.items()}


def write_scores(scores: ScoreSet, path: str | Path) -> None:
    write_columns(path, ["row_id", "gamma", "tau_hat"],
                  [np.arange(scores.n, dtype=np.int64), scores.gamma, scores.tau_hat])


def read_scores(path: str | Path) -> ScoreSet:
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=np.float64, encoding="utf-8")
    data = np.atleast_1d(data)
    for col in ("row_id", "gamma", "tau_hat"):
        if col not in data.dtype.names:
            raise ValueError(f"{path}: missing column {col!r}")
    order = np.argsort(data["row_id"], kind="stable")
    return ScoreSet.build(data["gamma"][order], data["tau_hat"][order], "FILE")


# ---------------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_forest_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nuisance-trees", type=int, default=500)
    p.add_argument("--causal-trees", type=int, default=2000)
    p.add_argument("--bart-draws", type=int, default=2500)
    p.add_argument("--bart-burn-in", type=int, default=500)


def _settings_from(args) -> MethodSettings:
    return MethodSettings(
        nuisance_trees=args.nuisance_trees,
        causal_trees=args.causal_trees,
        bart=BartConfig(n_draws=args.bart_draws, burn_in=args.bart_burn_in),
    )


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--outcome", choices=("binary", "continuous"), default="binary")
    p.add_argument("--beneficial", action="store_true", help="higher outcomes are better (default: harmful)")


def _load(args, path) -> Dataset:
    return load_csv(path, outcome_kind=args.outcome, harmful=not args.beneficial)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policyforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one synthetic dataset")
    p.add_argument("--setting", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--prevalence", choices=("common", "rare"), default="common")
    p.add_argument("--outcome", choices=("binary", "continuous"), default="binary")
    p.add_argument("--confounding", choices=("none", "mild"), default="mild")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=DEFAULT_ROOT_SEED)
    p.add_argument("--covariates", choices=("normal", "uniform"), default="normal")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="estimate DR scores and CATEs")
    p.add_argument("--method", type=str.upper, choices=METHODS, default="NDR")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_ROOT_SEED)
    _add_data_args(p)
    _add_forest_args(p)

    p = sub.add_parser("policy", help="learn a policy tree from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="CSV holding the covariates of the scored rows")
    p.add_argument("--train-on", choices=("gamma", "tau"), default="gamma")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--cv", type=int, default=4)
    p.add_argument("--policy-covariates", type=_csv_list, default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_ROOT_SEED)
    p.add_argument("--out", required=True)
    _add_data_args(p)

    p = sub.add_parser("blp", help="linear projection of scores on covariates")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--covariates", type=_csv_list, required=True)
    p.add_argument("--out", required=True)
    _add_data_args(p)

    p = sub.add_parser("run", help="full simulation study")
    p.add_argument("--config", help="TOML file with RunConfig fields")
    p.add_argument("--settings", type=lambda s: tuple(int(v) for v in _csv_list(s)))
    p.add_argument("--prevalences", type=lambda s: tuple(_csv_list(s)))
    p.add_argument("--confounding", type=lambda s: tuple(_csv_list(s)))
    p.add_argument("--n", dest="n_list", type=lambda s: tuple(int(v) for v in _csv_list(s)))
    p.add_argument("--methods", type=lambda s: tuple(v.upper() for v in _csv_list(s)))
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", dest="root_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--oracle-only", action="store_true", default=None)
    p.add_argument("--full-scale", action="store_true", help="500 repetitions, all methods")
    p.add_argument("--out", dest="output_dir")

    p = sub.add_parser("analyze", help="scores, policies and advantages for a CSV dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--method", type=str.upper, choices=METHODS, default="NDR")
    p.add_argument("--policy-covariates", type=_csv_list, default=None)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--cv", type=int, default=4)
    p.add_argument("--seed", type=int, default=DEFAULT_ROOT_SEED)
    p.add_argument("--out-dir", required=True)
    _add_data_args(p)
    _add_forest_args(p)
    return parser


def _cmd_simulate(args) -> None:
    spec = DgpSpec(args.setting, args.prevalence, args.outcome, args.confounding, args.n,
                   covariate_dist=args.covariates)
    ds = generate(spec, RngStream(args.seed).derive(rngmod.DGP))
    write_csv(ds, args.out)


def _cmd_fit(args) -> None:
    ds = _load(args, args.input)
    scores = estimate(ds, args.method, _settings_from(args), RngStream(args.seed).derive(METHOD_IDS[args.method]))
    write_scores(scores, args.out)
    _log(f"{args.method}: ATE {scores.ate:.6g} (se {scores.ate_se:.3g})")


def _cmd_policy(args) -> None:
    ds = _load(args, args.data)
    scores = read_scores(args.scores)
    if scores.n != ds.n:
        raise ValueError(f"scores have {scores.n} rows but data has {ds.n}")
    signal = "gamma" if args.train_on == "gamma" else "tau_hat"
    feats = _resolve_covariates(ds, args.policy_covariates)
    cv = cross_validated_tree_value(ds, scores, signal, args.cv, args.depth,
                                    RngStream(args.seed).derive(rngmod.POLICY), feats)
    tree = fit_policy_tree(ds.x, getattr(scores, signal), args.depth, ds.harmful,
                           features=feats, feature_names=ds.covariate_names)
    doc = {
        **tree.to_dict(),
        "train_on": signal,
        "cv_folds": args.cv,
        "cv_adv_dr": {"value": cv.adv_dr.value, "se": cv.adv_dr.se},
        "cv_adv_cate": {"value": cv.adv_cate.value, "se": cv.adv_cate.se},
        "pooled_adv_dr": cv.pooled_dr.value,
        "pooled_adv_cate": cv.pooled_cate.value,
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_blp(args) -> None:
    ds = _load(args, args.data)
    scores = read_scores(args.scores)
    idx = _resolve_covariates(ds, args.covariates)
    design = np.column_stack([np.ones(ds.n), ds.x[:, idx]])
    res = blp(scores.gamma, design, ["intercept", *args.covariates])
    write_columns(args.out, ["regressor", "coef", "se"],
                  [np.array(res.regressor_names, dtype=object), res.coef, res.se])


def _cmd_run(args) -> None:
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "full_scale") and v is not None}
    if args.config:
        cfg = RunConfig.from_toml(args.config, **overrides)
    elif args.full_scale:
        cfg = RunConfig.full_scale(**overrides)
    else:
        cfg = RunConfig(**overrides)
    if args.full_scale and args.config:
        cfg = replace(cfg, reps=FULL_REPS, methods=RunConfig.full_scale().methods)
    run_simulation(cfg)


def _cmd_analyze(args) -> None:
    ds = _load(args, args.input)
    table = analyze(ds, args.method, args.out_dir, args.policy_covariates, args.depth, args.cv,
                    args.seed, _settings_from(args))
    for name, row in table.items():
        _log(f"{name:>14}: adv_dr {row['adv_dr']:+.5f}  adv_cate {row['adv_cate']:+.5f}  "
             f"treated {row['treated_share']:.3f}")


COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "policy": _cmd_policy,
    "blp": _cmd_blp,
    "run": _cmd_run,
    "analyze": _cmd_analyze,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        _log(f"policyforge {args.command}: error: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
