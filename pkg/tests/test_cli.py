import csv
import json

import numpy as np
import pytest

from policyforge.cli import (
    FULL_REPS,
    MethodSettings,
    RunConfig,
    analyze,
    dominance_holds,
    main,
    read_scores,
    run_repetition,
    run_simulation,
    write_scores,
)
from policyforge.data import load_csv
from policyforge.dgp import DgpSpec
from policyforge.drlearner import ScoreSet
from policyforge.metrics import RepetitionRecord

QUICK = MethodSettings(nuisance_trees=30, causal_trees=60, cftt_k=2, cftt_t=1)

RECORD_COLUMNS = [
    "rep_id", "method", "policy_class", "true_advantage", "est_advantage_dr", "est_advantage_cate",
    "oracle_advantage", "oracle_tree_advantage", "cate_rmse", "mean_cate_error", "ate_error", "treated_share",
]


def _cfg(tmp_path, **kw):
    base = dict(settings=(1,), prevalences=("common",), n_list=(200,), methods=("NDR",), reps=2,
                output_dir=str(tmp_path), workers=1, method_settings=QUICK)
    return RunConfig(**{**base, **kw})


def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_bookkeeping_two_reps(tmp_path):
    reports = run_simulation(_cfg(tmp_path))
    tag = DgpSpec(setting=1, prevalence="common", n=200).tag
    with open(tmp_path / f"{tag}_records.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 1 * 3
    assert {r["policy_class"] for r in rows} == {"tree", "modified_tree", "plugin"}
    assert reports[tag].n_reps == 2 and reports[tag].failures == 0


def test_golden_column_names(tmp_path):
    run_simulation(_cfg(tmp_path, reps=1))
    tag = DgpSpec(setting=1, prevalence="common", n=200).tag
    assert _header(tmp_path / f"{tag}_records.csv") == RECORD_COLUMNS
    assert RepetitionRecord.columns() == RECORD_COLUMNS
    assert _header(tmp_path / f"{tag}_report.csv") == ["method", "policy_class", "metric", "value", "sd"]


def test_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = _cfg(a, methods=("NDR", "CF"))
    run_simulation(cfg)
    run_simulation(RunConfig(**{**cfg.__dict__, "output_dir": str(b)}))
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_worker_pool_matches_serial(tmp_path):
    serial = run_simulation(_cfg(tmp_path / "s", reps=3), write=True)
    pooled = run_simulation(_cfg(tmp_path / "p", reps=3, workers=2), write=True)
    for tag in serial:
        for f in ("records.csv", "report.csv"):
            assert (tmp_path / "s" / f"{tag}_{f}").read_bytes() == (tmp_path / "p" / f"{tag}_{f}").read_bytes()
        assert serial[tag].rows() == pooled[tag].rows()


def test_failing_method_is_isolated(tmp_path, monkeypatch):
    import policyforge.cli as cli

    real = cli.estimate

    def flaky(ds, method, settings, stream):
        if method == "CF":
            raise RuntimeError("boom")
        return real(ds, method, settings, stream)

    monkeypatch.setattr(cli, "estimate", flaky)
    reports = run_simulation(_cfg(tmp_path, methods=("CF", "NDR")))
    tag = next(iter(reports))
    assert reports[tag].failures == 2
    assert (tmp_path / f"{tag}_failures.csv").exists()
    assert {m for m, _ in reports[tag].cells} == {"NDR"}


def test_oracle_only_and_dominance(tmp_path):
    cfg = _cfg(tmp_path, oracle_only=True, methods=(), n_list=(300,), settings=(3,))
    out = run_repetition(cfg, cfg.cells()[0], 0)
    assert len(out.records) == 1 and out.records[0].method == "ORACLE"
    assert dominance_holds(out.records)
    learned = run_repetition(_cfg(tmp_path), _cfg(tmp_path).cells()[0], 0).records
    assert dominance_holds(learned)


def test_dominance_detects_violation():
    r = RepetitionRecord(0, "NDR", "plugin", 0.3, 0, 0, 0.2, 0.25, 0, 0, 0, 0.5)
    assert not dominance_holds([r])


def test_full_scale_flag():
    cfg = RunConfig.full_scale()
    assert cfg.reps == FULL_REPS == 500
    assert set(cfg.methods) == {"NDR", "CF", "CFTT", "BART"}
    assert max(cfg.n_list) == 5000


def test_run_config_contract(tmp_path):
    with pytest.raises(ValueError):
        _cfg(tmp_path, reps=0)
    with pytest.raises(ValueError):
        _cfg(tmp_path, methods=("LASSO",))
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"bogus": 1})


def test_toml_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('settings = [2]\nreps = 3\nmethods = ["CF"]\n[trees]\nnuisance_trees = 7\n')
    cfg = RunConfig.from_toml(path)
    assert cfg.settings == (2,) and cfg.reps == 3 and cfg.methods == ("CF",)
    assert cfg.method_settings.nuisance_trees == 7


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("sim") / "data.csv"
    assert main(["simulate", "--setting", "1", "--n", "300", "--seed", "5", "--out", str(path)]) == 0
    return path


def test_analyze_smoke_and_treat_all_identity(sim_csv, tmp_path):
    ds = load_csv(sim_csv)
    table = analyze(ds, "NDR", tmp_path, settings=QUICK)
    for row in table.values():
        assert 0.0 <= row["treated_share"] <= 1.0
    scores = read_scores(tmp_path / "scores.csv")
    assert table["treat_all"]["adv_dr"] == pytest.approx(np.mean(-scores.gamma))
    assert table["treat_all"]["treated_share"] == 1.0
    policy = json.loads((tmp_path / "policy.json").read_text())
    assert policy["tree"]["depth"] == 2
    assert _header(tmp_path / "advantages.csv") == ["policy", "adv_dr", "se_dr", "adv_cate", "se_cate", "treated_share"]


def test_restriction_to_all_covariates_is_a_no_op(sim_csv, tmp_path):
    ds = load_csv(sim_csv)
    analyze(ds, "NDR", tmp_path / "a", settings=QUICK)
    analyze(ds, "NDR", tmp_path / "b", policy_covariates=list(ds.covariate_names), settings=QUICK)
    pa = json.loads((tmp_path / "a" / "policy.json").read_text())
    pb = json.loads((tmp_path / "b" / "policy.json").read_text())
    assert pa["tree"] == pb["tree"] and pa["modified_tree"] == pb["modified_tree"]
    assert (tmp_path / "a" / "advantages.csv").read_bytes() == (tmp_path / "b" / "advantages.csv").read_bytes()


def test_restriction_changes_splits(sim_csv, tmp_path):
    ds = load_csv(sim_csv)
    analyze(ds, "NDR", tmp_path, policy_covariates=["x6", "x7"], settings=QUICK)
    tree = json.loads((tmp_path / "policy.json").read_text())["tree"]["tree"]

    def feats(node):
        return set() if "action" in node else {node["feature_name"]} | feats(node["left"]) | feats(node["right"])

    assert feats(tree) <= {"x6", "x7"}


def test_unknown_restriction_errors(sim_csv, tmp_path):
    with pytest.raises(ValueError, match="not in data"):
        analyze(load_csv(sim_csv), "NDR", tmp_path, policy_covariates=["age"], settings=QUICK)
    code = main(["analyze", "--input", str(sim_csv), "--policy-covariates", "age", "--out-dir", str(tmp_path),
                 "--nuisance-trees", "10"])
    assert code == 2


def test_scores_round_trip(tmp_path):
    s = ScoreSet.build(np.array([0.1, -2.5e-9, 3.0]), np.array([1.0, 0.0, -1.0]), "NDR")
    write_scores(s, tmp_path / "s.csv")
    back = read_scores(tmp_path / "s.csv")
    assert np.array_equal(back.gamma, s.gamma) and np.array_equal(back.tau_hat, s.tau_hat)


def test_cli_end_to_end(sim_csv, tmp_path):
    scores = tmp_path / "scores.csv"
    small = ["--nuisance-trees", "20", "--causal-trees", "40"]
    assert main(["fit", "--method", "cf", "--input", str(sim_csv), "--out", str(scores), *small]) == 0
    assert main(["policy", "--scores", str(scores), "--data", str(sim_csv), "--train-on", "tau",
                 "--out", str(tmp_path / "p.json")]) == 0
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["train_on"] == "tau_hat" and doc["cv_folds"] == 4
    assert main(["blp", "--scores", str(scores), "--data", str(sim_csv), "--covariates", "x1,x6",
                 "--out", str(tmp_path / "blp.csv")]) == 0
    with open(tmp_path / "blp.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["regressor"] for r in rows] == ["intercept", "x1", "x6"]
    assert all(np.isfinite(float(r["se"])) for r in rows)
    out = tmp_path / "run"
    assert main(["run", "--settings", "1", "--prevalences", "rare", "--n", "200", "--reps", "1",
                 "--methods", "ndr", "--workers", "1", "--out", str(out)]) == 0
    assert any(p.name.endswith("_report.json") for p in out.iterdir())


def test_cli_reports_missing_file(tmp_path):
    assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == 2
