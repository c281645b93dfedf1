import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from policyforge.metrics import (
    MetricsReport,
    RepetitionRecord,
    cate_rmse,
    mean_cate_error,
    pct_of_oracle,
    ratio_of_means,
    rmse_across_reps,
)

floats = st.floats(-1e3, 1e3)


def test_cate_rmse_examples():
    tau = np.array([0.3, -0.2, 0.1])
    assert cate_rmse(tau, tau) == 0.0
    assert cate_rmse([0.0, 1.0], [1.0, 1.0]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(ValueError):
        cate_rmse([0.0], [0.0, 1.0])


def test_mean_cate_error():
    assert mean_cate_error([0.0, 1.0], [1.0, 1.0]) == 0.5
    assert mean_cate_error([1.0, -1.0], [-1.0, 1.0]) == 0.0


@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=30), st.randoms())
def test_cate_rmse_permutation_invariant(pairs, rnd):
    a, b = map(np.array, zip(*pairs))
    perm = list(range(len(a)))
    rnd.shuffle(perm)
    assert cate_rmse(a[perm], b[perm]) == pytest.approx(cate_rmse(a, b), rel=1e-12)


def test_rmse_across_reps_examples():
    assert rmse_across_reps([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse_across_reps([1.0, 1.0], [0.0, 2.0]) == 1.0


@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=30))
def test_rmse_across_reps_symmetric(pairs):
    a, b = map(np.array, zip(*pairs))
    assert rmse_across_reps(a, b) == rmse_across_reps(b, a)


def test_pct_of_oracle_examples():
    oracle = np.array([0.2, 0.4])
    assert pct_of_oracle(oracle, oracle) == 1.0
    assert pct_of_oracle(np.array([0.5, 1.5]) * oracle, oracle) == pytest.approx(1.0)
    # mean of ratios, not ratio of means
    assert pct_of_oracle([0.1, 0.4], [0.2, 0.4]) == pytest.approx(0.75)
    assert ratio_of_means([0.1, 0.4], [0.2, 0.4]) == pytest.approx(0.5 / 0.6)


def test_pct_of_oracle_excludes_zero_oracle_with_warning():
    with pytest.warns(RuntimeWarning, match="1 repetition"):
        v = pct_of_oracle([0.1, 0.0], [0.2, 0.0])
    assert v == 0.5


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(1e-3, 1)), min_size=1, max_size=20))
def test_pct_of_oracle_bounded_when_oracle_dominates(pairs):
    learned, oracle = map(np.array, zip(*pairs))
    learned = np.minimum(learned, oracle)
    assert pct_of_oracle(learned, oracle) <= 1.0


def _record(rep, method="NDR", pclass="tree", true=0.1, oracle=0.2, **kw):
    base = dict(
        rep_id=rep, method=method, policy_class=pclass, true_advantage=true, est_advantage_dr=true + 0.01,
        est_advantage_cate=true - 0.02, oracle_advantage=oracle, oracle_tree_advantage=0.15,
        cate_rmse=0.05, mean_cate_error=0.01, ate_error=0.03, treated_share=0.4,
    )
    base.update(kw)
    return RepetitionRecord(**base)


def test_report_aggregates():
    recs = [_record(0, true=0.1), _record(1, true=0.2, ate_error=-0.04), _record(0, pclass="plugin")]
    rep = MetricsReport.from_records(recs, failures=2)
    assert rep.n_reps == 2 and rep.failures == 2
    assert rep.get("NDR", "tree", "pct_of_oracle") == pytest.approx(0.75)
    assert rep.get("NDR", "tree", "rmse_true_adv") == pytest.approx(np.sqrt((0.1**2 + 0.0**2) / 2))
    assert rep.get("NDR", "tree", "rmse_est_adv_dr") == pytest.approx(0.01)
    assert rep.get("NDR", "tree", "rmse_est_adv_cate") == pytest.approx(0.02)
    assert rep.get("NDR", "tree", "ate_rmse") == pytest.approx(np.sqrt((0.03**2 + 0.04**2) / 2))
    assert rep.get("NDR", "tree", "oracle_tree_ratio") == pytest.approx(0.75)
    for row in rep.rows():
        assert np.isfinite(row[3]) and row[4] >= 0


def test_report_outputs(tmp_path):
    rep = MetricsReport.from_records([_record(0), _record(1)])
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,policy_class,metric,value,sd"
    assert len(lines) == 1 + len(MetricsReport.METRICS)
    rep.write_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["results"]["NDR"]["tree"]["pct_of_oracle"]["value"] == 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        MetricsReport.from_records([_record(0)])
