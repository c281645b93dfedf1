import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from policyforge.dgp import (
    DgpSpec,
    gen_covariates,
    generate,
    oracle_value,
    propensity,
    response_surfaces,
)
from policyforge.rng import RngStream

ALL_SPECS = [
    DgpSpec(setting=s, prevalence=p, outcome_kind=k, confounding=c, n=400)
    for s in (1, 2, 3)
    for p in ("common", "rare")
    for k in ("binary", "continuous")
    for c in ("none", "mild")
]


def _expit(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_covariate_moments_pinned():
    x = gen_covariates(100_000, RngStream(20240101))
    assert 0.49 < x[:, 5].mean() < 0.51
    assert 0.98 < x[:, 0].var() < 1.02
    assert x[:, 5].mean() == pytest.approx(0.50091, abs=1e-12)
    assert x[:, 0].var() == pytest.approx(1.0071603560327214, rel=1e-12)


def test_single_row():
    x = gen_covariates(1, RngStream(3))
    assert x.shape == (1, 10)
    assert set(np.unique(x[:, 5:])) <= {0.0, 1.0}


def test_propensity_examples():
    rng = np.random.default_rng(0)
    assert propensity(rng.normal(size=10), "none") == 0.2
    assert propensity(np.zeros(10), "mild") == pytest.approx(_expit(1.6))
    assert propensity(np.zeros(10), "mild") == pytest.approx(0.8320, abs=1e-4)
    x = np.zeros(10)
    x[2] = 1.0
    assert propensity(x, "mild") == pytest.approx(0.3100, abs=1e-4)


def _surfaces(setting, prevalence, x=None, eps=None, kind="binary"):
    spec = DgpSpec(setting=setting, prevalence=prevalence, outcome_kind=kind)
    x = np.zeros((1, 10)) if x is None else x
    eps = np.zeros((1, len(spec.noise_scales))) if eps is None else eps
    return response_surfaces(x, eps, spec)


def test_setting1_common_at_zero_noise():
    m0, m1 = _surfaces(1, "common")
    assert m0[0] == pytest.approx(_expit(0.4))
    assert m0[0] == pytest.approx(0.5987, abs=1e-4)
    assert m1[0] == 0.5
    assert (m1 - m0)[0] == pytest.approx(-0.0987, abs=1e-4)


def test_setting1_rare_at_zero_noise():
    m0, m1 = _surfaces(1, "rare")
    assert m0[0] == pytest.approx(0.0573, abs=1e-4)
    assert m1[0] == pytest.approx(0.0219, abs=1e-4)


def test_setting3_common_zero_inputs_zero_effect():
    m0, m1 = _surfaces(3, "common")
    assert m0[0] == m1[0] == 0.5


def test_unknown_setting_rejected():
    with pytest.raises(ValueError):
        DgpSpec(setting=4)


def test_treated_share_without_confounding():
    ds = generate(DgpSpec(setting=1, prevalence="common", confounding="none", n=100_000), RngStream(7))
    assert 0.195 < ds.w.mean() < 0.205


@pytest.mark.xfail(strict=True, reason="printed rare Setting 1 surfaces give ~5% events, not ~2%")
def test_setting1_rare_event_rate_matches_reported_table():
    ds = generate(DgpSpec(setting=1, prevalence="rare", confounding="none", n=100_000), RngStream(7))
    assert 0.015 < ds.y.mean() < 0.027


def test_setting1_rare_event_rate_pinned():
    ds = generate(DgpSpec(setting=1, prevalence="rare", confounding="none", n=100_000), RngStream(7))
    assert ds.y.mean() == pytest.approx(0.04985, abs=1e-12)


def test_zero_noise_removes_heterogeneity():
    ds = generate(DgpSpec(setting=1, nu=(0.0, 0.0, 0.0), n=500), RngStream(2))
    assert np.ptp(ds.truth.tau) == 0.0


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.tag)
def test_truth_invariants(spec):
    ds = generate(spec, RngStream(11))
    t = ds.truth
    assert_array_equal(t.tau, t.m1 - t.m0)
    assert_array_equal(t.oracle_action, (t.tau < 0).astype(t.oracle_action.dtype))
    if spec.outcome_kind == "binary":
        assert np.all((t.m0 > 0) & (t.m0 < 1) & (t.m1 > 0) & (t.m1 < 1))
        assert set(np.unique(ds.y)) <= {0.0, 1.0}
    assert ds.harmful
    assert_array_equal(ds.w, ds.w.astype(bool))


@pytest.mark.parametrize("spec", ALL_SPECS[:4], ids=lambda s: s.tag)
def test_generate_deterministic(spec):
    a = generate(spec, RngStream(5).derive(1))
    b = generate(spec, RngStream(5).derive(1))
    assert_array_equal(a.x, b.x)
    assert_array_equal(a.y, b.y)
    assert_array_equal(a.truth.tau, b.truth.tau)


def test_oracle_value_examples():
    tau = np.array([-0.1, 0.2])
    assert oracle_value(tau, np.array([1, 0])) == pytest.approx(0.15)
    assert oracle_value(tau, np.array([1, 1])) == pytest.approx(-0.05)


def test_oracle_dominates_all_assignments():
    ds = generate(DgpSpec(setting=3, prevalence="common", n=10), RngStream(4))
    best = oracle_value(ds.truth, ds.truth.oracle_action)
    values = [oracle_value(ds.truth, np.array(p)) for p in itertools.product((0, 1), repeat=10)]
    assert best == pytest.approx(max(values), abs=1e-15)
    assert best == pytest.approx(np.mean(np.abs(ds.truth.tau)))


@settings(max_examples=200, deadline=None)
@given(
    tau=st.lists(st.floats(-1, 1), min_size=1, max_size=12),
    seed=st.integers(0, 2**32 - 1),
)
def test_oracle_dominance_random_policies(tau, seed):
    tau = np.asarray(tau)
    oracle = (tau < 0).astype(int)
    pi = np.random.default_rng(seed).integers(0, 2, tau.size)
    assert oracle_value(tau, oracle) >= oracle_value(tau, pi) - 1e-15


@settings(max_examples=100, deadline=None)
@given(x=st.lists(st.floats(-50, 50), min_size=10, max_size=10))
def test_binary_surfaces_strictly_inside_unit_interval(x):
    row = np.asarray(x)[None, :]
    eps = np.array([[0.1, -0.2, 0.3]])
    for s, p in itertools.product((1, 2, 3), ("common", "rare")):
        m0, m1 = response_surfaces(row, eps, DgpSpec(setting=s, prevalence=p))
        # expit saturates in floating point only far outside the covariate range
        assert np.all((m0 >= 0) & (m0 <= 1) & (m1 >= 0) & (m1 <= 1))
    e = propensity(np.asarray(x), "mild")
    assert 0.0 <= e <= 1.0


def test_continuous_setting2_rare_needs_zeta():
    spec = DgpSpec(setting=2, prevalence="rare", outcome_kind="continuous")
    with pytest.raises(ValueError):
        response_surfaces(np.zeros((1, 10)), np.zeros((1, 6)), spec)
    m0, _ = response_surfaces(np.zeros((1, 10)), np.zeros((1, 6)), spec, zeta=np.ones((1, 3)))
    assert_allclose(m0, -0.105 + _expit(-2.3))
