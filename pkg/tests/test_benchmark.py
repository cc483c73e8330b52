import numpy as np
import pytest

from didimpute import (
    DgpSpec,
    EstimandWeights,
    ImpliedWeights,
    NoiseSpec,
    Panel,
    build_estimand,
    exact_moments,
    implied_weights,
    materialize_design,
    reference_estimator,
    run_table1,
)
from didimpute.benchmark import DEFAULT_SEED, dgp_panel
from didimpute.exceptions import DimensionMismatch, EmptyControlGroup

from .test_design import cohort_panel

SMALL = DgpSpec(I=80, T=6, reps=300, seed=7)


def did_weights():
    p = Panel.from_arrays(list("aabb"), [1, 2, 1, 2], np.zeros(4), [2, 2, None, None])
    v = np.zeros(4)
    for lab, c in {("a", 2): 1, ("a", 1): -1, ("b", 2): -1, ("b", 1): 1}.items():
        v[p.index_of(*lab)] = c
    return ImpliedWeights(p, v)


def test_exact_moments_two_by_two():
    iw = did_weights()
    assert exact_moments(iw)[0] == pytest.approx(4.0)
    var = exact_moments(iw, NoiseSpec("ar1", rho=0.5))[0]
    assert var == pytest.approx(2.0)
    # callable covariance
    assert exact_moments(iw, lambda t: 2.0 * np.eye(len(t)))[0] == pytest.approx(8.0)


def test_exact_moments_bias_and_errors():
    iw = did_weights()
    assert exact_moments(iw, contamination={("a", 1): 1.0})[1] == pytest.approx(-1.0)
    with pytest.raises(DimensionMismatch):
        exact_moments(iw, contamination=np.zeros(3))
    bad = ImpliedWeights(iw.panel, np.zeros(5))
    with pytest.raises(DimensionMismatch):
        exact_moments(bad)


def test_not_yet_treated_uses_single_reference_period(three_by_three):
    p = three_by_three
    est, iw = reference_estimator(p, "not_yet_treated", 0)
    y = {p.label(i): p.y[i] for i in range(p.n_obs)}
    catt3 = (y["B", 3] - y["B", 2]) - (y["C", 3] - y["C", 2])
    catt2 = (y["A", 2] - y["A", 1]) - 0.5 * ((y["B", 2] - y["B", 1]) + (y["C", 2] - y["C", 1]))
    assert est == pytest.approx(0.5 * catt2 + 0.5 * catt3, abs=1e-12)
    # Y_C1 enters only through the cohort-2 cell, never through CATT_{3,3}
    _, only3 = reference_estimator(p.subset(p.units[p.unit] != "A"), "not_yet_treated", 0)
    q = p.subset(p.units[p.unit] != "A")
    assert only3.v[q.index_of("C", 1)] == 0.0


def test_non_staggered_matches_classic_did():
    p = cohort_panel([3, 3, 3], range(1, 5), never=2)
    rng = np.random.default_rng(0)
    p = p.with_outcome(rng.normal(size=p.n_obs))
    treated = p.has_event[np.unique(p.unit, return_index=True)[1]]
    y = p.y.reshape(p.n_units, -1)
    classic = (y[treated, 2].mean() - y[treated, 1].mean()) - (y[~treated, 2].mean() - y[~treated, 1].mean())
    a, _ = reference_estimator(p, "not_yet_treated", 0)
    b, _ = reference_estimator(p, "last_cohort", 0)
    assert a == pytest.approx(classic, abs=1e-12)
    assert b == pytest.approx(classic, abs=1e-12)


def test_reference_weights_are_unbiased_and_match_estimand():
    p = dgp_panel(SMALL)
    z = materialize_design(p).z.toarray()
    for h in range(0, 4):
        w = build_estimand(p, "horizon", h=h).vector(p)
        for kind in ("not_yet_treated", "last_cohort"):
            _, iw = reference_estimator(p, kind, h)
            np.testing.assert_allclose(iw.v[p.treated], w[p.treated], atol=1e-12)
            assert np.max(np.abs(z.T @ iw.v)) <= 1e-10


def test_empty_control_group():
    p = cohort_panel([2, 3], range(1, 4))
    with pytest.raises(EmptyControlGroup):
        reference_estimator(p, "last_cohort", 1)


def test_equal_sensitivity_to_linear_pretrend():
    p = dgp_panel(SMALL)
    k = p.rel_time.astype(float)
    contamination = np.where(p.treated, 0.0, 1.0 + 2.0 * k)
    contamination = np.where(p.has_event, contamination, 0.0)
    for h in range(0, 4):
        w = build_estimand(p, "horizon", h=h)
        target = -np.sum(w.vector(p) * (1.0 + 2.0 * k))
        vs = [implied_weights(p, w=w)] + [reference_estimator(p, kind, h)[1]
                                          for kind in ("not_yet_treated", "last_cohort")]
        for iw in vs:
            assert exact_moments(iw, contamination=contamination)[1] == pytest.approx(target, abs=1e-9)


def test_cohort_draw_is_reproducible():
    a, b = DgpSpec(seed=DEFAULT_SEED).cohorts(), DgpSpec(seed=DEFAULT_SEED).cohorts()
    np.testing.assert_array_equal(a, b)
    counts = np.bincount(a, minlength=8)[2:]
    assert counts.tolist() == [41, 38, 41, 44, 41, 45]


def test_small_table_properties():
    rep = run_table1(SMALL, columns=("baseline", "more_pre"))
    t = rep.table
    base = t[t.column == "baseline"]
    for h in sorted(base.horizon.unique()):
        v = {e: rep.value("baseline", e, h) for e in ("imputation", "not_yet_treated", "last_cohort")}
        assert v["imputation"] <= v["not_yet_treated"] + 1e-12
        assert v["imputation"] <= v["last_cohort"] + 1e-12
    for _, row in base.iterrows():
        # variance of the sample variance under normal errors: 2 s^4 / (n - 1)
        se_var = row.exact_variance * np.sqrt(2.0 / (row.reps - 1))
        assert abs(row.mc_variance - row.exact_variance) <= 3 * se_var
        se_mean = np.sqrt(row.exact_variance / row.reps)
        assert abs(row.mean_estimate - (row.horizon + 1)) <= 4 * se_mean
        assert 0.0 <= row.coverage <= 1.0
    for h in sorted(base.horizon.unique()):
        assert rep.value("more_pre", "imputation", h) < rep.value("baseline", "imputation", h)
        for kind in ("not_yet_treated", "last_cohort"):
            assert rep.value("more_pre", kind, h) == pytest.approx(rep.value("baseline", kind, h), rel=1e-12)


def test_threads_do_not_change_results():
    spec = DgpSpec(I=40, reps=60, seed=3)
    a = run_table1(spec, columns=("baseline",), threads=1, chunk=7).table
    b = run_table1(spec, columns=("baseline",), threads=3, chunk=20).table
    np.testing.assert_allclose(a.mc_variance, b.mc_variance, rtol=1e-12)
    np.testing.assert_allclose(a.coverage, b.coverage)


def test_anticipation_bias_matches_weights():
    spec = DgpSpec(I=80, reps=2, seed=7)
    rep = run_table1(spec, columns=("anticipation",))
    p = dgp_panel(spec)
    delta = 1 / np.sqrt(80)
    w = build_estimand(p, "horizon", h=0)
    iw = implied_weights(p, w=w)
    expected = delta * iw.v[p.has_event & (p.rel_time == -1)].sum()
    assert rep.value("anticipation", "imputation", 0, "exact_bias") == pytest.approx(expected, abs=1e-12)
    assert expected < 0
