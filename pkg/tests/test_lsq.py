import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from didimpute import materialize_design
from didimpute.exceptions import EmptyDesign, NoConvergence
from didimpute.lsq import DenseFactor, LsqProblem, project_out, solve


def fe_design(units, periods, n_cov, rng):
    """Unit dummies, period dummies (first dropped) and dense covariates."""
    n = len(units)
    nu, nt = units.max() + 1, periods.max() + 1
    u = sp.csr_matrix((np.ones(n), (np.arange(n), units)), shape=(n, nu))
    keep = periods > 0
    t = sp.csr_matrix((np.ones(keep.sum()), (np.arange(n)[keep], periods[keep] - 1)), shape=(n, nt - 1))
    x = rng.normal(size=(n, n_cov))
    z = sp.hstack([u, t, sp.csr_matrix(x)]).tocsr()
    blocks = [np.arange(nu), np.arange(nu, nu + nt - 1), np.arange(nu + nt - 1, nu + nt - 1 + n_cov)]
    return z, blocks


def test_three_by_three_untreated_twfe(three_by_three):
    d = materialize_design(three_by_three)
    y0 = three_by_three.y[d.omega0]
    sol = solve(LsqProblem(d.z0, y0))
    coef = dict(zip(d.labels, sol.coef))
    lab = {three_by_three.label(i): three_by_three.y[i] for i in d.omega0}
    hand_beta2 = ((lab[("B", 2)] - lab[("B", 1)]) + (lab[("C", 2)] - lab[("C", 1)])) / 2
    assert coef["period[2]"] == pytest.approx(hand_beta2, abs=1e-12)
    assert coef["period[2]"] == pytest.approx(1.0, abs=1e-12)
    assert coef["period[3]"] == pytest.approx(2.0, abs=1e-12)
    assert np.max(np.abs(sol.residuals)) < 1e-12


def test_mean_of_ones():
    sol = solve(LsqProblem(np.ones((3, 1)), np.array([1.0, 2.0, 3.0])))
    assert sol.coef[0] == pytest.approx(2.0)
    sol = solve(LsqProblem(sp.csr_matrix(np.ones((3, 1))), np.array([1.0, 2.0, 3.0])), method="alternating")
    assert sol.coef[0] == pytest.approx(2.0)


def test_dense_and_alternating_agree(rng):
    units = rng.integers(0, 40, size=200)
    periods = rng.integers(0, 11, size=200)
    z, blocks = fe_design(units, periods, 3, rng)
    assert z.shape[1] == 40 + 10 + 3
    y = rng.normal(size=200) + z @ rng.normal(size=z.shape[1])
    dense = solve(LsqProblem(z, y))
    alt = solve(LsqProblem(z, y, blocks=blocks), method="alternating")
    np.testing.assert_allclose(alt.fitted, dense.fitted, rtol=0, atol=1e-8 * np.abs(y).max())
    # covariate coefficients are identified and agree
    cov = blocks[2]
    rel = np.abs(alt.coef[cov] - dense.coef[cov]) / np.abs(dense.coef[cov])
    assert rel.max() <= 1e-8


def test_weighted_solution_matches_scaled_rows(rng):
    x = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    w = rng.uniform(0.2, 3.0, size=30)
    sol = solve(LsqProblem(x, y, obs_weights=w))
    ref = np.linalg.lstsq(x * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    np.testing.assert_allclose(sol.coef, ref, atol=1e-12)


def test_no_convergence_reported(rng):
    units = rng.integers(0, 10, size=60)
    periods = rng.integers(0, 5, size=60)
    z, blocks = fe_design(units, periods, 1, rng)
    y = rng.normal(size=60)
    with pytest.raises(NoConvergence) as err:
        solve(LsqProblem(z, y, blocks=blocks), method="alternating", max_iter=1)
    assert err.value.iterations == 1
    assert err.value.last_change > 0


def test_empty_design():
    with pytest.raises(EmptyDesign):
        solve(LsqProblem(np.zeros((0, 2)), np.zeros(0)))


def test_rank_report_and_pinned_columns():
    z = np.column_stack([np.ones(4), [1, 1, 0, 0], [0, 0, 1, 1]])
    fac = DenseFactor(z)
    assert fac.rank == 2
    assert len(fac.dependent) == 1
    assert fac.nullspace().shape == (3, 1)


def test_normalisation_invariance_of_fitted_values(rng):
    """Pinning different redundant columns changes coefficients, not fitted values."""
    units = np.repeat(np.arange(6), 4)
    periods = np.tile(np.arange(4), 6)
    full = np.column_stack([np.eye(6)[units], np.eye(4)[periods]])  # rank 9 of 10
    y = rng.normal(size=24)
    a = DenseFactor(full)
    perm = np.r_[6:10, 0:6]
    b = DenseFactor(full[:, perm])
    assert a.rank == b.rank == 9
    np.testing.assert_allclose(a.fitted(y), b.fitted(y), atol=1e-9)
    # explicit pins: drop the first period dummy vs the last unit dummy
    f1 = full[:, np.r_[0:6, 7:10]] @ np.linalg.lstsq(full[:, np.r_[0:6, 7:10]], y, rcond=None)[0]
    f2 = full[:, np.r_[0:5, 6:10]] @ np.linalg.lstsq(full[:, np.r_[0:5, 6:10]], y, rcond=None)[0]
    np.testing.assert_allclose(f1, f2, atol=1e-9)
    np.testing.assert_allclose(a.fitted(y), f1, atol=1e-9)


def test_demean_by_unit():
    units = np.array([0, 0, 0, 1, 1])
    y = np.array([1.0, 2.0, 6.0, 4.0, 8.0])
    out = project_out(LsqProblem(np.zeros((5, 0)), y), [units])
    assert abs(out.response[:3].mean()) < 1e-14
    assert abs(out.response[3:].mean()) < 1e-14


def test_fwl_static_regression(two_by_three):
    p = two_by_three
    d = p.treated.astype(float)
    unit_fe = np.eye(2)[p.unit]
    period_fe = np.eye(3)[p.time - 1][:, 1:]
    joint = np.column_stack([d, unit_fe, period_fe])
    tau_joint = np.linalg.lstsq(joint, p.y, rcond=None)[0][0]
    res = project_out(LsqProblem(d[:, None], p.y), [p.unit, p.time])
    tau_fwl = solve(res).coef[0]
    assert tau_fwl == pytest.approx(tau_joint, abs=1e-8)


def test_projecting_orthogonal_block_leaves_response():
    y = np.array([1.0, -1.0, 2.0, -2.0])
    groups = np.array([0, 0, 1, 1])
    out = project_out(LsqProblem(np.zeros((4, 0)), y), [groups])
    np.testing.assert_allclose(out.response, y, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(5, 40), st.integers(1, 4))
def test_solution_invariants(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    y = rng.normal(size=n)
    sol = solve(LsqProblem(x, y))
    np.testing.assert_allclose(sol.fitted + sol.residuals, y, atol=1e-12 * max(1, np.abs(y).max()))
    assert np.max(np.abs(x.T @ sol.residuals)) <= 1e-9 * max(1.0, np.abs(x).max() * np.abs(y).max() * n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_alternating_ssr_is_monotone(seed):
    rng = np.random.default_rng(seed)
    units = rng.integers(0, 8, size=50)
    periods = rng.integers(0, 6, size=50)
    z, blocks = fe_design(units, periods, 2, rng)
    y = rng.normal(size=50)
    sol = solve(LsqProblem(z, y, blocks=blocks), method="alternating")
    path = np.array(sol.ssr_path)
    assert np.all(np.diff(path) <= 1e-10 * path[0])
