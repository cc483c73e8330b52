"""Conservative clustered standard errors and the untreated-only pre-trend test.

Standard errors treat units as clusters.  For a linear estimator ``v' Y`` the
variance estimate is ``sum_i (sum_{t untreated} v_it e_it + sum_{t treated}
v_it e~_it)^2`` where ``e`` are untreated-model residuals and ``e~`` are
effect estimates centred on a weighted group average ``tau_bar``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.stats

from ._validation import check_choice, check_positive_int
from .design import OutcomeModelSpec, materialize_design
from .exceptions import DegenerateDenominator, InsufficientPreperiods, SingularCovariance
from .panel import Panel

logger = logging.getLogger(__name__)

__all__ = [
    "PretestResult",
    "VarianceResult",
    "VarianceSpec",
    "conservative_se",
    "covariance_matrix",
    "default_leads",
    "pretest",
    "taubar_groups",
    "variance_core",
]

TAUBAR_MODES = ("single", "by_cohort_period", "by_horizon")
#: minimum treated units per cohort-period cell for the automatic cell-wise mode
MIN_CELL_UNITS = 5


@dataclass(frozen=True)
class VarianceSpec:
    """``taubar_mode``: ``auto``, ``single``, ``by_cohort_period`` or ``by_horizon``."""

    taubar_mode: str = "auto"
    leave_out: bool = False

    def __post_init__(self):
        check_choice(self.taubar_mode, ("auto",) + TAUBAR_MODES, "taubar_mode")


@dataclass(eq=False)
class VarianceResult:
    sigma_sq: float
    mode: str
    taubar: Dict
    eps_tilde: np.ndarray
    scores: np.ndarray
    leave_out: bool = False
    flags: List[str] = field(default_factory=list)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma_sq))


def _auto_mode(panel: Panel, v: np.ndarray) -> str:
    t1 = np.flatnonzero(panel.treated & (v != 0))
    if len(t1) == 0:
        return "single"
    cells = pd.Series(1, index=pd.MultiIndex.from_arrays([panel.event[t1], panel.time[t1]]))
    return "by_cohort_period" if cells.groupby(level=[0, 1]).size().min() >= MIN_CELL_UNITS else "single"


def taubar_groups(panel: Panel, idx: np.ndarray, mode: str) -> np.ndarray:
    """Integer group label ``a(it)`` for treated rows ``idx``."""
    if mode == "single":
        return np.zeros(len(idx), dtype=np.int64)
    if mode == "by_cohort_period":
        keys = panel.event[idx].astype(np.int64) * (1 << 32) + panel.time[idx].astype(np.int64)
    elif mode == "by_horizon":
        keys = panel.rel_time[idx].astype(np.int64)
    else:
        raise ValueError(f"unknown taubar mode {mode!r}")
    return np.unique(keys, return_inverse=True)[1].astype(np.int64)


def conservative_se(fit, weights, spec: Optional[VarianceSpec] = None) -> VarianceResult:
    """Conservative unit-clustered variance of ``v' Y``.

    Parameters
    ----------
    fit : FitResult
        Imputation fit providing untreated residuals and ``tau_hat``.
    weights : ImpliedWeights
        Implied weights of the estimator (from the same design).
    spec : VarianceSpec, optional

    Returns
    -------
    VarianceResult
        ``sigma_sq``, the ``tau_bar`` value per group, centred effects
        ``eps_tilde`` over treated rows and per-unit scores.

    Notes
    -----
    With groups ``a``, ``v_ia = sum_{t in a} v_it`` and
    ``tau_bar_a = sum_j v_ja (sum_{t in a} v_jt tau_hat_jt) / sum_j v_ja^2``.
    A zero denominator sets ``tau_bar_a = 0`` (flagged).  With ``leave_out``
    the centred effect of unit ``i`` is divided by ``1 - v_ia^2 / sum_j v_ja^2``,
    which equals centring on the group average that excludes unit ``i``.
    """
    spec = spec or VarianceSpec()
    panel = fit.panel
    v = np.asarray(weights.v, dtype=float)
    mode = _auto_mode(panel, v) if spec.taubar_mode == "auto" else spec.taubar_mode
    core = variance_core(panel, fit.design.omega0, fit.design.omega1, v,
                         np.asarray(fit.tau_hat, dtype=float)[:, None],
                         np.asarray(fit.residuals, dtype=float)[:, None], mode, spec.leave_out)
    return VarianceResult(float(core.sigma_sq[0]), mode,
                          dict(zip(core.labels, map(float, core.taubar[:, 0]))),
                          core.eps[:, 0], core.scores[:, 0], spec.leave_out, core.flags)


@dataclass(eq=False)
class _Core:
    sigma_sq: np.ndarray
    taubar: np.ndarray
    eps: np.ndarray
    scores: np.ndarray
    labels: list
    flags: List[str]


def variance_core(panel: Panel, omega0, omega1, v, tau, resid, mode: str, leave_out: bool = False) -> _Core:
    """Vectorised variance computation; ``tau`` (N1 x R) and ``resid`` (N0 x R)
    hold one column per outcome draw sharing the weights ``v``."""
    flags = []
    v1 = v[omega1]
    bad = ~np.isfinite(tau)
    if np.any(bad & (v1 != 0)[:, None]):
        flags.append("non_imputable_in_variance")
    tau = np.where(bad, 0.0, tau)
    active = v1 != 0
    idx = omega1[active]
    units = panel.unit[idx]
    if mode == "by_cohort_period" and len(idx) and np.any(np.bincount(units) > 1):
        flags.append("taubar_multi_period_units")
    groups = taubar_groups(panel, idx, mode)
    ng = int(groups.max()) + 1 if len(groups) else 0
    m = max(ng, 1)
    ukeys, inv = np.unique(units.astype(np.int64) * m + groups, return_inverse=True)
    va = v1[active]
    ta = tau[active]
    nk = len(ukeys)
    v_ia = np.bincount(inv, weights=va, minlength=nk)
    num_ia = np.zeros((nk, ta.shape[1]))
    np.add.at(num_ia, inv, va[:, None] * ta)
    g_of = ukeys % m
    den = np.bincount(g_of, weights=v_ia ** 2, minlength=ng)
    num = np.zeros((ng, ta.shape[1]))
    np.add.at(num, g_of, v_ia[:, None] * num_ia)
    zero = den <= 0
    if np.any(zero):
        flags.append("degenerate_denominator")
    tbar = np.where(zero[:, None], 0.0, num / np.where(zero, 1.0, den)[:, None])
    eps = np.zeros((len(omega1), ta.shape[1]))
    eps[active] = ta - tbar[groups]
    if leave_out and len(idx):
        ok = den[g_of] > 0
        share = np.where(ok, v_ia ** 2 / np.where(ok, den[g_of], 1.0), 0.0)
        if np.any(share >= 1 - 1e-12):
            raise DegenerateDenominator("leave-out rescaling undefined: a group has a single contributing unit")
        eps[active] = eps[active] / (1.0 - share[inv])[:, None]
    contrib = np.zeros((panel.n_obs, ta.shape[1]))
    contrib[omega0] = v[omega0][:, None] * resid
    contrib[omega1] = v1[:, None] * eps
    scores = np.zeros((panel.n_units, ta.shape[1]))
    np.add.at(scores, panel.unit, contrib)
    labels = _group_labels(panel, idx, groups, mode, ng)
    return _Core(np.sum(scores ** 2, axis=0), tbar, eps, scores, labels, flags)


def _group_labels(panel, idx, groups, mode, ng):
    if mode == "single":
        return ["all"][:ng] if ng else []
    out = [None] * ng
    for g, i in zip(groups, idx):
        if out[g] is None:
            out[g] = (int(panel.event[i]), int(panel.time[i])) if mode == "by_cohort_period" \
                else int(panel.rel_time[i])
    return out


def covariance_matrix(fits: Sequence, weights: Sequence, spec: Optional[VarianceSpec] = None) -> np.ndarray:
    """Clustered covariance of several estimators on one panel.

    Each component's per-unit score is computed as in :func:`conservative_se`;
    the matrix is the sum over units of score outer products.
    """
    if len(fits) != len(weights):
        raise ValueError("fits and weights must have the same length")
    if not fits:
        return np.zeros((0, 0))
    n_units = fits[0].panel.n_units
    s = np.column_stack([conservative_se(f, w, spec).scores for f, w in zip(fits, weights)])
    if s.shape[0] != n_units:
        raise ValueError("fits do not share a panel")
    return s.T @ s


# --- pre-trend test ---------------------------------------------------------------


@dataclass(eq=False)
class PretestResult:
    """Joint test that lead coefficients ``gamma`` are zero.

    ``gamma_hat[j]`` belongs to relative time ``relative_times[j]``.
    """

    gamma_hat: np.ndarray
    cov_gamma: np.ndarray
    stat: float
    df: tuple
    p_value: float
    mode: str
    relative_times: List[int]
    names: List[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_gamma), 0, None))

    def to_dict(self) -> Dict:
        return {"gamma": [float(g) for g in self.gamma_hat], "se": [float(s) for s in self.se],
                "relative_time": list(self.relative_times), "stat": float(self.stat),
                "df": list(self.df), "p_value": float(self.p_value), "mode": self.mode}


def default_leads(panel: Panel) -> int:
    """``min(4, max observed pre-periods - 1)``."""
    pre = -panel.rel_time[panel.has_event & ~panel.treated]
    maxpre = int(pre.max()) if len(pre) else 0
    return min(4, maxpre - 1)


def pretest(panel: Panel, model: Optional[OutcomeModelSpec] = None, leads: Optional[int] = None,
            mode: str = "homoskedastic_F", custom: Optional[Dict[str, np.ndarray]] = None,
            design=None) -> PretestResult:
    """Test for pre-trends using untreated observations only.

    The untreated-outcome regression is augmented with indicators
    ``1[K_it = -j]`` for ``j = 1..leads`` (earlier periods are the reference)
    or with user-supplied ``custom`` columns (arrays over all panel rows).
    ``gamma`` is estimated by partialling the model out of the indicators.

    Parameters
    ----------
    mode : {"homoskedastic_F", "cluster_wald"}
        ``homoskedastic_F`` compares the classical F statistic with
        ``F(q, N0 - rank)``; ``cluster_wald`` uses a unit-clustered covariance
        with the CR1 factor ``G/(G-1) (N-1)/(N-p)`` and a chi-square reference.
    """
    check_choice(mode, ("homoskedastic_F", "cluster_wald"), "mode")
    design = design or materialize_design(panel, model)
    o0 = design.omega0
    if custom:
        names = list(custom)
        wmat = np.column_stack([np.asarray(custom[k], dtype=float)[o0] for k in names])
        rel = []
    else:
        k = default_leads(panel) if leads is None else leads
        if k < 1:
            raise InsufficientPreperiods(f"need at least one lead; got k={k}")
        check_positive_int(k, "leads")
        rel = [-j for j in range(1, k + 1)]
        kk = panel.rel_time[o0]
        he = panel.has_event[o0]
        wmat = np.column_stack([(he & (kk == h)).astype(float) for h in rel])
        empty = [h for h, c in zip(rel, wmat.sum(axis=0)) if c == 0]
        if empty:
            raise InsufficientPreperiods(f"no untreated observations at relative time(s) {empty}")
        names = [f"lead[{h}]" for h in rel]
    q = wmat.shape[1]
    fac = design.z0_factor
    y0 = panel.y[o0]
    ow = panel.obs_weight[o0]
    wt = wmat - fac.fitted(wmat)
    yt = y0 - fac.fitted(y0)
    xtx = wt.T @ (wt * ow[:, None])
    ev = np.linalg.eigvalsh(xtx)
    if ev.min() <= 1e-10 * max(ev.max(), 1e-300):
        raise SingularCovariance("lead indicators are collinear with the untreated-outcome model")
    bread = np.linalg.inv(xtx)
    gamma = bread @ (wt.T @ (ow * yt))
    e = yt - wt @ gamma
    n0 = len(o0)
    rank = fac.rank + q
    dof = n0 - rank
    ssr = float(np.sum(ow * e ** 2))
    scale_y = max(float(np.sum(ow * y0 ** 2)), 1e-300)
    if mode == "homoskedastic_F":
        if dof <= 0:
            raise InsufficientPreperiods("no residual degrees of freedom for the F test")
        s2 = ssr / dof
        num = float(gamma @ xtx @ gamma) / q
        cov = s2 * bread
        tiny = 1e-20 * scale_y
        if num <= tiny and ssr <= tiny:
            stat, pval = 0.0, 1.0
        elif ssr <= tiny:
            stat, pval = float("inf"), 0.0
        else:
            stat = num / s2
            pval = float(scipy.stats.f.sf(stat, q, dof))
        df = (q, int(dof))
    else:
        units = panel.unit[o0]
        g = len(np.unique(units))
        if g < 2 or n0 <= rank:
            raise SingularCovariance("cluster covariance needs at least two clusters and positive dof")
        sc = wt * (ow * e)[:, None]
        meat_rows = np.zeros((panel.n_units, q))
        np.add.at(meat_rows, units, sc)
        meat = meat_rows.T @ meat_rows
        c = g / (g - 1) * (n0 - 1) / (n0 - rank)
        cov = c * bread @ meat @ bread
        if np.allclose(gamma, 0, atol=1e-10 * np.sqrt(scale_y)) and not np.any(cov):
            stat, pval = 0.0, 1.0
        else:
            try:
                stat = float(gamma @ np.linalg.solve(cov, gamma))
            except np.linalg.LinAlgError as exc:
                raise SingularCovariance("clustered covariance of gamma is singular") from exc
            if not np.isfinite(stat) or np.linalg.cond(cov) > 1e14:
                raise SingularCovariance("clustered covariance of gamma is singular")
            pval = float(scipy.stats.chi2.sf(stat, q))
        df = (q, int(g - 1))
    return PretestResult(gamma, cov, float(stat), df, float(np.clip(pval, 0.0, 1.0)), mode, rel, names)
