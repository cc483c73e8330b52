"""Efficient imputation estimator.

Unrestricted treatment effects use the three-step imputation path: fit the
untreated-outcome model on untreated observations, impute ``Y_it(0)`` for
treated ones and average ``tau_hat_it = Y_it - Y_hat_it(0)`` with the
estimand weights.  A restricted treatment-effect model ``tau = Gamma theta``
goes through the joint regression of ``Y`` on ``[Z, D Gamma]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_frame
from .design import (
    DesignMatrices,
    EstimandWeights,
    OutcomeModelSpec,
    TreatmentEffectModel,
    build_estimand,
    check_estimability,
    materialize_design,
)
from .exceptions import NotIdentified, SingularB1, SolverFailure, ThetaNotIdentified
from .lsq import DenseFactor, LsqProblem, solve
from .panel import Panel
from .weights import ImpliedWeights, _joint_factor, implied_weights, joint_weights

logger = logging.getLogger(__name__)

__all__ = [
    "FitResult",
    "ImputationDiD",
    "adjusted_weights",
    "fit_imputation",
    "fit_joint",
]

#: designs with more columns than this use alternating projections
DENSE_MAX_COLUMNS = 5_000


@dataclass(eq=False)
class FitResult:
    """Output of :func:`fit_imputation` or :func:`fit_joint`.

    Attributes
    ----------
    coef : ndarray
        Untreated-outcome model coefficients (``lambda_hat``, ``delta_hat``)
        in design column order.
    tau_hat : ndarray
        Per-observation effect estimates over treated observations (panel row
        order); NaN where ``Y_hat(0)`` is not identified.
    y0_hat : ndarray
        Imputed untreated outcomes over treated observations.
    residuals : ndarray
        Residuals over untreated observations.
    """

    design: DesignMatrices
    estimand: EstimandWeights
    coef: np.ndarray
    tau_hat: np.ndarray
    y0_hat: np.ndarray
    residuals: np.ndarray
    tau_w: float
    theta_hat: Optional[np.ndarray] = None
    imputable: Optional[np.ndarray] = None
    method: str = "imputation"
    warnings: List[str] = field(default_factory=list)

    @property
    def panel(self) -> Panel:
        return self.design.panel

    @property
    def labels(self) -> List[str]:
        return self.design.labels

    @property
    def coef_dict(self) -> Dict[str, float]:
        return dict(zip(self.design.labels, map(float, self.coef)))

    def tau_frame(self) -> pd.DataFrame:
        """Per-observation estimates for treated observations."""
        p = self.panel
        idx = self.design.omega1
        df = p.to_frame().iloc[idx][["unit", "time"]].reset_index(drop=True)
        df["horizon"] = p.rel_time[idx]
        df["y"] = p.y[idx]
        df["y0_hat"] = self.y0_hat
        df["tau_hat"] = self.tau_hat
        df["weight"] = self.estimand.vector(p)[idx]
        return df

    def full_residuals(self) -> np.ndarray:
        """Residuals over untreated observations placed in an N-vector (0 elsewhere)."""
        out = np.zeros(self.panel.n_obs)
        out[self.design.omega0] = self.residuals
        return out


def _imputable_rows(design: DesignMatrices, tol: float = 1e-8) -> np.ndarray:
    """Treated rows whose design row lies in the row space of ``Z0``."""
    z1 = design.z1
    if design.z.shape[1] > DENSE_MAX_COLUMNS:
        # support rule for pure indicator designs: every active column seen on untreated rows
        seen = np.asarray(abs(design.z[design.omega0]).sum(axis=0)).ravel() > 0
        return ~np.any((z1 != 0) & ~seen[None, :], axis=1)
    null = design.z0_factor.nullspace()
    if null.shape[1] == 0:
        return np.ones(z1.shape[0], bool)
    r = np.linalg.norm(z1 @ null, axis=1)
    return r <= tol * np.maximum(np.linalg.norm(z1, axis=1), 1.0)


def _fit_untreated(design: DesignMatrices, method: str, y: np.ndarray):
    p = design.panel
    y0 = y[design.omega0]
    if method == "auto":
        method = "dense" if design.z.shape[1] <= DENSE_MAX_COLUMNS else "alternating"
    if method == "dense":
        coef = design.z0_factor.coef(y0)
    elif method == "alternating":
        ow = p.obs_weight[design.omega0]
        prob = LsqProblem(design.z[design.omega0], y0, None if np.all(ow == 1) else ow,
                          blocks=design.block_columns)
        coef = solve(prob, "alternating", tol=1e-13, ssr_rtol=None).coef
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(coef)):
        raise SolverFailure("untreated-outcome regression produced non-finite coefficients")
    return coef, method


def fit_imputation(panel: Panel, model: Optional[OutcomeModelSpec] = None,
                   w: Optional[EstimandWeights] = None, design: Optional[DesignMatrices] = None,
                   method: str = "auto", check: bool = True) -> FitResult:
    """Imputation estimator under unrestricted treatment effects.

    Parameters
    ----------
    panel : Panel
    model : OutcomeModelSpec, optional
        Defaults to unit and period fixed effects.
    w : EstimandWeights, optional
        Defaults to the ATT.
    method : {"auto", "dense", "alternating"}
        Solver for the untreated-outcome regression.
    check : bool
        Verify estimability first and raise :class:`NotIdentified` if it fails.

    Notes
    -----
    ``tau_w = w1' Y1 - (Z1' w1)' pi_hat`` is invariant to how redundant
    coefficients are pinned whenever the estimand is identified, including
    estimands that put weight on observations whose own ``Y_hat(0)`` is not
    identified.
    """
    design = design or materialize_design(panel, model)
    w = w if w is not None else build_estimand(panel, "att")
    warns = []
    if check and design.z.shape[1] <= DENSE_MAX_COLUMNS:
        est = check_estimability(panel, None, w, design=design)
        if not est.identified:
            names = ", ".join(est.certificate)
            raise NotIdentified(f"estimand {w.label!r} is not identified (unmatched: {names})",
                                certificate=est.certificate)
    coef, used = _fit_untreated(design, method, panel.y)
    o0, o1 = design.omega0, design.omega1
    resid = panel.y[o0] - design.z[o0] @ coef
    y0_hat = design.z[o1] @ coef
    imputable = _imputable_rows(design)
    tau = np.where(imputable, panel.y[o1] - y0_hat, np.nan)
    wv = w.vector(panel)[o1]
    if np.any(~imputable):
        warns.append("non_imputable_observations")
        y0_hat = np.where(imputable, y0_hat, np.nan)
    tau_w = float(wv @ panel.y[o1] - (design.z[o1].T @ wv) @ coef)
    return FitResult(design, w, coef, tau, y0_hat, resid, tau_w, imputable=imputable,
                     method=f"imputation/{used}", warnings=warns)


def fit_joint(panel: Panel, model: Optional[OutcomeModelSpec] = None,
              tem: Optional[TreatmentEffectModel] = None, w: Optional[EstimandWeights] = None,
              design: Optional[DesignMatrices] = None) -> FitResult:
    """OLS of ``Y`` on ``[Z, D Gamma]`` over all observations.

    ``tau_hat = Gamma theta_hat`` and ``tau_w = w1' Gamma theta_hat``.  When
    ``theta`` is only partly identified but ``w1' Gamma theta`` is estimable the
    estimate is still returned (unidentified components of ``tau_hat`` are
    NaN); otherwise :class:`ThetaNotIdentified` is raised.
    """
    tem = tem or TreatmentEffectModel()
    design = design or materialize_design(panel, model, tem, check_joint=False)
    w = w if w is not None else build_estimand(panel, "att")
    fac = _joint_factor(design)
    p = design.z.shape[1]
    m = fac.p - p
    g = np.eye(len(design.omega1)) if design.gamma is None else design.gamma
    warns = []
    try:
        joint_weights(design, w, fac)
    except NotIdentified as exc:
        names = [design.theta_labels[j - p] for j in fac.dependent if j >= p] or list(exc.certificate)
        raise ThetaNotIdentified(
            f"theta is not identified and estimand {w.label!r} is not estimable",
            dimension=fac.p - fac.rank, group="treatment_effect", columns=names) from exc
    coef = fac.coef(panel.y)
    theta = coef[p:]
    null = fac.nullspace()
    theta_ok = np.ones(m, bool)
    if null.shape[1]:
        theta_ok = np.linalg.norm(null[p:], axis=1) <= 1e-8
        if not theta_ok.all():
            warns.append("theta_partially_identified")
    theta = np.where(theta_ok, theta, np.nan)
    tau = g @ np.where(theta_ok, theta, 0.0)
    tau_ok = (np.abs(g[:, ~theta_ok]).sum(axis=1) == 0) if m else np.ones(len(tau), bool)
    tau = np.where(tau_ok, tau, np.nan)
    wv = w.vector(panel)[design.omega1]
    c = np.concatenate([np.zeros(p), g.T @ wv])
    tau_w = float(c @ coef)
    o0, o1 = design.omega0, design.omega1
    zc = coef[:p]
    resid = panel.y[o0] - design.z[o0] @ zc
    y0_hat = panel.y[o1] - tau
    return FitResult(design, w, zc, tau, y0_hat, resid, tau_w, theta_hat=theta, imputable=tau_ok,
                     method="joint", warnings=warns)


def adjusted_weights(panel: Panel, model: Optional[OutcomeModelSpec] = None,
                     tem: Optional[TreatmentEffectModel] = None, w: Optional[EstimandWeights] = None,
                     design: Optional[DesignMatrices] = None) -> EstimandWeights:
    """Weights ``w~1`` such that imputation with ``w~1`` reproduces the joint estimate.

    Equal to ``B1 Gamma (Gamma' B1 Gamma)^{-1} Gamma' w1`` with
    ``B1 = I - Z1 (Z'Z)^{-1} Z1'``; computed as the treated part of the joint
    regression's implied weights.
    """
    tem = tem or TreatmentEffectModel()
    w = w if w is not None else build_estimand(panel, "att")
    if not tem.restricted:
        return w
    design = design or materialize_design(panel, model, tem, check_joint=False)
    try:
        v = joint_weights(design, w)
    except NotIdentified as exc:
        raise SingularB1("Gamma' B1 Gamma is singular for this estimand") from exc
    idx = design.omega1
    return EstimandWeights(idx, v[idx], f"{w.label}~")


class ImputationDiD(BaseEstimator):
    """Imputation difference-in-differences estimator with a scikit-learn interface.

    Parameters
    ----------
    unit, time, outcome : str
        Column names in the frame passed to :meth:`fit`.
    event_time, treated : str, optional
        Event-date column, or a 0/1 treatment indicator to derive it from.
    covariates : sequence of str
        Covariate columns available to ``outcome_model``.
    weight : str, optional
        Observation-weight column.
    outcome_model : OutcomeModelSpec or dict, optional
    treatment_effect_model : TreatmentEffectModel, dict or str, optional
    estimand : str or dict
        Anything :func:`build_estimand` accepts, e.g. ``"att"`` or
        ``{"kind": "horizon", "h": 0}``.
    taubar_mode : {"auto", "single", "by_cohort_period", "by_horizon"}
    leave_out : bool
    method : {"auto", "dense", "alternating"}

    Attributes
    ----------
    panel_, design_, fit_, weights_ : fitted artefacts
    estimate_, se_ : float
    tau_ : DataFrame
        Per-observation effect estimates.
    """

    def __init__(self, unit="unit", time="time", outcome="y", event_time="event_time", treated=None,
                 covariates=(), weight=None, outcome_model=None, treatment_effect_model=None,
                 estimand="att", taubar_mode="auto", leave_out=False, method="auto"):
        self.unit = unit
        self.time = time
        self.outcome = outcome
        self.event_time = event_time
        self.treated = treated
        self.covariates = covariates
        self.weight = weight
        self.outcome_model = outcome_model
        self.treatment_effect_model = treatment_effect_model
        self.estimand = estimand
        self.taubar_mode = taubar_mode
        self.leave_out = leave_out
        self.method = method

    def _models(self):
        om = self.outcome_model
        if om is None or isinstance(om, dict):
            om = OutcomeModelSpec.from_dict(om or {})
        tem = self.treatment_effect_model
        if not isinstance(tem, TreatmentEffectModel):
            tem = TreatmentEffectModel.from_config(tem)
        return om, tem

    def fit(self, X, y=None):
        from .inference import VarianceSpec, conservative_se

        check_choice(self.taubar_mode, ("auto", "single", "by_cohort_period", "by_horizon"), "taubar_mode")
        df = check_frame(X, [self.unit, self.time, self.outcome])
        if y is not None:
            df = df.assign(**{self.outcome: np.asarray(y, dtype=float)})
        self.panel_ = Panel.from_frame(df, self.unit, self.time, self.outcome,
                                       event_time=None if self.treated else self.event_time,
                                       treated=self.treated, covariates=tuple(self.covariates),
                                       weight=self.weight)
        om, tem = self._models()
        self.estimand_ = build_estimand(self.panel_, self.estimand)
        if tem.restricted:
            self.design_ = materialize_design(self.panel_, om, tem, check_joint=False)
            self.fit_ = fit_joint(self.panel_, om, tem, self.estimand_, design=self.design_)
            w_adj = adjusted_weights(self.panel_, om, tem, self.estimand_, design=self.design_)
            imp_design = materialize_design(self.panel_, om)
            imp = fit_imputation(self.panel_, om, w_adj, design=imp_design, method=self.method)
            self.weights_ = implied_weights(self.panel_, w=w_adj, design=imp_design)
            se_fit = imp
        else:
            self.design_ = materialize_design(self.panel_, om)
            self.fit_ = fit_imputation(self.panel_, om, self.estimand_, design=self.design_,
                                       method=self.method)
            self.weights_ = implied_weights(self.panel_, w=self.estimand_, design=self.design_)
            se_fit = self.fit_
        self.variance_ = conservative_se(se_fit, self.weights_,
                                         VarianceSpec(self.taubar_mode, self.leave_out))
        self.estimate_ = self.fit_.tau_w
        self.se_ = self.variance_.se
        self.tau_ = self.fit_.tau_frame()
        return self

    def _match(self, X):
        df = check_frame(X, [self.unit, self.time])
        lookup = self.panel_._lookup
        return np.array([lookup.get((u, int(t)), -1)
                         for u, t in zip(df[self.unit].to_numpy(), df[self.time].to_numpy())])

    def predict(self, X):
        """Fitted untreated outcome ``Y_hat(0)`` for rows of ``X`` present in the fitted panel.

        Rows absent from the panel, or whose ``Y_hat(0)`` is not identified, get NaN.
        """
        check_is_fitted(self, "fit_")
        rows = self._match(X)
        z = self.design_.z
        yhat = np.asarray(z @ self.fit_.coef).ravel()
        ok = np.ones(self.panel_.n_obs, bool)
        ok[self.design_.omega1] = self.fit_.imputable
        out = np.full(len(rows), np.nan)
        hit = rows >= 0
        out[hit] = np.where(ok[rows[hit]], yhat[rows[hit]], np.nan)
        return out

    def transform(self, X):
        """Per-observation effect ``Y - Y_hat(0)``; NaN for untreated or unknown rows."""
        check_is_fitted(self, "fit_")
        rows = self._match(X)
        tau_full = np.full(self.panel_.n_obs, np.nan)
        tau_full[self.design_.omega1] = self.fit_.tau_hat
        out = np.full(len(rows), np.nan)
        hit = rows >= 0
        out[hit] = tau_full[rows[hit]]
        return out

    def summary(self) -> Dict:
        check_is_fitted(self, "fit_")
        return {"estimand": self.estimand_.label, "estimate": self.estimate_, "se": self.se_,
                "n_H": self.weights_.n_h, "N": self.panel_.n_obs, "N0": self.panel_.n_untreated,
                "N1": self.panel_.n_treated, "taubar_mode": self.variance_.mode}
