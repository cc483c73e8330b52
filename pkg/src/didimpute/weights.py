"""Implied observation weights and regression-weight diagnostics.

Every estimator in this package is linear in the outcomes, ``tau_hat_w =
v' Y``.  The weights ``v`` are computed either in closed form from a
factorisation of the design or by a block Gauss-Seidel iteration on the
normal equations that never forms ``Z0' Z0`` (useful with several sets of
high-dimensional fixed effects).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .design import (
    DesignMatrices,
    EstimandWeights,
    OutcomeModelSpec,
    TreatmentEffectModel,
    check_estimability,
    materialize_design,
)
from .exceptions import CollinearTreatment, NoConvergence, NotIdentified
from .lsq import DenseFactor, _BlockSolver
from .panel import Panel

__all__ = [
    "ImpliedWeights",
    "OlsWeightReport",
    "UnderidentificationReport",
    "detect_underidentification",
    "implied_weights",
    "implied_weights_closed",
    "implied_weights_iterative",
    "static_ols_weights",
]

#: closed form below this many design columns, iterative above
ITERATIVE_THRESHOLD = 50_000
#: weights smaller than this in absolute value count as zero in sign reports
SIGN_ZERO = 1e-12


@dataclass(eq=False)
class ImpliedWeights:
    """Observation weights ``v`` with ``tau_hat_w = v' Y``."""

    panel: Panel
    v: np.ndarray
    label: str = ""
    method: str = "closed"
    iterations: int = 0

    def dot(self, y) -> float:
        return float(np.dot(self.v, np.asarray(y, dtype=float)))

    @property
    def unit_abs_sums(self) -> np.ndarray:
        return np.bincount(self.panel.unit, weights=np.abs(self.v), minlength=self.panel.n_units)

    @property
    def herfindahl(self) -> float:
        """``sum_i (sum_t |v_it|)^2``."""
        return float(np.sum(self.unit_abs_sums ** 2))

    @property
    def n_h(self) -> float:
        h = self.herfindahl
        return float("inf") if h == 0 else 1.0 / h

    @property
    def sum_treated(self) -> float:
        return float(np.sum(self.v[self.panel.treated]))

    @property
    def sum_untreated(self) -> float:
        return float(np.sum(self.v[~self.panel.treated]))

    def negativity(self) -> Dict[str, float]:
        v1 = self.v[self.panel.treated]
        neg = v1 < -SIGN_ZERO
        return {"share_negative_treated": float(neg.mean()) if len(v1) else 0.0,
                "mass_negative_treated": float(v1[neg].sum())}

    def diagnostics(self) -> Dict[str, float]:
        return {"herfindahl": self.herfindahl, "n_H": self.n_h, "sum_treated": self.sum_treated,
                "sum_untreated": self.sum_untreated, **self.negativity()}

    def to_frame(self) -> pd.DataFrame:
        df = self.panel.to_frame()[["unit", "time"]].copy()
        df["v"] = self.v
        df["treated"] = self.panel.treated.astype(int)
        return df


def _check_identified(panel, design, w):
    est = check_estimability(panel, None, w, design=design)
    if not est.identified:
        names = ", ".join(est.certificate) or "unknown columns"
        raise NotIdentified(f"estimand {w.label!r} is not identified (unmatched: {names})",
                            certificate=est.certificate)


def _joint_factor(design: DesignMatrices) -> DenseFactor:
    p = design.panel
    full = np.hstack([design.z.toarray(), design.d_gamma()])
    return DenseFactor(full, p.obs_weight if np.any(p.obs_weight != 1) else None)


def joint_weights(design: DesignMatrices, w: EstimandWeights, factor: Optional[DenseFactor] = None,
                  tol: float = 1e-8) -> np.ndarray:
    """Weights of ``w1' Gamma theta_hat`` in the regression of Y on ``[Z, D Gamma]``.

    Raises :class:`NotIdentified` if the linear combination is not estimable.
    """
    fac = factor or _joint_factor(design)
    wv = w.vector(design.panel)[design.omega1]
    g = np.eye(len(wv)) if design.gamma is None else design.gamma
    c = np.concatenate([np.zeros(design.z.shape[1]), g.T @ wv])
    resid = fac.rowspace_residual(c)
    if np.linalg.norm(resid) > tol * max(np.linalg.norm(c), 1.0):
        labels = list(design.labels) + list(design.theta_labels)
        cert = {labels[j]: float(resid[j]) for j in np.flatnonzero(np.abs(resid) > tol)}
        raise NotIdentified(f"estimand {w.label!r} is not identified under the treatment-effect model",
                            certificate=cert)
    return fac.gram_image(c)


def implied_weights_closed(panel: Panel, model: Optional[OutcomeModelSpec] = None,
                           w: Optional[EstimandWeights] = None,
                           tem: Optional[TreatmentEffectModel] = None,
                           design: Optional[DesignMatrices] = None) -> ImpliedWeights:
    """Closed-form implied weights of the efficient estimator.

    Unrestricted effects: ``v1 = w1`` and ``v0 = -W0 Z0 (Z0' W0 Z0)^+ Z1' w1``.
    Restricted effects: weights of ``w1' Gamma theta_hat`` in the joint
    regression on ``[Z, D Gamma]``.
    """
    tem = tem or TreatmentEffectModel()
    design = design or materialize_design(panel, model, tem)
    if w is None:
        raise ValueError("estimand weights are required")
    if tem.restricted:
        return ImpliedWeights(panel, joint_weights(design, w), w.label, "closed")
    _check_identified(panel, design, w)
    wv = w.vector(panel)
    v = wv.copy()
    v[design.omega0] = -design.z0_factor.gram_image(design.z1.T @ wv[design.omega1])
    return ImpliedWeights(panel, v, w.label, "closed")


def implied_weights_iterative(panel: Panel, model: Optional[OutcomeModelSpec] = None,
                              w: Optional[EstimandWeights] = None,
                              design: Optional[DesignMatrices] = None, tol: float = 1e-13,
                              max_iter: int = 100_000) -> ImpliedWeights:
    """Implied weights by block Gauss-Seidel on ``Z0' W0 Z0 psi = -Z1' w1``.

    Each sweep solves the equations of one block (e.g. one unit intercept per
    unit, then the period effects) given the others, so only per-block Gram
    matrices are ever factorised.  ``v0 = W0 Z0 psi`` and ``v1 = w1``.
    Iteration stops once the largest change in ``v0`` over a sweep falls
    below ``tol`` times ``max |w|``.
    """
    design = design or materialize_design(panel, model)
    if w is None:
        raise ValueError("estimand weights are required")
    wv = w.vector(panel)
    z0 = sp.csr_matrix(design.z[design.omega0])
    ow = panel.obs_weight[design.omega0]
    ow = None if np.all(ow == 1) else ow
    rhs = -(design.z[design.omega1].T @ wv[design.omega1])
    blocks = design.block_columns
    cols = [sp.csr_matrix(z0[:, b]) for b in blocks]
    solvers = [_BlockSolver(c, ow) for c in cols]
    u = np.zeros(z0.shape[0])
    scale = max(float(np.max(np.abs(wv))), 1e-300)
    change = np.inf
    for it in range(1, max_iter + 1):
        before = u.copy()
        for b, c, s in zip(blocks, cols, solvers):
            wu = u if ow is None else u * ow
            u = u + c @ s.step(rhs[b] - c.T @ wu)
        change = float(np.max(np.abs(u - before))) if len(u) else 0.0
        if change < tol * scale:
            break
    else:
        raise NoConvergence(f"implied-weight iteration did not converge in {max_iter} sweeps",
                            iterations=max_iter, last_change=change)
    v = wv.copy()
    v[design.omega0] = u if ow is None else u * ow
    return ImpliedWeights(panel, v, w.label, "iterative", it)


def implied_weights(panel, model=None, w=None, tem=None, design=None,
                    threshold: int = ITERATIVE_THRESHOLD) -> ImpliedWeights:
    """Closed form for small designs, iterative above ``threshold`` columns."""
    tem = tem or TreatmentEffectModel()
    design = design or materialize_design(panel, model, tem)
    if not tem.restricted and design.z.shape[1] > threshold:
        return implied_weights_iterative(panel, w=w, design=design)
    return implied_weights_closed(panel, w=w, tem=tem, design=design)


# --- static OLS diagnostics ----------------------------------------------------


@dataclass(eq=False)
class OlsWeightReport:
    """Weights of the static TWFE regression coefficient on treated observations."""

    panel: Panel
    index: np.ndarray
    weights: np.ndarray
    d_tilde: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def share_negative(self) -> float:
        return float(np.mean(self.weights < -SIGN_ZERO)) if len(self.weights) else 0.0

    @property
    def mass_negative(self) -> float:
        neg = self.weights < -SIGN_ZERO
        return float(self.weights[neg].sum())

    def as_dict(self) -> Dict:
        return {self.panel.label(i): float(x) for i, x in zip(self.index, self.weights)}

    def by_horizon(self) -> pd.DataFrame:
        k = self.panel.rel_time[self.index]
        df = pd.DataFrame({"horizon": k, "w": self.weights, "neg": self.weights < -SIGN_ZERO})
        out = df.groupby("horizon").agg(weight=("w", "sum"), n=("w", "size"), n_negative=("neg", "sum"))
        return out.reset_index()

    def to_frame(self) -> pd.DataFrame:
        df = self.panel.to_frame().iloc[self.index][["unit", "time"]].reset_index(drop=True)
        df["horizon"] = self.panel.rel_time[self.index]
        df["w_ols"] = self.weights
        return df

    def summary(self) -> Dict:
        return {"sum": self.total, "share_negative": self.share_negative,
                "mass_negative": self.mass_negative, "n_treated": int(len(self.index)),
                "by_horizon": self.by_horizon().to_dict(orient="list")}


def static_ols_weights(panel: Panel, model: Optional[OutcomeModelSpec] = None) -> OlsWeightReport:
    """Weights ``D~ / sum D~^2`` of the static TWFE coefficient.

    ``D~`` is the residual from regressing the treatment indicator on the
    untreated-outcome model (unit and period effects by default) over all
    observations.  The weights on treated observations sum to one.
    """
    design = materialize_design(panel, model)
    d = panel.treated.astype(float)
    ow = panel.obs_weight
    fac = DenseFactor(design.z, None if np.all(ow == 1) else ow)
    dt = d - fac.fitted(d)
    ss = float(np.sum(ow * dt ** 2))
    if ss <= 1e-12 * max(float(np.sum(ow * d ** 2)), 1e-300):
        raise CollinearTreatment("the treatment indicator is collinear with the fixed effects")
    idx = np.flatnonzero(panel.treated)
    return OlsWeightReport(panel, idx, (ow * dt)[idx] / ss, dt)


# --- underidentification ---------------------------------------------------------


@dataclass(eq=False)
class UnderidentificationReport:
    """Null space of the fully dynamic design.

    ``basis`` holds the event-time block of an orthonormal null-space basis
    (one column per dimension).  ``witness`` is the linear-trend path
    ``h + 1`` when that path is in the null space, else the first basis
    column; it is scaled to unit infinity norm.
    """

    dimension: int
    horizons: List[int]
    basis: np.ndarray
    witness: Optional[np.ndarray] = None
    full_basis: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.dimension == 0

    def contains(self, direction, tol: float = 1e-8) -> bool:
        """Is ``direction`` (over ``horizons``) the event-time block of a null vector?"""
        d = np.asarray(direction, dtype=float)
        if self.dimension == 0:
            return False
        coef, *_ = np.linalg.lstsq(self.basis, d, rcond=None)
        return bool(np.linalg.norm(self.basis @ coef - d) <= tol * np.linalg.norm(d))

    def angle(self, direction) -> float:
        """Angle (radians) between the witness and ``direction``."""
        if self.witness is None:
            return float("nan")
        d = np.asarray(direction, dtype=float)
        c = abs(np.dot(self.witness, d)) / (np.linalg.norm(self.witness) * np.linalg.norm(d))
        return float(np.arccos(min(1.0, c)))


def detect_underidentification(panel: Panel, drop=(-1,), horizons=None) -> UnderidentificationReport:
    """Null-space analysis of the fully dynamic TWFE regression.

    The design has unit effects, period effects (first period pinned) and
    one indicator per observed event time except those in ``drop``.
    """
    k = panel.rel_time[panel.has_event]
    hs = sorted(set(np.unique(k).tolist()) - set(drop)) if horizons is None else list(horizons)
    model = OutcomeModelSpec(common_blocks=("period", {"relative_time": hs}))
    design = materialize_design(panel, model, repair=False)
    fac = DenseFactor(design.z)
    null = fac.nullspace()
    dim = null.shape[1]
    cols = design.block_columns[-1]
    basis = null[cols]
    if dim:
        q, _ = np.linalg.qr(basis)
        basis = q[:, :dim]
    report = UnderidentificationReport(dim, hs, basis, None, null)
    if dim:
        trend = np.asarray(hs, dtype=float) + 1.0
        if report.contains(trend):
            witness = trend
        else:
            witness = basis[:, 0]
        witness = witness / np.max(np.abs(witness))
        report.witness = witness * np.sign(witness[int(np.argmax(np.abs(witness)))])
    return report
