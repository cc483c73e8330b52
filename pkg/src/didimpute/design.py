"""Regression design: untreated-outcome model, treatment-effect model, estimands.

The untreated-outcome model stacks per-unit regressors (unit intercepts,
unit trends, unit-interacted covariates) and shared regressors (period
dummies, group dummies, time-varying covariates, relative-time dummies) into
one design ``Z`` over all observations.  Column order is stable: unit blocks,
then common blocks, in the order given by the model specification.  The treatment-effect
model contributes a matrix ``Gamma`` over treated observations.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import (
    DesignError,
    EmptySupport,
    MissingDose,
    RankDeficientAfterNormalization,
)
from .lsq import RANK_RTOL, DenseFactor
from .panel import NEVER_TREATED, Panel

logger = logging.getLogger(__name__)

__all__ = [
    "DesignMatrices",
    "EstimandWeights",
    "Estimability",
    "OutcomeModelSpec",
    "TreatmentEffectModel",
    "build_estimand",
    "check_estimability",
    "gamma_to_restrictions",
    "materialize_design",
    "restrictions_to_gamma",
]

_UNIT_KINDS = ("intercept", "trend", "covariate")
_COMMON_KINDS = ("period", "group", "covariate", "relative_time")


def _parse_block(entry, allowed):
    """Normalise a block entry to ``(kind, arg)``.

    Accepted forms: ``"intercept"``, ``"period"``, ``"cov:x"``,
    ``"group:region"``, ``{"covariate": "x"}``, ``{"group": ["a", "b"]}``,
    ``{"relative_time": [-3, -2]}`` or an explicit tuple.
    """
    if isinstance(entry, tuple) and len(entry) == 2:
        kind, arg = entry
    elif isinstance(entry, str):
        if ":" in entry:
            kind, arg = entry.split(":", 1)
            kind = {"cov": "covariate"}.get(kind, kind)
        else:
            kind, arg = entry, None
    elif isinstance(entry, Mapping) and len(entry) == 1:
        (kind, arg), = entry.items()
    else:
        raise DesignError(f"cannot parse model block {entry!r}")
    if kind not in allowed:
        raise DesignError(f"unknown block kind {kind!r}; expected one of {allowed}")
    if kind == "group" and isinstance(arg, (list, tuple)):
        arg = tuple(arg)
    if kind == "relative_time":
        arg = tuple(int(h) for h in arg)
    return (kind, arg)


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Model of untreated outcomes ``A_it' lambda_i + X_it' delta``.

    Parameters
    ----------
    unit_blocks : sequence
        Per-unit regressors: ``"intercept"`` (unit FE), ``"trend"`` (unit
        slope on t), ``"cov:<name>"`` (unit-specific coefficient on a
        covariate).
    common_blocks : sequence
        Shared regressors: ``"period"`` (period FE), ``"group:<name>"`` or
        ``{"group": [a, b]}`` (FE of a composite category), ``"cov:<name>"``,
        ``{"relative_time": [h, ...]}`` (event-time indicators).
    normalization : {"first_period", "none"}
        ``first_period`` pins the FE of the first observed period to zero when
        unit intercepts are present.  Any remaining collinearity is resolved by
        left-to-right elimination and reported.
    """

    unit_blocks: Tuple = ("intercept",)
    common_blocks: Tuple = ("period",)
    normalization: str = "first_period"

    def __post_init__(self):
        ub = tuple(_parse_block(b, _UNIT_KINDS) for b in self.unit_blocks)
        cb = tuple(_parse_block(b, _COMMON_KINDS) for b in self.common_blocks)
        if not ub and not cb:
            raise DesignError("the outcome model needs at least one block")
        if self.normalization not in ("first_period", "none"):
            raise DesignError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "unit_blocks", ub)
        object.__setattr__(self, "common_blocks", cb)

    @classmethod
    def twfe(cls) -> "OutcomeModelSpec":
        return cls()

    @classmethod
    def from_dict(cls, d: Mapping) -> "OutcomeModelSpec":
        return cls(unit_blocks=tuple(d.get("unit_blocks", ("intercept",))),
                   common_blocks=tuple(d.get("common_blocks", ("period",))),
                   normalization=d.get("normalization", "first_period"))

    def to_dict(self) -> dict:
        def enc(kind, arg):
            if arg is None:
                return kind
            return {kind: list(arg) if isinstance(arg, tuple) else arg}
        return {"unit_blocks": [enc(*b) for b in self.unit_blocks],
                "common_blocks": [enc(*b) for b in self.common_blocks],
                "normalization": self.normalization}

    def with_common(self, *blocks) -> "OutcomeModelSpec":
        return OutcomeModelSpec(self.unit_blocks, self.common_blocks + tuple(blocks), self.normalization)


def restrictions_to_gamma(b) -> np.ndarray:
    """Convert restrictions ``B tau = 0`` into a basis ``Gamma`` with ``tau = Gamma theta``."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return scipy.linalg.null_space(b)


def gamma_to_restrictions(gamma) -> np.ndarray:
    """Restrictions ``B`` (rows spanning the left null space of ``Gamma``)."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    return scipy.linalg.null_space(gamma.T).T


@dataclass(frozen=True, eq=False)
class TreatmentEffectModel:
    """Model ``tau = Gamma theta`` for the treated observations.

    ``kind`` is one of ``unrestricted`` (Gamma = I), ``constant``,
    ``by_horizon`` (optionally pooling horizons >= ``cap``), ``by_cohort`` or
    ``custom`` (explicit ``gamma`` with one row per treated observation, in
    panel row order).
    """

    kind: str = "unrestricted"
    cap: Optional[int] = None
    gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("unrestricted", "constant", "by_horizon", "by_cohort", "custom"):
            raise DesignError(f"unknown treatment-effect model {self.kind!r}")
        if self.kind == "custom":
            if self.gamma is None:
                raise DesignError("custom treatment-effect model needs gamma")
            g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
            if g.shape[1] > g.shape[0]:
                raise DesignError("gamma must have at most as many columns as rows")
            s = np.linalg.svd(g, compute_uv=False)
            if len(s) == 0 or s[-1] <= np.sqrt(RANK_RTOL) * s[0]:
                raise DesignError("custom gamma must have full column rank")
            object.__setattr__(self, "gamma", g)

    @classmethod
    def from_restrictions(cls, b) -> "TreatmentEffectModel":
        return cls(kind="custom", gamma=restrictions_to_gamma(b))

    @classmethod
    def from_config(cls, cfg) -> "TreatmentEffectModel":
        if cfg is None:
            return cls()
        if isinstance(cfg, str):
            return cls(kind=cfg)
        cfg = dict(cfg)
        kind = cfg.pop("kind", "unrestricted")
        if "B" in cfg:
            return cls.from_restrictions(cfg["B"])
        return cls(kind=kind, cap=cfg.get("cap"), gamma=cfg.get("gamma"))

    @property
    def restricted(self) -> bool:
        return self.kind != "unrestricted"

    def matrix(self, panel: Panel) -> Tuple[Optional[np.ndarray], List[str]]:
        """``Gamma`` (N1 x m) and theta labels; ``None`` for the unrestricted model."""
        t1 = np.flatnonzero(panel.treated)
        n1 = len(t1)
        if self.kind == "unrestricted":
            return None, [f"tau[{panel.label(i)}]" for i in t1]
        if self.kind == "constant":
            return np.ones((n1, 1)), ["tau"]
        if self.kind == "custom":
            if self.gamma.shape[0] != n1:
                raise DesignError(f"gamma has {self.gamma.shape[0]} rows but there are {n1} treated observations")
            return self.gamma, [f"theta[{j}]" for j in range(self.gamma.shape[1])]
        if self.kind == "by_horizon":
            k = panel.rel_time[t1]
            if self.cap is not None:
                lab = np.where(k >= self.cap, self.cap, k)
                names = [f"tau_{h}" if h < self.cap else f"tau_{h}+" for h in np.unique(lab)]
            else:
                lab = k
                names = [f"tau_{h}" for h in np.unique(lab)]
        else:
            lab = panel.event[t1]
            names = [f"tau_cohort_{e}" for e in np.unique(lab)]
        levels, inv = np.unique(lab, return_inverse=True)
        g = np.zeros((n1, len(levels)))
        g[np.arange(n1), inv] = 1.0
        return g, names


@dataclass(frozen=True, eq=False)
class EstimandWeights:
    """Weights over treated observations, stored against a panel's row index."""

    index: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        idx = np.asarray(self.index, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        order = np.argsort(idx, kind="stable")
        object.__setattr__(self, "index", idx[order])
        object.__setattr__(self, "values", vals[order])
        if len(np.unique(self.index)) != len(self.index):
            raise DesignError("estimand weights list an observation twice")

    def vector(self, panel: Panel) -> np.ndarray:
        """Dense weight vector over all observations."""
        out = np.zeros(panel.n_obs)
        out[self.index] = self.values
        if np.any(out[~panel.treated] != 0):
            raise DesignError("estimand weights must be supported on treated observations")
        return out

    def as_dict(self, panel: Panel) -> Dict[Tuple[Any, int], float]:
        return {panel.label(i): float(v) for i, v in zip(self.index, self.values)}

    @property
    def total(self) -> float:
        return float(np.sum(self.values))

    @classmethod
    def from_mapping(cls, panel: Panel, weights: Mapping, label: str = "custom") -> "EstimandWeights":
        idx, vals = [], []
        for (u, t), w in weights.items():
            i = panel.index_of(u, t)
            if not panel.treated[i]:
                raise DesignError(f"observation ({u!r}, {t}) is not treated")
            idx.append(i)
            vals.append(float(w))
        return cls(np.asarray(idx, dtype=np.int64), np.asarray(vals), label)


def _uniform(panel, mask, label):
    idx = np.flatnonzero(mask & panel.treated)
    if len(idx) == 0:
        raise EmptySupport(f"no treated observations match estimand {label!r}")
    return EstimandWeights(idx, np.full(len(idx), 1.0 / len(idx)), label)


def build_estimand(panel: Panel, kind: Union[str, Mapping, EstimandWeights] = "att", *, h=None,
                   require_horizons=(), e=None, a=None, b=None, weights=None,
                   mode: str = "per_dose", label: Optional[str] = None) -> EstimandWeights:
    """Construct estimand weights ``w1``.

    ``kind`` may also be a dict such as ``{"kind": "horizon", "h": 0}``;
    ``difference`` takes two such specs ``a`` and ``b`` and returns ``w_a - w_b``.
    ``per_dose`` with ``mode="per_dose"`` averages effects per unit of dose
    (``w_it = 1 / (N1 dose_it)``); ``mode="total"`` sums effects (``w_it = 1``).
    """
    if isinstance(kind, EstimandWeights):
        return kind
    if isinstance(kind, Mapping):
        spec = dict(kind)
        kind = spec.pop("kind")
        return build_estimand(panel, kind, label=spec.pop("label", label), **spec)
    if kind == "att":
        return _uniform(panel, np.ones(panel.n_obs, bool), label or "att")
    if kind == "horizon":
        if h is None:
            raise DesignError("horizon estimand needs h")
        return _uniform(panel, panel.has_event & (panel.rel_time == h), label or f"horizon_{h}")
    if kind == "balanced_horizon":
        if h is None:
            raise DesignError("balanced_horizon estimand needs h")
        keep_units = None
        for hh in (h, *require_horizons):
            at = np.unique(panel.unit[panel.has_event & (panel.rel_time == hh)])
            keep_units = at if keep_units is None else np.intersect1d(keep_units, at)
        mask = panel.has_event & (panel.rel_time == h) & np.isin(panel.unit, keep_units)
        tag = ",".join(str(x) for x in require_horizons)
        return _uniform(panel, mask, label or f"balanced_horizon_{h}|{tag}")
    if kind == "cohort":
        if e is None:
            raise DesignError("cohort estimand needs e")
        return _uniform(panel, panel.has_event & (panel.event == e), label or f"cohort_{e}")
    if kind == "difference":
        wa, wb = build_estimand(panel, a), build_estimand(panel, b)
        v = wa.vector(panel) - wb.vector(panel)
        idx = np.union1d(wa.index, wb.index)
        return EstimandWeights(idx, v[idx], label or f"{wa.label}-{wb.label}")
    if kind == "per_dose":
        if panel.dose is None:
            raise MissingDose("per_dose estimand needs a dose column")
        idx = np.flatnonzero(panel.treated)
        if len(idx) == 0:
            raise EmptySupport("no treated observations")
        d = panel.dose[idx]
        if mode == "total":
            return EstimandWeights(idx, np.ones(len(idx)), label or "total_effect")
        if np.any(~np.isfinite(d)) or np.any(d == 0):
            raise MissingDose("dose is missing or zero for some treated observations")
        return EstimandWeights(idx, 1.0 / (len(idx) * d), label or "per_dose")
    if kind == "custom":
        if weights is None:
            raise DesignError("custom estimand needs weights")
        if isinstance(weights, Mapping):
            return EstimandWeights.from_mapping(panel, weights, label or "custom")
        items = {(r["unit"], r["time"]): r["w"] for r in weights}
        return EstimandWeights.from_mapping(panel, items, label or "custom")
    raise DesignError(f"unknown estimand kind {kind!r}")


# --- design materialisation ---------------------------------------------------


def _group_codes(panel: Panel, arg) -> np.ndarray:
    names = arg if isinstance(arg, tuple) else (arg,)
    cols = []
    for nm in names:
        if nm == "period":
            cols.append(panel.time)
        elif nm == "unit":
            cols.append(panel.units[panel.unit])
        elif nm == "cohort":
            cols.append(np.where(panel.has_event, panel.event, -1).astype(object))
            cols[-1][~panel.has_event] = "never"
        elif nm in panel.groups:
            cols.append(np.asarray(panel.groups[nm]))
        else:
            raise DesignError(f"unknown group column {nm!r}")
    return np.array(["|".join(str(c) for c in row) for row in zip(*cols)])


def _covariate(panel: Panel, name):
    if name not in panel.covariate_names:
        raise DesignError(f"unknown covariate {name!r}")
    return panel.covariates[:, panel.covariate_names.index(name)]


def _independent_columns(z, rtol=RANK_RTOL):
    """Left-to-right elimination: indices of columns that add rank."""
    a = z.toarray() if sp.issparse(z) else np.asarray(z, dtype=float)
    norms = np.linalg.norm(a, axis=0)
    keep = norms > 0
    a = a[:, keep] / norms[keep]
    if a.shape[1] == 0:
        return np.flatnonzero(keep)
    r = np.linalg.qr(a, mode="r")
    d = np.abs(np.diag(r)) if r.shape[0] >= a.shape[1] else np.concatenate(
        [np.abs(np.diag(r)), np.zeros(a.shape[1] - r.shape[0])])
    good = d ** 2 > rtol
    return np.flatnonzero(keep)[good]


@dataclass(eq=False)
class DesignMatrices:
    """Materialised design for one panel, outcome model and treatment-effect model."""

    panel: Panel
    z: sp.csr_matrix
    labels: List[str]
    blocks: List[Tuple[str, np.ndarray]]
    gamma: Optional[np.ndarray]
    theta_labels: List[str]
    dropped: List[str] = field(default_factory=list)
    repairs: List[str] = field(default_factory=list)

    @property
    def treated(self) -> np.ndarray:
        return self.panel.treated

    @functools.cached_property
    def omega0(self) -> np.ndarray:
        return np.flatnonzero(~self.panel.treated)

    @functools.cached_property
    def omega1(self) -> np.ndarray:
        return np.flatnonzero(self.panel.treated)

    @functools.cached_property
    def z0(self) -> np.ndarray:
        return self.z[self.omega0].toarray()

    @functools.cached_property
    def z1(self) -> np.ndarray:
        return self.z[self.omega1].toarray()

    @functools.cached_property
    def z0_factor(self) -> DenseFactor:
        w = self.panel.obs_weight[self.omega0]
        return DenseFactor(self.z0, None if np.all(w == 1) else w)

    @property
    def z0_rank(self) -> int:
        return self.z0_factor.rank

    def unidentified_on_untreated(self) -> List[str]:
        """Columns whose coefficient is not pinned down by untreated observations."""
        fac = self.z0_factor
        if fac.rank == fac.p:
            return []
        resid = np.linalg.norm(fac.nullspace(), axis=1)
        return [self.labels[j] for j in np.flatnonzero(resid > 1e-8)]

    def d_gamma(self) -> np.ndarray:
        """Full-sample treatment columns ``D_it Gamma_it'`` (N x m)."""
        n1 = len(self.omega1)
        g = np.eye(n1) if self.gamma is None else self.gamma
        out = np.zeros((self.panel.n_obs, g.shape[1]))
        out[self.omega1] = g
        return out

    def column_index(self, label: str) -> int:
        return self.labels.index(label)

    @property
    def block_columns(self) -> List[np.ndarray]:
        return [cols for _, cols in self.blocks]


def materialize_design(panel: Panel, model: Optional[OutcomeModelSpec] = None,
                       tem: Optional[TreatmentEffectModel] = None, repair: bool = True,
                       check_joint: bool = True, dense_limit: int = 20_000,
                       strict: bool = False) -> DesignMatrices:
    """Build the sparse design ``Z`` (and ``Gamma``) with stable column order.

    Redundant columns beyond the declared normalisation are removed
    left-to-right and recorded in ``repairs``.  With a restricted
    treatment-effect model the joint design ``[Z, D Gamma]`` must have full
    column rank, otherwise :class:`RankDeficientAfterNormalization` is raised.
    With ``repair=False, strict=True`` a deficient outcome design raises the
    same error (group ``outcome_model``) instead of being returned as is.
    """
    model = model or OutcomeModelSpec()
    tem = tem or TreatmentEffectModel()
    n = panel.n_obs
    rows = np.arange(n)
    cols, vals, labels, blocks = [], [], [], []
    rr = []
    p = 0
    dropped = []

    unit_keys = panel.units
    unit_cols = []
    for kind, arg in model.unit_blocks:
        if kind == "intercept":
            v, tag = np.ones(n), "unit"
        elif kind == "trend":
            v, tag = panel.time.astype(float), "unit_trend"
        else:
            v, tag = _covariate(panel, arg), f"unit_{arg}"
        rr.append(rows)
        cols.append(p + panel.unit)
        vals.append(v)
        unit_cols.append(np.arange(p, p + panel.n_units))
        labels += [f"{tag}[{u}]" for u in unit_keys]
        p += panel.n_units
    if unit_cols:
        blocks.append(("unit", np.concatenate(unit_cols)))

    has_unit_fe = any(k == "intercept" for k, _ in model.unit_blocks)
    for kind, arg in model.common_blocks:
        if kind in ("period", "group"):
            codes = panel.time if kind == "period" else _group_codes(panel, arg)
            keys, inv = np.unique(codes, return_inverse=True)
            tag = "period" if kind == "period" else (
                "group_" + ("*".join(arg) if isinstance(arg, tuple) else str(arg)))
            keep_levels = np.ones(len(keys), bool)
            if kind == "period" and has_unit_fe and model.normalization == "first_period" and len(keys):
                keep_levels[0] = False
                dropped.append(f"{tag}[{keys[0]}]")
            newcode = -np.ones(len(keys), dtype=np.int64)
            newcode[keep_levels] = np.arange(keep_levels.sum())
            m = newcode[inv] >= 0
            rr.append(rows[m])
            cols.append(p + newcode[inv][m])
            vals.append(np.ones(m.sum()))
            labels += [f"{tag}[{k}]" for k in keys[keep_levels]]
            blocks.append((tag, np.arange(p, p + keep_levels.sum())))
            p += int(keep_levels.sum())
        elif kind == "covariate":
            rr.append(rows)
            cols.append(np.full(n, p))
            vals.append(_covariate(panel, arg))
            labels.append(str(arg))
            blocks.append((str(arg), np.array([p])))
            p += 1
        else:  # relative_time
            start = p
            for h in arg:
                m = panel.has_event & (panel.rel_time == h)
                rr.append(rows[m])
                cols.append(np.full(m.sum(), p))
                vals.append(np.ones(m.sum()))
                labels.append(f"rel_time[{h}]")
                p += 1
            blocks.append(("relative_time", np.arange(start, p)))

    z = sp.csr_matrix((np.concatenate(vals) if vals else np.zeros(0),
                       (np.concatenate(rr) if rr else np.zeros(0, int),
                        np.concatenate(cols) if cols else np.zeros(0, int))), shape=(n, p))
    repairs = []
    if repair and p and p <= dense_limit:
        keep = _independent_columns(z)
        if len(keep) < p:
            gone = np.setdiff1d(np.arange(p), keep)
            repairs = [labels[j] for j in gone]
            logger.info("dropping %d collinear design column(s): %s", len(gone), ", ".join(repairs[:10]))
            z = z[:, keep]
            remap = -np.ones(p, dtype=np.int64)
            remap[keep] = np.arange(len(keep))
            labels = [labels[j] for j in keep]
            blocks = [(nm, remap[c][remap[c] >= 0]) for nm, c in blocks]
            blocks = [(nm, c) for nm, c in blocks if len(c)]

    elif strict and p and p <= dense_limit:
        keep = _independent_columns(z)
        if len(keep) < p:
            gone = np.setdiff1d(np.arange(p), keep)
            raise RankDeficientAfterNormalization(
                f"outcome design is rank deficient after normalization (null-space dimension {len(gone)})",
                dimension=len(gone), group="outcome_model", columns=[labels[j] for j in gone])

    gamma, theta_labels = tem.matrix(panel)
    dm = DesignMatrices(panel=panel, z=sp.csr_matrix(z), labels=labels, blocks=blocks, gamma=gamma,
                        theta_labels=theta_labels, dropped=dropped, repairs=repairs)
    if check_joint and tem.restricted and z.shape[1] + gamma.shape[1] <= dense_limit:
        full = np.hstack([dm.z.toarray(), dm.d_gamma()])
        fac = DenseFactor(full, panel.obs_weight if np.any(panel.obs_weight != 1) else None)
        deficit = full.shape[1] - fac.rank
        if deficit:
            names = [theta_labels[j - z.shape[1]] if j >= z.shape[1] else labels[j]
                     for j in fac.dependent]
            raise RankDeficientAfterNormalization(
                f"joint design with treatment-effect model {tem.kind!r} is rank deficient "
                f"(null-space dimension {deficit}); treatment_effect columns are not identified",
                dimension=deficit, group="treatment_effect", columns=names)
    return dm


@dataclass
class Estimability:
    identified: bool
    certificate: Dict[str, float]
    residual_norm: float
    rhs_norm: float

    def __bool__(self):
        return self.identified


def check_estimability(panel: Panel, model: Optional[OutcomeModelSpec], w: EstimandWeights,
                       design: Optional[DesignMatrices] = None, tol: float = 1e-8) -> Estimability:
    """Is ``tau_w`` identified under an unrestricted treatment-effect model?

    The estimand is identified iff ``Z1' w1`` lies in the row space of the
    untreated design ``Z0`` (then some ``v0`` with ``Z0' v0 = -Z1' w1``
    exists).  The certificate is the component of ``Z1' w1`` outside that row
    space, keyed by column label.
    """
    design = design or materialize_design(panel, model)
    wv = w.vector(panel)[design.omega1]
    b = design.z1.T @ wv
    nb = float(np.linalg.norm(b))
    resid = design.z0_factor.rowspace_residual(b)
    nr = float(np.linalg.norm(resid))
    ok = nr <= tol * nb or nb == 0.0
    cert = {} if ok else {design.labels[j]: float(resid[j]) for j in np.flatnonzero(np.abs(resid) > tol * max(nb, 1.0))}
    return Estimability(bool(ok), cert, nr, nb)
