"""Panel container: observations, event dates and treatment geometry.

Observations are stored sorted by (unit, time) in flat numpy arrays.  Units are
re-indexed to dense integer codes; the original keys live in ``Panel.units``.
Event dates are kept per unit as an integer array plus a ``never`` mask, so
that no arithmetic ever touches an infinite sentinel.
"""

from __future__ import annotations

import functools
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import (
    DuplicateObservation,
    InconsistentEventDate,
    MissingColumn,
    PanelError,
    UnknownObservation,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NEVER_TREATED",
    "NeverTreated",
    "Panel",
    "PanelSchema",
    "horizon",
    "load_panel",
    "partition",
]


@functools.total_ordering
class NeverTreated:
    """Event date of a unit that is never treated; sorts after every period."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NEVER_TREATED"

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return False

    def __gt__(self, other):
        return other is not self

    def __hash__(self):
        return hash("didimpute.NeverTreated")

    def __reduce__(self):
        return (NeverTreated, ())


NEVER_TREATED = NeverTreated()

EventDate = Union[int, NeverTreated]


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable observation set with event dates.

    Attributes
    ----------
    units : ndarray of object
        Original unit keys; ``units[c]`` is the key of unit code ``c``.
    unit : ndarray of int
        Unit code of every observation.
    time : ndarray of int
        Period of every observation.
    y : ndarray of float
        Outcome.
    covariates : ndarray, shape (n_obs, n_covariates)
    covariate_names : tuple of str
    obs_weight : ndarray of float
        Non-negative observation weights (1 by default).
    dose : ndarray of float or None
        Optional treatment intensity used only by per-dose estimands.
    groups : dict
        Extra categorical columns (name -> object array) for group fixed effects.
    unit_event : ndarray of int
        Event date per unit code; meaningless where ``unit_never`` is set.
    unit_never : ndarray of bool
        Never-treated flag per unit code.
    warnings : tuple of (code, message)
        Load-time notes (dropped rows, dropped always-treated units).
    """

    units: np.ndarray
    unit: np.ndarray
    time: np.ndarray
    y: np.ndarray
    unit_event: np.ndarray
    unit_never: np.ndarray
    covariates: np.ndarray = None
    covariate_names: Tuple[str, ...] = ()
    obs_weight: np.ndarray = None
    dose: Optional[np.ndarray] = None
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)
    n_dropped_missing: int = 0
    warnings: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        n = len(self.unit)
        if not (len(self.time) == len(self.y) == n):
            raise PanelError("unit, time and outcome arrays must have equal length")
        if self.covariates is None:
            object.__setattr__(self, "covariates", np.zeros((n, 0)))
        if self.obs_weight is None:
            object.__setattr__(self, "obs_weight", np.ones(n))
        cov = np.asarray(self.covariates, dtype=float).reshape(n, -1)
        if cov.shape[1] != len(self.covariate_names):
            raise PanelError("covariate_names does not match covariates")
        wt = np.asarray(self.obs_weight, dtype=float)
        if np.any(~np.isfinite(wt)) or np.any(wt < 0):
            raise PanelError("observation weights must be finite and non-negative")
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "obs_weight", _readonly(wt))
        for name in ("unit", "time", "unit_event"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))
        object.__setattr__(self, "y", _readonly(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "unit_never", _readonly(np.asarray(self.unit_never, dtype=bool)))
        if self.dose is not None:
            object.__setattr__(self, "dose", _readonly(np.asarray(self.dose, dtype=float)))
        object.__setattr__(self, "groups", {k: _readonly(np.asarray(v, dtype=object))
                                            for k, v in dict(self.groups).items()})
        if len(self.unit_event) != len(self.units) or len(self.unit_never) != len(self.units):
            raise PanelError("one event date is required per unit")
        key = self.unit * (int(self.time.max() - self.time.min()) + 1 if n else 1) + (
            self.time - (self.time.min() if n else 0))
        if n and np.any(np.diff(key) <= 0):
            if np.any(np.diff(np.sort(key)) == 0):
                raise DuplicateObservation("more than one observation for a (unit, time) pair")
            raise PanelError("observations must be sorted by (unit, time); use Panel.from_frame")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_frame(cls, df: pd.DataFrame, unit: str = "unit", time: str = "time",
                   outcome: str = "y", event_time: Optional[str] = None,
                   treated: Optional[str] = None, covariates: Sequence[str] = (),
                   weight: Optional[str] = None, dose: Optional[str] = None,
                   groups: Sequence[str] = ()) -> "Panel":
        """Build a validated panel from a long data frame.

        The event date comes either from ``event_time`` (constant within unit;
        blank, NaN or ``inf`` mean never treated) or from a 0/1 ``treated``
        column (first period with 1; all zeros means never treated).  Rows with
        a missing outcome are dropped after the event dates are derived.
        """
        if (event_time is None) == (treated is None):
            raise PanelError("exactly one of event_time or treated must be given")
        needed = [unit, time, outcome, event_time or treated, *covariates, *groups]
        needed += [c for c in (weight, dose) if c is not None]
        missing = [c for c in needed if c not in df.columns]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")

        times = pd.to_numeric(df[time], errors="coerce").to_numpy(dtype=float)
        if np.any(~np.isfinite(times)) or np.any(times != np.round(times)):
            raise PanelError(f"column {time!r} must hold integer periods")
        times = times.astype(np.int64)
        keys = df[unit].to_numpy(dtype=object)
        dup = pd.Series(list(zip(keys, times))).duplicated()
        if dup.any():
            i = int(np.flatnonzero(dup.to_numpy())[0])
            raise DuplicateObservation(f"duplicate observation for unit {keys[i]!r} at time {times[i]}")

        codes, uniques = pd.factorize(pd.Series(keys, dtype=object), sort=True)
        n_units = len(uniques)
        event = np.zeros(n_units, dtype=np.int64)
        never = np.zeros(n_units, dtype=bool)
        always = np.zeros(n_units, dtype=bool)
        order = np.lexsort((times, codes))
        if event_time is not None:
            raw = pd.to_numeric(df[event_time].replace("", np.nan), errors="coerce").to_numpy(dtype=float)
            for c in range(n_units):
                vals = raw[codes == c]
                finite = vals[np.isfinite(vals)]
                posinf = np.isnan(vals) | (vals == np.inf)
                if np.any(vals == -np.inf):
                    always[c] = True
                    continue
                if posinf.all():
                    never[c] = True
                    continue
                if posinf.any() or np.any(finite != finite[0]):
                    raise InconsistentEventDate(f"event date varies within unit {uniques[c]!r}")
                if finite[0] != round(finite[0]):
                    raise InconsistentEventDate(f"non-integer event date for unit {uniques[c]!r}")
                event[c] = int(finite[0])
        else:
            d = pd.to_numeric(df[treated], errors="coerce").to_numpy(dtype=float)
            if np.any(~np.isin(d, (0.0, 1.0))):
                raise PanelError(f"column {treated!r} must be 0/1")
            d_sorted, c_sorted, t_sorted = d[order], codes[order], times[order]
            bounds = np.flatnonzero(np.diff(c_sorted)) + 1
            for seg_d, seg_t, seg_c in zip(np.split(d_sorted, bounds), np.split(t_sorted, bounds),
                                           np.split(c_sorted, bounds)):
                c = seg_c[0]
                on = np.flatnonzero(seg_d == 1)
                if len(on) == 0:
                    never[c] = True
                    continue
                first = on[0]
                if np.any(seg_d[first:] == 0):
                    raise InconsistentEventDate(
                        f"treatment indicator of unit {uniques[c]!r} switches off after turning on")
                if first == 0:
                    always[c] = True
                event[c] = int(seg_t[first])

        notes = []
        y = pd.to_numeric(df[outcome], errors="coerce").to_numpy(dtype=float)
        keep = np.isfinite(y)
        n_missing = int((~keep).sum())
        if n_missing:
            notes.append(("missing_outcome_dropped", f"dropped {n_missing} row(s) with missing outcome"))
        if always.any():
            names = ", ".join(repr(u) for u in uniques[always])
            logger.warning("dropping always-treated unit(s): %s", names)
            notes.append(("always_treated_dropped", f"dropped always-treated unit(s): {names}"))
            keep &= ~always[codes]

        rows = order[keep[order]]
        kept_units = np.unique(codes[rows])
        remap = -np.ones(n_units, dtype=np.int64)
        remap[kept_units] = np.arange(len(kept_units))
        cov = (df[list(covariates)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)[rows]
               if covariates else np.zeros((len(rows), 0)))
        if cov.size and not np.isfinite(cov).all():
            raise PanelError("covariates must be finite")
        wt = (pd.to_numeric(df[weight], errors="coerce").to_numpy(dtype=float)[rows]
              if weight is not None else None)
        ds = (pd.to_numeric(df[dose], errors="coerce").to_numpy(dtype=float)[rows]
              if dose is not None else None)
        grp = {g: df[g].to_numpy(dtype=object)[rows] for g in groups}
        return cls(
            units=np.asarray(uniques, dtype=object)[kept_units],
            unit=remap[codes[rows]],
            time=times[rows],
            y=y[rows],
            unit_event=event[kept_units],
            unit_never=never[kept_units],
            covariates=cov,
            covariate_names=tuple(covariates),
            obs_weight=wt,
            dose=ds,
            groups=grp,
            n_dropped_missing=n_missing,
            warnings=tuple(notes),
        )

    @classmethod
    def from_arrays(cls, unit, time, y, event, covariates=None, covariate_names=(),
                    obs_weight=None, dose=None, groups=None) -> "Panel":
        """Build a panel from per-observation arrays.

        ``event`` is per observation; ``NEVER_TREATED``, ``None``, NaN or
        ``inf`` mark never-treated units.
        """
        ev = [np.nan if (e is None or e is NEVER_TREATED) else float(e) for e in event]
        data = {"unit": list(unit), "time": np.asarray(time), "y": np.asarray(y, dtype=float),
                "event": ev}
        names = tuple(covariate_names)
        if covariates is not None:
            covariates = np.asarray(covariates, dtype=float).reshape(len(data["y"]), -1)
            if not names:
                names = tuple(f"x{j}" for j in range(covariates.shape[1]))
            for j, nm in enumerate(names):
                data[nm] = covariates[:, j]
        if obs_weight is not None:
            data["_weight"] = np.asarray(obs_weight, dtype=float)
        if dose is not None:
            data["_dose"] = np.asarray(dose, dtype=float)
        for g, vals in (groups or {}).items():
            data[g] = list(vals)
        return cls.from_frame(pd.DataFrame(data), "unit", "time", "y", event_time="event",
                              covariates=names,
                              weight="_weight" if obs_weight is not None else None,
                              dose="_dose" if dose is not None else None,
                              groups=tuple((groups or {}).keys()))

    # -- derived quantities -----------------------------------------------

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @functools.cached_property
    def periods(self) -> np.ndarray:
        return _readonly(np.unique(self.time))

    @functools.cached_property
    def has_event(self) -> np.ndarray:
        """Per observation: the unit has a finite event date."""
        return _readonly(~self.unit_never[self.unit])

    @functools.cached_property
    def event(self) -> np.ndarray:
        """Per-observation event date (only meaningful where ``has_event``)."""
        return _readonly(self.unit_event[self.unit])

    @functools.cached_property
    def rel_time(self) -> np.ndarray:
        """K_it = t - E_i; zero where the unit is never treated (mask with ``has_event``)."""
        return _readonly(np.where(self.has_event, self.time - self.event, 0))

    @functools.cached_property
    def treated(self) -> np.ndarray:
        return _readonly(self.has_event & (self.time >= self.event))

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_untreated(self) -> int:
        return self.n_obs - self.n_treated

    @property
    def event_dates(self) -> Dict[Any, EventDate]:
        return {u: (NEVER_TREATED if nv else int(e))
                for u, e, nv in zip(self.units, self.unit_event, self.unit_never)}

    @functools.cached_property
    def _lookup(self) -> Dict[Tuple[Any, int], int]:
        return {(self.units[c], int(t)): i for i, (c, t) in enumerate(zip(self.unit, self.time))}

    def index_of(self, unit, time) -> int:
        """Row index of observation (unit, time)."""
        try:
            return self._lookup[(unit, int(time))]
        except KeyError:
            raise UnknownObservation(f"no observation for unit {unit!r} at time {time}") from None

    def label(self, i: int) -> Tuple[Any, int]:
        return (self.units[self.unit[i]], int(self.time[i]))

    def to_frame(self) -> pd.DataFrame:
        """Long data frame with an ``event_time`` column (NaN for never treated)."""
        ev = np.where(self.has_event, self.event.astype(float), np.nan)
        out = pd.DataFrame({"unit": self.units[self.unit], "time": self.time, "y": self.y,
                            "event_time": ev})
        for j, nm in enumerate(self.covariate_names):
            out[nm] = self.covariates[:, j]
        out["weight"] = self.obs_weight
        if self.dose is not None:
            out["dose"] = self.dose
        for g, vals in self.groups.items():
            out[g] = vals
        return out

    def subset(self, mask) -> "Panel":
        """Panel restricted to the observations where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        kept = np.unique(self.unit[mask])
        remap = -np.ones(self.n_units, dtype=np.int64)
        remap[kept] = np.arange(len(kept))
        return Panel(units=self.units[kept], unit=remap[self.unit[mask]], time=self.time[mask],
                     y=self.y[mask], unit_event=self.unit_event[kept],
                     unit_never=self.unit_never[kept], covariates=self.covariates[mask],
                     covariate_names=self.covariate_names, obs_weight=self.obs_weight[mask],
                     dose=None if self.dose is None else self.dose[mask],
                     groups={k: v[mask] for k, v in self.groups.items()})

    def with_outcome(self, y) -> "Panel":
        """Same panel with a replaced outcome vector (used heavily by simulations)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise PanelError("outcome vector has the wrong length")
        new = Panel(units=self.units, unit=self.unit, time=self.time, y=y,
                    unit_event=self.unit_event, unit_never=self.unit_never,
                    covariates=self.covariates, covariate_names=self.covariate_names,
                    obs_weight=self.obs_weight, dose=self.dose, groups=self.groups,
                    n_dropped_missing=self.n_dropped_missing, warnings=self.warnings)
        return new

    def __repr__(self):
        return (f"Panel(n_obs={self.n_obs}, n_units={self.n_units}, n_treated={self.n_treated}, "
                f"periods={self.periods.min() if self.n_obs else None}..{self.periods.max() if self.n_obs else None})")


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for :func:`load_panel`."""

    unit: str = "unit"
    time: str = "time"
    outcome: str = "y"
    event_time: Optional[str] = None
    treated: Optional[str] = None
    covariates: Tuple[str, ...] = ()
    weight: Optional[str] = None
    dose: Optional[str] = None
    groups: Tuple[str, ...] = ()


def load_panel(source, schema: Optional[PanelSchema] = None, **columns) -> Panel:
    """Read a CSV (path, text or binary stream) into a validated :class:`Panel`.

    Column names come from ``schema`` or keyword overrides.  When neither an
    event-time nor a treated column is named, ``event_time`` is used if present,
    else ``treated``.
    """
    schema = schema or PanelSchema()
    if columns:
        schema = PanelSchema(**{**schema.__dict__, **columns})
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, (str, os.PathLike)) or hasattr(source, "read"):
        df = pd.read_csv(source, encoding="utf-8", dtype={schema.unit: str}, keep_default_na=True)
    else:
        raise PanelError("source must be a path or a readable stream")
    event_time, treated = schema.event_time, schema.treated
    if event_time is None and treated is None:
        if "event_time" in df.columns:
            event_time = "event_time"
        elif "treated" in df.columns:
            treated = "treated"
        else:
            raise MissingColumn("missing column(s): event_time or treated")
    return Panel.from_frame(df, schema.unit, schema.time, schema.outcome, event_time=event_time,
                            treated=treated, covariates=schema.covariates, weight=schema.weight,
                            dose=schema.dose, groups=schema.groups)


def horizon(panel: Panel, unit, time) -> Optional[int]:
    """K_it = t - E_i for an observed (unit, time); ``None`` for never-treated units."""
    i = panel.index_of(unit, time)
    if not panel.has_event[i]:
        return None
    return int(panel.rel_time[i])


def partition(panel: Panel):
    """Split observations by treatment status.

    Returns
    -------
    omega0, omega1 : ndarray of int
        Row indices of untreated and treated observations.
    cohorts : dict
        Event date (or ``NEVER_TREATED``) -> set of unit keys.
    """
    omega1 = np.flatnonzero(panel.treated)
    omega0 = np.flatnonzero(~panel.treated)
    cohorts: Dict[EventDate, set] = {}
    for u, e, nv in zip(panel.units, panel.unit_event, panel.unit_never):
        cohorts.setdefault(NEVER_TREATED if nv else int(e), set()).add(u)
    return omega0, omega1, cohorts
