"""Weighted linear least squares.

Two routes share one contract (minimise the weighted SSR, report rank and
fitted values):

* ``dense``: pivoted QR of the sqrt(w)-scaled, column-normalised design.  The
  factorisation is exposed as :class:`DenseFactor` so callers can reuse it for
  many right-hand sides, null-space queries and implied-weight solves.
* ``alternating``: block Gauss-Seidel on the normal equations.  Each block
  (a set of fixed effects, a per-unit slope recipe, or the dense covariates)
  is solved exactly given the others, which is the classical iterative
  demeaning scheme for high-dimensional fixed effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .exceptions import EmptyDesign, NoConvergence

__all__ = [
    "DenseFactor",
    "LsqProblem",
    "LsqSolution",
    "project_out",
    "solve",
]

#: relative pivot threshold on the normalised Gram matrix
RANK_RTOL = 1e-10


@dataclass
class LsqProblem:
    """Design (dense or sparse), response (vector or matrix) and weights.

    ``blocks`` partitions the design columns for the alternating route; when
    omitted every column is its own block.
    """

    design: object
    response: np.ndarray
    obs_weights: Optional[np.ndarray] = None
    blocks: Optional[List[np.ndarray]] = None
    labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        n = self.design.shape[0]
        if self.response.shape[0] != n:
            raise ValueError("design and response have different row counts")
        if self.obs_weights is not None:
            self.obs_weights = np.asarray(self.obs_weights, dtype=float)
            if self.obs_weights.shape != (n,) or not np.all(np.isfinite(self.obs_weights)):
                raise ValueError("weights must be a finite vector with one entry per row")
            if np.any(self.obs_weights < 0):
                raise ValueError("weights must be non-negative")


@dataclass
class LsqSolution:
    coef: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    rank: int
    pinned: List[int] = field(default_factory=list)
    method: str = "dense"
    iterations: int = 0
    last_change: float = 0.0
    ssr_path: List[float] = field(default_factory=list)


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


class DenseFactor:
    """Rank-revealing factorisation of ``sqrt(W) Z``.

    Columns are scaled to unit norm before a column-pivoted QR; a column is
    treated as dependent when its squared pivot falls below ``rtol`` times the
    leading squared pivot.  Dependent columns are pinned to zero in
    coefficient solutions (the normalisation map).
    """

    def __init__(self, design, obs_weights=None, rtol: float = RANK_RTOL):
        z = _dense(design)
        if z.ndim != 2 or z.shape[1] == 0:
            raise EmptyDesign("design has no columns")
        self.n, self.p = z.shape
        self.z = z
        self.sqrt_w = None if obs_weights is None else np.sqrt(np.asarray(obs_weights, dtype=float))
        a = z if self.sqrt_w is None else z * self.sqrt_w[:, None]
        norms = np.linalg.norm(a, axis=0)
        self.scale = np.where(norms > 0, norms, 1.0)
        a = a / self.scale
        if self.n == 0:
            self.q = np.zeros((0, 0))
            self.r = np.zeros((0, self.p))
            self.perm = np.arange(self.p)
            self.rank = 0
        else:
            self.q, self.r, self.perm = scipy.linalg.qr(a, mode="economic", pivoting=True)
            d = np.abs(np.diag(self.r))
            lead = d[0] if len(d) else 0.0
            self.rank = int(np.sum(d ** 2 > rtol * lead ** 2)) if lead > 0 else 0
        k = self.rank
        self.independent = np.sort(self.perm[:k])
        self.dependent = np.sort(self.perm[k:])
        self._r11 = self.r[:k, :k]
        self._r12 = self.r[:k, k:]
        self._null = None

    # coefficient solutions ------------------------------------------------

    def coef(self, y):
        """Least-squares coefficients with dependent columns pinned to zero."""
        y = np.asarray(y, dtype=float)
        yy = y if self.sqrt_w is None else (y * self.sqrt_w[:, None] if y.ndim == 2 else y * self.sqrt_w)
        k = self.rank
        out = np.zeros((self.p,) + y.shape[1:])
        if k:
            c = self.q[:, :k].T @ yy
            sol = scipy.linalg.solve_triangular(self._r11, c)
            out[self.perm[:k]] = sol
        return out / (self.scale if y.ndim == 1 else self.scale[:, None])

    def fitted(self, y):
        """Fitted values ``Z coef(y)``."""
        return self.z @ self.coef(y)

    # null space / row space -------------------------------------------------

    def nullspace(self):
        """Orthonormal basis (p x (p - rank)) of {x : Z x = 0}, original coordinates."""
        if self._null is None:
            k, p = self.rank, self.p
            if k == p:
                self._null = np.zeros((p, 0))
            else:
                top = -scipy.linalg.solve_triangular(self._r11, self._r12) if k else np.zeros((0, p - k))
                basis_perm = np.vstack([top, np.eye(p - k)])
                basis = np.zeros((p, p - k))
                basis[self.perm] = basis_perm
                basis /= self.scale[:, None]
                self._null = np.linalg.qr(basis)[0]
        return self._null

    def rowspace_residual(self, b):
        """Component of ``b`` (a vector over columns) orthogonal to the row space of Z."""
        n = self.nullspace()
        b = np.asarray(b, dtype=float)
        return n @ (n.T @ b)

    def in_rowspace(self, b, tol: float = 1e-8) -> bool:
        b = np.asarray(b, dtype=float)
        nb = np.linalg.norm(b)
        return bool(np.linalg.norm(self.rowspace_residual(b)) <= tol * max(nb, 1e-300)) or nb == 0

    def gram_image(self, b):
        """Return ``W Z x`` where ``Z' W Z x = b``.

        ``b`` must lie in the row space of ``Z``; the result is then unique.
        Rows are the (weighted) observation weights of the linear functional
        ``b' pi_hat``.
        """
        b = np.asarray(b, dtype=float)
        k = self.rank
        if k == 0:
            return np.zeros((self.n,) + b.shape[1:])
        c = (b / (self.scale if b.ndim == 1 else self.scale[:, None]))[self.perm][:k]
        u = scipy.linalg.solve_triangular(self._r11, c, trans="T")
        out = self.q[:, :k] @ u
        if self.sqrt_w is not None:
            out = out * (self.sqrt_w if b.ndim == 1 else self.sqrt_w[:, None])
        return out


def _blocks_or_default(problem):
    p = problem.design.shape[1]
    if problem.blocks is None:
        return [np.array([j]) for j in range(p)]
    return [np.asarray(b, dtype=np.int64) for b in problem.blocks]


class _BlockSolver:
    """Cached pseudo-inverse of one block's Gram matrix, split into connected
    components so that per-unit recipes and fixed effects stay cheap."""

    def __init__(self, zb, w):
        self.zb = sp.csc_matrix(zb)
        g = (self.zb.T @ self.zb.multiply(w[:, None]).tocsc()).tocsr() if w is not None \
            else (self.zb.T @ self.zb).tocsr()
        off = (g - sp.diags(g.diagonal())).tocsr()
        off.eliminate_zeros()
        self.diagonal = off.nnz == 0
        if self.diagonal:
            d = g.diagonal()
            self.inv_diag = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)
            return
        ncomp, lab = connected_components(g, directed=False)
        order = np.argsort(lab, kind="stable")
        cuts = np.flatnonzero(np.diff(lab[order])) + 1
        self.parts = []
        for idx in np.split(order, cuts):
            sub = g[idx][:, idx].toarray()
            self.parts.append((idx, np.linalg.pinv(sub, rcond=1e-12, hermitian=True)))

    def step(self, rhs):
        if self.diagonal:
            return rhs * (self.inv_diag if rhs.ndim == 1 else self.inv_diag[:, None])
        out = np.zeros_like(rhs)
        for idx, pinv in self.parts:
            out[idx] = pinv @ rhs[idx]
        return out


def _solve_alternating(problem, tol, max_iter, ssr_rtol):
    z = sp.csr_matrix(problem.design)
    y = problem.response
    w = problem.obs_weights
    blocks = _blocks_or_default(problem)
    solvers = [_BlockSolver(z[:, b], w) for b in blocks]
    zcols = [sp.csr_matrix(z[:, b]) for b in blocks]
    coef = np.zeros((z.shape[1],) + y.shape[1:])
    resid = y.copy()
    scale = max(float(np.max(np.abs(y))) if y.size else 0.0, 1e-300)

    def ssr(r):
        return float(np.sum((r ** 2) * (w if r.ndim == 1 else w[:, None]))) if w is not None \
            else float(np.sum(r ** 2))

    path = [ssr(resid)]
    change = np.inf
    for it in range(1, max_iter + 1):
        fit_change = np.zeros_like(y)
        for b, solver, zb in zip(blocks, solvers, zcols):
            wr = resid if w is None else (resid * w if resid.ndim == 1 else resid * w[:, None])
            delta = solver.step(zb.T @ wr)
            coef[b] += delta
            df = zb @ delta
            resid -= df
            fit_change += df
        path.append(ssr(resid))
        change = float(np.max(np.abs(fit_change))) if fit_change.size else 0.0
        rel = abs(path[-2] - path[-1]) / max(path[-2], 1e-300)
        if change < tol * scale or (ssr_rtol is not None and rel < ssr_rtol):
            return coef, resid, it, change, path
    raise NoConvergence(f"alternating projections did not converge in {max_iter} sweeps "
                        f"(last max change {change:.3g})", iterations=max_iter, last_change=change)


def solve(problem: LsqProblem, method: str = "dense", tol: float = 1e-13,
          max_iter: int = 10_000, ssr_rtol: Optional[float] = None) -> LsqSolution:
    """Minimise the weighted sum of squared residuals.

    Parameters
    ----------
    method : {"dense", "alternating"}
    tol : float
        Alternating route: stop when the largest change in fitted values over a
        sweep is below ``tol`` times the response scale.
    ssr_rtol : float, optional
        Additional stopping rule on the relative SSR decrease per sweep.
    """
    n, p = problem.design.shape
    if n == 0 or p == 0:
        raise EmptyDesign("least-squares problem has no rows or no columns")
    y = problem.response
    if method == "dense":
        fac = DenseFactor(problem.design, problem.obs_weights)
        coef = fac.coef(y)
        fitted = _dense(problem.design) @ coef
        return LsqSolution(coef=coef, fitted=fitted, residuals=y - fitted, rank=fac.rank,
                           pinned=list(fac.dependent), method="dense")
    if method == "alternating":
        coef, resid, it, change, path = _solve_alternating(problem, tol, max_iter, ssr_rtol)
        fitted = y - resid
        return LsqSolution(coef=coef, fitted=fitted, residuals=resid, rank=-1, method="alternating",
                           iterations=it, last_change=change, ssr_path=path)
    raise ValueError(f"unknown method {method!r}")


def _categorical_design(codes):
    codes = np.asarray(codes)
    _, inv = np.unique(codes, return_inverse=True)
    n = len(inv)
    return sp.csr_matrix((np.ones(n), (np.arange(n), inv)), shape=(n, inv.max() + 1 if n else 0))


def project_out(problem: LsqProblem, fe_blocks: Sequence, tol: float = 1e-14,
                max_iter: int = 10_000) -> LsqProblem:
    """Residualise design and response on categorical fixed-effect blocks.

    ``fe_blocks`` is a list of per-row category labels.  The within
    transformation is computed by alternating weighted demeaning; by
    Frisch-Waugh-Lovell, least squares on the returned problem reproduces the
    coefficients of the remaining columns in the joint regression.
    """
    w = problem.obs_weights
    mats = [_categorical_design(b) for b in fe_blocks]
    solvers = [_BlockSolver(m, w) for m in mats]
    x = _dense(problem.design).copy()
    y = np.array(problem.response, dtype=float, copy=True)
    stacked = np.column_stack([y.reshape(len(y), -1), x])
    scale = max(float(np.max(np.abs(stacked))) if stacked.size else 0.0, 1e-300)
    for it in range(max_iter):
        before = stacked.copy()
        for m, solver in zip(mats, solvers):
            wr = stacked if w is None else stacked * w[:, None]
            stacked -= m @ solver.step(m.T @ wr)
        if np.max(np.abs(stacked - before), initial=0.0) < tol * scale:
            break
    else:
        raise NoConvergence("demeaning did not converge", iterations=max_iter)
    k = y.reshape(len(y), -1).shape[1]
    ry = stacked[:, :k].reshape(y.shape)
    return LsqProblem(design=stacked[:, k:], response=ry, obs_weights=w, labels=problem.labels)
