"""Gene-shared latent time and per-gene time-scale factors.

Both proposals reduce to the Perron vector of a d x d nonnegative matrix:

* multiplicative noise (proposal 1): ``H = W T^T T W`` with
  ``W = diag(1 / ||t_g||)``; ``x* = d lambda^{-1/2} W v``, ``beta* = 1 / x*``,
  ``t* = T W v / ||T W v||``.
* additive noise (proposal 2): ``H = T^T T``; ``beta* = v``, ``t* = T v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dynamics import GeneKinetics

RAYLEIGH_TOL = 1e-12
RESIDUAL_TOL = 1e-12
MAX_POWER_ITERS = 100_000
SIGN_TOL = 1e-12


class RescaleError(ValueError):
    pass


class ReducibleError(RescaleError):
    """``T^T T`` is reducible; ``components`` lists gene indices per block."""

    def __init__(self, components):
        self.components = [np.asarray(c, int) for c in components]
        sizes = ", ".join(str(len(c)) for c in self.components)
        super().__init__(f"T^T T is reducible: {len(self.components)} components of sizes {sizes}")


@dataclass
class GeneTimeMatrix:
    T: np.ndarray

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        if self.T.ndim != 2:
            raise RescaleError("time matrix must be 2-D (cells x genes)")
        if not np.all(np.isfinite(self.T)):
            raise RescaleError("time matrix has non-finite entries")
        if np.any(self.T < 0):
            raise RescaleError("time matrix has negative entries")

    @property
    def col_norms(self):
        return np.linalg.norm(self.T, axis=0)

    @property
    def skipped(self):
        """Genes whose time column is identically zero."""
        return np.flatnonzero(self.col_norms == 0)

    @property
    def kept(self):
        return np.flatnonzero(self.col_norms > 0)


@dataclass
class RescaleResult:
    beta_star: np.ndarray
    t_star: np.ndarray
    objective: float
    top_eigenvalue: float
    proposal: int
    skipped_genes: list
    iterations: int = 0
    eig_residual: float = 0.0
    components: list = field(default_factory=list)
    normalization: str = ""

    @property
    def x_star(self):
        return 1.0 / self.beta_star

    def to_dict(self):
        return {
            "proposal": self.proposal,
            "beta_star": [None if not math.isfinite(b) else float(b) for b in self.beta_star],
            "objective": self.objective,
            "top_eigenvalue": self.top_eigenvalue,
            "skipped_genes": [int(g) for g in self.skipped_genes],
            "iterations": self.iterations,
            "eig_residual": self.eig_residual,
            "components": [[int(g) for g in c] for c in self.components],
            "normalization": self.normalization,
        }


def _as_matrix(T):
    return T if isinstance(T, GeneTimeMatrix) else GeneTimeMatrix(T)


def check_irreducible(T):
    """Connectivity of the support graph of ``T^T T`` over the kept genes.

    Genes g, h are adjacent when some cell has positive time in both, so the
    components are those of the bipartite cell-gene support graph restricted
    to genes.  Returns ``(is_irreducible, components)`` with components as
    arrays of original gene indices.
    """
    tm = _as_matrix(T)
    kept = tm.kept
    if kept.size == 0:
        return False, []
    n = tm.T.shape[0]
    rows, cols = np.nonzero(tm.T[:, kept] > 0)
    m = kept.size
    adj = coo_matrix((np.ones(rows.size), (rows, n + cols)), shape=(n + m, n + m))
    _, labels = connected_components(adj, directed=False)
    gene_labels = labels[n:]
    comps = [kept[gene_labels == lab] for lab in np.unique(gene_labels)]
    return len(comps) == 1, comps


def power_iteration(H, tol=RAYLEIGH_TOL, max_iter=MAX_POWER_ITERS, v0=None):
    """Top eigenpair of a symmetric nonnegative matrix.

    Stops once the Rayleigh quotient changes by less than ``tol`` (relative)
    and the eigen-residual is below ``RESIDUAL_TOL * lambda``.  Starting from
    a positive vector keeps every iterate nonnegative.
    Returns ``(lam, v, iterations, residual)``.
    """
    H = np.asarray(H, dtype=float)
    d = H.shape[0]
    v = np.full(d, 1.0 / math.sqrt(d)) if v0 is None else np.asarray(v0, float)
    v = v / np.linalg.norm(v)
    Hv = H @ v
    lam = float(v @ Hv)
    if lam == 0.0:
        raise RescaleError("matrix is zero")
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        v = Hv / np.linalg.norm(Hv)
        Hv = H @ v
        new = float(v @ Hv)
        res = float(np.linalg.norm(Hv - new * v))
        done = abs(new - lam) <= tol * abs(new) and res <= RESIDUAL_TOL * abs(new)
        lam = new
        if done:
            break
    return lam, v, it, res


def _perron(v):
    """Fix the sign (largest-magnitude entry positive) and check positivity."""
    v = np.array(v, dtype=float)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    if np.any(v < -SIGN_TOL):
        raise RescaleError("top eigenvector has mixed signs")
    if np.any(v <= 0):
        raise RescaleError("top eigenvector is not strictly positive")
    return v


def _solve_block(Tk, proposal):
    """Solve one irreducible block; returns (beta, t, lam, iters, res)."""
    d = Tk.shape[1]
    if proposal == 1:
        w = 1.0 / np.linalg.norm(Tk, axis=0)
        TW = Tk * w[None, :]
        lam, v, it, res = power_iteration(TW.T @ TW)
        v = _perron(v)
        x = d * w * v / math.sqrt(lam)
        tv = TW @ v
        t = tv / np.linalg.norm(tv)
        return 1.0 / x, t, lam, it, res
    lam, v, it, res = power_iteration(Tk.T @ Tk)
    v = _perron(v)
    return v, Tk @ v, lam, it, res


def objective(T, beta, t, proposal):
    """``||T X - t 1^T||_F^2`` (proposal 1, X = diag(1/beta)) or ``||T - t beta^T||_F^2``."""
    T = np.asarray(T, float)
    beta = np.asarray(beta, float)
    t = np.asarray(t, float)
    if proposal == 1:
        return float(np.sum((T / beta[None, :] - t[:, None]) ** 2))
    return float(np.sum((T - np.outer(t, beta)) ** 2))


def _rescale(T, proposal, per_component):
    if proposal not in (1, 2):
        raise RescaleError(f"unknown proposal {proposal!r}")
    tm = _as_matrix(T)
    n, d = tm.T.shape
    kept = tm.kept
    if kept.size == 0:
        raise RescaleError("time matrix is zero")
    ok, comps = check_irreducible(tm)
    if not ok and not per_component:
        raise ReducibleError(comps)
    beta = np.full(d, math.nan)
    t_star = np.zeros(n)
    lam_max = 0.0
    iters = 0
    res_max = 0.0
    for comp in comps:
        b, t, lam, it, res = _solve_block(tm.T[:, comp], proposal)
        beta[comp] = b
        # per-component mode: weight block times by gene count
        t_star += (len(comp) / kept.size) * t
        lam_max = max(lam_max, lam)
        iters = max(iters, it)
        res_max = max(res_max, res / lam)
    if len(comps) > 1:
        if proposal == 1:
            t_star /= np.linalg.norm(t_star)
        norm = "per-component (non-canonical)"
    else:
        norm = "||t*|| = 1" if proposal == 1 else "||beta*|| = 1"
    obj = objective(tm.T[:, kept], beta[kept], t_star, proposal)
    return RescaleResult(beta, t_star, obj, lam_max, proposal, tm.skipped.tolist(), iters,
                         res_max, comps if len(comps) > 1 else [], norm)


def rescale_multiplicative(T, per_component=False) -> RescaleResult:
    """Multiplicative-noise proposal: unit-norm shared time, ``beta* = 1/x*``."""
    return _rescale(T, 1, per_component)


def rescale_additive(T, per_component=False) -> RescaleResult:
    """Additive-noise proposal: unit-norm ``beta*``, ``t* = T beta*``."""
    return _rescale(T, 2, per_component)


def rescale(T, proposal=1, per_component=False) -> RescaleResult:
    return _rescale(T, proposal, per_component)


def apply_rescale(kinetics, time_matrix, result: RescaleResult):
    """``(alpha b, b, gamma b; t / b)`` per gene with ``b = beta*_g``.

    Skipped genes (no finite factor) are passed through unchanged.  Returns
    ``(list of GeneKinetics, rescaled time matrix)``.
    """
    T = np.asarray(time_matrix, float)
    b = np.where(np.isfinite(result.beta_star), result.beta_star, 1.0)
    out = []
    for k, bg in zip(kinetics, b):
        ts = k.t_switch / bg
        out.append(GeneKinetics(k.alpha_on * bg, k.beta * bg, k.gamma * bg, ts))
    return out, T / b[None, :]
