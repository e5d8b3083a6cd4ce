"""Mean first hitting times of a cell-level Markov chain.

The iteration ``K_n = 1 + Q K_{n-1}`` (``K_0 = 1``) runs on the states outside
the target set A and the taboo set H.  Because ``Q >= 0`` the iterates grow
monotonically towards the minimal nonnegative solution.  States that the
chain may never bring to A grow by one per sweep; they are reported as
divergent and keep their iteration-scale value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import _accel
from ._accel import njit

TOL = 1e-10
MAX_ITERS = 100_000
DIV_WINDOW = 100
DIV_SLOPE = 0.99
STOCH_TOL = 1e-10
COND_LIMIT = 1e14
MONO_SLACK = 1e-12
SPARSE_FILL = 0.25


class HittingError(ValueError):
    pass


class IllConditionedError(HittingError, ArithmeticError):
    pass


def _index_set(idx, n, name):
    idx = np.unique(np.asarray(idx, dtype=np.int64).ravel())
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise HittingError(f"{name} has indices outside [0, {n})")
    return idx


@dataclass
class HittingProblem:
    P: np.ndarray | sparse.spmatrix
    target: np.ndarray
    taboo: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    max_iters: int = MAX_ITERS
    tol: float = TOL

    def __post_init__(self):
        P = self.P
        if not sparse.issparse(P):
            P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise HittingError("P must be square")
        n = P.shape[0]
        self.P = P
        self.target = _index_set(self.target, n, "target")
        self.taboo = _index_set(self.taboo, n, "taboo")
        if self.target.size == 0:
            raise HittingError("target set is empty")
        if np.intersect1d(self.target, self.taboo).size:
            raise HittingError("target and taboo sets overlap")
        rows = np.asarray(P.sum(axis=1)).ravel()
        neg = P.data.min() < 0 if sparse.issparse(P) and P.nnz else (not sparse.issparse(P) and P.min() < 0)
        if neg or np.max(np.abs(rows - 1.0)) > STOCH_TOL:
            raise HittingError("P is not row-stochastic")

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def free(self):
        """States the iteration runs on: outside A and H."""
        mask = np.ones(self.n, bool)
        mask[self.target] = False
        mask[self.taboo] = False
        return np.flatnonzero(mask)

    def Q(self):
        f = self.free
        if sparse.issparse(self.P):
            return self.P.tocsr()[f][:, f]
        return np.ascontiguousarray(self.P[np.ix_(f, f)])


@dataclass
class HittingResult:
    """``k`` is 0 on the target and ``inf`` on taboo states."""

    k: np.ndarray
    converged_mask: np.ndarray
    iters: int
    divergent_states: np.ndarray
    residual: float = math.nan
    condition: float = math.nan
    method: str = "iterative"

    @property
    def converged(self):
        return bool(np.all(self.converged_mask))

    def to_dict(self):
        return {
            "method": self.method,
            "iters": int(self.iters),
            "n_states": int(self.k.size),
            "n_divergent": int(self.divergent_states.size),
            "divergent_states": self.divergent_states.tolist(),
            "all_converged": self.converged,
            "residual": self.residual,
            "condition": self.condition,
        }


@njit
def _iterate_numba(Q, tol, max_iters, window):
    m = Q.shape[0]
    K = np.ones(m)
    new = np.empty(m)
    ring = np.empty((window + 1, m))
    ring[0] = K
    it = 0
    change = np.inf
    mono_ok = True
    while it < max_iters:
        it += 1
        change = 0.0
        for i in range(m):
            acc = 1.0
            for j in range(m):
                acc += Q[i, j] * K[j]
            d = acc - K[i]
            if d < -1e-12 * (1.0 + K[i]):
                mono_ok = False
            if abs(d) > change:
                change = abs(d)
            new[i] = acc
        K[:] = new
        ring[it % (window + 1)] = K
        if not mono_ok:
            break
        if change < tol:
            break
    return K, it, change, mono_ok, ring


@njit
def _iterate_csr_numba(indptr, indices, data, tol, max_iters, window):
    m = indptr.size - 1
    K = np.ones(m)
    new = np.empty(m)
    ring = np.empty((window + 1, m))
    ring[0] = K
    it = 0
    change = np.inf
    mono_ok = True
    while it < max_iters:
        it += 1
        change = 0.0
        for i in range(m):
            acc = 1.0
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * K[indices[p]]
            d = acc - K[i]
            if d < -1e-12 * (1.0 + K[i]):
                mono_ok = False
            if abs(d) > change:
                change = abs(d)
            new[i] = acc
        K[:] = new
        ring[it % (window + 1)] = K
        if not mono_ok:
            break
        if change < tol:
            break
    return K, it, change, mono_ok, ring


def _iterate_numpy(Q, tol, max_iters, window):
    m = Q.shape[0]
    K = np.ones(m)
    ring = np.empty((window + 1, m))
    ring[0] = K
    it = 0
    change = math.inf
    mono_ok = True
    while it < max_iters:
        it += 1
        new = 1.0 + Q @ K
        d = new - K
        mono_ok = bool(np.all(d >= -MONO_SLACK * (1.0 + K)))
        change = float(np.max(np.abs(d))) if m else 0.0
        K = new
        ring[it % (window + 1)] = K
        if not mono_ok or change < tol:
            break
    return K, it, change, mono_ok, ring


def _expand(problem, kfree):
    k = np.zeros(problem.n)
    k[problem.taboo] = np.inf
    k[problem.free] = kfree
    return k


def solve_hitting(problem: HittingProblem, backend=None, window=DIV_WINDOW) -> HittingResult:
    """Fixed-point iteration from ``K_0 = 1``; monotonicity is checked every sweep."""
    Q = problem.Q()
    free = problem.free
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    # exact zeros (underflowed kernel weights) make a CSR sweep much cheaper
    if not sparse.issparse(Q) and Q.size and np.count_nonzero(Q) < SPARSE_FILL * Q.size:
        Q = sparse.csr_matrix(Q)
    args = (problem.tol, problem.max_iters, window)
    if not use_numba:
        K, it, change, mono_ok, ring = _iterate_numpy(Q, *args)
    elif sparse.issparse(Q):
        Q = Q.tocsr()
        K, it, change, mono_ok, ring = _iterate_csr_numba(Q.indptr, Q.indices, Q.data, *args)
    else:
        K, it, change, mono_ok, ring = _iterate_numba(Q, *args)
    if not mono_ok:
        raise HittingError(f"iteration lost monotonicity at sweep {it}")
    prev = ring[(it - 1) % (window + 1)]
    step = K - prev
    converged = np.abs(step) < problem.tol * (1.0 + np.abs(K)) if change >= problem.tol \
        else np.ones(free.size, bool)
    divergent = np.zeros(free.size, bool)
    if it >= window and change >= problem.tol:
        old = ring[(it - window) % (window + 1)]
        divergent = (K - old) / window > DIV_SLOPE
    conv_full = np.ones(problem.n, bool)
    conv_full[problem.taboo] = False
    conv_full[free] = converged
    k = _expand(problem, K)
    res = float(np.max(np.abs(K - 1.0 - Q @ K))) if free.size else 0.0
    return HittingResult(k, conv_full, it, free[divergent], res)


def solve_hitting_direct(problem: HittingProblem) -> HittingResult:
    """Dense solve of ``(I - Q) k = 1``; refuses ill-conditioned systems."""
    Q = problem.Q()
    if sparse.issparse(Q):
        Q = Q.toarray()
    m = Q.shape[0]
    if m > 5000:
        raise HittingError("direct solve is limited to 5000 free states; use solve_hitting")
    A = np.eye(m) - Q
    cond = float(np.linalg.cond(A)) if m else 1.0
    if not math.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedError(f"I - Q has condition number {cond:.3g}; use the iterative solver")
    kfree = np.linalg.solve(A, np.ones(m))
    res = float(np.max(np.abs(A @ kfree - 1.0))) if m else 0.0
    conv = np.ones(problem.n, bool)
    conv[problem.taboo] = False
    return HittingResult(_expand(problem, kfree), conv, 0, np.zeros(0, np.int64), res, cond,
                         "direct")


def spectral_radius_bound(Q, tol=1e-12, max_iter=100_000):
    """Power-iteration estimate of rho(|Q|) using the 1-norm growth of a positive vector."""
    A = abs(Q) if sparse.issparse(Q) else np.abs(np.asarray(Q, float))
    m = A.shape[0]
    if m == 0:
        return 0.0
    x = np.full(m, 1.0 / m)
    rho = 0.0
    for _ in range(max_iter):
        y = A @ x
        s = float(np.sum(y))
        if s == 0.0:
            return 0.0
        y /= s
        done = abs(s - rho) <= tol * max(s, 1e-300)
        rho = s
        x = y
        if done:
            break
    return rho


def pseudo_time(graph, target, taboo=(), max_iters=MAX_ITERS, tol=TOL, backend=None):
    """Hitting times to ``target`` on the velocity graph."""
    P = graph.P if hasattr(graph, "P") else graph
    return solve_hitting(HittingProblem(P, target, np.asarray(taboo, np.int64), max_iters, tol),
                         backend)


@dataclass
class BifurcationGap:
    gap: np.ndarray
    fate1: HittingResult
    fate2: HittingResult
    taboo_candidates: np.ndarray

    def to_dict(self):
        return {
            "fate1": self.fate1.to_dict(),
            "fate2": self.fate2.to_dict(),
            "taboo_candidates": self.taboo_candidates.tolist(),
            "gap_quantiles": np.quantile(self.gap, [0.1, 0.5, 0.9]).tolist(),
        }


def bifurcation_gap(graph, fate_sets, max_iters=MAX_ITERS, tol=TOL, backend=None,
                    quantile=0.9) -> BifurcationGap:
    """``|k^{A1} - k^{A2}|`` per cell with both solves capped at the same ``max_iters``.

    Taboo candidates (suggestions only): cells divergent for exactly one fate
    whose gap exceeds the ``quantile`` of all gaps.
    """
    a1, a2 = fate_sets
    r1 = pseudo_time(graph, a1, (), max_iters, tol, backend)
    r2 = pseudo_time(graph, a2, (), max_iters, tol, backend)
    gap = np.abs(r1.k - r2.k)
    n = gap.size
    d1 = np.zeros(n, bool)
    d2 = np.zeros(n, bool)
    d1[r1.divergent_states] = True
    d2[r2.divergent_states] = True
    cand = np.flatnonzero((d1 ^ d2) & (gap > np.quantile(gap, quantile)))
    return BifurcationGap(gap, r1, r2, cand)


def r_squared(x, y):
    """Coefficient of determination of the least-squares line y ~ a + b x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    r = np.corrcoef(x, y)[0, 1]
    return float(r * r)


def four_state_chain(eps, p=None):
    """Stem S, bottleneck B and fates C, D (indices 0..3)."""
    p = (1.0 - eps) / 2.0 if p is None else p
    q = 1.0 - eps - p
    return np.array([[0.0, 1.0, 0.0, 0.0],
                     [eps, 0.0, p, q],
                     [0.0, eps, 1.0 - eps, 0.0],
                     [0.0, eps, 0.0, 1.0 - eps]])
