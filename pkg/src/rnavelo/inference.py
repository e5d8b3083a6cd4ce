"""Per-gene EM inference of (alpha, gamma) with beta fixed and latent cell times.

E-step: every cell is projected onto the model curve (closest point in the
(u, s) plane).  M-step: the squared residual at those times is minimised
over the rates.  This is the small-noise limit of EM, so the loss being
reduced is the plain sum of squared residuals.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _accel
from ._accel import njit
from .dynamics import GeneKinetics, StateUS, _lag_from, curve, curve_point, on_point
from .synth import TAU_FACTOR, ConfigError, ExpressionDataset

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
N_GOLDEN = 12
N_NEWTON = 4
EXTRAP_FRACTIONS = (1.0, 0.5, 0.25, 0.125)
FD_STEP = 1e-7
LOG_BOUND = 40.0
START_FACTORS = np.exp(np.linspace(math.log(0.5), math.log(2.0), 4))


class NonConvergenceError(RuntimeError):
    """Every M-step start failed; ``best`` holds the best finite attempt (or None)."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass
class EmConfig:
    t_horizon: float = 2.0 * TAU_FACTOR
    grid_size: int = 64
    max_iters: int = 200
    rel_tol: float = 1e-6
    stage: str = "on"
    t_switch: float = TAU_FACTOR
    beta: float = 1.0
    init: tuple = (0.0, 0.0)
    multistart: bool = True
    accelerate: bool = True
    gn_max_iter: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.grid_size < 16:
            raise ConfigError("grid_size must be >= 16")
        if not self.rel_tol > 0:
            raise ConfigError("rel_tol must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.stage not in ("on", "off", "auto"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not self.t_horizon > 0:
            raise ConfigError("t_horizon must be > 0")
        if self.stage in ("off", "auto") and not self.t_horizon > self.t_switch:
            raise ConfigError("off-stage fitting needs t_horizon > t_switch")

    def model_switch(self, stage):
        return math.inf if stage == "on" else float(self.t_switch)

    def window(self, stage):
        """Latent-time search interval for a stage."""
        if stage == "on":
            return 0.0, float(self.t_horizon)
        return float(self.t_switch), float(self.t_horizon)


# --- E-step kernels ----------------------------------------------------------

@njit
def _dist2(ui, si, t, a, b, g, ts, u0, s0, us, ss):
    cu, cs = curve_point(t, a, b, g, ts, u0, s0, us, ss)
    return (ui - cu) ** 2 + (si - cs) ** 2


@njit
def _project_numba(u, s, a, b, g, ts, u0, s0, lo, hi, grid_size, prev):
    us = math.nan
    ss = math.nan
    if ts < math.inf:
        us, ss = on_point(ts, a, b, g, u0, s0)
    G = grid_size
    gt = np.empty(G)
    gu = np.empty(G)
    gs = np.empty(G)
    for j in range(G):
        gt[j] = lo + (hi - lo) * j / (G - 1)
        gu[j], gs[j] = curve_point(gt[j], a, b, g, ts, u0, s0, us, ss)
    n = u.shape[0]
    out_t = np.empty(n)
    out_d = np.empty(n)
    use_prev = prev.shape[0] == n
    for i in range(n):
        ui = u[i]
        si = s[i]
        best = math.inf
        jb = 0
        for j in range(G):
            d = (ui - gu[j]) ** 2 + (si - gs[j]) ** 2
            if d < best:
                best = d
                jb = j
        left = gt[max(jb - 1, 0)]
        right = gt[min(jb + 1, G - 1)]
        x1 = right - GOLDEN * (right - left)
        x2 = left + GOLDEN * (right - left)
        f1 = _dist2(ui, si, x1, a, b, g, ts, u0, s0, us, ss)
        f2 = _dist2(ui, si, x2, a, b, g, ts, u0, s0, us, ss)
        for _ in range(N_GOLDEN):
            if f1 <= f2:
                right = x2
                x2 = x1
                f2 = f1
                x1 = right - GOLDEN * (right - left)
                f1 = _dist2(ui, si, x1, a, b, g, ts, u0, s0, us, ss)
            else:
                left = x1
                x1 = x2
                f1 = f2
                x2 = left + GOLDEN * (right - left)
                f2 = _dist2(ui, si, x2, a, b, g, ts, u0, s0, us, ss)
        if f1 <= f2:
            t = x1
            ft = f1
        else:
            t = x2
            ft = f2
        # Newton polish on the stationarity condition, kept inside the bracket
        cu, cs = curve_point(t, a, b, g, ts, u0, s0, us, ss)
        for _ in range(N_NEWTON):
            du = (a if t <= ts else 0.0) - b * cu
            ds = b * cu - g * cs
            ddu = -b * du
            dds = b * du - g * ds
            ru = ui - cu
            rs = si - cs
            grad = -(ru * du + rs * ds)
            hess = du * du + ds * ds - (ru * ddu + rs * dds)
            if hess <= 0.0:
                break
            tn = min(max(t - grad / hess, left), right)
            nu, ns = curve_point(tn, a, b, g, ts, u0, s0, us, ss)
            fn = (ui - nu) ** 2 + (si - ns) ** 2
            if fn > ft * (1.0 + 1e-12) + 1e-300:
                break
            cu = nu
            cs = ns
            step = abs(tn - t)
            t = tn
            ft = fn
            if step <= 1e-15 * (1.0 + abs(t)):
                break
        if best < ft:
            t = gt[jb]
            ft = best
        if use_prev:
            tp = min(max(prev[i], lo), hi)
            fp = _dist2(ui, si, tp, a, b, g, ts, u0, s0, us, ss)
            if fp < ft:
                t = tp
                ft = fp
        out_t[i] = t
        out_d[i] = ft
    return out_t, out_d


def _project_numpy(u, s, a, b, g, ts, u0, s0, lo, hi, grid_size, prev):
    u = np.asarray(u, dtype=float)
    s = np.asarray(s, dtype=float)

    def dist(t):
        cu, cs = curve(t, a, b, g, ts, u0, s0)
        return (u - cu) ** 2 + (s - cs) ** 2

    G = grid_size
    gt = lo + (hi - lo) * np.arange(G) / (G - 1)
    gu, gs = curve(gt, a, b, g, ts, u0, s0)
    D = (u[:, None] - gu[None, :]) ** 2 + (s[:, None] - gs[None, :]) ** 2
    jb = np.argmin(D, axis=1)
    best = D[np.arange(len(u)), jb]
    left = gt[np.maximum(jb - 1, 0)]
    right = gt[np.minimum(jb + 1, G - 1)]
    x1 = right - GOLDEN * (right - left)
    x2 = left + GOLDEN * (right - left)
    f1 = dist(x1)
    f2 = dist(x2)
    for _ in range(N_GOLDEN):
        m = f1 <= f2
        right = np.where(m, x2, right)
        left = np.where(m, left, x1)
        nx1 = np.where(m, right - GOLDEN * (right - left), x2)
        nx2 = np.where(m, x1, left + GOLDEN * (right - left))
        nf1 = np.where(m, np.nan, f2)
        nf2 = np.where(m, f1, np.nan)
        fresh = np.where(m, dist(nx1), dist(nx2))
        f1 = np.where(m, fresh, nf1)
        f2 = np.where(m, nf2, fresh)
        x1, x2 = nx1, nx2
    m = f1 <= f2
    t = np.where(m, x1, x2)
    ft = np.where(m, f1, f2)
    active = np.ones(len(u), dtype=bool)
    for _ in range(N_NEWTON):
        cu, cs = curve(t, a, b, g, ts, u0, s0)
        du = np.where(t <= ts, a, 0.0) - b * cu
        ds = b * cu - g * cs
        ddu = -b * du
        dds = b * du - g * ds
        ru = u - cu
        rs = s - cs
        grad = -(ru * du + rs * ds)
        hess = du * du + ds * ds - (ru * ddu + rs * dds)
        active &= hess > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = np.clip(t - grad / hess, left, right)
        tn = np.where(active, tn, t)
        fn = dist(tn)
        active &= fn <= ft * (1.0 + 1e-12) + 1e-300
        step = np.abs(tn - t)
        t = np.where(active, tn, t)
        ft = np.where(active, fn, ft)
        active &= step > 1e-15 * (1.0 + np.abs(t))
        if not active.any():
            break
    m = best < ft
    t = np.where(m, gt[jb], t)
    ft = np.where(m, best, ft)
    if prev is not None and len(prev) == len(u):
        tp = np.clip(prev, lo, hi)
        fp = dist(tp)
        m = fp < ft
        t = np.where(m, tp, t)
        ft = np.where(m, fp, ft)
    return t, ft


_EMPTY = np.empty(0)


def project_times(u, s, k: GeneKinetics, lo, hi, grid_size=64, init: StateUS = StateUS(0.0, 0.0),
                  prev=None, backend=None):
    """Closest-point times for all cells of one gene, and squared distances."""
    u = np.ascontiguousarray(u, dtype=float)
    s = np.ascontiguousarray(s, dtype=float)
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    args = (u, s, k.alpha_on, k.beta, k.gamma, k.t_switch, float(init.u), float(init.s),
            float(lo), float(hi), int(grid_size))
    if use_numba:
        p = _EMPTY if prev is None else np.ascontiguousarray(prev, dtype=float)
        return _project_numba(*args, p)
    return _project_numpy(*args, prev)


def project_time(x: StateUS, k: GeneKinetics, cfg: EmConfig, lo=0.0, hi=None) -> float:
    """Latent time of a single observation: argmin over [lo, hi] of the squared distance."""
    hi = cfg.t_horizon if hi is None else hi
    t, _ = project_times(np.array([x.u], float), np.array([x.s], float), k, lo, hi,
                         cfg.grid_size, StateUS(*cfg.init))
    return float(t[0])


# --- M-step kernels ----------------------------------------------------------

@njit
def _resid_numba(u, s, t, a, b, g, ts, u0, s0, out):
    us = math.nan
    ss = math.nan
    if ts < math.inf:
        us, ss = on_point(ts, a, b, g, u0, s0)
    n = u.shape[0]
    L = 0.0
    for i in range(n):
        cu, cs = curve_point(t[i], a, b, g, ts, u0, s0, us, ss)
        ru = u[i] - cu
        rs = s[i] - cs
        out[i] = ru
        out[n + i] = rs
        L += ru * ru + rs * rs
    return L


@njit
def _basis(t, mb, b, g, ts, u0, s0, out):
    """Curve at rate ``g`` split as ``x = B + alpha * A`` (the model is affine in alpha).

    ``mb`` holds ``expm1(-b t)`` (on-stage) or ``exp(-b tau)`` (off-stage)
    per cell, which does not change during an M-step.  Rows of ``out``:
    Bu, Au, Bs, As.
    """
    Bus = 0.0
    Aus = 0.0
    Bss = 0.0
    Ass = 0.0
    if ts < math.inf:
        mbs = math.expm1(-b * ts)
        mgs = math.expm1(-g * ts)
        lag = _lag_from(ts, 1.0 + mbs, b, g)
        Bus = u0 * (1.0 + mbs)
        Aus = -mbs / b
        Bss = s0 * (1.0 + mgs) - b * u0 * lag
        Ass = -mgs / g + lag
    for i in range(t.shape[0]):
        ti = t[i]
        if ti <= ts:
            mg = math.expm1(-g * ti)
            lag = _lag_from(ti, 1.0 + mb[i], b, g)
            out[0, i] = u0 * (1.0 + mb[i])
            out[1, i] = -mb[i] / b
            out[2, i] = s0 * (1.0 + mg) - b * u0 * lag
            out[3, i] = -mg / g + lag
        else:
            tau = ti - ts
            ebt = mb[i]
            egt = math.exp(-g * tau)
            lag = _lag_from(tau, ebt, b, g)
            out[0, i] = Bus * ebt
            out[1, i] = Aus * ebt
            out[2, i] = Bss * egt - b * Bus * lag
            out[3, i] = Ass * egt - b * Aus * lag


@njit
def _basis_loss(u, s, a, B):
    L = 0.0
    for i in range(u.shape[0]):
        ru = u[i] - B[0, i] - a * B[1, i]
        rs = s[i] - B[2, i] - a * B[3, i]
        L += ru * ru + rs * rs
    return L


@njit
def _gauss_newton_numba(u, s, t, la, lg, b, ts, u0, s0, max_iter, xtol):
    n = u.shape[0]
    mb = np.empty(n)
    for i in range(n):
        if t[i] <= ts:
            mb[i] = math.expm1(-b * t[i])
        else:
            mb[i] = math.exp(-b * (t[i] - ts))
    B = np.empty((4, n))
    Bg = np.empty((4, n))
    Bt = np.empty((4, n))
    _basis(t, mb, b, math.exp(lg), ts, u0, s0, B)
    a = math.exp(la)
    L = _basis_loss(u, s, a, B)
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        a = math.exp(la)
        a_h = math.exp(la + FD_STEP)
        _basis(t, mb, b, math.exp(lg + FD_STEP), ts, u0, s0, Bg)
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        g1 = 0.0
        g2 = 0.0
        for i in range(n):
            ru = u[i] - B[0, i] - a * B[1, i]
            rs = s[i] - B[2, i] - a * B[3, i]
            # forward differences of the residual in log alpha and log gamma
            ju1 = ((u[i] - B[0, i] - a_h * B[1, i]) - ru) / FD_STEP
            js1 = ((s[i] - B[2, i] - a_h * B[3, i]) - rs) / FD_STEP
            ju2 = ((u[i] - Bg[0, i] - a * Bg[1, i]) - ru) / FD_STEP
            js2 = ((s[i] - Bg[2, i] - a * Bg[3, i]) - rs) / FD_STEP
            a11 += ju1 * ju1 + js1 * js1
            a12 += ju1 * ju2 + js1 * js2
            a22 += ju2 * ju2 + js2 * js2
            g1 += ju1 * ru + js1 * rs
            g2 += ju2 * ru + js2 * rs
        ridge = 1e-12 * (a11 + a22) + 1e-300
        a11 += ridge
        a22 += ridge
        det = a11 * a22 - a12 * a12
        d1 = -(a22 * g1 - a12 * g2) / det
        d2 = -(a11 * g2 - a12 * g1) / det
        step = 1.0
        accepted = False
        Ln = L
        na = la
        ng = lg
        for _ in range(21):
            na = la + step * d1
            ng = lg + step * d2
            if abs(na) < LOG_BOUND and abs(ng) < LOG_BOUND:
                _basis(t, mb, b, math.exp(ng), ts, u0, s0, Bt)
                Ln = _basis_loss(u, s, math.exp(na), Bt)
                if Ln < L:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            status = 0
            break
        dx = step * max(abs(d1), abs(d2))
        drop = L - Ln
        la = na
        lg = ng
        L = Ln
        B, Bt = Bt, B
        if dx < xtol or drop <= 1e-15 * (L + drop):
            status = 0
            break
    if not math.isfinite(L):
        status = 2
    return la, lg, L, it, status


def _gauss_newton_numpy(u, s, t, la, lg, b, ts, u0, s0, max_iter, xtol):
    def resid(la_, lg_):
        cu, cs = curve(t, math.exp(la_), b, math.exp(lg_), ts, u0, s0)
        r = np.concatenate([u - cu, s - cs])
        return r, float(r @ r)

    r, L = resid(la, lg)
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        r1, _ = resid(la + FD_STEP, lg)
        r2, _ = resid(la, lg + FD_STEP)
        J = np.column_stack([(r1 - r) / FD_STEP, (r2 - r) / FD_STEP])
        A = J.T @ J
        grad = J.T @ r
        A[np.diag_indices(2)] += 1e-12 * np.trace(A) + 1e-300
        d = -np.linalg.solve(A, grad)
        step = 1.0
        accepted = False
        for _ in range(21):
            na, ng = la + step * d[0], lg + step * d[1]
            if abs(na) < LOG_BOUND and abs(ng) < LOG_BOUND:
                rn, Ln = resid(na, ng)
                if Ln < L:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            status = 0
            break
        dx = step * float(np.max(np.abs(d)))
        drop = L - Ln
        la, lg, L, r = na, ng, Ln, rn
        if dx < xtol or drop <= 1e-15 * (L + drop):
            status = 0
            break
    if not math.isfinite(L):
        status = 2
    return la, lg, L, it, status


def gauss_newton(u, s, t, alpha0, gamma0, beta, t_switch, init=(0.0, 0.0), max_iter=100,
                 xtol=1e-12, backend=None):
    """Damped Gauss-Newton in log-rates from one start.

    Returns ``(alpha, gamma, loss, iterations, status)`` where status is 0 for
    convergence, 1 for the iteration cap and 2 for a non-finite loss.
    """
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    fn = _gauss_newton_numba if use_numba else _gauss_newton_numpy
    la, lg, L, it, status = fn(np.ascontiguousarray(u, float), np.ascontiguousarray(s, float),
                               np.ascontiguousarray(t, float), math.log(alpha0),
                               math.log(gamma0), float(beta), float(t_switch),
                               float(init[0]), float(init[1]), int(max_iter), float(xtol))
    return math.exp(la), math.exp(lg), L, it, status


class RateFit(NamedTuple):
    alpha: float
    gamma: float
    loss: float


def moment_guess(u, s, beta=1.0):
    """Start rates from the upper tail: u_max ~ alpha/beta, u/s ~ gamma/beta there."""
    uq = max(float(np.quantile(u, 0.98)), 1e-6)
    sq = max(float(np.quantile(s, 0.98)), 1e-6)
    return uq * beta, beta * uq / sq


def start_grid(alpha0, gamma0):
    return [(alpha0 * fa, gamma0 * fg) for fa in START_FACTORS for fg in START_FACTORS]


def fit_rates(u, s, times, stage, cfg: EmConfig, starts=None) -> RateFit:
    """M-step for one gene: best Gauss-Newton fit over a set of starts.

    With ``starts=None`` a 4x4 log-spaced grid around the moment guess is used.
    """
    u = np.asarray(u, float)
    s = np.asarray(s, float)
    if starts is None:
        starts = start_grid(*moment_guess(u, s, cfg.beta))
    ts = cfg.model_switch(stage)
    best = None
    for a0, g0 in starts:
        a, g, L, _, status = gauss_newton(u, s, times, a0, g0, cfg.beta, ts, cfg.init,
                                          cfg.gn_max_iter)
        if status == 2 or not math.isfinite(L):
            continue
        if best is None or L < best.loss:
            best = RateFit(a, g, L)
    if best is None:
        raise NonConvergenceError("all Gauss-Newton starts diverged")
    return best


# --- EM driver ---------------------------------------------------------------

@dataclass
class GeneFit:
    alpha: float
    gamma: float
    times: np.ndarray
    loss: float
    iters: int
    converged: bool
    stage: str
    trace: list = field(default_factory=list)
    error: str | None = None


def _kin(alpha, gamma, cfg, stage):
    return GeneKinetics(alpha, cfg.beta, gamma, cfg.model_switch(stage))


def _extrapolate(h):
    """Fixed point of the affine map fitted to four consecutive EM iterates.

    Two difference pairs determine the 2x2 Jacobian ``J``; the fixed point is
    ``h2 + (I - J)^{-1} (h3 - h2)``.  When the differences are nearly
    collinear only the slow mode is left and a scalar Aitken step is used.
    """
    scale = np.abs(h[-1]) + 1e-12
    r0, r1, r2 = [(h[i + 1] - h[i]) / scale for i in range(3)]
    R = np.column_stack([r0, r1])
    if np.linalg.cond(R) < 1e6:
        J = np.column_stack([r1, r2]) @ np.linalg.inv(R)
        if np.max(np.abs(np.linalg.eigvals(J))) < 1.0:
            return h[2] + scale * np.linalg.solve(np.eye(2) - J, r2)
    den = float(r1 @ r1)
    if den == 0.0:
        return None
    rho = float(r2 @ r1) / den
    if not 0.0 < rho < 1.0:
        return None
    return h[3] + (rho / (1.0 - rho)) * scale * r2


def em_gene(u, s, cfg: EmConfig, stage=None) -> GeneFit:
    """EM for one gene.

    With ``cfg.accelerate`` every three plain EM steps are followed by a
    vector extrapolation toward the fixed point; it is kept only if the
    projected loss does not increase, so the recorded trace stays monotone.
    """
    stage = stage or cfg.stage
    if stage == "auto":
        fits = [em_gene(u, s, cfg, st) for st in ("on", "off")]
        return min(fits, key=lambda f: f.loss)
    u = np.asarray(u, float)
    s = np.asarray(s, float)
    lo, hi = cfg.window(stage)
    init = StateUS(*cfg.init)

    def e_step(theta, prev):
        t, d2 = project_times(u, s, _kin(theta[0], theta[1], cfg, stage), lo, hi,
                              cfg.grid_size, init, prev)
        return t, float(d2.sum())

    def m_step(theta, t, first=False):
        starts = [tuple(theta)]
        if first and cfg.multistart:
            starts = start_grid(*theta) + starts
        fit = fit_rates(u, s, t, stage, cfg, starts)
        return np.array([fit.alpha, fit.gamma])

    theta = np.array(moment_guess(u, s, cfg.beta))
    t, L = e_step(theta, None)
    trace = [L]
    converged = False
    it = 0
    hist = []
    while it < cfg.max_iters:
        it += 1
        new = m_step(theta, t, first=(it == 1))
        t, L = e_step(new, t)
        change = float(np.max(np.abs(new - theta) / (np.abs(theta) + 1e-12)))
        theta = new
        trace.append(L)
        if change < cfg.rel_tol:
            converged = True
            break
        hist.append(theta)
        if not cfg.accelerate or len(hist) < 4:
            continue
        jump = _extrapolate(hist[-4:])
        hist = [theta]
        if jump is None:
            continue
        for frac in EXTRAP_FRACTIONS:
            th_x = theta + frac * (jump - theta)
            if not (np.all(th_x > 0) and np.all(np.isfinite(th_x))):
                continue
            t_x, L_x = e_step(th_x, t)
            if L_x <= L:
                theta, t, L = th_x, t_x, L_x
                trace.append(L)
                hist = [theta]
                break
    return GeneFit(float(theta[0]), float(theta[1]), t, L, it, converged, stage, trace)


@dataclass
class EmResult:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    time_matrix: np.ndarray
    loss: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    stages: list
    traces: list
    errors: list
    config: EmConfig

    @property
    def kinetics_hat(self):
        return [_kin(a, g, self.config, st) for a, g, st in zip(self.alpha, self.gamma, self.stages)]

    @property
    def total_loss(self):
        return float(np.sum(self.loss))

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
            "loss": self.loss.tolist(), "iters": self.iters.tolist(),
            "converged": self.converged.tolist(), "stages": list(self.stages),
            "errors": list(self.errors), "traces": [list(t) for t in self.traces],
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.config.__dict__.items()},
        }

    @classmethod
    def from_dict(cls, d, time_matrix):
        cfg_d = dict(d["config"])
        cfg_d["init"] = tuple(cfg_d.get("init", (0.0, 0.0)))
        return cls(np.asarray(d["alpha"], float), np.asarray(d["beta"], float),
                   np.asarray(d["gamma"], float), np.asarray(time_matrix, float),
                   np.asarray(d["loss"], float), np.asarray(d["iters"], int),
                   np.asarray(d["converged"], bool), list(d["stages"]), d["traces"],
                   list(d["errors"]), EmConfig(**cfg_d))


def _safe_gene(args):
    u, s, cfg = args
    try:
        return em_gene(u, s, cfg)
    except NonConvergenceError as exc:
        n = len(u)
        return GeneFit(math.nan, math.nan, np.full(n, math.nan), math.nan, 0, False,
                       cfg.stage, [], str(exc))


def em_infer(ds: ExpressionDataset, cfg: EmConfig | None = None) -> EmResult:
    """Fit every gene independently; failures are flagged per gene."""
    cfg = cfg or EmConfig()
    if ds.n_cells == 0 or ds.n_genes == 0:
        raise ValueError("dataset is empty")
    jobs = [(ds.U[:, g], ds.S[:, g], cfg) for g in range(ds.n_genes)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            fits = list(pool.map(_safe_gene, jobs))
    else:
        fits = [_safe_gene(j) for j in jobs]
    return EmResult(
        alpha=np.array([f.alpha for f in fits]),
        beta=np.full(len(fits), cfg.beta),
        gamma=np.array([f.gamma for f in fits]),
        time_matrix=np.column_stack([f.times for f in fits]),
        loss=np.array([f.loss for f in fits]),
        iters=np.array([f.iters for f in fits]),
        converged=np.array([f.converged for f in fits]),
        stages=[f.stage for f in fits],
        traces=[f.trace for f in fits],
        errors=[f.error for f in fits],
        config=cfg,
    )


def velocity_field(ds: ExpressionDataset, result: EmResult, beta=None, gamma=None):
    """``beta_g * u - gamma_g * s`` on the observed data.

    Defaults to the fitted rates (beta = 1); pass rescaled ``beta``/``gamma``
    vectors to get the velocity after time-scale fixation.
    """
    b = result.beta if beta is None else np.asarray(beta, float)
    g = result.gamma if gamma is None else np.asarray(gamma, float)
    return ds.U * b[None, :] - ds.S * g[None, :]


def em_update(u, s, alpha, gamma, cfg: EmConfig, stage, times=None):
    """One EM map application ``theta -> M(theta)`` from ``(alpha, gamma)``.

    The E-step is a fresh projection (no memory of earlier times) unless
    ``times`` is given, in which case the latent times are held fixed.
    """
    u = np.asarray(u, float)
    s = np.asarray(s, float)
    if times is None:
        lo, hi = cfg.window(stage)
        times, _ = project_times(u, s, _kin(alpha, gamma, cfg, stage), lo, hi, cfg.grid_size,
                                 StateUS(*cfg.init))
    a, g, L, _, status = gauss_newton(u, s, times, alpha, gamma, cfg.beta, cfg.model_switch(stage),
                                      cfg.init, max(cfg.gn_max_iter, 200), 1e-14)
    if status == 2:
        raise NonConvergenceError("EM update produced a non-finite loss")
    return np.array([a, g])
