"""Velocity-kernel random walk and its generator.

Kernel between cells i, j (delta = x_j - x_i, v_i the velocity at i):

    k(i, j) = h(|delta|^2 / eps) * g(cos<delta, v_i>)

with ``cos := 0`` on the diagonal.  Rows of ``P`` are ``k`` normalised.  The
discrete generator ``(P f - f) / sqrt(eps)`` approaches
``(m1 / m0) v_hat . grad f`` as eps -> 0 and n -> infinity.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, sparse
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn

from . import _accel
from ._accel import njit
from .dynamics import curve
from .synth import TAU_FACTOR, colon_range

# integer codes shared with the compiled kernels
G_FUNCS = {"exp": 0, "one": 1, "affine": 2}
H_FUNCS = {"exp-neg": 0, "exp-neg-half": 1}
DENSE_MAX = 20_000
CUTOFF = 1e-14


class KernelError(ValueError):
    pass


def g_eval(name, c):
    c = np.asarray(c, float)
    if name == "exp":
        return np.exp(c)
    if name == "one":
        return np.ones_like(c)
    if name == "affine":
        return 2.0 + c
    raise KernelError(f"unknown velocity kernel {name!r}")


def h_eval(name, x):
    x = np.asarray(x, float)
    if name == "exp-neg":
        return np.exp(-x)
    if name == "exp-neg-half":
        return np.exp(-0.5 * x)
    raise KernelError(f"unknown diffusion kernel {name!r}")


def h_cutoff(name, level=CUTOFF):
    """Smallest x with h(x) <= level."""
    return {"exp-neg": 1.0, "exp-neg-half": 2.0}[name] * math.log(1.0 / level)


@dataclass(frozen=True)
class KernelSpec:
    epsilon: float
    g_name: str = "exp"
    h_name: str = "exp-neg"
    d: int | None = None
    include_diagonal: bool = True
    zero_velocity: str = "error"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise KernelError("epsilon must be > 0")
        if self.g_name not in G_FUNCS:
            raise KernelError(f"unknown velocity kernel {self.g_name!r}")
        if self.h_name not in H_FUNCS:
            raise KernelError(f"unknown diffusion kernel {self.h_name!r}")
        if self.zero_velocity not in ("error", "fallback"):
            raise KernelError("zero_velocity must be 'error' or 'fallback'")

    def with_epsilon(self, eps):
        return KernelSpec(eps, self.g_name, self.h_name, self.d, self.include_diagonal,
                          self.zero_velocity)


@dataclass
class CellGraph:
    P: np.ndarray | sparse.csr_matrix
    kernel: KernelSpec
    points: np.ndarray
    velocities: np.ndarray

    @property
    def n(self):
        return self.P.shape[0]

    def apply(self, f):
        return self.P @ np.asarray(f, float)


# --- compiled kernels --------------------------------------------------------

@njit
def _log_g(code, c):
    if code == 0:
        return c
    if code == 1:
        return 0.0
    return math.log(2.0 + c)


@njit
def _log_h(code, x):
    if code == 0:
        return -x
    return -0.5 * x


@njit
def _log_kernel_row(X, V, vn, i, eps, gcode, hcode, diag, out):
    n, d = X.shape
    for j in range(n):
        if j == i:
            out[j] = _log_h(hcode, 0.0) + _log_g(gcode, 0.0) if diag else -np.inf
            continue
        r2 = 0.0
        dot = 0.0
        for k in range(d):
            dk = X[j, k] - X[i, k]
            r2 += dk * dk
            dot += dk * V[i, k]
        c = 0.0
        if r2 > 0.0 and vn[i] > 0.0:
            c = min(1.0, max(-1.0, dot / (math.sqrt(r2) * vn[i])))
        out[j] = _log_h(hcode, r2 / eps) + _log_g(gcode, c)


@njit
def _shifted_row(X, V, vn, i, eps, gcode, hcode, diag, out):
    # weights up to a common row factor; the factor cancels in P
    _log_kernel_row(X, V, vn, i, eps, gcode, hcode, diag, out)
    top = out.max()
    for j in range(out.size):
        out[j] = math.exp(out[j] - top)
    return top


@njit
def _dense_kernel_numba(X, V, vn, eps, gcode, hcode, diag):
    n = X.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        _log_kernel_row(X, V, vn, i, eps, gcode, hcode, diag, K[i])
        for j in range(n):
            K[i, j] = math.exp(K[i, j])
    return K


@njit
def _transition_numba(X, V, vn, eps, gcode, hcode, diag):
    n = X.shape[0]
    P = np.empty((n, n))
    for i in range(n):
        _shifted_row(X, V, vn, i, eps, gcode, hcode, diag, P[i])
        tot = 0.0
        for j in range(n):
            tot += P[i, j]
        for j in range(n):
            P[i, j] /= tot
    return P


@njit
def _apply_numba(X, V, vn, F, eps, gcode, hcode, diag):
    """Row-normalised kernel applied to the columns of F, without storing P."""
    n = X.shape[0]
    m = F.shape[1]
    out = np.empty((n, m))
    row = np.empty(n)
    for i in range(n):
        _shifted_row(X, V, vn, i, eps, gcode, hcode, diag, row)
        tot = 0.0
        for j in range(n):
            tot += row[j]
        for c in range(m):
            acc = 0.0
            for j in range(n):
                acc += row[j] * F[j, c]
            out[i, c] = acc / tot
    return out


def log_g_eval(name, c):
    c = np.asarray(c, float)
    if name == "exp":
        return c
    if name == "one":
        return np.zeros_like(c)
    with np.errstate(divide="ignore"):
        return np.log(2.0 + c)


def log_h_eval(name, x):
    x = np.asarray(x, float)
    return -x if name == "exp-neg" else -0.5 * x


def _log_kernel_rows_numpy(X, V, vn, rows, spec):
    delta = X[None, :, :] - X[rows][:, None, :]
    r2 = np.einsum("ijk,ijk->ij", delta, delta)
    dot = np.einsum("ijk,ik->ij", delta, V[rows])
    with np.errstate(invalid="ignore", divide="ignore"):
        c = dot / (np.sqrt(r2) * vn[rows][:, None])
    c = np.clip(np.where((r2 > 0) & (vn[rows][:, None] > 0), c, 0.0), -1.0, 1.0)
    K = log_h_eval(spec.h_name, r2 / spec.epsilon) + log_g_eval(spec.g_name, c)
    idx = np.arange(len(rows))
    K[idx, rows] = (float(log_h_eval(spec.h_name, 0.0) + log_g_eval(spec.g_name, 0.0))
                    if spec.include_diagonal else -np.inf)
    return K


def _shifted_rows_numpy(X, V, vn, rows, spec):
    L = _log_kernel_rows_numpy(X, V, vn, rows, spec)
    return np.exp(L - L.max(axis=1, keepdims=True))


def _prepare(points, velocities, spec):
    X = np.ascontiguousarray(points, dtype=float)
    V = np.ascontiguousarray(velocities, dtype=float)
    if X.ndim != 2 or X.shape != V.shape:
        raise KernelError("points and velocities must be matching n x d arrays")
    if spec.d is not None and X.shape[1] != spec.d:
        raise KernelError(f"points have dimension {X.shape[1]}, spec says {spec.d}")
    vn = np.linalg.norm(V, axis=1)
    zero = vn == 0
    if np.any(zero) and spec.zero_velocity == "error":
        raise KernelError(f"{int(zero.sum())} cells have zero velocity")
    # with the fallback the cosine is 0 for those rows, i.e. the g-term is g(0)
    return X, V, vn


def _block_rows(n, block=512):
    for a in range(0, n, block):
        yield np.arange(a, min(a + block, n))


def kernel_matrix(points, velocities, spec: KernelSpec, backend=None):
    """Unnormalised dense kernel."""
    X, V, vn = _prepare(points, velocities, spec)
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    if use_numba:
        return _dense_kernel_numba(X, V, vn, spec.epsilon, G_FUNCS[spec.g_name],
                                   H_FUNCS[spec.h_name], spec.include_diagonal)
    return np.vstack([np.exp(_log_kernel_rows_numpy(X, V, vn, rows, spec))
                      for rows in _block_rows(len(X))])


def transition_matrix(points, velocities, spec: KernelSpec, backend=None):
    """Dense row-normalised kernel, computed in log space so rows never underflow."""
    X, V, vn = _prepare(points, velocities, spec)
    if len(X) < 2 and not spec.include_diagonal:
        raise KernelError("a kernel row is empty; cannot normalise")
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    if use_numba:
        return _transition_numba(X, V, vn, spec.epsilon, G_FUNCS[spec.g_name],
                                 H_FUNCS[spec.h_name], spec.include_diagonal)
    P = np.vstack([_shifted_rows_numpy(X, V, vn, rows, spec) for rows in _block_rows(len(X))])
    return P / P.sum(axis=1, keepdims=True)


def _sparse_kernel(X, V, vn, spec):
    radius = math.sqrt(h_cutoff(spec.h_name) * spec.epsilon)
    tree = cKDTree(X)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    delta = X[j] - X[i]
    r2 = np.einsum("ij,ij->i", delta, delta)
    dot = np.einsum("ij,ij->i", delta, V[i])
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where((r2 > 0) & (vn[i] > 0), dot / (np.sqrt(r2) * vn[i]), 0.0)
    w = h_eval(spec.h_name, r2 / spec.epsilon) * g_eval(spec.g_name, c)
    n = len(X)
    K = sparse.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    if spec.include_diagonal:
        K = K + sparse.identity(n, format="csr") * float(h_eval(spec.h_name, 0.0) * g_eval(spec.g_name, 0.0))
    tot = np.asarray(K.sum(axis=1)).ravel()
    if np.any(tot <= 0):
        raise KernelError("a kernel row sums to zero; cannot normalise")
    return sparse.diags(1.0 / tot) @ K


def build_graph(points, velocities, spec: KernelSpec, backend=None, dense=None) -> CellGraph:
    """Row-stochastic transition matrix of the velocity kernel.

    Dense up to ``DENSE_MAX`` cells; beyond that pairs with
    ``h(r^2/eps) < 1e-14`` are dropped and ``P`` is sparse.
    """
    X, V, vn = _prepare(points, velocities, spec)
    dense = len(X) <= DENSE_MAX if dense is None else dense
    if dense:
        P = transition_matrix(X, V, spec, backend)
    else:
        P = _sparse_kernel(X, V, vn, spec)
    return CellGraph(P, spec, X, V)


def apply_walk(points, velocities, F, spec: KernelSpec, backend=None):
    """``P F`` computed row by row (no n x n storage)."""
    X, V, vn = _prepare(points, velocities, spec)
    if len(X) < 2 and not spec.include_diagonal:
        raise KernelError("a kernel row is empty; cannot normalise")
    F = np.asarray(F, float)
    one_d = F.ndim == 1
    F2 = np.ascontiguousarray(F[:, None] if one_d else F)
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    if use_numba:
        out = _apply_numba(X, V, vn, F2, spec.epsilon, G_FUNCS[spec.g_name],
                           H_FUNCS[spec.h_name], spec.include_diagonal)
    else:
        out = np.empty_like(F2)
        for rows in _block_rows(len(X)):
            K = _shifted_rows_numpy(X, V, vn, rows, spec)
            out[rows] = (K @ F2) / K.sum(axis=1)[:, None]
    return out[:, 0] if one_d else out


# --- generators --------------------------------------------------------------

def discrete_generator(graph: CellGraph, f_values, f_at_x=None, epsilon=None):
    """``(P f - f(x)) / sqrt(eps)`` at every graph point.

    Evaluated as ``sum_j p_ij (f_j - f(x_i))`` so constants give exact zeros
    rather than rounding residue from the row sums.
    """
    f = np.asarray(f_values, float)
    fx = f if f_at_x is None else np.asarray(f_at_x, float)
    eps = graph.kernel.epsilon if epsilon is None else epsilon
    P = graph.P
    n = P.shape[0]
    if sparse.issparse(P):
        P = P.tocsr()
        rows = np.repeat(np.arange(n), np.diff(P.indptr))
        out = np.bincount(rows, weights=P.data * (f[P.indices] - fx[rows]), minlength=n)
    else:
        out = np.empty(n)
        for rows in _block_rows(n):
            out[rows] = np.einsum("ij,ij->i", P[rows], f[None, :] - fx[rows, None])
    return out / math.sqrt(eps)


@dataclass(frozen=True)
class MomentConstants:
    m0: float
    m1: float
    m0_sq: float
    m1_sq: float
    C_d: float

    @property
    def drift(self):
        return self.m1 / self.m0


def sphere_area(d):
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / gamma_fn(d / 2.0)


def _radial(h, power):
    # integrate r^power h(r^2) out to where the integrand is negligible
    R = 1.0
    while h(R * R) * R ** power > 1e-14 or R < 1.0:
        R *= 1.5
    val, _ = integrate.quad(lambda r: r ** power * h(r * r), 0.0, R, epsabs=1e-14,
                            epsrel=1e-12, limit=200)
    return val


def _angular(gf, d, odd):
    def f(th):
        w = abs(math.sin(th)) ** (d - 2)
        return w * gf(math.cos(th)) * (math.cos(th) if odd else 1.0)

    with warnings.catch_warnings():
        # odd integrands of even g vanish; quad then reports roundoff at the 1e-17 level
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        a, _ = integrate.quad(f, -math.pi, 0.0, epsabs=1e-14, epsrel=1e-12, limit=200)
        b, _ = integrate.quad(f, 0.0, math.pi, epsabs=1e-14, epsrel=1e-12, limit=200)
    return a + b


def moment_constants(spec: KernelSpec, d=None) -> MomentConstants:
    """Radial x angular quadrature of the kernel moments (and of the squared kernel)."""
    d = spec.d if d is None else d
    if d is None or d < 2:
        raise KernelError("moment constants need dimension d >= 2")
    h = lambda x: float(h_eval(spec.h_name, x))  # noqa: E731
    g = lambda c: float(g_eval(spec.g_name, c))  # noqa: E731
    C = sphere_area(d) / _angular(lambda c: 1.0, d, False)
    m0 = C * _radial(h, d - 1) * _angular(g, d, False)
    m1 = C * _radial(h, d) * _angular(g, d, True)
    h2 = lambda x: h(x) ** 2  # noqa: E731
    g2 = lambda c: g(c) ** 2  # noqa: E731
    m0s = C * _radial(h2, d - 1) * _angular(g2, d, False)
    m1s = C * _radial(h2, d) * _angular(g2, d, True)
    return MomentConstants(m0, m1, m0s, m1s, C)


TEST_FUNCTIONS = {
    "f1": (lambda X: X.sum(axis=1), lambda X: np.ones_like(X)),
    "f2": (lambda X: X[:, -1] ** 2,
           lambda X: np.concatenate([np.zeros_like(X[:, :-1]), 2.0 * X[:, -1:]], axis=1)),
}


def continuum_generator(point, velocity, grad_f, constants: MomentConstants):
    """``(m1/m0) v_hat . grad f``; rows of ``point``/``velocity`` are cells.

    ``grad_f`` is a registered name ("f1", "f2"), a callable returning the
    gradient at ``point``, or a gradient array.
    """
    X = np.atleast_2d(np.asarray(point, float))
    V = np.atleast_2d(np.asarray(velocity, float))
    if isinstance(grad_f, str):
        G = TEST_FUNCTIONS[grad_f][1](X)
    elif callable(grad_f):
        G = np.atleast_2d(grad_f(X))
    else:
        G = np.atleast_2d(np.asarray(grad_f, float))
    vn = np.linalg.norm(V, axis=1)
    if np.any(vn == 0):
        raise KernelError("continuum generator needs nonzero velocity")
    out = constants.drift * np.einsum("ij,ij->i", V / vn[:, None], G)
    return out if np.ndim(point) > 1 else float(out[0])


def optimal_epsilon(n, d):
    """Bandwidth balancing bias and variance: ``n^(-2/(d+2))``."""
    return float(n) ** (-2.0 / (d + 2.0))


# --- bandwidth sweep ---------------------------------------------------------

@dataclass
class SweepConfig:
    n: int = 2000
    epsilons: str | list = "0.002:0.002:0.082"
    alpha: tuple = (20.0, 20.5, 21.0)
    beta: tuple = (1.0, 1.0, 1.0)
    gamma: tuple = (1.5, 1.55, 1.6)
    T: float = TAU_FACTOR
    noise_var: float = 0.5
    g_name: str = "exp"
    h_name: str = "exp-neg"
    functions: tuple = ("f1", "f2")
    window_factor: float = 0.8
    include_diagonal: bool = True
    seed: int = 0

    def eps_grid(self):
        e = self.epsilons
        return np.asarray(colon_range(e) if isinstance(e, str) else e, float)

    @property
    def d(self):
        return len(self.alpha)


def sweep_samples(cfg: SweepConfig, n=None, seed=None):
    """Noisy spliced coordinates and velocities ``beta*u - gamma*x``."""
    n = cfg.n if n is None else n
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    t = rng.uniform(0.0, cfg.T, n)
    U = np.empty((n, cfg.d))
    S = np.empty((n, cfg.d))
    for g in range(cfg.d):
        U[:, g], S[:, g] = curve(t, cfg.alpha[g], cfg.beta[g], cfg.gamma[g])
    X = S + rng.normal(0.0, math.sqrt(cfg.noise_var), size=S.shape)
    V = U * np.asarray(cfg.beta)[None, :] - X * np.asarray(cfg.gamma)[None, :]
    return X, V


@dataclass
class SweepResult:
    epsilons: np.ndarray
    errors: dict
    slopes: dict
    argmin_log_eps: dict
    optimal_epsilon: float
    window: float
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "n": self.n,
            "slopes": self.slopes,
            "argmin_log_eps": self.argmin_log_eps,
            "optimal_epsilon": self.optimal_epsilon,
            "log_optimal_epsilon": math.log(self.optimal_epsilon),
            "fit_window_max_eps": self.window,
            **self.extra,
        }


def rms_errors(X, V, eps_list, functions, spec: KernelSpec, constants=None, backend=None):
    """RMS of discrete minus continuum generator per epsilon, per function."""
    constants = constants or moment_constants(spec, X.shape[1])
    F = np.column_stack([TEST_FUNCTIONS[f][0](X) for f in functions])
    exact = np.column_stack([continuum_generator(X, V, f, constants) for f in functions])
    out = np.empty((len(eps_list), len(functions)))
    for k, eps in enumerate(eps_list):
        PF = apply_walk(X, V, F, spec.with_epsilon(eps), backend)
        L = (PF - F) / math.sqrt(eps)
        out[k] = np.sqrt(np.mean((L - exact) ** 2, axis=0))
    return out


def loglog_slope(eps, err, max_eps):
    m = eps <= max_eps
    if m.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(eps[m]), np.log(err[m]), 1)[0])


def median3(y):
    y = np.asarray(y, float)
    out = y.copy()
    for i in range(1, len(y) - 1):
        out[i] = np.median(y[i - 1:i + 2])
    return out


def is_u_shaped(err):
    """Strictly decreasing then strictly increasing after 3-point median smoothing.

    Plateaus created by the smoothing itself are collapsed before the test.
    """
    y = median3(err)
    y = y[np.concatenate([[True], np.diff(y) != 0])]
    k = int(np.argmin(y))
    if k == 0 or k == len(y) - 1:
        return False
    return bool(np.all(np.diff(y[:k + 1]) < 0) and np.all(np.diff(y[k:]) > 0))


def bandwidth_sweep(cfg: SweepConfig, backend=None) -> SweepResult:
    X, V = sweep_samples(cfg)
    eps = cfg.eps_grid()
    spec = KernelSpec(float(eps[0]), cfg.g_name, cfg.h_name, cfg.d, cfg.include_diagonal)
    err = rms_errors(X, V, eps, cfg.functions, spec, backend=backend)
    opt = optimal_epsilon(cfg.n, cfg.d)
    window = cfg.window_factor * opt
    errors = {f: err[:, k] for k, f in enumerate(cfg.functions)}
    slopes = {f: loglog_slope(eps, e, window) for f, e in errors.items()}
    argmin = {f: float(math.log(eps[int(np.argmin(e))])) for f, e in errors.items()}
    return SweepResult(eps, errors, slopes, argmin, opt, window, cfg.n)


def n_scaling_ratio(cfg: SweepConfig, epsilon, factor=4, seeds=(0,), backend=None):
    """RMS error at ``factor * n`` over RMS error at ``n`` at fixed epsilon, per function."""
    spec = KernelSpec(epsilon, cfg.g_name, cfg.h_name, cfg.d, cfg.include_diagonal)
    consts = moment_constants(spec, cfg.d)

    def err(n):
        vals = [rms_errors(*sweep_samples(cfg, n, cfg.seed + 1000 * s), [epsilon],
                           cfg.functions, spec, consts, backend)[0] for s in seeds]
        return np.mean(vals, axis=0)

    return dict(zip(cfg.functions, err(factor * cfg.n) / err(cfg.n)))
