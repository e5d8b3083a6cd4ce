"""Supplemented-EM covariance and 95% intervals for per-gene (alpha, gamma).

``V = (I - J_M)^{-1} I_oc^{-1}`` where ``I_oc`` is the per-cell Hessian of the
complete-data negative log-likelihood at the projected times and ``J_M`` is
the Jacobian of one EM update, both by finite differences.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import curve
from .inference import EmConfig, EmResult, NonConvergenceError, em_update
from .synth import ExpressionDataset

Z95 = 1.959963984540054
HESS_STEP = 1e-4
JAC_STEP = 1e-3
COND_MAX = 1e12
N_PARAMS = 2


class NumericalError(ArithmeticError):
    pass


@dataclass
class SemResult:
    theta_hat: np.ndarray
    I_oc: np.ndarray
    J_M: np.ndarray
    V_hat: np.ndarray
    ci95: np.ndarray
    pd_flag: bool
    sigma2: float
    n: int
    ci_suppressed: np.ndarray

    @property
    def se(self):
        d = np.diag(self.V_hat)
        return np.where(d > 0, np.sqrt(np.abs(d) / self.n), np.nan)

    @property
    def reliable(self):
        return bool(self.pd_flag and not np.any(self.ci_suppressed))

    def covers(self, truth):
        truth = np.asarray(truth, float)
        return (self.ci95[:, 0] <= truth) & (truth <= self.ci95[:, 1])

    def to_dict(self):
        axes = ["alpha", "gamma"]

        def mat(M):
            return {"rows": axes, "cols": axes, "values": np.asarray(M).tolist()}

        return {
            "params": axes,
            "theta_hat": self.theta_hat.tolist(),
            "I_oc": mat(self.I_oc),
            "J_M": mat(self.J_M),
            "V_hat": mat(self.V_hat),
            "ci95": [None if s else list(map(float, c))
                     for c, s in zip(self.ci95, self.ci_suppressed)],
            "pd_flag": bool(self.pd_flag),
            "sigma2": self.sigma2,
            "n": self.n,
        }


def sq_loss(u, s, times, theta, cfg: EmConfig, stage):
    """Sum of squared residuals at fixed latent times."""
    cu, cs = curve(times, theta[0], cfg.beta, theta[1], cfg.model_switch(stage), *cfg.init)
    return float(np.sum((u - cu) ** 2 + (s - cs) ** 2))


def fd_hessian(f, theta, rel_step=HESS_STEP):
    """Central-difference Hessian with one Richardson extrapolation (h, h/2)."""
    theta = np.asarray(theta, float)
    p = theta.size
    base = rel_step * (np.abs(theta) + 1.0)
    f0 = f(theta)

    def at(h):
        H = np.empty((p, p))
        for i in range(p):
            ei = np.zeros(p)
            ei[i] = h[i]
            H[i, i] = (f(theta + ei) - 2.0 * f0 + f(theta - ei)) / h[i] ** 2
            for j in range(i):
                ej = np.zeros(p)
                ej[j] = h[j]
                H[i, j] = H[j, i] = (f(theta + ei + ej) - f(theta + ei - ej)
                                     - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h[i] * h[j])
        return H

    H = (4.0 * at(base / 2.0) - at(base)) / 3.0
    return 0.5 * (H + H.T)


def residual_variance(u, s, times, theta, cfg, stage):
    """Noise variance per coordinate from the projected residuals.

    Projection removes the tangential component, so each cell keeps one
    residual degree of freedom: ``sigma2 = L / (n - p)``.
    """
    n = len(u)
    return sq_loss(u, s, times, theta, cfg, stage) / max(n - N_PARAMS, 1)


def complete_info(u, s, theta_hat, times_hat, cfg: EmConfig, stage, sigma2=None):
    """Per-cell complete-data information ``(1/n) Hess_theta [L / (2 sigma^2)]``."""
    u = np.asarray(u, float)
    s = np.asarray(s, float)
    n = len(u)
    if sigma2 is None:
        sigma2 = residual_variance(u, s, times_hat, theta_hat, cfg, stage)
    if not sigma2 > 0:
        raise NumericalError("residual variance is zero; information is undefined")
    H = fd_hessian(lambda th: sq_loss(u, s, times_hat, th, cfg, stage), theta_hat)
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite Hessian entries")
    return H / (2.0 * sigma2 * n)


def em_map_jacobian(u, s, theta_hat, cfg: EmConfig, stage, times=None, rel_step=JAC_STEP):
    """Forward-difference Jacobian of one EM update at ``theta_hat``.

    With ``times`` given the E-step is skipped (times treated as data).
    """
    theta_hat = np.asarray(theta_hat, float)
    p = theta_hat.size
    m0 = em_update(u, s, *theta_hat, cfg, stage, times)
    J = np.empty((p, p))
    for j in range(p):
        h = rel_step * (abs(theta_hat[j]) + 1.0)
        th = theta_hat.copy()
        th[j] += h
        try:
            mj = em_update(u, s, *th, cfg, stage, times)
        except (NonConvergenceError, ValueError) as exc:
            raise NumericalError(f"EM update failed for Jacobian column {j}: {exc}") from exc
        J[:, j] = (mj - m0) / h
    return J


def assemble(theta_hat, I_oc, J_M, n, sigma2=math.nan) -> SemResult:
    theta_hat = np.asarray(theta_hat, float)
    p = theta_hat.size
    A = np.eye(p) - J_M
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > COND_MAX:
        raise NumericalError("I - J_M is singular")
    if np.linalg.cond(I_oc) > COND_MAX:
        raise NumericalError("complete-data information is singular")
    V = np.linalg.solve(A, np.linalg.inv(I_oc))
    V = 0.5 * (V + V.T)
    pd = bool(np.min(np.linalg.eigvalsh(V)) > 0)
    d = np.diag(V)
    bad = ~(d > 0)
    half = Z95 * np.sqrt(np.where(bad, np.nan, d) / n)
    ci = np.column_stack([theta_hat - half, theta_hat + half])
    return SemResult(theta_hat, I_oc, J_M, V, ci, pd, sigma2, n, bad)


def sem_gene(u, s, theta_hat, times_hat, cfg: EmConfig, stage, times_given=False) -> SemResult:
    """SEM for one gene.  ``times_given`` treats the times as observed (no latent part)."""
    u = np.asarray(u, float)
    s = np.asarray(s, float)
    sigma2 = residual_variance(u, s, times_hat, theta_hat, cfg, stage)
    if times_given:
        # both residual components carry noise when times are data
        sigma2 = sq_loss(u, s, times_hat, theta_hat, cfg, stage) / max(2 * len(u) - N_PARAMS, 1)
    I_oc = complete_info(u, s, theta_hat, times_hat, cfg, stage, sigma2)
    J = em_map_jacobian(u, s, theta_hat, cfg, stage, times_hat if times_given else None)
    return assemble(theta_hat, I_oc, J, len(u), sigma2)


def sem_covariance(ds: ExpressionDataset, em_result: EmResult, cfg: EmConfig | None = None,
                   workers=1):
    """SEM results for every gene; failures are returned as exceptions in place."""
    cfg = cfg or em_result.config

    def one(g):
        try:
            theta = np.array([em_result.alpha[g], em_result.gamma[g]])
            if not np.all(np.isfinite(theta)):
                raise NumericalError("gene has no EM estimate")
            return sem_gene(ds.U[:, g], ds.S[:, g], theta, em_result.time_matrix[:, g], cfg,
                            em_result.stages[g])
        except (NumericalError, NonConvergenceError, np.linalg.LinAlgError) as exc:
            return exc

    genes = range(ds.n_genes)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, genes))
    return [one(g) for g in genes]
