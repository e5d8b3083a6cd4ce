"""Closed-form two-stage splicing dynamics.

    du/dt = alpha(t) - beta * u
    ds/dt = beta * u - gamma * s

with ``alpha(t) = alpha_on`` for ``t <= t_switch`` and ``0`` afterwards.
All functions accept scalar or array times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit

# |gamma - beta| <= DEG_REL * max(beta, gamma) switches to the series branch
DEG_REL = 1e-7


class DomainError(ValueError):
    """Time argument outside the stage the solver was asked for."""


@dataclass(frozen=True)
class GeneKinetics:
    alpha_on: float
    beta: float
    gamma: float
    t_switch: float = math.inf

    def __post_init__(self):
        if not self.alpha_on >= 0:
            raise ValueError(f"alpha_on must be >= 0, got {self.alpha_on}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.t_switch > 0:
            raise ValueError(f"t_switch must be > 0, got {self.t_switch}")

    def scaled(self, kappa: float) -> "GeneKinetics":
        """Rates divided by ``kappa`` and switch time multiplied by it."""
        return GeneKinetics(self.alpha_on / kappa, self.beta / kappa,
                            self.gamma / kappa, self.t_switch * kappa)

    def to_dict(self):
        return {"alpha_on": self.alpha_on, "beta": self.beta, "gamma": self.gamma,
                "t_switch": None if math.isinf(self.t_switch) else self.t_switch}

    @classmethod
    def from_dict(cls, d):
        ts = d.get("t_switch")
        return cls(float(d["alpha_on"]), float(d["beta"]), float(d["gamma"]),
                   math.inf if ts is None else float(ts))


@dataclass(frozen=True)
class StateUS:
    u: float | np.ndarray
    s: float | np.ndarray

    def as_tuple(self):
        return self.u, self.s


ZERO = StateUS(0.0, 0.0)


def lag_factor(t, beta, gamma, ebt=None):
    """``(exp(-gamma t) - exp(-beta t)) / (gamma - beta)``.

    Uses ``expm1`` so there is no cancellation as gamma -> beta, and the
    series ``-t exp(-beta t) (1 - (gamma - beta) t / 2)`` inside the
    degenerate band.
    """
    t = np.asarray(t, dtype=float)
    diff = gamma - beta
    if ebt is None:
        ebt = np.exp(-beta * t)
    if abs(diff) <= DEG_REL * max(beta, gamma):
        return -t * ebt * (1.0 - 0.5 * diff * t)
    return ebt * np.expm1(-diff * t) / diff


def _on_stage(t, alpha, beta, gamma, u0, s0):
    t = np.asarray(t, dtype=float)
    mb = np.expm1(-beta * t)
    mg = np.expm1(-gamma * t)
    u = u0 * (1.0 + mb) - (alpha / beta) * mb
    s = (s0 * (1.0 + mg) - (alpha / gamma) * mg
         + (alpha - beta * u0) * lag_factor(t, beta, gamma, 1.0 + mb))
    return u, s


def _off_stage(tau, beta, gamma, us, ss):
    tau = np.asarray(tau, dtype=float)
    ebt = np.exp(-beta * tau)
    u = us * ebt
    s = ss * np.exp(-gamma * tau) - beta * us * lag_factor(tau, beta, gamma, ebt)
    return u, s


def _unwrap(x):
    return float(x) if np.ndim(x) == 0 else x


def solve_on_stage(t, k: GeneKinetics, init: StateUS = ZERO) -> StateUS:
    """Exact on-stage state at time ``t`` (0 <= t <= t_switch)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("on-stage time must be nonnegative")
    if np.any(t_arr > k.t_switch):
        raise DomainError("on-stage time exceeds t_switch")
    u, s = _on_stage(t_arr, k.alpha_on, k.beta, k.gamma, init.u, init.s)
    return StateUS(_unwrap(u), _unwrap(s))


def solve_off_stage(t, k: GeneKinetics, switch_state: StateUS) -> StateUS:
    """Exact off-stage state at absolute time ``t >= t_switch``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < k.t_switch):
        raise DomainError("off-stage time precedes t_switch")
    u, s = _off_stage(t_arr - k.t_switch, k.beta, k.gamma, switch_state.u, switch_state.s)
    return StateUS(_unwrap(u), _unwrap(s))


def switch_state(k: GeneKinetics, init: StateUS = ZERO) -> StateUS:
    if math.isinf(k.t_switch):
        return StateUS(math.nan, math.nan)
    u, s = _on_stage(k.t_switch, k.alpha_on, k.beta, k.gamma, init.u, init.s)
    return StateUS(float(u), float(s))


def curve(t, alpha, beta, gamma, t_switch=math.inf, u0=0.0, s0=0.0):
    """Vectorised trajectory ``(u(t), s(t))`` as two arrays."""
    t = np.asarray(t, dtype=float)
    u, s = _on_stage(np.minimum(t, t_switch), alpha, beta, gamma, u0, s0)
    if math.isinf(t_switch):
        return u, s
    off = t > t_switch
    if np.any(off):
        su, ss = _on_stage(t_switch, alpha, beta, gamma, u0, s0)
        uo, so = _off_stage(t - t_switch, beta, gamma, su, ss)
        u = np.where(off, uo, u)
        s = np.where(off, so, s)
    return u, s


def trajectory(k: GeneKinetics, init: StateUS, t) -> StateUS:
    """State at time ``t >= 0``, dispatching across the switch."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("time must be nonnegative")
    u, s = curve(t_arr, k.alpha_on, k.beta, k.gamma, k.t_switch, init.u, init.s)
    return StateUS(_unwrap(u), _unwrap(s))


def velocity(state: StateUS, k: GeneKinetics):
    """Spliced RNA velocity ``beta*u - gamma*s``."""
    return k.beta * state.u - k.gamma * state.s


# --- scalar kernels shared by the numba code paths -------------------------

@njit
def _lag_from(t, ebt, beta, gamma):
    diff = gamma - beta
    if abs(diff) <= DEG_REL * max(beta, gamma):
        return -t * ebt * (1.0 - 0.5 * diff * t)
    return ebt * math.expm1(-diff * t) / diff


@njit
def lag_scalar(t, beta, gamma):
    return _lag_from(t, math.exp(-beta * t), beta, gamma)


@njit
def on_point(t, alpha, beta, gamma, u0, s0):
    mb = math.expm1(-beta * t)
    mg = math.expm1(-gamma * t)
    u = u0 * (1.0 + mb) - (alpha / beta) * mb
    s = (s0 * (1.0 + mg) - (alpha / gamma) * mg
         + (alpha - beta * u0) * _lag_from(t, 1.0 + mb, beta, gamma))
    return u, s


@njit
def curve_point(t, alpha, beta, gamma, t_switch, u0, s0, us, ss):
    """Trajectory at scalar ``t``; ``(us, ss)`` is the precomputed switch state."""
    if t <= t_switch:
        return on_point(t, alpha, beta, gamma, u0, s0)
    tau = t - t_switch
    ebt = math.exp(-beta * tau)
    u = us * ebt
    s = ss * math.exp(-gamma * tau) - beta * us * _lag_from(tau, ebt, beta, gamma)
    return u, s
