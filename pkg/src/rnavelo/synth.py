"""Synthetic expression data following the published simulation protocols.

Randomness comes from one ``numpy.random.SeedSequence`` per dataset.  It is
split into named child streams (kinetics, times, assignment) plus one noise
stream per gene, so a gene's noise does not depend on how many genes are
generated or in which order.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import GeneKinetics, curve

LN10 = math.log(10.0)
TAU_FACTOR = 2.0 * LN10

# lognormal law of (alpha, beta, gamma) used for the rescaling experiment
RESCALE_MEAN = [5.0, 0.2, 0.05]
RESCALE_COV = [[0.16, 0.128, 0.0],
               [0.128, 0.16, 0.032],
               [0.0, 0.032, 0.16]]


class ConfigError(ValueError):
    """Invalid simulation or run configuration."""


def colon_range(spec):
    """Expand ``"start:step:stop"`` (inclusive stop) or pass lists through."""
    if isinstance(spec, str):
        parts = [float(p) for p in spec.split(":")]
        if len(parts) != 3:
            raise ConfigError(f"bad range {spec!r}, expected start:step:stop")
        start, step, stop = parts
        if step <= 0 or stop < start:
            raise ConfigError(f"bad range {spec!r}")
        count = int(round((stop - start) / step)) + 1
        return start + step * np.arange(count)
    if np.ndim(spec) == 0:
        return np.array([float(spec)])
    return np.asarray(spec, dtype=float)


@dataclass
class SimConfig:
    """Simulation settings.

    ``param_law`` is either ``{"kind": "lognormal", "names": [...], "mean":
    [...], "cov": [[...]], "fixed": {...}}`` or ``{"kind": "grid", "alpha":
    ..., "beta": ..., "gamma": ...}`` where each grid entry is a number, a
    list or a ``"start:step:stop"`` string.

    ``time_law["T"]`` is a number or ``"median_tau"`` (median over genes of
    ``2 ln 10 / beta_g``).

    ``stage_plan`` is one of ``on``, ``off``, ``half`` or ``bifurcation``.
    Off-stage cells sit at ``t_switch + tau`` with ``tau ~ U[0, T]``.
    """

    n_cells: int = 1000
    n_genes: int = 2000
    param_law: dict = field(default_factory=lambda: {
        "kind": "lognormal", "names": ["alpha", "beta", "gamma"],
        "mean": list(RESCALE_MEAN), "cov": [list(r) for r in RESCALE_COV]})
    time_law: dict = field(default_factory=lambda: {"kind": "uniform", "T": "median_tau"})
    noise_sigma: float = 30.0
    stage_plan: str = "on"
    t_switch: float = TAU_FACTOR
    off_fraction: float = 0.7
    init: tuple = (0.0, 0.0)
    seed: int = 0

    def validate(self):
        if self.n_cells < 1 or self.n_genes < 1:
            raise ConfigError("n_cells and n_genes must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.stage_plan not in ("on", "off", "half", "bifurcation"):
            raise ConfigError(f"unknown stage_plan {self.stage_plan!r}")
        if not 0 < self.off_fraction < 1:
            raise ConfigError("off_fraction must lie in (0, 1)")
        kind = self.param_law.get("kind")
        if kind == "lognormal":
            names = self.param_law.get("names", ["alpha", "beta", "gamma"])
            mean = np.asarray(self.param_law["mean"], dtype=float)
            cov = np.asarray(self.param_law["cov"], dtype=float)
            if cov.shape != (len(names), len(names)) or mean.shape != (len(names),):
                raise ConfigError("lognormal mean/cov shapes do not match names")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ConfigError("covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ConfigError("covariance is not positive semidefinite")
            missing = {"alpha", "beta", "gamma"} - set(names) - set(self.param_law.get("fixed", {}))
            if missing:
                raise ConfigError(f"parameters {sorted(missing)} neither sampled nor fixed")
        elif kind == "grid":
            sizes = {len(colon_range(self.param_law[k])) for k in ("alpha", "beta", "gamma")
                     if k in self.param_law}
            sizes.discard(1)
            if len(sizes) > 1:
                raise ConfigError("grid lists have different lengths")
            if sizes and sizes.pop() != self.n_genes:
                raise ConfigError("grid length does not match n_genes")
        else:
            raise ConfigError(f"unknown param_law kind {kind!r}")
        T = self.time_law.get("T")
        if not (T == "median_tau" or (isinstance(T, (int, float)) and T > 0)):
            raise ConfigError("time_law.T must be a positive number or 'median_tau'")
        return self

    def to_dict(self):
        d = asdict(self)
        d["init"] = list(self.init)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if isinstance(cfg.t_switch, str):
            cfg.t_switch = float(cfg.t_switch)
        cfg.init = tuple(cfg.init)
        return cfg.validate()

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


@dataclass
class ExpressionDataset:
    U: np.ndarray
    S: np.ndarray
    true_times: np.ndarray | None = None
    true_kinetics: list | None = None
    branch_labels: np.ndarray | None = None
    stage_labels: np.ndarray | None = None
    gene_ids: list | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        if self.U.shape != self.S.shape or self.U.ndim != 2:
            raise ValueError("U and S must be matrices of the same shape")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.S))):
            raise ValueError("expression matrices contain non-finite entries")
        if self.gene_ids is None:
            self.gene_ids = [f"g{j}" for j in range(self.U.shape[1])]

    @property
    def n_cells(self):
        return self.U.shape[0]

    @property
    def n_genes(self):
        return self.U.shape[1]

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_matrix_csv(os.path.join(out_dir, "U.csv"), self.U, self.gene_ids)
        write_matrix_csv(os.path.join(out_dir, "S.csv"), self.S, self.gene_ids)
        side = {
            "gene_ids": list(self.gene_ids),
            "true_times": None if self.true_times is None else self.true_times.tolist(),
            "true_kinetics": None if self.true_kinetics is None
            else [k.to_dict() for k in self.true_kinetics],
            "branch_labels": None if self.branch_labels is None
            else np.asarray(self.branch_labels).tolist(),
            "stage_labels": None if self.stage_labels is None
            else np.asarray(self.stage_labels).tolist(),
            "metadata": self.metadata,
        }
        with open(os.path.join(out_dir, "truth.json"), "w") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, in_dir):
        gene_ids, U = read_matrix_csv(os.path.join(in_dir, "U.csv"))
        _, S = read_matrix_csv(os.path.join(in_dir, "S.csv"))
        side = {}
        path = os.path.join(in_dir, "truth.json")
        if os.path.exists(path):
            with open(path) as fh:
                side = json.load(fh)

        def arr(key, dtype=float):
            v = side.get(key)
            return None if v is None else np.asarray(v, dtype=dtype)

        kin = side.get("true_kinetics")
        return cls(U, S, true_times=arr("true_times"),
                   true_kinetics=None if kin is None else [GeneKinetics.from_dict(k) for k in kin],
                   branch_labels=arr("branch_labels", int), stage_labels=arr("stage_labels", int),
                   gene_ids=gene_ids, metadata=side.get("metadata", {}))


def write_matrix_csv(path, M, header):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in M:
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    header = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        data = np.zeros((0, len(header)))
    return header, data


def _streams(seed, n_genes):
    root = np.random.SeedSequence(seed)
    kin, times, assign, noise = root.spawn(4)
    return (np.random.default_rng(kin), np.random.default_rng(times),
            np.random.default_rng(assign), noise.spawn(n_genes))


def sample_kinetics(cfg: SimConfig, rng) -> list[GeneKinetics]:
    law = cfg.param_law
    d = cfg.n_genes
    values = {}
    if law["kind"] == "lognormal":
        names = law.get("names", ["alpha", "beta", "gamma"])
        mean = np.asarray(law["mean"], dtype=float)
        cov = np.asarray(law["cov"], dtype=float)
        w, V = np.linalg.eigh(cov)
        if w.min() < -1e-12:
            raise ConfigError("covariance is not positive semidefinite")
        root = V * np.sqrt(np.clip(w, 0.0, None))
        z = mean + rng.standard_normal((d, len(names))) @ root.T
        for j, name in enumerate(names):
            values[name] = np.exp(z[:, j])
        for name, v in law.get("fixed", {}).items():
            values[name] = np.full(d, float(v))
    elif law["kind"] == "grid":
        for name in ("alpha", "beta", "gamma"):
            v = colon_range(law.get(name, 1.0))
            values[name] = np.full(d, v[0]) if len(v) == 1 else v
    else:
        raise ConfigError(f"unknown param_law kind {law['kind']!r}")
    return [GeneKinetics(float(a), float(b), float(g))
            for a, b, g in zip(values["alpha"], values["beta"], values["gamma"])]


def horizon(cfg: SimConfig, kinetics) -> float:
    T = cfg.time_law.get("T", "median_tau")
    if T == "median_tau":
        return float(np.median([TAU_FACTOR / k.beta for k in kinetics]))
    return float(T)


def sample_times(cfg: SimConfig, kinetics, rng) -> np.ndarray:
    """I.i.d. ``U[0, T]`` cell times."""
    return rng.uniform(0.0, horizon(cfg, kinetics), size=cfg.n_cells)


def _noise(cfg, noise_seeds, shape):
    n, d = shape
    if cfg.noise_sigma == 0:
        return np.zeros(shape), np.zeros(shape)
    NU = np.empty(shape)
    NS = np.empty(shape)
    for g, seq in enumerate(noise_seeds):
        e = np.random.default_rng(seq).normal(0.0, cfg.noise_sigma, size=(2, n))
        NU[:, g] = e[0]
        NS[:, g] = e[1]
    return NU, NS


def generate(cfg: SimConfig, noiseless: bool = False) -> ExpressionDataset:
    """Simulate a dataset; ``noiseless=True`` regenerates the exact signal."""
    cfg.validate()
    if cfg.stage_plan == "bifurcation":
        return generate_bifurcation(cfg, noiseless=noiseless)
    rng_kin, rng_t, rng_assign, noise_seeds = _streams(cfg.seed, cfg.n_genes)
    kinetics = sample_kinetics(cfg, rng_kin)
    tau = sample_times(cfg, kinetics, rng_t)
    n, d = cfg.n_cells, cfg.n_genes
    u0, s0 = cfg.init

    if cfg.stage_plan == "on":
        stage = np.zeros(n, dtype=int)
    elif cfg.stage_plan == "off":
        stage = np.ones(n, dtype=int)
    else:
        stage = np.zeros(n, dtype=int)
        stage[rng_assign.permutation(n)[: n - n // 2]] = 1
    t_sw = float(cfg.t_switch)
    times = np.where(stage == 1, t_sw + tau, tau)
    if cfg.stage_plan != "on":
        kinetics = [GeneKinetics(k.alpha_on, k.beta, k.gamma, t_sw) for k in kinetics]

    U = np.empty((n, d))
    S = np.empty((n, d))
    for g, k in enumerate(kinetics):
        U[:, g], S[:, g] = curve(times, k.alpha_on, k.beta, k.gamma, k.t_switch, u0, s0)
    if not noiseless:
        NU, NS = _noise(cfg, noise_seeds, (n, d))
        U += NU
        S += NS
    meta = {"config": cfg.to_dict(), "T": horizon(cfg, kinetics)}
    return ExpressionDataset(U, S, true_times=times, true_kinetics=kinetics,
                             stage_labels=stage, metadata=meta)


def generate_bifurcation(cfg: SimConfig, noiseless: bool = False) -> ExpressionDataset:
    """Two-branch dataset.

    A random ``off_fraction`` of genes switches off at ``2 ln 10 / beta_g`` on
    branch 1, the remaining genes switch off on branch 2.  Cells later than
    the earliest switch time are sent to a branch by a fair coin; earlier
    cells form the shared trunk (label 0).
    """
    if cfg.stage_plan != "bifurcation":
        raise ConfigError("generate_bifurcation needs stage_plan='bifurcation'")
    cfg.validate()
    rng_kin, rng_t, rng_assign, noise_seeds = _streams(cfg.seed, cfg.n_genes)
    kinetics = sample_kinetics(cfg, rng_kin)
    times = sample_times(cfg, kinetics, rng_t)
    n, d = cfg.n_cells, cfg.n_genes
    u0, s0 = cfg.init

    n_off1 = int(round(cfg.off_fraction * d))
    perm = rng_assign.permutation(d)
    off1 = np.sort(perm[:n_off1])
    off2 = np.sort(perm[n_off1:])
    switch = np.array([TAU_FACTOR / k.beta for k in kinetics])
    trunk_end = float(switch.min())
    coin = rng_assign.integers(1, 3, size=n)
    labels = np.where(times > trunk_end, coin, 0)

    U = np.empty((n, d))
    S = np.empty((n, d))
    in_off = {1: np.zeros(d, bool), 2: np.zeros(d, bool)}
    in_off[1][off1] = True
    in_off[2][off2] = True
    for g, k in enumerate(kinetics):
        u_on, s_on = curve(times, k.alpha_on, k.beta, k.gamma, math.inf, u0, s0)
        u_off, s_off = curve(times, k.alpha_on, k.beta, k.gamma, switch[g], u0, s0)
        use_off = ((labels == 1) & in_off[1][g]) | ((labels == 2) & in_off[2][g])
        U[:, g] = np.where(use_off, u_off, u_on)
        S[:, g] = np.where(use_off, s_off, s_on)
    if not noiseless:
        NU, NS = _noise(cfg, noise_seeds, (n, d))
        U += NU
        S += NS
    meta = {"config": cfg.to_dict(), "T": horizon(cfg, kinetics),
            "branch_off_genes": {"1": off1.tolist(), "2": off2.tolist()},
            "switch_times": switch.tolist(), "trunk_end": trunk_end}
    return ExpressionDataset(U, S, true_times=times, true_kinetics=kinetics,
                             branch_labels=labels, metadata=meta)
