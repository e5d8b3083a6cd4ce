"""End-to-end experiment recipes.

Each recipe simulates data, runs the relevant pipeline and returns plain
dicts/arrays.  The ``figures`` CLI command and the acceptance tests share
these functions so both see the same numbers.
"""
from __future__ import annotations

import math
import time

import numpy as np
from scipy.spatial import cKDTree

from .hitting import bifurcation_gap, pseudo_time, r_squared
from .inference import EmConfig, em_infer, velocity_field
from .kernelwalk import KernelSpec, SweepConfig, bandwidth_sweep, build_graph, n_scaling_ratio
from .rescale import rescale
from .synth import TAU_FACTOR, ExpressionDataset, SimConfig, colon_range, generate
from .uq import sem_covariance

# EM profiles for the 2000-gene rescaling runs (per-gene fits are cheap but many)
EM_RESCALE = dict(rel_tol=1e-2, grid_size=32, max_iters=20)
EM_REPLICATE = dict(rel_tol=1e-2, grid_size=32, max_iters=2, multistart=False)

PSEUDO_LAW = {"kind": "lognormal", "names": ["alpha", "gamma"], "mean": [5.0, 0.05],
              "cov": [[0.16, 0.0], [0.0, 0.16]], "fixed": {"beta": 1.0}}
PSEUDO_NOISE = 1.0
BIFURCATION_NOISE = 5.0
NEIGHBOUR_RANK = 10


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def rescale_config(seed, n_cells=1000, n_genes=2000):
    return SimConfig(n_cells=n_cells, n_genes=n_genes, noise_sigma=30.0, stage_plan="on",
                     seed=seed)


def rescale_experiment(seed=0, n_cells=1000, n_genes=2000, em=None, workers=1):
    """Gene-specific EM times, shared time from both proposals, correlation tables."""
    t0 = time.perf_counter()
    ds = generate(rescale_config(seed, n_cells, n_genes))
    fit = em_infer(ds, EmConfig(workers=workers, **(em or EM_RESCALE)))
    T = fit.time_matrix
    ok = np.all(np.isfinite(T), axis=0)
    T = T[:, ok]
    r1 = rescale(T, 1)
    r2 = rescale(T, 2)
    true_t = ds.true_times
    C = np.corrcoef(T, rowvar=False)
    iu = np.triu_indices_from(C, k=1)
    pair = C[iu]
    shared_vs_gene = np.array([np.corrcoef(r1.t_star, T[:, g])[0, 1] for g in range(T.shape[1])])
    beta_true = np.array([k.beta for k in ds.true_kinetics])[ok]
    return {
        "seed": seed,
        "n_genes_used": int(ok.sum()),
        "corr_tstar_true": float(np.corrcoef(r1.t_star, true_t)[0, 1]),
        "corr_tstar2_true": float(np.corrcoef(r2.t_star, true_t)[0, 1]),
        "median_gene_pair_corr": float(np.nanmedian(pair)),
        "median_tstar_gene_corr": float(np.nanmedian(shared_vs_gene)),
        "gene_pair_corr": pair,
        "tstar_gene_corr": shared_vs_gene,
        "cos_t": _cos(r1.t_star, r2.t_star),
        "cos_beta": _cos(r1.beta_star, r2.beta_star),
        "corr_beta_true": float(np.corrcoef(r1.beta_star, beta_true)[0, 1]),
        "seconds": time.perf_counter() - t0,
    }


def proposal_agreement(n_reps=20, seed0=1000, n_cells=1000, n_genes=2000, workers=1):
    cos_t, cos_b = [], []
    t0 = time.perf_counter()
    for r in range(n_reps):
        out = rescale_experiment(seed0 + r, n_cells, n_genes, EM_REPLICATE, workers)
        cos_t.append(out["cos_t"])
        cos_b.append(out["cos_beta"])
    return {"cos_t": np.array(cos_t), "cos_beta": np.array(cos_b),
            "median_cos_t": float(np.median(cos_t)), "median_cos_beta": float(np.median(cos_b)),
            "seconds": time.perf_counter() - t0}


def coverage_config(stage, seed):
    return SimConfig(n_cells=800, n_genes=20,
                     param_law={"kind": "grid", "alpha": "20:0.5:29.5",
                                "gamma": "1.5:0.05:2.45", "beta": 1.0},
                     time_law={"kind": "uniform", "T": TAU_FACTOR}, noise_sigma=0.2,
                     stage_plan=stage, seed=seed)


def coverage_experiment(stage="on", n_reps=100, seed0=100, workers=1):
    """CI coverage of (alpha, gamma) and per-cell velocity-norm ratios over noise replicates."""
    t0 = time.perf_counter()
    hits, ratios, cosines, failures = [], [], [], 0
    for r in range(n_reps):
        cfg = coverage_config(stage, seed0 + r)
        ds = generate(cfg)
        clean = generate(cfg, noiseless=True)
        fit = em_infer(ds, EmConfig(stage=stage, workers=workers))
        for g, sem in enumerate(sem_covariance(ds, fit, workers=workers)):
            if isinstance(sem, Exception):
                failures += 1
                continue
            k = ds.true_kinetics[g]
            hits.append(sem.covers([k.alpha_on, k.gamma]))
        gamma_true = np.array([k.gamma for k in ds.true_kinetics])
        v_hat = velocity_field(ds, fit)
        v_true = clean.U - clean.S * gamma_true[None, :]
        ratios.append(np.linalg.norm(v_hat, axis=1) / np.linalg.norm(v_true, axis=1))
        cosines.append(np.einsum("ij,ij->i", v_hat, v_true)
                       / (np.linalg.norm(v_hat, axis=1) * np.linalg.norm(v_true, axis=1)))
    hits = np.array(hits)
    ratios = np.concatenate(ratios)
    return {"stage": stage, "n_reps": n_reps,
            "coverage_alpha": float(hits[:, 0].mean()), "coverage_gamma": float(hits[:, 1].mean()),
            "sem_failures": failures, "velocity_norm_ratio": ratios,
            "median_norm_ratio": float(np.median(ratios)),
            "median_velocity_cosine": float(np.median(np.concatenate(cosines))),
            "seconds": time.perf_counter() - t0}


GAMMA_BIAS_GRID = "1.6:0.1:2.5"


def gamma_bias_config(seed, n_alpha=100, n_cells=1600, noise=0.2):
    """Every alpha draw (lognormal, log-mean 3, log-sd 0.1) paired with every gamma."""
    gam = colon_range(GAMMA_BIAS_GRID)
    alpha = np.exp(3.0 + 0.1 * np.random.default_rng(seed).standard_normal(n_alpha))
    return SimConfig(n_cells=n_cells, n_genes=n_alpha * gam.size,
                     param_law={"kind": "grid", "alpha": np.tile(alpha, gam.size).tolist(),
                                "gamma": np.repeat(gam, n_alpha).tolist(), "beta": 1.0},
                     time_law={"kind": "uniform", "T": TAU_FACTOR}, noise_sigma=noise,
                     stage_plan="half", seed=seed)


def _subset(ds, rows):
    return ExpressionDataset(ds.U[rows], ds.S[rows], ds.true_times[rows], ds.true_kinetics,
                             gene_ids=ds.gene_ids)


def gamma_bias_experiment(seed=7, n_alpha=100, n_cells=1600, workers=1):
    """Velocity bias pooled per gamma over alpha draws, cells and both stages.

    On- and off-stage cells are fitted separately with the matching stage model.
    """
    t0 = time.perf_counter()
    cfg = gamma_bias_config(seed, n_alpha, n_cells)
    ds = generate(cfg)
    clean = generate(cfg, noiseless=True)
    gam = np.array([k.gamma for k in ds.true_kinetics])
    bias = np.empty_like(ds.U)
    for code, stage in ((0, "on"), (1, "off")):
        rows = np.flatnonzero(ds.stage_labels == code)
        fit = em_infer(_subset(ds, rows), EmConfig(stage=stage, workers=workers))
        v_hat = ds.U[rows] * fit.beta - ds.S[rows] * fit.gamma
        bias[rows] = v_hat - (clean.U[rows] - clean.S[rows] * gam)
    grid = np.unique(gam)
    groups = [bias[:, np.isclose(gam, g)].ravel() for g in grid]
    return {"gamma_grid": grid,
            "bias_var": np.array([b.var(ddof=1) for b in groups]),
            "bias_mean": np.array([b.mean() for b in groups]),
            "bias_skew": np.array([float(np.mean((b - b.mean()) ** 3) / b.std() ** 3) for b in groups]),
            "seconds": time.perf_counter() - t0}


def sweep_experiment(cfg: SweepConfig | None = None, scaling_eps=0.01, factor=4):
    t0 = time.perf_counter()
    cfg = cfg or SweepConfig()
    res = bandwidth_sweep(cfg)
    ratio = n_scaling_ratio(cfg, scaling_eps, factor)
    out = res.to_dict()
    out.update({"epsilons": res.epsilons, "errors": res.errors,
                "n_scaling_ratio": {k: float(v) for k, v in ratio.items()},
                "n_scaling_eps": scaling_eps, "n_scaling_factor": factor,
                "seconds": time.perf_counter() - t0})
    return out, res


def local_bandwidth(X, rank=NEIGHBOUR_RANK):
    """Median over cells of ``d_rank^2 - d_1^2``.

    In high dimension every squared distance carries the same noise offset;
    row normalisation cancels it, so the bandwidth tracks the spread of the
    neighbourhood rather than its absolute radius.
    """
    dist, _ = cKDTree(X).query(X, rank + 1)
    spread = float(np.median(dist[:, rank] ** 2 - dist[:, 1] ** 2))
    return spread if spread > 0 else float(np.median(dist[:, rank] ** 2))


def velocity_graph(X, V, rank=NEIGHBOUR_RANK):
    spec = KernelSpec(local_bandwidth(X, rank), include_diagonal=False)
    return build_graph(X, V, spec)


def pseudotime_config(seed, n_cells=1000, n_genes=2000, noise=PSEUDO_NOISE):
    return SimConfig(n_cells=n_cells, n_genes=n_genes, param_law=PSEUDO_LAW,
                     time_law={"kind": "uniform", "T": TAU_FACTOR}, noise_sigma=noise,
                     stage_plan="on", seed=seed)


def pseudotime_experiment(seed=1, n_cells=1000, n_genes=2000, n_target=100,
                          mid=(500, 800), max_iters=100_000, noise=PSEUDO_NOISE, workers=1):
    """Hitting time to the latest cells vs true time, plus the mid-target run."""
    t0 = time.perf_counter()
    ds = generate(pseudotime_config(seed, n_cells, n_genes, noise))
    fit = em_infer(ds, EmConfig(workers=workers, **EM_REPLICATE))
    graph = velocity_graph(ds.S, velocity_field(ds, fit))
    t = ds.true_times
    order = np.argsort(t)
    A = order[-n_target:]
    rest = order[:-n_target]
    end = pseudo_time(graph, A, max_iters=max_iters)
    A_mid = order[mid[0]:mid[1]]
    pre, post = order[:mid[0]], order[mid[1]:]
    mid_res = pseudo_time(graph, A_mid, max_iters=max_iters)
    div = np.zeros(len(t), bool)
    div[mid_res.divergent_states] = True
    return {
        "epsilon": graph.kernel.epsilon,
        "r2_end_target": r_squared(t[rest], end.k[rest]),
        "end_iters": end.iters,
        "mid_iters": mid_res.iters,
        "mid_posterior_divergent_fraction": float(div[post].mean()),
        "mid_prior_divergent_fraction": float(div[pre].mean()),
        "mid_posterior_median_k": float(np.median(mid_res.k[post])),
        "mid_r2_prior": r_squared(t[pre], mid_res.k[pre]),
        "true_time": t, "k_end": end.k, "k_mid": mid_res.k,
        "seconds": time.perf_counter() - t0,
    }


def bifurcation_config(seed, n_cells=1000, n_genes=2000, noise=BIFURCATION_NOISE):
    return SimConfig(n_cells=n_cells, n_genes=n_genes, noise_sigma=noise,
                     stage_plan="bifurcation", seed=seed)


def bifurcation_experiment(seed=2, n_cells=1000, n_genes=2000, n_target=100,
                           max_iters=100_000, noise=BIFURCATION_NOISE):
    """Naive and taboo hitting times on a two-branch dataset with true rates.

    The taboo set is the part of branch 2 that the naive solver reports as
    divergent, i.e. the cells that cannot reach the branch-1 target.
    """
    t0 = time.perf_counter()
    ds = generate(bifurcation_config(seed, n_cells, n_genes, noise))
    beta = np.array([k.beta for k in ds.true_kinetics])
    gamma = np.array([k.gamma for k in ds.true_kinetics])
    graph = velocity_graph(ds.S, ds.U * beta[None, :] - ds.S * gamma[None, :])
    t = ds.true_times
    lab = ds.branch_labels
    trunk, b1, b2 = (np.flatnonzero(lab == c) for c in (0, 1, 2))
    A1 = b1[np.argsort(t[b1])[-n_target:]]
    A2 = b2[np.argsort(t[b2])[-n_target:]]
    gap = bifurcation_gap(graph, (A1, A2), max_iters=max_iters)
    naive = gap.fate1
    div = np.zeros(len(t), bool)
    div[naive.divergent_states] = True
    taboo = np.flatnonzero(div & (lab == 2))
    tab = pseudo_time(graph, A1, taboo, max_iters=max_iters)
    lineage = np.setdiff1d(np.concatenate([trunk, b1]), A1)
    return {
        "epsilon": graph.kernel.epsilon,
        "naive_iters": naive.iters,
        "branch2_divergent_fraction": float(div[b2].mean()),
        "branch1_divergent_fraction": float(div[b1].mean()),
        "trunk_divergent_fraction": float(div[trunk].mean()),
        "taboo_size": int(taboo.size),
        "r2_taboo_lineage": r_squared(t[lineage], tab.k[lineage]),
        "taboo_iters": tab.iters,
        "median_gap_trunk": float(np.median(gap.gap[trunk])),
        "median_gap_branches": float(np.median(gap.gap[np.concatenate([b1, b2])])),
        "n_taboo_candidates": int(gap.taboo_candidates.size),
        "true_time": t, "branch": lab, "k_naive": naive.k, "k_taboo": tab.k, "gap": gap.gap,
        "seconds": time.perf_counter() - t0,
    }


def velocity_norm_ratio_ok(med):
    return 0.9 <= med <= 1.1


def summary(d):
    """Drop array-valued entries (for JSON manifests)."""
    return {k: v for k, v in d.items() if not isinstance(v, np.ndarray) and not isinstance(v, dict)
            or isinstance(v, dict) and all(np.ndim(x) == 0 for x in v.values())}


def fmt(x):
    return f"{x:.4g}" if isinstance(x, float) and math.isfinite(x) else str(x)
