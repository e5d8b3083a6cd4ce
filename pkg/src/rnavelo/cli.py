"""Command-line front end.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration/input error, 3 numerical failure; on
failure a JSON error object goes to stderr and to ``<out>/error.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, _accel
from .hitting import HittingError, HittingProblem, IllConditionedError, solve_hitting, solve_hitting_direct
from .inference import EmConfig, EmResult, NonConvergenceError, em_infer
from .kernelwalk import KernelError, SweepConfig, TEST_FUNCTIONS, bandwidth_sweep, n_scaling_ratio
from .rescale import RescaleError, rescale
from .synth import ConfigError, ExpressionDataset, SimConfig, generate, read_matrix_csv, write_matrix_csv
from .uq import NumericalError, sem_covariance
from . import recipes

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

PRESETS = {
    "rescale": lambda seed: recipes.rescale_config(seed),
    "coverage-on": lambda seed: recipes.coverage_config("on", seed),
    "coverage-off": lambda seed: recipes.coverage_config("off", seed),
    "pseudotime": lambda seed: recipes.pseudotime_config(seed),
    "bifurcation": lambda seed: recipes.bifurcation_config(seed),
}


class UsageError(ConfigError):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite(o):
    # JSON has no inf/nan; encode them as strings
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    return o


def write_json(path, obj):
    obj = json.loads(json.dumps(obj, default=_json_default))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_finite(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_columns(path, columns: dict):
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(x.item()) if isinstance(x, np.floating) else
                        (int(x) if isinstance(x, (np.integer, np.bool_)) else x) for x in row])


def read_index_file(path):
    """Whitespace/comma separated integer indices (``#`` comments allowed)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].replace(",", " ")
            out.extend(int(tok) for tok in line.split())
    return np.asarray(out, dtype=np.int64)


def read_graph(path):
    """Dense CSV matrix, or sparse triplets with header ``i,j,p``."""
    header, data = read_matrix_csv(path)
    if [h.strip().lower() for h in header] == ["i", "j", "p"]:
        from scipy import sparse
        i, j, p = data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2]
        n = int(max(i.max(), j.max())) + 1 if len(i) else 0
        return sparse.csr_matrix((p, (i, j)), shape=(n, n))
    if data.shape[0] != data.shape[1]:
        raise ConfigError(f"{path}: dense graph must be square, got {data.shape}")
    return data


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args, out):
    if args.config:
        cfg = SimConfig.from_file(args.config)
    elif args.preset:
        cfg = PRESETS[args.preset](args.seed if args.seed is not None else 0)
    else:
        raise UsageError("simulate needs --config or --preset")
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate(cfg)
    ds.save(out)
    return {"config": cfg.to_dict()}, ["U.csv", "S.csv", "truth.json"]


def _em_config(args):
    d = read_json(args.config) if args.config else {}
    if args.stage:
        d["stage"] = args.stage
    d["workers"] = args.workers
    if "init" in d:
        d["init"] = tuple(d["init"])
    try:
        return EmConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad EM config: {exc}") from None


def cmd_infer(args, out):
    ds = ExpressionDataset.load(args.data)
    cfg = _em_config(args)
    res = em_infer(ds, cfg)
    write_json(os.path.join(out, "em.json"), res.to_dict())
    write_matrix_csv(os.path.join(out, "time_matrix.csv"), res.time_matrix, ds.gene_ids)
    return {"em": {k: v for k, v in cfg.__dict__.items()}}, ["em.json", "time_matrix.csv"]


def cmd_rescale(args, out):
    genes, T = read_matrix_csv(args.times)
    res = rescale(T, args.proposal, per_component=args.per_component)
    d = res.to_dict()
    d["genes"] = genes
    write_json(os.path.join(out, "rescale.json"), d)
    write_columns(os.path.join(out, "t_star.csv"), {"cell": np.arange(T.shape[0]), "t_star": res.t_star})
    return {"proposal": args.proposal}, ["rescale.json", "t_star.csv"]


def cmd_uq(args, out):
    ds = ExpressionDataset.load(args.data)
    _, T = read_matrix_csv(os.path.join(args.em, "time_matrix.csv"))
    em = EmResult.from_dict(read_json(os.path.join(args.em, "em.json")), T)
    results = sem_covariance(ds, em, workers=args.workers)
    payload = []
    for gid, r in zip(ds.gene_ids, results):
        if isinstance(r, Exception):
            payload.append({"gene": gid, "error": str(r)})
        else:
            payload.append({"gene": gid, **r.to_dict()})
    write_json(os.path.join(out, "sem.json"), payload)
    return {"n_failed": sum(isinstance(r, Exception) for r in results)}, ["sem.json"]


def _sweep_config(args):
    d = read_json(args.config) if args.config else {}
    try:
        cfg = SweepConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad sweep config: {exc}") from None
    if args.n is not None:
        cfg.n = args.n
    if args.d is not None and args.d != cfg.d:
        k = np.arange(args.d)
        cfg.alpha = tuple(20.0 + 0.5 * k)
        cfg.beta = (1.0,) * args.d
        cfg.gamma = tuple(1.5 + 0.05 * k)
    if args.eps:
        cfg.epsilons = args.eps
    if args.function:
        bad = [f for f in args.function if f not in TEST_FUNCTIONS]
        if bad:
            raise ConfigError(f"unknown test function(s) {bad}")
        cfg.functions = tuple(args.function)
    if args.exclude_diagonal:
        cfg.include_diagonal = False
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_sweep(args, out):
    cfg = _sweep_config(args)
    res = bandwidth_sweep(cfg)
    cols = {"epsilon": res.epsilons}
    cols.update({f"error_{f}": e for f, e in res.errors.items()})
    write_columns(os.path.join(out, "sweep.csv"), cols)
    summary = res.to_dict()
    if args.scaling_eps:
        summary["n_scaling_ratio"] = {k: float(v) for k, v in
                                      n_scaling_ratio(cfg, args.scaling_eps).items()}
        summary["n_scaling_eps"] = args.scaling_eps
    write_json(os.path.join(out, "sweep.json"), summary)
    return {"sweep": {k: v for k, v in cfg.__dict__.items()}}, ["sweep.csv", "sweep.json"]


def cmd_hitting(args, out):
    P = read_graph(args.graph)
    target = read_index_file(args.target)
    taboo = read_index_file(args.taboo) if args.taboo else np.zeros(0, np.int64)
    prob = HittingProblem(P, target, taboo, args.max_iters, args.tol)
    res = solve_hitting_direct(prob) if args.direct else solve_hitting(prob)
    div = np.zeros(prob.n, bool)
    div[res.divergent_states] = True
    write_columns(os.path.join(out, "hitting.csv"),
                  {"state": np.arange(prob.n), "k": res.k, "converged": res.converged_mask,
                   "divergent": div})
    write_json(os.path.join(out, "hitting.json"), res.to_dict())
    return {"method": res.method}, ["hitting.csv", "hitting.json"]


def _fig_rescale(args, out):
    seed = args.seed if args.seed is not None else 0
    r = recipes.rescale_experiment(seed, workers=args.workers)
    write_columns(os.path.join(out, "rescale_tstar_gene_corr.csv"), {"corr": r["tstar_gene_corr"]})
    pair = r["gene_pair_corr"]
    write_columns(os.path.join(out, "rescale_gene_pair_corr_quantiles.csv"),
                  {"q": np.linspace(0, 1, 101), "corr": np.nanquantile(pair, np.linspace(0, 1, 101))})
    write_json(os.path.join(out, "rescale_summary.json"), recipes.summary(r))
    return ["rescale_tstar_gene_corr.csv", "rescale_gene_pair_corr_quantiles.csv",
            "rescale_summary.json"]


def _fig_uq(args, out):
    files = []
    for stage in ("on", "off"):
        r = recipes.coverage_experiment(stage, args.reps, workers=args.workers)
        write_columns(os.path.join(out, f"uq_{stage}_norm_ratio.csv"), {"ratio": r["velocity_norm_ratio"]})
        write_json(os.path.join(out, f"uq_{stage}_summary.json"), recipes.summary(r))
        files += [f"uq_{stage}_norm_ratio.csv", f"uq_{stage}_summary.json"]
    g = recipes.gamma_bias_experiment(workers=args.workers)
    write_columns(os.path.join(out, "uq_gamma_bias.csv"),
                  {"gamma": g["gamma_grid"], "bias_var": g["bias_var"], "bias_mean": g["bias_mean"],
                   "bias_skew": g["bias_skew"]})
    return files + ["uq_gamma_bias.csv"]


def _fig_sweep(args, out):
    r, res = recipes.sweep_experiment()
    cols = {"epsilon": res.epsilons}
    cols.update({f"error_{f}": e for f, e in res.errors.items()})
    write_columns(os.path.join(out, "sweep_curves.csv"), cols)
    write_json(os.path.join(out, "sweep_summary.json"), recipes.summary(r))
    return ["sweep_curves.csv", "sweep_summary.json"]


def _fig_pseudotime(args, out):
    p = recipes.pseudotime_experiment()
    write_columns(os.path.join(out, "pseudotime_series.csv"),
                  {"true_time": p["true_time"], "k_end": p["k_end"], "k_mid": p["k_mid"]})
    b = recipes.bifurcation_experiment()
    write_columns(os.path.join(out, "bifurcation_series.csv"),
                  {"true_time": b["true_time"], "branch": b["branch"], "k_naive": b["k_naive"],
                   "k_taboo": b["k_taboo"], "gap": b["gap"]})
    write_json(os.path.join(out, "pseudotime_summary.json"),
               {"linear": recipes.summary(p), "bifurcation": recipes.summary(b)})
    return ["pseudotime_series.csv", "bifurcation_series.csv", "pseudotime_summary.json"]


FIGURES = {"rescale": _fig_rescale, "uq": _fig_uq, "sweep": _fig_sweep, "pseudotime": _fig_pseudotime}


def cmd_figures(args, out):
    names = list(FIGURES) if args.which == "all" else [args.which]
    files = []
    for name in names:
        files += FIGURES[name](args, out)
    return {"figures": names}, files


COMMANDS = {"simulate": cmd_simulate, "infer": cmd_infer, "rescale": cmd_rescale, "uq": cmd_uq,
            "sweep": cmd_sweep, "hitting": cmd_hitting, "figures": cmd_figures}


def _default_workers():
    try:
        return max(1, int(os.environ.get("RNAVELO_WORKERS", "1")))
    except ValueError:
        return 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="RNG seed")
    common.add_argument("--out", default="rnavelo_out", help="output directory")
    common.add_argument("--workers", type=int, default=_default_workers(),
                        help="worker threads (default: $RNAVELO_WORKERS or 1)")
    p = _Parser(prog="rnavelo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rnavelo {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--preset", choices=sorted(PRESETS))

    s = sub.add_parser("infer", parents=[common], help="per-gene EM inference")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--stage", choices=["on", "off", "auto"])

    s = sub.add_parser("rescale", parents=[common], help="gene-shared time from a time matrix")
    s.add_argument("--times", required=True, help="cells x genes time-matrix CSV")
    s.add_argument("--proposal", type=int, choices=[1, 2], default=1)
    s.add_argument("--per-component", action="store_true",
                   help="solve each irreducible block separately instead of failing")

    s = sub.add_parser("uq", parents=[common], help="SEM covariance and 95%% intervals")
    s.add_argument("--data", required=True)
    s.add_argument("--em", required=True, help="directory written by `infer`")

    s = sub.add_parser("sweep", parents=[common], help="kernel bandwidth sweep")
    s.add_argument("--n", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--eps", help="epsilon grid start:step:stop")
    s.add_argument("--function", action="append", help="test function id (repeatable)")
    s.add_argument("--exclude-diagonal", action="store_true")
    s.add_argument("--scaling-eps", type=float, help="also report the n-scaling ratio at this epsilon")

    s = sub.add_parser("hitting", parents=[common], help="mean first hitting times")
    s.add_argument("--graph", required=True, help="dense CSV or i,j,p triplets")
    s.add_argument("--target", required=True, help="file of target indices")
    s.add_argument("--taboo", help="file of taboo indices")
    s.add_argument("--max-iters", type=int, default=100_000)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--direct", action="store_true", help="dense linear solve instead of iteration")

    s = sub.add_parser("figures", parents=[common], help="plot-ready tables for each experiment")
    s.add_argument("which", nargs="?", default="all", choices=["all", *FIGURES])
    s.add_argument("--reps", type=int, default=100, help="replicates for the uq tables")
    return p


def _fail(out, code, exc):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    if out and os.path.isdir(out):
        write_json(os.path.join(out, "error.json"), err)
    return code


def run(argv=None) -> int:
    out = None
    try:
        args = build_parser().parse_args(argv)
        out = args.out
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        extra, files = COMMANDS[args.command](args, out)
        manifest = {
            "subcommand": args.command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "config_file": args.config,
            "seed": args.seed,
            "inputs": {k: getattr(args, k) for k in ("data", "em", "times", "graph", "target", "taboo")
                       if getattr(args, k, None)},
            "outputs": sorted(files),
            "version": __version__,
            "backend": _accel.backend(),
            "wall_time_s": time.perf_counter() - t0,
            **extra,
        }
        write_json(os.path.join(out, "manifest.json"), manifest)
        return 0
    except (IllConditionedError, NumericalError, NonConvergenceError, RescaleError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(out, EXIT_NUMERIC, exc)
    except (ConfigError, KernelError, HittingError, FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(out, EXIT_CONFIG, exc)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
