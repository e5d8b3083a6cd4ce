import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rnavelo import cli
from rnavelo.hitting import four_state_chain
from rnavelo.synth import ExpressionDataset, SimConfig, read_matrix_csv


def digest(folder, names):
    h = hashlib.sha256()
    for n in names:
        with open(os.path.join(folder, n), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def manifest(folder):
    with open(os.path.join(folder, "manifest.json")) as fh:
        return json.load(fh)


def small_config(tmp_path, **kw):
    cfg = SimConfig(n_cells=200, n_genes=4, noise_sigma=0.5, stage_plan="on", seed=5, **kw)
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = small_config(root)
    data = str(root / "data")
    assert cli.run(["simulate", "--config", cfg, "--out", data]) == 0
    em_cfg = root / "em.json"
    em_cfg.write_text(json.dumps({"rel_tol": 1e-6, "max_iters": 200}))
    em = str(root / "em")
    assert cli.run(["infer", "--data", data, "--stage", "on", "--config", str(em_cfg), "--out", em]) == 0
    return root, data, em


def test_simulate_is_reproducible(tmp_path):
    cfg = small_config(tmp_path)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.run(["simulate", "--config", cfg, "--out", a]) == 0
    assert cli.run(["simulate", "--config", cfg, "--out", b]) == 0
    files = manifest(a)["outputs"]
    assert digest(a, files) == digest(b, files)
    c = str(tmp_path / "c")
    assert cli.run(["simulate", "--config", cfg, "--seed", "6", "--out", c]) == 0
    assert digest(a, files) != digest(c, files)


def test_simulate_round_trip(tmp_path):
    out = str(tmp_path / "d")
    assert cli.run(["simulate", "--config", small_config(tmp_path), "--out", out]) == 0
    ds = ExpressionDataset.load(out)
    assert ds.U.shape == (200, 4) and ds.S.shape == (200, 4)
    m = manifest(out)
    assert m["subcommand"] == "simulate" and m["config_file"].endswith("sim.json")
    assert m["config"]["n_cells"] == 200
    assert set(m["outputs"]) == {"U.csv", "S.csv", "truth.json"}
    assert m["backend"] in ("numba", "numpy")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.run(["simulate", "--bogus"]) == 2
    assert cli.run(["simulate", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_cells": -3}))
    out = tmp_path / "y"
    assert cli.run(["simulate", "--config", str(bad), "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2
    assert json.loads((out / "error.json").read_text())["exit_code"] == 2
    assert cli.run(["infer", "--data", str(tmp_path / "missing"), "--out", str(out)]) == 2


def test_numerical_error_exits_3(tmp_path):
    P = np.array([[0.0, 0.5, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    g = tmp_path / "P.csv"
    np.savetxt(g, P, delimiter=",", header="a,b,c", comments="")
    t = tmp_path / "t.txt"
    t.write_text("1\n")
    out = tmp_path / "o"
    assert cli.run(["hitting", "--graph", str(g), "--target", str(t), "--direct", "--out", str(out)]) == 3
    assert json.loads((out / "error.json").read_text())["error"] == "IllConditionedError"


def test_hitting_dense_and_triplets(tmp_path):
    P = four_state_chain(0.01)
    dense = tmp_path / "P.csv"
    np.savetxt(dense, P, delimiter=",", header="S,B,C,D", comments="")
    i, j = np.nonzero(P)
    trip = tmp_path / "trip.csv"
    np.savetxt(trip, np.column_stack([i, j, P[i, j]]), delimiter=",", header="i,j,p", comments="",
               fmt=["%d", "%d", "%.17g"])
    tgt = tmp_path / "t.txt"
    tgt.write_text("2  # fate C\n")
    tab = tmp_path / "h.txt"
    tab.write_text("3\n")
    ks = []
    for name, g in (("dense", dense), ("trip", trip)):
        out = tmp_path / name
        assert cli.run(["hitting", "--graph", str(g), "--target", str(tgt), "--out", str(out)]) == 0
        _, tab_k = read_matrix_csv(str(out / "hitting.csv"))
        ks.append(tab_k[:, 1])
    np.testing.assert_allclose(ks[0], ks[1], rtol=1e-12)
    eps, p = 0.01, 0.495
    assert ks[0][0] == pytest.approx(1 + (p + eps + eps**2) / (eps * p), rel=1e-8)
    out = tmp_path / "taboo"
    assert cli.run(["hitting", "--graph", str(dense), "--target", str(tgt), "--taboo", str(tab),
                    "--out", str(out)]) == 0
    _, k = read_matrix_csv(str(out / "hitting.csv"))
    assert k[0, 1] == pytest.approx(2 / (1 - eps), rel=1e-8)
    assert manifest(out)["inputs"]["taboo"] == str(tab)


def test_infer_rescale_uq_pipeline(pipeline, tmp_path):
    root, data, em = pipeline
    m = manifest(em)
    assert m["em"]["stage"] == "on" and m["em"]["rel_tol"] == 1e-6
    genes, T = read_matrix_csv(os.path.join(em, "time_matrix.csv"))
    assert T.shape == (200, 4)
    ds = ExpressionDataset.load(data)
    rs = str(tmp_path / "rs")
    assert cli.run(["rescale", "--times", os.path.join(em, "time_matrix.csv"), "--out", rs]) == 0
    _, tt = read_matrix_csv(os.path.join(rs, "t_star.csv"))
    assert np.corrcoef(tt[:, 1], ds.true_times)[0, 1] > 0.9
    uq = str(tmp_path / "uq")
    assert cli.run(["uq", "--data", data, "--em", em, "--out", uq]) == 0
    sem = json.load(open(os.path.join(uq, "sem.json")))
    assert [s["gene"] for s in sem] == genes
    assert manifest(uq)["n_failed"] == sum("error" in s for s in sem)


def test_rescale_reducible_matrix_exit_3(tmp_path):
    T = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [0.0, 4.0]])
    f = tmp_path / "T.csv"
    np.savetxt(f, T, delimiter=",", header="g1,g2", comments="")
    assert cli.run(["rescale", "--times", str(f), "--out", str(tmp_path / "a")]) == 3
    assert cli.run(["rescale", "--times", str(f), "--per-component", "--out", str(tmp_path / "b")]) == 0


def test_sweep_small(tmp_path):
    out = tmp_path / "sw"
    assert cli.run(["sweep", "--n", "300", "--eps", "0.01:0.01:0.05", "--function", "f1",
                    "--d", "2", "--seed", "3", "--out", str(out)]) == 0
    names, table = read_matrix_csv(str(out / "sweep.csv"))
    assert names == ["epsilon", "error_f1"]
    np.testing.assert_allclose(table[:, 0], [0.01, 0.02, 0.03, 0.04, 0.05])
    assert np.all(table[:, 1] > 0)
    assert manifest(out)["sweep"]["gamma"] == [1.5, 1.55]
    assert cli.run(["sweep", "--function", "nope", "--out", str(out)]) == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rnavelo.cli", "hitting", "--graph", "nofile.csv",
                        "--target", "t", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2
    assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "FileNotFoundError"
