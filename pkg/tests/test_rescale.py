import numpy as np
import pytest
from hypothesis import given, strategies as st

from rnavelo.dynamics import GeneKinetics
from rnavelo.rescale import (ReducibleError, RescaleError, RescaleResult, apply_rescale,
                             check_irreducible, objective, power_iteration, rescale)
from oracles import bfs_components, dense_rescale, random_candidates_beaten


def cosdist(a, b):
    return 1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b)


def test_irreducibility_examples():
    rng = np.random.default_rng(0)
    ok, comps = check_irreducible(rng.uniform(0.1, 1, (6, 4)))
    assert ok and len(comps) == 1
    T = np.zeros((6, 5))
    T[:3, :2] = 1.0
    T[3:, 2:] = 2.0
    ok, comps = check_irreducible(T)
    assert not ok and [list(c) for c in comps] == [[0, 1], [2, 3, 4]]
    with pytest.raises(ReducibleError):
        rescale(T)


def test_irreducibility_matches_bfs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T = rng.uniform(0, 1, (8, 7)) * (rng.uniform(size=(8, 7)) < 0.15)
        _, comps = check_irreducible(T)
        assert sorted(sorted(int(g) for g in c) for c in comps) == bfs_components(T)


@pytest.mark.parametrize("proposal", [1, 2])
def test_rank_one_exact(proposal):
    rng = np.random.default_rng(2)
    t = rng.uniform(0.1, 5, 40)
    beta = rng.uniform(0.3, 3, 6)
    T = np.outer(t, beta)
    res = rescale(T, proposal)
    assert cosdist(res.t_star, t) < 1e-8
    assert cosdist(res.beta_star, beta) < 1e-8
    assert res.objective < 1e-12 * np.sum(T ** 2)


@pytest.mark.parametrize("proposal", [1, 2])
def test_small_case_dense_oracle(proposal):
    rng = np.random.default_rng(3)
    T = rng.uniform(0.1, 3.0, (4, 3))
    res = rescale(T, proposal)
    b, t, lam = dense_rescale(T, proposal)
    np.testing.assert_allclose(res.beta_star, b, rtol=1e-8)
    np.testing.assert_allclose(res.t_star, t, rtol=1e-8)
    assert res.top_eigenvalue == pytest.approx(lam, rel=1e-10)
    if proposal == 1:
        assert np.linalg.norm(res.t_star) == pytest.approx(1.0)
        # objective on a grid of x (2 free ratios, scale fixed by ||Tx|| = d)
        from oracles import objective1
        g = np.exp(np.linspace(-3, 3, 121))
        grid = min(objective1(T, np.array([1.0, a, c])) for a in g for c in g)
        assert objective1(T, 1 / res.beta_star) <= grid + 1e-12
    else:
        assert np.linalg.norm(res.beta_star) == pytest.approx(1.0)
    assert random_candidates_beaten(T, rescale(T, 1).beta_star, rescale(T, 2).beta_star, rng)


def test_power_iteration_residual():
    rng = np.random.default_rng(4)
    A = rng.uniform(0, 1, (30, 12))
    H = A.T @ A
    lam, v, _, res = power_iteration(H)
    assert np.linalg.norm(H @ v - lam * v) <= 1e-10 * np.linalg.norm(H, 2)


def test_zero_columns_skipped_and_errors():
    rng = np.random.default_rng(5)
    T = rng.uniform(0.1, 1, (10, 4))
    T[:, 2] = 0
    res = rescale(T, 1)
    assert res.skipped_genes == [2] and np.isnan(res.beta_star[2])
    assert np.all(res.beta_star[[0, 1, 3]] > 0)
    with pytest.raises(RescaleError):
        rescale(np.zeros((3, 3)))
    with pytest.raises(RescaleError):
        rescale(-T)
    with pytest.raises(RescaleError):
        rescale(T, 3)


def test_per_component_mode():
    T = np.zeros((6, 4))
    T[:3, :2] = [[1, 2], [2, 4], [3, 6]]
    T[3:, 2:] = [[1, 1], [2, 2], [5, 5]]
    res = rescale(T, 1, per_component=True)
    assert len(res.components) == 2 and "non-canonical" in res.normalization
    assert np.all(res.beta_star > 0)


def test_apply_rescale_examples():
    rng = np.random.default_rng(6)
    T = rng.uniform(0.1, 3, (20, 3))
    ks = [GeneKinetics(10.0, 1.0, 2.0, 3.0), GeneKinetics(5.0, 1.0, 0.5), GeneKinetics(8.0, 1.0, 1.0)]
    ident = RescaleResult(np.ones(3), np.zeros(20), 0.0, 1.0, 1, [])
    k2, T2 = apply_rescale(ks, T, ident)
    assert k2 == ks and np.array_equal(T2, T)
    res = rescale(T, 1)
    k3, T3 = apply_rescale(ks, T, res)
    for a, b in zip(ks, k3):
        assert b.alpha_on / b.beta == pytest.approx(a.alpha_on / a.beta)
        assert b.gamma / b.beta == pytest.approx(a.gamma / a.beta)
    # rescaled gene times regress onto t* with a common slope
    slopes = [np.polyfit(res.t_star, T3[:, g], 1)[0] for g in range(3)]
    avg = T3.mean(axis=1)
    assert np.polyfit(res.t_star, avg, 1)[0] == pytest.approx(np.mean(slopes), rel=1e-10)
    assert np.corrcoef(res.t_star, avg)[0, 1] > 0.99


def test_proposals_agree_on_near_rank_one():
    rng = np.random.default_rng(7)
    T = np.outer(rng.uniform(0.5, 5, 200), rng.uniform(0.5, 2, 30))
    T = np.abs(T + rng.normal(0, 0.05, T.shape))
    r1, r2 = rescale(T, 1), rescale(T, 2)
    assert r1.t_star @ r2.t_star / np.linalg.norm(r2.t_star) > 0.99


@given(seed=st.integers(0, 2**31), n=st.integers(3, 30), d=st.integers(2, 10),
       proposal=st.sampled_from([1, 2]))
def test_perron_positivity_and_nonnegative_time(seed, n, d, proposal):
    rng = np.random.default_rng(seed)
    T = rng.uniform(0, 1, (n, d)) * (rng.uniform(size=(n, d)) < 0.8) + 1e-3
    res = rescale(T, proposal)
    assert np.all(res.beta_star > 0)
    assert np.all(res.t_star >= -1e-12)
    assert res.objective == pytest.approx(objective(T, res.beta_star, res.t_star, proposal))
