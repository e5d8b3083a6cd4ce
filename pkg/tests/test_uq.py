import numpy as np
import pytest

from rnavelo.dynamics import GeneKinetics, curve
from rnavelo.inference import EmConfig, em_infer, em_update, project_times
from rnavelo.recipes import coverage_config
from rnavelo.synth import TAU_FACTOR, generate
from rnavelo.uq import (NumericalError, assemble, complete_info, em_map_jacobian, fd_hessian,
                        sem_covariance, sem_gene, sq_loss)
import shared

CFG = EmConfig(stage="on")


def on_data(n=400, alpha=24.0, gamma=1.8, sigma=0.2, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, TAU_FACTOR, n)
    u, s = curve(t, alpha, 1.0, gamma)
    return u + rng.normal(0, sigma, n), s + rng.normal(0, sigma, n), t


def test_hessian_alpha_slice_matches_analytic():
    t = np.linspace(0.1, 4.0, 50)
    u, s = curve(t, 20.0, 1.0, 1.5)
    # both u and s are linear in alpha: d2L/dalpha2 = 2 sum (du/da)^2 + (ds/da)^2
    du, ds = curve(t, 1.0, 1.0, 1.5)
    exact = 2 * np.sum(du ** 2 + ds ** 2)
    H = fd_hessian(lambda th: sq_loss(u, s, t, th, CFG, "on"), np.array([20.0, 1.5]))
    assert H[0, 0] == pytest.approx(exact, rel=1e-4)
    assert abs(H[0, 1] - H[1, 0]) <= 1e-8 * abs(H).max()


def test_information_positive_definite_on_protocol():
    ds = generate(coverage_config("on", 21))
    fit = em_infer(ds, CFG)
    for g in range(ds.n_genes):
        I = complete_info(ds.U[:, g], ds.S[:, g], [fit.alpha[g], fit.gamma[g]],
                          fit.time_matrix[:, g], CFG, "on")
        np.testing.assert_allclose(I, I.T, atol=1e-8 * abs(I).max())
        assert np.linalg.eigvalsh(I).min() > 0


def test_em_jacobian_at_zero_noise_equals_profile_identity():
    # at zero residual the EM rate is I - H_complete^{-1} H_profile, where the profile
    # loss minimises over latent times; the tangential direction keeps it away from 0
    t = np.linspace(0.05, TAU_FACTOR, 300)
    u, s = curve(t, 22.0, 1.0, 1.7)
    th = np.array([22.0, 1.7])
    J = em_map_jacobian(u, s, th, CFG, "on")

    def profile(x):
        return float(project_times(u, s, GeneKinetics(x[0], 1.0, x[1]), 0, CFG.t_horizon, 64)[1].sum())

    Hp = fd_hessian(profile, th, 1e-3)
    Hc = fd_hessian(lambda x: sq_loss(u, s, t, x, CFG, "on"), th)
    np.testing.assert_allclose(J, np.eye(2) - np.linalg.solve(Hc, Hp), atol=5e-3)
    assert np.max(np.abs(np.linalg.eigvals(J))) < 1


def test_em_jacobian_contracts_at_convergence():
    for seed in range(3):
        u, s, _ = on_data(800, seed=seed)
        fit = em_infer_gene(u, s)
        J = em_map_jacobian(u, s, np.array([fit.alpha[0], fit.gamma[0]]), CFG, "on")
        assert np.max(np.abs(np.linalg.eigvals(J))) < 1


def test_em_jacobian_matches_central_difference():
    u, s, _ = on_data(40, alpha=2.0, gamma=0.5, sigma=0.05, seed=0)
    fit = em_infer_gene(u, s)
    th = np.array([fit.alpha[0], fit.gamma[0]])
    J = em_map_jacobian(u, s, th, CFG, "on")
    Jc = np.empty((2, 2))
    for j in range(2):
        h = 1e-3 * (abs(th[j]) + 1)
        e = np.zeros(2)
        e[j] = h
        Jc[:, j] = (em_update(u, s, *(th + e), CFG, "on") - em_update(u, s, *(th - e), CFG, "on")) / (2 * h)
    np.testing.assert_allclose(J, Jc, atol=1e-3)


def em_infer_gene(u, s):
    from rnavelo.synth import ExpressionDataset
    return em_infer(ExpressionDataset(u[:, None], s[:, None]), EmConfig(stage="on", rel_tol=1e-10,
                                                                        max_iters=500))


def test_assemble_zero_jacobian_gives_inverse_information():
    I = np.array([[2.0, 0.3], [0.3, 1.0]])
    r = assemble(np.array([1.0, 2.0]), I, np.zeros((2, 2)), 100)
    np.testing.assert_allclose(r.V_hat, np.linalg.inv(I), rtol=1e-12)
    assert r.pd_flag and r.reliable
    np.testing.assert_allclose(r.ci95[:, 1] - r.ci95[:, 0], 2 * 1.959963984540054 * r.se, rtol=1e-12)


def test_non_pd_flagged_and_ci_suppressed():
    I = np.array([[1.0, 0.0], [0.0, 1.0]])
    J = np.array([[3.0, 0.0], [0.0, 0.0]])
    r = assemble(np.zeros(2), I, J, 10)
    assert not r.pd_flag
    assert r.ci_suppressed[0] and not r.ci_suppressed[1]
    assert r.to_dict()["ci95"][0] is None
    with pytest.raises(NumericalError):
        assemble(np.zeros(2), I, np.eye(2), 10)


def test_latent_free_identity():
    u, s, t = on_data(300, seed=4)
    from rnavelo.inference import fit_rates
    fit = fit_rates(u, s, t, "on", CFG)
    r = sem_gene(u, s, np.array([fit.alpha, fit.gamma]), t, CFG, "on", times_given=True)
    np.testing.assert_allclose(r.V_hat, np.linalg.inv(r.I_oc), rtol=1e-3)


def test_widths_shrink_with_n():
    # widths carry the noisy factor 1/(1 - rho(J_M)) with rho ~ 0.995, so average replicates
    widths = {}
    for n in (800, 3200):
        w = []
        for seed in range(12):
            u, s, _ = on_data(n, seed=seed)
            fit = em_infer_gene(u, s)
            r = sem_gene(u, s, np.array([fit.alpha[0], fit.gamma[0]]), fit.time_matrix[:, 0], CFG, "on")
            w.append(r.ci95[:, 1] - r.ci95[:, 0])
        widths[n] = np.mean(w, axis=0)
    ratio = widths[3200] / widths[800]
    assert np.all((0.4 <= ratio) & (ratio <= 0.6))


def test_sem_covariance_reports_failures_in_place():
    ds = generate(coverage_config("on", 5))
    fit = em_infer(ds, CFG)
    fit.alpha[3] = np.nan
    out = sem_covariance(ds, fit)
    assert isinstance(out[3], NumericalError)
    assert sum(isinstance(r, Exception) for r in out) == 1


def test_symmetry_and_pd_flag_on_protocol():
    ds = generate(coverage_config("off", 8))
    fit = em_infer(ds, EmConfig(stage="off"))
    for r in sem_covariance(ds, fit):
        np.testing.assert_allclose(r.V_hat, r.V_hat.T, atol=1e-8)
        assert r.pd_flag == (np.linalg.eigvalsh(r.V_hat).min() > 0)


def test_velocity_bias_variance_grows_with_gamma():
    res = shared.gamma_bias()
    var = res["bias_var"]
    np.testing.assert_allclose(res["gamma_grid"], np.arange(1.6, 2.55, 0.1))
    assert np.sum(np.diff(var) < 0) <= 1
    # roughly symmetric, centred errors per gamma
    assert np.all(np.abs(res["bias_skew"]) < 0.2)
    assert np.all(np.abs(res["bias_mean"]) < 0.2 * np.sqrt(var))
