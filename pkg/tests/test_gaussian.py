from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import block_diag

from conftest import random_blocks
from mlfpca.gaussian import (
    EMConfig,
    RankError,
    e_step_gaussian,
    fit_multilevel_gaussian,
    fit_singlelevel_gaussian,
    initialize,
    m_step_gaussian,
)
from mlfpca.model import (
    MultiLevelParams,
    NumericalError,
    assemble_designs,
    designs_from_blocks,
    gaussian_marginal_loglik,
)


def expected_fit_term(params, moments, designs):
    """-sum_i E||y_i - B_i mu - Z_i u_i||^2 / (2 sigma2_i), built densely per variable."""
    total = 0.0
    mu = params.mean_coefficients()
    for i in range(designs.M):
        n = designs.n_rep[i]
        Bi, Bt = designs.B_i(i), designs.Btilde_i(i)
        Tb = block_diag(*[params.Theta_beta[i]] * n) if params.L[i] else np.zeros((Bt.shape[1], 0))
        Z = np.hstack([Bi @ params.Theta_alpha, Bt @ Tb])
        m, S, _ = moments.variable(i)
        r = designs.y_i(i) - Bi @ mu[i]
        e = r @ r - 2 * r @ Z @ m + np.trace(Z.T @ Z @ S)
        total -= e / (2 * params.sigma2[i])
    return total


def _blocks(P):
    return [("theta_mu", None), ("Theta_alpha", None)] + [("Theta_beta", i) for i in range(P.M)]


def _perturbed(P, name, i, D, h):
    Q = P.copy()
    if i is None:
        setattr(Q, name, getattr(Q, name) + h * D)
    else:
        Q.Theta_beta[i] = Q.Theta_beta[i] + h * D
    return Q


@pytest.mark.parametrize("seed", range(3))
def test_ecm_blocks_reach_stationary_point(seed):
    rng = np.random.default_rng(seed)
    d = random_blocks(rng, M=4, n=(2, 4), N=(3, 6), p=4)
    P, _ = initialize(d, 2, [1, 2, 1, 2])
    mom = e_step_gaussian(P, d)
    before = expected_fit_term(P, mom, d)
    Q = m_step_gaussian(mom, d, P)
    assert expected_fit_term(Q, mom, d) >= before - 1e-9
    # with moments and variances fixed the pass is coordinate ascent
    for _ in range(400):
        Q = m_step_gaussian(mom, d, Q)
    f0 = expected_fit_term(Q, mom, d)
    h = 1e-5
    for name, i in _blocks(Q):
        base = getattr(Q, name) if i is None else Q.Theta_beta[i]
        D = rng.normal(size=np.shape(base))
        fp = expected_fit_term(_perturbed(Q, name, i, D, h), mom, d)
        fm = expected_fit_term(_perturbed(Q, name, i, D, -h), mom, d)
        assert abs(fp - fm) / (2 * h) < 1e-4 * max(1.0, abs(f0)), name
        assert fp <= f0 + 1e-9 and fm <= f0 + 1e-9


def test_variance_updates_are_closed_form():
    rng = np.random.default_rng(3)
    d = random_blocks(rng, M=3)
    P, _ = initialize(d, 2, 1)
    mom = e_step_gaussian(P, d)
    Q = m_step_gaussian(mom, d, P)
    Da = np.mean([np.diag(mom.variable(i)[1])[:2] for i in range(d.M)], axis=0)
    np.testing.assert_allclose(Q.D_alpha, Da)
    for i in range(d.M):
        m, S, e = mom.variable(i)
        assert Q.sigma2[i] == pytest.approx(e / d.n_obs[i])
        assert Q.D_beta[i][0] == pytest.approx(np.mean(np.diag(S)[2:]))


def test_em_loglik_monotone_and_converges(sim_small):
    ds, truth = sim_small
    fit = fit_multilevel_gaussian(ds, truth.basis, 2, 1)
    ll = np.array([r.loglik for r in fit.trace])
    assert np.all(np.diff(ll) >= -1e-8 * np.abs(ll[1:]))
    assert fit.converged
    assert fit.loglik == pytest.approx(gaussian_marginal_loglik(fit.params, fit.designs), rel=1e-9)
    P = fit.params
    np.testing.assert_allclose(P.Theta_alpha.T @ P.Theta_alpha, np.eye(2), atol=1e-10)
    assert P.D_alpha[0] >= P.D_alpha[1]


def test_recovers_variable_level_covariance(sim_default):
    ds, truth = sim_default
    fit = fit_multilevel_gaussian(ds, truth.basis, 2, 1)
    T = truth.params
    C_true = T.Theta_alpha @ np.diag(T.D_alpha) @ T.Theta_alpha.T
    C_fit = fit.params.Theta_alpha @ np.diag(fit.params.D_alpha) @ fit.params.Theta_alpha.T
    assert np.linalg.norm(C_fit - C_true) / np.linalg.norm(C_true) < 0.35
    # ML noise variance is biased down by roughly the loading degrees of freedom
    n_obs, dof = 25, 2 + 5 * 1
    assert np.median(fit.params.sigma2) == pytest.approx(0.05 * (n_obs - dof) / n_obs, rel=0.2)


def test_fit_is_deterministic(sim_small):
    ds, truth = sim_small
    a = fit_multilevel_gaussian(ds, truth.basis, 2, 1, EMConfig(max_iterations=20))
    b = fit_multilevel_gaussian(ds, truth.basis, 2, 1, EMConfig(max_iterations=20))
    np.testing.assert_array_equal(a.params.Theta_alpha, b.params.Theta_alpha)
    assert a.loglik == b.loglik


def test_singlelevel_variables_are_independent(sim_small):
    ds, truth = sim_small
    d = assemble_designs(ds, truth.basis)
    full = fit_singlelevel_gaussian(d, None, 1)
    part = fit_singlelevel_gaussian(d.subset([3, 7]), None, 1)
    np.testing.assert_allclose(part.params.theta_mu, full.params.theta_mu[[3, 7]], atol=1e-12)
    np.testing.assert_allclose(part.params.sigma2, full.params.sigma2[[3, 7]], rtol=1e-12)
    assert full.params.K == 0 and full.params.free_mean


def test_rank_checks(sim_small):
    ds, truth = sim_small
    with pytest.raises(RankError):
        fit_multilevel_gaussian(ds, truth.basis, 9, 1)
    with pytest.raises(RankError):
        fit_multilevel_gaussian(ds, truth.basis, 1, [1, 2])


def test_rank_deficient_mean_reported():
    rng = np.random.default_rng(0)
    B = np.zeros((3, 4))
    B[:, 0] = 1.0
    blocks = [[(np.arange(3.0), rng.normal(size=3), B)] * 2] * 2
    with pytest.raises(NumericalError, match="rank deficient"):
        initialize(designs_from_blocks(blocks), 1, 1)


def test_zero_ranks_give_mean_only_model(sim_small):
    ds, truth = sim_small
    fit = fit_multilevel_gaussian(ds, truth.basis, 0, 0)
    assert fit.params.K == 0 and fit.params.L == [0] * 40
    assert fit.converged


def test_config_validation():
    with pytest.raises(ValueError):
        EMConfig(max_iterations=0)
    with pytest.raises(ValueError):
        EMConfig(loglik_rel_tolerance=0)


from oracles import gauss_hermite_moments, tiny_instance


@pytest.mark.parametrize("seed", range(5))
def test_e_step_matches_quadrature(seed):
    P, d = tiny_instance(np.random.default_rng(100 + seed))
    m, S, e = e_step_gaussian(P, d).variable(0)
    qm, qS, qe = gauss_hermite_moments(P, d)
    np.testing.assert_allclose(m, qm, atol=1e-6)
    np.testing.assert_allclose(S, qS, atol=1e-6)
    assert e == pytest.approx(qe, abs=1e-6)


def test_e_step_eps_identity():
    P, d = tiny_instance(np.random.default_rng(7))
    from mlfpca.model import marginal_covariance

    V = marginal_covariance(P, 0, d)
    r = d.y_i(0) - d.B_i(0) @ P.theta_mu
    s2 = P.sigma2[0]
    Vinv = np.linalg.inv(V)
    eps_hat = s2 * Vinv @ r
    ref = eps_hat @ eps_hat + len(r) * s2 - s2**2 * np.trace(Vinv)
    assert e_step_gaussian(P, d).eps2[0] == pytest.approx(ref, rel=1e-10)


def test_zero_prior_variance_gives_zero_loadings():
    P, d = tiny_instance(np.random.default_rng(8))
    P.D_alpha[:] = 0.0
    assert np.all(e_step_gaussian(P, d).alpha == 0.0)


def test_noiseless_mean_only_initialisation(unit_basis):
    b = unit_basis
    mu = np.random.default_rng(1).normal(size=b.p)
    idx = np.arange(0, b.L, 10)
    blocks = [[(b.grid[idx], b.B[idx] @ mu, b.B[idx])] * 3] * 4
    P, init = initialize(designs_from_blocks(blocks), 1, 1, ridge=0.0)
    assert np.max(np.abs(init.alpha)) < 1e-8
    assert np.all(P.sigma2 < 1e-10)


def test_ridge_handles_sparse_replicates(unit_basis):
    b = unit_basis
    rng = np.random.default_rng(2)
    blocks = [[(b.grid[[10, 60]], rng.normal(size=2), b.B[[10, 60]]) for _ in range(3)] for _ in range(3)]
    blocks[0][0] = (b.grid[::10], rng.normal(size=11), b.B[::10])
    P, init = initialize(designs_from_blocks(blocks), 1, 1, ridge=1e-4)
    assert np.all(np.isfinite(init.beta))


def test_refit_from_fitted_converges_immediately(sim_small):
    ds, truth = sim_small
    fit = fit_multilevel_gaussian(ds, truth.basis, 2, 1)
    again = fit_multilevel_gaussian(fit.designs, None, 2, 1, init=fit.params)
    assert again.iterations <= 2
    # self-consistency: one more M-step barely moves anything
    nxt = m_step_gaussian(fit.moments, fit.designs, fit.params)
    C0 = fit.params.Theta_alpha @ np.diag(fit.params.D_alpha) @ fit.params.Theta_alpha.T
    C1 = nxt.Theta_alpha @ np.diag(nxt.D_alpha) @ nxt.Theta_alpha.T
    assert np.max(np.abs(C1 - C0)) / np.max(np.abs(C0)) < 1e-3
    np.testing.assert_allclose(nxt.sigma2, fit.params.sigma2, rtol=1e-3)


def test_mean_only_fit_is_weighted_least_squares(sim_small):
    ds, truth = sim_small
    fit = fit_multilevel_gaussian(ds, truth.basis, 0, 0)
    d = fit.designs
    w = 1 / fit.params.sigma2
    ref = np.linalg.solve(np.einsum("i,ipq->pq", w, d.BtB), np.einsum("i,ip->p", w, d.Bty))
    np.testing.assert_allclose(fit.params.theta_mu, ref, rtol=1e-8)


def test_singlelevel_matches_multilevel_for_one_variable(sim_small):
    ds, truth = sim_small
    d = assemble_designs(ds, truth.basis).subset([0])
    s = fit_singlelevel_gaussian(d, None, 1, EMConfig(loglik_rel_tolerance=1e-12, max_iterations=5000))
    m = fit_multilevel_gaussian(d, None, 0, 1, EMConfig(loglik_rel_tolerance=1e-12, max_iterations=5000))
    np.testing.assert_allclose(s.params.theta_mu[0], m.params.theta_mu, atol=1e-5)
