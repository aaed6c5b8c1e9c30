import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from structs import scores
from structs import structures as S
from structs.errors import BadConstants, NonInvertible, NotIdentifiable
from structs.estimator import Dataset, SolverConfig, fit_s
from structs.experiments import SimConfig, simulate_dataset
from structs.inference import (
    SandwichReport,
    asy_cov,
    block_derivative_elliptical,
    cvf_beta,
    cvf_theta,
    expected_xtsx,
    if_theta_bound,
    influence_function,
    jacobian_empirical,
    theta_block_inverse,
    lgrg_beta,
    lgrg_theta,
    psi,
    sandwich,
    sandwich_elliptical,
    standardized_residuals,
)
from structs.rho import RhoFunction
from structs.spherical import consistency_b0, constants_for, tune_cutoff

from conftest import random_spd

RHO1 = RhoFunction("biweight", tune_cutoff("biweight", 1, 0.5))
B01 = consistency_b0(RHO1, 1)


# -- scores -------------------------------------------------------------------

def test_psi_at_zero_residual_k1():
    st_ = S.unstructured(1)
    out = psi([2.0], [[1.0]], [2.0], [3.0], st_, RHO1, B01, path="linear")
    assert out.psi_beta.tolist() == [0.0]
    assert out.psi_theta[0] == pytest.approx(B01 / 3.0, abs=1e-15)


def test_psi_beta_zero_on_fit_line(alt1, rho4, b0_4, X_sim):
    beta = np.array([1.0, -2.0])
    out = psi(X_sim @ beta, X_sim, beta, [1.0, 1.0], alt1, rho4, b0_4)
    np.testing.assert_array_equal(out.psi_beta, 0.0)
    assert np.all(np.isfinite(out.as_array()))


LINEAR = [S.unstructured(3), S.compound_symmetry(4), S.lmm(np.arange(1.0, 5.0)),
          S.lmm(np.ones(4), [1.0, 4.0, 9.0, 16.0]), S.stationary_banded(4)]


@pytest.mark.parametrize("st_", LINEAR, ids=lambda s: f"{s.kind}-{s.l}")
def test_linear_and_general_paths_agree(st_, rho4, b0_4):
    rng = np.random.default_rng(st_.l)
    k = st_.k
    X = rng.normal(size=(30, k, 2))
    y = rng.normal(scale=2.0, size=(30, k))
    theta = st_.reference_theta(1.5) + 0.1 * np.abs(rng.normal(size=st_.l))
    beta = rng.normal(size=2)
    a = scores.score_matrix(y, X, beta, theta, st_, rho4, b0_4, path="linear")
    b = scores.score_matrix(y, X, beta, theta, st_, rho4, b0_4, path="general")
    np.testing.assert_allclose(a, b, atol=1e-10)


@settings(max_examples=40)
@given(hnp.arrays(float, 2, elements=st.floats(0.2, 5.0)),
       st.floats(-0.9, 0.9))
def test_h_matrices_linearly_dependent(t, r):
    for st_, theta in ((S.lmm(np.arange(1.0, 5.0)), t), (S.ar1(4), np.array([t[0], r])),
                       (S.compound_symmetry(3), np.array([r, t[1]]))):
        H = scores.h_matrices(st_, theta)
        assert np.max(np.abs(np.tensordot(theta, H, axes=1))) <= 1e-12 * max(1.0, np.abs(H).max())


def test_duplication_reduction_unstructured(rho4, b0_4):
    rng = np.random.default_rng(3)
    k = 4
    st_ = S.unstructured(k)
    V = random_spd(rng, k)
    theta = S.vech(V)
    X = rng.normal(size=(k, 1))
    beta = np.array([0.4])
    Vi = np.linalg.inv(V)
    Dk = S.duplication_matrix(k)
    for _ in range(10):
        y = rng.normal(size=k) * 2
        r = y - X @ beta
        d = np.sqrt(r @ Vi @ r)
        u = rho4.u(d)
        v = rho4.v(d, b0_4)
        PsiV = k * u * np.outer(r, r) - v * V
        direct = -Dk.T @ np.kron(Vi, Vi) @ S.vec(PsiV)
        got = psi(y, X, beta, theta, st_, rho4, b0_4, path="linear").psi_theta
        np.testing.assert_allclose(got, direct, atol=1e-12)


# -- derivative matrices --------------------------------------------------------

@pytest.fixture(scope="module")
def alt1_sample(alt1, rho4, b0_4, X_sim):
    cfg = SimConfig(X=X_sim, st=alt1, beta0=[1.0, 1.0], theta0=[1.0, 1.0], rho=rho4, n=200, seed=3)
    data = simulate_dataset(cfg, 0)
    fit = fit_s(data, alt1, rho4, b0_4, SolverConfig(n_subsamples=50))
    return data, fit


def test_score_vanishes_at_fit(alt1_sample, alt1, rho4, b0_4):
    data, fit = alt1_sample
    lam = scores.mean_score(data.y, data.X, fit.beta, fit.theta, alt1, rho4, b0_4)
    assert np.linalg.norm(lam) <= 1e-6 * (1 + np.linalg.norm(fit.xi))


def test_jacobian_step_robust(alt1_sample, alt1, rho4, b0_4):
    data, fit = alt1_sample
    D1 = jacobian_empirical(data, fit.xi, alt1, rho4, b0_4, step=1e-6)
    D2 = jacobian_empirical(data, fit.xi, alt1, rho4, b0_4, step=5e-7)
    assert np.max(np.abs(D1 - D2)) < 1e-4 * np.max(np.abs(D1))


def test_jacobian_singular_flagged():
    # every subject beyond the cutoff: the score does not move with beta
    data = Dataset.common_design(np.linspace(100, 200, 6)[:, None], np.ones((1, 1)))
    with pytest.raises(NonInvertible):
        jacobian_empirical(data, [0.0, 1.0], S.unstructured(1), RHO1, B01)


def test_block_derivative_unstructured_identity(const4):
    k = 2
    c = dataclasses.replace(const4, k=k)
    st_ = S.unstructured(k)
    Dk = S.duplication_matrix(k)
    vI = S.vec(np.eye(k))
    want = c.gamma1 * Dk.T @ Dk - c.gamma2 * Dk.T @ np.outer(vI, vI) @ Dk
    D = block_derivative_elliptical(st_, np.eye(k), c, np.eye(1))
    np.testing.assert_allclose(D[1:, 1:], want, atol=1e-14)
    assert D[0, 0] == pytest.approx(-c.alpha)
    assert np.all(D[0, 1:] == 0) and np.all(D[1:, 0] == 0)


@pytest.mark.parametrize("name", ["alt1", "alt2", "original"])
def test_theta_block_inverse_and_trace_form(name, request, const4, X_sim):
    st_ = request.getfixturevalue(name)
    theta = np.array([1.0, 1.0])
    Sigma = st_.value(theta)
    E = expected_xtsx(Sigma, X_sim)
    kron = block_derivative_elliptical(st_, Sigma, const4, E, form="kronecker")
    trace = block_derivative_elliptical(st_, Sigma, const4, E, theta=theta, form="trace")
    np.testing.assert_allclose(trace, kron, atol=1e-10 * np.abs(kron).max())
    np.testing.assert_allclose(
        theta_block_inverse(st_, Sigma, theta, const4), np.linalg.inv(kron[2:, 2:]), atol=1e-9
    )


def test_block_derivative_not_identifiable(const4):
    # a repeated basis direction is rejected before any derivative is formed
    with pytest.raises(NotIdentifiable):
        dataclasses.replace(S.compound_symmetry(3), basis=np.stack([np.eye(3), np.eye(3)]))


def test_expected_xtsx_fixed_design(X_sim):
    Sigma = np.diag([1.0, 2.0, 3.0, 4.0])
    stack = np.stack([X_sim, 2 * X_sim])
    one = expected_xtsx(Sigma, X_sim)
    np.testing.assert_allclose(expected_xtsx(Sigma, stack), 2.5 * one, rtol=1e-14)


# -- influence functions ----------------------------------------------------------

def test_if_at_center(alt1, rho4, b0_4, const4, X_sim):
    # d0 = 0: rho(0) - b0 = -b0, so a point at the centre shrinks theta
    beta, theta = np.array([1.0, 1.0]), np.array([1.0, 1.0])
    rep = influence_function(X_sim @ beta, X_sim, beta, theta, alt1, rho4, b0_4, constants=const4)
    np.testing.assert_allclose(rep.if_beta, 0.0, atol=1e-15)
    np.testing.assert_allclose(
        rep.if_theta, -b0_4 / (const4.gamma1 - 4 * const4.gamma2) * theta, rtol=1e-12
    )
    # independent route: D_theta theta = (gamma1 - k gamma2) g and Psi_theta = b0 g
    Sigma = alt1.value(theta)
    D = block_derivative_elliptical(alt1, Sigma, const4, expected_xtsx(Sigma, X_sim))
    score = psi(X_sim @ beta, X_sim, beta, theta, alt1, rho4, b0_4).as_array()
    np.testing.assert_allclose(rep.if_theta, -np.linalg.solve(D, score)[2:], rtol=1e-12)


def test_if_beyond_cutoff_constant(alt1, rho4, b0_4, const4, X_sim):
    beta, theta = np.array([1.0, 1.0]), np.array([1.0, 1.0])
    want = (rho4.a0 - b0_4) / (const4.gamma1 - 4 * const4.gamma2) * theta
    for t in (10.0, 1e3, 1e6):
        rep = influence_function(X_sim @ beta + t, X_sim, beta, theta, alt1, rho4, b0_4,
                                 constants=const4)
        np.testing.assert_allclose(rep.if_theta, want, rtol=1e-12)
        np.testing.assert_array_equal(rep.if_beta, 0.0)


def test_if_closed_form_equals_minus_dinv_psi(alt2, rho4, b0_4, const4, X_sim):
    rng = np.random.default_rng(0)
    beta, theta = np.array([1.0, 1.0]), np.array([1.0, 1.0])
    Sigma = alt2.value(theta)
    E = expected_xtsx(Sigma, X_sim)
    D = block_derivative_elliptical(alt2, Sigma, const4, E)
    for _ in range(20):
        y0 = X_sim @ beta + rng.normal(scale=2, size=4)
        a = influence_function(y0, X_sim, beta, theta, alt2, rho4, b0_4, constants=const4)
        b = influence_function(y0, X_sim, beta, theta, alt2, rho4, b0_4, mode="empirical", D=D)
        np.testing.assert_allclose(a.if_beta, b.if_beta, atol=1e-12)
        np.testing.assert_allclose(a.if_theta, b.if_theta, atol=1e-12)
        np.testing.assert_allclose(a.if_vecC, alt2.basis_matrix() @ a.if_theta, atol=1e-12)


def test_if_bounded_on_grid(alt1, rho4, b0_4, const4, X_sim):
    beta, theta = np.array([1.0, 1.0]), np.array([1.0, 1.0])
    C2 = if_theta_bound(alt1, theta, rho4, b0_4, const4)
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(200, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.r_[0.0, np.geomspace(1e-2, 1e6, 60)]
    worst_t, worst_c = 0.0, 0.0
    for d in dirs:
        for r in radii:
            rep = influence_function(X_sim @ beta + r * d, X_sim, beta, theta, alt1, rho4, b0_4,
                                     constants=const4)
            worst_t = max(worst_t, np.linalg.norm(rep.if_theta))
            worst_c = max(worst_c, np.linalg.norm(rep.if_vecC))
    assert worst_t <= C2
    assert np.isfinite(worst_c) and worst_c < 1e3


def test_if_non_linear_structure(rho4, b0_4, const4, X_sim):
    st_ = S.ar1(4)
    theta = np.array([2.0, 0.5])
    rep = influence_function(X_sim @ [1.0, 1.0] + 0.5, X_sim, [1.0, 1.0], theta, st_, rho4, b0_4,
                             constants=const4)
    assert np.all(np.isfinite(rep.if_theta)) and rep.if_vecC.shape == (16,)


def test_if_bad_constants(alt1, rho4, b0_4, const4, X_sim):
    bad = dataclasses.replace(const4, gamma1=-1.0)
    with pytest.raises(BadConstants):
        influence_function(X_sim @ [1.0, 1.0], X_sim, [1.0, 1.0], [1.0, 1.0], alt1, rho4, b0_4,
                           constants=bad)
    with pytest.raises(ValueError):
        influence_function(X_sim @ [1.0, 1.0], X_sim, [1.0, 1.0], [1.0, 1.0], alt1, rho4, b0_4,
                           mode="empirical")


def test_if_empirical_mode_agrees_at_large_sample(alt1, rho4, b0_4, const4, X_sim):
    xi0 = np.array([1.0, 1.0, 1.0, 1.0])
    cfg = SimConfig(X=X_sim, st=alt1, beta0=xi0[:2], theta0=xi0[2:], rho=rho4, n=20000, seed=12)
    data = simulate_dataset(cfg, 0)
    D = jacobian_empirical(data, xi0, alt1, rho4, b0_4)
    y0 = X_sim @ xi0[:2] + np.array([0.8, -1.1, 1.5, 0.4])
    a = influence_function(y0, X_sim, xi0[:2], xi0[2:], alt1, rho4, b0_4, constants=const4)
    b = influence_function(y0, X_sim, xi0[:2], xi0[2:], alt1, rho4, b0_4, mode="empirical", D=D)
    np.testing.assert_allclose(b.if_beta, a.if_beta, rtol=0.03)
    np.testing.assert_allclose(b.if_theta, a.if_theta, rtol=0.03)


# -- covariances --------------------------------------------------------------------

def test_reported_matrices(alt1, alt2, const4, X_sim):
    theta = np.array([1.0, 1.0])
    np.testing.assert_allclose(lgrg_beta(alt1.value(theta), const4, X_sim),
                               [[1.97, 0.38], [0.38, 0.40]], atol=0.02)
    np.testing.assert_allclose(cvf_beta(alt1.value(theta), const4, X_sim),
                               [[8.13, 1.78], [1.78, 0.72]], atol=0.02)
    np.testing.assert_allclose(lgrg_theta(alt2, theta, const4),
                               [[8.57, -0.82], [-0.82, 0.80]], atol=0.02)
    np.testing.assert_allclose(cvf_theta(alt2, theta, const4),
                               [[20.63, -1.22], [-1.22, 1.77]], atol=0.02)


def test_original_design_formulas_coincide(original, const4, X_sim):
    theta = np.array([1.0, 1.0])
    for a, b in (("lgrg_beta", "cvf_beta"), ("lgrg_theta", "cvf_theta")):
        A = asy_cov(a, st=original, theta=theta, constants=const4, X=X_sim)
        B = asy_cov(b, st=original, theta=theta, constants=const4, X=X_sim)
        np.testing.assert_allclose(A, B, atol=1e-9)


def test_vecC_covariance(alt2, const4):
    theta = np.array([1.0, 1.0])
    C = asy_cov("vecC", st=alt2, theta=theta, constants=const4)
    L = alt2.basis_matrix()
    np.testing.assert_allclose(C, L @ lgrg_theta(alt2, theta, const4) @ L.T)
    with pytest.raises(ValueError):
        asy_cov("nope", st=alt2, theta=theta, constants=const4)


def test_sandwich_psd(alt1_sample, alt1, rho4, b0_4):
    data, fit = alt1_sample
    rep = sandwich(data, fit.xi, alt1, rho4, b0_4)
    assert rep.which == "empirical" and not rep.ill_conditioned
    np.testing.assert_allclose(rep.acov, rep.acov.T, atol=0)
    lam = np.linalg.eigvalsh(rep.acov)
    assert lam.min() >= -1e-8 * lam.max()
    np.testing.assert_array_equal(
        asy_cov("sandwich", data=data, xi=fit.xi, st=alt1, rho=rho4, b0=b0_4), rep.acov
    )


def test_sandwich_elliptical_matches_lgrg(alt1, rho4, b0_4, const4, X_sim):
    # with the closed-form D and a large score sample the beta block recovers lgrg_beta
    xi0 = np.ones(4)
    cfg = SimConfig(X=X_sim, st=alt1, beta0=xi0[:2], theta0=xi0[2:], rho=rho4, n=50000, seed=2)
    data = simulate_dataset(cfg, 0)
    rows = scores.score_matrix(data.y, data.X, xi0[:2], xi0[2:], alt1, rho4, b0_4)
    rep = sandwich_elliptical(alt1, xi0[2:], const4, X_sim, rows)
    assert rep.which == "elliptical_closed_form"
    np.testing.assert_allclose(np.diag(rep.acov[:2, :2]),
                               np.diag(lgrg_beta(alt1.value(xi0[2:]), const4, X_sim)), rtol=0.05)


def test_ill_conditioned_flag():
    rep = SandwichReport(np.eye(2), np.eye(2), np.eye(2), "empirical", 1e13)
    assert rep.ill_conditioned and rep.to_dict()["ill_conditioned"] is True


# -- residuals ----------------------------------------------------------------------

def test_standardized_residuals(alt1_sample):
    data, fit = alt1_sample
    res = standardized_residuals(data, fit)
    assert res.shape == (data.n,)
    np.testing.assert_allclose(res, fit.distances, rtol=1e-12)
    perm = np.random.default_rng(0).permutation(data.n)
    np.testing.assert_allclose(standardized_residuals(data.subset(perm), fit), res[perm], rtol=1e-14)

    y = data.y.copy()
    y[0] = data.X[0] @ fit.beta
    assert standardized_residuals(Dataset(y, data.X), fit)[0] == 0.0

    lam, Q = np.linalg.eigh(fit.V)
    root = (Q * np.sqrt(lam)) @ Q.T
    ts = np.array([10.0, 20.0, 40.0])
    grown = []
    for t in ts:
        y[0] = data.X[0] @ fit.beta + t * root @ np.ones(4)
        grown.append(standardized_residuals(Dataset(y, data.X), fit)[0])
    np.testing.assert_allclose(np.array(grown) / ts, 2.0, rtol=1e-12)
