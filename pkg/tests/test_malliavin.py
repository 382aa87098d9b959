import dataclasses
import math

import mpmath
import numpy as np
import pytest

from hormarkov.errors import GuardError, ResourceCapError, WeightError
from hormarkov.malliavin import (conditional_mean_residual, covariance, diagonal, first_derivatives,
                                 functional_derivatives, gamma_weights, ibp_weight_order1, lie_expansion_residual,
                                 malliavin_bundle, one_step_residual, ou_operator, second_derivatives,
                                 sigma_derivative, sobolev_norm, variation_of_constants)
from hormarkov.noise import GaussianLaw, UniformMixtureLaw, bump, bump_log_gradient
from hormarkov.scheme import (inverse_tangent_flow, kinetic_scheme, quadratic_scheme, random_walk_scheme, replay,
                              simulate_paths)
from hormarkov.vectorfield import Field

LAW = GaussianLaw()
KIN = dict(b=(0.1, -1.0, 0.5), s=(1.0, 0.3, 0.25))


def _paths(psi, law, x0, delta, K, n, seed=3):
    return simulate_paths(psi, law, x0, delta, K * delta, seed, n_paths=n)


def _replayed(path, psi, U):
    p = path.with_noise(U=U)
    return dataclasses.replace(p, X=replay(psi, p))


def _fd_first(path, psi, h=1e-5):
    """Central differences of X_T in each U coordinate (zero where chi = 0)."""
    M, K, N = path.U.shape
    out = np.zeros((M, K, N, psi.d))
    for w in range(K):
        for i in range(N):
            up, dn = path.U.copy(), path.U.copy()
            up[:, w, i] += h
            dn[:, w, i] -= h
            out[:, w, i] = (replay(psi, path.with_noise(U=up))[:, -1] - replay(psi, path.with_noise(U=dn))[:, -1]) / (2 * h)
    return out


CASES = [
    ("random-walk", random_walk_scheme(), [0.2], 1 / 64),
    ("quadratic", quadratic_scheme(), [0.3], 1 / 64),
    ("kinetic", kinetic_scheme(**KIN), [0.3, -0.2], 1 / 32),
]


# ---- first derivatives --------------------------------------------------


def test_random_walk_first_derivatives_are_chi():
    p = _paths(random_walk_scheme(2), GaussianLaw(N=2), [0.0, 0.0], 1 / 16, 16, 50)
    DX = first_derivatives(p, random_walk_scheme(2))
    expected = p.chi[:, :, None, None] * np.eye(2)[None, None]
    np.testing.assert_array_equal(DX, expected)


@pytest.mark.parametrize("name,psi,x0,delta", CASES, ids=[c[0] for c in CASES])
def test_first_derivatives_match_replay_fd(name, psi, x0, delta):
    p = _paths(psi, LAW, x0, delta, 24, 8)
    DX = first_derivatives(p, psi)
    fd = _fd_first(p, psi)
    scale = np.abs(DX).max()
    assert np.abs(DX - fd).max() <= 1e-4 * scale


def test_derivatives_vanish_where_chi_zero():
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.0, 0.0], 1 / 32, 16, 20)
    DX = first_derivatives(p, psi)
    assert np.all(DX[p.chi == 0] == 0)
    assert (p.chi == 0).any()


def test_variation_of_constants_on_guarded_paths():
    psi = kinetic_scheme(**KIN)
    delta, eta2 = 2.0**-14, 3.0
    p = _paths(psi, LAW, [0.3, -0.2], delta, 32, 40)
    flows = inverse_tangent_flow(p, psi, eta2)
    ok = flows.valid[:, -1]
    assert ok.sum() > 30
    DX = first_derivatives(p, psi)
    vc = variation_of_constants(p, psi, flows)
    assert np.abs(DX[ok] - vc[ok]).max() <= 1e-8


# ---- second derivatives -------------------------------------------------


def test_random_walk_second_derivatives_vanish():
    psi = random_walk_scheme()
    p = _paths(psi, LAW, [0.0], 1 / 16, 16, 10)
    assert np.all(second_derivatives(p, psi) == 0)


@pytest.mark.parametrize("name,psi,x0,delta", CASES[1:], ids=[c[0] for c in CASES[1:]])
def test_second_derivatives_match_fd_of_first(name, psi, x0, delta):
    p = _paths(psi, LAW, x0, delta, 16, 4, seed=11)
    DD = second_derivatives(p, psi)
    h = 1e-5
    M, K, N = p.U.shape
    err, scale = 0.0, np.abs(DD).max()
    for v in range(K):
        for j in range(N):
            up, dn = p.U.copy(), p.U.copy()
            up[:, v, j] += h
            dn[:, v, j] -= h
            fd = (first_derivatives(_replayed(p, psi, up), psi) - first_derivatives(_replayed(p, psi, dn), psi)) / (2 * h)
            # D_{(v,j)} acts through U only when chi_v = 1
            fd *= p.chi[:, v, None, None, None]
            err = max(err, np.abs(DD[:, v, j] - fd).max())
    assert scale > 0
    assert err <= 1e-3 * scale


def test_second_derivatives_symmetric():
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.3, -0.2], 1 / 32, 16, 6)
    DD = second_derivatives(p, psi)
    np.testing.assert_allclose(DD, DD.transpose(0, 3, 4, 1, 2, 5), atol=1e-8)


def test_second_derivative_cap():
    psi = random_walk_scheme()
    p = _paths(psi, LAW, [0.0], 1 / 64, 64, 2)
    with pytest.raises(ResourceCapError):
        second_derivatives(p, psi, cap=32)


# ---- Gamma weights ------------------------------------------------------


def test_gamma_weights_zero_without_chi_and_on_plateau():
    law = UniformMixtureLaw()
    psi = random_walk_scheme()
    p = _paths(psi, law, [0.0], 1 / 16, 16, 200)
    DG = gamma_weights(p, law.r_star, law.z_star)
    assert np.all(DG[p.chi == 0] == 0)
    plateau = np.abs(p.U[..., 0] / math.sqrt(p.delta) - law.z_star[0]) <= law.r_star / 2
    assert np.all(DG[..., 0][plateau] == 0)
    assert np.any(DG != 0)


def test_gamma_weights_shell_formula_matches_fd():
    law = GaussianLaw()
    psi = random_walk_scheme()
    delta = 1 / 16
    p = _paths(psi, law, [0.0], delta, 16, 300)
    DG = gamma_weights(p, law.r_star)
    v = law.r_star / 2
    z = p.U[..., 0] / math.sqrt(delta)
    shell = (p.chi == 1) & (np.abs(z) > v * 1.01) & (np.abs(z) < 2 * v * 0.99)
    assert shell.sum() > 10
    h = 1e-6
    lp = np.log(bump(v, (z[shell] + h)[:, None]))
    lm = np.log(bump(v, (z[shell] - h)[:, None]))
    fd = (lp - lm) / (2 * h) / math.sqrt(delta)
    np.testing.assert_allclose(DG[..., 0][shell], fd, rtol=1e-5)


# ---- covariance ---------------------------------------------------------


def test_random_walk_covariance():
    psi = random_walk_scheme(2)
    delta = 1 / 16
    p = _paths(psi, GaussianLaw(N=2), [0.0, 0.0], delta, 16, 30)
    sigma, gamma, det_gamma = covariance(first_derivatives(p, psi), delta)
    n_chi = p.chi.sum(axis=1)
    np.testing.assert_allclose(sigma, delta * n_chi[:, None, None] * np.eye(2), atol=1e-15)
    live = n_chi > 0
    np.testing.assert_allclose(det_gamma[live], (delta * n_chi[live]) ** -2.0, rtol=1e-12)


def test_covariance_all_chi_zero_is_singular():
    DX = np.zeros((1, 4, 1, 2))
    sigma, gamma, det_gamma = covariance(DX, 0.25)
    assert np.isinf(det_gamma[0]) and np.isnan(gamma).all()


def test_covariance_psd_and_inverse(rng):
    DX = rng.normal(size=(20, 8, 1, 3))
    sigma, gamma, det_gamma = covariance(DX, 0.125)
    lam = np.linalg.eigvalsh(sigma)
    tr = np.trace(sigma, axis1=1, axis2=2)
    assert np.all(lam[:, 0] >= -1e-12 * tr)
    np.testing.assert_allclose(gamma @ sigma, np.broadcast_to(np.eye(3), sigma.shape), atol=1e-8)


def test_kinetic_covariance_extended_precision():
    psi = kinetic_scheme(**KIN)
    delta = 1 / 64
    p = _paths(psi, LAW, [0.3, -0.2], delta, 64, 3)
    DX = first_derivatives(p, psi)
    sigma, _, _ = covariance(DX, delta)
    mpmath.mp.dps = 40
    for m in range(DX.shape[0]):
        for a in range(2):
            for b in range(2):
                ref = mpmath.mpf(delta) * mpmath.fsum(mpmath.mpf(DX[m, w, 0, a]) * mpmath.mpf(DX[m, w, 0, b]) for w in range(64))
                assert abs(sigma[m, a, b] - float(ref)) <= 1e-10


# ---- Ornstein-Uhlenbeck operator ----------------------------------------


def test_ou_constant_functional():
    M, K, N = 5, 4, 1
    out = ou_operator(np.zeros((M, K, N)), np.zeros((M, K, N)), np.ones((M, K, N)), 0.25)
    assert np.all(out == 0)


def test_ou_scaled_noise_one_step():
    # F = X_delta = sqrt(delta) Z for psi = x + z from 0; D F = chi, D D F = 0
    law = GaussianLaw()
    psi = random_walk_scheme()
    delta = 1 / 16
    p = _paths(psi, law, [0.0], delta, 1, 2000)
    b = malliavin_bundle(p, psi, law)
    g = bump_log_gradient(law.r_star / 2, p.U[:, 0] / math.sqrt(delta) - law.z_star)[:, 0]
    expected = -math.sqrt(delta) * p.chi[:, 0] * g
    np.testing.assert_allclose(b.LX[:, 0], expected, atol=1e-14)
    assert np.any(expected != 0)


def test_ou_random_walk_sums_over_steps():
    law = UniformMixtureLaw()
    psi = random_walk_scheme()
    delta = 1 / 16
    p = _paths(psi, law, [0.0], delta, 16, 100)
    b = malliavin_bundle(p, psi, law)
    g = bump_log_gradient(law.r_star / 2, p.U / math.sqrt(delta) - law.z_star)[..., 0]
    expected = -math.sqrt(delta) * (p.chi * g).sum(axis=1)
    np.testing.assert_allclose(b.LX[:, 0], expected, atol=1e-13)


def test_functional_derivatives_chain_rule(rng):
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.3, -0.2], 1 / 16, 8, 5)
    b = malliavin_bundle(p, psi, LAW)
    X = b.XT
    grad = np.stack([np.cos(X[:, 0]) * X[:, 1], np.sin(X[:, 0])], axis=1)
    hess = np.zeros((5, 2, 2))
    hess[:, 0, 0] = -np.sin(X[:, 0]) * X[:, 1]
    hess[:, 0, 1] = hess[:, 1, 0] = np.cos(X[:, 0])
    DG, DDG = functional_derivatives(grad, hess, b.DX, b.DDX_diag())
    h = 1e-5
    for w in (0, 4, 7):
        up, dn = p.U.copy(), p.U.copy()
        up[:, w, 0] += h
        dn[:, w, 0] -= h
        f = lambda U: (lambda Y: np.sin(Y[:, 0]) * Y[:, 1])(replay(psi, p.with_noise(U=U))[:, -1])
        fd = (f(up) - f(dn)) / (2 * h)
        np.testing.assert_allclose(DG[:, w, 0], fd, atol=1e-7)
        fd2 = (f(up) - 2 * f(p.U) + f(dn)) / h**2 * p.chi[:, w]
        np.testing.assert_allclose(DDG[:, w, 0], fd2, atol=2e-3)


# ---- Sobolev norms ------------------------------------------------------


def test_sobolev_random_walk_seminorm():
    psi = random_walk_scheme(2)
    delta = 1 / 16
    p = _paths(psi, GaussianLaw(N=2), [0.0, 0.0], delta, 16, 20)
    b = malliavin_bundle(p, psi, GaussianLaw(N=2))
    semi = sobolev_norm(b.XT, b.DX, b.DDX, delta, q=1, start=1)
    np.testing.assert_allclose(semi**2, delta * p.chi.sum(axis=1) * 2, rtol=1e-12)


def test_sobolev_q0_monotone_and_scaling():
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.3, -0.2], 1 / 16, 8, 10)
    b = malliavin_bundle(p, psi, LAW)
    n0 = sobolev_norm(b.XT, b.DX, b.DDX, b.delta, 0)
    n1 = sobolev_norm(b.XT, b.DX, b.DDX, b.delta, 1)
    n2 = sobolev_norm(b.XT, b.DX, b.DDX, b.delta, 2)
    np.testing.assert_allclose(n0, np.linalg.norm(b.XT, axis=1))
    assert np.all(n2 >= n1) and np.all(n1 >= n0)
    s1 = sobolev_norm(b.XT, b.DX, None, b.delta, 1, start=1)
    s2 = sobolev_norm(b.XT, 2 * b.DX, None, b.delta, 1, start=1)
    np.testing.assert_allclose(s2**2, 4 * s1**2)
    with pytest.raises(ValueError):
        sobolev_norm(b.XT, b.DX, b.DDX, b.delta, 3)


# ---- IBP weight ---------------------------------------------------------


def _kin_bundle(n=20):
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.3, -0.2], 1 / 16, 16, n)
    return malliavin_bundle(p, psi, LAW)


def test_ibp_weight_zero_for_zero_G():
    b = _kin_bundle()
    H = ibp_weight_order1(b, np.zeros(b.n_paths), np.zeros(b.DGamma.shape))
    assert np.all(H == 0)


def test_ibp_weight_linear_in_G(rng):
    b = _kin_bundle()
    ok = np.isfinite(b.det_gamma)
    G = np.where(ok, rng.uniform(0.5, 1.5, b.n_paths), 0.0)
    DG = rng.normal(size=b.DGamma.shape) * ok[:, None, None]
    H = ibp_weight_order1(b, G, DG)
    H3 = ibp_weight_order1(b, -2.5 * G, -2.5 * DG)
    np.testing.assert_allclose(H3, -2.5 * H, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ibp_weight_order1(b, G, DG, h=1), H[:, 1])


def test_ibp_weight_needs_finite_gamma():
    b = _kin_bundle(4)
    b.det_gamma = b.det_gamma.copy()
    b.det_gamma[0] = np.inf
    with pytest.raises(WeightError):
        ibp_weight_order1(b, np.ones(4), np.zeros(b.DGamma.shape))


def test_sigma_derivative_matches_fd():
    psi = kinetic_scheme(**KIN)
    p = _paths(psi, LAW, [0.3, -0.2], 1 / 16, 8, 3, seed=5)
    DX = first_derivatives(p, psi)
    Ds = sigma_derivative(DX, second_derivatives(p, psi), p.delta)
    h = 1e-5
    for v in (0, 3, 7):
        up, dn = p.U.copy(), p.U.copy()
        up[:, v, 0] += h
        dn[:, v, 0] -= h
        s_up = covariance(first_derivatives(_replayed(p, psi, up), psi), p.delta)[0]
        s_dn = covariance(first_derivatives(_replayed(p, psi, dn), psi), p.delta)[0]
        fd = (s_up - s_dn) / (2 * h) * p.chi[:, v, None, None]
        np.testing.assert_allclose(Ds[:, v, 0], fd, atol=1e-7)


def test_diagonal_extracts_matching_slots(rng):
    DD = rng.normal(size=(2, 3, 2, 3, 2, 4))
    d = diagonal(DD)
    assert d.shape == (2, 3, 2, 4)
    np.testing.assert_array_equal(d[1, 2, 1], DD[1, 2, 1, 2, 1])


# ---- Lie expansion ------------------------------------------------------


def test_lie_residual_constant_field_random_walk():
    psi = random_walk_scheme()
    V = Field(lambda x, t: [1.0 + 0.0 * x[0]], 1, max_order=64, name="const")
    p = _paths(psi, LAW, [0.0], 1 / 16, 4, 10)
    R = lie_expansion_residual(p, psi, V, 2, eta2=50.0)
    np.testing.assert_allclose(R, 0.0, atol=1e-14)


def test_lie_residual_guard():
    psi = random_walk_scheme()
    V = Field(lambda x, t: [x[0]], 1, max_order=64)
    p = _paths(psi, LAW, [0.0], 1 / 16, 4, 50)
    with pytest.raises(GuardError):
        lie_expansion_residual(p, psi, V, 1, eta2=1e-3)
    with pytest.raises(ValueError):
        lie_expansion_residual(p, psi, V, 5, eta2=50.0)


def test_lie_residual_affine_field_random_walk():
    # V(x) = x: brackets [V_1, V] = 1 so R = x + dz - x - dz = 0
    psi = random_walk_scheme()
    V = Field(lambda x, t: [x[0]], 1, max_order=64)
    R = one_step_residual(psi, V, np.array([[0.3], [-1.0]]), 0.0, np.array([[0.1], [0.2]]), 0.01)
    np.testing.assert_allclose(R, 0.0, atol=1e-14)


def test_conditional_mean_residual_scales_faster():
    psi = kinetic_scheme(**KIN)
    V = Field(lambda x, t: [np.sin(x[1]) + 0.5 * x[0], np.cos(x[0])], 2, max_order=64)
    X = np.array([[0.3, -0.2], [1.0, 0.5]])
    r1 = np.abs(conditional_mean_residual(psi, V, X, 0.0, 1e-2)).max()
    r2 = np.abs(conditional_mean_residual(psi, V, X, 0.0, 2.5e-3)).max()
    # O(delta^{3/2}) or better: ratio at least 4^{1.3}
    assert r1 / r2 > 4**1.3
