import math

import numpy as np
import pytest
from scipy.stats import norm

from hormarkov.errors import EstimatorError, ResourceCapError
from hormarkov.localization import Thresholds
from hormarkov.noise import GaussianLaw
from hormarkov.semigroup import (auto_grid, density, density_derivative, density_standard_error, duality_check,
                                 expectation, hermite, ibp_identity_check, localized_expectation, mean_and_se,
                                 regularized_expectation, smoothed_density_on_grid, terminal_samples, tv_distance,
                                 tv_distance_sliced)
from hormarkov.scheme import kinetic_scheme, random_walk_scheme

LAW = GaussianLaw()
RW = random_walk_scheme()
KIN = kinetic_scheme(b=(0.1, -1.0, 0.5), s=(1.0, 0.3, 0.25))


def _z(a, b):
    return abs(a.value - b.value) / math.hypot(a.std_error, b.std_error)


# ---- expectations -------------------------------------------------------


def test_expectation_of_constant():
    r = expectation(RW, LAW, [0.0], 1.0, 1 / 16, lambda X: np.ones(len(X)), 1000, 1)
    assert r.value == 1.0 and r.std_error == 0.0


def test_random_walk_mean_zero():
    r = expectation(RW, LAW, [0.0], 1.0, 1 / 16, lambda X: X[:, 0], 20000, 2)
    assert abs(r.value) <= 3 * r.std_error


def test_kinetic_second_moment_vs_finer_grid():
    f = lambda X: X**2
    a = expectation(KIN, LAW, [0.3, -0.2], 1.0, 1 / 128, f, 40000, 1)
    b = expectation(KIN, LAW, [0.3, -0.2], 1.0, 1 / 512, f, 40000, 2)
    assert np.all(np.abs(a.value - b.value) <= 3 * np.hypot(a.std_error, b.std_error))


def test_expectation_rejects_nonfinite():
    with pytest.raises(EstimatorError, match="path"), np.errstate(invalid="ignore"):
        expectation(RW, LAW, [0.0], 1.0, 1 / 4, lambda X: np.log(X[:, 0] - 100), 10, 1)


def test_expectation_thread_and_block_independent():
    f = lambda X: np.sin(X[:, 0]) + X[:, 1] ** 2
    a = expectation(KIN, LAW, [0.0, 0.0], 0.5, 1 / 16, f, 3000, 7, block=256, threads=1)
    b = expectation(KIN, LAW, [0.0, 0.0], 0.5, 1 / 16, f, 3000, 7, block=256, threads=4)
    assert a.value == b.value and a.std_error == b.std_error


def test_mean_and_se_single_sample():
    m, s = mean_and_se(np.array([2.0]))
    assert m == 2.0 and s == 0.0


# ---- regularized --------------------------------------------------------


def test_regularized_constant_and_linear():
    one = regularized_expectation(RW, LAW, [0.0], 1.0, 1 / 16, 0.25, lambda X: np.ones(len(X)), 500, 3)
    assert one.value == 1.0
    a = regularized_expectation(KIN, LAW, [0.3, -0.2], 1.0, 1 / 16, 0.25, lambda X: X @ [1.0, -2.0], 20000, 3)
    b = expectation(KIN, LAW, [0.3, -0.2], 1.0, 1 / 16, lambda X: X @ [1.0, -2.0], 20000, 3)
    assert _z(a, b) <= 3


def test_regularized_variance_addition():
    delta, theta, x0 = 1 / 16, 0.25, 0.4
    r = regularized_expectation(RW, LAW, [x0], 1.0, delta, theta, lambda X: X[:, 0] ** 2, 40000, 5)
    exact = 1.0 + delta ** (2 * theta) + x0**2
    assert abs(r.value - exact) <= 3 * r.std_error


def test_regularized_tends_to_plain_for_large_theta():
    f = lambda X: np.abs(X[:, 0])
    a = regularized_expectation(RW, LAW, [0.0], 1.0, 1 / 16, 8.0, f, 20000, 6)
    b = expectation(RW, LAW, [0.0], 1.0, 1 / 16, f, 20000, 6)
    assert _z(a, b) <= 3


def test_regularized_rejects_nonpositive_theta():
    with pytest.raises(ValueError):
        regularized_expectation(RW, LAW, [0.0], 1.0, 1 / 16, 0.0, lambda X: X[:, 0], 10, 1)


# ---- localized ----------------------------------------------------------


def test_localized_with_huge_thresholds_matches_plain():
    # Theta reduces to 1_Lambda; over 64 steps P(Lambda^c) is negligible
    thr = Thresholds(eta1=1e300, eta2=1e6, delta=1 / 16, feasible=True)
    f = lambda X: X[:, 0] ** 2
    a = localized_expectation(RW, LAW, [0.0], 4.0, 1 / 16, thr, f, 20000, 8, block=2048)
    b = expectation(RW, LAW, [0.0], 4.0, 1 / 16, f, 20000, 8)
    assert a.extras["loss"] == pytest.approx(a.extras["lambda_c"], abs=1e-12)
    assert a.extras["lambda_c"] < 2e-3
    assert _z(a, b) <= 3


def test_localized_tiny_eta2_kills_everything():
    thr = Thresholds(eta1=1e300, eta2=1.0 + 1e-9, delta=1 / 16, feasible=False)
    r = localized_expectation(RW, LAW, [0.0], 1.0, 1 / 16, thr, lambda X: X[:, 0], 4000, 9)
    assert r.extras["loss"] > 0.99


# ---- densities ----------------------------------------------------------


def test_hermite_coefficients():
    u = np.linspace(-2, 2, 9)
    np.testing.assert_array_equal(hermite(3, u), u**3 - 3 * u)
    np.testing.assert_array_equal(hermite(4, u), u**4 - 6 * u**2 + 3)
    with pytest.raises(ValueError):
        hermite(5, u)


def test_density_single_sample():
    delta, theta = 1 / 16, 0.25
    h = delta**theta
    y = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(density(np.zeros((1, 1)), theta, delta, y), norm.pdf(y, scale=h), rtol=1e-13)
    d1 = density_derivative(np.zeros((1, 1)), theta, delta, [1], y)
    np.testing.assert_allclose(d1, -y / h**2 * norm.pdf(y, scale=h), rtol=1e-12, atol=1e-15)


def test_density_beta_zero_equals_density(rng):
    X = rng.normal(size=(200, 2))
    y = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(density_derivative(X, 0.5, 0.25, [0, 0], y), density(X, 0.5, 0.25, y))


def test_density_integrates_to_one(rng):
    X = rng.normal(size=(500, 1)) * 1.3
    y = np.linspace(-10, 10, 4001)
    q = density(X, 0.25, 1 / 16, y)
    assert np.all(q >= 0)
    assert abs(np.trapezoid(q, y) - 1) <= 1e-3


def test_density_random_walk_gaussian():
    delta, theta = 1 / 16, 0.25
    X = terminal_samples(RW, LAW, [0.0], 1.0, delta, 20000, 11)
    y = np.linspace(-3, 3, 61)
    q = density(X, theta, delta, y)
    se = density_standard_error(X, theta, delta, y)
    exact = norm.pdf(y, scale=math.sqrt(1 + delta ** (2 * theta)))
    assert np.max(np.abs(q - exact) / se) <= 4.5  # sup over 61 correlated points


@pytest.mark.parametrize("beta", [[1, 0], [0, 1], [2, 0], [1, 1]])
def test_density_derivative_fd(rng, beta):
    X = rng.normal(size=(300, 2))
    theta, delta = 0.5, 0.25
    y = np.array([[0.3, -0.4], [-0.8, 0.5], [1.0, 1.0]])
    got = density_derivative(X, theta, delta, beta, y)
    h = 1e-4

    def shift(k, s):
        e = np.zeros(2)
        e[k] = s
        return y + e

    if sum(beta) == 1:
        k = beta.index(1)
        fd = (density(X, theta, delta, shift(k, h)) - density(X, theta, delta, shift(k, -h))) / (2 * h)
    elif beta == [2, 0]:
        fd = (density(X, theta, delta, shift(0, h)) - 2 * density(X, theta, delta, y) + density(X, theta, delta, shift(0, -h))) / h**2
    else:
        g = lambda s: (density_derivative(X, theta, delta, [1, 0], y + [0, s]))
        fd = (g(h) - g(-h)) / (2 * h)
    np.testing.assert_allclose(got, fd, rtol=1e-3)


def test_density_derivative_order_guard(rng):
    with pytest.raises(ValueError):
        density_derivative(rng.normal(size=(5, 1)), 0.5, 0.25, [5], 0.0)
    with pytest.raises(ValueError):
        density_derivative(rng.normal(size=(5, 2)), 0.5, 0.25, [1], [0.0, 0.0])


# ---- TV -----------------------------------------------------------------


def test_tv_identical_is_zero(rng):
    A = rng.normal(size=(2000, 2))
    assert tv_distance(A, A.copy(), 0.25, 1 / 16, n_boot=0).value == 0.0


def test_tv_disjoint_point_masses():
    A = np.zeros((10, 1))
    B = np.full((10, 1), 10.0)
    r = tv_distance(A, B, 1.0, 0.05, n_boot=0)
    assert abs(r.value - 1) <= 1e-6


def test_tv_gaussian_shift():
    A = np.random.default_rng(1).normal(size=100_000)
    B = np.random.default_rng(2).normal(size=100_000) + 0.1
    exact = 2 * norm.cdf(0.05) - 1
    r = tv_distance(A, B, 1.0, 0.2, n_boot=4)
    assert abs(r.value - exact) <= 0.01
    assert abs(r.extras["quadrature_residual"]) <= 1e-3


def test_tv_symmetric_bounded_triangle(rng):
    A, B, C = rng.normal(size=(3000, 2)), rng.normal(size=(3000, 2)) + [0.3, 0], rng.normal(size=(3000, 2)) * 1.2
    h = 0.3
    grid = auto_grid([A, B, C], h)
    tv = lambda P, Q: tv_distance(P, Q, 1.0, h, grid=grid, n_boot=0)
    ab, ba, bc, ac = tv(A, B), tv(B, A), tv(B, C), tv(A, C)
    assert ab.value == pytest.approx(ba.value, abs=1e-14)
    res = max(abs(r.extras["quadrature_residual"]) for r in (ab, bc, ac))
    assert 0 <= ab.value <= 1 + res
    assert ac.value <= ab.value + bc.value + 2 * res + 1e-12


def test_tv_scale_invariance_for_separated_samples(rng):
    A = rng.normal(size=(4000, 2)) * [1.0, 0.01]
    B = rng.normal(size=(4000, 2)) * [1.0, 0.01] + [0.5, 0.0]
    r = tv_distance(A, B, 1.0, 0.2, n_boot=0, scale=[1.0, 0.01])
    exact = 2 * norm.cdf(0.25) - 1
    assert abs(r.value - exact) <= 0.03
    assert r.config["scale"] == [1.0, 0.01]


def test_tv_dimension_limit(rng):
    with pytest.raises(ResourceCapError):
        tv_distance(rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), 1.0, 0.5)
    lb = tv_distance_sliced(rng.normal(size=(2000, 4)), rng.normal(size=(2000, 4)) + 0.5, 1.0, 0.3, n_slices=8)
    assert lb.extras["label"] == "lower bound" and 0 < lb.value < 1


def test_smoothed_grid_density_normalized(rng):
    X = rng.normal(size=(1000, 1))
    grid = auto_grid([X], 0.2)
    q = smoothed_density_on_grid(X, 0.2, grid)
    assert abs(q.sum() * grid.cell - 1) < 1e-6
    y = grid.axes()[0]
    direct = density(X, 1.0, 0.2, y)
    assert np.abs(q - direct).max() <= 2e-3 * direct.max()


def test_grid_cap():
    with pytest.raises(ResourceCapError):
        auto_grid([np.array([[0.0, 0.0, 0.0], [100.0, 100.0, 100.0]])], 0.01)


# ---- IBP and duality (small smoke runs; full runs in the acceptance suite)


def test_ibp_constant_test_function():
    thr = Thresholds(eta1=3.0, eta2=2.0, delta=1 / 16, feasible=False)
    tests = [("const", lambda X: np.ones(len(X)), lambda X: np.zeros_like(X))]
    rec = ibp_identity_check(RW, LAW, [0.0], 1.0, 1 / 16, thr, tests, 4000, 3)[0]
    assert rec["lhs"] == 0.0
    assert abs(rec["rhs"]) <= 3 * rec["rhs_se"]


def test_duality_small_run():
    g = lambda X: np.sin(X[:, 0])
    gg = lambda X: np.cos(X)
    hg = lambda X: -np.sin(X)[:, :, None]
    recs = duality_check(RW, LAW, [0.0], 1.0, 1 / 16, [("sin", g, gg, hg)], 20000, 4)
    assert abs(recs[0]["z_F_LG"]) <= 3 and abs(recs[0]["z_G_LF"]) <= 3
