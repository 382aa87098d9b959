import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hormarkov.errors import GuardError, SimulationError
from hormarkov.noise import GaussianLaw, UniformMixtureLaw
from hormarkov.scheme import (GrowthMeta, PathRecord, SchemeMap, euler_scheme_from_fields, fields_from_scheme,
                              identity_scheme, inverse_tangent_flow, kinetic_fields, kinetic_scheme,
                              linear_growth_scheme, make_scheme, n_steps, quadratic_scheme, random_walk_scheme,
                              replay, simulate_path, simulate_paths, simulate_terminal, step_gradient_bound_check,
                              tangent_flow)
from hormarkov.vectorfield import Field

LAW = GaussianLaw()


def test_identity_probe_rejects_bad_map():
    with pytest.raises(ValueError, match="psi"):
        SchemeMap(lambda x, t, z, y: [x[0] + 1e-6], 1, 1)


def test_n_steps_integer_check():
    assert n_steps(1.0, 1 / 64) == 64
    with pytest.raises(ValueError):
        n_steps(1.0, 0.3)


# ---- fields -------------------------------------------------------------


def test_fields_of_random_walk():
    F = fields_from_scheme(random_walk_scheme())
    x = [0.37]
    assert F.V0(x)[0] == 0.0 and F.V[0](x)[0] == 1.0 and F.V0_bar(x)[0] == 0.0


def test_fields_of_euler_roundtrip(rng):
    V0, V1 = kinetic_fields(b=(0.2, -1.0, 0.5), s=(1.0, 0.3, 0.25))
    F = fields_from_scheme(euler_scheme_from_fields(V0, [V1]))
    for _ in range(10):
        x, t = rng.normal(size=2), rng.uniform()
        np.testing.assert_allclose(F.V0(x, t), V0(x, t), atol=1e-12)
        np.testing.assert_allclose(F.tilde_V0(x, t), V0(x, t), atol=1e-12)
        np.testing.assert_allclose(F.V[0](x, t), V1(x, t), atol=1e-12)


def test_fields_of_nonlinear_map():
    # Milstein-type map: x + sigma z + b y + 1/2 sigma sigma' z^2
    sig = lambda x: 1 + 0.5 * np.sin(x)
    dsig = lambda x: 0.5 * np.cos(x)
    b = lambda x: -x
    psi = SchemeMap(lambda x, t, z, y: [x[0] + sig(x[0]) * z[0] + b(x[0]) * y + 0.5 * sig(x[0]) * dsig(x[0]) * z[0] ** 2],
                    1, 1, max_order=64)
    F = fields_from_scheme(psi)
    for x in (-1.0, 0.0, 0.8):
        assert F.V[0]([x])[0] == pytest.approx(sig(x), abs=1e-14)
        assert F.tilde_V0([x])[0] == pytest.approx(b(x), abs=1e-14)
        assert F.V0([x])[0] == pytest.approx(b(x) - 0.5 * sig(x) * dsig(x), abs=1e-14)
        assert F.V0_bar([x])[0] == pytest.approx(b(x) - sig(x) * dsig(x), abs=1e-14)


def test_euler_of_unit_fields_is_random_walk():
    zero = Field(lambda x, t: [0.0 * x[0]], 1)
    one = Field(lambda x, t: [1.0 + 0.0 * x[0]], 1)
    psi = euler_scheme_from_fields(zero, [one])
    np.testing.assert_array_equal(psi.step(np.array([[0.5]]), 0.0, np.array([[0.25]]), 0.1), [[0.75]])


def test_kinetic_euler_map():
    b, s = (0.1, -1.0, 0.5), (1.0, 0.3, 0.25)
    psi = kinetic_scheme(b, s)
    x, dz, y = np.array([[0.4, -0.3]]), np.array([[0.2]]), 0.01
    v = 0.4
    bx = b[0] + b[1] * v + b[2] * math.sin(v)
    sx = s[0] + s[1] * v + s[2] * math.cos(v)
    np.testing.assert_allclose(psi.step(x, 0.0, dz, y), [[v + bx * y + sx * 0.2, -0.3 + v * y]], rtol=1e-15)


# ---- simulation -------------------------------------------------------------


def test_identity_path_constant():
    p = simulate_path(identity_scheme(), LAW, [1.5], 1 / 8, 1.0, seed=3)
    assert np.all(p.X == 1.5)


def test_random_walk_mean_zero():
    X = simulate_terminal(random_walk_scheme(), LAW, [0.0], 1 / 256, 1.0, seed=11, n_paths=100_000)
    assert abs(X.mean()) <= 3 * X.std(ddof=1) / math.sqrt(len(X))


def test_kinetic_second_coordinate_replays():
    p = simulate_paths(kinetic_scheme(), UniformMixtureLaw(), [0.2, 0.1], 1 / 32, 1.0, seed=5, n_paths=3)
    delta = p.delta
    np.testing.assert_allclose(p.X[:, -1, 1] - 0.1, delta * p.X[:, :-1, 0].sum(axis=1), rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(replay(kinetic_scheme(), p), p.X)


def test_split_identity_in_record():
    p = simulate_paths(kinetic_scheme(), LAW, [0.0, 0.0], 1 / 16, 1.0, seed=5, n_paths=50)
    np.testing.assert_array_equal(math.sqrt(p.delta) * p.Z, p.dz)


def test_simulation_deterministic_and_blockwise():
    psi = kinetic_scheme()
    a = simulate_paths(psi, LAW, [0.0, 0.0], 1 / 16, 1.0, seed=9, n_paths=20)
    b = simulate_paths(psi, LAW, [0.0, 0.0], 1 / 16, 1.0, seed=9, n_paths=5, first_path=10)
    np.testing.assert_array_equal(a.X[10:15], b.X)
    c = simulate_paths(psi, LAW, [0.0, 0.0], 1 / 16, 1.0, seed=9, n_paths=20)
    np.testing.assert_array_equal(a.X, c.X)
    # split terminal states coincide with the full record
    np.testing.assert_array_equal(simulate_terminal(psi, LAW, [0.0, 0.0], 1 / 16, 1.0, 9, 20, split=True), a.X[:, -1])


def test_non_finite_state_reported():
    psi = SchemeMap(lambda x, t, z, y: [x[0] * (1 + 1e200 * y) + z[0]], 1, 1, max_order=64)
    with pytest.raises(SimulationError, match="step"), np.errstate(over="ignore", invalid="ignore"):
        simulate_path(psi, LAW, [1.0], 0.5, 2.0, seed=0)


def test_csv_roundtrip(tmp_path):
    p = simulate_paths(kinetic_scheme(), UniformMixtureLaw(), [0.2, 0.1], 1 / 8, 1.0, seed=5, n_paths=3)
    p.to_csv(tmp_path)
    q = PathRecord.from_csv(tmp_path)
    for k in ("X", "Z", "chi", "U", "V"):
        np.testing.assert_array_equal(getattr(p, k), getattr(q, k))
    assert q.delta == p.delta and q.seed == p.seed and q.law_id == "uniform-mixture"


def test_make_scheme():
    assert make_scheme("iterated-sum", order=2).d == 3
    with pytest.raises(ValueError):
        make_scheme("milstein")


# ---- flows -----------------------------------------------------------------


def test_random_walk_flow_identity():
    p = simulate_paths(random_walk_scheme(), LAW, [0.0], 2**-10, 1 / 16, seed=1, n_paths=4)
    fl = inverse_tangent_flow(p, random_walk_scheme(), eta2=2.0)
    assert np.all(fl.forward == 1.0)
    assert np.all(fl.inverse[fl.valid] == 1.0)


def test_linear_growth_flow_closed_form():
    psi = linear_growth_scheme()
    delta = 1 / 32
    p = simulate_paths(psi, LAW, [1.0], delta, 1.0, seed=1, n_paths=2)
    fl = inverse_tangent_flow(p, psi, eta2=1e9)
    assert fl.heuristic
    np.testing.assert_allclose(fl.forward[:, -1, 0, 0], (1 + delta) ** 32, rtol=1e-13)
    np.testing.assert_allclose(fl.inverse[:, -1, 0, 0], (1 + delta) ** -32, rtol=1e-13)


def test_kinetic_inverse_consistency():
    psi = kinetic_scheme(b=(0.1, -1.0, 0.5), s=(1.0, 0.3, 0.25))
    p = simulate_paths(psi, LAW, [0.3, -0.2], 2**-12, 2**-8, seed=2, n_paths=20)
    fl = inverse_tangent_flow(p, psi, eta2=2.0)
    prod = np.einsum("mkab,mkbc->mkac", fl.forward, fl.inverse)
    err = np.abs(prod - np.eye(2))[fl.valid]
    assert fl.valid[:, -1].any()
    assert err.max() <= 1e-8


def test_kinetic_flow_matches_finite_differences():
    psi = kinetic_scheme(b=(0.1, -1.0, 0.5), s=(1.0, 0.3, 0.25))
    x0 = np.array([0.3, -0.2])
    p = simulate_paths(psi, LAW, x0, 1 / 32, 1.0, seed=4, n_paths=3)
    F = tangent_flow(p, psi)[:, -1]
    h = 1e-5 * (1 + np.abs(x0).max())
    for c in range(2):
        e = np.eye(2)[c] * h
        fd = (replay(psi, p, x0=x0 + e)[:, -1] - replay(psi, p, x0=x0 - e)[:, -1]) / (2 * h)
        np.testing.assert_allclose(fd, F[:, :, c], rtol=1e-5, atol=1e-8)


def test_invalid_steps_zero_inverse():
    psi = random_walk_scheme()
    p = simulate_paths(psi, LAW, [0.0], 2**-10, 1 / 16, seed=1, n_paths=200)
    fl = inverse_tangent_flow(p, psi, eta2=1.5)
    bad = ~fl.valid
    assert bad.any()
    assert np.all(fl.inverse[bad] == 0)
    m = int(np.argmax(bad[:, -1]))
    k = fl.first_invalid[m]
    assert abs(p.Z[m, k - 1, 0]) > 1.5 and np.all(np.abs(p.Z[m, : k - 1, 0]) <= 1.5)


def test_guard_error_with_growth_meta():
    with pytest.raises(GuardError):
        p = simulate_paths(kinetic_scheme(), LAW, [0.0, 0.0], 1 / 16, 1.0, seed=1, n_paths=1)
        inverse_tangent_flow(p, kinetic_scheme(), eta2=3.0)


def test_step_gradient_bound_check():
    r = step_gradient_bound_check(random_walk_scheme(), 1e-4, 2.0, [[0.0], [3.0]])
    assert r["worst"] == 0.0 and r["pass"]
    k = kinetic_scheme(b=(0.1, -1.0, 0.5), s=(1.0, 0.3, 0.25))
    r = step_gradient_bound_check(k, 2**-14, 2.0, np.random.default_rng(0).normal(size=(10, 2)))
    assert r["pass"] and r["margin"] > 0 and r["bound_ok"]
    bad = SchemeMap(lambda x, t, z, y: [x[0] + 50 * x[0] * z[0]], 1, 1, max_order=64)
    r = step_gradient_bound_check(bad, 0.5, 2.0, [[1.0]])
    assert not r["pass"]
