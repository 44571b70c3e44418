import numpy as np
import pytest

from lsmssm import cohomology as co
from lsmssm import lsm


@pytest.fixture(scope="module")
def small_family(pendulum_spec):
    return lsm.build_family(pendulum_spec, lsm.default_radii(5, 0.05), M=32)


@pytest.fixture(scope="module")
def tangents(small_family):
    return co.tangent_forcings(small_family)


@pytest.fixture(scope="module")
def frame(small_family):
    return co.floquet_frame(small_family)


@pytest.fixture(scope="module")
def linear_family(linear_spec):
    return lsm.build_family(linear_spec, lsm.default_radii(4, 0.05), M=32)


def forcing(fam, tangents, eta):
    return co.Forcing(eta, *tangents)


def smooth_forcing(fam, seed=0):
    """Trigonometric forcing of low degree in the orbit phase, cubic in the radius."""
    rng = np.random.default_rng(seed)
    n = fam.dyn.n
    th = 2 * np.pi * np.arange(fam.M) / fam.M
    coef = rng.normal(size=(3, 3, n))
    out = np.zeros((len(fam.grid), fam.M, n))
    for k in range(3):
        wave = np.cos(k * th + 0.3 * k)[None, :, None]
        out += (fam.grid[:, None, None] ** 2) * coef[0, k] * wave + fam.grid[:, None, None] ** 3 * coef[1, k] * wave
    return out


def test_zero_forcing_gives_zero(small_family, tangents):
    f = forcing(small_family, tangents, np.zeros_like(tangents[0]))
    sol = co.solve_bvp(f, small_family)
    assert np.abs(sol.u).max() < 1e-14
    np.testing.assert_allclose(sol.a, 0, atol=1e-14)
    np.testing.assert_allclose(sol.b, 0, atol=1e-14)


@pytest.mark.parametrize("solver", ["bvp", "fourier"])
def test_tangent_forcings_are_absorbed_by_coefficients(small_family, tangents, frame, solver):
    d_rho, d_th = tangents
    for eta, a, b in ((d_rho, 1.0, 0.0), (d_th, 0.0, 1.0)):
        f = forcing(small_family, tangents, eta)
        sol = co.solve_bvp(f, small_family) if solver == "bvp" else co.solve_fourier(f, frame, small_family)
        np.testing.assert_allclose(sol.a, a, atol=1e-7)
        np.testing.assert_allclose(sol.b, b, atol=1e-7)


def test_energy_direction_has_obstruction(small_family, tangents):
    d_rho, d_th = tangents
    for j in range(len(small_family.grid)):
        assert abs(co.obstruction(d_rho[j], small_family, j)) > 1e-6
        assert abs(co.obstruction(d_th[j], small_family, j)) < 1e-10 * small_family.grid[j]
        by_prop = co.obstruction(d_rho[j], small_family, j)
        by_grad = co.obstruction(d_rho[j], small_family, j, via="gradient")
        assert by_prop == pytest.approx(by_grad, rel=1e-6)


def test_averaged_rate_matches_solver(small_family, tangents):
    eta = smooth_forcing(small_family)
    sol = co.solve_bvp(forcing(small_family, tangents, eta), small_family)
    np.testing.assert_allclose(co.averaged_radial_rate(eta, tangents[0], small_family), sol.a, rtol=1e-7, atol=1e-12)


def test_single_transverse_mode_matches_resolvent(linear_family):
    fam = linear_family
    dyn = fam.dyn
    A = dyn.Sinv @ dyn.spec.L @ dyn.S
    tang = co.tangent_forcings(fam)
    th = 2 * np.pi * np.arange(fam.M) / fam.M
    k = 2
    v = np.array([0, 0, 1.0, 0.5])
    eta = np.real(v[None, :] * np.exp(1j * k * th)[:, None])
    eta = np.broadcast_to(eta, (len(fam.grid),) + eta.shape).copy()
    sol = co.solve_bvp(co.Forcing(eta, *tang), fam)
    c = np.linalg.solve(1j * k * fam.Omega[0] * np.eye(4) - A, v)
    exact = np.real(c[None, :] * np.exp(1j * k * th)[:, None])
    for j in range(len(fam.grid)):
        np.testing.assert_allclose(sol.u[j], exact, atol=1e-10)


def test_solution_is_real_and_linear(small_family, tangents):
    e1 = smooth_forcing(small_family, 1)
    e2 = smooth_forcing(small_family, 2)
    s1 = co.solve_bvp(forcing(small_family, tangents, e1), small_family)
    s2 = co.solve_bvp(forcing(small_family, tangents, e2), small_family)
    s12 = co.solve_bvp(forcing(small_family, tangents, 2 * e1 - 3 * e2), small_family)
    assert np.isrealobj(s1.u)
    scale = np.abs(s12.u).max()
    assert np.abs(s12.u - (2 * s1.u - 3 * s2.u)).max() < 1e-9 * scale
    np.testing.assert_allclose(s12.a, 2 * s1.a - 3 * s2.a, rtol=1e-9, atol=1e-12)


def test_solvers_agree_and_satisfy_equation(small_family, tangents, frame):
    eta = smooth_forcing(small_family, 3)
    f = forcing(small_family, tangents, eta)
    bvp = co.solve_bvp(f, small_family)
    four = co.solve_fourier(f, frame, small_family)
    scale = np.abs(bvp.u).max()
    assert np.abs(bvp.u - four.u).max() < 1e-8 * scale
    np.testing.assert_allclose(bvp.a, four.a, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(bvp.b, four.b, rtol=1e-8, atol=1e-12)
    res = co.equation_residual(bvp, f, small_family)
    assert res.max() < 1e-7 * np.abs(eta).max() * small_family.periods.max()
    assert bvp.periodicity_defect.max() < 1e-10 * scale


def test_frame_is_periodic(small_family, frame):
    assert frame.periodicity_defect(small_family) < 1e-9


def test_resolvent_bound_is_finite(small_family, frame):
    r = co.resolvent_bound(frame, small_family, 6)
    assert np.isfinite(r) and r > 0
