import math

import numpy as np
import pytest

from lsmssm import expansion as ex
from lsmssm import models
from lsmssm.system_model import Poly, SystemSpec, eval_field
from tests.conftest import DELTA


def test_order_zero_pair(pendulum_expansion):
    exp = pendulum_expansion
    z = exp.grid_points()
    np.testing.assert_allclose(exp.K_terms[0](z), exp.K_grid[0], atol=1e-10 * DELTA)
    # the LSM is tangent to the Lyapunov plane and isometric at the origin
    D0 = exp.K_terms[0].jacobian(np.array([1e-7, 0.0]))
    np.testing.assert_allclose(D0[:2], np.eye(2), atol=1e-6)
    np.testing.assert_allclose(D0[2:], 0, atol=1e-6)
    np.testing.assert_allclose(exp.a[0], 0)
    np.testing.assert_allclose(exp.b[0], exp.family.Omega, rtol=1e-12)


def test_order_one_forcing_is_the_damping_field(pendulum_expansion):
    exp = pendulum_expansion
    eta = ex.order_rhs(1, exp)
    dyn = exp.dyn
    X = exp.K_grid[0] @ dyn.S.T
    expected = (eval_field(dyn.spec, X, 1.0) - eval_field(dyn.spec, X, 0.0)) @ dyn.Sinv.T
    np.testing.assert_allclose(eta, expected, atol=1e-15)


def test_order_rhs_limits(pendulum_expansion):
    with pytest.raises(ex.ExpansionError):
        ex.order_rhs(0, pendulum_expansion)
    with pytest.raises(ex.ExpansionError):
        ex.order_rhs(pendulum_expansion.N + 2, pendulum_expansion)


def test_order_two_forcing_matches_finite_differences(pendulum_expansion):
    """The eps^2 coefficient of F_eps(K0 + eps K1), by a centred second difference."""
    exp = pendulum_expansion.truncated(1)
    dyn = exp.dyn
    eta2 = ex.order_rhs(2, exp) + exp.a[1][:, None, None] * exp.d_rho(1) + exp.b[1][:, None, None] * exp.d_theta(1)
    h = 1e-3
    val = {e: dyn.with_eps(e).field(exp.K_grid[0] + e * exp.K_grid[1]) for e in (-h, 0.0, h)}
    fd = (val[h] - 2 * val[0.0] + val[-h]) / (2 * h * h)
    assert np.abs(eta2 - fd).max() < 1e-5 * max(np.abs(fd).max(), 1e-12)


def test_melnikov_rates_follow_averaging(pendulum_expansion):
    exp = pendulum_expansion.truncated(0)
    eta = ex.order_rhs(1, exp)
    a, b, gap = ex.melnikov_Rn(1, eta, exp)
    assert gap < 1e-8
    assert np.all(a < 0)  # damping lowers the energy
    # near the origin the radial rate per unit radius tends to -alpha
    alpha = 1 / (2 * models.PendulumParams().m)
    assert a[0] / exp.rho[0] == pytest.approx(-alpha, rel=1e-3)


def test_zero_forcing_gives_zero_rates(pendulum_expansion):
    exp = pendulum_expansion.truncated(0)
    a, b, _ = ex.melnikov_Rn(1, np.zeros_like(exp.K_grid[0]), exp)
    assert np.abs(a).max() < 1e-14 and np.abs(b).max() < 1e-14


def test_diagnostics_are_tight(pendulum_expansion):
    orders = [d for d in pendulum_expansion.diagnostics if d.get("order", 0) >= 1]
    assert len(orders) == pendulum_expansion.N
    for diag in orders:
        assert diag["cross_solver"] < 1e-7
        assert diag["melnikov_gap"] < 1e-7
        assert diag["mode_tail"] < 1e-6


def test_reduced_linear_part_has_perturbed_eigenvalues(pendulum_expansion, pendulum_spec):
    eps = 1e-3
    A = ex.reduced_linear_physical(pendulum_expansion, eps, 1)
    lam = np.linalg.eigvals(A)
    exact = np.linalg.eigvals(pendulum_spec.L + eps * pendulum_spec.C)
    target = exact[np.argmin(np.abs(exact - lam[0]))]
    assert abs(lam[0] - target) < 1e-2 * eps  # agreement to first order in eps


def test_linear_system_has_no_corrections(linear_expansion):
    exp = linear_expansion
    for n in range(1, exp.N + 1):
        assert np.abs(exp.K_grid[n]).max() < 1e-10
    rate = exp.a[1] / exp.rho
    np.testing.assert_allclose(rate, -0.5, rtol=1e-9)
    np.testing.assert_allclose(exp.b[1], 0, atol=1e-10)


@pytest.mark.parametrize("N", [0, 1, 2])
def test_residual_decays_with_order(pendulum_expansion, N):
    eps = np.geomspace(1e-3, 1e-2, 4)
    vals, s = ex.residual_sweep(pendulum_expansion, N, eps)
    assert s == pytest.approx(N + 1, abs=0.1)


def test_residual_uses_the_disk(pendulum_expansion):
    ev = ex.assemble(pendulum_expansion)
    with pytest.raises(ex.ExpansionError):
        ex.residual(ev, 0.01, z=np.array([[2 * DELTA, 0.0]]))
    with pytest.raises(ex.ExpansionError):
        ex.assemble(pendulum_expansion, pendulum_expansion.N + 1)


def test_terms_are_real(pendulum_expansion):
    z = ex.evaluation_points(DELTA)
    for K in pendulum_expansion.K_terms:
        assert np.abs(np.imag(K(z))).max() < 1e-14


def test_truncation_is_consistent(pendulum_expansion):
    z = ex.evaluation_points(DELTA, 4, 8)
    short = ex.assemble(pendulum_expansion.truncated(1))
    full = ex.assemble(pendulum_expansion, 1)
    np.testing.assert_array_equal(short.K(z, 0.05), full.K(z, 0.05))


def test_gauge_freedom_keeps_residual(pendulum_expansion):
    old, new = ex.gauge_residual(pendulum_expansion, 2, 0.01)
    assert abs(new - old) < 1e-8 + 0.05 * old


def test_complex_eps_is_finite(pendulum_expansion):
    r = ex.residual(ex.assemble(pendulum_expansion), 0.01 + 0.005j)
    assert np.isfinite(r) and r < 1e-4


def test_noise_floor_is_small(pendulum_expansion):
    assert ex.noise_floor(pendulum_expansion) < 1e-9


def test_eps_taylor_of_a_polynomial():
    c = ex.eps_taylor(lambda e: {"p": np.array([1 + 2 * e + 3 * e * e, e ** 3])}, 3)
    np.testing.assert_allclose(np.real(c["p"]), [[1, 0], [2, 0], [3, 0], [0, 1]], atol=1e-10)


# partial normal form

def test_normal_form_is_identity_for_linear_systems(linear_spec):
    spec, rec = ex.partial_normal_form(linear_spec, 3)
    assert not rec.W.terms
    np.testing.assert_allclose(spec.L, np.linalg.inv(rec.S) @ linear_spec.L @ rec.S, atol=1e-12)


def test_normal_form_removes_a_nonresonant_term():
    L = np.zeros((4, 4))
    L[0, 1], L[1, 0] = -1.0, 1.0
    L[2, 3], L[3, 2] = -math.sqrt(2), math.sqrt(2)
    N = Poly({(2, 0, 0, 0, 0): [0, 0, 1.0, 0]}, 4, 4)
    spec = SystemSpec(L, -0.1 * np.eye(4), N)
    new, rec = ex.partial_normal_form(spec, 2)
    assert rec.min_divisor > 0.5
    quad = new.N.homogeneous(2)
    assert all(np.abs(v).max() < 1e-12 for v in quad.terms.values())


def test_pendulum_normal_form_keeps_resonant_terms(pendulum_spec):
    _, rec = ex.partial_normal_form(pendulum_spec, 3)
    assert rec.kept  # the |x|^2 x type terms stay
    assert rec.min_jacobian_det > 0.5
    assert rec.min_divisor > 0.1
