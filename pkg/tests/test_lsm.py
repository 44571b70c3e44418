import math

import numpy as np
import pytest
from scipy.linalg import expm

from lsmssm import lsm, models
from lsmssm.archive import load_model
from lsmssm.system_model import eval_conserved


@pytest.fixture(scope="module")
def linear_family(linear_spec):
    return lsm.build_family(linear_spec, lsm.default_radii(6, 0.05), M=32)


def test_linear_orbits_are_circles(linear_spec):
    dyn = lsm.Dynamics.from_spec(linear_spec)
    orb = lsm.continue_orbit(dyn, 0.1, samples=32)
    assert orb.period == pytest.approx(2 * math.pi, rel=1e-10)
    r = np.hypot(orb.samples[:, 0], orb.samples[:, 1])
    np.testing.assert_allclose(r, 0.1, rtol=1e-10)
    assert np.abs(orb.samples[:, 2:]).max() < 1e-12


def test_pendulum_period_matches_frozen_oracle(pendulum_spec, frozen):
    ref = frozen["pendulum_period"]
    orb = lsm.continue_orbit(pendulum_spec, ref["rho0"])
    np.testing.assert_allclose(orb.initial_point, ref["initial_point"], atol=1e-8)
    assert orb.period == pytest.approx(ref["period"], rel=1e-6)
    assert orb.residual < 1e-10


def test_period_tends_to_linear_period(pendulum_spec):
    dyn = lsm.Dynamics.from_spec(pendulum_spec)
    periods = [lsm.continue_orbit(dyn, r).period for r in (1e-2, 1e-3)]
    assert abs(periods[1] - dyn.T0) < 1e-4 * dyn.T0
    assert abs(periods[1] - dyn.T0) < abs(periods[0] - dyn.T0)


def test_section_period_agrees_with_crossing_time(pendulum_spec):
    dyn = lsm.Dynamics.from_spec(pendulum_spec)
    orb = lsm.continue_orbit(dyn, 0.05)
    assert lsm.period_by_crossing(dyn, orb.initial_point, orb.period) == pytest.approx(orb.period, rel=1e-9)


def test_nonpositive_label_is_rejected(pendulum_spec):
    with pytest.raises(ValueError):
        lsm.continue_orbit(pendulum_spec, 0.0)


def test_family_invariants(pendulum_family):
    fam = pendulum_family
    assert len(fam.orbits) == len(fam.grid)
    assert fam.M == 64
    assert np.all(np.diff(fam.energies) > 0)
    for o in fam.orbits:
        assert o.residual < 1e-10
        E = eval_conserved(fam.dyn.spec, fam.dyn.to_physical(o.samples))
        assert np.ptp(E) < 1e-10 * abs(o.energy)
        assert abs(np.linalg.det(o.monodromy) - 1) < 1e-8
    assert not any("off the unit circle" in s for s in fam.notes)


def test_amplitude_labels_first_harmonic(pendulum_family):
    for r, o in zip(pendulum_family.grid, pendulum_family.orbits):
        assert abs(lsm.first_harmonic(o)) == pytest.approx(r, rel=1e-9)


def test_unit_block_of_monodromy(pendulum_family):
    fam = pendulum_family
    o = fam.orbits[5]
    _, _, _, Mb = lsm._floquet_blocks(fam.dyn, o, lsm.lsm_tangent(fam.dyn, o))
    unit = Mb[:2, :2]
    assert abs(np.trace(unit) - 2) < 1e-8
    assert abs(np.linalg.det(unit) - 1) < 1e-8


def test_transverse_floquet_multipliers_on_unit_circle(pendulum_family):
    for j in range(len(pendulum_family.grid)):
        np.testing.assert_allclose(np.abs(pendulum_family.floquet_multipliers(j)), 1.0, atol=1e-8)


def test_linear_transverse_block_is_exponential(linear_family):
    fam = linear_family
    dyn = fam.dyn
    L2 = (dyn.Sinv @ dyn.spec.L @ dyn.S)[2:, 2:]
    for A, T in zip(fam.floquet_A, fam.periods):
        np.testing.assert_allclose(A, expm(T * L2), atol=1e-9)


def test_hyperbolic_block_leaves_unit_circle():
    spec, _ = load_model("hyper")
    fam = lsm.build_family(spec, lsm.default_radii(3, 0.05), M=16)
    growth = [np.abs(fam.floquet_multipliers(j)).max() for j in range(3)]
    assert growth[0] > 1 + 1e-4
    assert np.all(np.diff(growth) > 0)


def test_radii_must_increase(pendulum_spec):
    with pytest.raises(ValueError):
        lsm.build_family(pendulum_spec, [0.02, 0.01], M=16)


def test_isolated_cycle_of_example1():
    a = 1.0
    eps = 0.05
    spec = models.example1_system(a)
    dyn = lsm.Dynamics(spec, np.eye(4), 1.0, eps)
    orbit, _, exps = lsm.locate_cycle(dyn, 0.9 * eps)
    x = dyn.to_physical(orbit.initial_point)
    assert np.hypot(*x[:2]) == pytest.approx(eps, rel=1e-9)
    np.testing.assert_allclose(np.sort(exps) / eps ** 2, [1.0, a, a], rtol=1e-6)


def test_rescaled_time_has_constant_period(pendulum_family):
    scaled = lsm.rescale_time(pendulum_family)
    dyn = scaled.dyn
    for j in (0, 6, 11):
        o = pendulum_family.orbits[j]
        T = lsm.period_by_crossing(dyn, o.section_point if o.section_point is not None else o.initial_point,
                                   dyn.T0)
        assert T == pytest.approx(dyn.T0, rel=1e-7)
    with pytest.raises(ValueError):
        scaled.factor(2 * pendulum_family.energies[-1])


def test_rescaled_time_is_identity_for_linear_flow(linear_family):
    scaled = lsm.rescale_time(linear_family)
    E = np.linspace(0, linear_family.energies[-1], 7)
    np.testing.assert_allclose(scaled.factor(E), 1.0, atol=1e-10)


def test_rescaled_field_keeps_energy(pendulum_family, rng):
    dyn = lsm.rescale_time(pendulum_family).dyn
    u = rng.normal(size=(200, 4)) * 0.01
    gE = lsm._grad_energy(dyn, u[0])
    vals = [lsm._grad_energy(dyn, p) @ dyn.field(p) for p in u]
    assert np.max(np.abs(vals)) < 1e-12 * np.linalg.norm(gE) * 1e2


def test_adapted_chart(pendulum_family, rng):
    fam = pendulum_family
    chart = lsm.adapted_chart(fam)
    # the chart reproduces the orbit samples
    th = 2 * np.pi * np.arange(fam.M) / fam.M
    j = 4
    z = np.stack([fam.grid[j] * np.cos(th), fam.grid[j] * np.sin(th)], axis=-1)
    np.testing.assert_allclose(chart(z), fam.orbits[j].samples, atol=1e-9 * fam.grid[j] + 1e-13)
    # round trip
    pts = rng.uniform(-0.03, 0.03, size=(20, 2))
    y = rng.normal(size=(20, 2)) * 1e-3
    x2, y2 = chart.inverse(chart(pts, y))
    np.testing.assert_allclose(x2, pts, atol=1e-12)
    np.testing.assert_allclose(y2, y, atol=1e-12)
    assert chart.fold_margin(pts) > 0.5
    # the reduced rotation at the linear frequency near the origin
    R = chart.R0(np.array([1e-4, 0.0]))
    assert R[1] / 1e-4 == pytest.approx(fam.dyn.omega0, rel=1e-5)


def test_adapted_chart_needs_mode_labels(pendulum_spec):
    fam = lsm.build_family(pendulum_spec, lsm.default_radii(4, 0.05), M=16, amplitude="section")
    with pytest.raises(ValueError):
        lsm.adapted_chart(fam)
