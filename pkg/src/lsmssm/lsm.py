"""Lyapunov subcenter manifold: periodic-orbit family, Floquet data, chart.

All states here live in normalized coordinates u = S^{-1} x, where the
columns of S are the real basis from ``spectral.decompose``: the first two
span the Lyapunov plane and L acts there as the rotation [[0, -w0], [w0, 0]].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import spectral
from .grid import DiskFunction, GridFunction, RadialFunction, angles, chebyshev_radii
from .system_model import (IntegrationError, SystemSpec, eval_conserved, eval_field, eval_hessian,
                           eval_jacobian, integrate)

NEWTON_MAX = 50


class NewtonError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


class SectionError(RuntimeError):
    pass


class FloquetGateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dynamics in normalized coordinates

class Dynamics:
    """F_eps pulled back to normalized coordinates, optionally time-scaled.

    ``time_factor`` is an optional pair (c(E), dc/dE) of callables of the
    conserved quantity; the scaled field is c(E(x)) F(x).
    """

    def __init__(self, spec: SystemSpec, S: np.ndarray, omega0: float, eps: complex = 0.0,
                 time_factor=None):
        self.spec = spec
        self.S = np.asarray(S, dtype=float)
        self.Sinv = np.linalg.inv(self.S)
        self.omega0 = float(omega0)
        self.eps = eps
        self.time_factor = time_factor

    @classmethod
    def from_spec(cls, spec: SystemSpec, eps: complex = 0.0, pair=None) -> "Dynamics":
        sd = spectral.decompose(spec.L, pair)
        if not sd.has_pair or sd.basis is None:
            raise ValueError("system has no semisimple elliptic pair")
        return cls(spec, sd.basis, sd.omega0, eps)

    def with_eps(self, eps) -> "Dynamics":
        return Dynamics(self.spec, self.S, self.omega0, eps, self.time_factor)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def T0(self) -> float:
        return 2 * math.pi / self.omega0

    def to_physical(self, u):
        return np.asarray(u) @ self.S.T

    def to_normal(self, x):
        return np.asarray(x) @ self.Sinv.T

    def _factor(self, x):
        if self.time_factor is None:
            return None, None
        c, dc = self.time_factor
        E = np.real(eval_conserved(self.spec, x))
        return c(E), dc(E)

    def field(self, u):
        x = self.to_physical(u)
        f = eval_field(self.spec, x, self.eps) @ self.Sinv.T
        c, _ = self._factor(x)
        return f if c is None else c[..., None] * f

    def jacobian(self, u):
        x = self.to_physical(u)
        J = self.Sinv @ eval_jacobian(self.spec, x, self.eps) @ self.S
        c, dc = self._factor(x)
        if c is None:
            return J
        f = eval_field(self.spec, x, self.eps) @ self.Sinv.T
        from .system_model import grad_conserved
        gE = grad_conserved(self.spec, x) @ self.S
        return c[..., None, None] * J + (dc[..., None] * f)[..., :, None] * gE[..., None, :]

    def hessian(self, u):
        if self.time_factor is not None:
            raise NotImplementedError("second derivatives of the time-scaled field")
        x = self.to_physical(u)
        H = eval_hessian(self.spec, x, self.eps)
        return np.einsum("ai,...ijk,jb,kc->...abc", self.Sinv, H, self.S, self.S)

    def energy(self, u):
        return np.real(eval_conserved(self.spec, self.to_physical(u)))


def propagate(dyn: Dynamics, u0, t: float, tol: float = 1e-12, variational: bool = False,
              t_eval=None, periods=None):
    """Flow in normalized coordinates.

    With ``periods`` (one per batch member) the integration runs in scaled
    time tau in [0, t] with du/dtau = T_b F(u), so trajectories with
    different periods share one call.
    """
    u0 = np.asarray(u0)
    n = dyn.n
    batch = u0.shape[:-1]
    Tb = None if periods is None else np.asarray(periods, dtype=float).reshape(batch + (1,))
    cplx = np.iscomplexobj(u0) or np.iscomplexobj(dyn.eps)
    dtype = complex if cplx else float
    if variational:
        eye = np.broadcast_to(np.eye(n), batch + (n, n)).reshape(batch + (n * n,))
        y0 = np.concatenate([u0, eye], axis=-1).astype(dtype)
    else:
        y0 = u0.astype(dtype)
    shape = y0.shape
    box = dyn.spec.box_radius

    def rhs(_t, y):
        y = y.reshape(shape)
        u = y[..., :n]
        if np.isfinite(box) and np.max(np.abs(u)) > box:
            from .system_model import BoxExitError
            raise BoxExitError(float(_t), box)
        f = dyn.field(u)
        if Tb is not None:
            f = Tb * f
        if not variational:
            return f.reshape(-1)
        P = y[..., n:].reshape(batch + (n, n))
        J = dyn.jacobian(u)
        if Tb is not None:
            J = Tb[..., None] * J
        return np.concatenate([f, (J @ P).reshape(batch + (n * n,))], axis=-1).reshape(-1)

    # absolute tolerance per batch member, so small states keep their relative accuracy
    size = np.linalg.norm(np.abs(u0), axis=-1, keepdims=True)
    size = np.maximum(size, 1e-6 * max(float(size.max(initial=0.0)), 1e-14))
    atol = np.broadcast_to(tol * size, shape).copy()
    if variational:
        atol[..., n:] = tol
    ts, ys, _ = integrate(rhs, y0, t, tol, t_eval=t_eval, atol=atol.reshape(-1))
    ys = ys.reshape((len(ts),) + shape)
    if variational:
        return ts, ys[..., :n], ys[..., n:].reshape(ys.shape[:-1] + (n, n))
    return ts, ys, None


# ---------------------------------------------------------------------------
# single orbits

@dataclass
class PeriodicOrbit:
    rho0: float
    initial_point: np.ndarray
    period: float
    energy: float
    monodromy: np.ndarray
    samples: np.ndarray | None = None       # (M, n) at t_m = m T / M
    fundamental: np.ndarray | None = None   # (M, n, n) Phi(t_m; 0)
    residual: float = 0.0
    iterations: int = 0
    amplitude: float | None = None          # first-harmonic amplitude |c_1|
    section_speed: float = 0.0
    section_point: np.ndarray | None = None

    @property
    def M(self) -> int:
        return 0 if self.samples is None else self.samples.shape[0]

    @property
    def frequency(self) -> float:
        return 2 * math.pi / self.period


def _section_newton(dyn: Dynamics, p0: np.ndarray, T0, free_label: bool, tol: float,
                    max_iter: int = NEWTON_MAX):
    """Gauss-Newton on phi_T(p) = p with p on {u1 = 0}, batched over leading axis.

    Unknowns are u2..un (u2 only when ``free_label``) and T.  Every member
    is iterated until its own update is below 1e-12 relative.
    """
    n = dyn.n
    p = np.array(np.atleast_2d(p0), dtype=float)
    p[:, 0] = 0.0
    T = np.array(np.broadcast_to(T0, p.shape[:1]), dtype=float)
    cols = list(range(1 if free_label else 2, n))
    done = np.zeros(len(p), dtype=bool)
    res = np.full(len(p), np.inf)
    iters = np.zeros(len(p), dtype=int)
    for it in range(1, max_iter + 1):
        act = np.where(~done)[0]
        if len(act) == 0:
            break
        _, ys, Ps = propagate(dyn, p[act], 1.0, tol=tol, variational=True, periods=T[act])
        end, Phi = ys[-1], Ps[-1]
        r = end - p[act]
        res[act] = np.linalg.norm(r, axis=1)
        f = dyn.field(end)
        for q, j in enumerate(act):
            A = np.column_stack([(Phi[q] - np.eye(n))[:, cols], f[q]])
            step, *_ = np.linalg.lstsq(A, -r[q], rcond=None)
            p[j, cols] += step[:-1]
            T[j] += step[-1]
            iters[j] = it
            if np.linalg.norm(step) < 1e-12 * max(1.0, np.linalg.norm(p[j])):
                done[j] = True
    if not done.all():
        raise NewtonError("section Newton did not converge", float(res[~done].max()))
    _, ys, Ps = propagate(dyn, p, 1.0, tol=tol, variational=True, periods=T)
    res = np.linalg.norm(ys[-1] - p, axis=1)
    return p, T, Ps[-1], res, iters


def continue_orbit(spec_or_dyn, rho0: float, seed: PeriodicOrbit | None = None, tol: float = 1e-12,
                   samples: int = 0) -> PeriodicOrbit:
    """Periodic orbit through (0, rho0, y) on the section {u1 = 0, u2 > 0}."""
    dyn = spec_or_dyn if isinstance(spec_or_dyn, Dynamics) else Dynamics.from_spec(spec_or_dyn)
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    return continue_orbits(dyn, [rho0], None if seed is None else [seed], tol, samples)[0]


def continue_orbits(dyn: Dynamics, labels, seeds=None, tol: float = 1e-12, samples: int = 0) -> list[PeriodicOrbit]:
    labels = np.asarray(labels, dtype=float)
    n = dyn.n
    if seeds is None:
        # scaled seeding: the linear rotation of the same amplitude
        p0 = np.zeros((len(labels), n))
        T0 = np.full(len(labels), dyn.T0)
    else:
        p0 = np.stack([s.initial_point if s.initial_point[0] == 0 else s.section_point for s in seeds])
        T0 = np.array([s.period for s in seeds])
    p0[:, 1] = labels
    try:
        p, T, Phi, res, its = _section_newton(dyn, p0, T0, False, tol)
    except (NewtonError, IntegrationError):
        if seeds is not None or labels.max() < 1e-3:
            raise
        # walk up from half the amplitude
        half = continue_orbits(dyn, labels / 2, None, tol)
        return continue_orbits(dyn, labels, half, tol, samples)
    speed = dyn.field(p)[:, 0]
    if np.any(np.abs(speed) < 1e-8):
        raise SectionError("flow tangent to the section")
    E = dyn.energy(p) if dyn.spec.I is not None else np.full(len(p), np.nan)
    out = [PeriodicOrbit(float(labels[j]), p[j].copy(), float(T[j]), float(E[j]), Phi[j], residual=float(res[j]),
                         iterations=int(its[j]), section_speed=float(speed[j]), section_point=p[j].copy())
           for j in range(len(labels))]
    if samples:
        sample_orbits(dyn, out, samples, tol)
    return out


def sample_orbits(dyn: Dynamics, orbits: list[PeriodicOrbit], M: int, tol: float = 1e-12):
    """Fill in M time samples, fundamental matrices and the first-harmonic amplitude."""
    P = np.stack([o.initial_point for o in orbits])
    T = np.array([o.period for o in orbits])
    t_eval = np.arange(M + 1) / M
    _, ys, Ps = propagate(dyn, P, 1.0, tol=tol, variational=True, t_eval=t_eval, periods=T)
    for j, o in enumerate(orbits):
        o.samples = ys[:M, j]
        o.fundamental = Ps[:M, j]
        o.monodromy = Ps[M, j]
        o.residual = float(np.linalg.norm(ys[M, j] - o.initial_point))
        o.amplitude = abs(first_harmonic(o))
    return orbits


def sample_orbit(dyn: Dynamics, orbit: PeriodicOrbit, M: int, tol: float = 1e-12) -> PeriodicOrbit:
    return sample_orbits(dyn, [orbit], M, tol)[0]


def first_harmonic(orbit: PeriodicOrbit) -> complex:
    M = orbit.M
    return complex(np.mean((orbit.samples[:, 0] + 1j * orbit.samples[:, 1]) * np.exp(-2j * np.pi * np.arange(M) / M)))


def phase_normalize(dyn: Dynamics, orbits: list[PeriodicOrbit], tol: float = 1e-12) -> list[PeriodicOrbit]:
    """Shift time origins so the first harmonic of u1 + i u2 is real and positive."""
    shifts = []
    for o in orbits:
        c1 = first_harmonic(o)
        shifts.append((-math.atan2(c1.imag, c1.real) / o.frequency) % o.period)
    shifts = np.array(shifts)
    P = np.stack([o.initial_point for o in orbits])
    _, ys, _ = propagate(dyn, P, 1.0, tol=tol, periods=np.maximum(shifts, 1e-300))
    out = []
    for j, o in enumerate(orbits):
        start = ys[-1, j] if shifts[j] > 0 else o.initial_point
        out.append(PeriodicOrbit(o.rho0, start.copy(), o.period, o.energy, o.monodromy,
                                 residual=o.residual, iterations=o.iterations,
                                 section_speed=o.section_speed, section_point=o.section_point))
    return sample_orbits(dyn, out, orbits[0].M, tol)


def orbits_at_amplitude(dyn: Dynamics, amplitudes, M: int, tol: float = 1e-12,
                        max_iter: int = 30) -> list[PeriodicOrbit]:
    """Orbits whose first harmonic has the given moduli (batched secant on the section label)."""
    amps = np.asarray(amplitudes, dtype=float)
    x0 = amps.copy()
    o0 = continue_orbits(dyn, x0, None, tol, samples=M)
    f0 = np.array([o.amplitude for o in o0]) - amps
    x1 = x0 * amps / (f0 + amps)
    o1 = continue_orbits(dyn, x1, o0, tol, samples=M)
    f1 = np.array([o.amplitude for o in o1]) - amps
    for _ in range(max_iter):
        if np.all(np.abs(f1) <= 1e-14 * amps):
            return phase_normalize(dyn, o1, tol)
        denom = np.where(f1 != f0, f1 - f0, 1.0)
        x2 = np.where(f1 != f0, x1 - f1 * (x1 - x0) / denom, x1)
        x0, f0, o0 = x1, f1, o1
        x1 = x2
        o1 = continue_orbits(dyn, x1, o0, tol, samples=M)
        f1 = np.array([o.amplitude for o in o1]) - amps
        if np.all(x1 == x0):
            return phase_normalize(dyn, o1, tol)
    raise NewtonError("amplitude secant did not converge", float(np.abs(f1).max()))


def orbit_at_amplitude(dyn: Dynamics, amplitude: float, M: int, tol: float = 1e-12) -> PeriodicOrbit:
    return orbits_at_amplitude(dyn, [amplitude], M, tol)[0]


def locate_cycle(spec_or_dyn, rho_guess: float, tol: float = 1e-12, period_guess: float | None = None):
    """Isolated periodic orbit with the section label left free; returns orbit and Floquet exponents."""
    dyn = spec_or_dyn if isinstance(spec_or_dyn, Dynamics) else Dynamics.from_spec(spec_or_dyn)
    p0 = np.zeros(dyn.n)
    p0[1] = rho_guess
    p, T, Phi, res, it = _section_newton(dyn, p0, period_guess or dyn.T0, True, tol)
    p, T, Phi = p[0], float(T[0]), Phi[0]
    orbit = PeriodicOrbit(float(p[1]), p, T, float(dyn.energy(p)) if dyn.spec.I is not None else float("nan"),
                          Phi, residual=float(res[0]), iterations=int(it[0]), section_point=p.copy())
    mult = np.linalg.eigvals(Phi)
    trivial = int(np.argmin(np.abs(mult - 1)))
    rest = np.delete(mult, trivial)
    exps = np.log(np.abs(rest)) / T
    return orbit, rest, exps


# ---------------------------------------------------------------------------
# family

@dataclass
class OrbitFamily:
    dyn: Dynamics
    grid: np.ndarray
    orbits: list[PeriodicOrbit]
    Omega: np.ndarray
    floquet_A: list[np.ndarray]
    floquet_B: list[np.ndarray]
    reducibility: list[np.ndarray]
    delta: float
    beta: float | None = None
    amplitude_mode: str = "mode"
    notes: list[str] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.orbits[0].M

    @property
    def periods(self) -> np.ndarray:
        return np.array([o.period for o in self.orbits])

    @property
    def energies(self) -> np.ndarray:
        return np.array([o.energy for o in self.orbits])

    def omega_function(self) -> RadialFunction:
        return RadialFunction.fit(self.grid, self.Omega, self.delta)

    def samples(self) -> np.ndarray:
        """States on the (radius, angle) grid, shape (J, M, n)."""
        return np.stack([o.samples for o in self.orbits])

    def fundamentals(self) -> np.ndarray:
        return np.stack([o.fundamental for o in self.orbits])

    def K0_grid(self) -> GridFunction:
        return GridFunction(self.grid, self.samples())

    def floquet_multipliers(self, j: int) -> np.ndarray:
        return np.linalg.eigvals(self.floquet_A[j])


def _floquet_blocks(dyn: Dynamics, orbit: PeriodicOrbit, dp_drho: np.ndarray):
    n = dyn.n
    f = dyn.field(orbit.initial_point)
    basis = np.column_stack([f, dp_drho, np.eye(n)[:, 2:]])
    Mb = np.linalg.solve(basis, orbit.monodromy @ basis)
    T11, B, A = Mb[:2, :2], Mb[:2, 2:], Mb[2:, 2:]
    # block diagonalizing transform: T11 Q - Q A = -B
    Q = sla.solve_sylvester(T11, -A, -B) if n > 2 else np.zeros((2, 0))
    return A, B, Q, Mb


def build_family(spec_or_dyn, radii, M: int = 256, tol: float = 1e-12, amplitude: str = "mode",
                 beta: bool = False, check_floquet: bool = True) -> OrbitFamily:
    """Continue the Lyapunov family over increasing radii with warm starts.

    ``amplitude='mode'`` labels orbits by the first-harmonic amplitude and
    puts the time origin where that harmonic is real; ``'section'`` uses the
    section coordinate u2 as label and the section crossing as origin.
    """
    dyn = spec_or_dyn if isinstance(spec_or_dyn, Dynamics) else Dynamics.from_spec(spec_or_dyn)
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ValueError("radii must be positive and increasing")
    if amplitude == "mode":
        orbits = orbits_at_amplitude(dyn, radii, M, tol)
    elif amplitude == "section":
        orbits = continue_orbits(dyn, radii, None, tol, samples=M)
    else:
        raise ValueError("amplitude must be 'mode' or 'section'")
    Omega = np.array([o.frequency for o in orbits])
    As, Bs, Qs, notes = [], [], [], []
    n = dyn.n
    for j, o in enumerate(orbits):
        dp = lsm_tangent(dyn, o)
        A, B, Q, _ = _floquet_blocks(dyn, o, dp)
        As.append(A)
        Bs.append(B)
        Qs.append(Q)
        if n > 2:
            ev = np.linalg.eigvals(A)
            if np.min(np.abs(ev - 1)) < 1e-6:
                notes.append(f"Floquet eigenvalue within 1e-6 of 1 at radius {radii[j]:.6g}")
            if check_floquet and dyn.spec.hamiltonian and np.max(np.abs(np.abs(ev) - 1)) > 1e-6:
                notes.append(f"Floquet eigenvalue off the unit circle at radius {radii[j]:.6g}")
    fam = OrbitFamily(dyn, radii, orbits, Omega, As, Bs, Qs, float(radii[-1]), amplitude_mode=amplitude,
                      notes=notes)
    if beta:
        fam.beta = estimate_beta(fam)
    return fam


def lsm_tangent(dyn: Dynamics, orbit: PeriodicOrbit) -> np.ndarray:
    """Tangent of the LSM at the initial point transverse to the flow.

    The tangent plane is the generalized unit eigenspace of the monodromy,
    i.e. the kernel of (Phi - I)^2.
    """
    n = dyn.n
    f = dyn.field(orbit.initial_point)
    D = orbit.monodromy - np.eye(n)
    _, _, vt = np.linalg.svd(D @ D)
    plane = vt[-2:].T
    w = plane[:, 0] if abs(plane[:, 0] @ f) < abs(plane[:, 1] @ f) else plane[:, 1]
    w = w - (w @ f) / (f @ f) * f
    gE = _grad_energy(dyn, orbit.initial_point)
    if gE @ w < 0:
        w = -w
    return w / np.linalg.norm(w)


def _grad_energy(dyn: Dynamics, u):
    from .system_model import grad_conserved
    if dyn.spec.I is None:
        return np.eye(dyn.n)[1]
    return np.real(grad_conserved(dyn.spec, dyn.to_physical(u))) @ dyn.S


def period_by_crossing(dyn: Dynamics, p: np.ndarray, T_guess: float, tol: float = 1e-12) -> float:
    """First return time to {u1 = 0, u1 decreasing} by direct integration and bisection."""
    t_eval = np.linspace(0.5 * T_guess, 1.5 * T_guess, 401)
    _, ys, _ = propagate(dyn, p, 1.5 * T_guess, tol=tol, t_eval=t_eval)
    u1 = ys[:, 0]
    idx = np.where((u1[:-1] > 0) & (u1[1:] <= 0))[0]
    if len(idx) == 0:
        raise SectionError("no return crossing found")
    a, b = t_eval[idx[0]], t_eval[idx[0] + 1]
    for _ in range(80):
        mid = 0.5 * (a + b)
        _, y, _ = propagate(dyn, p, mid, tol=tol)
        if y[-1, 0] > 0:
            a = mid
        else:
            b = mid
        if b - a < 1e-14 * T_guess:
            break
    return 0.5 * (a + b)


def estimate_beta(fam: OrbitFamily, n_radii: int = 5, n_phases: int = 4, safety: float = 0.2) -> float:
    """Bound on |D_y D phi^{-T0}| along the LSM from second variational equations."""
    dyn = fam.dyn
    n = dyn.n
    if n <= 2:
        return 0.0
    idx = np.unique(np.linspace(0, len(fam.grid) - 1, n_radii).round().astype(int))
    pts = []
    for j in idx:
        o = fam.orbits[j]
        for q in range(n_phases):
            pts.append(o.samples[(q * o.M) // n_phases])
    pts = np.array(pts)
    second = second_variation(dyn, pts, -dyn.T0)
    best = 0.0
    for Psi in second:
        # Psi[a, b, c] = d^2 phi_a / du_b du_c ; take c over transverse directions
        blocks = [Psi[:, :, c] for c in range(2, n)]
        bound = math.sqrt(sum(np.linalg.norm(b, 2) ** 2 for b in blocks))
        best = max(best, bound)
    return best * (1 + safety)


def second_variation(dyn: Dynamics, u0, t: float, tol: float = 1e-11) -> np.ndarray:
    """Second derivatives of the time-t map at a batch of points, shape (B, n, n, n)."""
    u0 = np.atleast_2d(u0)
    Bn, n = u0.shape
    y0 = np.concatenate([u0, np.broadcast_to(np.eye(n).reshape(-1), (Bn, n * n)), np.zeros((Bn, n ** 3))], axis=1)

    def rhs(_t, y):
        y = y.reshape(Bn, -1)
        u = y[:, :n]
        P = y[:, n:n + n * n].reshape(Bn, n, n)
        Q = y[:, n + n * n:].reshape(Bn, n, n, n)
        f = dyn.field(u)
        J = dyn.jacobian(u)
        H = dyn.hessian(u)
        dP = J @ P
        dQ = np.einsum("bij,bjkl->bikl", J, Q) + np.einsum("bijk,bjl,bkm->bilm", H, P, P)
        return np.concatenate([f, dP.reshape(Bn, -1), dQ.reshape(Bn, -1)], axis=1).reshape(-1)

    sign = 1.0 if t >= 0 else -1.0

    def rhs_signed(_t, y):
        return sign * rhs(_t, y)

    atol = np.full(y0.shape, tol)
    atol[:, :n] = tol * max(np.abs(u0).max(), 1e-14)
    _, ys, _ = integrate(rhs_signed, y0, abs(t), tol, atol=atol.reshape(-1))
    return ys[-1].reshape(Bn, -1)[:, n + n * n:].reshape(Bn, n, n, n)


# ---------------------------------------------------------------------------
# time rescaling and the adapted chart

@dataclass
class ScaledSystem:
    dyn: Dynamics
    factor_of_energy: np.polynomial.Chebyshev
    energy_range: tuple[float, float]

    def factor(self, E):
        E = np.asarray(E)
        lo, hi = self.energy_range
        if np.any(E > hi * (1 + 1e-9) + 1e-300) or np.any(E < -1e-12 * max(hi, 1e-300)):
            raise ValueError("energy outside the interpolated frequency range")
        return self.factor_of_energy(E)


def rescale_time(fam: OrbitFamily) -> ScaledSystem:
    """Field (w0 / Omega(E)) F with Omega interpolated in the energy, so every orbit has period 2 pi / w0."""
    dyn = fam.dyn
    if np.any(fam.Omega <= 0):
        raise ValueError("non-positive frequency on the grid")
    E = np.concatenate([[0.0], fam.energies])
    Om = np.concatenate([[dyn.omega0], fam.Omega])
    deg = min(len(E) - 1, 12)
    poly = np.polynomial.Chebyshev.fit(E, dyn.omega0 / Om, deg, domain=[0.0, float(E.max())])
    dpoly = poly.deriv()
    scaled = Dynamics(dyn.spec, dyn.S, dyn.omega0, dyn.eps, time_factor=(poly, dpoly))
    return ScaledSystem(scaled, poly, (0.0, float(E.max())))


@dataclass
class AdaptedChart:
    """(x, y) -> K0(x) + V2 y with K0 the fitted LSM parameterization."""

    K0: DiskFunction
    Omega: RadialFunction
    n: int

    def __call__(self, x, y=None):
        base = self.K0(x)
        if y is None:
            return base
        y = np.asarray(y)
        pad = np.zeros(base.shape[:-1] + (2,), dtype=y.dtype)
        return base + np.concatenate([pad, y], axis=-1)

    def inverse(self, u, iters: int = 20):
        """(x, y) with chart(x, y) = u, by Newton on the planar part."""
        u = np.asarray(u)
        x = u[..., :2].copy()
        for _ in range(iters):
            r = self.K0(x)[..., :2] - u[..., :2]
            J = self.K0.jacobian(x)[..., :2, :2]
            dx = np.linalg.solve(J, r[..., None])[..., 0]
            x = x - dx
            if np.max(np.abs(dx)) < 1e-15:
                break
        y = u[..., 2:] - self.K0(x)[..., 2:]
        return x, y

    def fold_margin(self, pts) -> float:
        J = self.K0.jacobian(pts)[..., :2, :2]
        return float(np.min(np.abs(np.linalg.det(J))))

    def R0(self, z):
        z = np.asarray(z)
        s = z[..., 0] ** 2 + z[..., 1] ** 2
        w = self.Omega(s)
        return np.stack([-w * z[..., 1], w * z[..., 0]], axis=-1)


def fit_lsm(fam: OrbitFamily, degree: int = 16) -> DiskFunction:
    return DiskFunction.fit(fam.K0_grid(), fam.delta, degree)


def adapted_chart(fam: OrbitFamily, degree: int = 16) -> AdaptedChart:
    if fam.amplitude_mode != "mode":
        raise ValueError("the chart needs the first-harmonic parameterization")
    K0 = fit_lsm(fam, degree)
    th = angles(32)
    pts = np.stack([fam.grid[:, None] * np.cos(th), fam.grid[:, None] * np.sin(th)], axis=-1)
    chart = AdaptedChart(K0, fam.omega_function(), fam.dyn.n)
    if chart.fold_margin(pts) < 1e-6:
        raise FloquetGateError("chart fold: planar Jacobian determinant below 1e-6")
    return chart


def default_radii(J: int, delta: float) -> np.ndarray:
    return chebyshev_radii(J, delta)
