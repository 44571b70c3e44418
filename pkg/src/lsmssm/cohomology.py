"""Periodic solutions of u' = A(t) u + f(t) along the Lyapunov orbits.

Two independent routes:

* ``solve_bvp``: variation of parameters, integrating the forced
  variational equation alongside the orbit;
* ``solve_fourier``: Floquet reduction u = P(t) v with v' = B v + P^{-1} f,
  then mode-by-mode resolvent inversion.

Both solve jointly for the two scalars (a, b) multiplying the tangent
forcings d_rho K0 and d_theta K0, which removes the energy obstruction and
the period shear, and fix the two-dimensional homogeneous freedom by the
averaged gauge conditions <u, d_theta K0> = 0 and <u, rho d_rho K0> = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .lsm import OrbitFamily, _grad_energy
from .system_model import integrate

COND_MAX = 1e8


class CohomologyError(RuntimeError):
    pass


@dataclass
class Forcing:
    """Samples of the forcing and the two tangent fields at t_m = m T_j / M, shape (J, M, n)."""

    eta: np.ndarray
    d_rho: np.ndarray
    d_theta: np.ndarray


@dataclass
class CohomologySolution:
    u: np.ndarray       # (J, M, n) samples of the periodic solution
    a: np.ndarray       # (J,) radial coefficient
    b: np.ndarray       # (J,) angular coefficient
    u0: np.ndarray      # (J, n)
    condition: np.ndarray
    periodicity_defect: np.ndarray


# ---------------------------------------------------------------------------
# Floquet frames

@dataclass
class FloquetFrame:
    B: list[np.ndarray]          # per radius, Phi(T) = exp(T B)
    P: np.ndarray                # (J, M, n, n) periodic factor at the samples
    branches: list[np.ndarray]   # integer branch shifts of the transverse log-eigenvalues

    def reduced(self, j: int) -> np.ndarray:
        return self.B[j]

    def periodicity_defect(self, family: OrbitFamily) -> float:
        out = 0.0
        for j, o in enumerate(family.orbits):
            PT = o.monodromy @ sla.expm(-o.period * self.B[j])
            out = max(out, float(np.abs(PT - self.P[j, 0]).max()))
        return out


def _branch_log(Phi: np.ndarray, T: float, prev: np.ndarray | None):
    """Real logarithm of the monodromy divided by T, with transverse branches tracked."""
    Lg = sla.logm(Phi)
    if np.iscomplexobj(Lg):
        if np.abs(Lg.imag).max() > 1e-8 * max(1.0, np.abs(Lg).max()):
            raise CohomologyError("monodromy has no real logarithm (negative real multiplier)")
        Lg = Lg.real
    B = Lg / T
    shifts = np.zeros(0, dtype=int)
    if prev is None:
        return B, shifts
    # eigenvalues of B away from zero are simple; shift their imaginary parts by 2 pi k / T
    vals, vecs = np.linalg.eig(B)
    pvals = np.linalg.eigvals(prev)
    keep = np.abs(vals) > 1e-6 * max(1.0, np.abs(vals).max())
    if not keep.any():
        return B, shifts
    inv = np.linalg.inv(vecs)
    shifts = []
    corr = np.zeros_like(B, dtype=complex)
    for i in np.where(keep)[0]:
        cands = [vals[i] + 2j * np.pi * m / T for m in (-1, 0, 1)]
        best = min(range(3), key=lambda q: np.min(np.abs(pvals - cands[q])))
        m = best - 1
        shifts.append(m)
        if m:
            corr += (2j * np.pi * m / T) * np.outer(vecs[:, i], inv[i])
    B = (B + corr).real if np.abs(corr.imag).max(initial=0) > 0 else B + corr.real
    return B, np.array(shifts)


def floquet_frame(family: OrbitFamily) -> FloquetFrame:
    J, M = len(family.orbits), family.M
    n = family.dyn.n
    Bs, brs = [], []
    P = np.empty((J, M, n, n))
    prev = None
    for j, o in enumerate(family.orbits):
        B, br = _branch_log(o.monodromy, o.period, prev)
        prev = B
        Bs.append(B)
        brs.append(br)
        t = o.period * np.arange(M) / M
        for m in range(M):
            P[j, m] = o.fundamental[m] @ sla.expm(-t[m] * B)
    return FloquetFrame(Bs, P, brs)


# ---------------------------------------------------------------------------
# tangent fields and obstruction

def tangent_forcings(family: OrbitFamily, K0_disk=None) -> tuple[np.ndarray, np.ndarray]:
    """d_rho K0 and d_theta K0 at the grid points, shape (J, M, n) each."""
    from .lsm import fit_lsm
    dyn = family.dyn
    X = family.samples()
    d_theta = dyn.field(X) / family.Omega[:, None, None]
    K0 = fit_lsm(family) if K0_disk is None else K0_disk
    th = 2 * np.pi * np.arange(family.M) / family.M
    z = np.stack([family.grid[:, None] * np.cos(th), family.grid[:, None] * np.sin(th)], axis=-1)
    D = K0.jacobian(z)
    d_rho = D[..., 0] * np.cos(th)[None, :, None] + D[..., 1] * np.sin(th)[None, :, None]
    return np.real(d_rho), d_theta


def obstruction(eta: np.ndarray, family: OrbitFamily, j: int, via: str = "propagator") -> float:
    """Energy component of int_0^T Phi(T, s) eta(s) ds at radius j.

    ``via='propagator'`` pairs the left null vector grad E(p) with the
    propagated integral; ``via='gradient'`` integrates grad E(x(s)) . eta(s)
    directly.  Both vanish exactly when the forcing is solvable.
    """
    o = family.orbits[j]
    dyn = family.dyn
    M = o.M
    dt = o.period / M
    if via == "gradient":
        gE = _grad_energy_batch(dyn, o.samples)
        return float(np.sum(np.einsum("mi,mi->m", gE, eta)) * dt)
    PhiT = o.monodromy
    D = PhiT - np.eye(dyn.n)
    _, sv, _ = np.linalg.svd(D @ D)
    if dyn.n > 2 and sv[-3] < 1e-8 * max(1.0, sv[0]):
        raise CohomologyError(f"unit-eigenvalue space of the monodromy is not two-dimensional at radius {j}")
    ell = _grad_energy(dyn, o.initial_point)
    # Phi(T, s) = Phi(T) Phi(s)^{-1}
    vals = np.stack([PhiT @ np.linalg.solve(o.fundamental[m], eta[m]) for m in range(M)])
    return float(ell @ vals.sum(axis=0) * dt)


def _grad_energy_batch(dyn, X):
    from .system_model import grad_conserved
    return np.real(grad_conserved(dyn.spec, dyn.to_physical(X))) @ dyn.S


# ---------------------------------------------------------------------------
# joint solve shared by both routes

def _joint(PhiT, w_eta, w_rho, w_th, gauge_u0, gauge_eta, gauge_rho, gauge_th):
    """Solve (PhiT - I) u0 + w_eta - a w_rho - b w_th = 0 with two gauge rows."""
    n = PhiT.shape[0]
    A = np.zeros((n + 2, n + 2))
    rhs = np.zeros(n + 2)
    A[:n, :n] = PhiT - np.eye(n)
    A[:n, n] = -w_rho
    A[:n, n + 1] = -w_th
    rhs[:n] = -w_eta
    A[n:, :n] = gauge_u0
    A[n:, n] = -gauge_rho
    A[n:, n + 1] = -gauge_th
    rhs[n:] = -gauge_eta
    cond = np.linalg.cond(A)
    if cond > COND_MAX:
        raise CohomologyError(f"ill-conditioned periodic solve (condition {cond:.3e})")
    x = np.linalg.solve(A, rhs)
    return x[:n], x[n], x[n + 1], cond


def _gauge_fields(forcing: Forcing, family: OrbitFamily):
    return forcing.d_theta, family.grid[:, None, None] * forcing.d_rho


def solve_bvp(forcing: Forcing, family: OrbitFamily, tol: float = 1e-12, correct: bool = True) -> CohomologySolution:
    """Variation of parameters with trigonometric interpolation of the forcings."""
    dyn = family.dyn
    J, M, n = forcing.eta.shape
    T = family.periods
    X0 = np.stack([o.initial_point for o in family.orbits])
    F = np.stack([forcing.eta, forcing.d_rho, forcing.d_theta], axis=2)  # (J, M, 3, n)
    Fh = np.fft.rfft(F, axis=1) / M  # (J, M//2+1, 3, n)
    ks = np.arange(Fh.shape[1])
    wts = np.where((ks == 0) | ((M % 2 == 0) & (ks == M // 2)), 1.0, 2.0)
    Fh = Fh * wts[None, :, None, None]

    def forcing_at(tau):
        return np.real(np.einsum("k,jkfn->jfn", np.exp(2j * np.pi * ks * tau), Fh))

    shape = (J, n + n * n + 3 * n)

    def rhs(tau, y):
        y = y.reshape(shape)
        x = y[:, :n]
        Phi = y[:, n:n + n * n].reshape(J, n, n)
        W = y[:, n + n * n:].reshape(J, 3, n)
        Jx = dyn.jacobian(x)
        f = forcing_at(tau)
        dx = T[:, None] * dyn.field(x)
        dPhi = T[:, None, None] * (Jx @ Phi)
        dW = T[:, None, None] * (np.einsum("jab,jfb->jfa", Jx, W) + f)
        return np.concatenate([dx, dPhi.reshape(J, -1), dW.reshape(J, -1)], axis=1).reshape(-1)

    y0 = np.concatenate([X0, np.broadcast_to(np.eye(n).reshape(-1), (J, n * n)), np.zeros((J, 3 * n))], axis=1)
    atol = np.full(shape, tol)
    atol[:, :n] = tol * np.abs(X0).max()
    atol[:, n + n * n:] = tol * max(np.abs(F).max(), 1e-300) * T.max()
    _, ys, _ = integrate(rhs, y0, 1.0, tol, t_eval=np.arange(M + 1) / M, atol=atol.reshape(-1))
    ys = ys.reshape(M + 1, J, -1)
    Phi = ys[:, :, n:n + n * n].reshape(M + 1, J, n, n)
    W = ys[:, :, n + n * n:].reshape(M + 1, J, 3, n)
    g_th, g_rho = _gauge_fields(forcing, family)
    u = np.empty((J, M, n))
    a = np.zeros(J)
    b = np.zeros(J)
    u0s = np.empty((J, n))
    conds = np.empty(J)
    defects = np.empty(J)
    for j in range(J):
        Ph = Phi[:M, j]
        Wm = W[:M, j]
        gauge_u0 = np.stack([np.einsum("mab,ma->b", Ph, g[j]) / M for g in (g_th, g_rho)])
        gauge_w = [np.array([np.sum(Wm[:, f] * g[j]) / M for g in (g_th, g_rho)]) for f in range(3)]
        if correct:
            u0, aj, bj, cond = _joint(Phi[M, j], W[M, j, 0], W[M, j, 1], W[M, j, 2], gauge_u0, *gauge_w)
        else:
            A = np.vstack([Phi[M, j] - np.eye(n), gauge_u0])
            rhs_ = -np.concatenate([W[M, j, 0], gauge_w[0]])
            u0, *_ = np.linalg.lstsq(A, rhs_, rcond=None)
            aj = bj = 0.0
            cond = np.linalg.cond(A)
        a[j], b[j], u0s[j], conds[j] = aj, bj, u0, cond
        u[j] = np.einsum("mab,b->ma", Ph, u0) + Wm[:, 0] - aj * Wm[:, 1] - bj * Wm[:, 2]
        uT = Phi[M, j] @ u0 + W[M, j, 0] - aj * W[M, j, 1] - bj * W[M, j, 2]
        defects[j] = np.linalg.norm(uT - u[j, 0])
    return CohomologySolution(u, a, b, u0s, conds, defects)


def solve_fourier(forcing: Forcing, frame: FloquetFrame, family: OrbitFamily, correct: bool = True,
                  margin: float = 1e-4) -> CohomologySolution:
    """Mode-by-mode inversion of (i k Omega - B) in the Floquet frame."""
    J, M, n = forcing.eta.shape
    ks = np.fft.fftfreq(M, 1.0 / M)
    nyq = (M % 2 == 0)
    g_th, g_rho = _gauge_fields(forcing, family)
    u = np.empty((J, M, n))
    a = np.zeros(J)
    b = np.zeros(J)
    u0s = np.empty((J, n))
    conds = np.empty(J)
    defects = np.zeros(J)
    for j, o in enumerate(family.orbits):
        Om = family.Omega[j]
        B = frame.B[j]
        P = frame.P[j]
        Pinv = np.linalg.inv(P)
        F = np.stack([forcing.eta[j], forcing.d_rho[j], forcing.d_theta[j]], axis=1)  # (M, 3, n)
        G = np.einsum("mab,mfb->mfa", Pinv, F)
        Gh = np.fft.fft(G, axis=0) / M
        Vh = np.zeros_like(Gh)
        bad = []
        for q, k in enumerate(ks):
            if k == 0 or (nyq and q == M // 2):
                continue
            R = 1j * k * Om * np.eye(n) - B
            sv = np.linalg.svd(R, compute_uv=False)
            if sv[-1] < margin * max(1.0, Om):
                bad.append((j, int(k)))
                continue
            Vh[q] = np.linalg.solve(R, Gh[q].T).T
        if bad:
            raise CohomologyError(f"resolvent margin violated at (radius, mode) {bad}")
        Vosc = np.real(np.fft.ifft(Vh, axis=0) * M)  # (M, 3, n)
        Uosc = np.einsum("mab,mfb->mfa", P, Vosc)
        gauge_u0 = np.stack([np.einsum("mab,ma->b", P, g[j]) / M for g in (g_th, g_rho)])
        gauge_w = [np.array([np.sum(Uosc[:, f] * g[j]) / M for g in (g_th, g_rho)]) for f in range(3)]
        G0 = np.real(Gh[0])
        # k = 0: B v0 + G0_eta - a G0_rho - b G0_theta = 0, written in the joint form with PhiT - I -> B
        if correct:
            v0, aj, bj, cond = _joint(B + np.eye(n), G0[0], G0[1], G0[2], gauge_u0, *gauge_w)
        else:
            A = np.vstack([B, gauge_u0])
            v0, *_ = np.linalg.lstsq(A, -np.concatenate([G0[0], gauge_w[0]]), rcond=None)
            aj = bj = 0.0
            cond = np.linalg.cond(A)
        a[j], b[j], u0s[j], conds[j] = aj, bj, P[0] @ v0, cond
        u[j] = np.einsum("mab,b->ma", P, v0) + Uosc[:, 0] - aj * Uosc[:, 1] - bj * Uosc[:, 2]
    return CohomologySolution(u, a, b, u0s, conds, defects)


def equation_residual(sol: CohomologySolution, forcing: Forcing, family: OrbitFamily) -> np.ndarray:
    """|u' - A(t) u - eta + a d_rho K0 + b d_theta K0| per radius, u' by spectral differentiation."""
    dyn = family.dyn
    J, M, n = sol.u.shape
    k = np.fft.fftfreq(M, 1.0 / M)
    if M % 2 == 0:
        k[M // 2] = 0
    out = np.empty(J)
    X = family.samples()
    A = dyn.jacobian(X)
    for j in range(J):
        du = np.real(np.fft.ifft(np.fft.fft(sol.u[j], axis=0) * (1j * k * family.Omega[j])[:, None], axis=0))
        r = du - np.einsum("mab,mb->ma", A[j], sol.u[j]) - forcing.eta[j] + sol.a[j] * forcing.d_rho[j] \
            + sol.b[j] * forcing.d_theta[j]
        out[j] = np.abs(r).max()
    return out


def averaged_radial_rate(eta: np.ndarray, d_rho: np.ndarray, family: OrbitFamily) -> np.ndarray:
    """Averaging formula for a: <grad E . eta> / <grad E . d_rho K0> per radius."""
    dyn = family.dyn
    X = family.samples()
    gE = _grad_energy_batch(dyn, X)
    num = np.einsum("jmi,jmi->j", gE, eta)
    den = np.einsum("jmi,jmi->j", gE, d_rho)
    return num / den


def resolvent_bound(frame: FloquetFrame, family: OrbitFamily, kmax: int) -> float:
    worst = 0.0
    n = family.dyn.n
    for j in range(len(family.orbits)):
        for k in range(1, kmax + 1):
            R = 1j * k * family.Omega[j] * np.eye(n) - frame.B[j]
            worst = max(worst, 1.0 / np.linalg.svd(R, compute_uv=False)[-1])
    return worst
