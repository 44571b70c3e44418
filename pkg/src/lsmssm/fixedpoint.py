"""Refinement of the eps-expansion to an invariant manifold by Picard iteration.

With r the time-T0 map of the reduced field R^{<=N} on the disk and phi the
flow of F_eps, the invariant embedding satisfies K = phi^{-T0} o K o r.
Writing K = K^{<=N} + c, the correction c is a fixed point of

    T(c) = phi^{-T0} o (K^{<=N} + c) o r - K^{<=N},

which contracts in the weighted sup norm |z|^{-d}|c(z)| once d is large
enough that the contraction of r raised to the power d beats the growth of
D phi^{-T0}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .expansion import Evaluators, ManifoldExpansion, assemble
from .grid import DiskFunction, GridFunction, angles, chebyshev_radii
from .lsm import Dynamics, propagate


class ContractionError(RuntimeError):
    def __init__(self, msg: str, report: "ContractionReport"):
        super().__init__(msg)
        self.report = report


class DiskEscapeError(RuntimeError):
    pass


def choose_d(alpha: float, beta: float, margin: float = 0.2) -> int:
    """Smallest integer d >= 1 with beta < d * alpha * (1 - margin)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    d = max(1, math.floor(beta / (alpha * (1 - margin))) + 1)
    while beta >= d * alpha * (1 - margin):
        d += 1
    return d


# ---------------------------------------------------------------------------
# sampling and the weighted norm

@dataclass
class SampleGrid:
    rho: np.ndarray
    M: int
    delta: float
    collar: tuple[float, ...] = (0.1 / 3, 0.2 / 3, 0.1)

    @classmethod
    def build(cls, J: int, M: int, delta: float, tau: float = 0.1) -> "SampleGrid":
        return cls(chebyshev_radii(J, delta), M, delta, (tau / 3, 2 * tau / 3, tau))

    @property
    def points(self) -> np.ndarray:
        th = angles(self.M)
        return np.stack([self.rho[:, None] * np.cos(th), self.rho[:, None] * np.sin(th)], axis=-1)

    def shell(self, sigma: float) -> np.ndarray:
        """Grid points with the angle shifted to theta + i sigma."""
        th = angles(self.M) + 1j * sigma
        return np.stack([self.rho[:, None] * np.cos(th), self.rho[:, None] * np.sin(th)], axis=-1)


def point_norm(z) -> np.ndarray:
    z = np.asarray(z)
    return np.sqrt(np.sum(np.abs(z) ** 2, axis=-1))


def weighted_sup(values, z, d: int) -> float:
    """max |values| / |z|^d over the samples."""
    return float((point_norm(values) / point_norm(z) ** d).max())


@dataclass
class WeightedFunction:
    """A correction on the disk vanishing to order ``d``, with its sampled weighted norm."""

    fn: DiskFunction
    grid: SampleGrid
    d: int
    projected: float = 0.0      # weighted size of the grid content the order-d basis cannot carry
    norm_cache: float | None = None

    @classmethod
    def zero(cls, grid: SampleGrid, d: int, ncomp: int, degree: int) -> "WeightedFunction":
        return cls(DiskFunction.zero(grid.delta, degree, ncomp, order=d), grid, d, 0.0, 0.0)

    @classmethod
    def from_values(cls, values: np.ndarray, grid: SampleGrid, d: int, degree: int) -> "WeightedFunction":
        fn = DiskFunction.fit(GridFunction(grid.rho, values), grid.delta, degree, order=d, weight=d)
        z = grid.points
        projected = weighted_sup(values - fn(z), z, d)
        return cls(fn, grid, d, projected)

    def __call__(self, z):
        return self.fn(z)

    def norm(self) -> float:
        if self.norm_cache is None:
            z = self.grid.points
            best = weighted_sup(self.fn(z), z, self.d)
            for sigma in self.grid.collar:
                zc = self.grid.shell(sigma)
                best = max(best, weighted_sup(self.fn(zc), zc, self.d))
            self.norm_cache = best
        return self.norm_cache

    def __sub__(self, other: "WeightedFunction") -> "WeightedFunction":
        return WeightedFunction(self.fn - other.fn, self.grid, self.d)

    def is_real(self) -> bool:
        return self.fn.is_real()


# ---------------------------------------------------------------------------
# time-T0 maps

@dataclass
class LinearJet:
    """Exact linear invariant pair replacing the truncated linear parts of (K, R)."""

    dK: np.ndarray     # (n, 2)
    dR: np.ndarray     # (2, 2)
    size: float


def linear_jet(ev: Evaluators, eps) -> LinearJet:
    """Exact linear invariance A K_lin = K_lin R_lin with K_lin closest to DK^{<=N}(0).

    The truncated pair matches the linear invariance only to O(eps^{N+1});
    corrections of degree below d are outside the space the iteration
    works in, so the linear jet is fixed here once.
    """
    dyn = ev.exp.dyn
    A = dyn.Sinv @ (dyn.spec.L + eps * dyn.spec.C) @ dyn.S
    vals, vecs = np.linalg.eig(A)
    i = int(np.argmin(np.abs(vals - 1j * dyn.omega0)))
    v = vecs[:, i]
    W = np.column_stack([v.real, v.imag]) if np.isrealobj(eps) else None
    if W is None:
        # complex eps: the invariant plane is spanned by the eigenvectors of lambda and its partner
        j = int(np.argmin(np.abs(vals + 1j * dyn.omega0)))
        W = np.column_stack([vecs[:, i], vecs[:, j]])
    z0 = np.zeros(2)
    K_lin = np.asarray(ev.DK(z0, eps))
    R_lin = _linear_R(ev, eps)
    G, *_ = np.linalg.lstsq(W, K_lin, rcond=None)
    Lam = np.linalg.lstsq(W, A @ W, rcond=None)[0]
    K_new = W @ G
    R_new = np.linalg.solve(G, Lam @ G)
    dK, dR = K_new - K_lin, R_new - R_lin
    if np.isrealobj(eps):
        dK, dR = dK.real, dR.real
    return LinearJet(dK, dR, float(max(np.abs(dK).max(), np.abs(dR).max())))


def _linear_R(ev: Evaluators, eps) -> np.ndarray:
    out = np.zeros((2, 2), dtype=complex)
    for n in range(ev.N + 1):
        out = out + eps ** n * ev.exp.R_terms[n].linear_part()
    return out


@dataclass
class T0Maps:
    dyn: Dynamics
    ev: Evaluators
    eps: complex
    jet: LinearJet
    tol: float = 1e-11

    @property
    def T0(self) -> float:
        return self.dyn.T0

    @property
    def delta(self) -> float:
        return self.ev.exp.delta

    def K_seed(self, z):
        return self.ev.K(z, self.eps) + np.asarray(z) @ self.jet.dK.T

    def DK_seed(self, z):
        return self.ev.DK(z, self.eps) + self.jet.dK

    def R(self, z):
        return self.ev.R(z, self.eps) + np.asarray(z) @ self.jet.dR.T

    def phi(self, u, t: float, variational: bool = False):
        _, ys, P = propagate(self.dyn, u, t, self.tol, variational=variational)
        return (ys[-1], P[-1]) if variational else ys[-1]

    def phi_inv(self, u):
        return self.phi(u, -self.T0)

    def r(self, z, t: float | None = None):
        """Time-t map of the reduced field (default t = T0)."""
        t = self.T0 if t is None else t
        z = np.asarray(z)
        cplx = np.iscomplexobj(z) or np.iscomplexobj(self.eps) or np.iscomplexobj(self.jet.dR)
        y0 = z.astype(complex if cplx else float).reshape(-1)
        if t == 0:
            return z.copy()
        shape = z.shape

        def rhs(_t, y):
            return self.R(y.reshape(shape)).reshape(-1)

        size = np.linalg.norm(np.abs(z), axis=-1, keepdims=True)
        size = np.maximum(size, 1e-6 * max(float(size.max(initial=0.0)), 1e-14))
        atol = np.broadcast_to(self.tol * size, shape).reshape(-1)
        sol = solve_ivp(rhs, (0.0, t), y0, method="DOP853", rtol=self.tol, atol=atol)
        if sol.status != 0:
            raise RuntimeError(f"reduced flow failed: {sol.message}")
        return sol.y[:, -1].reshape(shape)

    def boundary_margin(self, samples: int = 64) -> float:
        """max |r(z)| / delta over the boundary circle; below 1 means the disk maps into itself."""
        th = angles(samples)
        z = self.delta * np.stack([np.cos(th), np.sin(th)], axis=-1)
        return float(point_norm(self.r(z)).max() / self.delta)


def time_T0_maps(exp: ManifoldExpansion, eps, N: int | None = None, tol: float = 1e-11,
                 check_disk: bool = True) -> T0Maps:
    ev = assemble(exp, N)
    dyn = exp.dyn.with_eps(eps)
    maps = T0Maps(dyn, ev, eps, linear_jet(ev, eps), tol)
    if check_disk and np.isrealobj(eps):
        margin = maps.boundary_margin()
        if margin >= 1:
            raise DiskEscapeError(f"reduced time-T0 map leaves the disk: max |r(z)|/delta = {margin:.6f}; shrink delta")
    return maps


# ---------------------------------------------------------------------------
# the operator and its iteration

@dataclass
class ContractionReport:
    gamma_hat: float
    phi_inv_growth: float
    d: int
    eps: complex
    effective_rate: float
    beta_hat: float
    iterations: int = 0
    final_residual: float = math.nan
    distance_to_seed: float = math.nan
    differences: list[float] = field(default_factory=list)
    observed_ratios: list[float] = field(default_factory=list)
    projected_content: float = 0.0
    jet_correction: float = 0.0
    converged: bool = False
    message: str = ""

    def to_record(self) -> dict:
        eps = complex(self.eps)
        return {
            "gamma_hat": self.gamma_hat, "phi_inv_growth": self.phi_inv_growth, "d": self.d,
            "eps": [eps.real, eps.imag], "effective_rate": self.effective_rate, "beta_hat": self.beta_hat,
            "iterations": self.iterations, "final_residual": self.final_residual,
            "distance_to_seed": self.distance_to_seed, "differences": list(self.differences),
            "observed_ratios": list(self.observed_ratios), "projected_content": self.projected_content,
            "jet_correction": self.jet_correction, "converged": self.converged, "message": self.message,
        }


@dataclass
class Refinement:
    correction: WeightedFunction
    maps: T0Maps
    report: ContractionReport

    def K(self, z):
        return self.maps.K_seed(z) + self.correction(z)

    def DK(self, z):
        return self.maps.DK_seed(z) + self.correction.fn.jacobian(z)


class Operator:
    """T(c) on a fixed sample grid, with r(grid) and phi^{-T0}(K_seed o r) cached."""

    def __init__(self, maps: T0Maps, grid: SampleGrid, d: int, degree: int = 12):
        self.maps = maps
        self.grid = grid
        self.d = d
        self.degree = degree
        self.z = grid.points
        self.rz = maps.r(self.z)
        self.seed_z = maps.K_seed(self.z)
        self.seed_rz = maps.K_seed(self.rz)
        self._T0 = None

    def values(self, corr: WeightedFunction | None) -> np.ndarray:
        if corr is None:
            if self._T0 is None:
                self._T0 = self.maps.phi_inv(self.seed_rz) - self.seed_z
            return self._T0
        return self.maps.phi_inv(self.seed_rz + corr(self.rz)) - self.seed_z

    def __call__(self, corr: WeightedFunction | None) -> WeightedFunction:
        return WeightedFunction.from_values(self.values(corr), self.grid, self.d, self.degree)

    def gamma_hat(self) -> float:
        return float((point_norm(self.rz) / point_norm(self.z)).max())

    def phi_inv_growth(self, stride: int = 1) -> float:
        pts = self.seed_rz[::stride, ::stride].reshape(-1, self.maps.dyn.n)
        _, P = self.maps.phi(pts, -self.maps.T0, variational=True)
        return float(np.linalg.norm(P, 2, axis=(-2, -1)).max())


def contraction_estimate(op: Operator, eps) -> ContractionReport:
    g = op.gamma_hat()
    G = op.phi_inv_growth()
    e = abs(eps)
    beta_hat = (G - 1) / e if e > 0 else 0.0
    return ContractionReport(g, G, op.d, eps, G * g ** op.d, beta_hat, jet_correction=op.maps.jet.size)


def growth_slope(exp: ManifoldExpansion, N: int | None = None, probe: float = 1e-2, J: int = 12, M: int = 32,
                 tol: float = 1e-11) -> tuple[float, float, float]:
    """(G(0), G(probe), slope) for the sampled growth G(eps) of D phi^{-T0} along the seed.

    G(0) already exceeds one through the twist of the conservative family, so
    the eps-rate is taken as a difference quotient rather than (G - 1) / eps.
    """
    grid = SampleGrid.build(J, M, exp.delta)
    G = [Operator(time_T0_maps(exp, e, N, tol, check_disk=False), grid, 1).phi_inv_growth() for e in (0.0, probe)]
    return G[0], G[1], max(0.0, (G[1] - G[0]) / probe)


def iterate(exp: ManifoldExpansion, eps, N: int | None = None, d: int = 2, stop_tol: float = 1e-10,
            max_iter: int = 500, J: int = 12, M: int = 32, degree: int = 12, tol: float = 1e-11,
            force: bool = False) -> Refinement:
    """Picard iteration from the zero correction.

    Aborts with ContractionError when the a priori rate G * gamma^d is not
    below one, or when the observed ratio of successive differences stays at
    or above one over the first three steps.
    """
    maps = time_T0_maps(exp, eps, N, tol, check_disk=not force)
    grid = SampleGrid.build(J, M, exp.delta)
    op = Operator(maps, grid, d, degree)
    rep = contraction_estimate(op, eps)
    if rep.effective_rate >= 1:
        rep.message = f"effective rate {rep.effective_rate:.6f} >= 1"
        raise ContractionError(rep.message, rep)
    c = WeightedFunction.zero(grid, d, exp.dyn.n, degree)
    for it in range(1, max_iter + 1):
        new = op(c if it > 1 else None)
        diff = (new - c).norm()
        rep.differences.append(diff)
        rep.projected_content = max(rep.projected_content, new.projected)
        if len(rep.differences) > 1:
            rep.observed_ratios.append(diff / max(rep.differences[-2], 1e-300))
        c = new
        rep.iterations = it
        if it <= 4 and len(rep.observed_ratios) >= 3 and min(rep.observed_ratios[:3]) >= 1:
            rep.message = "successive differences do not contract"
            raise ContractionError(rep.message, rep)
        if diff < stop_tol:
            rep.converged = True
            break
    rep.distance_to_seed = c.norm()
    rep.final_residual = WeightedFunction.from_values(op.values(c) - c(op.z), grid, d, degree).norm()
    if not rep.converged:
        rep.message = f"no convergence in {max_iter} iterations"
        raise ContractionError(rep.message, rep)
    return Refinement(c, maps, rep)


def measured_lipschitz(op: Operator, pairs: int = 20, scale: float = 1e-3, seed: int = 0) -> np.ndarray:
    """|T(a) - T(b)| / |a - b| in the weighted norm for random corrections a, b."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(pairs):
        a = random_correction(op.grid, op.d, op.maps.dyn.n, op.degree, rng, scale)
        b = random_correction(op.grid, op.d, op.maps.dyn.n, op.degree, rng, scale)
        ta, tb = op.values(a), op.values(b)
        num = weighted_sup(ta - tb, op.z, op.d)
        den = weighted_sup(a(op.z) - b(op.z), op.z, op.d)
        out.append(num / den)
    return np.array(out)


def random_correction(grid: SampleGrid, d: int, n: int, degree: int, rng, scale: float) -> WeightedFunction:
    """A real analytic correction vanishing to order d, normalized to weighted size ``scale``."""
    z = grid.points / grid.delta
    vals = np.zeros(z.shape[:-1] + (n,))
    for deg in range(d, d + 4):
        for a in range(deg + 1):
            vals += np.multiply.outer(z[..., 0] ** a * z[..., 1] ** (deg - a), rng.normal(size=n))
    wf = WeightedFunction.from_values(vals, grid, d, degree)
    wf = WeightedFunction(wf.fn.scale(scale / wf.norm()), grid, d)
    return wf


def composition_bound(maps: T0Maps, grid: SampleGrid, d: int, degree: int = 12, samples: int = 5,
                      seed: int = 0) -> list[tuple[float, float]]:
    """Pairs (|c o r|, Lip(r)^d |c|) for random corrections c, norms over grid and r(grid)."""
    rng = np.random.default_rng(seed)
    z = grid.points
    rz = maps.r(z)
    lip = float((point_norm(rz) / point_norm(z)).max())
    both = np.concatenate([z.reshape(-1, 2), rz.reshape(-1, 2)])
    out = []
    for _ in range(samples):
        c = random_correction(grid, d, maps.dyn.n, degree, rng, 1.0)
        lhs = weighted_sup(c(rz), z, d)
        norm = weighted_sup(c(both), both, d)
        out.append((lhs, lip ** d * norm))
    return out


def semiflow_check(ref: Refinement, s_values, radius_fraction: float = 0.8, J: int = 6, M: int = 16) -> dict:
    """sup_z |z|^{-d} |phi^s(K(r^{-s} z)) - K(z)| for each s."""
    maps = ref.maps
    th = angles(64)
    rim = maps.delta * np.stack([np.cos(th), np.sin(th)], axis=-1)
    out = {}
    for s in s_values:
        if s == 0:
            out[float(s)] = 0.0
            continue
        # keep r^{-s}(z) inside the disk where the fits are valid
        growth = max(1.0, float(point_norm(maps.r(rim, -s)).max()) / maps.delta)
        z = SampleGrid.build(J, M, maps.delta * radius_fraction / growth).points
        back = maps.r(z, -s)
        img = maps.phi(ref.K(back), s)
        out[float(s)] = weighted_sup(img - ref.K(z), z, ref.correction.d)
    return out


def invariance_ode_residual(ref: Refinement, J: int = 10, M: int = 40) -> float:
    """Weighted residual of F(K) - DK R for the refined embedding on a grid finer than the fit grid."""
    maps = ref.maps
    th = angles(M) + np.pi / M
    rho = maps.delta * np.linspace(0.1, 1.0, J)
    z = np.stack([rho[:, None] * np.cos(th), rho[:, None] * np.sin(th)], axis=-1)
    r = maps.dyn.field(ref.K(z)) - np.einsum("...ij,...j->...i", ref.DK(z), maps.R(z))
    return weighted_sup(r, z, 1)
