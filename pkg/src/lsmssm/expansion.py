"""Order-by-order eps-expansion of the invariant manifold and its reduced field.

Invariance F_eps(K_eps(z)) = DK_eps(z) R_eps(z) is expanded in powers of
eps.  At order n the unknown K_n satisfies, along the orbit of radius rho,

    u' = A(t) u + eta_n - a_n d_rho K0 - b_n d_theta K0,

with R_n(z) = (a_n / rho) z + b_n J z constant in theta and
eta_n = [F_eps(K^{<n})]_n - sum_j (a_{n-j} d_rho K_j + b_{n-j} d_theta K_j).
Everything is stored in normalized coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cohomology as coh
from .grid import DiskFunction, GridFunction, RadialFunction, angles
from .lsm import Dynamics, OrbitFamily, fit_lsm
from .system_model import EpsSeries, field_of_series


class ExpansionError(RuntimeError):
    pass


@dataclass
class ReducedTerm:
    """R_n(z) = radial(s) z + angular(s) J z with s = |z|^2."""

    radial: RadialFunction
    angular: RadialFunction

    def __call__(self, z):
        z = np.asarray(z)
        s = z[..., 0] ** 2 + z[..., 1] ** 2
        a = self.radial(s)
        b = self.angular(s)
        return np.stack([a * z[..., 0] - b * z[..., 1], a * z[..., 1] + b * z[..., 0]], axis=-1)

    def linear_part(self) -> np.ndarray:
        a = float(np.real(self.radial(0.0)))
        b = float(np.real(self.angular(0.0)))
        return np.array([[a, -b], [b, a]])


@dataclass
class ManifoldExpansion:
    family: OrbitFamily
    degree: int
    K_grid: list[np.ndarray] = field(default_factory=list)    # (J, M, n) per order
    K_terms: list[DiskFunction] = field(default_factory=list)
    a: list[np.ndarray] = field(default_factory=list)          # per order, at grid radii
    b: list[np.ndarray] = field(default_factory=list)
    R_terms: list[ReducedTerm] = field(default_factory=list)
    d: int = 1
    diagnostics: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    _taylor_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def term_taylor(self, n: int, degree: int) -> dict:
        """Taylor coefficients of K_n at the origin, cached."""
        key = (n, degree, id(self.K_terms[n]))
        if key not in self._taylor_cache:
            self._taylor_cache[key] = self.K_terms[n].taylor(degree)
        return self._taylor_cache[key]

    @property
    def N(self) -> int:
        return len(self.K_terms) - 1

    @property
    def dyn(self) -> Dynamics:
        return self.family.dyn

    @property
    def delta(self) -> float:
        return self.family.delta

    @property
    def rho(self) -> np.ndarray:
        return self.family.grid

    def truncated(self, N: int) -> "ManifoldExpansion":
        return ManifoldExpansion(self.family, self.degree, self.K_grid[: N + 1], self.K_terms[: N + 1],
                                 self.a[: N + 1], self.b[: N + 1], self.R_terms[: N + 1], self.d,
                                 self.diagnostics[: N + 1], dict(self.provenance))

    def _tangents(self):
        if "_tangent_cache" not in self.__dict__:
            self.__dict__["_tangent_cache"] = coh.tangent_forcings(self.family, self.K_terms[0])
        return self.__dict__["_tangent_cache"]

    def grid_points(self) -> np.ndarray:
        th = angles(self.family.M)
        return np.stack([self.rho[:, None] * np.cos(th), self.rho[:, None] * np.sin(th)], axis=-1)

    def d_rho(self, n: int) -> np.ndarray:
        if n == 0:
            return self._tangents()[0]
        z = self.grid_points()
        th = angles(self.family.M)
        D = self.K_terms[n].jacobian(z)
        return np.real(D[..., 0] * np.cos(th)[None, :, None] + D[..., 1] * np.sin(th)[None, :, None])

    def d_theta(self, n: int) -> np.ndarray:
        if n == 0:
            return self._tangents()[1]
        return GridFunction(self.rho, self.K_grid[n]).dtheta().values


def _radial_term(rho, a, b, delta, degree) -> ReducedTerm:
    return ReducedTerm(RadialFunction.fit(rho, a / rho, delta, degree), RadialFunction.fit(rho, b, delta, degree))


def start_expansion(family: OrbitFamily, degree: int = 16) -> ManifoldExpansion:
    """Order zero: the LSM parameterization and the rotation with frequency Omega(rho^2)."""
    exp = ManifoldExpansion(family, degree)
    exp.K_grid.append(family.samples())
    exp.K_terms.append(fit_lsm(family, degree))
    J = len(family.grid)
    exp.a.append(np.zeros(J))
    exp.b.append(family.Omega.copy())
    exp.R_terms.append(ReducedTerm(RadialFunction.constant(0.0, family.delta), family.omega_function()))
    exp.diagnostics.append({"order": 0, "fit_error": _fit_error(exp, 0)})
    return exp


def _fit_error(exp: ManifoldExpansion, n: int) -> float:
    return float(np.abs(exp.K_terms[n](exp.grid_points()) - exp.K_grid[n]).max())


def order_rhs(n: int, exp: ManifoldExpansion) -> np.ndarray:
    """Known part eta_n of the order-n equation on the grid, shape (J, M, n)."""
    if n < 1 or n > exp.N + 1:
        raise ExpansionError(f"order {n} requested with orders 0..{exp.N} stored")
    dyn = exp.dyn
    grids = exp.K_grid[:n]
    shape = grids[0].shape
    terms = np.zeros((n + 1,) + shape)
    for j, g in enumerate(grids):
        terms[j] = g
    xs = EpsSeries(terms @ dyn.S.T)
    Q = field_of_series(dyn.spec, xs).terms[n] @ dyn.Sinv.T
    eta = np.real(Q)
    for j in range(1, n):
        eta = eta - exp.a[n - j][:, None, None] * exp.d_rho(j) - exp.b[n - j][:, None, None] * exp.d_theta(j)
    return eta


def _rate_scale(a, eta) -> float:
    # a_n can vanish identically; measure gaps against the forcing size then
    return max(np.abs(a).max(), np.abs(eta).max(), 1e-300)


def _forcing(exp: ManifoldExpansion, eta: np.ndarray) -> coh.Forcing:
    return coh.Forcing(eta, exp.d_rho(0), exp.d_theta(0))


def melnikov_Rn(n: int, eta: np.ndarray, exp: ManifoldExpansion, frame=None) -> tuple[np.ndarray, np.ndarray, float]:
    """(a_n, b_n) on the grid, and the gap between a_n and the averaging formula."""
    fo = _forcing(exp, eta)
    frame = frame or coh.floquet_frame(exp.family)
    sol = coh.solve_fourier(fo, frame, exp.family)
    avg = coh.averaged_radial_rate(eta, fo.d_rho, exp.family) if exp.dyn.spec.I is not None else sol.a
    gap = float(np.abs(sol.a - avg).max() / _rate_scale(avg, eta))
    return sol.a, sol.b, gap


def solve_Kn(n: int, eta: np.ndarray, exp: ManifoldExpansion, frame=None, cross_check: bool = True,
             tol: float = 1e-12) -> dict:
    """Solve the order-n equation, append (K_n, R_n) to the expansion, return diagnostics."""
    fam = exp.family
    fo = _forcing(exp, eta)
    frame = frame or coh.floquet_frame(fam)
    sol = coh.solve_fourier(fo, frame, fam)
    diag = {"order": n, "eta_sup": float(np.abs(eta).max())}
    if cross_check:
        bvp = coh.solve_bvp(fo, fam, tol=tol)
        scale = max(np.abs(sol.u).max(), np.abs(eta).max(), 1e-300)
        diag["cross_solver"] = float(np.abs(bvp.u - sol.u).max() / scale)
        diag["cross_solver_a"] = float(np.abs(bvp.a - sol.a).max() / _rate_scale(sol.a, eta))
    if fam.dyn.spec.I is not None:
        avg = coh.averaged_radial_rate(eta, fo.d_rho, fam)
        diag["melnikov_gap"] = float(np.abs(sol.a - avg).max() / _rate_scale(avg, eta))
    diag["equation_residual"] = float(coh.equation_residual(sol, fo, fam).max())
    diag["condition"] = float(sol.condition.max())
    exp.K_grid.append(sol.u)
    exp.K_terms.append(DiskFunction.fit(GridFunction(fam.grid, sol.u), fam.delta, exp.degree, order=1))
    exp.a.append(sol.a)
    exp.b.append(sol.b)
    exp.R_terms.append(_radial_term(fam.grid, sol.a, sol.b, fam.delta, exp.degree // 2))
    diag["fit_error"] = _fit_error(exp, n)
    modes = np.abs(np.fft.fft(sol.u, axis=1)) / fam.M
    diag["mode_tail"] = float(modes[:, fam.M // 2 - 2: fam.M // 2 + 3].max()
                              / max(modes.max(), np.abs(eta).max(), 1e-300))
    exp.diagnostics.append(diag)
    return diag


def expand(family: OrbitFamily, N: int, degree: int = 16, cross_check: bool = True) -> ManifoldExpansion:
    exp = start_expansion(family, degree)
    frame = coh.floquet_frame(family)
    for n in range(1, N + 1):
        eta = order_rhs(n, exp)
        solve_Kn(n, eta, exp, frame, cross_check)
    return exp


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Evaluators:
    exp: ManifoldExpansion
    N: int

    def K(self, z, eps):
        return sum(eps ** n * self.exp.K_terms[n](z) for n in range(self.N + 1))

    def DK(self, z, eps):
        return sum(eps ** n * self.exp.K_terms[n].jacobian(z) for n in range(self.N + 1))

    def R(self, z, eps):
        return sum(eps ** n * self.exp.R_terms[n](z) for n in range(self.N + 1))

    def K_physical(self, z, eps):
        return self.K(z, eps) @ self.exp.dyn.S.T

    def check_domain(self, z):
        r = np.sqrt(np.abs(np.asarray(z)[..., 0]) ** 2 + np.abs(np.asarray(z)[..., 1]) ** 2)
        if np.max(r) > self.exp.delta * (1 + 1e-9):
            raise ExpansionError("evaluation outside the disk of radius delta")


def assemble(exp: ManifoldExpansion, N: int | None = None) -> Evaluators:
    N = exp.N if N is None else N
    if N > exp.N:
        raise ExpansionError(f"order {N} not computed")
    return Evaluators(exp, N)


def evaluation_points(delta: float, n_rho: int = 16, n_theta: int = 48, inner: float = 0.05) -> np.ndarray:
    """Points on a polar grid distinct from the fitting grid, shape (n_rho, n_theta, 2)."""
    rho = delta * np.linspace(inner, 1.0, n_rho)
    th = angles(n_theta) + np.pi / n_theta
    return np.stack([rho[:, None] * np.cos(th), rho[:, None] * np.sin(th)], axis=-1)


def invariance_defect(ev: Evaluators, eps, z) -> np.ndarray:
    dyn = ev.exp.dyn.with_eps(eps)
    return dyn.field(ev.K(z, eps)) - np.einsum("...ij,...j->...i", ev.DK(z, eps), ev.R(z, eps))


def residual(ev: Evaluators, eps, d: int = 1, z=None) -> float:
    """sup |z|^{-d} |F_eps(K(z)) - DK(z) R(z)| over the evaluation points."""
    z = evaluation_points(ev.exp.delta) if z is None else z
    ev.check_domain(z)
    r = invariance_defect(ev, eps, z)
    w = np.sqrt(np.abs(z[..., 0]) ** 2 + np.abs(z[..., 1]) ** 2) ** d
    return float((np.linalg.norm(r, axis=-1) / w).max())


def slope(xs, ys) -> float:
    """Least-squares slope of log ys against log xs."""
    return float(np.polyfit(np.log(np.abs(xs)), np.log(ys), 1)[0])


def residual_sweep(exp: ManifoldExpansion, N: int, eps_values, d: int = 1) -> tuple[np.ndarray, float]:
    ev = assemble(exp, N)
    vals = np.array([residual(ev, e, d) for e in eps_values])
    return vals, slope(eps_values, vals)


# ---------------------------------------------------------------------------
# gauge transformations

def gauge_transform(exp: ManifoldExpansion, N: int, eps, h_coeffs=(0.05, 0.02)):
    """(K o h, Dh^{-1} R o h) for the disk map h(z) = z + c1 |z|^2 z + c2 |z|^2 J z.

    Returns callables (K, DK, R) for the transformed pair at fixed eps.
    """
    ev = assemble(exp, N)
    c1, c2 = h_coeffs

    def h(z):
        s = z[..., 0] ** 2 + z[..., 1] ** 2
        return np.stack([z[..., 0] + c1 * s * z[..., 0] - c2 * s * z[..., 1],
                         z[..., 1] + c1 * s * z[..., 1] + c2 * s * z[..., 0]], axis=-1)

    def Dh(z):
        x, y = z[..., 0], z[..., 1]
        s = x ** 2 + y ** 2
        j11 = 1 + c1 * s + 2 * c1 * x * x - 2 * c2 * x * y
        j12 = 2 * c1 * x * y - c2 * s - 2 * c2 * y * y
        j21 = 2 * c1 * x * y + c2 * s + 2 * c2 * x * x
        j22 = 1 + c1 * s + 2 * c1 * y * y + 2 * c2 * x * y
        return np.stack([np.stack([j11, j12], -1), np.stack([j21, j22], -1)], -2)

    def K(z):
        return ev.K(h(z), eps)

    def DK(z):
        return ev.DK(h(z), eps) @ Dh(z)

    def R(z):
        return np.linalg.solve(Dh(z), ev.R(h(z), eps)[..., None])[..., 0]

    return K, DK, R, h


def gauge_residual(exp: ManifoldExpansion, N: int, eps, h_coeffs=(0.05, 0.02), d: int = 1) -> tuple[float, float]:
    """Weighted residual before and after a small disk diffeomorphism, on the same image points."""
    K, DK, R, h = gauge_transform(exp, N, eps, h_coeffs)
    z = evaluation_points(exp.delta * 0.9)
    dyn = exp.dyn.with_eps(eps)
    r_new = dyn.field(K(z)) - np.einsum("...ij,...j->...i", DK(z), R(z))
    # the transformed defect equals Dh-pulled original defect at h(z): compare in the image variable
    ev = assemble(exp, N)
    r_old = invariance_defect(ev, eps, h(z))
    w = np.linalg.norm(h(z), axis=-1) ** d
    return float((np.linalg.norm(r_old, axis=-1) / w).max()), float((np.linalg.norm(r_new, axis=-1) / w).max())


# ---------------------------------------------------------------------------
# graph form in physical coordinates

def _poly_compose2(P, Q):
    """P(Q(z)) truncated at degree 2; P, Q dicts {(a, b): vec} with Q having no constant term."""
    out = {}
    lin = {k: v for k, v in Q.items() if sum(k) == 1}
    quad = {k: v for k, v in Q.items() if sum(k) == 2}
    # Q as components q1, q2
    def comp(i, d):
        return {k: v[i] for k, v in (lin if d == 1 else quad).items()}

    for (a, b), c in P.items():
        deg = a + b
        if deg == 1:
            src = 0 if a == 1 else 1
            for d_ in (1, 2):
                for k, v in comp(src, d_).items():
                    out[k] = out.get(k, 0) + c * v
        elif deg == 2:
            i, j = [0] * a + [1] * b
            for k1, v1 in comp(i, 1).items():
                for k2, v2 in comp(j, 1).items():
                    k = (k1[0] + k2[0], k1[1] + k2[1])
                    out[k] = out.get(k, 0) + c * v1 * v2
    return out


def graph_coefficients(taylor: dict, base: tuple[int, int], graph: tuple[int, int]) -> dict[str, np.ndarray]:
    """Quadratic graph (x_g1, x_g2) = w(x_b1, x_b2) from Taylor data of x(z) (physical coordinates).

    Works with complex coefficient arrays so callers can differentiate in eps by complex step.
    """
    lin = np.array([[taylor[(1, 0)][i], taylor[(0, 1)][i]] for i in base])
    Linv = np.linalg.inv(lin)
    quad = {k: np.array([taylor[k][i] for i in base]) for k in ((2, 0), (1, 1), (0, 2))}
    # inverse map z = h^{-1}(x) to degree 2: z = Linv x - Linv quad(Linv x)
    first = {(1, 0): Linv[:, 0], (0, 1): Linv[:, 1]}
    qcomp = _poly_compose2({k: v for k, v in quad.items()}, first)
    inv = dict(first)
    for k, v in qcomp.items():
        inv[k] = inv.get(k, 0) - Linv @ v
    glin = {k: np.array([taylor[k][i] for i in graph]) for k in ((1, 0), (0, 1))}
    gquad = {k: np.array([taylor[k][i] for i in graph]) for k in ((2, 0), (1, 1), (0, 2))}
    g = {**glin, **gquad}
    w = _poly_compose2(g, inv)
    return {"w20": w.get((2, 0)), "w11": w.get((1, 1)), "w02": w.get((0, 2)),
            "w10": w.get((1, 0)), "w01": w.get((0, 1))}


def eps_taylor(fn, order: int, radius: float = 1e-2, points: int = 32):
    """Taylor coefficients in eps of an analytic ``fn`` by the Cauchy integral on a circle.

    ``fn`` maps a complex eps to an array or a dict of arrays; the result has
    the same structure with a leading axis of length order + 1.
    """
    nodes = radius * np.exp(2j * np.pi * np.arange(points) / points)
    vals = [fn(e) for e in nodes]
    scale = radius ** -np.arange(order + 1)

    def coeffs(stack):
        c = np.fft.fft(np.stack(stack), axis=0)[: order + 1] / points
        return np.real(c * scale.reshape((-1,) + (1,) * (c.ndim - 1)))

    if isinstance(vals[0], dict):
        return {k: coeffs([v[k] for v in vals]) for k in vals[0] if vals[0][k] is not None}
    return coeffs(vals)


def _eval_taylor(c, eps):
    return sum(eps ** j * c[j] for j in range(len(c)))


def _physical_taylor(exp: ManifoldExpansion, eps, N: int, degree: int) -> dict:
    S = exp.dyn.S
    out = {}
    for n in range(N + 1):
        for k, v in exp.term_taylor(n, degree).items():
            out[k] = out.get(k, 0) + eps ** n * (np.real(v) @ S.T)
    return out


def chart_graph(exp: ManifoldExpansion, eps, order: int = 1, base=(0, 2), graph=(1, 3)) -> dict:
    """Quadratic graph coefficients of K^{<=order} over the coordinates ``base``, truncated at eps^order.

    Truncating the graph coefficients themselves in eps keeps the nonlinear
    change to graph form from mixing in higher orders.
    """
    if order > exp.N:
        raise ExpansionError(f"order {order} not computed")
    c = eps_taylor(lambda e: graph_coefficients(_physical_taylor(exp, e, order, 2), base, graph), order)
    return {k: _eval_taylor(v, eps) for k, v in c.items()}


def oracle_graph(fn, eps, order: int = 1) -> dict:
    """The same eps-truncation applied to a closed-form oracle ``fn(eps)``."""
    c = eps_taylor(fn, order)
    return {k: _eval_taylor(v, eps) for k, v in c.items()}


def reduced_linear_physical(exp: ManifoldExpansion, eps, order: int = 1, base=(0, 2)) -> np.ndarray:
    """Linear part at the origin of R^{<=order} in the coordinates x_base, truncated at eps^order."""
    if order > exp.N:
        raise ExpansionError(f"order {order} not computed")
    S = exp.dyn.S

    def matrix(e):
        H = np.zeros((2, 2), dtype=complex)
        A = np.zeros((2, 2), dtype=complex)
        for n in range(order + 1):
            t = exp.term_taylor(n, 1)
            H += e ** n * np.array([[np.real(t[(1, 0)]) @ S.T[:, i], np.real(t[(0, 1)]) @ S.T[:, i]] for i in base])
            A += e ** n * exp.R_terms[n].linear_part()
        return H @ A @ np.linalg.inv(H)

    return _eval_taylor(eps_taylor(matrix, order), eps)


def noise_floor(exp: ManifoldExpansion, d: int = 1) -> float:
    """Weighted residual of the exact eps = 0 pair (K0, R0): what grid and fit errors alone produce."""
    return residual(assemble(exp, 0), 0.0, d)


# ---------------------------------------------------------------------------
# partial normal form

@dataclass
class NormalFormRecord:
    """Change of variables x = S (v + W(v)) produced by ``partial_normal_form``.

    ``W`` is a real polynomial in the normalized coordinates v (pair first),
    ``min_divisor`` the smallest divisor actually inverted and ``kept`` the
    resonant monomials left in place.
    """

    degree: int
    S: np.ndarray
    W: object
    min_divisor: float
    kept: list
    min_jacobian_det: float

    def to_physical(self, v):
        v = np.asarray(v)
        return (v + self.W(v)) @ self.S.T


def _compose(p, q, max_degree: int):
    """p(q(x)) truncated at ``max_degree``; q maps R^n to R^{p.n}."""
    from .system_model import Poly
    n = q.n
    comps = [q.component(i) for i in range(q.m)]
    cache = {}

    def power(i, e):
        if e == 0:
            return Poly.constant(n, [1.0])
        if (i, e) not in cache:
            cache[(i, e)] = power(i, e - 1).mul_scalar_poly(comps[i]).truncate(max_degree)
        return cache[(i, e)]

    out = Poly.zero(n, p.m)
    for key, vec in p.terms.items():
        mono = Poly.constant(n, [1.0])
        for i, e in enumerate(key[:-1]):
            if e:
                mono = mono.mul_scalar_poly(power(i, e)).truncate(max_degree)
        out = out + Poly({k: v[0] * vec for k, v in mono.terms.items()}, n, p.m)
    return out


def _jac_times(W, G, max_degree: int):
    """DW . G truncated at ``max_degree``."""
    from .system_model import Poly
    out = Poly.zero(W.n, W.m)
    for j in range(W.n):
        out = out + W.derivative(j).mul_scalar_poly(G.component(j)).truncate(max_degree)
    return out


def _pull_back(p, W, max_degree: int):
    """(I + DW)^{-1} p(v + W(v)) truncated, by the Neumann series in DW."""
    from .system_model import Poly
    ident = Poly.linear(np.eye(W.n).astype(_dtype_of(W)))
    term = _compose(p, ident + W, max_degree)
    out = term
    for _ in range(max_degree):
        term = _jac_times(W, term, max_degree).scale(-1.0)
        if not term.terms:
            break
        out = out + term
    return out


def _dtype_of(W):
    return complex if any(np.iscomplexobj(v) for v in W.terms.values()) else float


def partial_normal_form(spec, degree_d: int, kappa: float | None = None, pair=None,
                        delta: float | None = None):
    """Polynomial change of variables removing non-resonant terms of y-degree 0 and 1.

    Coordinates are split into x (the Lyapunov pair) and y (the complement).
    Degree by degree up to ``degree_d`` the homological equation
    (m . lambda - lambda_i) w = f is solved in complex eigen-coordinates for
    every monomial of y-degree at most one.  Exactly resonant monomials
    (divisor zero up to roundoff, such as |x|^2 x in the pair components)
    are the normal terms and stay.  Every eps-coefficient of the field is
    transformed by the same change of variables.

    Returns the transformed SystemSpec (in normalized coordinates v) and a
    NormalFormRecord.
    """
    from dataclasses import replace

    from .system_model import Poly
    from . import spectral
    terms_all = spec.eps_terms
    if not all(t.is_polynomial for t in terms_all):
        raise ValueError("normal form needs a polynomial field")
    sd = spectral.decompose(spec.L, pair)
    if not sd.semisimple or not sd.has_pair:
        raise ValueError("normal form needs a semisimple L with an elliptic pair")
    n = spec.dim
    S = sd.basis
    Sinv = np.linalg.inv(S)
    Lv = Sinv @ spec.L @ S
    vals, P = np.linalg.eig(Lv)            # v = P xi
    Pinv = np.linalg.inv(P)
    in_pair = np.abs(P[:2, :]).sum(axis=0) > np.abs(P[2:, :]).sum(axis=0)
    scale = max(np.abs(vals).max(), 1.0)
    structural = 1e-10 * scale
    floor = 0.5 * kappa if kappa is not None else structural

    def to_xi(poly):
        return poly.substitute_linear(P).matmul_left(Pinv)

    fields = [to_xi(t.matmul_left(Sinv).substitute_linear(S)).truncate(degree_d) for t in terms_all]
    lin0 = Poly.linear(np.diag(vals))
    W_total = Poly.zero(n, n)
    min_div = math.inf
    kept = []
    for deg in range(2, degree_d + 1):
        f0 = fields[0].homogeneous(deg)
        W = {}
        for key, vec in f0.terms.items():
            e = np.array(key[:-1])
            ydeg = int(e[~in_pair].sum())
            if ydeg > 1:
                continue
            for i in range(n):
                if abs(vec[i]) < 1e-14 * scale:
                    continue
                div = complex(e @ vals - vals[i])
                if abs(div) <= structural:
                    kept.append((tuple(int(x) for x in e), i))
                    continue
                if abs(div) < floor:
                    raise ValueError(f"small divisor {abs(div):.3e} below kappa/2 at monomial {tuple(e)}")
                min_div = min(min_div, abs(div))
                W.setdefault(key, np.zeros(n, dtype=complex))[i] = vec[i] / div
        if not W:
            continue
        Wp = Poly(W, n, n)
        fields = [_pull_back(fld, Wp, degree_d) for fld in fields]
        # compose the generators: v_old = v + W_total(v); new step v = w + Wp(w)
        ident = Poly.linear(np.eye(n, dtype=complex))
        W_total = (_compose(ident + W_total, ident + Wp, degree_d) - ident) if W_total.terms else Wp
    # back to real normalized coordinates
    def to_v(poly):
        q = poly.substitute_linear(Pinv).matmul_left(P)
        tiny = 1e-13 * scale
        return Poly({k: np.real(v) for k, v in q.terms.items() if np.abs(v).max() > tiny}, n, poly.m)

    real_fields = [to_v(f) for f in fields]
    Wv = to_v(W_total)
    Lnew = np.real(P @ np.diag(vals) @ Pinv)
    N0 = Poly({k: v for k, v in real_fields[0].terms.items() if sum(k) >= 2}, n, n)
    C1 = real_fields[1]
    Cmat = np.zeros((n, n))
    for j in range(n):
        e = [0] * n
        e[j] = 1
        key = tuple(e) + (0,)
        if key in C1.terms:
            Cmat[:, j] = np.real(C1.terms[key])
    G0 = Poly({k: v for k, v in C1.terms.items() if sum(k) >= 2}, n, n)
    delta = delta if delta is not None else 0.1
    det_min = _min_jacobian_det(Wv, delta)
    new_spec = replace(spec, L=Lnew, C=Cmat, N=N0, G=tuple([G0] + real_fields[2:]),
                       I=None, hamiltonian=False, name=f"{spec.name}:normal{degree_d}",
                       max_degree=max(spec.max_degree, degree_d))
    rec = NormalFormRecord(degree_d, S, Wv, min_div, kept, det_min)
    if det_min < 0.5:
        raise ValueError(f"normal form transform degenerate on the disk: det {det_min:.3f}")
    return new_spec, rec


def _min_jacobian_det(W, delta: float, samples: int = 400) -> float:
    rng = np.random.default_rng(0)
    v = rng.normal(size=(samples, W.n))
    v *= delta * rng.uniform(0, 1, (samples, 1)) ** (1 / W.n) / np.linalg.norm(v, axis=1, keepdims=True)
    J = np.stack([W.derivative(j)(v) for j in range(W.n)], axis=-1) + np.eye(W.n)
    return float(np.linalg.det(J).min())
