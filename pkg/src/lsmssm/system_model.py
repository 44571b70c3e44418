"""Polynomial vector fields F_eps(x) = Lx + N(x) + eps*C*x + eps*G_eps(x).

Monomials may carry an integer power of the planar radius
sqrt(x[a]**2 + x[b]**2) on a designated coordinate pair.  Plain polynomials
use power zero; the polar counterexample in :mod:`lsmssm.models` needs it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.integrate import solve_ivp


class BoxExitError(RuntimeError):
    def __init__(self, t: float, radius: float):
        super().__init__(f"trajectory left the evaluation box (radius {radius:g}) at t={t:.6g}")
        self.t = t


class IntegrationError(RuntimeError):
    pass


def _key(exp: Sequence[int], rad: int = 0) -> tuple[int, ...]:
    return tuple(int(e) for e in exp) + (int(rad),)


class Poly:
    """Sparse-by-term, dense-in-output polynomial map R^n -> R^m.

    Terms are stored as a dict mapping (e_1, ..., e_n, h) to a length-m
    coefficient vector, meaning coeff * prod x_i**e_i * r**h with r the
    planar radius on ``radial_axes``.
    """

    def __init__(self, terms: Mapping[tuple[int, ...], Iterable[complex]], n: int, m: int,
                 radial_axes: tuple[int, int] = (0, 1)):
        self.n = int(n)
        self.m = int(m)
        self.radial_axes = tuple(radial_axes)
        clean: dict[tuple[int, ...], np.ndarray] = {}
        for k, v in terms.items():
            k = tuple(int(e) for e in k)
            if len(k) == n:
                k = k + (0,)
            if len(k) != n + 1:
                raise ValueError(f"multi-index {k} does not match dimension {n}")
            v = np.asarray(v, dtype=complex if np.iscomplexobj(v) else float).reshape(m)
            if k in clean:
                v = clean[k] + v
            clean[k] = v
        self.terms = {k: v for k, v in clean.items() if np.any(v != 0)}

    # construction helpers
    @classmethod
    def zero(cls, n: int, m: int) -> "Poly":
        return cls({}, n, m)

    @classmethod
    def linear(cls, A: np.ndarray) -> "Poly":
        A = np.asarray(A)
        A = A.astype(complex if np.iscomplexobj(A) else float)
        m, n = A.shape
        terms = {}
        for j in range(n):
            e = [0] * n
            e[j] = 1
            terms[_key(e)] = A[:, j]
        return cls(terms, n, m)

    @classmethod
    def coordinate(cls, n: int, j: int) -> "Poly":
        e = [0] * n
        e[j] = 1
        return cls({_key(e): [1.0]}, n, 1)

    @classmethod
    def constant(cls, n: int, value: Sequence[float]) -> "Poly":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls({_key([0] * n): value}, n, value.size)

    # structure
    @property
    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(k[:-1]) + k[-1] for k in self.terms)

    @property
    def min_degree(self) -> int:
        if not self.terms:
            return 10**9
        return min(sum(k[:-1]) + k[-1] for k in self.terms)

    @property
    def is_polynomial(self) -> bool:
        return all(k[-1] == 0 for k in self.terms)

    def component(self, i: int) -> "Poly":
        return Poly({k: v[i:i + 1] for k, v in self.terms.items()}, self.n, 1, self.radial_axes)

    def stack(self, others: Sequence["Poly"]) -> "Poly":
        polys = [self, *others]
        m = sum(p.m for p in polys)
        terms: dict[tuple[int, ...], np.ndarray] = {}
        off = 0
        for p in polys:
            for k, v in p.terms.items():
                terms.setdefault(k, np.zeros(m, dtype=v.dtype))
                terms[k] = terms[k].astype(np.result_type(terms[k], v))
                terms[k][off:off + p.m] = v
            off += p.m
        return Poly(terms, self.n, m, self.radial_axes)

    def truncate(self, max_degree: int) -> "Poly":
        return Poly({k: v for k, v in self.terms.items() if sum(k[:-1]) + k[-1] <= max_degree},
                    self.n, self.m, self.radial_axes)

    def homogeneous(self, degree: int) -> "Poly":
        return Poly({k: v for k, v in self.terms.items() if sum(k[:-1]) + k[-1] == degree},
                    self.n, self.m, self.radial_axes)

    # algebra
    def __add__(self, other: "Poly") -> "Poly":
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms[k] + v if k in terms else v
        return Poly(terms, self.n, self.m, self.radial_axes)

    def __sub__(self, other: "Poly") -> "Poly":
        return self + other.scale(-1.0)

    def scale(self, c) -> "Poly":
        return Poly({k: c * v for k, v in self.terms.items()}, self.n, self.m, self.radial_axes)

    def matmul_left(self, A: np.ndarray) -> "Poly":
        A = np.asarray(A)
        return Poly({k: A @ v for k, v in self.terms.items()}, self.n, A.shape[0], self.radial_axes)

    def mul_scalar_poly(self, s: "Poly") -> "Poly":
        """Product with a scalar-valued polynomial ``s`` (m == 1)."""
        terms: dict[tuple[int, ...], np.ndarray] = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in s.terms.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                terms[k] = terms[k] + v1 * v2[0] if k in terms else v1 * v2[0]
        return Poly(terms, self.n, self.m, self.radial_axes)

    def derivative(self, j: int) -> "Poly":
        a, b = self.radial_axes
        terms: dict[tuple[int, ...], np.ndarray] = {}
        for k, v in self.terms.items():
            e = list(k)
            if e[j] > 0:
                e2 = list(e)
                e2[j] -= 1
                kk = tuple(e2)
                terms[kk] = terms[kk] + e[j] * v if kk in terms else e[j] * v
            if e[-1] != 0 and j in (a, b):
                # d r^h / dx_j = h x_j r^(h-2)
                e2 = list(e)
                e2[j] += 1
                e2[-1] -= 2
                kk = tuple(e2)
                terms[kk] = terms[kk] + e[-1] * v if kk in terms else e[-1] * v
        return Poly(terms, self.n, self.m, self.radial_axes)

    def substitute_linear(self, A: np.ndarray) -> "Poly":
        """Return x -> P(A x) for square A (pure polynomials only)."""
        if not self.is_polynomial:
            raise ValueError("linear substitution of radial terms is not supported")
        A = np.asarray(A)
        n = self.n
        rows = [Poly.linear(A[i:i + 1, :]) for i in range(n)]
        cache: dict[tuple[int, int], Poly] = {}

        def power(i: int, e: int) -> Poly:
            if e == 0:
                return Poly.constant(n, [1.0])
            if (i, e) not in cache:
                cache[(i, e)] = power(i, e - 1).mul_scalar_poly(rows[i])
            return cache[(i, e)]

        out = Poly.zero(n, self.m)
        for k, v in self.terms.items():
            mono = Poly.constant(n, [1.0])
            for i, e in enumerate(k[:-1]):
                if e:
                    mono = mono.mul_scalar_poly(power(i, e))
            out = out + Poly({kk: vv[0] * v for kk, vv in mono.terms.items()}, n, self.m)
        return out

    # evaluation
    @cached_property
    def _arrays(self):
        keys = sorted(self.terms)
        if not keys:
            return (np.zeros((0, self.n), int), np.zeros(0, int), np.zeros((0, self.m)))
        E = np.array([k[:-1] for k in keys], dtype=int)
        H = np.array([k[-1] for k in keys], dtype=int)
        coeff = np.array([self.terms[k] for k in keys])
        return E, H, coeff

    def monomials(self, x: np.ndarray) -> np.ndarray:
        E, H, _ = self._arrays
        x = np.asarray(x)
        out = np.ones(x.shape[:-1] + (E.shape[0],), dtype=x.dtype if np.iscomplexobj(x) else float)
        if E.shape[0] == 0:
            return out
        for i in range(self.n):
            emax = int(E[:, i].max())
            if emax == 0:
                continue
            pw = [np.ones_like(x[..., i])]
            for _ in range(emax):
                pw.append(pw[-1] * x[..., i])
            pw = np.stack(pw, axis=-1)
            out = out * pw[..., E[:, i]]
        if np.any(H != 0):
            a, b = self.radial_axes
            r = np.sqrt(x[..., a] ** 2 + x[..., b] ** 2 + 0j) if np.iscomplexobj(x) else \
                np.sqrt(x[..., a] ** 2 + x[..., b] ** 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = out * r[..., None] ** H
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        _, _, coeff = self._arrays
        mono = self.monomials(x)
        if coeff.shape[0] == 0:
            return np.zeros(np.shape(x)[:-1] + (self.m,), dtype=mono.dtype)
        return mono @ coeff

    def to_json(self) -> list:
        return [[list(k[:-1]), k[-1], [float(c) for c in np.real(v)]] for k, v in sorted(self.terms.items())]

    @classmethod
    def from_json(cls, data: list, n: int, m: int) -> "Poly":
        return cls({_key(e, h): c for e, h, c in data}, n, m)

    def __repr__(self) -> str:
        return f"Poly(n={self.n}, m={self.m}, terms={len(self.terms)}, degree={self.degree})"


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """F_eps(x) = Lx + N(x) + eps*C*x + sum_j eps**(j+1) G[j](x).

    G[0] must start at degree two; higher eps-orders of G may carry linear
    terms (the polar counterexample shifts its linear part at order eps**2).
    """

    L: np.ndarray
    C: np.ndarray
    N: Poly
    G: tuple[Poly, ...] = ()
    I: Poly | None = None
    hamiltonian: bool = False
    name: str = "system"
    max_degree: int = 6
    box_radius: float = np.inf
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        L = np.array(self.L, dtype=float)
        C = np.array(self.C, dtype=float)
        n = L.shape[0]
        if L.shape != (n, n) or C.shape != (n, n):
            raise ValueError("L and C must be square matrices of the same size")
        L.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "G", tuple(self.G))
        for p in (self.N, *self.G):
            if p.n != n or p.m != n:
                raise ValueError("nonlinear terms must map R^n to R^n")
        if self.N.min_degree < 2:
            raise ValueError("N must contain terms of degree >= 2 only")
        if self.G and self.G[0].min_degree < 2:
            raise ValueError("G at order eps must contain terms of degree >= 2 only")
        if self.I is not None:
            if self.I.n != n or self.I.m != 1:
                raise ValueError("conserved quantity must be scalar on R^n")
            if self.I.min_degree < 2:
                raise ValueError("conserved quantity must vanish to second order at the origin")
        degs = [p.degree for p in (self.N, *self.G)]
        if max(degs, default=0) > self.max_degree:
            raise ValueError(f"polynomial degree {max(degs)} exceeds declared limit {self.max_degree}")

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def with_box(self, radius: float) -> "SystemSpec":
        return SystemSpec(self.L, self.C, self.N, self.G, self.I, self.hamiltonian, self.name,
                          self.max_degree, radius, dict(self.meta))

    @cached_property
    def eps_terms(self) -> list[Poly]:
        """F_eps as a list of eps-power coefficients F^0, F^1, ..."""
        terms = [Poly.linear(self.L) + self.N, Poly.linear(self.C) + (self.G[0] if self.G else Poly.zero(self.dim, self.dim))]
        terms.extend(self.G[1:])
        return terms

    @cached_property
    def _jac_terms(self) -> list[list[Poly]]:
        return [[p.derivative(j) for j in range(self.dim)] for p in self.eps_terms]

    @cached_property
    def _hess_terms(self) -> list[list[list[Poly]]]:
        return [[[dp.derivative(k) for k in range(self.dim)] for dp in row] for row in self._jac_terms]

    @cached_property
    def grad_I(self) -> list[Poly]:
        if self.I is None:
            raise ValueError("system has no conserved quantity")
        return [self.I.derivative(j) for j in range(self.dim)]


def _check_dim(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"state dimension {x.shape[-1]} does not match system dimension {spec.dim}")
    return x


def eval_field(spec: SystemSpec, x: np.ndarray, eps: complex = 0.0) -> np.ndarray:
    """F_eps(x) for x of shape (..., n); complex eps or x promote to complex."""
    x = _check_dim(spec, x)
    out = None
    for j, p in enumerate(spec.eps_terms):
        if j > 0 and eps == 0:
            break
        v = p(x) * (eps ** j if j else 1.0)
        out = v if out is None else out + v
    return out


def eval_jacobian(spec: SystemSpec, x: np.ndarray, eps: complex = 0.0) -> np.ndarray:
    x = _check_dim(spec, x)
    cols = None
    for j, row in enumerate(spec._jac_terms):
        if j > 0 and eps == 0:
            break
        c = np.stack([dp(x) for dp in row], axis=-1) * (eps ** j if j else 1.0)
        cols = c if cols is None else cols + c
    return cols


def eval_hessian(spec: SystemSpec, x: np.ndarray, eps: complex = 0.0) -> np.ndarray:
    """Second derivatives H[..., i, j, k] = d^2 F_i / dx_j dx_k."""
    x = _check_dim(spec, x)
    out = None
    for j, rows in enumerate(spec._hess_terms):
        if j > 0 and eps == 0:
            break
        h = np.stack([np.stack([d2(x) for d2 in r], axis=-1) for r in rows], axis=-2)
        h = h * (eps ** j if j else 1.0)
        out = h if out is None else out + h
    return out


@dataclass(frozen=True)
class Jet:
    base_point: np.ndarray
    order: int
    coefficients: tuple[np.ndarray, ...]

    def symmetry_defect(self) -> float:
        worst = 0.0
        for k, t in enumerate(self.coefficients[2:], start=2):
            for ax in range(2, k + 1):
                perm = list(range(t.ndim))
                perm[1], perm[ax] = perm[ax], perm[1]
                worst = max(worst, float(np.max(np.abs(t - np.transpose(t, perm)))))
        return worst


def eval_jet(spec: SystemSpec, x: np.ndarray, eps: complex = 0.0, order: int = 1) -> Jet:
    """Exact derivatives of F_eps at a single point up to ``order``."""
    x = _check_dim(spec, x)
    if order > spec.max_degree:
        raise ValueError(f"jet order {order} exceeds stored degree {spec.max_degree}")
    coeffs = [eval_field(spec, x, eps)]
    layer: list = [(p, ()) for p in spec.eps_terms]
    n = spec.dim
    for k in range(1, order + 1):
        new_layer = []
        for p, idx in layer:
            for j in range(n):
                new_layer.append((p.derivative(j), idx + (j,)))
        layer = new_layer
        t = np.zeros((n,) + (n,) * k, dtype=np.result_type(x, complex(eps)) if np.iscomplexobj(x) or isinstance(eps, complex) else float)
        nterms = len(spec.eps_terms)
        for pos, (p, idx) in enumerate(layer):
            power = pos // (len(layer) // nterms)
            if power > 0 and eps == 0:
                continue
            val = p(x) * (eps ** power if power else 1.0)
            t[(slice(None),) + idx] += val
        coeffs.append(t)
    return Jet(np.array(x), order, tuple(coeffs))


def eval_conserved(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    if spec.I is None:
        raise ValueError("system has no conserved quantity")
    return spec.I(_check_dim(spec, x))[..., 0]


def grad_conserved(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    return np.stack([g(x)[..., 0] for g in spec.grad_I], axis=-1)


def annihilation_defect(spec: SystemSpec) -> float:
    """Largest coefficient of the polynomial grad(I) . F_0 (zero when I is conserved)."""
    if spec.I is None:
        raise ValueError("system has no conserved quantity")
    F0 = spec.eps_terms[0]
    total = Poly.zero(spec.dim, 1)
    for j, g in enumerate(spec.grad_I):
        total = total + g.mul_scalar_poly(F0.component(j))
    total = _reduce_radial(total)
    if not total.terms:
        return 0.0
    scale = max(float(np.max(np.abs(v))) for v in F0.terms.values()) * \
        max(float(np.max(np.abs(v))) for g in spec.grad_I for v in g.terms.values())
    return max(float(np.max(np.abs(v))) for v in total.terms.values()) / max(scale, 1e-300)


def _reduce_radial(p: Poly) -> Poly:
    """Rewrite even radial powers r^(2j) as (x_a^2 + x_b^2)^j so cancellations show up."""
    a, b = p.radial_axes
    out: dict[tuple[int, ...], np.ndarray] = {}
    for k, v in p.terms.items():
        h = k[-1]
        if h > 0 and h % 2 == 0:
            j = h // 2
            from math import comb
            for i in range(j + 1):
                e = list(k)
                e[a] += 2 * i
                e[b] += 2 * (j - i)
                e[-1] = 0
                kk = tuple(e)
                out[kk] = out.get(kk, 0) + comb(j, i) * v
        else:
            out[k] = out.get(k, 0) + v
    res = Poly(out, p.n, p.m, p.radial_axes)
    res.terms = {k: v for k, v in res.terms.items() if np.max(np.abs(v)) > 1e-13 * max(1.0, max(np.max(np.abs(w)) for w in p.terms.values()))}
    return res


# ---------------------------------------------------------------------------
# flows

@dataclass
class FlowResult:
    t: np.ndarray
    x: np.ndarray                 # (len(t), ..., n)
    jac: np.ndarray | None = None  # (len(t), ..., n, n)
    nfev: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]


def _rhs_factory(spec: SystemSpec, eps, shape, variational: bool, field_fn=None, jac_fn=None):
    n = spec.dim
    radius = spec.box_radius
    fld = field_fn or (lambda x: eval_field(spec, x, eps))
    jcb = jac_fn or (lambda x: eval_jacobian(spec, x, eps))

    def rhs(t, y):
        y = y.reshape(shape)
        x = y[..., :n]
        if np.isfinite(radius) and np.max(np.abs(x)) > radius:
            raise BoxExitError(float(t), radius)
        f = fld(x)
        if not variational:
            return f.reshape(-1)
        P = y[..., n:].reshape(x.shape[:-1] + (n, n))
        dP = jcb(x) @ P
        return np.concatenate([f, dP.reshape(x.shape[:-1] + (n * n,))], axis=-1).reshape(-1)

    return rhs


def integrate(rhs, y0: np.ndarray, t: float, tol: float, t_eval=None, atol=None):
    y0 = np.asarray(y0)
    if t == 0:
        return np.array([0.0]), y0.reshape(1, -1), 0
    if atol is None:
        atol = tol * max(float(np.max(np.abs(y0))), 1e-300)
    sol = solve_ivp(rhs, (0.0, t), y0.reshape(-1), method="DOP853", rtol=tol, atol=atol,
                    t_eval=t_eval, dense_output=False)
    if sol.status != 0:
        raise IntegrationError(f"integration failed at t={sol.t[-1]:.6g}: {sol.message}")
    ts = sol.t if t_eval is not None else np.array([0.0, t])
    ys = sol.y.T if t_eval is not None else np.stack([y0.reshape(-1), sol.y[:, -1]])
    return ts, ys, sol.nfev


def flow(spec: SystemSpec, x0: np.ndarray, eps: complex = 0.0, t: float = 1.0, tol: float = 1e-10,
         variational: bool = False, t_eval: np.ndarray | None = None, field_fn=None, jac_fn=None) -> FlowResult:
    """Integrate x' = F_eps(x) (and optionally Phi' = DF Phi, Phi(0) = I).

    ``x0`` may carry leading batch dimensions; all trajectories share one
    adaptive step sequence.  Leaving the evaluation box raises BoxExitError.
    """
    x0 = _check_dim(spec, x0)
    n = spec.dim
    cplx = np.iscomplexobj(x0) or np.iscomplexobj(eps) or isinstance(eps, complex)
    x0 = x0.astype(complex if cplx else float)
    if variational:
        eye = np.broadcast_to(np.eye(n), x0.shape[:-1] + (n, n)).reshape(x0.shape[:-1] + (n * n,))
        y0 = np.concatenate([x0, eye.astype(x0.dtype)], axis=-1)
    else:
        y0 = x0
    shape = y0.shape
    rhs = _rhs_factory(spec, eps, shape, variational, field_fn, jac_fn)
    scale = max(float(np.max(np.abs(x0))), 1e-14)
    atol = np.full(shape, tol * scale)
    if variational:
        atol[..., n:] = tol
    ts, ys, nfev = integrate(rhs, y0, t, tol, t_eval=t_eval, atol=atol.reshape(-1))
    ys = ys.reshape((len(ts),) + shape)
    if variational:
        return FlowResult(ts, ys[..., :n], ys[..., n:].reshape(ys.shape[:-1] + (n, n)), nfev)
    return FlowResult(ts, ys, None, nfev)


def conserved_drift(spec: SystemSpec, x0: np.ndarray, eps: float = 0.0, t: float = 1.0,
                    tol: float = 1e-12) -> float:
    """I(x(t)) - I(x(0)) along the flow of F_eps."""
    if spec.I is None:
        raise ValueError("system has no conserved quantity")
    res = flow(spec, x0, eps, t, tol)
    return float(np.real(eval_conserved(spec, res.final) - eval_conserved(spec, np.asarray(x0))))


def averaged_drift_rate(spec: SystemSpec, samples: np.ndarray) -> float:
    """Cycle average of grad(I) . (C x + G(x)), the first-order drift per unit eps and time."""
    F1 = spec.eps_terms[1]
    vals = np.sum(grad_conserved(spec, samples) * F1(samples), axis=-1)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# truncated eps-series

class EpsSeries:
    """Coefficients of sum_j eps**j * terms[j], truncated at order N."""

    def __init__(self, terms):
        self.terms = np.asarray(terms)

    @property
    def order(self) -> int:
        return self.terms.shape[0] - 1

    @classmethod
    def constant(cls, value, order: int) -> "EpsSeries":
        value = np.asarray(value)
        t = np.zeros((order + 1,) + value.shape, dtype=value.dtype)
        t[0] = value
        return cls(t)

    def truncate(self, order: int) -> "EpsSeries":
        return EpsSeries(self.terms[: order + 1])

    def _align(self, other: "EpsSeries"):
        N = min(self.order, other.order)
        return self.terms[: N + 1], other.terms[: N + 1], N

    def __add__(self, other):
        if not isinstance(other, EpsSeries):
            t = self.terms.copy()
            t[0] = t[0] + other
            return EpsSeries(t)
        a, b, _ = self._align(other)
        return EpsSeries(a + b)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __rmul__(self, c):
        return EpsSeries(c * self.terms)

    def __mul__(self, other):
        if not isinstance(other, EpsSeries):
            return EpsSeries(self.terms * other)
        a, b, N = self._align(other)
        out = np.zeros(np.broadcast(a[0], b[0]).shape, dtype=np.result_type(a, b))
        out = np.stack([sum(a[i] * b[k - i] for i in range(k + 1)) for k in range(N + 1)])
        return EpsSeries(out)

    def sqrt(self) -> "EpsSeries":
        s = [np.sqrt(self.terms[0] + 0j) if np.iscomplexobj(self.terms) else np.sqrt(self.terms[0])]
        for k in range(1, self.order + 1):
            acc = self.terms[k] - sum(s[j] * s[k - j] for j in range(1, k))
            s.append(acc / (2 * s[0]))
        return EpsSeries(np.stack(s))

    def reciprocal(self) -> "EpsSeries":
        r = [1.0 / self.terms[0]]
        for k in range(1, self.order + 1):
            acc = sum(self.terms[j] * r[k - j] for j in range(1, k + 1))
            r.append(-acc * r[0])
        return EpsSeries(np.stack(r))

    def power(self, h: int) -> "EpsSeries":
        if h < 0:
            return self.reciprocal().power(-h)
        out = EpsSeries.constant(np.ones_like(self.terms[0]), self.order)
        base = self
        while h:
            if h & 1:
                out = out * base
            h >>= 1
            if h:
                base = base * base
        return out

    def __call__(self, eps):
        acc = self.terms[-1] * 1.0
        for t in self.terms[-2::-1]:
            acc = acc * eps + t
        return acc


def poly_of_series(p: Poly, xs: EpsSeries) -> EpsSeries:
    """Truncated eps-series of p(x_eps) for x_eps given as an EpsSeries over (..., n)."""
    E, H, coeff = p._arrays
    N = xs.order
    base_shape = xs.terms.shape[1:-1]
    dtype = np.result_type(xs.terms, coeff) if coeff.size else xs.terms.dtype
    out = np.zeros((N + 1,) + base_shape + (p.m,), dtype=dtype)
    if E.shape[0] == 0:
        return EpsSeries(out)
    comps = [EpsSeries(xs.terms[..., i]) for i in range(p.n)]
    pw: dict[tuple[int, int], EpsSeries] = {}

    def power(i: int, e: int) -> EpsSeries:
        if (i, e) not in pw:
            pw[(i, e)] = EpsSeries.constant(np.ones(base_shape), N) if e == 0 else power(i, e - 1) * comps[i]
        return pw[(i, e)]

    radial: dict[int, EpsSeries] = {}
    if np.any(H != 0):
        a, b = p.radial_axes
        r = (comps[a] * comps[a] + comps[b] * comps[b]).sqrt()
        for h in set(H.tolist()):
            radial[h] = r.power(h)
    for t in range(E.shape[0]):
        mono = EpsSeries.constant(np.ones(base_shape), N)
        for i in range(p.n):
            if E[t, i]:
                mono = mono * power(i, int(E[t, i]))
        if H[t]:
            mono = mono * radial[int(H[t])]
        out = out + mono.terms[..., None] * coeff[t]
    return EpsSeries(out)


def field_of_series(spec: SystemSpec, xs: EpsSeries) -> EpsSeries:
    """Truncated eps-series of F_eps(x_eps)."""
    N = xs.order
    total = None
    for j, p in enumerate(spec.eps_terms):
        if j > N:
            break
        val = poly_of_series(p, xs.truncate(N - j)).terms
        shifted = np.zeros((N + 1,) + val.shape[1:], dtype=val.dtype)
        shifted[j:] = val
        total = shifted if total is None else total + shifted
    return EpsSeries(total)
