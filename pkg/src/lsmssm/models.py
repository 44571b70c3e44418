"""Reference systems with closed-form oracles."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .system_model import Poly, SystemSpec


# ---------------------------------------------------------------------------
# mechanical systems

def gradient_poly(V: Poly) -> Poly:
    """Gradient of a scalar polynomial as a map R^n -> R^n."""
    grads = [V.derivative(j) for j in range(V.n)]
    return grads[0].stack(grads[1:])


def _embed_q(p: Poly, n: int) -> Poly:
    """Lift a polynomial in q (dim n) to the phase space (q, p) of dim 2n."""
    terms = {}
    for k, v in p.terms.items():
        terms[tuple(k[:-1]) + (0,) * n + (k[-1],)] = v
    return Poly(terms, 2 * n, p.m)


def mechanical_system(M, C, K, V: Poly | None = None, name: str = "mechanical",
                      check_damping: bool = True) -> SystemSpec:
    """First-order form of M q'' + eps C q' + K q + grad V(q) = 0 with p = M q'."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n = M.shape[0]
    for label, mat in (("mass", M), ("stiffness", K)) + ((("damping", C),) if check_damping else ()):
        if not np.allclose(mat, mat.T) or np.min(np.linalg.eigvalsh(mat)) <= 0:
            raise ValueError(f"{label} matrix must be symmetric positive definite")
    Minv = np.linalg.inv(M)
    L = np.block([[np.zeros((n, n)), Minv], [-K, np.zeros((n, n))]])
    D = np.block([[np.zeros((n, n)), np.zeros((n, n))], [np.zeros((n, n)), -C @ Minv]])
    if V is None:
        V = Poly.zero(n, 1)
    if V.min_degree < 3 and V.terms:
        raise ValueError("V must start at degree three (quadratic part belongs in K)")
    gradV = gradient_poly(V)
    N_terms = {}
    for k, v in _embed_q(gradV, n).terms.items():
        N_terms[k] = np.concatenate([np.zeros(n), -v])
    N = Poly(N_terms, 2 * n, 2 * n)
    H_terms: dict = {}
    for i in range(n):
        for j in range(n):
            e = [0] * (2 * n)
            e[n + i] += 1
            e[n + j] += 1
            H_terms[tuple(e) + (0,)] = H_terms.get(tuple(e) + (0,), 0) + 0.5 * Minv[i, j]
            e = [0] * (2 * n)
            e[i] += 1
            e[j] += 1
            H_terms[tuple(e) + (0,)] = H_terms.get(tuple(e) + (0,), 0) + 0.5 * K[i, j]
    H = Poly({k: [v] for k, v in H_terms.items()}, 2 * n, 1) + _embed_q(V, n)
    return SystemSpec(L, D, N, (), H, hamiltonian=True, name=name)


# ---------------------------------------------------------------------------
# elastic pendulum

@dataclass(frozen=True)
class PendulumParams:
    """Spring pendulum with linear and cubic spring constants k and K.

    ``velocity_scale`` multiplies the kinematic relation q' = p/m.  The
    printed equations of motion use 1; the printed graph coefficients and
    reduced dynamics correspond to 2.
    """

    l0: float = 1.0
    m: float = 0.1
    k: float = 0.1414
    K: float = 0.4
    velocity_scale: float = 1.0

    def __post_init__(self):
        for name in ("l0", "m", "k", "K", "velocity_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def g(self) -> float:
        """Gravity fixed by 2 k l0 + 4 K l0^3 = m g."""
        return (2 * self.k * self.l0 + 4 * self.K * self.l0 ** 3) / self.m

    @property
    def stiffness(self) -> tuple[float, float]:
        return (2 * self.k + 4 * self.K * self.l0 ** 2, 2 * self.k + 12 * self.K * self.l0 ** 2)


def pendulum_potential(p: PendulumParams) -> Poly:
    """Cubic and quartic part of the spring potential: K(|q|^4 - 4 l0 q2 |q|^2)."""
    K, l = p.K, p.l0
    terms = {
        (4, 0, 0): [K], (0, 4, 0): [K], (2, 2, 0): [2 * K],
        (2, 1, 0): [-4 * K * l], (0, 3, 0): [-4 * K * l],
    }
    return Poly(terms, 2, 1)


def pendulum_potential_full(p: PendulumParams) -> Poly:
    """U - U0 from the spring and gravity terms, expanded about the rest state."""
    a, b = p.stiffness
    quad = Poly({(2, 0, 0): [a / 2], (0, 2, 0): [b / 2]}, 2, 1)
    return quad + pendulum_potential(p)


def pendulum_system(p: PendulumParams = PendulumParams()) -> SystemSpec:
    """State ordering (q1, q2, p1, p2); damping eps/m on both momenta."""
    vs = p.velocity_scale
    spec = mechanical_system(np.eye(2) * p.m / vs, np.eye(2) / vs, np.diag(p.stiffness),
                             pendulum_potential(p), name="pendulum")
    spec.meta.update(params=vars(p) | {"g": p.g})
    return spec


def pendulum_field_direct(p: PendulumParams, x: np.ndarray, eps: float) -> np.ndarray:
    """Term-by-term evaluation of the printed equations of motion."""
    q1, q2, p1, p2 = np.moveaxis(np.asarray(x, dtype=float), -1, 0)
    m, k, K, l, vs = p.m, p.k, p.K, p.l0, p.velocity_scale
    dq1 = vs * p1 / m
    dq2 = vs * p2 / m
    dp1 = -(2 * k + 4 * K * l ** 2) * q1 - eps * p1 / m - 4 * K * q1 * (q1 ** 2 - 2 * l * q2 + q2 ** 2)
    dp2 = -(2 * k + 12 * K * l ** 2) * q2 - eps * p2 / m - (4 * K * q2 * (q2 ** 2 - 3 * l * q2 + q1 ** 2) - 4 * K * l * q1 ** 2)
    return np.stack([dq1, dq2, dp1, dp2], axis=-1)


def pendulum_reference_w(p: PendulumParams, eps: float) -> dict[str, np.ndarray]:
    """Printed closed forms for the quadratic graph (q2, p2) = w(q1, p1)."""
    k, K, l, m = p.k, p.K, p.l0, p.m
    den = (k + 6 * K * l ** 2) * (-eps ** 2 * (k - 2 * K * l ** 2) + 2 * (3 * k + 2 * K * l ** 2) ** 2 * m)
    if abs(den) < 1e-12:
        raise ZeroDivisionError("kappa denominator vanishes")
    kap = 1.0 / den
    w20 = kap * np.array([
        -2 * K * l * (-eps ** 2 * (k + 6 * K * l ** 2) - 6 * k ** 2 * m + 8 * k * K * l ** 2 * m + 8 * K ** 2 * l ** 4 * m),
        -16 * eps * K * l * (k + 2 * K * l ** 2) ** 2 * m])
    w11 = kap * np.array([
        16 * eps * K * l * (k + 2 * K * l ** 2),
        -4 * K * l * (eps ** 2 * (k - 2 * K * l ** 2) + 2 * (3 * k ** 2 + 20 * k * K * l ** 2 + 12 * K ** 2 * l ** 4) * m)])
    w02 = kap * np.array([
        8 * K * l * (3 * k + 2 * K * l ** 2),
        8 * eps * K * l * (-k + 2 * K * l ** 2)])
    return {"w20": w20, "w11": w11, "w02": w02}


def pendulum_graph_w(p: PendulumParams, eps: float) -> dict[str, np.ndarray]:
    """Quadratic graph coefficients re-derived for the model as constructed.

    Solves the three 2x2-block linear equations obtained by substituting
    (q2, p2) = w20 q1^2 + w11 q1 p1 + w02 p1^2 into the equations of motion
    with the reduced linear flow on the (q1, p1) plane.
    """
    k, K, l, m, vs = p.k, p.K, p.l0, p.m, p.velocity_scale
    a, b = p.stiffness
    # reduced linear flow: q1' = c p1, p1' = -a q1 - (eps/m) p1
    c, d = vs / m, eps / m
    # unknown u = (A20, A11, A02, B20, B11, B02) for q2 = A.., p2 = B..
    # Dw . v for monomials: d(q^2) = 2 q q', d(qp) = q' p + q p', d(p^2) = 2 p p'
    # coefficient map D acting on (c20, c11, c02) of a quadratic form
    D = np.array([
        [0.0, -a, 0.0],
        [2 * c, -d, -2 * a],
        [0.0, c, -2 * d],
    ])
    I3 = np.eye(3)
    # q2' = c p2,  p2' = -b q2 - d p2 + 4 K l q1^2
    A = np.block([[D, -c * I3], [b * I3, D + d * I3]])
    rhs = np.concatenate([np.zeros(3), [4 * K * l, 0.0, 0.0]])
    u = np.linalg.solve(A, rhs)
    return {"w20": np.array([u[0], u[3]]), "w11": np.array([u[1], u[4]]), "w02": np.array([u[2], u[5]])}


def pendulum_reduced_reference(p: PendulumParams, eps: float, x, y) -> np.ndarray:
    """Printed reduced dynamics on the perturbed manifold in (q1, p1) = (x, y)."""
    k, K, l, m = p.k, p.K, p.l0, p.m
    kap = 1.0 / ((k + 6 * K * l ** 2) * (-eps ** 2 * (k - 2 * K * l ** 2) + 2 * (3 * k + 2 * K * l ** 2) ** 2 * m))
    al = -(k + 6 * K * l ** 2) * (-eps ** 2 * (k - 2 * K * l ** 2) + 2 * (3 * k + 2 * K * l ** 2) ** 2 * m)
    be = 16 * eps * K * (k + 2 * K * l ** 2)
    ga = 2 * K * (eps ** 2 * (k + 6 * K * l ** 2) + 2 * (3 * k ** 2 - 4 * k * K * l ** 2 - 4 * K ** 2 * l ** 4) * m)
    de = 8 * K * (3 * k + 2 * K * l ** 2)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = 2.0 / m * y
    dy = (-2 * (k + 2 * K * l ** 2) * x - eps * y / m
          + 4 * K * kap ** 2 * x * (x ** 2 + l ** 2 * (al + be * x * y + ga * x ** 2 + de * y ** 2) ** 2))
    return np.stack([dx, dy], axis=-1)


def pendulum_reduced_linear(p: PendulumParams, eps: float) -> np.ndarray:
    """Linear part of the reduced field on the (q1, p1) plane for the model as constructed."""
    a, _ = p.stiffness
    return np.array([[0.0, p.velocity_scale / p.m], [-a, -eps / p.m]])


# ---------------------------------------------------------------------------
# polar counterexample

def example1_system(a: float = 1.0, omega: float = 1.0, gamma: float | None = None) -> SystemSpec:
    """Cartesian form of rho' = -eps^2 rho + eps rho^2, theta' = omega, u' = a eps^2 u, psi' = gamma.

    State (X, Y, U, V) with (X, Y) = rho (cos theta, sin theta) and
    (U, V) = u (cos psi, sin psi).  The eps*rho*(X, Y) term uses the planar
    radius on the (X, Y) pair.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if gamma is None:
        gamma = np.sqrt(2.0) * omega
    n = 4
    L = np.zeros((n, n))
    L[0, 1], L[1, 0] = -omega, omega
    L[2, 3], L[3, 2] = -gamma, gamma
    G0 = Poly({(1, 0, 0, 0, 1): [1, 0, 0, 0], (0, 1, 0, 0, 1): [0, 1, 0, 0]}, n, n)
    G1 = Poly.linear(np.diag([-1.0, -1.0, a, a]))
    I = Poly({(2, 0, 0, 0, 0): [1.0], (0, 2, 0, 0, 0): [1.0], (0, 0, 2, 0, 0): [1.0], (0, 0, 0, 2, 0): [1.0]}, n, 1)
    spec = SystemSpec(L, np.zeros((n, n)), Poly.zero(n, n), (G0, G1), I, hamiltonian=False, name="example1")
    spec.meta.update(a=a, omega=omega, gamma=gamma)
    return spec


def example1_polar(a: float, eps: float, rho, u, omega: float = 1.0, gamma: float | None = None):
    """Right-hand side in polar variables: (rho', theta', u', psi')."""
    if gamma is None:
        gamma = np.sqrt(2.0) * omega
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    return (-eps ** 2 * rho + eps * rho ** 2, np.full_like(rho, omega), a * eps ** 2 * u, np.full_like(u, gamma))


def example1_oracle(a: float, eps: float) -> dict[str, float]:
    """Cycle radius and its two Lyapunov exponents."""
    return {"radius": eps, "rho_exponent": eps ** 2, "u_exponent": a * eps ** 2}


# ---------------------------------------------------------------------------
# energy-preserving non-Hamiltonian example

def hyper_system(blocks: list[list[np.ndarray]], printed: bool = False) -> SystemSpec:
    """x' = J x - (energy transfer) x / |x|^2, y' = Gamma(|x|^2) y.

    ``blocks[i]`` lists the 2x2 coefficient matrices of Gamma_i(s) in powers
    of s = |x|^2.  With ``printed=False`` the x-equation removes exactly the
    energy pumped into y, -(y . Gamma(|x|^2) y) x / |x|^2, so |x|^2 + |y|^2
    is conserved; this needs the symmetric part of Gamma(0) to vanish.
    ``printed=True`` uses -2 |y|^2 tr Gamma(|x|^2) x / |x|^2 instead.
    """
    k = len(blocks)
    n = 2 + 2 * k
    mats = [[np.asarray(c, dtype=float) for c in bl] for bl in blocks]
    for bl in mats:
        if abs(np.trace(bl[0])) > 1e-14:
            raise ValueError("trace of Gamma must vanish at the origin")
        if not printed and np.abs(bl[0] + bl[0].T).max() > 1e-14:
            raise ValueError("symmetric part of Gamma(0) must vanish for the conservative form")
    L = np.zeros((n, n))
    L[0, 1], L[1, 0] = 1.0, -1.0
    terms: dict[tuple[int, ...], np.ndarray] = {}

    def add(e, comp, value):
        key = tuple(e) + (0,)
        vec = terms.setdefault(key, np.zeros(n))
        vec[comp] += value

    def s_power(p):
        # (x1^2 + x2^2)^p as (exponent list, coefficient) pairs
        return [([2 * j, 2 * (p - j)] + [0] * (n - 2), comb(p, j)) for j in range(p + 1)]

    for i, bl in enumerate(mats):
        off = 2 + 2 * i
        L[off:off + 2, off:off + 2] = bl[0]
        for p, c in enumerate(bl):
            if p > 0:
                for e0, binom in s_power(p):
                    for row in range(2):
                        for col in range(2):
                            e = list(e0)
                            e[off + col] += 1
                            add(e, off + row, binom * c[row, col])
            if printed:
                continue
            # -(y_i . S_p y_i) s^(p-1) x
            sym = 0.5 * (c + c.T)
            if p == 0:
                continue
            for e0, binom in s_power(p - 1):
                for a in range(2):
                    for b in range(2):
                        for comp in range(2):
                            e = list(e0)
                            e[off + a] += 1
                            e[off + b] += 1
                            e[comp] += 1
                            add(e, comp, -binom * sym[a, b])
    if printed:
        trace = {}
        for bl in mats:
            for p, c in enumerate(bl):
                trace[p] = trace.get(p, 0.0) + float(np.trace(c))
        for p, tr in trace.items():
            if p == 0 or tr == 0:
                continue
            for e0, binom in s_power(p - 1):
                for yj in range(2, n):
                    for comp in range(2):
                        e = list(e0)
                        e[yj] += 2
                        e[comp] += 1
                        add(e, comp, -2 * tr * binom)
    N = Poly(terms, n, n)
    I_terms = {tuple(2 if q == j else 0 for q in range(n)) + (0,): [1.0] for j in range(n)}
    spec = SystemSpec(L, np.zeros((n, n)), N, (), Poly(I_terms, n, 1), hamiltonian=False,
                      name="hyper", max_degree=max(6, N.degree))
    spec.meta.update(printed=printed)
    return spec


# ---------------------------------------------------------------------------
# resonant SSM blow-up example

def resonant_blocks(lam: float, mu: float, alpha: float, eps: float) -> np.ndarray:
    B = np.array([[eps * (2 * lam - mu), alpha], [-alpha, eps * (2 * lam - mu)]])
    I2 = np.eye(2)
    Z = np.zeros((2, 2))
    return np.block([[B, Z, I2], [Z, B, -I2], [-2 * I2, 2 * I2, B]])


@dataclass
class ResonantResult:
    H20: np.ndarray
    H02: np.ndarray
    H11: np.ndarray
    Delta: np.ndarray
    H_block: np.ndarray | None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(np.concatenate([self.H20, self.H02, self.H11])))


def resonant_example(lam: float, mu: float, alpha: float, eps: float,
                     F2: tuple = ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))) -> ResonantResult:
    """Second-order coefficients of eta = H(xi) for the block system with frequency alpha."""
    M = resonant_blocks(lam, mu, alpha, eps)
    F = np.concatenate([np.asarray(f, dtype=float) for f in F2])
    H = np.linalg.solve(M, F)
    B = M[:2, :2]
    Binv = np.linalg.inv(B)
    Delta = B + 4 * Binv
    # block-inversion route with A = diag(B, B), Bblk = (I; -I), Cblk = (-2I, 2I), D = B
    A = M[:4, :4]
    Bb = M[:4, 4:]
    Cb = M[4:, :4]
    H_block = None
    try:
        Ainv = np.linalg.inv(A)
        Dinv = np.linalg.inv(Delta)
        top = np.hstack([Ainv + Ainv @ Bb @ Dinv @ Cb @ Ainv, -Ainv @ Bb @ Dinv])
        bot = np.hstack([-Dinv @ Cb @ Ainv, Dinv])
        H_block = np.vstack([top, bot]) @ F
    except np.linalg.LinAlgError:
        pass
    return ResonantResult(H[:2], H[2:4], H[4:], Delta, H_block)


def resonant_delta_closed_form(lam: float, mu: float, alpha: float, eps: float) -> np.ndarray:
    """B + 4 B^{-1} written out entrywise."""
    e = eps * (2 * lam - mu)
    den = e ** 2 + alpha ** 2
    return np.array([[e + 4 * e / den, alpha - 4 * alpha / den], [-alpha + 4 * alpha / den, e + 4 * e / den]])


def resonant_system(lam: float, mu: float, alpha: float, F2=((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))) -> SystemSpec:
    """The (xi, eta) system as a SystemSpec with quadratic forcing F(xi)."""
    n = 4
    L = np.zeros((n, n))
    L[0, 1], L[1, 0] = 1.0, -1.0
    L[2, 3], L[3, 2] = alpha, -alpha
    C = np.diag([-lam, -lam, -mu, -mu])
    F20, F02, F11 = (np.asarray(f, dtype=float) for f in F2)
    N = Poly({(2, 0, 0, 0, 0): [0, 0, *F20], (0, 2, 0, 0, 0): [0, 0, *F02], (1, 1, 0, 0, 0): [0, 0, *F11]}, n, n)
    return SystemSpec(L, C, N, (), None, hamiltonian=False, name="resonant")


# ---------------------------------------------------------------------------
# small linear systems

def linear_decoupled(omegas=(1.0, np.sqrt(2.0)), damping=(0.5, 0.7)) -> SystemSpec:
    """Block-diagonal rotations with isotropic damping in each block."""
    k = len(omegas)
    n = 2 * k
    L = np.zeros((n, n))
    C = np.zeros((n, n))
    for i, (w, c) in enumerate(zip(omegas, damping)):
        L[2 * i, 2 * i + 1], L[2 * i + 1, 2 * i] = w, -w
        C[2 * i, 2 * i] = C[2 * i + 1, 2 * i + 1] = -c
    I_terms = {}
    for i in range(n):
        e = [0] * n
        e[i] = 2
        I_terms[tuple(e) + (0,)] = [0.5]
    return SystemSpec(L, C, Poly.zero(n, n), (), Poly(I_terms, n, 1), hamiltonian=True, name="linear")
