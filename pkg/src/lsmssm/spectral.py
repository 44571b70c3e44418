"""Eigen-analysis of the linear part and the nonresonance gates built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

IMAG_TOL = 1e-10
SEMISIMPLE_COND = 1e8


@dataclass
class GateResult:
    name: str
    passed: bool
    witness: dict = field(default_factory=dict)
    message: str = ""

    def to_record(self) -> dict:
        return {"gate": self.name, "verdict": "PASS" if self.passed else "FAIL",
                "witness": self.witness, "message": self.message}


@dataclass
class SpectralData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    lyapunov_pair: tuple[int, int] | None
    complement: np.ndarray
    semisimple: bool
    proj_X1: np.ndarray | None
    proj_X2: np.ndarray | None
    omega0: float
    condition: float
    basis: np.ndarray | None = None  # real basis [e1, e2, V2] with L e1 = w e2, L e2 = -w e1

    @property
    def has_pair(self) -> bool:
        return self.lyapunov_pair is not None

    @property
    def period(self) -> float:
        return 2 * math.pi / self.omega0


def _imaginary_pairs(vals: np.ndarray, scale: float) -> list[tuple[int, int]]:
    pairs = []
    used = set()
    for i, v in enumerate(vals):
        if i in used or v.imag <= 0 or abs(v.real) >= IMAG_TOL * scale:
            continue
        j = int(np.argmin(np.abs(vals - np.conj(v)) + np.where(np.isin(np.arange(len(vals)), list(used) + [i]), np.inf, 0)))
        pairs.append((i, j))
        used.update((i, j))
    return pairs


def decompose(L, pair: int | float | None = None) -> SpectralData:
    """Spectral decomposition of a real matrix around an elliptic pair.

    ``pair`` selects the Lyapunov pair: an index into the imaginary pairs
    sorted by frequency, or a target frequency.  Default is the slowest pair.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("L must be square")
    n = L.shape[0]
    scale = max(np.linalg.norm(L, 2), 1e-300)
    vals, vecs = np.linalg.eig(L)
    cond = float(np.linalg.cond(vecs))
    semisimple = bool(np.isfinite(cond) and cond < SEMISIMPLE_COND)
    pairs = sorted(_imaginary_pairs(vals, scale), key=lambda ij: vals[ij[0]].imag)
    if not pairs:
        return SpectralData(vals, vecs, None, vals, semisimple, None, None, float("nan"), cond)
    if pair is None:
        chosen = pairs[0]
    elif isinstance(pair, int):
        chosen = pairs[pair]
    else:
        chosen = min(pairs, key=lambda ij: abs(vals[ij[0]].imag - pair))
    i, j = chosen
    omega0 = float(vals[i].imag)
    rest = [q for q in range(n) if q not in chosen]
    complement = vals[rest]
    proj1 = proj2 = basis = None
    if semisimple:
        inv = np.linalg.inv(vecs)
        proj1 = np.real(vecs[:, [i, j]] @ inv[[i, j], :])
        proj2 = np.eye(n) - proj1
        basis = _real_basis(L, vecs[:, i], proj2, omega0)
    return SpectralData(vals, vecs, (i, j), complement, semisimple, proj1, proj2, omega0, cond, basis)


def _pair_vectors(v, omega):
    """Real vectors (e1, e2) from L v = i w v with L e1 = w e2, L e2 = -w e1 and |e1| = |e2|."""
    v = v / np.linalg.norm(v)
    # rotate the phase so Re v and Im v are orthogonal
    a = v.real @ v.real - v.imag @ v.imag
    b = 2 * v.real @ v.imag
    v = v * np.exp(0.5j * math.atan2(-b, a))
    e1, e2 = v.real, -v.imag
    norm = np.sqrt(0.5 * (e1 @ e1 + e2 @ e2))
    return e1 / norm, e2 / norm


def _real_basis(L, v, proj2, omega0) -> np.ndarray:
    """Columns e1, e2 spanning X1 followed by a real basis of X2.

    Every complex pair of the complement gets the same rotation-normal
    treatment, so the matrix of L in this basis is block diagonal with
    blocks [[a, -w], [w, a]] and 1x1 real blocks.
    """
    n = L.shape[0]
    e1, e2 = _pair_vectors(v, omega0)
    cols = [e1, e2]
    vals, vecs = np.linalg.eig(L)
    rest = []
    for idx in np.argsort(-vals.imag):
        lam = vals[idx]
        if abs(lam - 1j * omega0) < 1e-9 * max(1.0, omega0) or abs(lam + 1j * omega0) < 1e-9 * max(1.0, omega0):
            continue
        if lam.imag > 1e-12 * max(1.0, abs(lam)):
            a, b = _pair_vectors(vecs[:, idx], lam.imag)
            rest += [a, b]
        elif abs(lam.imag) <= 1e-12 * max(1.0, abs(lam)):
            rest.append(vecs[:, idx].real / np.linalg.norm(vecs[:, idx].real))
    if len(rest) != n - 2:
        u, _, _ = np.linalg.svd(proj2)
        rest = list(u[:, : n - 2].T)
    return np.column_stack(cols + rest)


def check_nonresonance(sd: SpectralData, mode: str = "lyapunov", tol: float = 1e-8,
                       eps_values=None, L=None, C=None, d: int = 2, k_max: int | None = None) -> GateResult:
    if not sd.has_pair:
        return GateResult(f"nonresonance:{mode}", False, {"omega0": None}, "no elliptic pair")
    w0 = sd.omega0
    mu = sd.complement
    if mode == "lyapunov":
        ratios = mu / (1j * w0)
        dist = np.abs(ratios - np.round(ratios.real)) if len(mu) else np.array([np.inf])
        worst = int(np.argmin(dist)) if len(mu) else -1
        ok = bool(np.all(dist > tol))
        return GateResult("nonresonance:lyapunov", ok,
                          {"omega0": w0, "mu": [complex(x) for x in mu],
                           "min_distance_to_integer": float(dist.min()) if len(mu) else None,
                           "worst_ratio": complex(ratios[worst]) if len(mu) else None})
    if mode == "pairwise":
        worst = math.inf
        hit = None
        for a in range(len(mu)):
            for b in range(len(mu)):
                if a == b:
                    continue
                diff = mu[a] - mu[b]
                bound = math.ceil(abs(diff) / w0) + 1
                for mm in range(-bound, bound + 1):
                    # multiplier condition exp(T0 mu_a) != exp(T0 mu_b): mu_a - mu_b not in i w0 Z
                    gap = abs(diff - 1j * mm * w0)
                    if gap < worst:
                        worst, hit = gap, (a, b, mm)
        ok = bool(worst > tol * max(1.0, w0))
        return GateResult("nonresonance:pairwise", ok, {"min_gap": float(worst), "witness": hit})
    if mode == "kappa":
        if L is None or C is None:
            raise ValueError("kappa mode needs L and C")
        if k_max is None:
            k_max = math.ceil(2 * max(np.abs(mu.imag).max(initial=0.0), w0) / w0) + d + 2
        eps_values = [1e-3, 5e-3, 1e-2, 5e-2, 1e-1] if eps_values is None else eps_values
        gaps = []
        for eps in eps_values:
            sde = decompose(np.asarray(L) + eps * np.asarray(C), pair=None)
            vals = sde.eigenvalues
            # follow the Lyapunov eigenvalue by continuity
            lam = vals[int(np.argmin(np.abs(vals - 1j * w0)))]
            others = vals[np.abs(vals - lam) > 1e-14]
            others = others[np.abs(others - np.conj(lam)) > 1e-14]
            g = min((abs(k * lam - m_) for k in range(-k_max, k_max + 1) for m_ in others), default=math.inf)
            gaps.append(g)
        ok = bool(min(gaps) > 0)
        return GateResult("nonresonance:kappa", ok, {"kappa": [float(g) for g in gaps],
                                                      "eps": list(map(float, eps_values)), "k_max": k_max})
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class PerturbedPair:
    lambda_plus: complex
    lambda_minus: complex
    alpha: float
    alpha_I: float
    eps_ref: float
    derivative: complex
    crosscheck_error: float

    @property
    def admissible(self) -> bool:
        return self.alpha > 0


def perturbed_pair(L, C, sd: SpectralData, eps_ref: float = 1e-4) -> PerturbedPair:
    """First-order motion of the Lyapunov eigenvalue under L + eps C."""
    if not sd.has_pair:
        raise ValueError("no elliptic pair")
    L = np.asarray(L, dtype=float)
    C = np.asarray(C, dtype=float)
    i = sd.lyapunov_pair[0]
    lam0 = sd.eigenvalues[i]
    right = sd.eigenvectors[:, i]
    lvals, lvecs = np.linalg.eig(L.T)
    left = lvecs[:, int(np.argmin(np.abs(lvals - lam0)))]
    dlam = (left @ C @ right) / (left @ right)
    vals = np.linalg.eigvals(L + eps_ref * C)
    lam_eps = vals[int(np.argmin(np.abs(vals - lam0)))]
    fd = (lam_eps - lam0) / eps_ref
    err = abs(fd - dlam) / max(abs(dlam), np.linalg.norm(C, 2), 1e-300)
    return PerturbedPair(lam_eps, np.conj(lam_eps), float(-dlam.real), float(dlam.imag),
                         eps_ref, complex(dlam), float(err))


def decay_gate(L, C, sd: SpectralData) -> GateResult:
    pp = perturbed_pair(L, C, sd)
    thresh = 1e-12 * max(np.linalg.norm(np.asarray(C), 2), 1e-300)
    ok = bool(pp.alpha > thresh)
    msg = "" if ok else "no first-order decay of the Lyapunov pair under the damping"
    return GateResult("decay", ok, {"alpha": pp.alpha, "alpha_I": pp.alpha_I,
                                      "crosscheck_error": pp.crosscheck_error}, msg)


def resonance_scan(sd: SpectralData, k_max: int = 6) -> list[dict]:
    """|k i w0 - mu| for every complement eigenvalue mu and |k| <= k_max."""
    rows = []
    for mu in sd.complement:
        for k in range(-k_max, k_max + 1):
            rows.append({"k": k, "mu": complex(mu), "distance": float(abs(1j * k * sd.omega0 - mu))})
    return rows


def run_gates(spec, pair=None) -> list[GateResult]:
    """All admission gates for a system, in pipeline order."""
    sd = decompose(spec.L, pair)
    out = [GateResult("elliptic_pair", sd.has_pair, {"omega0": sd.omega0 if sd.has_pair else None}),
           GateResult("semisimple", sd.semisimple, {"condition": sd.condition})]
    if not sd.has_pair:
        return out
    out.append(check_nonresonance(sd, "lyapunov"))
    out.append(check_nonresonance(sd, "pairwise"))
    out.append(decay_gate(spec.L, spec.C, sd))
    out.append(check_nonresonance(sd, "kappa", L=spec.L, C=spec.C))
    return out
