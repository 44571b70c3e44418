"""Functions on the disk of radius delta sampled on a (radius, angle) grid.

A real-analytic map of z = (z1, z2) is stored as

    K(z) = sum_k sum_i c[k, i] * Z_k(z) * g_i(s),   s = z1^2 + z2^2,

with Z_k = (zeta/delta)^k for k >= 0, (xi/delta)^|k| for k < 0, where
zeta = z1 + i z2 and xi = z1 - i z2, and g_i a Chebyshev polynomial in
sigma = 2 s / delta^2 - 1 optionally multiplied by (s/delta^2)^i0.  Every
basis function is a polynomial in (z1, z2), so the representation extends
to complex z and its Taylor jet at the origin is available in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as cheb


def chebyshev_radii(J: int, delta: float) -> np.ndarray:
    """Chebyshev-Gauss nodes in s = rho^2 on (0, delta^2], returned as increasing radii."""
    x = np.cos(np.pi * (2 * np.arange(J) + 1) / (2 * J))
    s = 0.5 * delta ** 2 * (1 + x)
    return np.sqrt(np.sort(s))


def angles(M: int) -> np.ndarray:
    return 2 * np.pi * np.arange(M) / M


@dataclass
class GridFunction:
    """Samples on the product grid rho[j] x theta[m]; values shape (J, M, ncomp)."""

    rho: np.ndarray
    values: np.ndarray

    @property
    def M(self) -> int:
        return self.values.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return angles(self.M)

    def modes(self) -> np.ndarray:
        """Fourier coefficients in theta, shape (J, M, ncomp), numpy FFT ordering."""
        return np.fft.fft(self.values, axis=1) / self.M

    def k_max(self) -> int:
        return self.M // 2 - 1

    def dtheta(self) -> "GridFunction":
        k = np.fft.fftfreq(self.M, 1.0 / self.M)
        k[self.M // 2] = 0
        d = np.fft.ifft(self.modes() * (1j * k)[None, :, None], axis=1) * self.M
        if np.isrealobj(self.values):
            d = d.real
        return GridFunction(self.rho, d)

    def reality_defect(self) -> float:
        return float(np.abs(np.imag(self.values)).max()) if np.iscomplexobj(self.values) else 0.0

    def tail(self, width: int = 2) -> float:
        """Relative size of the highest retained modes (cutoff adequacy)."""
        c = np.abs(self.modes())
        km = self.k_max()
        k = np.abs(np.fft.fftfreq(self.M, 1.0 / self.M))
        top = c[:, (k > km - width) & (k <= km)].max(initial=0.0)
        return float(top / max(c.max(), 1e-300))

    def __add__(self, other):
        return GridFunction(self.rho, self.values + other.values)

    def __sub__(self, other):
        return GridFunction(self.rho, self.values - other.values)

    def scale(self, a):
        return GridFunction(self.rho, a * self.values)

    def sup(self, weight_order: int = 0) -> float:
        w = self.rho[:, None] ** (-weight_order)
        return float((np.linalg.norm(self.values, axis=-1) * w).max())


class RadialFunction:
    """Scalar function of s = rho^2 as a Chebyshev series in sigma."""

    def __init__(self, coef, delta: float):
        self.coef = np.asarray(coef)
        self.delta = float(delta)

    @classmethod
    def fit(cls, rho, values, delta: float, degree: int | None = None) -> "RadialFunction":
        rho = np.asarray(rho, dtype=float)
        sigma = 2 * rho ** 2 / delta ** 2 - 1
        degree = len(rho) - 1 if degree is None else min(degree, len(rho) - 1)
        return cls(cheb.chebfit(sigma, np.asarray(values), degree), delta)

    @classmethod
    def constant(cls, value, delta: float) -> "RadialFunction":
        return cls(np.array([value]), delta)

    def __call__(self, s):
        return cheb.chebval(2 * np.asarray(s) / self.delta ** 2 - 1, self.coef)

    def ds(self, s):
        return cheb.chebval(2 * np.asarray(s) / self.delta ** 2 - 1, cheb.chebder(self.coef)) * 2 / self.delta ** 2

    def taylor(self, order: int) -> np.ndarray:
        """Coefficients of s^0..s^order at s = 0."""
        p = cheb.cheb2poly(self.coef)
        # substitute sigma = 2 s / delta^2 - 1
        out = np.zeros(order + 1, dtype=np.result_type(p, float))
        lin = np.array([-1.0, 2 / self.delta ** 2])
        acc = np.array([1.0])
        for c in p:
            m = min(len(acc), order + 1)
            out[:m] += c * acc[:m]
            acc = np.convolve(acc, lin)
        return out

    def to_json(self):
        return {"delta": self.delta, "re": np.real(self.coef).tolist(), "im": np.imag(self.coef).tolist()}

    @classmethod
    def from_json(cls, d):
        c = np.array(d["re"]) + 1j * np.array(d["im"])
        return cls(c.real if not np.any(c.imag) else c, d["delta"])


def _cheb_values(sigma, n):
    """T_0..T_{n-1} and their sigma-derivatives at sigma (any shape)."""
    sigma = np.asarray(sigma)
    T = np.empty((n,) + sigma.shape, dtype=np.result_type(sigma, float))
    dT = np.empty_like(T)
    if n == 0:
        return T, dT
    T[0], dT[0] = 1.0, 0.0
    if n > 1:
        T[1], dT[1] = sigma, 1.0
    for i in range(2, n):
        T[i] = 2 * sigma * T[i - 1] - T[i - 2]
        dT[i] = 2 * T[i - 1] + 2 * sigma * dT[i - 1] - dT[i - 2]
    return T, dT


class DiskFunction:
    """Analytic map from the disk to C^ncomp in the zeta/xi-Chebyshev basis."""

    def __init__(self, coef: dict[int, np.ndarray], delta: float, degree: int, ncomp: int, order: int = 0):
        self.coef = coef  # k -> array (nrad_k, ncomp)
        self.delta = float(delta)
        self.degree = int(degree)
        self.ncomp = int(ncomp)
        self.order = int(order)  # guaranteed vanishing order at the origin

    # -- basis bookkeeping -------------------------------------------------
    def radial_offset(self, k: int) -> int:
        return max(0, -(-(self.order - abs(k)) // 2))

    @staticmethod
    def radial_count(k: int, degree: int, offset: int) -> int:
        return max(0, (degree - abs(k)) // 2 + 1 - offset)

    @classmethod
    def zero(cls, delta, degree, ncomp, order=0):
        f = cls({}, delta, degree, ncomp, order)
        for k in range(-degree, degree + 1):
            n = cls.radial_count(k, degree, f.radial_offset(k))
            if n:
                f.coef[k] = np.zeros((n, ncomp), dtype=complex)
        return f

    @classmethod
    def fit(cls, grid: GridFunction, delta: float, degree: int, order: int = 0,
            weight: float = 1.0, kmax: int | None = None) -> "DiskFunction":
        """Least-squares fit of grid samples, mode by mode in theta."""
        vals = grid.values
        J, M, ncomp = vals.shape
        modes = np.fft.fft(vals, axis=1) / M
        rho = np.asarray(grid.rho, dtype=float)
        s = rho ** 2
        sig = 2 * s / delta ** 2 - 1
        kcap = min(degree, M // 2 - 1) if kmax is None else min(kmax, degree, M // 2 - 1)
        out = cls({}, delta, degree, ncomp, order)
        w = (delta / rho) ** weight
        T, _ = _cheb_values(sig, degree // 2 + 1)
        for k in range(-kcap, kcap + 1):
            off = out.radial_offset(k)
            nr = cls.radial_count(k, degree, off)
            if nr == 0:
                continue
            if nr > J:
                nr = J
            basis = ((rho / delta) ** abs(k) * (s / delta ** 2) ** off)[:, None] * T[:nr].T
            A = basis * w[:, None]
            b = modes[:, k % M, :] * w[:, None]
            c, *_ = np.linalg.lstsq(A, b, rcond=None)
            out.coef[k] = c
        # enforce conjugate symmetry for real samples
        if np.isrealobj(vals):
            for k in range(1, kcap + 1):
                if k in out.coef and -k in out.coef:
                    avg = 0.5 * (out.coef[k] + np.conj(out.coef[-k]))
                    out.coef[k], out.coef[-k] = avg, np.conj(avg)
            if 0 in out.coef:
                out.coef[0] = out.coef[0].real.astype(complex)
        return out

    # -- evaluation --------------------------------------------------------
    def _pieces(self, z):
        z = np.asarray(z)
        z1, z2 = z[..., 0], z[..., 1]
        zeta = (z1 + 1j * z2) / self.delta
        xi = (z1 - 1j * z2) / self.delta
        s = zeta * xi  # s / delta^2
        return zeta, xi, s

    def __call__(self, z) -> np.ndarray:
        zeta, xi, s = self._pieces(z)
        T, _ = _cheb_values(2 * s - 1, self.degree // 2 + 1)
        out = np.zeros(zeta.shape + (self.ncomp,), dtype=complex)
        for k, c in self.coef.items():
            off = self.radial_offset(k)
            g = np.tensordot(c.T, T[: c.shape[0]], axes=(1, 0))  # (ncomp, ...)
            Zk = zeta ** k if k >= 0 else xi ** (-k)
            out += np.moveaxis(g * (Zk * s ** off), 0, -1)
        return self._clean(out, z)

    def _clean(self, out, z):
        if np.isrealobj(z) and self.is_real():
            return out.real
        return out

    def is_real(self, tol: float = 1e-13) -> bool:
        for k, c in self.coef.items():
            o = self.coef.get(-k)
            if o is None or np.abs(c - np.conj(o)).max(initial=0.0) > tol * max(1.0, np.abs(c).max(initial=0.0)):
                return False
        return True

    def jacobian(self, z) -> np.ndarray:
        """d K / d(z1, z2), shape (..., ncomp, 2)."""
        zeta, xi, s = self._pieces(z)
        T, dT = _cheb_values(2 * s - 1, self.degree // 2 + 1)
        dzeta = np.zeros(zeta.shape + (self.ncomp,), dtype=complex)
        dxi = np.zeros_like(dzeta)
        for k, c in self.coef.items():
            off = self.radial_offset(k)
            nr = c.shape[0]
            g = np.tensordot(c.T, T[:nr], axes=(1, 0))
            gs = np.tensordot(c.T, 2 * dT[:nr], axes=(1, 0))  # d/d(s/delta^2)
            sp = s ** off
            dsp = off * s ** (off - 1) if off > 0 else 0.0
            G = g * sp
            Gs = gs * sp + g * dsp
            if k >= 0:
                Zk = zeta ** k
                dZ = k * zeta ** (k - 1) if k > 0 else 0.0
                dzeta += np.moveaxis(dZ * G + Zk * Gs * xi, 0, -1)
                dxi += np.moveaxis(Zk * Gs * zeta, 0, -1)
            else:
                q = -k
                Zk = xi ** q
                dZ = q * xi ** (q - 1)
                dxi += np.moveaxis(dZ * G + Zk * Gs * zeta, 0, -1)
                dzeta += np.moveaxis(Zk * Gs * xi, 0, -1)
        d1 = (dzeta + dxi) / self.delta
        d2 = 1j * (dzeta - dxi) / self.delta
        out = np.stack([d1, d2], axis=-1)
        return self._clean(out, z)

    # -- algebra -----------------------------------------------------------
    def _combine(self, other, fa, fb):
        if self.delta != other.delta:
            raise ValueError("disk radii differ")
        deg = max(self.degree, other.degree)
        out = DiskFunction({}, self.delta, deg, self.ncomp, min(self.order, other.order))
        for k in set(self.coef) | set(other.coef):
            off = out.radial_offset(k)
            n = DiskFunction.radial_count(k, deg, off)
            acc = np.zeros((n, self.ncomp), dtype=complex)
            for src, f in ((self, fa), (other, fb)):
                c = src.coef.get(k)
                if c is None:
                    continue
                shift = src.radial_offset(k) - off
                if shift != 0:
                    c = _shift_chebyshev(c, shift)
                acc[: c.shape[0]] += f * c[: n]
            out.coef[k] = acc
        return out

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def scale(self, a) -> "DiskFunction":
        return DiskFunction({k: a * c for k, c in self.coef.items()}, self.delta, self.degree, self.ncomp, self.order)

    def transform(self, A) -> "DiskFunction":
        """Apply a fixed linear map to the values."""
        A = np.asarray(A)
        return DiskFunction({k: c @ A.T for k, c in self.coef.items()}, self.delta, self.degree, A.shape[0], self.order)

    def coefficient_norm(self) -> float:
        return float(sum(np.abs(c).sum() for c in self.coef.values()))

    def taylor(self, degree: int) -> dict[tuple[int, int], np.ndarray]:
        """Taylor coefficients {(a, b): coeff} of z1^a z2^b up to total degree ``degree``."""
        from math import comb
        # collect coefficients of zeta^p xi^q (unscaled)
        zx: dict[tuple[int, int], np.ndarray] = {}
        d2 = self.delta ** 2
        for k, c in self.coef.items():
            off = self.radial_offset(k)
            nr = c.shape[0]
            for i in range(nr):
                unit = np.zeros(nr)
                unit[i] = 1.0
                poly = RadialFunction(unit, 1.0).taylor(degree)  # in t = s/delta^2... sigma = 2t - 1
                for j, pc in enumerate(poly):
                    e = j + off
                    tot = abs(k) + 2 * e
                    if tot > degree or pc == 0:
                        continue
                    p = e + max(k, 0)
                    q = e + max(-k, 0)
                    key = (p, q)
                    zx[key] = zx.get(key, 0) + pc * c[i] / self.delta ** abs(k) / d2 ** e
        # zeta^p xi^q = (z1 + i z2)^p (z1 - i z2)^q
        out: dict[tuple[int, int], np.ndarray] = {}
        for (p, q), c in zx.items():
            for a in range(p + 1):
                for b in range(q + 1):
                    coef = comb(p, a) * comb(q, b) * (1j) ** (p - a) * (-1j) ** (q - b)
                    key = (a + b, p - a + q - b)
                    out[key] = out.get(key, 0) + coef * c
        return out

    def to_json(self):
        return {"delta": self.delta, "degree": self.degree, "ncomp": self.ncomp, "order": self.order,
                "coef": {str(k): {"re": c.real.tolist(), "im": c.imag.tolist()} for k, c in sorted(self.coef.items())}}

    @classmethod
    def from_json(cls, d):
        coef = {int(k): np.array(v["re"]) + 1j * np.array(v["im"]) for k, v in d["coef"].items()}
        coef = {k: c.reshape(-1, d["ncomp"]) for k, c in coef.items()}
        return cls(coef, d["delta"], d["degree"], d["ncomp"], d["order"])


def _shift_chebyshev(c, shift):
    """Re-express t^a * sum c_i T_i(2t-1) in the t^(a+shift) basis, shift <= 0."""
    if shift > 0:
        raise ValueError("cannot lower the vanishing order of stored coefficients")
    out = c
    for _ in range(-shift):
        out = np.stack([cheb.chebmul(out[:, j], [0.5, 0.5]) for j in range(out.shape[1])], axis=1)
    return out
