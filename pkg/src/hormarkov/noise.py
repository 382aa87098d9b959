"""Lebesgue-lower-bounded noise laws and the chi/U/V splitting.

A law dominates ``eps_star * Lebesgue`` on the ball ``B(z_star, r_star)``.
Each draw is split as ``sqrt(delta) Z = chi U + (1 - chi) V`` with
``P(chi = 1) = m_star``, ``U`` carrying the smooth bump part of the density
and ``V`` the remainder.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import CertificateError

MAX_PROPOSALS = 10**6

# purposes for the counter-based streams
_P_CHI, _P_U, _P_V, _P_DIRECT = 1, 2, 3, 4


def bump(v: float, z) -> np.ndarray:
    """Smooth radial plateau: 1 on |z| <= v, 0 on |z| >= 2v.

    ``z`` has shape (..., N); returns shape (...).
    """
    if v <= 0:
        raise ValueError("v must be positive")
    r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
    out = np.zeros_like(r)
    out[r <= v] = 1.0
    shell = (r > v) & (r < 2 * v)
    s = r[shell] - v
    out[shell] = np.exp(1.0 - v * v / (v * v - s * s))
    return out


def bump_log_gradient(v: float, z) -> np.ndarray:
    """Gradient of ln bump; zero on the plateau and (by convention) outside 2v."""
    if v <= 0:
        raise ValueError("v must be positive")
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z, axis=-1)
    g = np.zeros_like(z)
    shell = (r > v) & (r < 2 * v)
    s = r[shell] - v
    radial = -2.0 * v * v * s / (v * v - s * s) ** 2
    g[shell] = (radial / r[shell])[:, None] * z[shell]
    return g


def bump_integral(v: float, N: int) -> float:
    """Integral of the bump over R^N by adaptive radial quadrature."""
    area = 2.0 * math.pi ** (N / 2) / math.gamma(N / 2)
    inner = v**N / N
    shell, _ = integrate.quad(
        lambda r: math.exp(1.0 - v * v / (v * v - (r - v) ** 2)) * r ** (N - 1),
        v,
        2 * v,
        epsabs=0.0,
        epsrel=1e-11,
        limit=200,
    )
    return area * (inner + shell)


def ball_volume(radius: float, N: int) -> float:
    return math.pi ** (N / 2) / math.gamma(N / 2 + 1) * radius**N


def _uniform_ball(stream, purpose, attempt, rows, N, radius):
    """Uniform points in the centred ball, two uniform slots per coordinate."""
    u = stream.uniform(purpose, N + 1, attempt, rows)
    if N == 1:
        return radius * (2.0 * u[:, :1] - 1.0)
    g = special.ndtri(u[:, :N])
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (radius * u[:, N:] ** (1.0 / N))


@dataclass
class SplitSample:
    """One split draw per row: ``sqrt(delta) Z = chi U + (1 - chi) V``."""

    chi: np.ndarray  # (M,) int8
    U: np.ndarray  # (M, N)
    V: np.ndarray  # (M, N)
    Z: np.ndarray  # (M, N)

    @property
    def scaled(self) -> np.ndarray:
        return np.where(self.chi[:, None] == 1, self.U, self.V)


@dataclass
class Moment:
    value: float
    std_error: float = 0.0
    exact: bool = True


class NoiseLaw:
    """Base class for centred, identity-covariance noise laws with a split certificate.

    Subclasses provide ``_draw(stream, purpose, attempt, rows)`` returning
    ``(z, ac_density)`` where ``ac_density`` is the absolutely continuous
    density at ``z`` (``inf`` for atoms), plus ``abs_moment(p)``.
    """

    law_id = "law"
    third_moment_zero = False
    bounded_by: float | None = None

    def __init__(self, N: int, eps_star: float, r_star: float, z_star=None, m_star: float | None = None):
        self.N = int(N)
        self.eps_star = float(eps_star)
        self.r_star = float(r_star)
        self.z_star = np.zeros(self.N) if z_star is None else np.asarray(z_star, dtype=float)
        computed = self.eps_star * bump_integral(self.r_star / 2, self.N)
        if m_star is not None and abs(m_star - computed) > 1e-6 * computed:
            raise CertificateError(f"stored m_star={m_star} disagrees with computed {computed}")
        if not 0 < computed < 1:
            raise CertificateError(f"m_star={computed} outside (0, 1)")
        self.m_star = computed

    # -- to be supplied by subclasses
    def _draw(self, stream, purpose, attempt, rows):
        raise NotImplementedError

    def density(self, z):
        """Absolutely continuous density; ``None`` when not available."""
        return None

    def abs_moment(self, p: float) -> float | None:
        return None

    # -- public API
    @property
    def certificate(self) -> dict:
        return {
            "eps_star": self.eps_star,
            "r_star": self.r_star,
            "z_star": self.z_star.tolist(),
            "m_star": self.m_star,
        }

    def describe(self) -> dict:
        return {"law_id": self.law_id, "N": self.N, **self.certificate, "third_moment_zero": self.third_moment_zero}

    def sample(self, stream, rows=None) -> np.ndarray:
        """Direct draws of Z, not split."""
        z, _ = self._draw(stream, _P_DIRECT, 0, rows)
        return z

    def _bump_part(self, z):
        return self.eps_star * bump(self.r_star / 2, z - self.z_star)

    def sample_split(self, delta: float, stream) -> SplitSample:
        M, N = len(stream), self.N
        sq = math.sqrt(delta)
        chi = (stream.uniform(_P_CHI, 1)[:, 0] < self.m_star).astype(np.int8)

        # U: uniform proposals on B(0, r_star) accepted with probability bump
        w = np.empty((M, N))
        todo = np.arange(M)
        for attempt in range(MAX_PROPOSALS):
            if todo.size == 0:
                break
            prop = _uniform_ball(stream, _P_U, attempt, todo, N, self.r_star)
            acc = stream.uniform(_P_U + 100, 1, attempt, todo)[:, 0] < bump(self.r_star / 2, prop)
            w[todo[acc]] = prop[acc]
            todo = todo[~acc]
        else:
            raise CertificateError("U rejection sampler stalled")

        # V: proposals from the law accepted with probability 1 - bump part / density
        v = np.empty((M, N))
        todo = np.arange(M)
        for attempt in range(MAX_PROPOSALS):
            if todo.size == 0:
                break
            prop, dens = self._draw(stream, _P_V, attempt, todo)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(np.isinf(dens), 0.0, self._bump_part(prop) / dens)
            if np.any(ratio > 1 + 1e-12):
                raise CertificateError("bump part exceeds the density: certificate invalid")
            acc = stream.uniform(_P_V + 100, 1, attempt, todo)[:, 0] < 1.0 - ratio
            v[todo[acc]] = prop[acc]
            todo = todo[~acc]
        else:
            raise CertificateError("V rejection sampler stalled")

        U = sq * (self.z_star + w)
        V = sq * v
        scaled = np.where(chi[:, None] == 1, U, V)
        return SplitSample(chi=chi, U=U, V=V, Z=scaled / sq)

    def moment(self, p: float, n_mc: int = 10**6, seed: int = 0) -> Moment:
        """1 v E|Z|^p, exact when the law knows it, Monte Carlo otherwise."""
        if p < 0:
            raise ValueError("p must be >= 0")
        exact = self.abs_moment(p)
        if exact is not None:
            return Moment(max(1.0, exact), 0.0, True)
        from .rng import StepStream

        z = self.sample(StepStream(seed, np.arange(n_mc), 0))
        a = np.linalg.norm(z, axis=1) ** p
        return Moment(max(1.0, float(a.mean())), float(a.std(ddof=1) / math.sqrt(n_mc)), False)

    def validate(self, strict: bool = False, n: int = 10**6, seed: int = 12345) -> dict:
        """Check the certificate; in strict mode also the first two moments."""
        report = {"m_star": self.m_star, "residual_checked": False}
        probe = np.linspace(-2 * self.r_star, 2 * self.r_star, 201)
        if self.N == 1:
            pts = self.z_star + probe[:, None]
        else:
            rng = np.random.default_rng(seed)
            pts = self.z_star + rng.uniform(-self.r_star, self.r_star, size=(2000, self.N))
        dens = self.density(pts)
        if dens is None:
            warnings.warn(f"{self.law_id}: no closed-form density, residual check skipped")
        else:
            resid = dens - self._bump_part(pts)
            report["residual_checked"] = True
            report["residual_min"] = float(resid.min())
            if resid.min() < -1e-12:
                raise CertificateError("residual measure negative on the probe grid")
        if strict:
            from .rng import StepStream

            z = self.sample(StepStream(seed, np.arange(n), 0))
            se = z.std(axis=0, ddof=1) / math.sqrt(n)
            mean_ok = bool(np.all(np.abs(z.mean(axis=0)) <= 3 * se))
            cov = np.cov(z.T).reshape(self.N, self.N)
            zz = np.einsum("mi,mj->mij", z, z)
            cov_se = zz.std(axis=0, ddof=1) / math.sqrt(n)
            cov_ok = bool(np.all(np.abs(cov - np.eye(self.N)) <= 3 * cov_se + 1e-12))
            report.update(mean_ok=mean_ok, cov_ok=cov_ok)
            if not (mean_ok and cov_ok):
                raise CertificateError(f"{self.law_id}: moments off (mean_ok={mean_ok}, cov_ok={cov_ok})")
        return report


class GaussianLaw(NoiseLaw):
    """Standard Gaussian on R^N, certified on the ball of radius ``r_star``."""

    law_id = "gaussian"
    third_moment_zero = True

    def __init__(self, N: int = 1, r_star: float = 1.0):
        eps = (2 * math.pi) ** (-N / 2) * math.exp(-r_star * r_star / 2)
        super().__init__(N, eps, r_star)

    def density(self, z):
        z = np.asarray(z, dtype=float)
        return (2 * math.pi) ** (-self.N / 2) * np.exp(-0.5 * np.sum(z * z, axis=-1))

    def _draw(self, stream, purpose, attempt, rows):
        z = stream.normal(purpose, self.N, attempt, rows)
        return z, self.density(z)

    def abs_moment(self, p):
        N = self.N
        return 2 ** (p / 2) * math.exp(math.lgamma((N + p) / 2) - math.lgamma(N / 2))


class UniformBallLaw(NoiseLaw):
    """Uniform on the ball of radius sqrt(N + 2): bounded, identity covariance."""

    law_id = "bounded-uniform"
    third_moment_zero = True

    def __init__(self, N: int = 1):
        self.radius = math.sqrt(N + 2)
        self.bounded_by = self.radius
        super().__init__(N, 1.0 / ball_volume(self.radius, N), self.radius)

    def density(self, z):
        r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
        return np.where(r <= self.radius, self.eps_star, 0.0)

    def _draw(self, stream, purpose, attempt, rows):
        z = _uniform_ball(stream, purpose, attempt, rows, self.N, self.radius)
        return z, np.full(len(z), self.eps_star)

    def abs_moment(self, p):
        return self.N * self.radius**p / (self.N + p)


class UniformMixtureLaw(NoiseLaw):
    """Uniform ball core mixed with symmetric atoms on the axes.

    With probability ``p`` draw uniformly from the ball of radius ``a``,
    otherwise pick one of the 2N points ``+-c e_i``; ``c`` is fixed by the
    unit covariance.  Symmetry makes all third moments vanish.
    """

    law_id = "uniform-mixture"
    third_moment_zero = True

    def __init__(self, N: int = 1, p: float = 0.6, a: float = 1.6):
        core = p * a * a / (N + 2)
        if not 0 < p < 1 or core >= 1:
            raise ValueError("need 0 < p < 1 and p a^2/(N+2) < 1")
        self.p, self.a = float(p), float(a)
        self.c = math.sqrt((1 - core) * N / (1 - p))
        self.bounded_by = max(self.a, self.c)
        super().__init__(N, p / ball_volume(a, N), a)

    def density(self, z):
        # density of the continuous part only; atoms are handled in _draw
        r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
        return np.where(r <= self.a, self.eps_star, 0.0)

    def _draw(self, stream, purpose, attempt, rows):
        N = self.N
        sel = stream.uniform(purpose + 50, 2, attempt, rows)
        z = _uniform_ball(stream, purpose, attempt, rows, N, self.a)
        atom = sel[:, 0] >= self.p
        axis = np.minimum((sel[:, 1] * 2 * N).astype(int), 2 * N - 1)
        pts = np.zeros((int(atom.sum()), N))
        ax = axis[atom]
        pts[np.arange(len(ax)), ax // 2] = np.where(ax % 2 == 0, self.c, -self.c)
        z[atom] = pts
        dens = np.where(atom, np.inf, self.eps_star)
        return z, dens

    def abs_moment(self, q):
        return self.p * self.N * self.a**q / (self.N + q) + (1 - self.p) * self.c**q


LAWS = {
    "gaussian": GaussianLaw,
    "bounded-uniform": UniformBallLaw,
    "uniform-mixture": UniformMixtureLaw,
}


def make_law(name: str, **params) -> NoiseLaw:
    try:
        cls = LAWS[name]
    except KeyError:
        raise ValueError(f"unknown law {name!r}; choose from {sorted(LAWS)}") from None
    return cls(**params)
