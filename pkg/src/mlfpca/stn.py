"""Skew-t-normal distribution: density, moments, samplers and simplex MLE.

A variable ``z ~ StN(xi, sigma2, lam, nu)`` has density

    f(z) = 2 t_nu(z; xi, sigma2) Phi(lam (z - xi) / sigma)

and the hierarchical representation

    tau           ~ Gamma(nu/2, rate=nu/2)
    gamma | tau   ~ TN(0, (tau + lam^2) / tau; (0, inf))
    z | gamma,tau ~ N(xi + sigma lam gamma / (tau + lam^2), sigma2 / (tau + lam^2))

with posterior conditionals ``gamma | z ~ TN(lam (z - xi) / sigma, 1; (0, inf))``
and ``tau | z ~ Gamma((nu + 1)/2, rate=(nu + (z - xi)^2 / sigma2) / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

NU_MAX = 200.0
_LOG_NU_MAX = math.log(NU_MAX)
_TN_INVERSE_CDF_LIMIT = 0.999


class StNError(ValueError):
    pass


@dataclass(frozen=True)
class StNParams:
    xi: float
    sigma2: float
    lam: float
    nu: float

    def __post_init__(self):
        vals = (self.xi, self.sigma2, self.lam, self.nu)
        if not all(math.isfinite(v) for v in vals):
            raise StNError(f"non-finite skew-t-normal parameters {vals}")
        if self.sigma2 <= 0 or self.nu <= 0:
            raise StNError(f"sigma2 and nu must be positive, got {self.sigma2}, {self.nu}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def shifted(self, c: float) -> "StNParams":
        return replace(self, xi=self.xi + c)

    def to_dict(self) -> dict:
        return {"xi": self.xi, "sigma2": self.sigma2, "lambda": self.lam, "nu": self.nu}

    @classmethod
    def from_dict(cls, d: dict) -> "StNParams":
        return cls(float(d["xi"]), float(d["sigma2"]), float(d["lambda"]), float(d["nu"]))


@dataclass(frozen=True)
class StNLatents:
    tau: np.ndarray | float
    gamma: np.ndarray | float


def _log_pdf(z, xi, sigma2, lam, nu):
    sigma = np.sqrt(sigma2)
    x = (z - xi) / sigma
    return (
        math.log(2.0)
        + gammaln((nu + 1) / 2)
        - gammaln(nu / 2)
        - 0.5 * np.log(nu * math.pi * sigma2)
        - (nu + 1) / 2 * np.log1p(x * x / nu)
        + log_ndtr(lam * x)
    )


def stn_log_pdf(z, p: StNParams):
    """Log density; vectorised over ``z``."""
    out = _log_pdf(np.asarray(z, dtype=float), p.xi, p.sigma2, p.lam, p.nu)
    return float(out) if np.ndim(out) == 0 else out


def stn_pdf(z, p: StNParams):
    return np.exp(stn_log_pdf(z, p))


def stn_loglik(samples, p: StNParams) -> float:
    return float(np.sum(_log_pdf(np.asarray(samples, float), p.xi, p.sigma2, p.lam, p.nu)))


def stn_cdf(z, p: StNParams):
    """Distribution function by adaptive quadrature of the density.

    Used as a reference CDF; integrates on the standardised scale and splits
    at the location so both tails are handled by ``quad``'s infinite-range rule.
    """
    def dens(x):
        return 2.0 * math.exp(
            gammaln((p.nu + 1) / 2) - gammaln(p.nu / 2) - 0.5 * math.log(p.nu * math.pi)
            - (p.nu + 1) / 2 * math.log1p(x * x / p.nu)
        ) * ndtr(p.lam * x)

    lower_half, _ = integrate.quad(dens, -np.inf, 0.0, epsabs=1e-12, epsrel=1e-12)

    def one(zz):
        x = (zz - p.xi) / p.sigma
        if x <= 0:
            val, _ = integrate.quad(dens, -np.inf, x, epsabs=1e-12, epsrel=1e-12)
            return val
        val, _ = integrate.quad(dens, 0.0, x, epsabs=1e-12, epsrel=1e-12, limit=200)
        return lower_half + val

    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return one(float(z))
    return np.array([one(float(v)) for v in z.ravel()]).reshape(z.shape)


def stn_mean(p: StNParams) -> float:
    """Mean by quadrature on the standardised scale; requires ``nu > 1``."""
    if p.nu <= 1:
        raise StNError(f"mean does not exist for nu = {p.nu} <= 1")
    if p.lam == 0.0:
        return p.xi
    logc = gammaln((p.nu + 1) / 2) - gammaln(p.nu / 2) - 0.5 * math.log(p.nu * math.pi)

    # E[z - xi] = sigma * int_0^inf x t(x) 2 (2 Phi(lam x) - 1) dx by symmetry of t
    def integrand(x):
        t = math.exp(logc - (p.nu + 1) / 2 * math.log1p(x * x / p.nu))
        return 2.0 * x * t * (2.0 * ndtr(p.lam * x) - 1.0)

    body, _ = integrate.quad(integrand, 0.0, 50.0, epsabs=1e-11, limit=200)
    tail, _ = integrate.quad(integrand, 50.0, np.inf, epsabs=1e-11, limit=200)
    val = body + tail
    return p.xi + p.sigma * val


# --- truncated normal --------------------------------------------------------


def _robert_tail(a: float, rng: np.random.Generator) -> float:
    """Standard normal conditioned on (a, inf) by exponential-proposal rejection."""
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential(1.0 / alpha)
        if rng.random() <= math.exp(-0.5 * (z - alpha) ** 2):
            return z


def truncated_standard_normal(a, u, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws conditioned on ``(a, inf)``.

    ``u`` are pre-drawn uniforms used by the inverse-CDF route; entries deep in
    the upper tail (``Phi(a) >= 0.999``) fall back to rejection using ``rng``.
    """
    a = np.asarray(a, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), a.shape)
    out = np.empty(a.shape)
    tail = ndtr(a) >= _TN_INVERSE_CDF_LIMIT
    easy = ~tail
    # P(X > x) = u * P(X > a)  =>  x = -ndtri(u * Phi(-a)), stable for a << 0
    out[easy] = -ndtri(u[easy] * ndtr(-a[easy]))
    for idx in zip(*np.nonzero(tail)):
        out[idx] = _robert_tail(float(a[idx]), rng)
    return out


def sample_truncated_normal(mu, sigma2, lower, rng: np.random.Generator, size=None):
    """Draw from ``N(mu, sigma2)`` conditioned on ``(lower, inf)``.

    ``lower = -inf`` gives an ordinary normal draw.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.sqrt(np.asarray(sigma2, dtype=float))
    if np.any(sigma <= 0):
        raise StNError("sigma2 must be positive")
    shape = np.broadcast_shapes(mu.shape, sigma.shape, np.shape(lower)) if size is None else size
    if np.all(np.isneginf(lower)):
        out = mu + sigma * rng.standard_normal(shape)
    else:
        a = np.broadcast_to((np.asarray(lower, float) - mu) / sigma, shape)
        out = mu + sigma * truncated_standard_normal(a, rng.random(shape), rng)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TruncatedNormalLaw:
    """``N(mu, sigma2)`` restricted to ``(lower, inf)``."""

    mu: float
    sigma2: float = 1.0
    lower: float = 0.0

    def mean(self) -> float:
        s = math.sqrt(self.sigma2)
        a = (self.lower - self.mu) / s
        # mu + s * phi(a) / (1 - Phi(a)), via log-space ratio for stability
        log_ratio = -0.5 * a * a - 0.5 * math.log(2 * math.pi) - float(log_ndtr(-a))
        return self.mu + s * math.exp(log_ratio)

    def sample(self, rng: np.random.Generator, size=None):
        return sample_truncated_normal(self.mu, self.sigma2, self.lower, rng, size)


@dataclass(frozen=True)
class GammaLaw:
    shape: float
    rate: float

    def mean(self) -> float:
        return self.shape / self.rate

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)


def gamma_given_alpha(alpha: float, p: StNParams) -> TruncatedNormalLaw:
    return TruncatedNormalLaw((alpha - p.xi) * p.lam / p.sigma, 1.0, 0.0)


def tau_given_alpha(alpha: float, p: StNParams) -> GammaLaw:
    return GammaLaw((p.nu + 1) / 2, (p.nu + (alpha - p.xi) ** 2 / p.sigma2) / 2)


def sample_hierarchical(p: StNParams, rng: np.random.Generator, size=None):
    """Draw ``z`` through the (tau, gamma) hierarchy; returns ``(z, StNLatents)``."""
    tau = rng.gamma(p.nu / 2, 2.0 / p.nu, size)
    w = tau + p.lam**2
    gam = sample_truncated_normal(0.0, w / tau, 0.0, rng, size=np.shape(tau))
    z = p.xi + p.sigma * p.lam * gam / w + np.sqrt(p.sigma2 / w) * rng.standard_normal(np.shape(tau))
    if size is None:
        return float(z), StNLatents(float(tau), float(gam))
    return z, StNLatents(tau, gam)


# --- maximum likelihood ------------------------------------------------------

_PARAM_NAMES = ("xi", "sigma2", "lam", "nu")


def _to_unconstrained(p: StNParams) -> np.ndarray:
    return np.array([p.xi, math.log(p.sigma2), p.lam, math.log(p.nu)])


def fit_stn_mle(
    samples,
    init: StNParams,
    *,
    free: tuple[str, ...] = _PARAM_NAMES,
    max_iterations: int = 2000,
    xtol: float = 1e-6,
    min_samples: int = 50,
) -> StNParams:
    """Maximum-likelihood fit by Nelder-Mead over ``(xi, log sigma2, lam, log nu)``.

    ``nu`` is capped at 200 for free fits. Parameters not listed in ``free``
    are held at their ``init`` values. The simplex stops when every vertex is
    within ``xtol`` of the best one or after ``max_iterations`` iterations.
    """
    z = np.asarray(samples, dtype=float).ravel()
    if z.size < min_samples:
        raise StNError(f"need at least {min_samples} samples, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise StNError("samples must be finite")
    mask = np.array([name in free for name in _PARAM_NAMES])
    x0_full = _to_unconstrained(init)
    cap_nu = "nu" in free

    def unpack(x):
        full = x0_full.copy()
        full[mask] = x
        log_nu = min(full[3], _LOG_NU_MAX) if cap_nu else full[3]
        return full[0], math.exp(full[1]), full[2], math.exp(log_nu)

    def objective(x):
        xi, s2, lam, nu = unpack(x)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            val = -np.mean(_log_pdf(z, xi, s2, lam, nu))
        return val if np.isfinite(val) else np.inf

    f0 = objective(x0_full[mask])
    if not np.isfinite(f0):
        raise StNError(f"log-likelihood is not finite at the initial parameters {init}")

    scale = max(float(np.std(z)), 1e-8)
    steps = np.array([0.25 * scale, 0.3, 0.5, 0.5])[mask]
    x0 = x0_full[mask]
    simplex = np.vstack([x0] + [x0 + np.eye(len(x0))[j] * steps[j] for j in range(len(x0))])
    res = optimize.minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "xatol": xtol,
            "fatol": np.inf,
            "maxiter": max_iterations,
            "maxfev": 20 * max_iterations,
        },
    )
    best = res.x if res.fun <= f0 else x0
    fitted = dict(zip(_PARAM_NAMES, unpack(best)))
    # fixed parameters are returned exactly, not through exp(log(.))
    vals = [float(fitted[n]) if n in free else float(getattr(init, n)) for n in _PARAM_NAMES]
    return StNParams(*vals)
